"""Command-line driver: ``groupdp {account,calibrate,train,variance,synth}``.

Exit codes: 0 success, 2 usage, 3 infeasible privacy target or batch
configuration, 4 data error. Any flag may also be given in a plain-text
``key=value`` file passed with ``--config``; explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import accountant as acc
from .data import DEFAULT_SYNTH, DataError, generate_synthetic, write_csv
from .models import ModelParams, init_params
from .runner import calibrate_config, reference_rate, resolve_dataset, train_test_split
from .sampling import SamplingError, round_to_total
from .trainers import ALGORITHMS, ConfigError, TrainConfig, train
from .variance import (
    VarianceDomainError,
    analytic_variance,
    between_group_term,
    empirical_variance,
    group_gradient_stats,
)

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_DATA = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True)


def _sizes(text: str) -> tuple[int, ...]:
    try:
        sizes = tuple(int(s) for s in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not sizes or min(sizes) < 1:
        raise argparse.ArgumentTypeError("group sizes must be positive")
    return sizes


def _common_privacy(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int, default=1000, help="number of model updates T")
    p.add_argument("--k", type=int, default=50, help="reweight every k steps")
    p.add_argument("--gamma-loss", type=float, default=1.0, help="loss-release sampling rate")
    p.add_argument("--dro-scale", type=float, default=25.0, help="loss noise multiplier / model noise multiplier")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="groupdp", description="Group-robust training under differential privacy.")
    parser.add_argument("--version", action="version", version=f"groupdp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("account", help="privacy spent by a subsampled Gaussian training schedule")
    p.add_argument("--config", type=Path)
    p.add_argument("--gamma", type=float, help="model sampling rate (single-mechanism mode)")
    p.add_argument("--kappa", type=float, required=True, help="model noise multiplier")
    p.add_argument("--delta", type=float, required=True)
    _common_privacy(p)
    p.set_defaults(k=None)
    p.add_argument("--kappa-loss", type=float, help="loss noise multiplier (default dro-scale * kappa)")
    p.add_argument("--algo", choices=("azb", "azb-weak", "azb-prop"), help="per-group mode for the aZB family")
    p.add_argument("--sizes", type=_sizes, help="group sizes for per-group mode, e.g. 1000,1000,100")
    p.add_argument("--batch", type=int, help="batch size for per-group mode")

    p = sub.add_parser("calibrate", help="noise multiplier meeting an (eps, delta) target")
    p.add_argument("--config", type=Path)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--delta", type=float, help="default 1/(2n) when sizes or data are given")
    p.add_argument("--algo", choices=ALGORITHMS, default="dpsgd")
    p.add_argument("--gamma", type=float, help="model sampling rate; otherwise derived from --batch and sizes")
    p.add_argument("--batch", type=int)
    p.add_argument("--sizes", type=_sizes)
    p.add_argument("--data", help="dataset whose training split supplies group sizes")
    p.add_argument("--split-seed", type=int, default=0)
    _common_privacy(p)

    p = sub.add_parser("train", help="train one model and write history.jsonl and report.json")
    p.add_argument("--config", type=Path)
    p.add_argument("--algo", choices=ALGORITHMS, default="asc")
    p.add_argument("--data", default="synth:default", help="CSV path, synth:default or synth:default:SEED")
    p.add_argument("--eval-data", help="held-out dataset; without it --data is split 80/10/10")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--standardize", action="store_true", help="z-score features with training statistics")
    p.add_argument("--eps", type=float, help="privacy target; calibrates the noise")
    p.add_argument("--delta", type=float, help="default 1/(2n) over the training split")
    p.add_argument("--sigma", type=float, help="explicit gradient noise std (instead of --eps)")
    p.add_argument("--tau", type=float, help="explicit loss noise std (default dro-scale * sigma * zeta / xi)")
    p.add_argument("--alpha", type=int, default=8, help="working RDP order with explicit noise")
    p.add_argument("--batch", type=int, default=512)
    p.add_argument("--lr", type=float, default=1.0)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--temperature", type=float, default=0.02)
    p.add_argument("--xi", type=float, default=1.0, help="gradient clip threshold")
    p.add_argument("--zeta", type=float, default=1.0, help="loss clip threshold")
    p.add_argument("--arch", choices=("softmax", "mlp"), default="softmax")
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    _common_privacy(p)
    p.set_defaults(steps=100, k=10)

    p = sub.add_parser("variance", help="analytic and Monte Carlo sampling variance of the DRO update")
    p.add_argument("--config", type=Path)
    p.add_argument("--data", default="synth:default")
    p.add_argument("--batch", type=int, nargs="+", default=[32, 64, 128])
    p.add_argument("--trials", type=int, default=0, help="Monte Carlo trials per scheme (0: analytic only)")
    p.add_argument("--params", type=Path, help="report.json from a training run; default is a seeded init")
    p.add_argument("--standardize", action="store_true", help="z-score features before computing gradients")
    p.add_argument("--arch", choices=("softmax", "mlp"), default="softmax")
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="also write the table as JSON here")

    p = sub.add_parser("synth", help="write the default synthetic dataset as CSV")
    p.add_argument("--config", type=Path)
    p.add_argument("--seed", type=int, default=DEFAULT_SYNTH.seed)
    p.add_argument("--out", type=Path, required=True, help="CSV file to write")
    return parser


def read_config_file(path: Path) -> dict[str, str]:
    values = {}
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror or exc}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def parse_args(argv: Sequence[str] | None) -> argparse.Namespace:
    """Parse flags, filling anything not given on the command line from ``--config``."""
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    found, _ = pre.parse_known_args(argv)
    if found.config is None or not argv or argv[0] not in COMMANDS:
        return parser.parse_args(argv)
    subparser = parser._subparsers._group_actions[0].choices[argv[0]]
    known = {a.dest: a for a in subparser._actions}
    given = {
        a.dest
        for a in subparser._actions
        for opt in a.option_strings
        if any(tok == opt or tok.startswith(opt + "=") for tok in argv)
    }
    extra = []
    for key, value in read_config_file(found.config).items():
        if key not in known or key in ("config", "help"):
            raise UsageError(f"{found.config}: unknown key {key!r}")
        if key not in given:
            extra += [known[key].option_strings[0]] + value.split()
    return parser.parse_args(argv[:1] + extra + argv[1:])


# --------------------------------------------------------------------------
# subcommands


def cmd_account(args) -> int:
    kappa_loss = args.kappa_loss if args.kappa_loss is not None else args.dro_scale * args.kappa
    if args.algo is not None:
        if args.sizes is None or args.batch is None:
            raise UsageError("--algo needs --sizes and --batch")
        variant = {"azb": "base", "azb-weak": "weak", "azb-prop": "prop"}[args.algo]
        curves = acc.total_epsilon_zhou(
            variant, args.steps, args.k, args.batch, args.sizes, args.kappa, args.gamma_loss, kappa_loss
        )
    else:
        if args.gamma is None:
            raise UsageError("give --gamma, or --algo with --sizes and --batch")
        curve = acc.RdpCurve.zeros()
        if args.kappa > 0 and args.gamma > 0:
            curve = acc.rdp_curve(acc.MechanismSpec(args.gamma, args.kappa)).scale(args.steps)
        elif args.gamma > 0:
            raise UsageError("kappa must be positive when gamma > 0")
        R = acc.n_reweights(args.steps, args.k)
        if R:
            curve = curve + acc.rdp_curve(acc.MechanismSpec(args.gamma_loss, kappa_loss)).scale(R)
        curves = {0: curve}
    per_group = []
    for g, curve in curves.items():
        eps, alpha = acc.rdp_to_dp(curve, args.delta)
        per_group.append({"group": g, "epsilon": eps, "order": alpha, "rdp": curve.as_dict()})
    orders = next(iter(curves.values())).orders
    worst = acc.RdpCurve(orders, tuple(np.max([c.eps for c in curves.values()], axis=0)))
    eps_u, alpha_u = acc.rdp_to_dp(worst, args.delta)
    print(_dump({"delta": args.delta, "per_group": per_group, "uniform": {"epsilon": eps_u, "order": alpha_u}}))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    sizes = args.sizes
    if args.data is not None:
        sizes = train_test_split(resolve_dataset(args.data), args.split_seed)[0].sizes
    if args.gamma is not None:
        gamma = args.gamma
    elif args.batch is not None and sizes is not None:
        gamma = reference_rate(args.algo, args.batch, sizes)
    else:
        raise UsageError("give --gamma, or --batch with --sizes or --data")
    delta = args.delta
    if delta is None:
        if sizes is None:
            raise UsageError("--delta is required without --sizes or --data")
        delta = 1.0 / (2 * sum(sizes))
    k = None if args.algo == "dpsgd" else args.k
    cal = acc.calibrate_base_noise(args.eps, delta, args.steps, gamma, k, args.gamma_loss, args.dro_scale)
    out = {
        "algorithm": args.algo,
        "gamma": gamma,
        "delta": delta,
        "kappa_model": cal.kappa_model,
        "kappa_loss": cal.kappa_loss if k is not None else None,
        "order": cal.alpha,
        "epsilon": cal.epsilon,
    }
    if args.algo == "asc" and args.batch is not None and sizes is not None:
        out["eps_step"] = acc.subsampled_gaussian_rdp(cal.alpha, acc.MechanismSpec(args.batch / sum(sizes), cal.kappa_model))
    print(_dump(out))
    return EXIT_OK


def _explicit_config(args, base: TrainConfig, n: int) -> TrainConfig:
    tau = args.tau if args.tau is not None else args.dro_scale * args.sigma * args.zeta / args.xi
    eps_step = None
    if args.algo == "asc":
        kappa = args.sigma / args.xi
        if kappa <= 0:
            raise UsageError("ASC with explicit noise needs sigma > 0")
        eps_step = acc.subsampled_gaussian_rdp(args.alpha, acc.MechanismSpec(args.batch / n, kappa))
    return replace(base, sigma=args.sigma, tau=tau, eps_step=eps_step, working_alpha=args.alpha)


def cmd_train(args) -> int:
    if (args.eps is None) == (args.sigma is None):
        raise UsageError("give exactly one of --eps (calibrated noise) or --sigma (explicit noise)")
    dataset = resolve_dataset(args.data)
    if args.eval_data is None:
        train_data, test_data = train_test_split(dataset, args.split_seed)
    else:
        train_data, test_data = dataset, resolve_dataset(args.eval_data)
        if (test_data.G, test_data.d) != (train_data.G, train_data.d):
            raise DataError("evaluation data must have the same groups and features as the training data")
    if args.standardize:
        X, _, _ = train_data.pooled()
        mean, std = X.mean(axis=0), X.std(axis=0)
        train_data, test_data = train_data.standardized(mean, std), test_data.standardized(mean, std)
    M = args.batch
    if args.algo in ("azb", "azb-weak") and M > min(train_data.sizes):
        raise acc.PrivacyDomainError(f"batch size {M} exceeds the smallest training group ({min(train_data.sizes)})")
    base = TrainConfig(
        algorithm=args.algo, T=args.steps, M=M, lr=args.lr, sigma=1.0, xi=args.xi,
        temperature=args.temperature, gamma_loss=args.gamma_loss, zeta=args.zeta, k=args.k,
        eps_step=1.0, momentum=args.momentum, delta=args.delta, eval_every=args.eval_every,
        arch=args.arch, hidden=args.hidden, seed=args.seed,
    )  # fmt: skip
    calibration = None
    if args.eps is not None:
        config, cal = calibrate_config(base, train_data, args.eps, args.delta, args.dro_scale)
        calibration = {"kappa_model": cal.kappa_model, "kappa_loss": cal.kappa_loss, "order": cal.alpha, "epsilon": cal.epsilon}
    else:
        config = _explicit_config(args, base, train_data.n)
    report = train(config, train_data, eval_data=test_data)
    body = report.to_dict()
    history = body.pop("history")
    target = args.eps
    over = [
        {"group": row["group"], "size": row["size"], "epsilon": row["epsilon"]}
        for row in body["privacy"]["per_group"]
        if target is not None and row["epsilon"] > target * (1 + 1e-9)
    ]
    body.update(
        version=__version__,
        data={"source": args.data, "eval_source": args.eval_data, "split_seed": args.split_seed,
              "standardize": args.standardize,
              "train_sizes": list(train_data.sizes), "test_sizes": list(test_data.sizes)},
        target={"epsilon": target, "delta": report.delta},
        calibration=calibration,
        final=history[-1],
        groups_over_target=over,
    )  # fmt: skip
    args.out.mkdir(parents=True, exist_ok=True)
    with (args.out / "history.jsonl").open("w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    (args.out / "report.json").write_text(_dump(body) + "\n", encoding="utf-8")
    final = history[-1]
    print(f"{args.algo}: WGA {final['wga']:.4f}  AVG {final['avg']:.4f}  "
          f"eps(max group) {max(r['epsilon'] for r in body['privacy']['per_group']):.4g}  delta {report.delta:.3g}")  # fmt: skip
    for row in over:
        print(f"warning: group {row['group']} (n={row['size']}) has epsilon {row['epsilon']:.4g}, above the target {target}")
    return EXIT_OK


def _load_params(path: Path) -> ModelParams:
    try:
        blob = json.loads(path.read_text(encoding="utf-8"))["params"]
        return ModelParams(blob["arch"], blob["d"], blob["c"], np.asarray(blob["theta"], dtype=float), blob["h"])
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: not a training report with params ({exc})") from None


def cmd_variance(args) -> int:
    data = resolve_dataset(args.data)
    if args.standardize:
        data = data.standardized()
    rng = np.random.default_rng(args.seed)
    params = _load_params(args.params) if args.params else init_params(args.arch, data.d, data.c, rng, h=args.hidden)
    if (params.d, params.c) != (data.d, data.c):
        raise DataError("params do not match the dataset's feature and class counts")
    stats = group_gradient_stats(data, params)
    G, n = data.G, data.n
    rows = []
    smallest = min(data.sizes)
    for M in args.batch:
        if M < 1 or M > n:
            raise VarianceDomainError(f"batch {M} must lie between 1 and the dataset size {n}")
        # Equal target weights. ASC realises them as an integral allocation and
        # uses lam_g = m_g / M; the aZB schemes sample groups from the exact weights.
        lam = np.full(G, 1.0 / G)
        alloc = round_to_total(M * lam, M, rng)
        prop = round_to_total(np.asarray(data.sizes) * M / n, M, rng)
        row = {"M": M, "lambda": lam.tolist(), "allocation": alloc.tolist(), "prop_allocation": prop.tolist(),
               "between_group": between_group_term(stats, lam)}  # fmt: skip
        for method, weights, a in (("asc", alloc / M, alloc), ("azb", lam, None), ("azb_prop", lam, prop)):
            if method == "azb" and M > smallest:
                note = f"batch {M} exceeds the smallest group ({smallest}); aZB cannot sample it"
            else:
                try:
                    entry = {"analytic": analytic_variance(method, stats, weights, M, a)}
                    note = None
                except VarianceDomainError as exc:
                    note = str(exc)
            if note is not None:
                print(f"groupdp: warning: M={M}, {method}: {note}", file=sys.stderr)
                row[method] = {"analytic": None, "error": note}
                continue
            if args.trials:
                mc = empirical_variance(method, data, params, weights, M, args.trials, rng, allocation=a)
                entry.update(empirical=mc.variance, empirical_se=mc.variance_se)
            row[method] = entry
        rows.append(row)
    table = {"version": __version__, "data": args.data, "seed": args.seed, "trials": args.trials, "rows": rows}
    text = _dump(table)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_synth(args) -> int:
    dataset = generate_synthetic(replace(DEFAULT_SYNTH, seed=args.seed))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(dataset, args.out)
    print(f"wrote {dataset.n} rows in {dataset.G} groups to {args.out}")
    return EXIT_OK


COMMANDS = {
    "account": cmd_account,
    "calibrate": cmd_calibrate,
    "train": cmd_train,
    "variance": cmd_variance,
    "synth": cmd_synth,
}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"groupdp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse already printed the message
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"groupdp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (acc.CalibrationError, acc.PrivacyDomainError, VarianceDomainError, SamplingError) as exc:
        print(f"groupdp: infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except DataError as exc:
        print(f"groupdp: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
