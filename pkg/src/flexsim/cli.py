"""``flexsim`` command line.

Exit codes: 0 success, 1 runtime error, 2 usage/parse error, 3 comparison
outside tolerance.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from flexsim.autoflex import AutoflexConfig, StatsSlot, initialize_slot, replay_stream
from flexsim.data import SyntheticDataset, load_csv
from flexsim.errors import FormatError
from flexsim.format import FlexFormat, quantize_tensor
from flexsim.nn import REFERENCE, TrainConfig, convnet_spec, mlp_spec, run_experiment, smooth
from flexsim.tensor import FlexTensor, dumps

log = logging.getLogger("flexsim")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_THRESHOLD = 0, 1, 2, 3

TRAIN_DEFAULTS = {
    "format": "flex16+5",
    "model": "mlp",
    "iters": 400,
    "batch": 64,
    "lr": 0.1,
    "seed": 0,
    "out": None,
    "trace": False,
    "data": None,
    "alpha": 2.0,
    "beta": 3.0,
    "gamma": 100.0,
    "window": 16,
}
_CASTS = {"iters": int, "batch": int, "seed": int, "window": int,
          "lr": float, "alpha": float, "beta": float, "gamma": float}


class UsageError(Exception):
    pass


def _format_arg(text):
    try:
        return str(FlexFormat.parse(text))
    except FormatError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _train_format_arg(text):
    if text.strip().lower() == REFERENCE:
        return REFERENCE
    return _format_arg(text)


def _bool(text):
    v = str(text).strip().lower()
    if v in {"1", "true", "yes", "on"}:
        return True
    if v in {"0", "false", "no", "off"}:
        return False
    raise UsageError(f"not a boolean: {text!r}")


def read_config(path) -> dict:
    """``key=value`` lines; blank lines and ``#`` comments ignored, unknown keys rejected."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in TRAIN_DEFAULTS:
            raise UsageError(f"{path}:{n}: unknown key {k!r}")
        out[k] = v
    return out


def resolve_train_config(args) -> dict:
    """defaults < config file < flags."""
    resolved = dict(TRAIN_DEFAULTS)
    if args.config:
        for k, v in read_config(args.config).items():
            if k == "trace":
                resolved[k] = _bool(v)
            elif k == "format":
                try:
                    resolved[k] = _train_format_arg(v)
                except argparse.ArgumentTypeError as exc:
                    raise UsageError(str(exc)) from None
            elif k in _CASTS:
                try:
                    resolved[k] = _CASTS[k](v)
                except ValueError:
                    raise UsageError(f"bad value for {k}: {v!r}") from None
            else:
                resolved[k] = v or None
    for k in TRAIN_DEFAULTS:
        v = getattr(args, k, None)
        if v is not None:
            resolved[k] = v
    if os.environ.get("FLEXSIM_TRACE", "").strip() == "1":
        resolved["trace"] = True
    if resolved["model"] not in ("mlp", "convnet"):
        raise UsageError(f"unknown model {resolved['model']!r}")
    if not resolved["out"]:
        raise UsageError("--out is required")
    return resolved


def cmd_train(args) -> int:
    conf = resolve_train_config(args)
    out = Path(conf["out"])
    out.mkdir(parents=True, exist_ok=True)
    with (out / "config.txt").open("w") as fh:
        for k, v in conf.items():
            fh.write(f"{k}={'' if v is None else v}\n")

    ds = load_csv(conf["data"]) if conf["data"] else SyntheticDataset(seed=conf["seed"])
    n_features = ds.X.shape[1]
    if conf["model"] == "mlp":
        spec = mlp_spec(n_features, 128, ds.n_classes)
    else:
        side = int(round(np.sqrt(n_features)))
        if side * side != n_features:
            raise ValueError(f"convnet needs a square number of features, got {n_features}")
        spec = convnet_spec(side, 4, ds.n_classes)
    cfg = TrainConfig(
        format=conf["format"], iterations=conf["iters"], batch_size=conf["batch"], lr=conf["lr"],
        seed=conf["seed"],
        autoflex=AutoflexConfig(conf["alpha"], conf["beta"], conf["gamma"], conf["window"]),
        trace_path=str(out / "trace.csv") if conf["trace"] and conf["format"] != REFERENCE else None,
    )
    result = run_experiment(spec, ds, cfg)
    with (out / "curve.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss", "accuracy"])
        for i, (l, a) in enumerate(zip(result.losses, result.accuracies)):
            w.writerow([i, repr(float(l)), repr(float(a))])
    print(f"format={cfg.format} final_loss_smoothed={smooth(result.losses)[-1]:.6f} "
          f"final_accuracy={result.final_accuracy:.4f} overflows={result.overflow_total} "
          f"kernel_calls={len(result.kernel_calls)} seconds={result.seconds:.2f}")
    return EXIT_OK


def read_curve(path):
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["iteration", "loss", "accuracy"]:
            raise UsageError(f"{path}: unexpected header {reader.fieldnames}")
        rows = list(reader)
    try:
        loss = np.array([float(r["loss"]) for r in rows])
        acc = np.array([float(r["accuracy"]) for r in rows])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{path}: {exc}") from None
    return loss, acc


def compare_curves(loss_a, loss_b, window=25):
    sa, sb = smooth(loss_a, window), smooth(loss_b, window)
    final_rel = abs(sb[-1] - sa[-1]) / abs(sa[-1]) if sa[-1] != 0 else abs(sb[-1] - sa[-1])
    return float(final_rel), float(np.max(np.abs(sb - sa)))


def cmd_compare(args) -> int:
    paths = []
    for d in (args.run_a, args.run_b):
        p = Path(d)
        p = p / "curve.csv" if p.is_dir() else p
        if not p.exists():
            raise UsageError(f"no curve.csv in {d}")
        paths.append(p)
    (la, aa), (lb, ab) = read_curve(paths[0]), read_curve(paths[1])
    if len(la) != len(lb) or len(la) == 0:
        raise UsageError(f"curve lengths differ or are empty ({len(la)} vs {len(lb)})")
    rel, gap = compare_curves(la, lb, args.smooth)
    acc_gap = abs(float(smooth(ab, args.smooth)[-1] - smooth(aa, args.smooth)[-1]))
    ok = bool(np.isfinite(rel)) and rel <= args.tol
    print(f"final_loss_rel_diff={rel:.6g} max_smoothed_loss_gap={gap:.6g} "
          f"final_batch_accuracy_gap={acc_gap:.6g} tol={args.tol} {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_THRESHOLD


def read_reals(path):
    text = Path(path).read_text().replace(",", " ")
    try:
        vals = np.array([float(tok) for tok in text.split()], dtype=np.float64)
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None
    if vals.size == 0:
        raise UsageError(f"{path}: no values")
    if not np.all(np.isfinite(vals)):
        raise UsageError(f"{path}: non-finite value")
    return vals


def cmd_replay(args) -> int:
    vals = read_reals(args.stream)
    fmt = FlexFormat.parse(args.format)
    cfg = AutoflexConfig(args.alpha, args.beta, args.gamma, args.window)
    steps = replay_stream(vals, fmt, cfg)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(["gamma", "kappa", "chi", "overflow"])
        for s in steps:
            w.writerow([s.gamma, repr(s.kappa), repr(s.chi), int(s.overflow)])
    finally:
        if args.out:
            fh.close()
    total = sum(s.overflow for s in steps)
    print(f"overflows={total}", file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


def cmd_quantize(args) -> int:
    vals = read_reals(args.input)
    fmt = FlexFormat.parse(args.format)
    slot = StatsSlot(fmt)
    calls = initialize_slot(slot, lambda: quantize_tensor(vals, slot.state, fmt)[1])
    mant, gamma, over = quantize_tensor(vals, slot.state, fmt)
    t = FlexTensor(mant, slot.state, fmt, gamma=gamma)
    print(f"exponent={slot.exponent} kappa={slot.kappa!r} gamma={gamma} "
          f"bits_used={gamma.bit_length()} of {fmt.mantissa_bits - 1} init_calls={calls}"
          + (" overflow" if over else ""))
    if args.out:
        Path(args.out).write_text(dumps(t))
    else:
        sys.stdout.write(dumps(t))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flexsim", description="Flexpoint / Autoflex simulator")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train an MLP or small convnet in flex or reference mode")
    t.add_argument("--format", type=_train_format_arg, help="flexN+M or 'reference'")
    t.add_argument("--model", choices=["mlp", "convnet"])
    t.add_argument("--iters", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="output directory")
    t.add_argument("--trace", action="store_const", const=True, help="write trace.csv")
    t.add_argument("--data", help="CSV dataset with a 'label' column (default: synthetic blobs)")
    t.add_argument("--alpha", type=float)
    t.add_argument("--beta", type=float)
    t.add_argument("--gamma", type=float)
    t.add_argument("--window", type=int)
    t.add_argument("--config", help="key=value file; flags override it")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("compare", help="compare two runs' learning curves")
    c.add_argument("run_a")
    c.add_argument("run_b")
    c.add_argument("--tol", type=float, default=0.02)
    c.add_argument("--smooth", type=int, default=25)
    c.set_defaults(func=cmd_compare)

    r = sub.add_parser("autoflex-replay", help="replay Autoflex over a stream of max-abs values")
    r.add_argument("stream")
    r.add_argument("--format", type=_format_arg, default="flex16+5")
    r.add_argument("--alpha", type=float, default=2.0)
    r.add_argument("--beta", type=float, default=3.0)
    r.add_argument("--gamma", type=float, default=100.0)
    r.add_argument("--window", type=int, default=16)
    r.add_argument("--out", help="CSV output (default: stdout)")
    r.set_defaults(func=cmd_replay)

    q = sub.add_parser("quantize", help="pick an exponent for a vector and dump its mantissas")
    q.add_argument("input")
    q.add_argument("format", nargs="?", type=_format_arg, default="flex16+5")
    q.add_argument("--out", help="write the tensor dump here instead of stdout")
    q.set_defaults(func=cmd_quantize)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on bad flags
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"flexsim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - top-level handler, mapped to exit 1
        print(f"flexsim: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
