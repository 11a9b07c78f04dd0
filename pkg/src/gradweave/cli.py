"""Command-line entry point: ``gradweave {train,eval,gradcheck,ablate}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from gradweave import experiment as ex
from gradweave.datakit import PGMError, SynthConfig, generate_dataset, read_manifest
from gradweave.gradcheck import run_gradcheck
from gradweave.network import CheckpointError, load_checkpoint

log = logging.getLogger("gradweave")

# flag dest -> RunConfig / SynthConfig key
_FLAG_KEYS = {
    "mode": "mode",
    "eta": "eta",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "seed": "seed",
    "dominance": "dominance",
    "bg_cue": "background_cue_strength",
    "out": "out_dir",
    "shuffle_projections": "shuffle_projections",
    "optimizer": "optimizer",
    "n_train": "n_train",
    "n_test": "n_test",
}


class UsageError(Exception):
    pass


def _run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--mode", choices=sorted(ex.MODES))
    p.add_argument("--eta", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--dominance", type=float)
    p.add_argument("--bg-cue", type=float)
    p.add_argument("--out")
    p.add_argument("--shuffle-projections", action="store_true", default=None)
    p.add_argument("--optimizer", choices=("sgd", "adam"))
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradweave", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    _run_options(sub.add_parser("train", help="train one model and write diag.csv, model.ckpt, summary.txt"))

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a manifest or a synthetic split")
    ev.add_argument("checkpoint")
    ev.add_argument("--manifest", help="index,path_R,path_T,path_GT file of PGM images")
    ev.add_argument("--fused-only", action="store_true", help="score the fused stream alone")
    _run_options(ev)

    gc = sub.add_parser("gradcheck", help="compare autodiff against central finite differences")
    gc.add_argument("--eps", type=float, default=1e-5)
    gc.add_argument("--points", type=int, default=20)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)

    ab = sub.add_parser("ablate", help="run the four ablation arms over several seeds")
    ab.add_argument("--seeds", type=int, default=5)
    _run_options(ab)
    return parser


def resolve_config(args) -> ex.RunConfig:
    file_values = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"--config: no such file {path}")
        try:
            file_values = ex.parse_config_text(path.read_text())
        except ValueError as e:
            raise UsageError(f"--config: {e}") from None
    overrides = {key: getattr(args, dest, None) for dest, key in _FLAG_KEYS.items()}
    for flag, key in (("--eta", "eta"), ("--dominance", "dominance"), ("--bg-cue", "background_cue_strength")):
        v = overrides.get(key)
        if v is not None and key == "eta" and not v > 0:
            raise UsageError(f"{flag} must be positive, got {v}")
        if v is not None and key != "eta" and not 0.0 <= v <= 1.0:
            raise UsageError(f"{flag} must lie in [0, 1], got {v}")
    try:
        return ex.build_config(file_values, overrides)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    result = ex.train(cfg)
    ex.write_run(result, cfg.out_dir)
    print(f"mae={result.test_mae:.6f} max_f={result.test_max_f:.6f}")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    try:
        model = load_checkpoint(args.checkpoint)
    except (OSError, CheckpointError) as e:
        print(f"error: cannot load checkpoint: {e}", file=sys.stderr)
        return 1
    if args.manifest:
        try:
            samples = read_manifest(args.manifest)
        except (OSError, ValueError, PGMError) as e:
            print(f"error: cannot read manifest: {e}", file=sys.stderr)
            return 1
    else:
        synth = SynthConfig(**{**cfg.synth.__dict__, "H": model.config.H, "W": model.config.W})
        samples = list(enumerate(generate_dataset(synth, cfg.n_test, "test")))
    mc = model.config
    bad = [i for i, s in samples if s.GT.shape != (mc.H, mc.W)]
    if bad:
        print(
            f"error: sample {bad[0]} has shape {samples[0][1].GT.shape}, checkpoint expects {mc.H}x{mc.W}",
            file=sys.stderr,
        )
        return 1
    use_streams = not args.fused_only
    rows = ex.write_predictions(model, samples, cfg.out_dir, use_streams)
    m = sum(r[1] for r in rows) / len(rows)
    f = sum(r[2] for r in rows) / len(rows)
    print(f"mae={m:.6f} max_f={f:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    if not args.eps > 0:
        raise UsageError(f"--eps must be positive, got {args.eps}")
    print(f"# gradcheck eps={args.eps:g} points={args.points} tol={args.tol:g}")
    report = run_gradcheck(
        points=args.points, eps=args.eps, seed=args.seed, tol=args.tol, inject_fault=args.inject_fault
    )
    worst = report.worst
    print(
        f"worst rel_err={worst.rel_err:.3e} at stream={worst.stream} group={worst.group} "
        f"param={worst.param} (point {worst.point}, {worst.kind})"
    )
    print(f"checked {report.points} points, {report.comparisons} stream/group vectors, {report.elapsed:.1f}s")
    if report.passed:
        print("PASS")
        return 0
    print(f"FAIL: worst parameter path {worst.param}")
    return 1


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    if args.seeds < 1:
        raise UsageError("--seeds must be at least 1")
    table = ex.run_grid(cfg, ex.ABLATION_ARMS, range(cfg.seed, cfg.seed + args.seeds))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ex.write_ablation(table, out / "ablation.csv")
    (out / "config.txt").write_text(cfg.dump())
    for arm, s in table.items():
        print(f"{ex.ARM_LABELS[arm]:22s} mae={s.median_mae:.6f} max_f={s.median_max_f:.6f} grad_ratio={s.median_grad_ratio:.4f}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"gradweave {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
