"""Command-line entry point: ``doodlenet <subcommand> [flags]``.

Exit status is 0 on success, 1 on a usage error and 2 on a runtime error.
Every subcommand writes the fully resolved flags next to its outputs as
``key=value`` lines (``*.run.txt`` or ``run.txt``).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

from . import data as D
from . import evaluate as E
from . import gradcheck as G
from .model import VARIANTS, DooDLeNet, ModelConfig
from .netpbm import NetpbmError, read_netpbm
from .train import TrainConfig, fit, model_from_checkpoint

log = logging.getLogger("doodlenet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def write_run_config(path: str, command: str, args: argparse.Namespace) -> None:
    items = {"command": command}
    items.update({k: v for k, v in sorted(vars(args).items()) if k not in ("func", "verbose")})
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for k, v in items.items():
            if isinstance(v, (list, tuple)):
                v = ",".join(str(x) for x in v)
            f.write(f"{k}={v}\n")


def _stem(path: str) -> str:
    return path[:-5] if path.endswith(".ddlf") else path


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _csv_variants(text: str) -> list[str]:
    out = [x for x in text.split(",") if x]
    bad = [x for x in out if x not in VARIANTS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown variant(s) {bad}; choose from {VARIANTS}")
    return out


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=0.0005)
    p.add_argument("--gamma", type=float, default=0.95)
    p.add_argument("--crop", type=int, default=None, help="random crop size (default: no crop)")
    p.add_argument("--no-decay-norm", action="store_true",
                   help="exclude norm scale/shift from weight decay")
    p.add_argument("--aux-weight", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)


def _train_config(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                       momentum=args.momentum, weight_decay=args.weight_decay, gamma=args.gamma,
                       crop=args.crop, decay_norm=not args.no_decay_norm, seed=args.seed)


def _modalities(variant: str) -> tuple[str, ...]:
    return {"rgb": ("color",), "thermal": ("thermal",)}.get(variant, ("color", "thermal"))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    manifest = D.generate_dataset(args.n, args.size, args.classes, args.max_shift,
                                  args.day_fraction, args.seed, args.out, workers=args.workers)
    write_run_config(os.path.join(args.out, "run.txt"), "gen-data", args)
    print(f"wrote {len(manifest.records)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    data = D.SegDataset(args.data, _modalities(args.variant))
    size = data.manifest.size
    cfg = ModelConfig(num_classes=data.num_classes, height=size, width=size,
                      aux_weight=args.aux_weight, variant=args.variant, seed=args.seed)
    model = DooDLeNet(cfg)
    out_dir = os.path.dirname(args.out)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    stem = _stem(args.out)
    write_run_config(stem + ".run.txt", "train", args)
    result = fit(model, data, _train_config(args), args.out, resume=args.resume)
    reports = E.evaluate_subsets(model, data, "test")
    rows = []
    for subset in ("day", "night", "all"):
        rows += reports[subset].rows(args.variant, args.seed)
    E.write_metrics_csv(stem + ".metrics.csv", rows)
    print(f"best val mIoU {result['best_val_miou']:.4f}; test mIoU {reports['all'].miou:.4f}")
    return 0


def cmd_eval(args) -> int:
    model = model_from_checkpoint(args.checkpoint)
    cfg = model.config
    data = D.SegDataset(args.data, _modalities(cfg.variant))
    reports = E.evaluate_subsets(model, data, args.split)
    rows = []
    for subset in ("day", "night", "all"):
        rows += reports[subset].rows(cfg.variant, cfg.seed)
        r = reports[subset]
        print(f"{subset:5s} mAcc {r.macc:.4f} mIoU {r.miou:.4f} ({r.samples} samples)")
    if args.out:
        E.write_metrics_csv(args.out, rows)
        write_run_config(_stem(args.out.rsplit(".csv", 1)[0]) + ".run.txt", "eval", args)
    return 0


def cmd_ablate(args) -> int:
    data = D.SegDataset(args.data)
    os.makedirs(args.out_dir, exist_ok=True)
    write_run_config(os.path.join(args.out_dir, "run.txt"), "ablate", args)
    table = E.run_ablation(data, args.variants, args.seeds, _train_config(args), args.out_dir,
                           model_overrides={"aux_weight": args.aux_weight})
    for variant, row in E.median_table(table).items():
        print(f"{variant:10s} day {row['day_miou']:.4f} night {row['night_miou']:.4f} "
              f"all {row['all_miou']:.4f}")
    failed = [r for r in table if r["status"] != "ok"]
    return 2 if failed else 0


def cmd_gradcheck(args) -> int:
    ok = True
    for name, err in G.op_gradchecks(args.seed).items():
        passed = err < G.OP_TOLERANCE
        ok &= passed
        print(f"{name:18s} {err:.3e} {'ok' if passed else 'FAIL'}")
    if not args.ops_only:
        report = G.model_gradcheck(n_params=args.params, seed=args.seed)
        passed = report["max_rel_error"] < G.MODEL_TOLERANCE
        ok &= passed
        print(f"{'model':18s} {report['max_rel_error']:.3e} {'ok' if passed else 'FAIL'}")
    return 0 if ok else 2


def _load_one(args, model: DooDLeNet) -> D.SegSample:
    data = D.SegDataset(args.data, _modalities(model.config.variant))
    sample_id = args.id or data.ids("test")[0]
    return data.load(sample_id)


def cmd_viz_features(args) -> int:
    model = model_from_checkpoint(args.checkpoint)
    sample = _load_one(args, model)
    paths = E.export_mean_feature_maps(model, sample, args.out_dir, args.tag)
    write_run_config(os.path.join(args.out_dir, f"{sample.id}_features.run.txt"),
                     "viz-features", args)
    for p in paths:
        print(p)
    return 0


def cmd_overlay(args) -> int:
    model = model_from_checkpoint(args.checkpoint)
    sample = _load_one(args, model)
    E.export_overlay(model, sample, args.out)
    write_run_config(args.out + ".run.txt", "overlay", args)
    print(args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="doodlenet", description=__doc__.splitlines()[0])
    parser.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic paired dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--max-shift", type=int, default=3)
    p.add_argument("--day-fraction", type=float, default=0.52)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one variant")
    p.add_argument("--data", required=True)
    p.add_argument("--variant", choices=VARIANTS, default="full")
    p.add_argument("--out", required=True, help="final checkpoint path (.ddlf)")
    p.add_argument("--resume", default=None, help="checkpoint with optimizer buffers")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on day/night/all subsets")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=D.SPLITS, default="test")
    p.add_argument("--out", default=None, help="metrics CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate variants over seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--variants", type=_csv_variants, default=list(VARIANTS))
    p.add_argument("--seeds", type=_csv_ints, default=[0, 1, 2])
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every op and the model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--params", type=int, default=10, help="sampled model parameters")
    p.add_argument("--ops-only", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("viz-features", help="export mean encoder tap activations")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--id", default=None, help="sample id (default: first test sample)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--tag", default="")
    p.set_defaults(func=cmd_viz_features)

    p = sub.add_parser("overlay", help="render the prediction over the colour image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--id", default=None, help="sample id (default: first test sample)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_overlay)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, FloatingPointError, KeyError) as exc:
        print(f"doodlenet {args.command}: {exc}", file=sys.stderr)
        return 2


# ---------------------------------------------------------------------------
# end-to-end smoke run
# ---------------------------------------------------------------------------

def smoke_pipeline(tmp_dir: str, seed: int = 0) -> dict:
    """gen-data -> train (full, 2 epochs) -> eval -> viz-features -> overlay.

    Raises ``RuntimeError`` naming the failing stage. Returns per-stage wall
    times and the test metrics.
    """
    data_dir = os.path.join(tmp_dir, "data")
    ckpt = os.path.join(tmp_dir, "m.ddlf")
    metrics = os.path.join(tmp_dir, "eval.csv")
    feats = os.path.join(tmp_dir, "features")
    overlay = os.path.join(tmp_dir, "overlay.ppm")
    stages = [
        ("gen-data", ["gen-data", "--out", data_dir, "--n", "24", "--seed", str(seed)]),
        ("train", ["train", "--data", data_dir, "--variant", "full", "--epochs", "2",
                   "--seed", str(seed), "--out", ckpt]),
        ("eval", ["eval", "--data", data_dir, "--checkpoint", ckpt, "--out", metrics]),
        ("viz-features", ["viz-features", "--checkpoint", ckpt, "--data", data_dir,
                          "--out-dir", feats]),
        ("overlay", ["overlay", "--checkpoint", ckpt, "--data", data_dir, "--out", overlay]),
    ]
    timings = {}
    for name, argv in stages:
        start = time.perf_counter()
        code = main(argv)
        timings[name] = time.perf_counter() - start
        if code != 0:
            raise RuntimeError(f"smoke stage {name} exited with {code}")

    def check(stage, cond, what):
        if not cond:
            raise RuntimeError(f"smoke stage {stage}: {what}")

    manifest = D.read_manifest(data_dir)
    check("gen-data", len(manifest.records) == 24, "manifest record count")
    for r in manifest.records:
        for sub, ext in (("color", "ppm"), ("thermal", "pgm"), ("labels", "pgm")):
            try:
                read_netpbm(os.path.join(data_dir, sub, f"{r.id}.{ext}"))
            except (OSError, NetpbmError) as exc:
                raise RuntimeError(f"smoke stage gen-data: {exc}") from exc
    for suffix in (".ddlf", ".best.ddlf", ".history.csv", ".metrics.csv", ".run.txt"):
        check("train", os.path.exists(_stem(ckpt) + suffix), f"missing {suffix}")
    model_from_checkpoint(ckpt)
    rows = E.read_metrics_csv(metrics)
    values = [float(r[k]) for r in rows for k in ("acc", "iou", "macc", "miou") if r[k]]
    check("eval", values and all(0.0 <= v <= 1.0 for v in values), "metric out of range")
    files = sorted(f for f in os.listdir(feats) if f.endswith(".pgm"))
    check("viz-features", len(files) == 4, "expected 4 feature maps")
    for f in files:
        read_netpbm(os.path.join(feats, f))
    check("overlay", read_netpbm(overlay).shape == (64, 64, 3), "overlay size")
    means = {r["subset"]: float(r["miou"]) for r in rows if r["class"] == "__mean__"}
    return {"timings": timings, "total_seconds": sum(timings.values()), "test_miou": means}


if __name__ == "__main__":
    sys.exit(main())
