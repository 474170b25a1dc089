"""Command-line front end wiring the pipeline stages together.

Subcommands: synth, preprocess, index build, train, eval, infer,
bench memory, bench sampling, model describe.  Exit code 0 on success, 2 on
usage errors, 1 with a one-line diagnostic otherwise.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

from .errors import DustpipeError
from .granule_io import (
    DatasetManifest,
    ManifestEntry,
    SyntheticConfig,
    generate_synthetic_dataset,
    read_granule,
    write_granule,
)
from .inference import infer_scene, write_map, write_pgm
from .model3d import ModelConfig, describe_checkpoint, load_checkpoint
from .patch_index import build_index, write_index
from .preprocess import PreprocessConfig, preprocess_pipeline
from .training import LossConfig, TrainConfig, evaluate, train


def _cmd_synth(args) -> int:
    cfg = SyntheticConfig(
        min_plumes=args.min_plumes,
        max_plumes=args.max_plumes,
        amplitude=args.amplitude,
        noise_sigma=args.noise_sigma,
        nan_fraction=args.nan_fraction,
        label_density=args.label_density,
    )
    manifest = generate_synthetic_dataset(
        args.out, seed=args.seed, count=args.count, height=args.height,
        width=args.width, channels=args.channels, config=cfg,
        patch_size=args.patch_size,
    )
    print(f"wrote {len(manifest)} granule/label pairs under {args.out}")
    return 0


def _cmd_preprocess(args) -> int:
    manifest = DatasetManifest.load(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = PreprocessConfig(impute_window=args.window, rng_seed=args.seed,
                           fallback=args.fallback)
    entries = []
    for f, entry in enumerate(manifest):
        granule = read_granule(entry.granule)
        processed = preprocess_pipeline(granule, cfg, folder_index=f)
        gpath = out_dir / Path(entry.granule).name
        lpath = out_dir / Path(entry.labels).name
        write_granule(processed, gpath)
        shutil.copyfile(entry.labels, lpath)
        entries.append(ManifestEntry(granule=gpath, labels=lpath))
    out_manifest = DatasetManifest(entries)
    out_manifest.save(out_dir / "manifest.json")
    print(f"preprocessed {len(entries)} granules into {out_dir}")
    return 0


def _cmd_index_build(args) -> int:
    manifest = DatasetManifest.load(args.manifest)
    index = build_index(manifest, args.patch_size)
    write_index(index, args.out)
    print(f"indexed {len(index)} patch centers -> {args.out}")
    return 0


def _cmd_train(args) -> int:
    filters = tuple(int(v) for v in args.filters.split(","))
    if len(filters) != 3:
        raise DustpipeError(f"--filters needs three comma-separated counts, got {args.filters!r}")
    manifest_train = DatasetManifest.load(args.manifest_train)
    manifest_val = DatasetManifest.load(args.manifest_val)
    channels = read_granule(manifest_train.entries[0].granule).channels
    model_cfg = ModelConfig(filters=filters, in_depth=channels,
                            patch_size=args.patch_size)
    train_cfg = TrainConfig(
        learning_rate=args.lr, weight_decay=args.wd,
        plateau_patience=args.patience, passes=args.passes,
        partitions=args.partitions, sub_epochs=args.sub_epochs,
        batch_size=args.batch, seed=args.seed,
    )
    result = train(manifest_train, manifest_val, args.out,
                   model_config=model_cfg, train_cfg=train_cfg,
                   loss_cfg=LossConfig(alpha=args.alpha))
    print(f"final checkpoint: {result.final_checkpoint}")
    print(f"best checkpoint:  {result.best_checkpoint} "
          f"(val wmse {result.best_val_wmse:.6g})")
    print(f"training log:     {result.log_path}")
    return 0


def _cmd_eval(args) -> int:
    manifest = DatasetManifest.load(args.manifest_test)
    report = evaluate(args.ckpt, manifest, alpha=args.alpha,
                      batch_size=args.batch)
    payload = json.dumps(report.to_dict(), indent=2)
    if args.report:
        Path(args.report).write_text(payload + "\n", encoding="utf-8")
        print(f"report written to {args.report}")
    print(payload)
    return 0


def _cmd_infer(args) -> int:
    params, _ = load_checkpoint(args.ckpt)
    granule = read_granule(args.granule)
    if args.preprocess:
        granule = preprocess_pipeline(granule, PreprocessConfig(rng_seed=args.seed))
    dmap = infer_scene(params, granule, batch_size=args.batch)
    write_map(dmap, args.out)
    print(f"detection map written to {args.out}")
    if args.pgm:
        write_pgm(dmap, args.pgm)
        print(f"preview written to {args.pgm}")
    return 0


def _cmd_bench_memory(args) -> int:
    from .bench import bench_memory

    report = bench_memory(args.small, args.large, batch_size=args.batch,
                          patch_size=args.patch_size, seed=args.seed)
    payload = json.dumps(report.to_dict(), indent=2)
    if args.report:
        Path(args.report).write_text(payload + "\n", encoding="utf-8")
    print(payload)
    return 0


def _cmd_bench_sampling(args) -> int:
    from .bench import bench_sampling

    report = bench_sampling(args.manifest, batch_size=args.batch,
                            seed=args.seed, duration_seconds=args.seconds,
                            patch_size=args.patch_size)
    payload = json.dumps(report.to_dict(), indent=2)
    if args.report:
        Path(args.report).write_text(payload + "\n", encoding="utf-8")
    print(payload)
    return 0


def _cmd_model_describe(args) -> int:
    print(describe_checkpoint(args.ckpt))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dustpipe",
        description="Desk-scale multispectral dust-detection pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--channels", type=int, default=38)
    p.add_argument("--patch-size", type=int, default=5)
    p.add_argument("--nan-fraction", type=float, default=0.05)
    p.add_argument("--min-plumes", type=int, default=0)
    p.add_argument("--max-plumes", type=int, default=3)
    p.add_argument("--amplitude", type=float, default=0.5)
    p.add_argument("--noise-sigma", type=float, default=0.02)
    p.add_argument("--label-density", type=float, default=1.0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("preprocess", help="normalize and impute a dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--fallback", choices=["band-mean", "zero"], default="band-mean")
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("index", help="patch-center index operations")
    isub = p.add_subparsers(dest="index_command", required=True)
    pb = isub.add_parser("build", help="build and write an index")
    pb.add_argument("--manifest", required=True)
    pb.add_argument("--patch-size", type=int, default=5)
    pb.add_argument("--out", required=True)
    pb.set_defaults(func=_cmd_index_build)

    p = sub.add_parser("train", help="train the detector")
    p.add_argument("--manifest-train", required=True)
    p.add_argument("--manifest-val", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--passes", type=int, default=3)
    p.add_argument("--partitions", type=int, default=5)
    p.add_argument("--sub-epochs", type=int, default=3)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--wd", type=float, default=1e-6)
    p.add_argument("--patience", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patch-size", type=int, default=5)
    p.add_argument("--filters", default="32,64,128")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest-test", required=True)
    p.add_argument("--report")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--batch", type=int, default=1024)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("infer", help="full-scene detection map")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--granule", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pgm")
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--preprocess", action="store_true",
                   help="normalize and impute the granule before inference")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("bench", help="performance benchmarks")
    bsub = p.add_subparsers(dest="bench_command", required=True)
    pm = bsub.add_parser("memory", help="peak-RSS decoupling benchmark")
    pm.add_argument("--small", required=True)
    pm.add_argument("--large", required=True)
    pm.add_argument("--batch", type=int, default=256)
    pm.add_argument("--patch-size", type=int, default=5)
    pm.add_argument("--seed", type=int, default=0)
    pm.add_argument("--report")
    pm.set_defaults(func=_cmd_bench_memory)
    ps = bsub.add_parser("sampling", help="indexed vs naive sampling throughput")
    ps.add_argument("--manifest", required=True)
    ps.add_argument("--batch", type=int, default=256)
    ps.add_argument("--seconds", type=float, default=10.0)
    ps.add_argument("--seed", type=int, default=0)
    ps.add_argument("--patch-size", type=int, default=5)
    ps.add_argument("--report")
    ps.set_defaults(func=_cmd_bench_sampling)

    p = sub.add_parser("model", help="model utilities")
    msub = p.add_subparsers(dest="model_command", required=True)
    pd = msub.add_parser("describe", help="print a checkpoint's tensor census")
    pd.add_argument("ckpt")
    pd.set_defaults(func=_cmd_model_describe)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    try:
        return args.func(args)
    except DustpipeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
