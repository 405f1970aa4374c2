"""Command-line interface: one subcommand per pipeline step.

Every command that produces an artifact also writes a run manifest next to
it. Errors go to stderr as ``error[<kind>]: <message>`` with a fixed exit
code per kind.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time

import numpy as np

from . import checkpoint, graph
from .architectures import FAMILIES, build_reference
from .checkpoint import CheckpointError
from .graph import NetworkSpec, SpecError, init_params, parameter_count, receptive_radius
from .imaging import (
    DatasetManifest,
    ImageReadError,
    load_dataset,
    load_samples,
    save_samples,
    split_train_val,
    write_probability_maps,
)
from .metrics import METRIC_NAMES
from .ops import ShapeError
from .patching import DEFAULT_PATCH_SIZE, DEFAULT_STRIDE, PatchDataset, plan_grid
from .pipeline import (
    REGIMES,
    LineageError,
    RunManifest,
    evaluate_regime,
    phase1_build_patch_db,
    phase3_transfer,
    segment_image,
    segment_image_by_patches,
)
from .training import History, TrainConfig, Trainer

THREADS_ENV = "PATCH2IMG_THREADS"

# (prefix, exit code) per error family
EXIT_CODES = {
    "internal": 1,
    "usage": 2,
    "io": 3,
    "spec": 4,
    "value": 5,
}

# phase that produces the weights each regime evaluates
EVAL_PHASES = {"patch": 2, "image-scratch": 2, "image-frozen": 3, "image-finetuned": 4}

log = logging.getLogger("patch2img")


class CliError(Exception):
    def __init__(self, kind, message):
        super().__init__(message)
        self.kind = kind


def _write_json(path, obj):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=1, default=_jsonable)
    os.replace(tmp, path)


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, (tuple, set)):
        return list(v)
    return str(v)


def vars_config(args):
    return {k: v for k, v in vars(args).items() if k not in ("func",)}


def _sidecar(ckpt_path):
    return f"{ckpt_path}.json"


def _resolve_spec(args, ckpt_path=None):
    """``--spec`` file, else ``--family``, else the spec saved next to the checkpoint."""
    if getattr(args, "spec", None):
        with open(args.spec) as fh:
            return NetworkSpec.from_yaml(fh.read())
    if getattr(args, "family", None):
        return build_reference(args.family)
    if ckpt_path:
        path = os.path.join(os.path.dirname(os.path.abspath(ckpt_path)), "spec.yaml")
        if os.path.exists(path):
            with open(path) as fh:
                return NetworkSpec.from_yaml(fh.read())
    raise CliError("usage", "no network given: pass --family or --spec")


def _save_checkpoint(path, params, spec):
    tmp = f"{path}.tmp"
    h = checkpoint.save(tmp, params, spec)
    os.replace(tmp, path)
    return h


def _dataset_id(data_dir):
    try:
        with open(os.path.join(data_dir, "provenance.json")) as fh:
            return json.load(fh)["fingerprint"]
    except (FileNotFoundError, KeyError):
        return os.path.abspath(data_dir)


# -- prepare ---------------------------------------------------------------

def cmd_prepare(args):
    manifest = DatasetManifest.load(args.manifest)
    if args.resize:
        manifest.resize = tuple(args.resize)
        manifest.__post_init__()
    if args.steps is not None:
        manifest.preprocess = tuple(args.steps)
    if args.gamma is not None:
        manifest.gamma = args.gamma
    if args.gamma_mode is not None:
        manifest.gamma_mode = args.gamma_mode
    if args.clahe_clip is not None:
        manifest.clahe_clip = args.clahe_clip
    if args.clahe_tiles is not None:
        manifest.clahe_tiles = tuple(args.clahe_tiles)
    fingerprint = manifest.fingerprint()
    prov_path = os.path.join(args.out, "provenance.json")
    if not args.force and os.path.exists(prov_path) and os.path.exists(
            os.path.join(args.out, "samples.npz")):
        with open(prov_path) as fh:
            if json.load(fh).get("fingerprint") == fingerprint:
                print(f"cache hit: {args.out} is up to date")
                return 0
    samples = load_dataset(manifest)
    save_samples(args.out, samples)
    splits = {}
    for s in samples:
        splits[s.split] = splits.get(s.split, 0) + 1
    _write_json(prov_path, {
        "fingerprint": fingerprint,
        "manifest": os.path.abspath(args.manifest),
        "resize": manifest.resize,
        "preprocess": manifest.preprocess_settings(),
        "splits": splits,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    })
    print(f"prepared {len(samples)} images into {args.out} ({splits})")
    return 0


# -- extract-patches -------------------------------------------------------

def cmd_extract_patches(args):
    samples = load_samples(args.data)
    train, val = split_train_val(samples, args.val_fraction, args.seed)
    summary = {}
    for name, part, seed in (("train", train, args.seed), ("val", val, args.seed + 1)):
        db, stats = phase1_build_patch_db(part, args.strategy, args.patch_size, args.stride,
                                          args.n_pos, args.n_neg, seed)
        db.save(os.path.join(args.out, name))
        stats["images_ids"] = [s.id for s in part]
        summary[name] = stats
        print(f"{name}: {stats['count']} patches from {stats['images']} images "
              f"(foreground {stats['positive_fraction']:.3f})")
    manifest = RunManifest(phase=1, dataset=_dataset_id(args.data), spec="-", regime="patch",
                           seed=args.seed, config=vars_config(args), extra=summary)
    manifest.save(os.path.join(args.out, "run.json"))
    return 0


# -- train -----------------------------------------------------------------

def _train_config(args):
    overrides = {"seed": args.seed, "augment": not args.no_augment}
    for name in ("batch_size", "lr0", "decay_factor", "plateau_patience", "lr_floor",
                 "val_fraction"):
        value = getattr(args, name)
        if value is not None:
            overrides[name] = value
    if args.patience is not None:
        overrides["early_stop_patience"] = args.patience if args.patience > 0 else None
    if args.max_epochs is not None:
        overrides["max_epochs"] = args.max_epochs
    return TrainConfig.for_mode(args.mode, **overrides)


def _load_training_data(args, config):
    if args.mode == "patch":
        try:
            train_db = PatchDataset.load(os.path.join(args.data, "train"))
            val_db = PatchDataset.load(os.path.join(args.data, "val"))
        except FileNotFoundError:
            raise ImageReadError(f"{args.data}: not a patch database (run extract-patches)") from None
        return (train_db.images, train_db.masks), (val_db.images, val_db.masks)
    samples = load_samples(args.data)
    train, val = split_train_val(samples, config.val_fraction, config.seed)
    return ([s.image for s in train], [s.mask for s in train]), \
        ([s.image for s in val], [s.mask for s in val])


def cmd_train(args):
    spec = _resolve_spec(args, args.init)
    config = _train_config(args)
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "model.ckpt")
    state_path = os.path.join(args.out, "state.npz")
    hist_path = os.path.join(args.out, "history.json")

    parent = parent_phase = None
    if args.init:
        if args.mode != "image":
            raise CliError("usage", "--init is only meaningful for image-mode fine-tuning")
        params = checkpoint.load(args.init, spec)
        parent = checkpoint.file_hash(args.init)
        try:
            parent_phase = RunManifest.load(_sidecar(args.init)).phase
        except FileNotFoundError:
            raise LineageError(
                f"{args.init}: no run manifest beside the checkpoint; cannot verify it "
                "comes from patch training") from None
        regime, phase = "image-finetuned", 4
    else:
        params = init_params(spec, args.seed)
        regime, phase = ("patch", 2) if args.mode == "patch" else ("image-scratch", 2)

    train, val = _load_training_data(args, config)
    trainer = Trainer(spec, params, config, args.mode)
    with open(os.path.join(args.out, "spec.yaml"), "w") as fh:
        fh.write(spec.to_yaml())

    if args.resume and os.path.exists(state_path):
        with open(hist_path) as fh:
            saved = json.load(fh)
        if saved.get("spec_hash") != spec.hash().hex():
            raise CheckpointError(f"{state_path}: saved state belongs to a different network")
        with np.load(state_path) as d:
            trainer.load_state_dict(dict(d), History.from_list(saved["history"]))
        print(f"resuming after epoch {trainer.epoch}")

    def on_epoch(t):
        rec = t.history[-1]
        print(f"epoch {rec.epoch:4d}  lr {rec.lr:.3g}  train {rec.train_loss:.6f}  "
              f"val {rec.val_loss:.6f}", flush=True)
        _save_checkpoint(ckpt_path, t.best_params, spec)
        np.savez(state_path + ".tmp.npz", **t.state_dict())
        os.replace(state_path + ".tmp.npz", state_path)
        _write_json(hist_path, {"spec_hash": spec.hash().hex(), "history": t.history.to_list()})

    if not trainer.stopped:
        trainer.fit(train, val, epochs=args.epochs, callback=on_epoch)
    file_hash = _save_checkpoint(ckpt_path, trainer.best_params, spec)
    manifest = RunManifest(
        phase=phase, dataset=_dataset_id(args.data), spec=spec.name, regime=regime,
        seed=args.seed, spec_hash=spec.hash().hex(), parent=parent, parent_phase=parent_phase,
        checkpoint=file_hash, config={**config.to_dict(), "mode": args.mode},
        extra={"epochs_run": trainer.epoch, "best_val_loss": min(trainer.history.val_losses),
               "stopped": trainer.stopped},
    )
    manifest.save(_sidecar(ckpt_path))
    print(f"best val loss {min(trainer.history.val_losses):.6f}; checkpoint {ckpt_path}")
    return 0


# -- transfer ----------------------------------------------------------------

def cmd_transfer(args):
    spec = _resolve_spec(args, args.checkpoint)
    f_p = checkpoint.load(args.checkpoint, spec)
    f_i = phase3_transfer(f_p, spec)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    h = _save_checkpoint(args.out, f_i, spec)
    with open(os.path.join(out_dir, "spec.yaml"), "w") as fh:
        fh.write(spec.to_yaml())
    try:
        parent_run = RunManifest.load(_sidecar(args.checkpoint))
        dataset = parent_run.dataset
    except FileNotFoundError:
        dataset = "-"
    RunManifest(phase=3, dataset=dataset, spec=spec.name, regime="image-frozen",
                spec_hash=spec.hash().hex(), parent=checkpoint.file_hash(args.checkpoint),
                parent_phase=2, checkpoint=h).save(_sidecar(args.out))
    print(f"transferred {parameter_count(spec)} parameters to {args.out} (sha256 {h[:16]})")
    return 0


# -- eval --------------------------------------------------------------------

def cmd_eval(args):
    spec = _resolve_spec(args, args.checkpoint)
    params = checkpoint.load(args.checkpoint, spec)
    samples = load_samples(args.data, args.split)
    if not samples:
        raise CliError("value", f"split {args.split!r} is empty in {args.data}")
    result = evaluate_regime(spec, params, samples, args.regime, args.patch_size, args.stride,
                             use_fov=args.fov, keep_probs=True)
    os.makedirs(args.out, exist_ok=True)
    report = result.report
    data = report.to_dict()
    data.update(regime=args.regime, seconds_per_image=result.seconds_per_image,
                threshold=args.threshold, fov=args.fov)
    _write_json(os.path.join(args.out, "metrics.json"), data)
    if not args.no_maps:
        maps = os.path.join(args.out, "maps")
        for s, p in zip(samples, result.probs):
            write_probability_maps(maps, s.id, p, args.threshold)
    ckpt_hash = checkpoint.file_hash(args.checkpoint)
    try:
        source = RunManifest.load(_sidecar(args.checkpoint))
        phase, parent, parent_phase = source.phase, source.parent, source.parent_phase
    except FileNotFoundError:
        phase, parent, parent_phase = EVAL_PHASES[args.regime], ckpt_hash, 2
    RunManifest(phase=phase, dataset=_dataset_id(args.data), spec=spec.name,
                regime=args.regime, spec_hash=spec.hash().hex(), parent=parent,
                parent_phase=parent_phase, checkpoint=ckpt_hash,
                config=vars_config(args)).save(os.path.join(args.out, "run.json"))
    print("  ".join(f"{m.upper()} {getattr(report, m):.4f}" for m in METRIC_NAMES))
    print(f"{len(samples)} images, {result.seconds_per_image:.3f} s/image; report in {args.out}")
    return 0


# -- bench -------------------------------------------------------------------

def _bench_inputs(args):
    if args.data:
        samples = load_samples(args.data, args.split)
        if not samples:
            raise CliError("value", f"split {args.split!r} is empty in {args.data}")
        return samples[: args.n] if args.n else samples
    from .imaging import ImageSample

    rng = np.random.default_rng(args.seed)
    h, w = args.size
    return [
        ImageSample(rng.random((1, 1, h, w), dtype=np.float32), np.zeros((1, 1, h, w)), (h, w),
                    f"random{i}")
        for i in range(args.n or 3)
    ]


def _best_time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def bench_family(spec, params, samples, patch_size, stride, repeats=1):
    """Mean seconds per image for one-pass and patch-aggregated segmentation.

    Each image is timed ``repeats`` times per method and the fastest run
    kept, which filters out interference from other processes.
    """
    segment_image(spec, params, samples[0])  # warm-up
    t_img = t_patch = 0.0
    for s in samples:
        t_img += _best_time(lambda: segment_image(spec, params, s), repeats)
        t_patch += _best_time(
            lambda: segment_image_by_patches(spec, params, s, patch_size, stride), repeats)
    n = len(samples)
    return {
        "family": spec.name,
        "patches_per_image": len(plan_grid(samples[0].size, patch_size, stride)),
        "image_seconds": t_img / n,
        "patch_seconds": t_patch / n,
        "speedup": t_patch / t_img,
        "repeats": repeats,
    }


def cmd_bench(args):
    samples = _bench_inputs(args)
    rows = []
    if args.checkpoint:
        spec = _resolve_spec(args, args.checkpoint)
        targets = [(spec, checkpoint.load(args.checkpoint, spec))]
    else:
        names = [args.family] if args.family else list(FAMILIES)
        targets = [(build_reference(f), None) for f in names]
    for spec, params in targets:
        params = params if params is not None else init_params(spec, args.seed)
        rows.append(bench_family(spec, params, samples, args.patch_size, args.stride,
                                 args.repeats))
    hardware = (f"{platform.machine()} {platform.processor() or ''} cpus={os.cpu_count()} "
                f"threads={args.threads or os.environ.get(THREADS_ENV, 'default')}").strip()
    size = "x".join(str(v) for v in samples[0].size)
    print(f"segmentation time per image, {len(samples)} image(s) of {size}, {hardware}")
    print(f"{'family':<12}{'patches':>9}{'image s':>11}{'patch s':>11}{'speedup':>9}")
    for r in rows:
        print(f"{r['family']:<12}{r['patches_per_image']:>9}{r['image_seconds']:>11.4f}"
              f"{r['patch_seconds']:>11.4f}{r['speedup']:>8.1f}x")
    if args.out:
        _write_json(args.out, {"hardware": hardware, "image_size": samples[0].size,
                               "images": len(samples), "rows": rows})
    return 0


# -- info ----------------------------------------------------------------------

def cmd_info(args):
    names = [args.family] if args.family else ([] if args.spec or args.checkpoint else list(FAMILIES))
    specs = [build_reference(f) for f in names]
    if args.spec or (args.checkpoint and not names):
        specs.append(_resolve_spec(args, args.checkpoint))
    for spec in specs:
        print(f"{spec.name}: {parameter_count(spec)} parameters, "
              f"{len(spec.conv_ids)} conv layers, receptive radius {receptive_radius(spec)}, "
              f"input multiple of {spec.downsampling}, spec hash {spec.hash().hex()[:16]}")
    if args.checkpoint:
        spec = specs[-1]
        params = checkpoint.load(args.checkpoint, spec)
        print(f"{args.checkpoint}: sha256 {checkpoint.file_hash(args.checkpoint)[:16]}, "
              f"{sum(p.kernels.size + p.biases.size for p in params.values())} values, "
              f"matches {spec.name}")
    return 0


# -- argument parsing --------------------------------------------------------

def _add_network(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--family", choices=FAMILIES, help="reference architecture")
    g.add_argument("--spec", help="network spec YAML")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="patch2img",
        description="Train segmentation networks on patches and apply them to whole images.",
    )
    parser.add_argument("--threads", type=int, default=None,
                        help=f"cap BLAS threads (default: ${THREADS_ENV} or library default)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("prepare", help="resize and pre-process a dataset into a cache")
    p.add_argument("manifest", help="dataset manifest YAML")
    p.add_argument("--out", required=True)
    p.add_argument("--resize", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--steps", nargs="*", choices=("grayscale", "gamma", "clahe"))
    p.add_argument("--gamma", type=float)
    p.add_argument("--gamma-mode", choices=("brighten", "darken"))
    p.add_argument("--clahe-clip", type=float)
    p.add_argument("--clahe-tiles", type=int, nargs=2)
    p.add_argument("--force", action="store_true", help="ignore an up-to-date cache")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("extract-patches", help="split train/val and build patch databases")
    p.add_argument("data", help="prepared dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", choices=("grid", "balanced"), default="grid")
    p.add_argument("--patch-size", type=int, default=DEFAULT_PATCH_SIZE)
    p.add_argument("--stride", type=int, default=DEFAULT_STRIDE)
    p.add_argument("--n-pos", type=int, default=500)
    p.add_argument("--n-neg", type=int, default=500)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_extract_patches)

    p = sub.add_parser("train", help="patch training, image training or fine-tuning")
    p.add_argument("--mode", choices=("patch", "image"), required=True)
    p.add_argument("--data", required=True,
                   help="patch database (patch mode) or prepared dataset (image mode)")
    p.add_argument("--out", required=True)
    _add_network(p)
    p.add_argument("--init", help="checkpoint to fine-tune (image mode)")
    p.add_argument("--epochs", type=int, help="stop after this many epochs in this invocation")
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int, help="early-stopping patience, 0 disables")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--decay-factor", type=float)
    p.add_argument("--plateau-patience", type=int)
    p.add_argument("--lr-floor", type=float)
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--resume", action="store_true", help="continue from the saved epoch state")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transfer", help="copy patch-trained weights to the image network")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)
    _add_network(p)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("eval", help="segment a split and write metrics and maps")
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_network(p)
    p.add_argument("--regime", choices=REGIMES, default="image-finetuned")
    p.add_argument("--split", default="test")
    p.add_argument("--fov", action="store_true", help="score only field-of-view pixels")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--patch-size", type=int, default=DEFAULT_PATCH_SIZE)
    p.add_argument("--stride", type=int, default=DEFAULT_STRIDE)
    p.add_argument("--no-maps", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time whole-image against patch-based segmentation")
    p.add_argument("--checkpoint")
    _add_network(p)
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--size", type=int, nargs=2, default=(256, 256), metavar=("H", "W"))
    p.add_argument("-n", type=int, default=None, help="number of images")
    p.add_argument("--repeats", type=int, default=3, help="keep the fastest of this many runs")
    p.add_argument("--patch-size", type=int, default=DEFAULT_PATCH_SIZE)
    p.add_argument("--stride", type=int, default=DEFAULT_STRIDE)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the table as JSON")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("info", help="describe networks and checkpoints")
    _add_network(p)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_info)
    return parser


def _classify(exc):
    if isinstance(exc, CliError):
        return exc.kind
    if isinstance(exc, (SpecError, LineageError, CheckpointError)):
        return "spec"
    if isinstance(exc, (OSError, ImageReadError)):
        return "io"
    if isinstance(exc, (ValueError, ShapeError)):
        return "value"
    return "internal"


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = args.threads
    if threads is None and os.environ.get(THREADS_ENV):
        threads = int(os.environ[THREADS_ENV])
    try:
        if threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=threads):
                return args.func(args)
        return args.func(args)
    except KeyboardInterrupt:
        print("error[interrupted]: stopped by user", file=sys.stderr)
        return 130
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        kind = _classify(exc)
        print(f"error[{kind}]: {exc}", file=sys.stderr)
        if args.verbose or kind == "internal":
            logging.getLogger("patch2img").exception("details")
        return EXIT_CODES[kind]


if __name__ == "__main__":
    sys.exit(main())
