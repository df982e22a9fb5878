"""Command-line harness: train, eval, generate, sample-quality.

Configuration is a flat key=value file; command-line flags override file
values.  Metrics are line-delimited JSON records, one per epoch.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    Dataset,
    MultimodalBatch,
    SyntheticSpec,
    load_idx_pair,
    one_hot,
    pair_mask,
    save_idx,
    synth_bimodal,
)
from .flows import FlowConfig
from .model import ModalitySpec, MVAEModel
from .objective import AnnealSchedule, ElboWeights, TrainConfig, evaluate, train
from .quality import JudgeUnusableError, sample_quality

DATASET_CHOICES = ("synth", "mnist", "fashion", "kmnist", "emnist")

_IDX_NAMES = {
    "mnist": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "fashion": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "kmnist": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "emnist": ("emnist-letters-train-images-idx3-ubyte", "emnist-letters-train-labels-idx1-ubyte"),
}

# Desk-scale defaults for the synthetic preset; MNIST-scale presets follow
# the 512/128-unit encoder layout with latent dim 64.
_PRESETS = {
    "synth": {
        "latent_dim": 16,
        "encoder_widths": (64,),
        "head_width": 32,
        "decoder_widths": (64,),
        "odenet_hidden": (64, 64),
        "flow_steps": 10,
        "batch_size": 8,
        "lambdas": {"x1": 1.0, "x2": 50.0},
    },
    "mnist": {
        "latent_dim": 64,
        "encoder_widths": (512,),
        "head_width": 128,
        "decoder_widths": (512,),
        "odenet_hidden": (256, 256),
        "flow_steps": 40,
        "batch_size": 32,
        "lambdas": {"x1": 1.0, "x2": 50.0},
    },
}


def _parse_config_file(path):
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _load_dataset(args):
    if args.dataset == "synth":
        spec = SyntheticSpec(
            num_classes=args.synth_classes,
            pattern_dim=args.synth_dim,
            flip_noise=args.synth_noise,
            samples_per_class=args.synth_per_class,
        )
        ds = synth_bimodal(spec, seed=args.data_seed)
    else:
        if args.data_dir is None:
            raise SystemExit(f"--data-dir is required for dataset {args.dataset!r}")
        img_name, lbl_name = _IDX_NAMES[args.dataset]
        num_classes = 26 if args.dataset == "emnist" else 10
        offset = 1 if args.dataset == "emnist" else 0
        ds = load_idx_pair(
            Path(args.data_dir) / img_name,
            Path(args.data_dir) / lbl_name,
            num_classes=num_classes,
            label_offset=offset,
            limit=args.limit,
        )
    if args.matched_fraction is not None:
        ds = Dataset(
            train=pair_mask(ds.train, args.matched_fraction, seed=args.seed),
            eval=ds.eval,
            names=ds.names,
            prototypes=ds.prototypes,
            class_counts=ds.class_counts,
        )
    return ds


def _preset(args):
    return _PRESETS["synth" if args.dataset == "synth" else "mnist"]


def build_model(args, dataset):
    preset = _preset(args)
    latent_dim = args.latent_dim or preset["latent_dim"]
    specs = [
        ModalitySpec(
            name=name,
            data_dim=dataset.train.values[name].shape[1],
            encoder_widths=preset["encoder_widths"],
            head_width=preset["head_width"],
            decoder_widths=preset["decoder_widths"],
        )
        for name in dataset.names
    ]
    flow_cfg = None
    if args.variant == "cnf":
        flow_cfg = FlowConfig(
            num_steps=args.flow_steps or preset["flow_steps"],
            trace_mode=args.trace,
        )
    return MVAEModel(
        specs,
        latent_dim=latent_dim,
        variant=args.variant,
        flow_config=flow_cfg,
        odenet_hidden=preset["odenet_hidden"],
        seed=args.seed,
    )


def _train_config(args, dataset):
    preset = _preset(args)
    lambdas = dict(preset["lambdas"])
    for item in args.lam or []:
        name, _, value = item.partition("=")
        if not value:
            raise SystemExit(f"--lambda expects name=value, got {item!r}")
        lambdas[name] = float(value)
    lambdas = {n: lambdas.get(n, 1.0) for n in dataset.names}
    return TrainConfig(
        learning_rate=args.learning_rate,
        batch_size=args.batch_size or preset["batch_size"],
        seed=args.seed,
        weights=ElboWeights(lambdas=lambdas, beta=1.0),
        schedule=AnnealSchedule(anneal_epochs=args.anneal_epochs, total_epochs=args.epochs),
    )


def cmd_train(args):
    dataset = _load_dataset(args)
    model = build_model(args, dataset)
    cfg = _train_config(args, dataset)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    ckpt_path = out_dir / "model.mvcf"
    config_snapshot = {
        "dataset": args.dataset,
        "variant": args.variant,
        "epochs": args.epochs,
        "anneal_epochs": args.anneal_epochs,
        "seed": args.seed,
        "lambdas": cfg.weights.lambdas,
    }

    with open(metrics_path, "a") as sink:

        def on_epoch(record, opt):
            sink.write(json.dumps(record, sort_keys=True) + "\n")
            sink.flush()
            save_checkpoint(
                ckpt_path,
                model,
                epoch=record["epoch"],
                optimizer_state=opt.state(),
                config=config_snapshot,
            )

        train(model, dataset, cfg, on_epoch=on_epoch)
    print(f"checkpoint: {ckpt_path}")
    print(f"metrics:    {metrics_path}")
    return 0


def cmd_eval(args):
    try:
        model, _, config = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        raise SystemExit(f"checkpoint rejected: {exc}")
    args.variant = model.variant
    dataset = _load_dataset(args)
    for name in dataset.names:
        want = dataset.train.values[name].shape[1]
        if model.spec_for(name).data_dim != want:
            raise SystemExit(
                f"topology mismatch: modality {name!r} dim {want} != "
                f"checkpoint {model.spec_for(name).data_dim}"
            )
    lambdas = config.get("lambdas") or {n: 1.0 for n in dataset.names}
    batch = dataset.eval
    if args.only_modality:
        batch = batch.restrict([args.only_modality])
    metrics = evaluate(
        model,
        batch,
        ElboWeights(lambdas=lambdas, beta=1.0),
        seed=args.seed,
        mc_samples=args.mc_samples,
    )
    line = json.dumps(metrics, sort_keys=True)
    print(line)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "eval.json").write_text(line + "\n")
    return 0


def write_pgm_sheet(path, images, cols=8):
    """Contact sheet of [0,1] image rows as a binary portable graymap."""
    images = np.asarray(images)
    n, dim = images.shape
    side = int(math.isqrt(dim))
    if side * side != dim:
        side, other = 1, dim  # non-square modality: one strip per sample
        tiles = images.reshape(n, 1, dim)
    else:
        tiles = images.reshape(n, side, side)
        other = side
    rows = (n + cols - 1) // cols
    sheet = np.zeros((rows * tiles.shape[1], cols * tiles.shape[2]))
    for i in range(n):
        r, c = divmod(i, cols)
        sheet[
            r * tiles.shape[1] : (r + 1) * tiles.shape[1],
            c * tiles.shape[2] : (c + 1) * tiles.shape[2],
        ] = tiles[i]
    pixels = np.clip(np.rint(sheet * 255), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode())
        fh.write(pixels.tobytes())


def cmd_generate(args):
    try:
        model, _, _ = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        raise SystemExit(f"checkpoint rejected: {exc}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = model.names

    if args.mode == "joint":
        samples = model.generate_joint(args.n, seed=args.seed)
    else:
        if args.condition is None:
            raise SystemExit("conditional mode requires --condition name=class")
        name, _, value = args.condition.partition("=")
        if name not in names or not value:
            raise SystemExit(f"--condition expects <modality>=<class>, got {args.condition!r}")
        dim = model.spec_for(name).data_dim
        cls = int(value)
        if not 0 <= cls < dim:
            raise SystemExit(f"condition class {cls} outside modality dim {dim}")
        values = {
            n: (one_hot([cls], dim) if n == name else np.zeros((1, model.spec_for(n).data_dim)))
            for n in names
        }
        presence = np.array([[n == name for n in names]])
        given = MultimodalBatch(values=values, presence=presence, names=names)
        samples = model.generate_conditional(given, args.n, seed=args.seed)

    for name, arr in samples.items():
        save_idx(out_dir / f"samples_{name}.idx", arr)
        write_pgm_sheet(out_dir / f"samples_{name}.pgm", arr)
        print(f"wrote {out_dir / f'samples_{name}.idx'} ({arr.shape[0]} samples)")
    return 0


def cmd_sample_quality(args):
    models = {}
    for tag, path in (("a", args.checkpoint_a), ("b", args.checkpoint_b)):
        try:
            models[tag], _, _ = load_checkpoint(path)
        except CheckpointError as exc:
            raise SystemExit(f"checkpoint {tag} rejected: {exc}")
    args.variant = models["a"].variant
    dataset = _load_dataset(args)
    try:
        report = sample_quality(models, dataset, n=args.n, seed=args.seed)
    except JudgeUnusableError as exc:
        raise SystemExit(f"judge classifier unusable: {exc}")
    line = json.dumps(report, sort_keys=True)
    print(line)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "sample_quality.json").write_text(line + "\n")
    return 0


def _add_common(p):
    p.add_argument("--dataset", choices=DATASET_CHOICES, default="synth")
    p.add_argument("--data-dir", default=None)
    p.add_argument("--limit", type=int, default=None, help="row cap for IDX datasets")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--out", default="out")
    p.add_argument("--config", default=None, help="flat key=value config file")
    p.add_argument("--matched-fraction", type=float, default=None)
    p.add_argument("--synth-classes", type=int, default=4)
    p.add_argument("--synth-dim", type=int, default=16)
    p.add_argument("--synth-noise", type=float, default=0.05)
    p.add_argument("--synth-per-class", type=int, default=250)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mvflow",
        description="Multimodal VAE with a continuous-flow posterior.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_common(p_train)
    p_train.add_argument("--variant", choices=("baseline", "cnf"), default="cnf")
    p_train.add_argument("--epochs", type=int, default=12)
    p_train.add_argument("--anneal-epochs", type=int, default=4)
    p_train.add_argument("--latent-dim", type=int, default=None)
    p_train.add_argument("--flow-steps", type=int, default=None)
    p_train.add_argument("--trace", choices=("exact", "hutchinson"), default="exact")
    p_train.add_argument("--lambda", dest="lam", action="append", metavar="NAME=VALUE")
    p_train.add_argument("--learning-rate", type=float, default=1e-3)
    p_train.add_argument("--batch-size", type=int, default=None)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p_eval)
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("--mc-samples", type=int, default=8)
    p_eval.add_argument("--only-modality", default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_gen = sub.add_parser("generate", help="sample from a checkpoint")
    _add_common(p_gen)
    p_gen.add_argument("checkpoint")
    p_gen.add_argument("--mode", choices=("joint", "conditional"), default="joint")
    p_gen.add_argument("--condition", default=None, metavar="MODALITY=CLASS")
    p_gen.add_argument("-n", type=int, default=64)
    p_gen.set_defaults(func=cmd_generate)

    p_q = sub.add_parser("sample-quality", help="classifier-judged comparison")
    _add_common(p_q)
    p_q.add_argument("checkpoint_a")
    p_q.add_argument("checkpoint_b")
    p_q.add_argument("-n", type=int, default=1000)
    p_q.set_defaults(func=cmd_sample_quality)
    return parser


def _apply_config_file(parser, args, argv):
    if not args.config:
        return args
    overrides = _parse_config_file(args.config)
    flags = []
    for key, value in overrides.items():
        flags.append(f"--{key.replace('_', '-')}")
        flags.append(value)
    # file values first, CLI flags win
    merged = [argv[0]] + flags + list(argv[1:])
    return parser.parse_args(merged)


def main(argv=None):
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args = _apply_config_file(parser, args, argv)
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
