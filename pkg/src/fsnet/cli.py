"""Command-line entry point: ``fsnet <command> ...``.

Config file values override defaults; command-line flags override the file.
"""

from __future__ import annotations

import argparse
import logging
import platform
import sys
from dataclasses import replace
from importlib import metadata

from .config import load_config
from .errors import FSNetError, NonFiniteLoss

log = logging.getLogger("fsnet")


def _version() -> str:
    try:
        v = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        v = "unknown"
    import numpy
    import torch

    return f"fsnet {v} (python {platform.python_version()}, torch {torch.__version__}, numpy {numpy.__version__})"


def _cmd_prepare(args) -> int:
    from .dataset_prep import prepare_dataset

    cfg = load_config(args.config)
    if args.fallback_foreground:
        cfg = cfg.replace(prepare=replace(cfg.prepare, fallback_foreground=args.fallback_foreground))
    cfg.validate()
    report = prepare_dataset(args.input, args.output, cfg.prepare, workers=args.workers)
    print(f"prepared {report.written} records, skipped {len(report.skipped)}; manifest {report.manifest_path}")
    for s in report.skipped:
        log.info("skipped %s: %s", s.get("name"), s.get("reason"))
    return 0


def _cmd_train(args) -> int:
    from .trainer import train

    cfg = load_config(args.config)
    tr = cfg.train
    tr = replace(tr, data_dir=args.data, out_dir=args.out)
    if args.seed is not None:
        tr = replace(tr, seed=args.seed)
    cfg = cfg.replace(train=tr).validate()
    try:
        path = train(cfg, out_dir=args.out, resume=args.resume, steps=args.steps)
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"diagnostics: {exc.dump_path}", file=sys.stderr)
        return 1
    print(path)
    return 0


def _cmd_swap(args) -> int:
    from .dataset_prep import read_image
    from .swapper import save_png, swap

    mode = "stochastic" if args.stochastic else "deterministic"
    out = swap(args.ckpt, read_image(args.source), read_image(args.target), rng_mode=mode, seed=args.seed)
    print(save_png(args.out, out))
    return 0


def _cmd_sample(args) -> int:
    from .dataset_prep import read_image
    from .swapper import sample_random_face, save_png

    out = sample_random_face(args.ckpt, read_image(args.target), seed=args.seed)
    print(save_png(args.out, out))
    return 0


def _client(spec: str, kind: str, model):
    from . import evaluator as ev

    if spec.startswith("file:"):
        target = spec[len("file:"):]
        return ev.FileEmbedder(target) if kind == "embedder" else ev.FileClassifier(target)
    if kind == "embedder" and spec == "builtin":
        return ev.BuiltinEmbedder(model)
    if kind == "classifier" and spec == "toy":
        return ev.ToyClassifier()
    raise FSNetError(f"unknown {kind} {spec!r}")


def _cmd_evaluate(args) -> int:
    from .dataset_prep import load_dataset
    from .evaluator import Clients, run_table1_protocol
    from .trainer import load_model

    model = load_model(args.ckpt)
    records = load_dataset(args.data, split=args.split)
    clients = Clients(_client(args.embedder, "embedder", model), _client(args.classifier, "classifier", model))
    report = run_table1_protocol(model, records, args.pairs, clients, seed=args.seed)
    report.write_csv(args.out)
    for exp, stats in report.summary.items():
        for metric, v in stats.items():
            print(f"{exp:17s} {metric:16s} {v['mean']:.4f} +- {v['std']:.4f}")
    for note in report.notes:
        print(f"note: {note}")
    return 0


def _cmd_synth(args) -> int:
    from .synthetic import generate_synthetic_corpus

    m = generate_synthetic_corpus(args.identities, args.per_identity, args.seed, args.out, n_faceless=args.faceless)
    print(f"wrote {len(m['records'])} images to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fsnet", description="Latent-space face swapping: data prep, training, inference, evaluation.")
    p.add_argument("--version", action="version", version=_version())
    p.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("prepare", help="crop, align and build masks for an annotated image directory")
    s.add_argument("--input", required=True, help="directory of PNGs with .json annotation sidecars")
    s.add_argument("--output", required=True, help="prepared dataset directory")
    s.add_argument("--config", help="YAML config file")
    s.add_argument("--fallback-foreground", choices=["ones", "fail"], help="when the foreground mask is missing")
    s.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    s.set_defaults(func=_cmd_prepare)

    s = sub.add_parser("train", help="train on a prepared dataset")
    s.add_argument("--config", help="YAML config file")
    s.add_argument("--data", required=True, help="prepared dataset directory")
    s.add_argument("--out", required=True, help="directory for checkpoints and metrics.csv")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--steps", type=int, help="number of additional steps to run (default: up to max_steps)")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=_cmd_train)

    s = sub.add_parser("swap", help="put the face of SOURCE onto TARGET")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--source", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--stochastic", action="store_true", help="sample latents instead of using means")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_swap)

    s = sub.add_parser("sample", help="draw a random face onto TARGET")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_sample)

    s = sub.add_parser("evaluate", help="same-person and different-person swap metrics")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True, help="prepared dataset directory")
    s.add_argument("--split", default="test", help="manifest split to evaluate (default: test)")
    s.add_argument("--pairs", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="report CSV path")
    s.add_argument("--embedder", default="builtin", help="builtin | file:DIR")
    s.add_argument("--classifier", default="toy", help="toy | file:PATH")
    s.set_defaults(func=_cmd_evaluate)

    s = sub.add_parser("synth", help="generate a synthetic annotated face corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--identities", type=int, default=5)
    s.add_argument("--per-identity", type=int, default=4)
    s.add_argument("--faceless", type=int, default=0, help="extra images without a face")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FSNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
