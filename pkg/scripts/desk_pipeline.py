"""End-to-end run at desk scale: synthesise, prepare, train, swap, evaluate.

    python scripts/desk_pipeline.py --out runs/desk --steps 300

Uses the CLI entry point for every stage, so it doubles as a smoke test of
the command wiring.
"""

import argparse
from pathlib import Path

from fsnet.cli import main as fsnet
from fsnet.config import ArchitectureConfig, Config, PrepareConfig, TrainConfig, dump_config


def run(*argv):
    argv = [str(a) for a in argv]
    print("$ fsnet", " ".join(argv), flush=True)
    code = fsnet(argv)
    if code:
        raise SystemExit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--identities", type=int, default=6)
    ap.add_argument("--per-identity", type=int, default=4)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--pairs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = Config(
        arch=ArchitectureConfig.desk(args.size),
        train=TrainConfig(per_role_batch=2, max_steps=args.steps, checkpoint_interval=max(1, args.steps // 2)),
        prepare=PrepareConfig(image_size=args.size, test_fraction=0.25),
    )
    dump_config(cfg, out / "config.yaml")

    run("synth", "--out", out / "raw", "--identities", args.identities, "--per-identity", args.per_identity,
        "--faceless", 1, "--seed", args.seed)
    run("prepare", "--input", out / "raw", "--output", out / "data", "--config", out / "config.yaml")
    run("train", "--config", out / "config.yaml", "--data", out / "data", "--out", out / "run",
        "--steps", args.steps, "--seed", args.seed)
    ckpt = sorted((out / "run").glob("checkpoint_*.pt"))[-1]
    run("swap", "--ckpt", ckpt, "--source", out / "raw" / "id000_img00.png",
        "--target", out / "raw" / "id001_img00.png", "--out", out / "swap_0_into_1.png")
    run("sample", "--ckpt", ckpt, "--target", out / "raw" / "id001_img00.png", "--out", out / "random_face.png")
    run("evaluate", "--ckpt", ckpt, "--data", out / "data", "--split", "train", "--pairs", args.pairs,
        "--out", out / "report.csv")


if __name__ == "__main__":
    main()
