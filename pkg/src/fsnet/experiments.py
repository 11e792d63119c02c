"""Small reproducible experiments shared by scripts/ and the acceptance tests."""

from __future__ import annotations

import tempfile
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ArchitectureConfig, Config, PrepareConfig, TrainConfig
from .dataset_prep import FaceRecord, load_dataset, prepare_dataset
from .model import FSNet, images_to_tensor
from .synthetic import generate_synthetic_corpus
from .trainer import load_model, train


def toy_records(root, n_identities=2, images_per_identity=2, seed=0, image_size=64) -> list[FaceRecord]:
    """Generate and prepare a small synthetic corpus; every record goes to the train split."""
    root = Path(root)
    generate_synthetic_corpus(n_identities, images_per_identity, seed, root / "raw")
    cfg = PrepareConfig(image_size=image_size, test_fraction=0.0)
    prepare_dataset(root / "raw", root / "prepared", cfg)
    return load_dataset(root / "prepared")


@torch.no_grad()
def reconstruction_l1(model: FSNet, records: list[FaceRecord]) -> float:
    """Mean L1 between reconstruct(x) and x over ``records`` (batched swap(x, x))."""
    from .swapper import swap_tensors

    x = images_to_tensor([r.image for r in records])
    return float((swap_tensors(model, x, x) - x).abs().mean())


@dataclass
class OverfitResult:
    seed: int
    steps: int
    recon_l1: float
    rec_full_step10: float
    rec_full_final: float
    seconds: float
    checkpoint: Path | None = None
    model: FSNet | None = None
    history: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def rec_full_drop(self) -> float:
        return 1.0 - self.rec_full_final / self.rec_full_step10

    def passed(self, l1_limit=0.08, min_drop=0.5) -> bool:
        return self.recon_l1 < l1_limit and self.rec_full_drop >= min_drop


def overfit(
    records: list[FaceRecord],
    seed: int,
    out_dir=None,
    arch: ArchitectureConfig | None = None,
    lr: float = 2e-4,
    per_role_batch: int = 2,
    max_steps: int = 2000,
    check_every: int = 50,
    l1_limit: float = 0.08,
    min_drop: float = 0.5,
    window: int = 10,
) -> OverfitResult:
    """Train on ``records`` until both overfit targets hold or ``max_steps`` is hit.

    The final rec_full is the mean over the last ``window`` steps, since a
    single step's value depends on which triplet was drawn.
    """
    arch = arch or ArchitectureConfig.desk(records[0].image.shape[0])
    cfg = Config(
        arch=arch,
        train=TrainConfig(lr=lr, per_role_batch=per_role_batch, seed=seed, checkpoint_interval=10**9),
    ).validate()
    recent: deque[float] = deque(maxlen=window)
    res = OverfitResult(seed, 0, float("nan"), float("nan"), float("nan"), 0.0)

    def callback(state, metrics):
        recent.append(metrics["rec_full"])
        res.steps = state.step
        if state.step == 10:
            res.rec_full_step10 = metrics["rec_full"]
        if state.step % check_every and state.step < max_steps:
            return False
        res.recon_l1 = reconstruction_l1(state.model, records)
        res.rec_full_final = float(np.mean(recent))
        res.history.append((state.step, res.recon_l1, res.rec_full_final))
        state.model.train()
        return state.step > 10 and res.passed(l1_limit, min_drop)

    tmp = None
    if out_dir is None:
        tmp = tempfile.TemporaryDirectory()
        out_dir = tmp.name
    t0 = time.perf_counter()
    try:
        ckpt = train(cfg, records=records, out_dir=out_dir, steps=max_steps, callback=callback)
        res.checkpoint = None if tmp else ckpt
        res.model = load_model(ckpt)
    finally:
        if tmp is not None:
            tmp.cleanup()
    res.seconds = time.perf_counter() - t0
    return res
