"""Swap-quality metrics and the two-experiment evaluation protocol.

Experiment 1 swaps between two images of one person and compares the result
with the target (absolute error, MS-SSIM).  Experiment 2 swaps between
different people and measures identity transfer (embedding distance to the
source) and an inception score over all results.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .dataset_prep import FaceRecord
from .errors import ImageTooSmall, ShapeMismatch
from .model import FSNet, images_to_tensor

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
K1, K2 = 0.01, 0.03


def abs_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    return float(np.abs(a - b).mean())


def gaussian_window(size: int, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' filtering of a 2-D array."""
    k = len(g)
    h, w = img.shape
    rows = sum(g[i] * img[i : h - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[:, j : w - k + 1 + j] for j in range(k))


def _ssim_parts(x, y, win: int, sigma: float, data_range: float):
    g = gaussian_window(win, sigma)
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    return float((lum * cs).mean()), float(cs.mean())


def _halve(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    if h % 2 or w % 2:
        img = np.pad(img, ((0, h % 2), (0, w % 2)), mode="symmetric")
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def ms_ssim(a, b, data_range: float = 1.0, window: int = 11, sigma: float = 1.5, weights=MS_SSIM_WEIGHTS) -> float:
    """Five-scale MS-SSIM, computed per channel and averaged over channels.

    At coarse scales smaller than the window the window shrinks to the image
    size, so 128 px inputs (8 px at the coarsest scale) are supported.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    levels = len(weights)
    if min(a.shape[:2]) < 2 ** (levels - 1):
        raise ImageTooSmall(f"{a.shape[:2]} cannot be halved {levels - 1} times")
    per_channel = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        value = 1.0
        for level, w in enumerate(weights):
            win = min(window, *x.shape)
            ssim_val, cs = _ssim_parts(x, y, win, sigma, data_range)
            part = ssim_val if level == levels - 1 else cs
            value *= max(part, 0.0) ** w
            if level < levels - 1:
                x, y = _halve(x), _halve(y)
        per_channel.append(value)
    return float(np.mean(per_channel))


# -------------------------------------------------------------- clients

Embedder = Callable[[np.ndarray], np.ndarray]
Classifier = Callable[[np.ndarray], np.ndarray]


def image_key(image: np.ndarray) -> str:
    """Content hash of the 8-bit quantised image; names external files."""
    q = np.clip(np.floor(np.asarray(image, dtype=np.float64) * 255 + 0.5), 0, 255).astype(np.uint8)
    return hashlib.sha1(q.tobytes() + str(q.shape).encode()).hexdigest()


class BuiltinEmbedder:
    """The model's own identity encoder as the face embedder."""

    def __init__(self, model: FSNet):
        self.model = model

    @torch.no_grad()
    def __call__(self, image):
        self.model.eval()
        return self.model.identity_features(images_to_tensor(image)).numpy()[0].astype(np.float64)


class FileEmbedder:
    """Embeddings computed offline: ``DIR/<image_key>.npy`` per image."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def __call__(self, image):
        path = self.directory / f"{image_key(image)}.npy"
        if not path.exists():
            raise FileNotFoundError(f"no external embedding for image {path.name}")
        return np.load(path).astype(np.float64)


class ToyClassifier:
    """Deterministic soft classifier over K hue prototypes of the mean face colour.

    Stands in for an Inception network; its scores are not comparable to
    published inception scores.
    """

    def __init__(self, n_classes: int = 10, temperature: float = 0.05):
        self.n_classes = n_classes
        self.temperature = temperature
        hues = np.arange(n_classes) / n_classes
        self.prototypes = np.stack(
            [0.5 + 0.5 * np.cos(2 * np.pi * (hues + k / 3.0)) for k in range(3)], axis=1
        )

    def __call__(self, image):
        img = np.asarray(image, dtype=np.float64)
        h, w = img.shape[:2]
        centre = img[h // 4 : 3 * h // 4, w // 4 : 3 * w // 4].reshape(-1, 3).mean(axis=0)
        d = ((self.prototypes - centre) ** 2).sum(axis=1)
        logits = -d / self.temperature
        p = np.exp(logits - logits.max())
        return p / p.sum()


class FileClassifier:
    """Class posteriors computed offline: JSON ``{image_key: [p_1, ..., p_K]}``."""

    def __init__(self, path):
        self.table = json.loads(Path(path).read_text())

    def __call__(self, image):
        return np.asarray(self.table[image_key(image)], dtype=np.float64)


def embedding_distance(embedder_client: Embedder, a, b) -> float:
    fa, fb = embedder_client(a), embedder_client(b)
    return float(((fa - fb) ** 2).sum())


def inception_score_from_probs(probs, eps: float = 1e-12) -> float:
    """exp(mean_x KL(p(y|x) || p(y))) over a single split."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or len(p) == 0:
        raise ShapeMismatch(f"expected (N, K) probabilities, got {p.shape}")
    marginal = p.mean(axis=0, keepdims=True)
    kl = np.where(p > 0, p * (np.log(p + eps) - np.log(marginal + eps)), 0.0).sum(axis=1)
    return float(np.exp(kl.mean()))


def inception_score(classifier_client: Classifier, images: Sequence[np.ndarray]) -> float:
    return inception_score_from_probs(np.stack([classifier_client(im) for im in images]))


# -------------------------------------------------------------- protocol


@dataclass
class Clients:
    embedder: Embedder
    classifier: Classifier


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    summary: dict[str, dict[str, float]] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def per_pair(self, experiment: str) -> list[dict]:
        return [r for r in self.rows if r["experiment"] == experiment]

    def write_csv(self, path) -> Path:
        path = Path(path)
        cols = ["row_type", "experiment", "pair", "source", "target", "statistic"] + REPORT_METRICS
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                w.writerow({"row_type": "pair", **r})
            for exp, stats in self.summary.items():
                for stat in ("mean", "std"):
                    row = {"row_type": "summary", "experiment": exp, "statistic": stat}
                    for metric, vals in stats.items():
                        row[metric] = vals[stat]
                    w.writerow(row)
        return path


REPORT_METRICS = ["abs_error", "ms_ssim", "emb_dist_source", "emb_dist_target", "inception_score"]


def _pairs(records, rng, n_pairs, same: bool):
    by_id: dict[int, list[int]] = {}
    for i, r in enumerate(records):
        by_id.setdefault(r.identity_label, []).append(i)
    ids = sorted(by_id)
    multi = [k for k in ids if len(by_id[k]) >= 2]
    out = []
    for _ in range(n_pairs):
        if same:
            if not multi:
                break
            k = multi[rng.integers(len(multi))]
            i, j = rng.choice(by_id[k], size=2, replace=False)
        else:
            if len(ids) < 2:
                break
            k, q = rng.choice(ids, size=2, replace=False)
            i = by_id[k][rng.integers(len(by_id[k]))]
            j = by_id[q][rng.integers(len(by_id[q]))]
        out.append((int(i), int(j)))
    return out


def summarize(rows: list[dict]) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {}
    for exp in sorted({r["experiment"] for r in rows}):
        sub = [r for r in rows if r["experiment"] == exp]
        stats = {}
        for m in REPORT_METRICS:
            vals = [r[m] for r in sub if r.get(m) is not None]
            if vals:
                stats[m] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
        out[exp] = stats
    return out


def run_table1_protocol(checkpoint, dataset: list[FaceRecord], n_pairs: int, clients: Clients | None = None, seed: int = 0, swap_fn=None) -> EvalReport:
    """Both experiments over ``n_pairs`` random pairs each; per-pair rows plus mean/std."""
    from .swapper import _as_model, swap_tensors

    model = _as_model(checkpoint)
    if clients is None:
        clients = Clients(BuiltinEmbedder(model), ToyClassifier())
    if swap_fn is None:
        def swap_fn(src, tgt):
            out = swap_tensors(model, images_to_tensor(src), images_to_tensor(tgt))
            return out.numpy()[0].transpose(1, 2, 0)

    rng = np.random.default_rng(seed)
    report = EvalReport(notes=["inception scores use a toy classifier; not comparable to published values"])
    for i, j in _pairs(dataset, rng, n_pairs, same=True):
        src, tgt = dataset[i], dataset[j]
        out = swap_fn(src.image, tgt.image)
        report.rows.append(
            {"experiment": "same_person", "pair": len(report.rows), "source": src.name, "target": tgt.name,
             "abs_error": abs_error(out, tgt.image), "ms_ssim": ms_ssim(out, tgt.image)}
        )
    results = []
    for i, j in _pairs(dataset, rng, n_pairs, same=False):
        src, tgt = dataset[i], dataset[j]
        out = swap_fn(src.image, tgt.image)
        results.append(out)
        report.rows.append(
            {"experiment": "different_people", "pair": len(report.rows), "source": src.name, "target": tgt.name,
             "abs_error": abs_error(out, tgt.image),
             "emb_dist_source": embedding_distance(clients.embedder, out, src.image),
             "emb_dist_target": embedding_distance(clients.embedder, out, tgt.image)}
        )
    report.summary = summarize(report.rows)
    if results:
        score = inception_score(clients.classifier, results)
        report.summary.setdefault("different_people", {})["inception_score"] = {"mean": score, "std": 0.0}
    return report
