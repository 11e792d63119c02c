"""Single-pair inference: swap, self-reconstruction and random-face sampling.

The only thing taken from the source image is its face code; the target
supplies the landmark code and, through the predicted mask, the non-face
pixels fed to the generator.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .config import PrepareConfig
from .dataset_prep import to_output_frame, write_image
from .errors import BadDimensions, PreparationFailed
from .model import FSNet, images_to_tensor, sample_latent, tensor_to_images
from .trainer import load_model

MASK_THRESHOLD = 0.5


def _as_model(checkpoint) -> FSNet:
    if isinstance(checkpoint, FSNet):
        return checkpoint
    return load_model(checkpoint)


def prepare_input(image, image_size: int, letterbox: bool = True) -> torch.Tensor:
    """Accept an already-prepared square image, a raw 178x218 frame, or (with
    ``letterbox``) any other size; return a (1, 3, S, S) tensor."""
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise PreparationFailed(f"expected an HxWx3 image, got shape {arr.shape}")
    cfg = PrepareConfig(image_size=image_size, center_fit=letterbox)
    try:
        out, _ = to_output_frame(arr, cfg)
    except BadDimensions as exc:
        raise PreparationFailed(str(exc)) from exc
    return images_to_tensor(np.clip(out, 0.0, 1.0))


def _codes(model: FSNet, x, stochastic: bool, generator):
    mu_f, sig_f = model.encode_face(x)
    mu_l, sig_l = model.encode_landmarks_channel(x)
    if stochastic:
        return sample_latent(mu_f, sig_f, generator), sample_latent(mu_l, sig_l, generator)
    return mu_f, mu_l


def predicted_nonface(model: FSNet, target, z_f_t, z_l_t):
    mask = (torch.sigmoid(model.decode_mask(z_f_t, z_l_t)) >= MASK_THRESHOLD).to(target.dtype)
    return target * (1.0 - mask)


@torch.no_grad()
def swap_tensors(model: FSNet, source, target, stochastic: bool = False, seed: int = 0):
    """Batched swap on prepared (N, 3, S, S) tensors."""
    model.eval()
    g = torch.Generator().manual_seed(seed) if stochastic else None
    z_f_s, _ = _codes(model, source, stochastic, g)
    z_f_t, z_l_t = _codes(model, target, stochastic, g)
    nonface = predicted_nonface(model, target, z_f_t, z_l_t)
    return model.generate(nonface, z_f_s, z_l_t, training=False)


def swap(checkpoint, source_image, target_image, rng_mode: str = "deterministic", seed: int = 0) -> np.ndarray:
    """Face of ``source_image`` on ``target_image``; returns an SxSx3 array in [0, 1].

    ``rng_mode="deterministic"`` uses distribution means; ``"stochastic"``
    samples the latents with ``seed``.
    """
    if rng_mode not in ("deterministic", "stochastic"):
        raise ValueError(f"unknown rng_mode {rng_mode!r}")
    model = _as_model(checkpoint)
    s = model.cfg.image_size
    src = prepare_input(source_image, s)
    tgt = prepare_input(target_image, s)
    out = swap_tensors(model, src, tgt, stochastic=rng_mode == "stochastic", seed=seed)
    return tensor_to_images(out)[0]


def reconstruct(checkpoint, image, rng_mode: str = "deterministic", seed: int = 0) -> np.ndarray:
    return swap(checkpoint, image, image, rng_mode, seed)


@torch.no_grad()
def sample_random_face(checkpoint, target_image, seed: int = 0) -> np.ndarray:
    """Target background with a face drawn from standard-normal latents."""
    model = _as_model(checkpoint)
    model.eval()
    tgt = prepare_input(target_image, model.cfg.image_size)
    z_f_t, z_l_t = _codes(model, tgt, False, None)
    nonface = predicted_nonface(model, tgt, z_f_t, z_l_t)
    g = torch.Generator().manual_seed(seed)
    z_f = torch.randn((1, model.cfg.d_f), generator=g)
    z_l = torch.randn((1, model.cfg.d_l), generator=g)
    return tensor_to_images(model.generate(nonface, z_f, z_l, training=False))[0]


def save_png(path, image: np.ndarray) -> Path:
    write_image(path, image)
    return Path(path)
