"""Training objectives. Every function is pure: tensors in, scalar tensor out.

Probabilities are clamped to [EPS, 1 - EPS] inside every log.  Mask and
landmark decoders emit logits, so their cross-entropies use the logit form,
which never needs clamping.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from .config import LossWeights
from .errors import ShapeMismatch

EPS = 1e-7


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{what}: {tuple(a.shape)} vs {tuple(b.shape)}")


def log_clamped(p):
    return torch.log(p.clamp(EPS, 1.0 - EPS))


def _bce_logits(target, logits):
    # -[y log s(l) + (1-y) log(1-s(l))] == softplus(l) - y*l
    return (F.softplus(logits) - target * logits).mean()


def mask_rec_loss(M_true, M_logits):
    """Mean binary cross-entropy between the face mask and the decoder logits."""
    _same_shape(M_true, M_logits, "mask_rec_loss")
    return _bce_logits(M_true, M_logits)


def landmark_rec_loss(x_true_lm, lm_logits):
    _same_shape(x_true_lm, lm_logits, "landmark_rec_loss")
    return _bce_logits(x_true_lm, lm_logits)


def face_rec_loss(x_true_face, x_pred_face):
    _same_shape(x_true_face, x_pred_face, "face_rec_loss")
    return (x_true_face - x_pred_face).abs().mean()


def full_rec_loss(x_true, x_pred, M_fg, beta_bg: float = 0.5):
    """L1 weighted 1 on the foreground and ``beta_bg`` on the background."""
    _same_shape(x_true, x_pred, "full_rec_loss")
    if M_fg.dim() == x_true.dim() - 1:
        M_fg = M_fg.unsqueeze(1)
    if M_fg.shape[0] != x_true.shape[0] or M_fg.shape[-2:] != x_true.shape[-2:]:
        raise ShapeMismatch(f"foreground mask {tuple(M_fg.shape)} vs image {tuple(x_true.shape)}")
    weight = M_fg + beta_bg * (1.0 - M_fg)
    return ((x_true - x_pred).abs() * weight).mean()


def latent_class_terms(p_enc, p_prior, mode: str = "alpha_gan"):
    """(classifier loss, encoder loss) from classifier outputs.

    ``alpha_gan``: the classifier labels encoder codes 1 and prior codes 0; the
    encoder is rewarded when its codes are scored like prior codes.
    ``literal``: both terms evaluated on encoder codes only.
    """
    if mode == "alpha_gan":
        loss_c = -log_clamped(p_enc).mean() - log_clamped(1.0 - p_prior).mean()
    elif mode == "literal":
        loss_c = -log_clamped(p_enc).mean() - log_clamped(1.0 - p_enc).mean()
    else:
        raise ValueError(f"unknown latent loss mode {mode!r}")
    return loss_c, encoder_latent_loss(p_enc, mode)


def encoder_latent_loss(p_enc, mode: str = "alpha_gan"):
    if mode == "alpha_gan":
        return -log_clamped(1.0 - p_enc).mean()
    if mode == "literal":
        return -log_clamped(p_enc).mean() - log_clamped(1.0 - p_enc).mean()
    raise ValueError(f"unknown latent loss mode {mode!r}")


def latent_class_losses(classifier, z_enc, z_prior, mode: str = "alpha_gan"):
    _same_shape(z_enc, z_prior, "latent_class_losses")
    return latent_class_terms(classifier(z_enc), classifier(z_prior), mode)


def adversarial_terms(p_real, p_recon, p_random):
    """(discriminator loss, generator loss) from discriminator outputs.

    Grid-shaped outputs (patch critic) are averaged entry by entry.
    """
    loss_d = (
        -log_clamped(p_real).mean()
        - log_clamped(1.0 - p_recon).mean()
        - log_clamped(1.0 - p_random).mean()
    )
    return loss_d, generator_adv_loss(p_recon, p_random)


def generator_adv_loss(p_recon, p_random):
    """Non-saturating generator side: -E[log D(recon)] - E[log D(random)]."""
    return -log_clamped(p_recon).mean() - log_clamped(p_random).mean()


def adversarial_losses(D, x_real, x_recon, x_random):
    _same_shape(x_real, x_recon, "adversarial_losses")
    _same_shape(x_real, x_random, "adversarial_losses")
    return adversarial_terms(D(x_real), D(x_recon), D(x_random))


def triplet_identity_loss(f_anchor, f_positive, f_negative, alphas=(1.0, 0.1, 0.5), hinge: str = "min"):
    """Triplet term plus the anchor-positive pull term, batch-averaged.

    ``hinge="min"`` clips with min(0, .); ``hinge="max"`` uses max(0, .).
    """
    _same_shape(f_anchor, f_positive, "triplet_identity_loss")
    _same_shape(f_anchor, f_negative, "triplet_identity_loss")
    a1, a2, a3 = alphas
    d_ap = ((f_anchor - f_positive) ** 2).sum(dim=-1)
    d_an = ((f_anchor - f_negative) ** 2).sum(dim=-1)
    if hinge not in ("min", "max"):
        raise ValueError(f"unknown hinge {hinge!r}")
    clip = torch.clamp_max if hinge == "min" else torch.clamp_min
    term1 = clip(d_ap + a1 - d_an, 0.0)
    term2 = clip(d_ap - a2, 0.0)
    return (term1 + a3 * term2).mean()


def identity_loss_suite(F_id, x_s1, x_s2, x_t, x_s1t, x_s2t, alphas=(1.0, 0.1, 0.5), hinge: str = "min"):
    """Sum over the triplets (s1, s2, t), (s1t, s1, t), (s2t, s2, t)."""
    f_s1, f_s2, f_t = F_id(x_s1), F_id(x_s2), F_id(x_t)
    f_s1t, f_s2t = F_id(x_s1t), F_id(x_s2t)
    return (
        triplet_identity_loss(f_s1, f_s2, f_t, alphas, hinge)
        + triplet_identity_loss(f_s1t, f_s1, f_t, alphas, hinge)
        + triplet_identity_loss(f_s2t, f_s2, f_t, alphas, hinge)
    )


@dataclass
class LossBundle:
    """Per-step loss components.  Reconstruction and adversarial entries are
    averages over the three triplet roles; adversarial entries are the
    generator-side losses."""

    rec_mask: torch.Tensor | float = 0.0
    rec_face: torch.Tensor | float = 0.0
    rec_landmark: torch.Tensor | float = 0.0
    rec_full: torch.Tensor | float = 0.0
    lat_face: torch.Tensor | float = 0.0
    lat_mask: torch.Tensor | float = 0.0
    lat_landmark: torch.Tensor | float = 0.0
    adv_global: torch.Tensor | float = 0.0
    adv_patch: torch.Tensor | float = 0.0
    identity: torch.Tensor | float = 0.0
    total: torch.Tensor | float = 0.0

    COMPONENTS = (
        "rec_mask", "rec_face", "rec_landmark", "rec_full",
        "lat_face", "lat_mask", "lat_landmark",
        "adv_global", "adv_patch", "identity",
    )

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(torch.as_tensor(getattr(self, f.name)).detach()) for f in fields(self)}


def total_loss(components, weights: LossWeights = LossWeights()):
    """Weighted sum. The face weight covers both face-part and full-image L1."""
    c = components if isinstance(components, dict) else {
        k: getattr(components, k) for k in LossBundle.COMPONENTS
    }
    w = weights
    return (
        w.lambda_f_rec * (c["rec_face"] + c["rec_full"])
        + w.lambda_M_rec * c["rec_mask"]
        + w.lambda_l_rec * c["rec_landmark"]
        + w.lambda_lat * (c["lat_face"] + c["lat_mask"] + c["lat_landmark"])
        + w.lambda_adv_g * c["adv_global"]
        + w.lambda_adv_p * c["adv_patch"]
        + w.lambda_id * c["identity"]
    )
