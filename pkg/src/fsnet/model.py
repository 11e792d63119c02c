"""Networks: two variational encoders, three decoders, the U-Net generator with
latent injection at the bottleneck, global and patch discriminators, latent
classifiers and the identity feature encoder.

Tensors are NCHW float; images live in [0, 1].
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .config import ArchitectureConfig
from .errors import NonPositiveSigma, ShapeMismatch

GROUPS = (
    "enc_face",
    "enc_landmark",
    "dec_mask",
    "dec_face",
    "dec_landmark",
    "generator",
    "disc_global",
    "disc_patch",
    "latent_classifier",
    "identity_encoder",
)
LATENT_CHANNELS = ("face", "mask", "landmark")


def _init_weights(module: nn.Module, std: float) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def _down_stack(in_ch, channels, slope):
    layers = []
    for c in channels:
        layers += [nn.Conv2d(in_ch, c, 4, 2, 1), nn.LeakyReLU(slope)]
        in_ch = c
    return nn.Sequential(*layers)


class VariationalEncoder(nn.Module):
    """Strided conv stack with two fully connected heads: mean and std."""

    def __init__(self, cfg: ArchitectureConfig, latent_dim: int):
        super().__init__()
        self.features = _down_stack(3, cfg.encoder_channels, cfg.leaky_slope)
        spatial = cfg.image_size // 2 ** len(cfg.encoder_channels)
        flat = cfg.encoder_channels[-1] * spatial * spatial
        self.fc_mu = nn.Linear(flat, latent_dim)
        self.fc_sigma = nn.Linear(flat, latent_dim)
        self.softplus_mean = cfg.encoder_head == "softplus_both"

    def forward(self, x):
        h = self.features(x).flatten(1)
        mu = self.fc_mu(h)
        if self.softplus_mean:
            mu = F.softplus(mu)
        # floor keeps sigma strictly positive once softplus underflows
        sigma = F.softplus(self.fc_sigma(h)) + 1e-6
        return mu, sigma


class Decoder(nn.Module):
    """Latent vector -> image: FC to a coarse map, stride-2 deconvs, 3x3 output conv."""

    def __init__(self, cfg: ArchitectureConfig, in_dim: int, out_channels: int, bounded: bool):
        super().__init__()
        chans = cfg.decoder_channels
        self.start = cfg.image_size // 2 ** len(chans)
        self.c0 = chans[0]
        self.fc = nn.Linear(in_dim, self.c0 * self.start * self.start)
        self.bn0 = nn.BatchNorm2d(self.c0)
        layers = []
        in_ch = self.c0
        for c in chans:
            layers += [nn.ConvTranspose2d(in_ch, c, 4, 2, 1), nn.BatchNorm2d(c), nn.ReLU()]
            in_ch = c
        layers.append(nn.Conv2d(in_ch, out_channels, 3, 1, 1))
        self.body = nn.Sequential(*layers)
        self.bounded = bounded

    def forward(self, z):
        h = self.fc(z).view(-1, self.c0, self.start, self.start)
        out = self.body(F.relu(self.bn0(h)))
        return torch.sigmoid(out) if self.bounded else out


class UNetGenerator(nn.Module):
    """U-Net over the non-face image; latents are tiled and concatenated at the
    bottleneck; skips join each encoder level to the decoder level of equal size."""

    def __init__(self, cfg: ArchitectureConfig):
        super().__init__()
        ch = cfg.generator_channels
        self.inc = nn.Sequential(nn.Conv2d(3, ch[0], 3, 1, 1), nn.ReLU())
        self.downs = nn.ModuleList()
        for i in range(1, len(ch)):
            self.downs.append(
                nn.Sequential(
                    nn.Conv2d(ch[i - 1], ch[i - 1], 3, 2, 1), nn.ReLU(),
                    nn.Conv2d(ch[i - 1], ch[i], 3, 1, 1), nn.ReLU(),
                )
            )
        self.ups = nn.ModuleList()
        self.merges = nn.ModuleList()
        in_ch = ch[-1] + cfg.d_f + cfg.d_l
        for i in range(len(ch) - 2, -1, -1):
            self.ups.append(
                nn.Sequential(nn.ConvTranspose2d(in_ch, ch[i], 3, 2, 1, output_padding=1), nn.ReLU())
            )
            self.merges.append(nn.Sequential(nn.Conv2d(2 * ch[i], ch[i], 3, 1, 1), nn.ReLU()))
            in_ch = ch[i]
        self.out = nn.Conv2d(ch[0], 3, 3, 1, 1)

    def forward(self, nonface, z_f, z_l):
        h = self.inc(nonface)
        skips = [h]
        for down in self.downs:
            h = down(h)
            skips.append(h)
        skips.pop()
        z = torch.cat([z_f, z_l], dim=1)[:, :, None, None].expand(-1, -1, h.shape[2], h.shape[3])
        h = torch.cat([h, z], dim=1)
        for up, merge in zip(self.ups, self.merges):
            h = up(h)
            h = merge(torch.cat([h, skips.pop()], dim=1))
        return torch.sigmoid(self.out(h))


class GlobalDiscriminator(nn.Module):
    def __init__(self, cfg: ArchitectureConfig):
        super().__init__()
        self.features = _down_stack(3, cfg.global_disc_channels, cfg.leaky_slope)
        spatial = cfg.image_size // 2 ** len(cfg.global_disc_channels)
        self.fc = nn.Linear(cfg.global_disc_channels[-1] * spatial * spatial, 1)

    def forward(self, x):
        return torch.sigmoid(self.fc(self.features(x).flatten(1))).squeeze(1)


class PatchDiscriminator(nn.Module):
    """Stride-2 convs with a sigmoid map at the end; each cell judges one patch."""

    def __init__(self, cfg: ArchitectureConfig):
        super().__init__()
        chans = cfg.patch_disc_channels
        self.features = _down_stack(3, chans[:-1], cfg.leaky_slope)
        self.head = nn.Conv2d(chans[-2] if len(chans) > 1 else 3, chans[-1], 4, 2, 1)

    def forward(self, x):
        return torch.sigmoid(self.head(self.features(x)))


class LatentClassifier(nn.Module):
    """MLP scoring whether a code came from the encoder (1) or the prior (0)."""

    def __init__(self, dim: int, hidden, slope: float):
        super().__init__()
        layers = []
        in_dim = dim
        for h in hidden:
            layers += [nn.Linear(in_dim, h), nn.LeakyReLU(slope)]
            in_dim = h
        layers.append(nn.Linear(in_dim, 1))
        self.net = nn.Sequential(*layers)
        self.dim = dim

    def forward(self, z):
        return torch.sigmoid(self.net(z)).squeeze(1)


def normalize_colors(x, eps: float = 1e-6):
    """Per-image, per-channel standardisation; constant images map to zero."""
    mean = x.mean(dim=(2, 3), keepdim=True)
    std = x.std(dim=(2, 3), keepdim=True, unbiased=False)
    return (x - mean) / (std + eps)


class IdentityEncoder(nn.Module):
    def __init__(self, cfg: ArchitectureConfig):
        super().__init__()
        self.features = _down_stack(3, cfg.identity_channels, cfg.leaky_slope)
        spatial = cfg.image_size // 2 ** len(cfg.identity_channels)
        self.fc = nn.Linear(cfg.identity_channels[-1] * spatial * spatial, cfg.identity_dim)

    def forward(self, x):
        h = self.features(normalize_colors(x)).flatten(1)
        return torch.sigmoid(self.fc(h))


def sample_latent(mu, sigma, generator: torch.Generator | None = None, allow_zero: bool = False):
    """Reparameterised draw ``mu + sigma * eps`` with standard-normal ``eps``."""
    if mu.shape != sigma.shape:
        raise ShapeMismatch(f"mu {tuple(mu.shape)} vs sigma {tuple(sigma.shape)}")
    bad = (sigma < 0) if allow_zero else (sigma <= 0)
    if bool(bad.any()):
        raise NonPositiveSigma("sigma must be positive")
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
    return mu + sigma * eps


class FSNet(nn.Module):
    """All parameter groups plus the typed entry points used by training and inference."""

    def __init__(self, cfg: ArchitectureConfig = ArchitectureConfig()):
        super().__init__()
        problems = cfg.problems()
        if problems:
            raise ValueError("; ".join(problems))
        self.cfg = cfg
        self.enc_face = VariationalEncoder(cfg, cfg.d_f)
        self.enc_landmark = VariationalEncoder(cfg, cfg.d_l)
        self.dec_mask = Decoder(cfg, cfg.d_f + cfg.d_l, 1, bounded=False)
        self.dec_face = Decoder(cfg, cfg.d_f + cfg.d_l, 3, bounded=True)
        self.dec_landmark = Decoder(cfg, cfg.d_l, 1, bounded=False)
        self.generator = UNetGenerator(cfg)
        self.disc_global = GlobalDiscriminator(cfg)
        self.disc_patch = PatchDiscriminator(cfg)
        self.latent_classifier = nn.ModuleDict(
            {
                "face": LatentClassifier(cfg.d_f, cfg.classifier_hidden, cfg.leaky_slope),
                "mask": LatentClassifier(cfg.d_f + cfg.d_l, cfg.classifier_hidden, cfg.leaky_slope),
                "landmark": LatentClassifier(cfg.d_l, cfg.classifier_hidden, cfg.leaky_slope),
            }
        )
        self.identity_encoder = IdentityEncoder(cfg)
        _init_weights(self, cfg.init_std)

    def group(self, name: str) -> nn.Module:
        if name not in GROUPS:
            raise KeyError(name)
        return getattr(self, name)

    def group_parameters(self, *names):
        return [p for n in names for p in self.group(n).parameters()]

    # ------------------------------------------------------------ checks
    def _check_image(self, x):
        s = self.cfg.image_size
        if x.dim() != 4 or tuple(x.shape[1:]) != (3, s, s):
            raise ShapeMismatch(f"expected (N, 3, {s}, {s}) images, got {tuple(x.shape)}")

    def _check_latent(self, z, dim, what):
        if z.dim() != 2 or z.shape[1] != dim:
            raise ShapeMismatch(f"{what}: expected (N, {dim}), got {tuple(z.shape)}")

    # ------------------------------------------------------------ encoders
    def encode_face(self, x):
        self._check_image(x)
        return self.enc_face(x)

    def encode_landmarks_channel(self, x):
        self._check_image(x)
        return self.enc_landmark(x)

    # ------------------------------------------------------------ decoders
    def decode_mask(self, z_f, z_l):
        self._check_latent(z_f, self.cfg.d_f, "z_f")
        self._check_latent(z_l, self.cfg.d_l, "z_l")
        return self.dec_mask(torch.cat([z_f, z_l], dim=1))

    def decode_face(self, z_f, z_l):
        self._check_latent(z_f, self.cfg.d_f, "z_f")
        self._check_latent(z_l, self.cfg.d_l, "z_l")
        return self.dec_face(torch.cat([z_f, z_l], dim=1))

    def decode_landmarks(self, z_l):
        self._check_latent(z_l, self.cfg.d_l, "z_l")
        return self.dec_landmark(z_l)

    # ------------------------------------------------------------ generator
    def generate(self, nonface, z_f, z_l, training: bool = False, generator: torch.Generator | None = None):
        self._check_image(nonface)
        self._check_latent(z_f, self.cfg.d_f, "z_f")
        self._check_latent(z_l, self.cfg.d_l, "z_l")
        if training and self.cfg.noise_sigma > 0:
            noise = torch.randn(nonface.shape, generator=generator, dtype=nonface.dtype)
            nonface = nonface + self.cfg.noise_sigma * noise
        return self.generator(nonface, z_f, z_l)

    # ------------------------------------------------------------ critics
    def discriminate_global(self, x):
        self._check_image(x)
        return self.disc_global(x)

    def discriminate_patch(self, x):
        self._check_image(x)
        return self.disc_patch(x)

    def classify_latent(self, z, channel: str = "face"):
        clf = self.latent_classifier[channel]
        self._check_latent(z, clf.dim, f"{channel} code")
        return clf(z)

    def identity_features(self, x):
        self._check_image(x)
        return self.identity_encoder(x)


def images_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """HxWxC array or a sequence of them -> NCHW tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim == 3 + 1 and arr.shape[-1] not in (1, 3):
        raise ShapeMismatch(f"expected channels-last images, got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def masks_to_tensor(masks, dtype=torch.float32) -> torch.Tensor:
    arr = np.asarray(masks, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr[:, None])).to(dtype)


def tensor_to_images(x: torch.Tensor) -> np.ndarray:
    return x.detach().cpu().numpy().transpose(0, 2, 3, 1)
