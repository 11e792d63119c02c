"""Triplet sampling, the alternating update step, checkpoints and the training loop.

One global step runs four sub-updates, each with its own Adam state:

1. discriminators (global + patch) on real / reconstructed / random-face images
2. latent classifiers on encoder codes vs prior draws
3. identity encoder on the real triplet only
4. encoders, decoders and generator on the weighted total loss

All randomness for step ``k`` is derived from ``(seed, k)``, so a resumed run
replays exactly the same batches and noise as an uninterrupted one.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ArchitectureConfig, Config, LossWeights, config_from_dict
from .dataset_prep import FaceRecord, load_dataset
from .errors import CheckpointMismatch, InsufficientIdentities, NonFiniteLoss
from .losses import (
    LossBundle,
    adversarial_terms,
    encoder_latent_loss,
    face_rec_loss,
    full_rec_loss,
    generator_adv_loss,
    identity_loss_suite,
    landmark_rec_loss,
    latent_class_terms,
    mask_rec_loss,
    total_loss,
    triplet_identity_loss,
)
from .model import FSNet, images_to_tensor, masks_to_tensor, sample_latent

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "fsnet-checkpoint"
CHECKPOINT_VERSION = 1

OPTIMIZER_GROUPS = {
    "disc": ("disc_global", "disc_patch"),
    "classifier": ("latent_classifier",),
    "identity": ("identity_encoder",),
    "vae_gan": ("enc_face", "enc_landmark", "dec_mask", "dec_face", "dec_landmark", "generator"),
}


# ------------------------------------------------------------------ batches


@dataclass
class TripletBatch:
    s1: list[FaceRecord]
    s2: list[FaceRecord]
    t: list[FaceRecord]

    def tensors(self) -> dict[str, torch.Tensor]:
        recs = self.s1 + self.s2 + self.t
        return {
            "x": images_to_tensor([r.image for r in recs]),
            "face_mask": masks_to_tensor([r.face_mask for r in recs]),
            "landmarks": masks_to_tensor([r.landmark_image for r in recs]),
            "foreground": masks_to_tensor([r.foreground_mask for r in recs]),
        }


class DatasetIndex:
    def __init__(self, records: list[FaceRecord]):
        self.records = list(records)
        by_id: dict[int, list[int]] = {}
        for i, r in enumerate(self.records):
            by_id.setdefault(int(r.identity_label), []).append(i)
        self.by_identity = dict(sorted(by_id.items()))
        self.identities = list(self.by_identity)
        self.anchor_identities = [k for k, v in self.by_identity.items() if len(v) >= 2]
        if len(self.identities) < 2 or not self.anchor_identities:
            raise InsufficientIdentities(
                f"need >= 2 identities and one with >= 2 images; got "
                f"{len(self.identities)} identities, {len(self.anchor_identities)} with pairs"
            )


def sample_triplet_batch(index: DatasetIndex, rng: np.random.Generator, n: int) -> TripletBatch:
    """Anchor identity uniform over identities with >= 2 images; the negative
    identity uniform over the remaining identities."""
    s1, s2, t = [], [], []
    for _ in range(n):
        k = index.anchor_identities[rng.integers(len(index.anchor_identities))]
        i, j = rng.choice(index.by_identity[k], size=2, replace=False)
        others = [q for q in index.identities if q != k]
        q = others[rng.integers(len(others))]
        pool = index.by_identity[q]
        s1.append(index.records[i])
        s2.append(index.records[j])
        t.append(index.records[pool[rng.integers(len(pool))]])
    return TripletBatch(s1, s2, t)


# ------------------------------------------------------------------- state


@dataclass
class TrainState:
    model: FSNet
    config: Config
    optimizers: dict[str, torch.optim.Optimizer] = field(default_factory=dict)
    step: int = 0

    def group_parameters(self, opt_name):
        return self.model.group_parameters(*OPTIMIZER_GROUPS[opt_name])


def make_optimizers(model: FSNet, cfg: Config) -> dict[str, torch.optim.Optimizer]:
    t = cfg.train
    return {
        name: torch.optim.Adam(model.group_parameters(*groups), lr=t.lr, betas=(t.beta1, t.beta2))
        for name, groups in OPTIMIZER_GROUPS.items()
    }


def init_state(cfg: Config) -> TrainState:
    torch.manual_seed(cfg.train.seed)
    model = FSNet(cfg.arch)
    return TrainState(model=model, config=cfg, optimizers=make_optimizers(model, cfg))


def step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step]).generate_state(1, dtype=np.uint64)[0] >> 1)


def _update(opt, params, loss, clip, name, metrics):
    opt.zero_grad(set_to_none=True)
    loss.backward(inputs=params)
    norm = torch.nn.utils.clip_grad_norm_(params, clip)
    if not torch.isfinite(norm):
        raise NonFiniteLoss(f"non-finite gradient in {name} update", metrics)
    opt.step()
    return float(norm)


def _check(name, value, metrics):
    v = float(value.detach()) if torch.is_tensor(value) else float(value)
    metrics[name] = v
    if not np.isfinite(v):
        raise NonFiniteLoss(f"{name} is not finite ({v})", metrics)


def forward_pass(model: FSNet, tensors: dict, g: torch.Generator) -> dict:
    """Encoder-decoder and generator outputs shared by all sub-updates.

    ``tensors["x"]`` holds the roles stacked as [s1; s2; t].
    """
    x, m_face = tensors["x"], tensors["face_mask"]
    n = x.shape[0] // 3
    mu_f, sig_f = model.encode_face(x)
    mu_l, sig_l = model.encode_landmarks_channel(x)
    z_f = sample_latent(mu_f, sig_f, g)
    z_l = sample_latent(mu_l, sig_l, g)
    nonface = x * (1.0 - m_face)
    out = {
        "n": n,
        "z_f": z_f,
        "z_l": z_l,
        "mask_logits": model.decode_mask(z_f, z_l),
        "face_pred": model.decode_face(z_f, z_l),
        "lm_logits": model.decode_landmarks(z_l),
        "recon": model.generate(nonface, z_f, z_l, training=True, generator=g),
    }
    prior_f = torch.randn(z_f.shape, generator=g, dtype=x.dtype)
    prior_l = torch.randn(z_l.shape, generator=g, dtype=x.dtype)
    out["random_face"] = model.generate(nonface, prior_f, prior_l, training=True, generator=g)
    nonface_t, z_l_t = nonface[2 * n :], z_l[2 * n :]
    out["swap_s1t"] = model.generate(nonface_t, z_f[:n], z_l_t, training=True, generator=g)
    out["swap_s2t"] = model.generate(nonface_t, z_f[n : 2 * n], z_l_t, training=True, generator=g)
    return out


def generator_losses(model: FSNet, tensors: dict, fwd: dict, w: LossWeights) -> LossBundle:
    """Every term minimised by the encoders, decoders and generator, plus the total."""
    x, m_face = tensors["x"], tensors["face_mask"]
    n = fwd["n"]
    z_f, z_l = fwd["z_f"], fwd["z_l"]
    recon, random_face = fwd["recon"], fwd["random_face"]
    clf = model.latent_classifier
    alphas = (w.alpha1, w.alpha2, w.alpha3)
    bundle = LossBundle(
        rec_mask=mask_rec_loss(m_face, fwd["mask_logits"]),
        rec_face=face_rec_loss(x * m_face, fwd["face_pred"]),
        rec_landmark=landmark_rec_loss(tensors["landmarks"], fwd["lm_logits"]),
        rec_full=full_rec_loss(x, recon, tensors["foreground"], w.beta_bg),
        lat_face=encoder_latent_loss(clf["face"](z_f), w.latent_loss),
        lat_mask=encoder_latent_loss(clf["mask"](torch.cat([z_f, z_l], dim=1)), w.latent_loss),
        lat_landmark=encoder_latent_loss(clf["landmark"](z_l), w.latent_loss),
        adv_global=generator_adv_loss(model.disc_global(recon), model.disc_global(random_face)),
        adv_patch=generator_adv_loss(model.disc_patch(recon), model.disc_patch(random_face)),
        identity=identity_loss_suite(
            model.identity_encoder, x[:n], x[n : 2 * n], x[2 * n :],
            fwd["swap_s1t"], fwd["swap_s2t"], alphas, w.triplet_hinge,
        ),
    )
    bundle.total = total_loss(bundle, w)
    return bundle


def train_step(state: TrainState, batch, generator: torch.Generator | None = None) -> dict[str, float]:
    """One global step; mutates ``state`` and returns the logged metrics."""
    model, cfg = state.model, state.config
    w, clip = cfg.loss, cfg.train.grad_clip
    model.train()
    tensors = batch.tensors() if isinstance(batch, TripletBatch) else batch
    x = tensors["x"]
    n = x.shape[0] // 3
    g = generator if generator is not None else torch.Generator().manual_seed(
        step_seed(cfg.train.seed, state.step)
    )
    metrics: dict[str, float] = {"step": state.step + 1}

    fwd = forward_pass(model, tensors, g)
    z_f, z_l = fwd["z_f"], fwd["z_l"]
    recon, random_face = fwd["recon"], fwd["random_face"]

    # (1) discriminators
    fake_r, fake_q = recon.detach(), random_face.detach()
    d_g, _ = adversarial_terms(model.disc_global(x), model.disc_global(fake_r), model.disc_global(fake_q))
    d_p, _ = adversarial_terms(model.disc_patch(x), model.disc_patch(fake_r), model.disc_patch(fake_q))
    _check("disc_global_loss", d_g, metrics)
    _check("disc_patch_loss", d_p, metrics)
    metrics["grad_norm_disc"] = _update(
        state.optimizers["disc"], state.group_parameters("disc"), d_g + d_p, clip, "disc", metrics
    )

    # (2) latent classifiers
    codes = {
        "face": z_f,
        "mask": torch.cat([z_f, z_l], dim=1),
        "landmark": z_l,
    }
    priors = {
        "face": torch.randn(z_f.shape, generator=g, dtype=x.dtype),
        "landmark": torch.randn(z_l.shape, generator=g, dtype=x.dtype),
    }
    priors["mask"] = torch.randn(codes["mask"].shape, generator=g, dtype=x.dtype)
    clf = model.latent_classifier
    loss_c = sum(
        latent_class_terms(clf[k](codes[k].detach()), clf[k](priors[k]), w.latent_loss)[0]
        for k in codes
    )
    _check("classifier_loss", loss_c, metrics)
    metrics["grad_norm_classifier"] = _update(
        state.optimizers["classifier"], state.group_parameters("classifier"), loss_c, clip, "classifier", metrics
    )

    # (3) identity encoder, real triplets only
    alphas = (w.alpha1, w.alpha2, w.alpha3)
    fid = model.identity_encoder
    loss_id_enc = triplet_identity_loss(fid(x[:n]), fid(x[n : 2 * n]), fid(x[2 * n :]), alphas, w.triplet_hinge)
    _check("identity_encoder_loss", loss_id_enc, metrics)
    metrics["grad_norm_identity"] = _update(
        state.optimizers["identity"], state.group_parameters("identity"), loss_id_enc, clip, "identity", metrics
    )

    # (4) encoders, decoders, generator
    bundle = generator_losses(model, tensors, fwd, w)
    for k, v in bundle.as_floats().items():
        _check(k, v, metrics)
    metrics["grad_norm_vae_gan"] = _update(
        state.optimizers["vae_gan"], state.group_parameters("vae_gan"), bundle.total, clip, "vae_gan", metrics
    )
    state.step += 1
    return metrics


# ------------------------------------------------------------- checkpoints


def save_checkpoint(state: TrainState, path) -> Path:
    """Atomic write: serialise to a sibling temp file, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "model": state.model.state_dict(),
        "optimizers": {k: o.state_dict() for k, o in state.optimizers.items()},
        "step": state.step,
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path, expected_arch: ArchitectureConfig | None = None) -> TrainState:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointMismatch(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointMismatch(f"{path} is not an FSNet checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointMismatch(f"unsupported checkpoint version {payload.get('version')}")
    cfg = config_from_dict(payload["config"])
    if expected_arch is not None and expected_arch != cfg.arch:
        raise CheckpointMismatch("checkpoint architecture differs from the requested configuration")
    model = FSNet(cfg.arch)
    try:
        model.load_state_dict(payload["model"])
        optimizers = make_optimizers(model, cfg)
        for k, o in optimizers.items():
            o.load_state_dict(payload["optimizers"][k])
    except (RuntimeError, KeyError, ValueError) as exc:
        raise CheckpointMismatch(f"checkpoint contents do not match its config: {exc}") from exc
    return TrainState(model=model, config=cfg, optimizers=optimizers, step=int(payload["step"]))


def load_model(path) -> FSNet:
    model = load_checkpoint(path).model
    model.eval()
    return model


# --------------------------------------------------------------------- loop


METRIC_FIELDS = (
    ["step"]
    + [f for f in LossBundle.COMPONENTS]
    + ["total", "disc_global_loss", "disc_patch_loss", "classifier_loss", "identity_encoder_loss"]
    + [f"grad_norm_{k}" for k in OPTIMIZER_GROUPS]
)


def _append_metrics(path: Path, row: dict) -> None:
    new = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, extrasaction="ignore")
        if new:
            writer.writeheader()
        writer.writerow(row)


def train(
    config: Config,
    records: list[FaceRecord] | None = None,
    out_dir=None,
    resume=None,
    steps: int | None = None,
    callback=None,
) -> Path:
    """Run training and return the path of the final checkpoint.

    ``steps`` counts steps run by this call (default: up to ``max_steps``).
    ``callback(state, metrics)`` runs after every step; a truthy return stops
    training early (the final checkpoint is still written).
    Records default to the train split of ``config.train.data_dir``.
    """
    torch.use_deterministic_algorithms(True)
    out = Path(out_dir or config.train.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    if records is None:
        records = load_dataset(config.train.data_dir, split="train")
    index = DatasetIndex(records)

    if resume is not None:
        state = load_checkpoint(resume, expected_arch=config.arch)
        # resumed runs keep the checkpoint's optimisation settings
        config = state.config.replace(train=state.config.train)
    else:
        state = init_state(config)
    target = config.train.max_steps if steps is None else state.step + steps
    seed = state.config.train.seed
    n = state.config.train.per_role_batch
    interval = state.config.train.checkpoint_interval
    metrics_path = out / "metrics.csv"
    ckpt = None

    while state.step < target:
        rng = np.random.default_rng([seed, state.step])
        batch = sample_triplet_batch(index, rng, n)
        try:
            metrics = train_step(state, batch)
        except NonFiniteLoss as exc:
            dump = out / f"nonfinite_step{state.step + 1:07d}.json"
            dump.write_text(json.dumps({"step": state.step + 1, "error": str(exc), "metrics": exc.metrics}, indent=1))
            exc.dump_path = dump
            log.error("non-finite loss at step %d, diagnostics in %s", state.step + 1, dump)
            raise
        _append_metrics(metrics_path, metrics)
        if state.step % interval == 0:
            ckpt = save_checkpoint(state, out / f"checkpoint_{state.step:07d}.pt")
            log.info("step %d: saved %s", state.step, ckpt)
        if callback is not None and callback(state, metrics):
            log.info("step %d: stopped by callback", state.step)
            break
    final = out / f"checkpoint_{state.step:07d}.pt"
    if ckpt != final:
        ckpt = save_checkpoint(state, final)
    return ckpt
