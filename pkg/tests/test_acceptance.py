"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line."""

import hashlib
import math
import time

import numpy as np
import pytest
import torch

from fsnet.config import PrepareConfig
from fsnet.dataset_prep import FACE_HULL_POINTS, Landmarks68, SourceTag, build_face_mask, prepare_dataset, round_half_up
from fsnet.evaluator import inception_score_from_probs, ms_ssim, run_table1_protocol
from fsnet.experiments import overfit
from fsnet.losses import adversarial_terms, full_rec_loss, identity_loss_suite, mask_rec_loss, triplet_identity_loss
from fsnet.model import FSNet, images_to_tensor
from fsnet.swapper import reconstruct, swap
from fsnet.trainer import DatasetIndex, forward_pass, generator_losses, load_checkpoint, sample_triplet_batch, train
from conftest import micro_arch, random_records, small_arch, train_config
from oracles import brute_face_mask, central_difference, tf_ms_ssim


@pytest.fixture
def report(capsys):
    def emit(n, title, ok, detail=""):
        with capsys.disabled():
            print(f"\n[acceptance {n}] {title}: {'PASS' if ok else 'FAIL'} {detail}".rstrip())
        assert ok, detail

    return emit


def tree_hash(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def state_hash(model):
    h = hashlib.sha256()
    for k, v in model.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# ------------------------------------------------------------ 1


def test_1_geometry_oracle(report):
    t0 = time.perf_counter()
    mismatched = []
    radius = round_half_up(0.03 * 64)
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        pts = rng.uniform(4, 60, size=(68, 2))
        centre = rng.uniform(22, 42, size=2)
        pts41 = centre + rng.normal(scale=rng.uniform(2, 8), size=(41, 2))
        pts[list(FACE_HULL_POINTS)] = pts41
        mask = build_face_mask(Landmarks68(pts, SourceTag.synthetic), (64, 64)).astype(bool)
        if not np.array_equal(mask, brute_face_mask(pts41, (64, 64), radius=radius)):
            mismatched.append(seed)
    elapsed = time.perf_counter() - t0
    report(1, "geometry oracle", not mismatched and elapsed < 10,
           f"({50 - len(mismatched)}/50 pixel-exact, {elapsed:.1f}s)")


# ------------------------------------------------------------ 2


def test_2_loss_hand_checks(report):
    t = lambda v: torch.as_tensor(v, dtype=torch.float64)  # noqa: E731
    ln2 = math.log(2)
    y = t([[0.0, 1.0], [1.0, 0.0]]).view(1, 1, 2, 2)
    half = t([0.5, 0.5])
    a, n = torch.zeros(1, 4, dtype=torch.float64), torch.zeros(1, 4, dtype=torch.float64)
    n[0, 0] = math.sqrt(2.0)
    feats = lambda img: img.flatten(1)[:, :6]  # noqa: E731
    x = torch.rand(2, 3, 4, 4, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    checks = {
        "CE at p=0.5": (float(mask_rec_loss(y, torch.zeros_like(y))), ln2),
        "loss_D at 0.5": (float(adversarial_terms(half, half, half)[0]), 3 * ln2),
        "triplet d_neg=2": (float(triplet_identity_loss(a, a.clone(), n)), -1.05),
        "identity suite, identical": (float(identity_loss_suite(feats, x, x, x, x, x)), -0.15),
        "background L1": (float(full_rec_loss(torch.ones(1, 3, 2, 2), torch.zeros(1, 3, 2, 2), torch.zeros(1, 1, 2, 2), 0.5)), 0.5),
        "inception one-hot N=7": (inception_score_from_probs(np.eye(7)), 7.0),
    }
    bad = {k: v for k, v in checks.items() if abs(v[0] - v[1]) > 1e-5}
    report(2, "loss hand checks", not bad, f"({len(checks) - len(bad)}/{len(checks)} within 1e-5) {bad or ''}")


# ------------------------------------------------------------ 3


def test_3_gradient_check(report):
    t0 = time.perf_counter()
    torch.manual_seed(0)
    cfg = train_config(micro_arch(8))
    model = FSNet(cfg.arch).double().train()
    idx = DatasetIndex(random_records(3, 2, 8))
    tensors = {k: v.double() for k, v in sample_triplet_batch(idx, np.random.default_rng(0), 1).tensors().items()}

    def total():
        torch.manual_seed(0)  # classifier dropout draws from the global generator
        g = torch.Generator().manual_seed(1)
        return generator_losses(model, tensors, forward_pass(model, tensors, g), cfg.loss).total

    params = list(model.parameters())
    grads = torch.autograd.grad(total(), params, allow_unused=True)
    flat_grad = torch.cat([(torch.zeros_like(p) if g is None else g).reshape(-1) for p, g in zip(params, grads)])
    offsets = np.cumsum([p.numel() for p in params])
    rng = np.random.default_rng(0)
    # uniform probes, plus probes among entries whose gradient is large enough
    # for a 1e-3 relative comparison to sit above the finite-difference noise
    uniform = rng.choice(len(flat_grad), size=20, replace=False)
    resolvable = rng.choice(np.flatnonzero(flat_grad.abs().numpy() >= 1e-3), size=20, replace=False)

    def check(flat_ids, atol):
        worst = 0.0
        with torch.no_grad():
            for fid in flat_ids:
                k = int(np.searchsorted(offsets, fid, side="right"))
                i = int(fid - (offsets[k - 1] if k else 0))
                analytic = float(flat_grad[fid])
                fd = central_difference(total, params[k], i, h=1e-5)
                scale = max(abs(analytic), abs(fd))
                err = abs(analytic - fd)
                worst = max(worst, 0.0 if err <= atol else err / scale)
        return worst

    worst_uniform = check(uniform, atol=1e-6)
    worst_resolvable = check(resolvable, atol=0.0)
    elapsed = time.perf_counter() - t0
    report(3, "gradient check", max(worst_uniform, worst_resolvable) <= 1e-3 and elapsed < 120,
           f"({len(flat_grad)} parameters; worst rel err {worst_resolvable:.1e} on 20 resolvable probes, "
           f"{worst_uniform:.1e} on 20 uniform probes with atol 1e-6; {elapsed:.1f}s)")


# ------------------------------------------------------------ 4 / 5 / 6


@pytest.fixture(scope="module")
def overfit_runs(toy4):
    t0 = time.perf_counter()
    runs = [overfit(toy4, seed) for seed in range(5)]
    return runs, time.perf_counter() - t0


@pytest.mark.slow
def test_4_overfit(report, overfit_runs, capsys):
    runs, elapsed = overfit_runs
    with capsys.disabled():
        for r in runs:
            print(f"\n  seed {r.seed}: {r.steps} steps, L1 {r.recon_l1:.4f}, rec_full {r.rec_full_step10:.4f} -> "
                  f"{r.rec_full_final:.4f} ({r.rec_full_drop:.0%} drop)", end="")
    passed = sum(r.passed() for r in runs)
    report(4, "overfit toy corpus", passed >= 4 and elapsed < 900 and all(r.steps <= 2000 for r in runs),
           f"({passed}/5 seeds, {elapsed:.0f}s)")


@pytest.mark.slow
def test_5_self_swap_identity(report, overfit_runs, toy4):
    model = overfit_runs[0][0].model
    zero, repro = True, True
    for rec in toy4:
        s = swap(model, rec.image, rec.image)
        zero &= float(np.abs(s - reconstruct(model, rec.image)).max()) == 0.0
        repro &= np.array_equal(s, swap(model, rec.image, rec.image))
    report(5, "self-swap identity", zero and repro, f"(L1(swap(x,x), reconstruct(x)) == 0: {zero}; bit-reproducible: {repro})")


@pytest.mark.slow
def test_6_conditioning_liveness(report, overfit_runs, toy4):
    model = overfit_runs[0][0].model.eval()
    x = images_to_tensor([r.image for r in toy4])
    with torch.no_grad():
        mu_f, _ = model.encode_face(x)
        mu_l, _ = model.encode_landmarks_channel(x)
        nonface = x * (1 - images_to_tensor([r.face_mask[..., None] for r in toy4]))
        base = model.generate(nonface, mu_f, mu_l)
        g = torch.Generator().manual_seed(0)
        moved = model.generate(nonface, mu_f + torch.randn(mu_f.shape, generator=g), mu_l)
        lm_a = model.decode_landmarks(mu_l)
        _ = model.decode_face(torch.randn(mu_f.shape, generator=g), mu_l)
        lm_b = model.decode_landmarks(mu_l)
    # decode_landmarks has no z_f input at all; check it also has no hidden dependence
    z_f = mu_f.clone().requires_grad_(True)
    lm = model.decode_landmarks(mu_l)
    face = model.decode_face(z_f, mu_l)
    (grad,) = torch.autograd.grad(lm.sum(), z_f, allow_unused=True) if lm.grad_fn else (None,)
    live = float((base - moved).abs().mean())
    independent = torch.equal(lm_a, lm_b) and grad is None and face.requires_grad
    report(6, "conditioning liveness", live > 1e-4 and independent,
           f"(generate L1 change {live:.2e}; decode_landmarks independent of z_f: {independent})")


@pytest.mark.slow
def test_toy_protocol_orders_same_below_different(overfit_runs, toy4, capsys):
    model = overfit_runs[0][0].model
    rep = run_table1_protocol(model, toy4, 8, seed=0)
    same = rep.summary["same_person"]["abs_error"]["mean"]
    diff = rep.summary["different_people"]["abs_error"]["mean"]
    with capsys.disabled():
        print(f"\n  toy protocol: same-person abs error {same:.4f} < different-people {diff:.4f}", end="")
    assert same < diff


# ------------------------------------------------------------ 7


def test_7_metric_suite(report):
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(7)
    ident = max(abs(ms_ssim(im, im) - 1) for im in (rng.random((s, s, 3)) for s in (16, 64, 128)))
    cross = []
    for _ in range(5):
        a = np.clip(gaussian_filter(rng.random((192, 192, 3)), (3, 3, 0)) * 3 - 1, 0, 1)
        b = np.clip(a + rng.normal(scale=0.05, size=a.shape), 0, 1)
        cross.append(abs(ms_ssim(a, b) - tf_ms_ssim(a, b)))
    in_bounds = 0
    for _ in range(100):
        k = int(rng.integers(2, 20))
        p = rng.dirichlet(np.full(k, rng.uniform(0.05, 5)), size=int(rng.integers(1, 50)))
        in_bounds += 1 - 1e-9 <= inception_score_from_probs(p) <= k + 1e-9
    ok = ident <= 1e-6 and max(cross) <= 1e-4 and in_bounds == 100
    report(7, "metric suite", ok,
           f"(|ms_ssim(a,a)-1| {ident:.1e}; max diff vs TensorFlow {max(cross):.1e}; IS bounds {in_bounds}/100)")


# ------------------------------------------------------------ 8


def test_8_pipeline_determinism(report, raw_corpus, tmp_path):
    cfg = PrepareConfig()
    prepare_dataset(raw_corpus, tmp_path / "a", cfg, workers=1)
    prepare_dataset(raw_corpus, tmp_path / "b", cfg, workers=1)
    prepare_dataset(raw_corpus, tmp_path / "c", cfg, workers=4)
    ha, hb, hc = (tree_hash(tmp_path / d) for d in "abc")
    report(8, "pipeline determinism", ha == hb == hc, f"(runs identical: {ha == hb}; 1 vs 4 workers identical: {ha == hc})")


# ------------------------------------------------------------ 9


def test_9_resume_equivalence(report, prepared32, tmp_path):
    torch.use_deterministic_algorithms(True)
    try:
        cfg = train_config(small_arch(32), seed=4, per_role_batch=2)
        full = train(cfg, records=prepared32, out_dir=tmp_path / "full", steps=100)
        half = train(cfg, records=prepared32, out_dir=tmp_path / "half", steps=50)
        resumed = train(cfg, records=prepared32, out_dir=tmp_path / "half", resume=half, steps=50)
    finally:
        torch.use_deterministic_algorithms(False)
    a, b = load_checkpoint(full), load_checkpoint(resumed)
    same = a.step == b.step == 100 and state_hash(a.model) == state_hash(b.model)
    report(9, "resume equivalence", same, f"(steps {a.step}/{b.step}; parameter hash {state_hash(a.model)[:12]} vs {state_hash(b.model)[:12]})")
