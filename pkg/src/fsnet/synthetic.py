"""Procedural cartoon faces with exact 68-point landmarks and person silhouettes.

Stands in for CelebA at desk scale.  Images are drawn in the 178x218 source
frame so the full crop/resize path of preparation is exercised.  Each identity
owns a fixed parameter set (face shape, skin, hair, feature spacing); images of
one identity differ by pose jitter, lighting and background.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import cv2
import numpy as np

from .dataset_prep import MANIFEST, Annotation, write_image, write_mask

SOURCE_W, SOURCE_H = 178, 218


@dataclass(frozen=True)
class IdentityParams:
    face_a: float  # half width of the face ellipse
    face_b: float  # half height
    skin: tuple[float, float, float]
    hair: tuple[float, float, float]
    iris: tuple[float, float, float]
    lips: tuple[float, float, float]
    shirt: tuple[float, float, float]
    eye_dx: float  # eye centre offset from midline, in face_a units
    eye_w: float
    eye_h: float
    mouth_w: float
    nose_len: float
    bangs: float  # hairline height above the chin-to-crown midpoint is 1 - bangs


def identity_params(rng: np.random.Generator) -> IdentityParams:
    def color(lo, hi):
        return tuple(float(v) for v in rng.uniform(lo, hi, size=3))

    return IdentityParams(
        face_a=float(rng.uniform(32, 40)),
        face_b=float(rng.uniform(42, 52)),
        skin=tuple(float(v) for v in rng.uniform(0.45, 1.0) * np.array([1.0, 0.78, 0.62]) + rng.uniform(-0.05, 0.05, 3)),
        hair=color(0.0, 0.6),
        iris=color(0.0, 0.7),
        lips=color(0.4, 0.9),
        shirt=color(0.1, 0.9),
        eye_dx=float(rng.uniform(0.36, 0.46)),
        eye_w=float(rng.uniform(0.13, 0.19)),
        eye_h=float(rng.uniform(0.05, 0.09)),
        mouth_w=float(rng.uniform(0.25, 0.4)),
        nose_len=float(rng.uniform(0.3, 0.45)),
        bangs=float(rng.uniform(0.4, 0.6)),
    )


def template_landmarks(p: IdentityParams) -> np.ndarray:
    """68 points in unit face coordinates (x right, y down, face ellipse radius 1)."""
    pts = np.zeros((68, 2))
    # jaw from the image-left temple, round the chin, to the image-right temple
    t = np.linspace(np.pi + 0.3, -0.3, 17)
    pts[0:17] = np.stack([np.cos(t), np.sin(t)], axis=1)

    eye_y = -0.25
    for start, cx in ((36, -p.eye_dx), (42, p.eye_dx)):
        # leftmost corner, two top points, rightmost corner, two bottom points
        ang = np.deg2rad([180, 120, 60, 0, -60, -120])
        ex = cx + p.eye_w * np.cos(ang)
        ey = eye_y - p.eye_h * np.sin(ang)
        pts[start : start + 6] = np.stack([ex, ey], axis=1)
    for start, cx in ((17, -p.eye_dx), (22, p.eye_dx)):
        bx = cx + np.linspace(-1.2, 1.2, 5) * p.eye_w
        by = eye_y - 0.17 - 0.05 * np.cos(np.linspace(-1.2, 1.2, 5))
        pts[start : start + 5] = np.stack([bx, by], axis=1)

    # nose bridge 27-30 (30 = tip), base 31-35
    pts[27:31] = np.stack([np.zeros(4), np.linspace(-0.2, -0.2 + p.nose_len, 4)], axis=1)
    base_y = -0.2 + p.nose_len + 0.06
    pts[31:36] = np.stack([np.linspace(-0.12, 0.12, 5), np.full(5, base_y)], axis=1)

    mouth_y = min(base_y + 0.25, 0.62)
    w = p.mouth_w
    # outer lip: 48 left corner, 49-53 upper, 54 right corner, 55-59 lower
    upper = np.linspace(-w, w, 7)[1:-1]
    lower = np.linspace(w, -w, 7)[1:-1]
    pts[48] = (-w, mouth_y)
    pts[49:54] = np.stack([upper, mouth_y - 0.07 * np.sqrt(1 - (upper / w) ** 2)], axis=1)
    pts[54] = (w, mouth_y)
    pts[55:60] = np.stack([lower, mouth_y + 0.09 * np.sqrt(1 - (lower / w) ** 2)], axis=1)
    wi = 0.75 * w
    pts[60] = (-wi, mouth_y)
    xi = np.linspace(-wi, wi, 5)[1:-1]
    pts[61:64] = np.stack([xi, mouth_y - 0.025 * np.ones(3)], axis=1)
    pts[64] = (wi, mouth_y)
    pts[65:68] = np.stack([xi[::-1], mouth_y + 0.03 * np.ones(3)], axis=1)
    return pts


@dataclass(frozen=True)
class Pose:
    cx: float
    cy: float
    angle: float  # degrees, positive = counter-clockwise on screen
    scale: float
    brightness: float
    background: tuple[float, float, float]
    background2: tuple[float, float, float]


def random_pose(rng: np.random.Generator) -> Pose:
    return Pose(
        cx=float(SOURCE_W / 2 + rng.uniform(-6, 6)),
        cy=float(112 + rng.uniform(-6, 6)),
        angle=float(rng.uniform(-8, 8)),
        scale=float(rng.uniform(0.92, 1.08)),
        brightness=float(rng.uniform(0.8, 1.1)),
        background=tuple(float(v) for v in rng.uniform(0, 1, 3)),
        background2=tuple(float(v) for v in rng.uniform(0, 1, 3)),
    )


def _to_pixels(unit_pts, p: IdentityParams, pose: Pose) -> np.ndarray:
    a, b = p.face_a * pose.scale, p.face_b * pose.scale
    local = unit_pts * [a, b]
    th = np.deg2rad(-pose.angle)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    return local @ rot.T + [pose.cx, pose.cy]


def _poly(canvas, pts, color):
    cv2.fillPoly(canvas, [np.round(pts * 16).astype(np.int32)], color, cv2.LINE_8, shift=4)


def _ellipse(canvas, center, axes, angle, color, thickness=-1):
    cv2.ellipse(
        canvas,
        (int(round(center[0] * 16)), int(round(center[1] * 16))),
        (int(round(axes[0] * 16)), int(round(axes[1] * 16))),
        angle,
        0,
        360,
        color,
        thickness,
        cv2.LINE_8,
        shift=4,
    )


def render_face(p: IdentityParams, pose: Pose):
    """Draw one face. Returns (uint8 RGB image, 68x2 landmarks, silhouette)."""
    h, w = SOURCE_H, SOURCE_W
    ys = np.linspace(0, 1, h)[:, None, None]
    bg = (1 - ys) * np.array(pose.background) + ys * np.array(pose.background2)
    canvas = np.broadcast_to(bg, (h, w, 3)).astype(np.float32).copy()
    sil = np.zeros((h, w), dtype=np.uint8)

    a, b = p.face_a * pose.scale, p.face_b * pose.scale
    center = (pose.cx, pose.cy)
    draw_angle = -pose.angle

    def both(draw_fn, color, *args):
        draw_fn(canvas, *args, color)
        draw_fn(sil, *args, 1)

    # shoulders and neck
    shoulders = np.array(
        [[pose.cx - 1.9 * a, h + 5], [pose.cx - 1.6 * a, pose.cy + 1.45 * b],
         [pose.cx + 1.6 * a, pose.cy + 1.45 * b], [pose.cx + 1.9 * a, h + 5]]
    )
    both(_poly, p.shirt, shoulders)
    neck = _to_pixels(np.array([[-0.45, 0.5], [0.45, 0.5], [0.5, 1.5], [-0.5, 1.5]]), p, pose)
    both(_poly, p.skin, neck)
    # hair behind the head
    hair_c = _to_pixels(np.array([[0.0, -0.2]]), p, pose)[0]
    _ellipse(canvas, hair_c, (1.3 * a, 1.15 * b), draw_angle, p.hair)
    _ellipse(sil, hair_c, (1.3 * a, 1.15 * b), draw_angle, 1)
    # face
    _ellipse(canvas, center, (a, b), draw_angle, p.skin)
    _ellipse(sil, center, (a, b), draw_angle, 1)
    # bangs: hair covering the top of the forehead
    t = np.linspace(np.pi, 2 * np.pi, 24)
    cap = np.stack([1.05 * np.cos(t), 1.05 * np.sin(t)], axis=1)
    cap[:, 1] = np.minimum(cap[:, 1], -1.0 + p.bangs)
    _poly(canvas, _to_pixels(cap, p, pose), p.hair)

    unit = template_landmarks(p)
    lm = _to_pixels(unit, p, pose)

    # eyes: sclera, iris; brows
    for start in (36, 42):
        c = lm[start : start + 6].mean(axis=0)
        _ellipse(canvas, c, (p.eye_w * a, p.eye_h * b * 1.2), draw_angle, (0.97, 0.97, 0.97))
        _ellipse(canvas, c, (p.eye_h * b * 0.9, p.eye_h * b * 0.9), 0, p.iris)
    for start in (17, 22):
        cv2.polylines(
            canvas, [np.round(lm[start : start + 5] * 16).astype(np.int32)], False,
            tuple(0.6 * np.array(p.hair)), 2, cv2.LINE_8, shift=4,
        )
    # nose
    cv2.polylines(
        canvas, [np.round(lm[27:31] * 16).astype(np.int32), np.round(lm[31:36] * 16).astype(np.int32)],
        False, tuple(0.75 * np.array(p.skin)), 1, cv2.LINE_8, shift=4,
    )
    # mouth
    _poly(canvas, lm[48:60], p.lips)
    _poly(canvas, lm[60:68], tuple(0.4 * np.array(p.lips)))

    img = np.clip(canvas * pose.brightness, 0, 1)
    img = np.floor(img * 255 + 0.5).astype(np.uint8)
    return img, lm, sil.astype(bool)


def render_blank(rng: np.random.Generator):
    """Background-only image: no face, so landmark detection must fail."""
    pose = random_pose(rng)
    ys = np.linspace(0, 1, SOURCE_H)[:, None, None]
    bg = (1 - ys) * np.array(pose.background) + ys * np.array(pose.background2)
    img = np.broadcast_to(bg, (SOURCE_H, SOURCE_W, 3))
    return np.floor(img * 255 + 0.5).astype(np.uint8)


def generate_synthetic_corpus(
    n_identities: int,
    images_per_identity: int,
    seed: int,
    out_dir,
    n_faceless: int = 0,
) -> dict:
    """Write images, annotation sidecars, silhouettes and a manifest to ``out_dir``.

    Deterministic per seed. Returns the manifest dict.
    """
    out = Path(out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for k in range(n_identities):
        params = identity_params(rng)
        for j in range(images_per_identity):
            name = f"id{k:03d}_img{j:02d}"
            img, lm, sil = render_face(params, random_pose(rng))
            write_image(out / f"{name}.png", img)
            write_mask(out / "masks" / f"{name}_fg.png", sil)
            ann = Annotation(identity=k, landmarks=lm, name=name)
            (out / f"{name}.json").write_text(
                json.dumps(ann.to_json(f"masks/{name}_fg.png"))
            )
            records.append({"name": name, "identity": k, "params": asdict(params)})
    for j in range(n_faceless):
        name = f"noface_{j:02d}"
        write_image(out / f"{name}.png", render_blank(rng))
        ann = Annotation(identity=-1, landmarks=None, name=name)
        (out / f"{name}.json").write_text(json.dumps(ann.to_json(None)))
        records.append({"name": name, "identity": -1, "params": None})
    manifest = {
        "generator": "synthetic",
        "seed": seed,
        "n_identities": n_identities,
        "images_per_identity": images_per_identity,
        "records": records,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return manifest
