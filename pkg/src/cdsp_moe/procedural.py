"""Procedural 28x28 image tasks for desk-scale runs without downloaded datasets.

Three ten-class tasks mirroring the structure of the usual benchmark trio:

* task 0 ``digits``  - thin handwritten-style digit strokes (sparse, symbolic)
* task 1 ``glyphs``  - denser multi-stroke cursive glyphs (sparse, symbolic)
* task 2 ``objects`` - filled, textured garment silhouettes (dense, object-like)

Every sample gets its own random affine warp, stroke width and vertex jitter,
so classes are learnable but not trivially separable.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import SIDE, LabeledImageSet, save_idx_set
from .linalg import Rng

TASK_NAMES = ("digits", "glyphs", "objects")

_yy, _xx = np.mgrid[0:SIDE, 0:SIDE]
_PIX = np.stack([(_xx.ravel() + 0.5) / SIDE, (_yy.ravel() + 0.5) / SIDE], axis=1)
_SUB = np.concatenate([_PIX + np.array(o) / (2 * SIDE)
                       for o in ((-0.5, -0.5), (0.5, -0.5), (-0.5, 0.5), (0.5, 0.5))])


def _ellipse(cx, cy, rx, ry, n=18, start=0.0, stop=2 * np.pi):
    t = np.linspace(start, stop, n)
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


_DIGITS = [
    [_ellipse(0.5, 0.5, 0.19, 0.32)],
    [np.array([(0.42, 0.27), (0.54, 0.16), (0.54, 0.85)])],
    [np.array([(0.3, 0.3), (0.4, 0.17), (0.6, 0.17), (0.69, 0.3), (0.64, 0.45), (0.3, 0.84), (0.72, 0.84)])],
    [np.array([(0.3, 0.2), (0.66, 0.18), (0.48, 0.46), (0.68, 0.6), (0.62, 0.81), (0.3, 0.82)])],
    [np.array([(0.6, 0.85), (0.6, 0.15), (0.27, 0.62), (0.75, 0.62)])],
    [np.array([(0.68, 0.17), (0.36, 0.17), (0.33, 0.47), (0.6, 0.44), (0.7, 0.62), (0.6, 0.82), (0.3, 0.81)])],
    [np.array([(0.62, 0.16), (0.42, 0.33), (0.33, 0.6), (0.4, 0.82), (0.6, 0.83), (0.68, 0.66),
               (0.56, 0.51), (0.36, 0.58)])],
    [np.array([(0.29, 0.17), (0.71, 0.17), (0.44, 0.85)])],
    [_ellipse(0.5, 0.32, 0.15, 0.15), _ellipse(0.5, 0.66, 0.18, 0.18)],
    [_ellipse(0.5, 0.34, 0.17, 0.17), np.array([(0.67, 0.34), (0.6, 0.85)])],
]


def _glyph_templates(seed: int = 20240611) -> list[list[np.ndarray]]:
    rng = Rng(seed)
    t = np.linspace(0.0, 1.0, 9)[:, None]
    glyphs = []
    for c in range(10):
        strokes = []
        for _ in range(3 + c % 2):
            p0, p1, p2 = rng.uniform(0.18, 0.82, size=(3, 2))
            strokes.append((1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2)
        glyphs.append(strokes)
    return glyphs


_GLYPHS = _glyph_templates()

_TSHIRT = [(0.3, 0.2), (0.42, 0.15), (0.58, 0.15), (0.7, 0.2), (0.86, 0.38), (0.75, 0.46), (0.68, 0.39),
           (0.68, 0.85), (0.32, 0.85), (0.32, 0.39), (0.25, 0.46), (0.14, 0.38)]
_PULLOVER = [(0.3, 0.17), (0.7, 0.17), (0.88, 0.8), (0.78, 0.82), (0.68, 0.45), (0.68, 0.85), (0.32, 0.85),
             (0.32, 0.45), (0.22, 0.82), (0.12, 0.8)]
_OBJECTS = [
    {"poly": [_TSHIRT]},
    {"poly": [[(0.33, 0.12), (0.67, 0.12), (0.71, 0.88), (0.56, 0.88), (0.5, 0.38), (0.44, 0.88), (0.29, 0.88)]]},
    {"poly": [_PULLOVER]},
    {"poly": [[(0.43, 0.12), (0.57, 0.12), (0.6, 0.4), (0.8, 0.88), (0.2, 0.88), (0.4, 0.4)]]},
    {"poly": [[(x, y + 0.03 if y > 0.8 else y) for x, y in _PULLOVER]],
     "dark": [np.array([(0.5, 0.2), (0.5, 0.88)])]},
    {"poly": [[(0.1, 0.52), (0.9, 0.52), (0.9, 0.57), (0.1, 0.57)],
              [(0.14, 0.64), (0.86, 0.64), (0.86, 0.69), (0.14, 0.69)],
              [(0.1, 0.77), (0.9, 0.77), (0.9, 0.84), (0.1, 0.84)]]},
    {"poly": [_TSHIRT[:2] + [(0.5, 0.28)] + _TSHIRT[2:]],
     "dark": [np.array([(0.5, 0.3), (0.5, 0.85)])]},
    {"poly": [[(0.1, 0.56), (0.45, 0.5), (0.65, 0.6), (0.9, 0.67), (0.9, 0.8), (0.1, 0.8)]]},
    {"poly": [[(0.2, 0.38), (0.8, 0.38), (0.8, 0.86), (0.2, 0.86)]],
     "stroke": [_ellipse(0.5, 0.38, 0.17, 0.2, start=np.pi, stop=2 * np.pi)]},
    {"poly": [[(0.3, 0.14), (0.56, 0.14), (0.58, 0.55), (0.9, 0.67), (0.9, 0.86), (0.3, 0.86)]]},
]


def _random_affine(rng: Rng, rot=0.2, scale=(0.85, 1.1), shear=0.15, shift=0.07):
    th = rng.uniform(-rot, rot)
    sx, sy = rng.uniform(*scale, size=2)
    sh = rng.uniform(-shear, shear)
    rot_m = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    m = rot_m @ np.array([[sx, sh], [0.0, sy]])
    t = rng.uniform(-shift, shift, size=2)
    return lambda p: (np.asarray(p) - 0.5) @ m.T + 0.5 + t


def _segment_distance(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    a, b = poly[:-1], poly[1:]
    ab = b - a
    ap = points[:, None, :] - a[None]
    denom = np.maximum((ab ** 2).sum(axis=1), 1e-12)
    t = np.clip((ap * ab[None]).sum(axis=2) / denom, 0.0, 1.0)
    d = ap - t[..., None] * ab[None]
    return np.sqrt((d ** 2).sum(axis=2)).min(axis=1)


def _strokes(polys, width_px: float) -> np.ndarray:
    d = np.min([_segment_distance(_PIX, p) for p in polys], axis=0) * SIDE
    return np.clip(width_px / 2 - d + 0.5, 0.0, 1.0)


def _inside(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    x1, y1 = poly[:, 0], poly[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    px, py = points[:, :1], points[:, 1:]
    cond = (y1 > py) != (y2 > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
    return ((cond & (px < xint)).sum(axis=1) % 2) == 1


def _filled(polys) -> np.ndarray:
    hit = np.zeros(len(_SUB), dtype=bool)
    for p in polys:
        hit |= _inside(_SUB, p)
    return hit.reshape(4, -1).mean(axis=0)


def _render_stroke_class(templates, rng: Rng, jitter: float, width=(1.3, 2.4)) -> np.ndarray:
    warp = _random_affine(rng)
    polys = [warp(p + rng.normal(0.0, jitter, size=p.shape)) for p in templates]
    return _strokes(polys, rng.uniform(*width))


def _render_object(spec: dict, rng: Rng) -> np.ndarray:
    warp = _random_affine(rng, rot=0.1, shift=0.05)
    polys = [warp(np.asarray(p) + rng.normal(0.0, 0.012, size=np.shape(p))) for p in spec["poly"]]
    mask = _filled(polys)
    if "stroke" in spec:
        mask = np.maximum(mask, _strokes([warp(p) for p in spec["stroke"]], rng.uniform(1.5, 2.5)))
    base = rng.uniform(0.45, 0.95)
    ang = rng.uniform(0, np.pi)
    freq = rng.uniform(4, 14)
    proj = _PIX @ np.array([np.cos(ang), np.sin(ang)])
    texture = 1.0 + rng.uniform(0.05, 0.3) * np.sin(2 * np.pi * freq * proj + rng.uniform(0, 2 * np.pi))
    img = mask * base * texture
    if "dark" in spec:
        img *= 1.0 - 0.7 * _strokes([warp(p) for p in spec["dark"]], 1.5)
    return img


def render(task: int, label: int, rng: Rng) -> np.ndarray:
    if task == 0:
        img = _render_stroke_class(_DIGITS[label], rng, jitter=0.018)
    elif task == 1:
        img = _render_stroke_class(_GLYPHS[label], rng, jitter=0.03, width=(1.2, 2.0))
    elif task == 2:
        img = _render_object(_OBJECTS[label], rng)
    else:
        raise ValueError(f"unknown task {task}")
    img = img + rng.normal(0.0, 0.03, size=img.shape)
    # quantise exactly as an IDX byte would
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def make_task(task: int, n: int, seed: int) -> LabeledImageSet:
    rng = Rng(seed).spawn(1000 + task)
    labels = np.arange(n) % 10
    labels = labels[rng.permutation(n)]
    images = np.stack([render(task, int(c), rng) for c in labels]) if n else np.zeros((0, SIDE * SIDE))
    return LabeledImageSet(images, labels.astype(np.int64), task)


def make_desk_tasks(n_per_task: int, seed: int = 0) -> list[LabeledImageSet]:
    return [make_task(t, n_per_task, seed) for t in range(3)]


def write_desk_idx(directory, n_per_task: int, seed: int = 0) -> dict:
    """Write the three procedural tasks as IDX pairs; returns the data-config paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for ds, name in zip(make_desk_tasks(n_per_task, seed), TASK_NAMES):
        img = directory / f"{name}-images-idx3-ubyte"
        lab = directory / f"{name}-labels-idx1-ubyte"
        save_idx_set(ds, img, lab)
        paths[str(ds.task_id)] = {"images": str(img), "labels": str(lab)}
    return paths
