"""Toy identity dataset: procedural glyph subjects, PNG I/O, and ingestion.

Each subject is a parametric glyph family (shape, palette, pose) rendered at
32x32 with per-image jitter in position, scale, rotation, brightness, and
background noise. The families are distinctive enough that a small
classifier separates them, which is what the evaluation layer relies on.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SIZE = 32
SPLIT_SIZE = 4
IMAGES_PER_SUBJECT = 3 * SPLIT_SIZE

_SHAPES = ("disk", "ring", "square", "diamond", "cross", "bars", "triangle", "checker")


def save_png(image: np.ndarray, path) -> None:
    """Write a (c, h, w) float image in [0,1] as an 8-bit PNG."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    u8 = np.round(arr * 255.0).astype(np.uint8)
    if u8.shape[0] == 1:
        Image.fromarray(u8[0], mode="L").save(path)
    else:
        Image.fromarray(u8.transpose(1, 2, 0), mode="RGB").save(path)


def load_png(path, size: int | None = None) -> np.ndarray:
    """Read a PNG as (c, h, w) float in [0,1], center-cropped and resized."""
    img = Image.open(path).convert("RGB")
    if size is not None and img.size != (size, size):
        w, h = img.size
        side = min(w, h)
        left, top = (w - side) // 2, (h - side) // 2
        img = img.crop((left, top, left + side, top + side)).resize((size, size), Image.BICUBIC)
    arr = np.asarray(img, dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def _render_glyph(subject_params: dict, img_rng: np.random.Generator, size: int = IMAGE_SIZE) -> np.ndarray:
    """Render one jittered instance of a subject's glyph family."""
    ss = 4
    n = size * ss
    p = subject_params
    cx = (p["cx"] + img_rng.uniform(-2.0, 2.0)) * ss
    cy = (p["cy"] + img_rng.uniform(-2.0, 2.0)) * ss
    r = max(p["r"] + img_rng.uniform(-1.0, 1.0), 3.0) * ss
    theta = p["theta"] + img_rng.uniform(-0.25, 0.25)
    bright = img_rng.uniform(0.85, 1.15)

    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)

    shape = p["shape"]
    if shape == "disk":
        mask = u**2 + v**2 <= r**2
    elif shape == "ring":
        rr = u**2 + v**2
        mask = (rr <= r**2) & (rr >= (0.55 * r) ** 2)
    elif shape == "square":
        mask = np.maximum(np.abs(u), np.abs(v)) <= r
    elif shape == "diamond":
        mask = np.abs(u) + np.abs(v) <= 1.25 * r
    elif shape == "cross":
        arm = 0.35 * r
        mask = ((np.abs(u) <= arm) & (np.abs(v) <= r)) | ((np.abs(v) <= arm) & (np.abs(u) <= r))
    elif shape == "bars":
        inside = np.maximum(np.abs(u), np.abs(v)) <= r
        mask = inside & (np.sin(u * p["freq"] / ss) > 0.0)
    elif shape == "triangle":
        vv = v + 0.6 * r
        mask = (vv >= 0) & (vv <= 1.6 * r) & (np.abs(u) <= 0.577 * (1.6 * r - vv))
    else:  # checker
        inside = np.maximum(np.abs(u), np.abs(v)) <= r
        pitch = max(r / 2.0, ss)
        mask = inside & (((np.floor(u / pitch) + np.floor(v / pitch)) % 2) == 0)

    dot_angle = p["dot_angle"]
    du = u - 0.62 * r * np.cos(dot_angle)
    dv = v - 0.62 * r * np.sin(dot_angle)
    dot = du**2 + dv**2 <= (0.22 * r) ** 2

    canvas = np.empty((3, n, n))
    for ch in range(3):
        canvas[ch] = p["bg"][ch]
        canvas[ch][mask] = p["fg"][ch]
        canvas[ch][dot] = p["dot"][ch]
    canvas = canvas.reshape(3, size, ss, size, ss).mean(axis=(2, 4))
    canvas = canvas * bright + img_rng.normal(0.0, 0.015, size=canvas.shape)
    return np.clip(canvas, 0.0, 1.0)


def _subject_params(rng: np.random.Generator, subject_index: int) -> dict:
    return {
        "shape": _SHAPES[subject_index % len(_SHAPES)],
        "bg": rng.uniform(0.08, 0.40, size=3),
        "fg": rng.uniform(0.55, 0.95, size=3),
        "dot": rng.uniform(0.0, 1.0, size=3),
        "cx": rng.uniform(13.0, 19.0),
        "cy": rng.uniform(13.0, 19.0),
        "r": rng.uniform(6.5, 10.5),
        "theta": rng.uniform(0.0, 2 * np.pi),
        "freq": rng.uniform(0.8, 1.6),
        "dot_angle": rng.uniform(0.0, 2 * np.pi),
    }


def make_toy_dataset(n_subjects: int, images_per_subject: int, seed: int, out_path) -> str:
    """Write a procedurally generated identity dataset as 8-bit PNGs.

    Layout: out_path/subject_XX/img_YY.png. Deterministic given seed.
    """
    if n_subjects < 2:
        raise ValueError("need at least 2 subjects")
    os.makedirs(out_path, exist_ok=True)
    for s in range(n_subjects):
        sdir = os.path.join(out_path, f"subject_{s:02d}")
        os.makedirs(sdir, exist_ok=True)
        params = _subject_params(np.random.default_rng(np.random.SeedSequence([seed, s])), s)
        for j in range(images_per_subject):
            img_rng = np.random.default_rng(np.random.SeedSequence([seed, s, j]))
            save_png(_render_glyph(params, img_rng), os.path.join(sdir, f"img_{j:02d}.png"))
    return str(out_path)


@dataclass
class SubjectSplit:
    """One subject's images split into reference / protect / extra-clean sets."""

    subject_id: str
    reference: np.ndarray  # X_A: surrogate-training set
    protect: np.ndarray  # X_db: the set that gets perturbed
    extra_clean: np.ndarray  # leak set for uncontrolled mixing
    source_files: list = field(default_factory=list)

    @property
    def all_clean(self) -> np.ndarray:
        return np.concatenate([self.reference, self.protect, self.extra_clean])


def ingest_dataset(path, size: int = IMAGE_SIZE) -> list[SubjectSplit]:
    """Load a subject-per-folder dataset into 4/4/4 splits.

    The first 12 images per subject, in lexicographic filename order, are
    center-cropped, resized, normalized to [0,1], and split in order into
    reference / protect / extra-clean. Subjects with fewer than 12 images
    are skipped with a warning.
    """
    splits = []
    for sub in sorted(os.listdir(path)):
        sdir = os.path.join(path, sub)
        if not os.path.isdir(sdir):
            continue
        files = sorted(
            f for f in os.listdir(sdir) if f.lower().endswith((".png", ".jpg", ".jpeg"))
        )
        if len(files) < IMAGES_PER_SUBJECT:
            log.warning("skipping subject %s: %d images < %d required", sub, len(files), IMAGES_PER_SUBJECT)
            continue
        files = files[:IMAGES_PER_SUBJECT]
        images = np.stack([load_png(os.path.join(sdir, f), size=size) for f in files])
        splits.append(
            SubjectSplit(
                subject_id=sub,
                reference=images[:SPLIT_SIZE],
                protect=images[SPLIT_SIZE : 2 * SPLIT_SIZE],
                extra_clean=images[2 * SPLIT_SIZE :],
                source_files=files,
            )
        )
    return splits


def load_labeled_images(path, size: int = IMAGE_SIZE):
    """All images under a subject-per-folder tree as (images, labels, names)."""
    images, labels, names = [], [], []
    for li, sub in enumerate(sorted(d for d in os.listdir(path) if os.path.isdir(os.path.join(path, d)))):
        sdir = os.path.join(path, sub)
        for f in sorted(os.listdir(sdir)):
            if f.lower().endswith((".png", ".jpg", ".jpeg")):
                images.append(load_png(os.path.join(sdir, f), size=size))
                labels.append(li)
        names.append(sub)
    if not images:
        return np.zeros((0, 3, size, size)), np.zeros(0, dtype=np.int64), names
    return np.stack(images), np.asarray(labels, dtype=np.int64), names
