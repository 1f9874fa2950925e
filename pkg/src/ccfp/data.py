"""Digit data: IDX ingestion, procedural glyphs, rotated/colored domains, splits."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, IdxConsistencyError, IdxFormatError, IdxLengthError

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
GLYPH_SIZE = 28


# ---------------------------------------------------------------------------
# IDX


def _read_header(buf: bytes, path, expected_magic: int, ndim: int) -> Tuple[int, ...]:
    if len(buf) < 4 + 4 * ndim:
        raise IdxLengthError(f"{path}: file too short for an IDX header ({len(buf)} bytes)")
    magic = int.from_bytes(buf[:4], "big")
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: magic number {magic}, expected {expected_magic}")
    return tuple(int.from_bytes(buf[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim))


def read_idx_images(path) -> np.ndarray:
    """uint8 array of shape (N, rows, cols)."""
    buf = Path(path).read_bytes()
    n, rows, cols = _read_header(buf, path, IMAGE_MAGIC, 3)
    payload = buf[16:]
    need = n * rows * cols
    if len(payload) < need:
        raise IdxLengthError(f"{path}: header declares {need} pixel bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8, count=need).reshape(n, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (n,) = _read_header(buf, path, LABEL_MAGIC, 1)
    payload = buf[8:]
    if len(payload) < n:
        raise IdxLengthError(f"{path}: header declares {n} labels, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8, count=n).astype(np.int64)


def load_idx(images_path, labels_path) -> Tuple[np.ndarray, np.ndarray]:
    """Parse an IDX image/label pair; pixels come back as float64 in [0, 1], shape (N, 1, H, W)."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise IdxConsistencyError(f"{len(images)} images but {len(labels)} labels")
    return (images.astype(np.float64) / 255.0)[:, None, :, :], labels


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    header = b"".join(v.to_bytes(4, "big") for v in (IMAGE_MAGIC, n, rows, cols))
    Path(path).write_bytes(header + images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    header = LABEL_MAGIC.to_bytes(4, "big") + len(labels).to_bytes(4, "big")
    Path(path).write_bytes(header + labels.tobytes())


# ---------------------------------------------------------------------------
# procedural glyphs

# Stroke templates on a unit square (x right, y down), one polyline list per
# digit. Arcs are given as ("arc", cx, cy, rx, ry, start_deg, end_deg).
_TEMPLATES: Dict[int, list] = {
    0: [("arc", 0.5, 0.5, 0.24, 0.34, 0, 360)],
    1: [[(0.38, 0.28), (0.54, 0.16), (0.54, 0.84)], [(0.40, 0.84), (0.68, 0.84)]],
    2: [("arc", 0.5, 0.36, 0.22, 0.2, 200, 380), [(0.71, 0.42), (0.28, 0.84), (0.74, 0.84)]],
    3: [("arc", 0.48, 0.33, 0.2, 0.17, 210, 450), ("arc", 0.48, 0.66, 0.23, 0.18, 270, 510)],
    4: [[(0.62, 0.84), (0.62, 0.16), (0.24, 0.62), (0.78, 0.62)]],
    5: [[(0.72, 0.16), (0.34, 0.16), (0.31, 0.46)], ("arc", 0.5, 0.62, 0.22, 0.22, 210, 480)],
    6: [[(0.66, 0.16), (0.36, 0.48)], ("arc", 0.5, 0.64, 0.2, 0.2, 0, 360)],
    7: [[(0.26, 0.16), (0.74, 0.16), (0.42, 0.84)], [(0.40, 0.5), (0.66, 0.5)]],
    8: [("arc", 0.5, 0.32, 0.17, 0.16, 0, 360), ("arc", 0.5, 0.67, 0.22, 0.18, 0, 360)],
    9: [("arc", 0.5, 0.36, 0.2, 0.2, 0, 360), [(0.70, 0.38), (0.58, 0.84)]],
}


def _template_points(strokes: list, samples_per_unit: int = 56) -> List[np.ndarray]:
    polylines = []
    for stroke in strokes:
        if isinstance(stroke, tuple) and stroke and stroke[0] == "arc":
            _, cx, cy, rx, ry, a0, a1 = stroke
            n = max(8, int(abs(a1 - a0) / 360 * samples_per_unit * 2))
            t = np.deg2rad(np.linspace(a0, a1, n))
            polylines.append(np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1))
        else:
            pts = np.asarray(stroke, dtype=np.float64)
            dense = [pts[0:1]]
            for a, b in zip(pts[:-1], pts[1:]):
                n = max(2, int(np.linalg.norm(b - a) * samples_per_unit))
                dense.append(a + (b - a) * np.linspace(0, 1, n)[1:, None])
            polylines.append(np.concatenate(dense, axis=0))
    return polylines


_GRID = (np.arange(GLYPH_SIZE) + 0.5) / GLYPH_SIZE


def _render(polylines: Sequence[np.ndarray], thickness: float) -> np.ndarray:
    """Anti-aliased stroke rendering from the distance to sampled stroke points."""
    pts = np.concatenate(polylines, axis=0)
    dx2 = (_GRID[:, None] - pts[:, 0]) ** 2
    dy2 = (_GRID[:, None] - pts[:, 1]) ** 2
    d2 = dy2[:, None, :] + dx2[None, :, :]
    dist = np.sqrt(d2.min(axis=-1)) * GLYPH_SIZE
    return np.clip(thickness - dist + 0.5, 0.0, 1.0)


def glyph_template(digit: int, thickness: float = 1.6) -> np.ndarray:
    """The undistorted 28x28 image for ``digit``."""
    return _render(_template_points(_TEMPLATES[digit]), thickness)


def synth_glyphs(seed: int, n_per_class: int, class_count: int = 10, jitter: float = 1.0,
                 noise: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Digit-like 28x28 glyphs, ``n_per_class`` per class, shuffled; shape (N, 1, 28, 28).

    ``jitter`` scales every random distortion (affine warp, stroke wobble and
    thickness, pixel noise); ``jitter=0`` reproduces the templates exactly.
    """
    if not 1 <= class_count <= 10:
        raise ConfigError(f"class_count must be in [1, 10], got {class_count}")
    if n_per_class < 0:
        raise ConfigError("n_per_class must be non-negative")
    rng = np.random.default_rng([seed, 7001])
    noise_level = 0.05 * jitter if noise is None else noise
    base = {d: _template_points(_TEMPLATES[d]) for d in range(class_count)}
    images = np.empty((class_count * n_per_class, 1, GLYPH_SIZE, GLYPH_SIZE))
    labels = np.repeat(np.arange(class_count), n_per_class)
    for idx, digit in enumerate(labels):
        polylines = base[digit]
        thickness = 1.6
        if jitter > 0:
            angle = np.deg2rad(rng.normal(0, 6.0) * jitter)
            scale = np.exp(rng.normal(0, 0.08) * jitter)
            aspect = np.exp(rng.normal(0, 0.08) * jitter)
            shear = rng.normal(0, 0.15) * jitter
            shift = rng.normal(0, 0.04, 2) * jitter
            c, s = math.cos(angle), math.sin(angle)
            A = np.array([[c, -s], [s, c]]) @ np.array([[scale * aspect, shear], [0.0, scale / aspect]])
            warped = []
            for pl in polylines:
                wobble = rng.normal(0, 0.015 * jitter, (1, 2)) + rng.normal(0, 0.006 * jitter, pl.shape)
                warped.append((pl - 0.5 + wobble) @ A.T + 0.5 + shift)
            polylines = warped
            thickness = 1.6 * np.exp(rng.normal(0, 0.2) * jitter)
        img = _render(polylines, thickness)
        if noise_level > 0:
            img = img + rng.normal(0, noise_level, img.shape)
        images[idx, 0] = np.clip(img, 0.0, 1.0)
    order = rng.permutation(len(labels))
    return images[order], labels[order]


# ---------------------------------------------------------------------------
# multi-domain datasets


@dataclass
class DomainDataset:
    """Images (N, C, H, W) in [0, 1], integer labels and a domain id per example."""

    images: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    domain_ids: List[int]
    class_count: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.domains = np.asarray(self.domains, dtype=np.int64)
        self.domain_ids = [int(d) for d in self.domain_ids]
        if not (len(self.images) == len(self.labels) == len(self.domains)):
            raise ConfigError("images, labels and domains must have equal length")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def domain(self, domain_id: int) -> Tuple[np.ndarray, np.ndarray]:
        mask = self.domains == domain_id
        return self.images[mask], self.labels[mask]

    def validate(self) -> None:
        unknown = set(np.unique(self.domains).tolist()) - set(self.domain_ids)
        if unknown:
            raise ConfigError(f"examples carry unknown domain ids {sorted(unknown)}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ConfigError("labels outside [0, class_count)")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ConfigError("pixel values outside [0, 1]")

    def manifest(self) -> dict:
        counts = {str(d): int((self.domains == d).sum()) for d in self.domain_ids}
        return {
            "domain_ids": self.domain_ids,
            "class_count": self.class_count,
            "input_shape": list(self.input_shape),
            "counts": counts,
            "metadata": self.metadata,
            "checksums": {
                "images": hashlib.sha256(np.ascontiguousarray(self.images).tobytes()).hexdigest(),
                "labels": hashlib.sha256(self.labels.tobytes()).hexdigest(),
                "domains": hashlib.sha256(self.domains.tobytes()).hexdigest(),
            },
        }

    def write_manifest(self, path) -> None:
        Path(path).write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")


def rotate_image(img: np.ndarray, degrees: float) -> np.ndarray:
    """Counter-clockwise rotation about the center, bilinear, zero outside (last two axes)."""
    H, W = img.shape[-2:]
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    # inverse map: source = R(-theta) (dest - center) + center, y axis pointing down
    dx, dy = xx - cx, yy - cy
    src_x = c * dx - s * dy + cx
    src_y = s * dx + c * dy + cy
    src_x = np.where(np.abs(src_x - np.round(src_x)) < 1e-9, np.round(src_x), src_x)
    src_y = np.where(np.abs(src_y - np.round(src_y)) < 1e-9, np.round(src_y), src_y)
    x0 = np.floor(src_x).astype(int)
    y0 = np.floor(src_y).astype(int)
    fx, fy = src_x - x0, src_y - y0
    out = np.zeros(img.shape, dtype=np.float64)
    for oy, ox, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                        (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yi, xi = y0 + oy, x0 + ox
        valid = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W) & (wgt > 0)
        gathered = img[..., np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1)]
        out += np.where(valid, wgt, 0.0) * gathered
    return out


def make_rotated_domains(base: Tuple[np.ndarray, np.ndarray], angles: Sequence[float],
                         class_count: Optional[int] = None) -> DomainDataset:
    """One domain per angle; example ``i`` of ``base`` goes to domain ``i % len(angles)``."""
    if not angles:
        raise ConfigError("at least one rotation angle is required")
    images, labels = base
    n_dom = len(angles)
    parts_x, parts_y, parts_d = [], [], []
    for k, angle in enumerate(angles):
        xs = images[k::n_dom]
        parts_x.append(np.clip(rotate_image(xs, angle), 0.0, 1.0))
        parts_y.append(labels[k::n_dom])
        parts_d.append(np.full(len(xs), int(round(angle)), dtype=np.int64))
    class_count = class_count or int(labels.max()) + 1
    return DomainDataset(
        np.concatenate(parts_x), np.concatenate(parts_y), np.concatenate(parts_d),
        [int(round(a)) for a in angles], class_count,
        {"kind": "rotated", "angles": [float(a) for a in angles]},
    )


def binarize_digits(labels: np.ndarray) -> np.ndarray:
    """0 for digits 0-4, 1 for digits 5-9."""
    return (np.asarray(labels) >= 5).astype(np.int64)


def make_colored_domains(base: Tuple[np.ndarray, np.ndarray], correlations: Sequence[float],
                         label_noise: float = 0.25, seed: int = 0) -> DomainDataset:
    """Two-channel colored digits with a domain-specific color/label correlation.

    Labels are binarized (digit >= 5) then flipped with probability
    ``label_noise``; the glyph is drawn in the channel equal to the (noisy)
    label with probability ``correlation``, else in the other channel.
    Domain ids are the correlations in percent.
    """
    images, labels = base
    if len(labels) and int(labels.max()) < 1:
        raise ConfigError("colored domains need a base with at least 2 classes")
    if not correlations:
        raise ConfigError("at least one correlation is required")
    for r in list(correlations) + [label_noise]:
        if not 0.0 <= r <= 1.0:
            raise ConfigError(f"probabilities must lie in [0, 1], got {r}")
    rng = np.random.default_rng([seed, 7002])
    n_dom = len(correlations)
    parts_x, parts_y, parts_d = [], [], []
    for k, corr in enumerate(correlations):
        xs = images[k::n_dom, 0]
        ys = binarize_digits(labels[k::n_dom])
        flip = rng.random(len(ys)) < label_noise
        ys = np.where(flip, 1 - ys, ys)
        agree = rng.random(len(ys)) < corr
        color = np.where(agree, ys, 1 - ys)
        out = np.zeros((len(xs), 2) + xs.shape[1:])
        out[np.arange(len(xs)), color] = xs
        parts_x.append(out)
        parts_y.append(ys)
        parts_d.append(np.full(len(xs), int(round(corr * 100)), dtype=np.int64))
    return DomainDataset(
        np.concatenate(parts_x), np.concatenate(parts_y), np.concatenate(parts_d),
        [int(round(c * 100)) for c in correlations], 2,
        {"kind": "colored", "correlations": [float(c) for c in correlations],
         "label_noise": float(label_noise), "seed": int(seed)},
    )


def color_channel(images: np.ndarray) -> np.ndarray:
    """Index of the channel holding the glyph (argmax of channel mass)."""
    return np.argmax(images.reshape(len(images), images.shape[1], -1).sum(axis=2), axis=1)


# ---------------------------------------------------------------------------
# splits


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray
    domains: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class DomainSplits:
    source_train: Split
    source_val: Split
    target_test: Split
    target_val: Split
    target_domain: int
    source_domains: List[int]


def _concat(parts: List[Tuple[np.ndarray, np.ndarray, np.ndarray]], like: np.ndarray) -> Split:
    if not parts:
        return Split(np.zeros((0,) + like.shape[1:]), np.zeros(0, np.int64), np.zeros(0, np.int64))
    xs, ys, ds = zip(*parts)
    return Split(np.concatenate(xs), np.concatenate(ys), np.concatenate(ds))


def split_domains(ds: DomainDataset, target_domain: int, ratio: float = 0.8, seed: int = 0) -> DomainSplits:
    """Leave-one-domain-out split with a seeded per-domain shuffle.

    Each source domain gives ``round(ratio * n)`` examples to training and
    the rest to validation; the target domain splits the same way into
    test and validation parts.
    """
    if target_domain not in ds.domain_ids:
        raise ConfigError(f"unknown target domain {target_domain}; available {ds.domain_ids}")
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must lie in (0, 1), got {ratio}")
    train, val, test, tval = [], [], [], []
    for d in ds.domain_ids:
        idx = np.flatnonzero(ds.domains == d)
        rng = np.random.default_rng([seed, 7003, d & 0xFFFFFFFF])
        idx = idx[rng.permutation(len(idx))]
        cut = int(round(ratio * len(idx)))
        first, second = idx[:cut], idx[cut:]
        a = (ds.images[first], ds.labels[first], ds.domains[first])
        b = (ds.images[second], ds.labels[second], ds.domains[second])
        if d == target_domain:
            test.append(a)
            tval.append(b)
        else:
            train.append(a)
            val.append(b)
    return DomainSplits(
        _concat(train, ds.images), _concat(val, ds.images), _concat(test, ds.images),
        _concat(tval, ds.images), int(target_domain), [d for d in ds.domain_ids if d != target_domain],
    )


# ---------------------------------------------------------------------------
# named datasets


RMNIST_ANGLES = (0, 15, 30, 45)
CMNIST_CORRELATIONS = (0.9, 0.8, 0.1)


def rmnist_mini(n_per_domain: int = 2000, angles: Sequence[float] = RMNIST_ANGLES, seed: int = 0,
                base: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> DomainDataset:
    """Rotated digits; from procedural glyphs unless ``base`` (e.g. IDX data) is given."""
    total = n_per_domain * len(angles)
    source = "synth" if base is None else "idx"
    if base is None:
        base = synth_glyphs(seed, math.ceil(total / 10), 10)
    images, labels = base[0][:total], base[1][:total]
    ds = make_rotated_domains((images, labels), angles, class_count=10)
    ds.metadata.update({"source": source, "seed": seed,
                        "n_per_domain": n_per_domain})
    return ds


def cmnist_mini(n_per_domain: int = 2000, correlations: Sequence[float] = CMNIST_CORRELATIONS,
                label_noise: float = 0.25, seed: int = 0,
                base: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> DomainDataset:
    total = n_per_domain * len(correlations)
    if base is None:
        base = synth_glyphs(seed, math.ceil(total / 10), 10)
    images, labels = base[0][:total], base[1][:total]
    ds = make_colored_domains((images, labels), correlations, label_noise, seed)
    ds.metadata.update({"n_per_domain": n_per_domain})
    return ds
