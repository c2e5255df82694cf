"""Synthetic spherical segmentation scenes.

A scene is a painted list of regions (caps and great-circle bands), so labels
are a pure function of direction: re-evaluating a rotated layout at the mesh
nodes gives the exact rotated ground truth.

The default ``gravity`` layout mimics indoor panoramas: a ceiling cap around
the north pole, a floor cap around the south pole, walls as background and
objects scattered around. Ceiling and floor have close colors, so absolute
latitude is a cheap but rotation-fragile cue for telling them apart.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..container import read_container, write_container
from ..errors import DataError, PreconditionError
from ..icosphere import IcosphereMesh
from ..so3 import Rotation, quat_multiply, rotation_index_map, sample_rotation_capped

NUM_CLASSES = 14
CEILING, FLOOR, WALL = 1, 2, 3

# per-class mean colors; index 0 (unknown) is never painted with a color of its own
CLASS_COLORS = np.array(
    [
        [0.50, 0.50, 0.50],
        [0.78, 0.74, 0.70],  # ceiling
        [0.70, 0.74, 0.78],  # floor
        [0.55, 0.55, 0.50],  # wall
        [0.90, 0.20, 0.20],
        [0.20, 0.80, 0.20],
        [0.20, 0.30, 0.90],
        [0.90, 0.80, 0.10],
        [0.80, 0.20, 0.80],
        [0.10, 0.80, 0.80],
        [0.95, 0.55, 0.10],
        [0.40, 0.20, 0.10],
        [0.10, 0.10, 0.40],
        [0.60, 0.90, 0.50],
    ]
)


@dataclass(frozen=True)
class Region:
    kind: str  # "cap" or "band"
    axis: np.ndarray  # cap center or band normal
    size: float  # cap angular radius or band half-width, radians
    label: int

    def contains(self, p: np.ndarray) -> np.ndarray:
        d = p @ self.axis
        if self.kind == "cap":
            return d >= np.cos(self.size)
        return np.abs(d) <= np.sin(self.size)

    def rotated(self, rotation: Rotation) -> "Region":
        return Region(self.kind, rotation.apply(self.axis), self.size, self.label)


@dataclass(frozen=True)
class Layout:
    background: int
    regions: tuple[Region, ...]  # painted in order, later on top
    ignore: tuple[Region, ...]  # painted last with class 0

    def labels(self, points: np.ndarray) -> np.ndarray:
        out = np.full(len(points), self.background, dtype=np.int64)
        for reg in self.regions + self.ignore:
            out[reg.contains(points)] = reg.label
        return out

    def rotated(self, rotation: Rotation) -> "Layout":
        return Layout(
            self.background,
            tuple(r.rotated(rotation) for r in self.regions),
            tuple(r.rotated(rotation) for r in self.ignore),
        )


@dataclass
class SegSample:
    features: np.ndarray  # (L, 3)
    labels: np.ndarray  # (L,)
    quaternion: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    layout: Layout | None = None


@dataclass
class DataConfig:
    n_train: int = 32
    n_val: int = 8
    data_seed: int = 0
    layout: str = "gravity"  # or "isotropic"
    pose_max_deg: float = 35.0
    color_noise: float = 0.08  # smooth per-sample color field amplitude
    pixel_noise: float = 0.04  # i.i.d. per-node noise
    ignore_fraction: float = 0.02


def _unit(rng, n=3):
    while True:
        v = rng.standard_normal(n)
        nv = np.linalg.norm(v)
        if nv > 1e-12:
            return v / nv


def random_layout(rng: np.random.Generator, style: str = "gravity", ignore_fraction: float = 0.02) -> Layout:
    if style not in ("gravity", "isotropic"):
        raise PreconditionError(f"unknown layout {style!r}")
    n_caps = int(rng.integers(3, 9))
    n_bands = int(rng.integers(1, 4))
    regions: list[Region] = []
    if style == "gravity":
        pool = list(range(4, NUM_CLASSES))
        rng.shuffle(pool)
        background = WALL
        for label in pool[:n_bands]:
            # mostly horizontal bands: normals near the vertical axis
            n = _unit(rng) * np.array([0.35, 0.35, 1.0])
            regions.append(Region("band", n / np.linalg.norm(n), rng.uniform(0.05, 0.15), label))
        regions.append(Region("cap", np.array([0.0, 0.0, 1.0]), rng.uniform(0.55, 0.8), CEILING))
        regions.append(Region("cap", np.array([0.0, 0.0, -1.0]), rng.uniform(0.55, 0.8), FLOOR))
        for label in pool[n_bands : n_bands + n_caps - 2]:
            c = _unit(rng)
            c[2] *= 0.5
            regions.append(Region("cap", c / np.linalg.norm(c), rng.uniform(0.15, 0.45), label))
    else:
        pool = list(range(1, NUM_CLASSES))
        rng.shuffle(pool)
        background = pool.pop()
        for label in pool[:n_bands]:
            regions.append(Region("band", _unit(rng), rng.uniform(0.05, 0.2), label))
        for label in pool[n_bands : n_bands + n_caps]:
            regions.append(Region("cap", _unit(rng), rng.uniform(0.15, 0.6), label))
    # eight small caps of class 0 covering about ignore_fraction of the sphere
    n_ign = 8
    rho = float(np.arccos(1.0 - 2.0 * ignore_fraction / n_ign)) if ignore_fraction > 0 else 0.0
    ignore = tuple(Region("cap", _unit(rng), rho, 0) for _ in range(n_ign if rho > 0 else 0))
    return Layout(background, tuple(regions), ignore)


def _smooth_field(rng: np.random.Generator, points: np.ndarray, channels: int) -> np.ndarray:
    """Sum of a few random von Mises bumps per channel, roughly unit amplitude."""
    out = np.zeros((len(points), channels))
    for c in range(channels):
        for _ in range(4):
            center = _unit(rng)
            kappa = rng.uniform(2.0, 6.0)
            out[:, c] += rng.uniform(-1.0, 1.0) * np.exp(kappa * (points @ center - 1.0))
    return out


def render_features(layout_labels: np.ndarray, points: np.ndarray, rng: np.random.Generator, cfg: DataConfig):
    colors = CLASS_COLORS[layout_labels].copy()
    colors += cfg.color_noise * _smooth_field(rng, points, 3)
    colors += cfg.pixel_noise * rng.standard_normal(colors.shape)
    return colors


def make_sample(mesh: IcosphereMesh, rng: np.random.Generator, cfg: DataConfig) -> SegSample:
    while True:
        layout = random_layout(rng, cfg.layout, cfg.ignore_fraction)
        labels = layout.labels(mesh.vertices)
        present = np.unique(labels[labels != 0])
        if len(present) >= 3:
            break
    feats = render_features(labels, mesh.vertices, rng, cfg)
    return SegSample(feats, labels, layout=layout)


def make_synthetic_dataset(mesh: IcosphereMesh, n_samples: int, seed: int | np.random.Generator,
                           cfg: DataConfig | None = None) -> list[SegSample]:
    if n_samples < 1:
        raise PreconditionError("need at least one sample")
    cfg = cfg or DataConfig()
    rng = np.random.default_rng(seed)
    return [make_sample(mesh, rng, cfg) for _ in range(n_samples)]


def rotate_sample(sample: SegSample, idx: np.ndarray, rotation: Rotation) -> SegSample:
    layout = sample.layout.rotated(rotation) if sample.layout is not None else None
    q = quat_multiply(rotation.quaternion, sample.quaternion)
    return SegSample(sample.features[idx], sample.labels[idx], Rotation(q).quaternion, layout)


def pose_perturb_dataset(dataset: list[SegSample], mesh: IcosphereMesh, max_angle: float,
                         seed: int | np.random.Generator) -> list[SegSample]:
    """Rotate every sample by its own capped axis-angle draw (radians)."""
    rng = np.random.default_rng(seed)
    out = []
    for s in dataset:
        if max_angle == 0:
            out.append(SegSample(s.features.copy(), s.labels.copy(), s.quaternion.copy(), s.layout))
            continue
        rot = sample_rotation_capped(max_angle, rng)
        out.append(rotate_sample(s, rotation_index_map(rot, mesh), rot))
    return out


def stack(dataset: list[SegSample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.features for s in dataset]), np.stack([s.labels for s in dataset])


def save_dataset(path, dataset: list[SegSample], rank: int, meta: dict | None = None) -> None:
    feats, labels = stack(dataset)
    quats = np.stack([s.quaternion for s in dataset])
    write_container(path, "dataset", {"features": feats, "labels": labels.astype(np.int32), "quaternions": quats},
                    {"rank": rank, **(meta or {})})


def load_dataset(path) -> tuple[list[SegSample], dict]:
    arrays, meta = read_container(path, "dataset")
    feats, labels, quats = arrays["features"], arrays["labels"].astype(np.int64), arrays["quaternions"]
    if labels.min() < 0 or labels.max() >= NUM_CLASSES:
        raise DataError(f"{path}: labels outside [0, {NUM_CLASSES})")
    if not np.isfinite(feats).all():
        raise DataError(f"{path}: non-finite features")
    return [SegSample(f, l, q) for f, l, q in zip(feats, labels, quats)], meta
