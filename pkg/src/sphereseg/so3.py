"""Rotations, nearest-neighbor index maps and equirectangular remapping.

Quaternions are stored scalar-first ``(w, x, y, z)`` and kept in the
``w >= 0`` hemisphere. Index maps use the pull-back convention: target node
``i`` reads from the source node nearest to ``R^-1 p_i``, so
``rotated = signal[idx]`` approximates the signal rotated by ``R``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import PreconditionError
from .icosphere import IcosphereMesh, base_icosahedron
from .rank_transfer import nearest_vertex

Provenance = Literal[
    "axis_angle_capped", "uniform_quaternion", "zyx_euler", "icosahedral_group_element", "explicit"
]


def _canonical(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q)
    return -q if q[0] < 0 else q


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method: branch on the largest of trace and diagonal."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    i = int(np.argmax([tr, R[0, 0], R[1, 1], R[2, 2]]))
    if i == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif i == 1:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif i == 2:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return _canonical(np.array(q))


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


@dataclass(frozen=True)
class Rotation:
    quaternion: np.ndarray
    provenance: Provenance = "explicit"

    def __post_init__(self):
        object.__setattr__(self, "quaternion", _canonical(self.quaternion))

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_matrix(cls, R: np.ndarray, provenance: Provenance = "explicit") -> "Rotation":
        return cls(matrix_to_quat(R), provenance)

    @classmethod
    def from_axis_angle(cls, axis: np.ndarray, angle: float, provenance: Provenance = "explicit") -> "Rotation":
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        return cls(np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis]), provenance)

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quaternion)

    @property
    def angle(self) -> float:
        return float(2.0 * np.arctan2(np.linalg.norm(self.quaternion[1:]), self.quaternion[0]))

    def inverse(self) -> "Rotation":
        q = self.quaternion
        return Rotation(np.array([q[0], -q[1], -q[2], -q[3]]), self.provenance)

    def compose(self, other: "Rotation") -> "Rotation":
        """``self * other``: apply ``other`` first."""
        return Rotation(quat_multiply(self.quaternion, other.quaternion))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.matrix.T


def _gaussian_unit(rng: np.random.Generator, n: int) -> np.ndarray:
    while True:
        v = rng.standard_normal(n)
        norm = np.linalg.norm(v)
        if norm >= 1e-12:
            return v / norm


def sample_rotation_capped(max_angle: float, rng: np.random.Generator) -> Rotation:
    """Uniform axis on the sphere, angle uniform on ``[0, max_angle]``."""
    if not (0.0 < max_angle <= np.pi):
        raise PreconditionError(f"max_angle must lie in (0, pi], got {max_angle}")
    axis = _gaussian_unit(rng, 3)
    angle = rng.uniform(0.0, max_angle)
    return Rotation.from_axis_angle(axis, angle, "axis_angle_capped")


def sample_rotation_uniform(rng: np.random.Generator) -> Rotation:
    """Haar-uniform rotation from a normalized 4D Gaussian draw."""
    return Rotation(_gaussian_unit(rng, 4), "uniform_quaternion")


def rotation_zyx(yaw: float, pitch: float, roll: float) -> Rotation:
    """``Rz(yaw) @ Ry(pitch) @ Rx(roll)``."""
    cz, sz = np.cos(yaw), np.sin(yaw)
    cy, sy = np.cos(pitch), np.sin(pitch)
    cx, sx = np.cos(roll), np.sin(roll)
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    return Rotation.from_matrix(Rz @ Ry @ Rx, "zyx_euler")


def sample_rotation_zyx(
    rng: np.random.Generator,
    yaw_range: tuple[float, float] = (0.0, 2 * np.pi),
    pitch_range: tuple[float, float] = (0.0, np.pi),
    roll_range: tuple[float, float] = (0.0, 2 * np.pi),
) -> Rotation:
    for lo, hi in (yaw_range, pitch_range, roll_range):
        if not (lo <= hi):
            raise PreconditionError("angle range must have lo <= hi")
    if yaw_range[0] < 0 or yaw_range[1] > 2 * np.pi or roll_range[0] < 0 or roll_range[1] > 2 * np.pi:
        raise PreconditionError("yaw/roll ranges must lie within [0, 2 pi]")
    if pitch_range[0] < 0 or pitch_range[1] > np.pi:
        raise PreconditionError("pitch range must lie within [0, pi]")
    yaw = rng.uniform(*yaw_range)
    pitch = rng.uniform(*pitch_range)
    roll = rng.uniform(*roll_range)
    return rotation_zyx(yaw, pitch, roll)


def icosahedral_group() -> list[Rotation]:
    """The 60 rotations mapping the base icosahedron onto itself.

    Each element is determined by where it sends vertex 0 (12 choices) and
    that vertex's lowest-index neighbor (5 choices). Element 0 is the identity.
    """
    v, f = base_icosahedron()
    adj = {i: sorted({int(x) for face in f if i in face for x in face} - {i}) for i in range(12)}

    def frame(a, b):
        e1 = v[a]
        e2 = v[b] - (v[b] @ e1) * e1
        e2 /= np.linalg.norm(e2)
        return np.stack([e1, e2, np.cross(e1, e2)], axis=1)

    src = frame(0, adj[0][0])
    out = []
    for a in range(12):
        for b in adj[a]:
            R = frame(a, b) @ src.T
            out.append(Rotation.from_matrix(R, "icosahedral_group_element"))
    return out


def yaw_rotation(angle: float) -> Rotation:
    return Rotation.from_axis_angle(np.array([0.0, 0.0, 1.0]), angle)


def rotation_index_map(rotation: Rotation, mesh: IcosphereMesh) -> np.ndarray:
    """Pull-back map: ``out[i] = argmax_j <R^-1 p_i, p_j>`` (lowest ``j`` on ties)."""
    pulled = mesh.vertices @ rotation.matrix  # rows are R^T p_i
    return nearest_vertex(pulled, mesh.vertices)


def mirror_index_map(mesh: IcosphereMesh) -> np.ndarray:
    """Index map for the reflection y -> -y (a horizontal panorama flip)."""
    pulled = mesh.vertices * np.array([1.0, -1.0, 1.0])
    return nearest_vertex(pulled, mesh.vertices)


@dataclass(frozen=True)
class RotationMapSet:
    rotation: Rotation
    idx_proj: np.ndarray  # token rank
    idx_img: np.ndarray  # output rank


def build_rotation_maps(rotation: Rotation, token_mesh: IcosphereMesh, output_mesh: IcosphereMesh) -> RotationMapSet:
    return RotationMapSet(
        rotation, rotation_index_map(rotation, token_mesh), rotation_index_map(rotation, output_mesh)
    )


# --- equirectangular rasters ---------------------------------------------


def erp_directions(H: int, W: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pixel-center ``(lon, lat)`` grids and unit directions ``(H, W, 3)``."""
    lon = 2 * np.pi * (np.arange(W) + 0.5) / W - np.pi
    lat = np.pi / 2 - np.pi * (np.arange(H) + 0.5) / H
    lon, lat = np.meshgrid(lon, lat)
    d = np.stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)], axis=-1)
    return lon, lat, d


def directions_to_lonlat(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lon = np.arctan2(d[..., 1], d[..., 0])
    lat = np.arcsin(np.clip(d[..., 2], -1.0, 1.0))
    return lon, lat


def erp_remap(image: np.ndarray, rotation: Rotation, interpolation: str = "bilinear") -> np.ndarray:
    """Rotate an equirectangular raster by inverse mapping each output pixel.

    Longitude wraps; rows clamp at the poles. ``nearest`` keeps the dtype
    (use it for label rasters), ``bilinear`` returns float64.
    """
    img = np.asarray(image)
    H, W = img.shape[:2]
    if W != 2 * H:
        raise PreconditionError(f"equirectangular raster needs W = 2H, got {H}x{W}")
    if interpolation not in ("nearest", "bilinear"):
        raise PreconditionError(f"unknown interpolation {interpolation!r}")
    _, _, d = erp_directions(H, W)
    src = d @ rotation.matrix  # R^-1 d per pixel
    lon, lat = directions_to_lonlat(src)
    col = (lon + np.pi) * W / (2 * np.pi) - 0.5
    row = (np.pi / 2 - lat) * H / np.pi - 0.5
    if interpolation == "nearest":
        c = np.mod(np.rint(col).astype(np.int64), W)
        r = np.clip(np.rint(row).astype(np.int64), 0, H - 1)
        return img[r, c]
    row = np.clip(row, 0.0, H - 1.0)
    r0 = np.floor(row).astype(np.int64)
    r1 = np.minimum(r0 + 1, H - 1)
    fr = row - r0
    c0f = np.floor(col)
    fc = col - c0f
    c0 = np.mod(c0f.astype(np.int64), W)
    c1 = np.mod(c0 + 1, W)
    f = img.astype(np.float64)
    if f.ndim == 3:
        fr, fc = fr[..., None], fc[..., None]
    top = f[r0, c0] * (1 - fc) + f[r0, c1] * fc
    bot = f[r1, c0] * (1 - fc) + f[r1, c1] * fc
    return top * (1 - fr) + bot * fr
