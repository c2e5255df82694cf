"""Icosahedral sphere meshes, 1-ring neighbor tables and area weights.

The base icosahedron has vertices at both poles and two staggered rings of five
at latitude +-atan(1/2): the upper ring at longitudes 0, 72, ..., 288 degrees,
the lower ring at 36, 108, ..., 324 degrees. This orientation makes yaw by
multiples of 72 degrees and the mirror y -> -y exact vertex permutations at
every rank. Vertex order is stable across ranks: the vertices of rank r are a
prefix of those of rank r + 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigurationError, ConstructionError

MAX_RANK = 7
PAD = -1


def base_icosahedron() -> tuple[np.ndarray, np.ndarray]:
    lat = np.arctan(0.5)
    verts = [(0.0, 0.0, 1.0)]
    for k in range(5):
        lon = 2 * np.pi * k / 5
        verts.append((np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)))
    for k in range(5):
        lon = 2 * np.pi * k / 5 + np.pi / 5
        verts.append((np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), -np.sin(lat)))
    verts.append((0.0, 0.0, -1.0))
    v = np.asarray(verts, dtype=np.float64)

    faces = []
    for k in range(5):
        u0, u1 = 1 + k, 1 + (k + 1) % 5
        l0, l1 = 6 + k, 6 + (k + 1) % 5
        faces += [(0, u0, u1), (u0, l0, u1), (l0, l1, u1), (11, l1, l0)]
    f = np.asarray(faces, dtype=np.int64)
    return v, _orient_outward(v, f)


def _orient_outward(v: np.ndarray, f: np.ndarray) -> np.ndarray:
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    flip = np.einsum("ij,ij->i", np.cross(b - a, c - a), a + b + c) < 0
    f = f.copy()
    f[flip] = f[flip][:, [0, 2, 1]]
    return f


def _subdivide(v: np.ndarray, f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # edges in first-encounter order: face by face, (a,b), (b,c), (c,a)
    e = np.stack([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=1).reshape(-1, 2)
    key = np.sort(e, axis=1)
    uniq, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    rank_of = np.empty(len(order), dtype=np.int64)
    rank_of[order] = np.arange(len(order))
    mid_id = len(v) + rank_of[inverse.reshape(-1)]

    ends = uniq[order]
    mids = v[ends[:, 0]] + v[ends[:, 1]]
    mids /= np.linalg.norm(mids, axis=1, keepdims=True)
    new_v = np.concatenate([v, mids])

    m = mid_id.reshape(-1, 3)  # ab, bc, ca
    a, b, c = f[:, 0], f[:, 1], f[:, 2]
    ab, bc, ca = m[:, 0], m[:, 1], m[:, 2]
    new_f = np.stack(
        [
            np.stack([a, ab, ca], 1),
            np.stack([ab, b, bc], 1),
            np.stack([ca, bc, c], 1),
            np.stack([ab, bc, ca], 1),
        ],
        axis=1,
    ).reshape(-1, 3)
    return new_v, new_f


def spherical_triangle_areas(v: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Spherical excess of each triangle (Van Oosterom-Strackee)."""
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    num = np.abs(np.einsum("ij,ij->i", a, np.cross(b, c)))
    den = 1.0 + np.einsum("ij,ij->i", a, b) + np.einsum("ij,ij->i", b, c) + np.einsum("ij,ij->i", c, a)
    return 2.0 * np.arctan2(num, den)


@dataclass(frozen=True)
class NeighborTable:
    """Padded 1-ring table. Column 0 is the node itself; padding is ``PAD``."""

    indices: np.ndarray  # (L, K) int64
    valid_mask: np.ndarray  # (L, K) bool

    @property
    def max_degree(self) -> int:
        return self.indices.shape[1]

    @property
    def gather_indices(self) -> np.ndarray:
        """Indices with padding replaced by the row's own node (safe to gather)."""
        own = np.broadcast_to(np.arange(len(self.indices))[:, None], self.indices.shape)
        return np.where(self.valid_mask, self.indices, own)


@dataclass(frozen=True)
class IcosphereMesh:
    rank: int
    vertices: np.ndarray  # (L, 3)
    faces: np.ndarray  # (F, 3)
    neighbors: tuple[np.ndarray, ...]  # ascending 1-ring per vertex
    area_weights: np.ndarray  # mean-normalized
    raw_areas: np.ndarray = field(repr=False)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def raw_area_sum(self) -> float:
        return float(self.raw_areas.sum())

    @property
    def edges(self) -> np.ndarray:
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    @property
    def latitudes(self) -> np.ndarray:
        return np.arcsin(np.clip(self.vertices[:, 2], -1.0, 1.0))

    def mean_edge_length(self) -> float:
        e = self.edges
        d = np.einsum("ij,ij->i", self.vertices[e[:, 0]], self.vertices[e[:, 1]])
        return float(np.arccos(np.clip(d, -1.0, 1.0)).mean())


def compute_area_weights(vertices: np.ndarray, faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(mean_normalized, raw)`` lumped vertex areas.

    Each vertex receives one third of the spherical area of every incident
    triangle, so the raw areas partition the sphere.
    """
    tri = spherical_triangle_areas(vertices, faces)
    if np.any(tri <= 0):
        raise ConstructionError("degenerate triangle with zero spherical area")
    raw = np.zeros(len(vertices))
    for k in range(3):
        np.add.at(raw, faces[:, k], tri / 3.0)
    return raw / raw.mean(), raw


def _rings(n: int, faces: np.ndarray) -> tuple[np.ndarray, ...]:
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.concatenate([e, e[:, ::-1]])
    e = np.unique(e, axis=0)  # sorted by (src, dst)
    splits = np.searchsorted(e[:, 0], np.arange(1, n))
    return tuple(np.split(e[:, 1], splits))


def build_icosphere(rank: int, max_rank: int = MAX_RANK) -> IcosphereMesh:
    if not isinstance(rank, (int, np.integer)) or rank < 0:
        raise ConfigurationError(f"rank must be a nonnegative integer, got {rank!r}")
    if rank > max_rank:
        raise ConfigurationError(f"rank {rank} exceeds maximum {max_rank}")
    return _build_cached(int(rank))


@lru_cache(maxsize=None)
def _build_cached(rank: int) -> IcosphereMesh:
    v, f = base_icosahedron()
    for _ in range(rank):
        v, f = _subdivide(v, f)
    v.setflags(write=False)
    f.setflags(write=False)
    omega, raw = compute_area_weights(v, f)
    omega.setflags(write=False)
    raw.setflags(write=False)
    return IcosphereMesh(rank, v, f, _rings(len(v), f), omega, raw)


def build_neighbor_table(mesh: IcosphereMesh, max_degree: int = 7) -> NeighborTable:
    L = mesh.num_vertices
    idx = np.full((L, max_degree), PAD, dtype=np.int64)
    for i, ring in enumerate(mesh.neighbors):
        if len(ring) + 1 > max_degree:
            raise ConstructionError(f"vertex {i} has degree {len(ring)} > {max_degree - 1}")
        idx[i, 0] = i
        idx[i, 1 : 1 + len(ring)] = ring
    return NeighborTable(idx, idx != PAD)


def vertex_count(rank: int) -> int:
    return 10 * 4**rank + 2
