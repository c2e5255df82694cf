"""Geodesic distances, tangent-plane angles, anchors and radial bins.

Everything here is a fixed precomputation over mesh geometry; nothing is
learned. The result is bundled in :class:`GeodesicCache`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConstructionError, PreconditionError
from .icosphere import IcosphereMesh, NeighborTable

EPS = 1e-12
# tangent magnitudes closer than this count as ties (resolved by vertex index)
TIE_TOL = 1e-10


def _check_unit(*vs: np.ndarray, tol: float = 1e-9) -> None:
    for v in vs:
        n = np.linalg.norm(np.asarray(v, dtype=np.float64), axis=-1)
        if np.any(np.abs(n - 1.0) > tol):
            raise PreconditionError("input direction is not unit norm")


def geodesic_distance(p: np.ndarray, q: np.ndarray) -> np.ndarray | float:
    """Great-circle distance in radians. Broadcasts over leading axes."""
    _check_unit(p, q)
    d = np.sum(np.asarray(p, dtype=np.float64) * np.asarray(q, dtype=np.float64), axis=-1)
    out = np.arccos(np.clip(d, -1.0, 1.0))
    return float(out) if np.ndim(out) == 0 else out


def tangent_project(p_i: np.ndarray, p_j: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project ``p_j`` onto the tangent plane at ``p_i``.

    Returns ``(direction, magnitude)``. The direction is unit length when the
    magnitude exceeds ``EPS``; callers treat ``magnitude <= EPS`` as degenerate
    (``p_j`` equal or antipodal to ``p_i``).
    """
    p_i = np.asarray(p_i, dtype=np.float64)
    p_j = np.asarray(p_j, dtype=np.float64)
    dot = np.sum(p_i * p_j, axis=-1, keepdims=True)
    t = p_j - dot * p_i
    mag = np.linalg.norm(t, axis=-1)
    return t / np.maximum(mag, EPS)[..., None], mag


def relative_angle(p_i: np.ndarray, p_j: np.ndarray, p_a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Signed angle of ``p_j`` around ``p_i``, measured from anchor ``p_a``.

    Returns ``(alpha, degenerate)`` with ``alpha`` in (-pi, pi]. ``degenerate``
    is true where either tangent vector vanishes; alpha is 0 there.
    """
    t_j, m_j = tangent_project(p_i, p_j)
    t_a, m_a = tangent_project(p_i, p_a)
    t_perp = np.cross(np.asarray(p_i, dtype=np.float64), t_a)
    alpha = np.arctan2(np.sum(t_j * t_perp, axis=-1), np.sum(t_j * t_a, axis=-1))
    alpha = np.where(alpha <= -np.pi, alpha + 2 * np.pi, alpha)
    degenerate = (m_j <= EPS) | (m_a <= EPS)
    alpha = np.where(degenerate, 0.0, alpha)
    if np.ndim(alpha) == 0:
        return float(alpha), bool(degenerate)
    return alpha, degenerate


def radial_bins(delta_hat, num_bins: int):
    """Linear-interpolation bin lookup: ``(b0, b1, eta)`` for ``delta_hat`` in [0, 1]."""
    if num_bins < 2:
        raise PreconditionError("need at least two radial bins")
    dh = np.asarray(delta_hat, dtype=np.float64)
    if np.any(dh < 0.0) or np.any(dh > 1.0) or np.any(~np.isfinite(dh)):
        raise PreconditionError("normalized distance must lie in [0, 1]")
    t = dh * (num_bins - 1)
    b0 = np.floor(t).astype(np.int64)
    b0 = np.minimum(b0, num_bins - 1)
    b1 = np.minimum(b0 + 1, num_bins - 1)
    eta = t - b0
    if dh.ndim == 0:
        return int(b0), int(b1), float(eta)
    return b0, b1, eta


def select_anchors(mesh: IcosphereMesh, table: NeighborTable, num_anchors: int) -> np.ndarray:
    """Per node, the ``num_anchors`` ring neighbors with the largest tangent magnitude.

    Ties (within ``TIE_TOL``) go to the lower vertex index. With fewer
    candidates than anchors the last selected index is repeated.
    """
    if num_anchors < 1:
        raise PreconditionError("need at least one anchor")
    v = mesh.vertices
    L = len(v)
    out = np.empty((L, num_anchors), dtype=np.int64)
    for i in range(L):
        ring = table.indices[i][table.valid_mask[i]]
        ring = ring[ring != i]
        if len(ring) == 0:
            raise ConstructionError(f"node {i} has an empty 1-ring")
        d = v[ring] @ v[i]
        mag = np.sqrt(np.maximum(1.0 - d * d, 0.0))
        key = np.round(mag / TIE_TOL)
        order = np.lexsort((ring, -key))
        chosen = ring[order[:num_anchors]]
        out[i, : len(chosen)] = chosen
        out[i, len(chosen) :] = chosen[-1]
    return out


@dataclass(frozen=True)
class GeodesicCache:
    delta: np.ndarray  # (L, K) radians, 0 on padded slots
    delta_hat: np.ndarray  # (L, K)
    bin_lo: np.ndarray  # (L, K)
    bin_hi: np.ndarray  # (L, K)
    bin_frac: np.ndarray  # (L, K)
    anchor_indices: np.ndarray  # (L, F)
    alpha: np.ndarray  # (L, K, F)
    degenerate: np.ndarray  # (L, K) self slots, padding and vanishing tangents
    valid_mask: np.ndarray  # (L, K)
    num_bins: int

    @property
    def num_anchors(self) -> int:
        return self.anchor_indices.shape[1]


def build_geodesic_cache(
    mesh: IcosphereMesh, table: NeighborTable, num_anchors: int = 3, num_bins: int = 16
) -> GeodesicCache:
    v = mesh.vertices
    idx = table.gather_indices
    valid = table.valid_mask
    p_i = v[:, None, :]
    p_j = v[idx]
    dot = np.clip(np.einsum("lkc,lc->lk", p_j, v), -1.0, 1.0)
    delta = np.where(valid, np.arccos(dot), 0.0)
    delta[:, 0] = 0.0
    delta_hat = delta / np.pi
    b0, b1, eta = radial_bins(delta_hat, num_bins)

    anchors = select_anchors(mesh, table, num_anchors)
    p_a = v[anchors]  # (L, F, 3)
    alpha, degen = relative_angle(p_i[:, :, None, :], p_j[:, :, None, :], p_a[:, None, :, :])
    degenerate = np.any(degen, axis=-1) | ~valid
    degenerate[:, 0] = True
    alpha = np.where(degenerate[..., None], 0.0, alpha)
    return GeodesicCache(
        delta=delta,
        delta_hat=delta_hat,
        bin_lo=b0,
        bin_hi=b1,
        bin_frac=eta,
        anchor_indices=anchors,
        alpha=alpha,
        degenerate=degenerate,
        valid_mask=valid.copy(),
        num_bins=num_bins,
    )


def cache_arrays(cache: GeodesicCache) -> dict[str, np.ndarray]:
    return {
        "delta": cache.delta,
        "delta_hat": cache.delta_hat,
        "bin_lo": cache.bin_lo.astype(np.int32),
        "bin_hi": cache.bin_hi.astype(np.int32),
        "bin_frac": cache.bin_frac,
        "anchor_indices": cache.anchor_indices.astype(np.int32),
        "alpha": cache.alpha,
        "degenerate": cache.degenerate,
        "valid_mask": cache.valid_mask,
    }
