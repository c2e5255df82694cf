"""Transfers between adjacent icosphere ranks.

Each fine node has a parent: the nearest coarse vertex, lowest index on ties.
Subdivision places every new fine vertex at the midpoint of a coarse edge, so
three quarters of the fine nodes sit exactly between two coarse vertices. With
``ties="split"`` (the default) such a node counts half toward each tied parent
when pooling, and upsamples from the union of the tied parents' closed 1-rings.
That keeps both operators commuting with every mesh symmetry. ``ties="lowest"``
uses the single recorded parent throughout.

Downsampling is an area-weighted mean; upsampling a normalized Gaussian kernel
in geodesic distance. Both are fixed linear operators;
:meth:`RankTransfer.down_matrix` and :meth:`RankTransfer.up_matrix` expose them
as dense matrices for tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError, ConstructionError, PreconditionError
from .icosphere import IcosphereMesh

TIE_TOL = 1e-10
TIE_MODES = ("split", "lowest")


def nearest_vertex(points: np.ndarray, vertices: np.ndarray, tol: float = TIE_TOL,
                   chunk: int = 2048) -> np.ndarray:
    """Brute-force ``argmax_j <points_i, vertices_j>``.

    Dot products within ``tol`` of the best count as ties and go to the lowest
    ``j``, so exact geometric ties are not decided by rounding noise.
    """
    out = np.empty(len(points), dtype=np.int64)
    for s in range(0, len(points), chunk):
        d = points[s : s + chunk] @ vertices.T
        out[s : s + chunk] = np.argmax(d >= d.max(axis=1, keepdims=True) - tol, axis=1)
    return out


def tied_parents(points: np.ndarray, vertices: np.ndarray, tol: float = TIE_TOL,
                 chunk: int = 2048) -> tuple[np.ndarray, np.ndarray]:
    """All vertices within ``tol`` of the best dot product, ascending, padded with the first.

    Returns ``(indices, mask)`` of shape ``(n, T)``.
    """
    rows: list[np.ndarray] = []
    for s in range(0, len(points), chunk):
        d = points[s : s + chunk] @ vertices.T
        hit = d >= d.max(axis=1, keepdims=True) - tol
        rows.extend(np.nonzero(h)[0] for h in hit)
    T = max(len(r) for r in rows)
    idx = np.empty((len(rows), T), dtype=np.int64)
    mask = np.zeros((len(rows), T), dtype=bool)
    for i, r in enumerate(rows):
        idx[i, : len(r)] = r
        idx[i, len(r) :] = r[0]
        mask[i, : len(r)] = True
    return idx, mask


@dataclass(frozen=True)
class RankTransfer:
    fine_rank: int
    coarse_rank: int
    parent: np.ndarray  # (L_fine,)
    children: tuple[np.ndarray, ...]  # per coarse node, a partition of the fine nodes
    up_candidates: np.ndarray  # (L_fine, P) coarse indices, padded by repeating the parent
    up_weights: np.ndarray  # (L_fine, P), 0 on padding
    up_mask: np.ndarray  # (L_fine, P)
    sigma: float
    pool_parents: np.ndarray  # (L_fine, T) parents sharing each fine node
    pool_share: np.ndarray  # (L_fine, T), rows sum to 1, 0 on padding
    ties: str = "split"

    @property
    def num_fine(self) -> int:
        return len(self.parent)

    @property
    def num_coarse(self) -> int:
        return len(self.children)

    def _share_matrix(self) -> np.ndarray:
        S = np.zeros((self.num_coarse, self.num_fine))
        cols = np.repeat(np.arange(self.num_fine), self.pool_parents.shape[1])
        np.add.at(S, (self.pool_parents.reshape(-1), cols), self.pool_share.reshape(-1))
        return S

    def down_matrix(self, omega_fine: np.ndarray | None) -> np.ndarray:
        w = np.ones(self.num_fine) if omega_fine is None else np.asarray(omega_fine, dtype=np.float64)
        M = self._share_matrix() * w[None, :]
        return M / M.sum(axis=1, keepdims=True)

    def up_matrix(self) -> np.ndarray:
        M = np.zeros((self.num_fine, self.num_coarse))
        rows = np.repeat(np.arange(self.num_fine), self.up_candidates.shape[1])
        np.add.at(M, (rows, self.up_candidates.reshape(-1)), self.up_weights.reshape(-1))
        return M


def build_rank_transfer(fine: IcosphereMesh, coarse: IcosphereMesh, sigma: float | None = None,
                        ties: str = "split") -> RankTransfer:
    if coarse.rank != fine.rank - 1:
        raise ConfigurationError(f"coarse rank {coarse.rank} is not fine rank {fine.rank} - 1")
    if ties not in TIE_MODES:
        raise ConfigurationError(f"ties must be one of {TIE_MODES}, not {ties!r}")
    if sigma is None:
        sigma = coarse.mean_edge_length()
    if not sigma > 0:
        raise PreconditionError("kernel bandwidth must be positive")
    parent = nearest_vertex(fine.vertices, coarse.vertices)
    order = np.argsort(parent, kind="stable")
    splits = np.searchsorted(parent[order], np.arange(1, coarse.num_vertices))
    children = tuple(np.split(order, splits))
    if any(len(c) == 0 for c in children):
        raise ConstructionError("a coarse node received no children")

    if ties == "split":
        pool, pmask = tied_parents(fine.vertices, coarse.vertices)
    else:
        pool, pmask = parent[:, None].copy(), np.ones((fine.num_vertices, 1), dtype=bool)
    share = pmask / pmask.sum(axis=1, keepdims=True)

    cand_sets = []
    for i in range(fine.num_vertices):
        ps = pool[i][pmask[i]]
        cand_sets.append(np.unique(np.concatenate([ps, *(coarse.neighbors[p] for p in ps)])))
    P = max(len(c) for c in cand_sets)
    cand = np.repeat(parent[:, None], P, axis=1)
    mask = np.zeros((fine.num_vertices, P), dtype=bool)
    for i, c in enumerate(cand_sets):
        cand[i, : len(c)] = c
        mask[i, : len(c)] = True
    dots = np.einsum("lc,lpc->lp", fine.vertices, coarse.vertices[cand])
    delta = np.arccos(np.clip(dots, -1.0, 1.0))
    logk = np.where(mask, -(delta**2) / (2.0 * sigma**2), -np.inf)
    logk -= logk.max(axis=1, keepdims=True)
    w = np.exp(logk)
    w /= w.sum(axis=1, keepdims=True)
    return RankTransfer(fine.rank, coarse.rank, parent, children, cand, w, mask, float(sigma),
                        pool, share, ties)


class TransferOps:
    """Torch implementation of one transfer, in geometric or plain mode.

    Plain mode (``geometric=False``) pools with equal weights and copies the
    parent's value on the way up (the mean of the tied parents under ``split``).
    """

    def __init__(self, t: RankTransfer, omega_fine: np.ndarray, geometric: bool = True, dtype=torch.float64):
        self.transfer = t
        self.geometric = geometric
        w = np.asarray(omega_fine, dtype=np.float64) if geometric else np.ones(t.num_fine)
        sw = t.pool_share * w[:, None]
        denom = np.zeros(t.num_coarse)
        np.add.at(denom, t.pool_parents.reshape(-1), sw.reshape(-1))
        self.pool_idx = torch.as_tensor(t.pool_parents.reshape(-1), dtype=torch.long)
        self.pool_w = torch.as_tensor(sw / denom[t.pool_parents], dtype=dtype)  # (L_fine, T)
        if geometric:
            self.cand = torch.as_tensor(t.up_candidates, dtype=torch.long)
            self.up_w = torch.as_tensor(t.up_weights, dtype=dtype)
        else:
            self.cand = torch.as_tensor(t.pool_parents, dtype=torch.long)
            self.up_w = torch.as_tensor(t.pool_share, dtype=dtype)

    def down(self, x: torch.Tensor) -> torch.Tensor:
        """``(..., L_fine, C) -> (..., L_coarse, C)``."""
        wx = (x[..., :, None, :] * self.pool_w[..., None]).flatten(-3, -2)  # (..., L_fine * T, C)
        out = torch.zeros(*x.shape[:-2], self.transfer.num_coarse, x.shape[-1], dtype=x.dtype)
        return out.index_add(-2, self.pool_idx, wx)

    def up(self, x: torch.Tensor) -> torch.Tensor:
        """``(..., L_coarse, C) -> (..., L_fine, C)``."""
        g = x[..., self.cand, :]  # (..., L_fine, P, C)
        return (g * self.up_w[..., None]).sum(-2)


def downsample(x: np.ndarray, t: RankTransfer, omega_fine: np.ndarray | None) -> np.ndarray:
    """Area-weighted mean over each coarse node's (shared) children."""
    x = np.asarray(x, dtype=np.float64)
    w = np.ones(t.num_fine) if omega_fine is None else np.asarray(omega_fine, dtype=np.float64)
    sw = t.pool_share * w[:, None]
    tail = (1,) * (x.ndim - 1)
    num = np.zeros((t.num_coarse,) + x.shape[1:])
    den = np.zeros(t.num_coarse)
    for k in range(sw.shape[1]):
        np.add.at(num, t.pool_parents[:, k], sw[:, k].reshape((-1,) + tail) * x)
        np.add.at(den, t.pool_parents[:, k], sw[:, k])
    return num / den.reshape((-1,) + tail)


def upsample(x: np.ndarray, t: RankTransfer) -> np.ndarray:
    """Gaussian-kernel interpolation from the parent(s) and their 1-rings."""
    x = np.asarray(x, dtype=np.float64)
    g = x[t.up_candidates]
    w = t.up_weights.reshape(t.up_weights.shape + (1,) * (x.ndim - 1))
    return (g * w).sum(axis=1)
