"""U-shaped spherical segmentation network, losses and optimizer.

Input features live on the output-rank mesh. They are pooled to the token rank
and embedded (``project_tokens``); the backbone runs encoder stages down to a
bottleneck and decoder stages back up with skip fusion; a linear head predicts
per-token logits, which are lifted to the output rank by the geodesic kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from functools import lru_cache

import numpy as np
import torch
from torch import nn

from .attention import AttentionGeometry, Linear, TransformerBlock
from .errors import ConfigurationError, DataError
from .gauge_bias import BiasBasis, FourierBiasTable, eval_bias
from .geometry import build_geodesic_cache
from .icosphere import build_icosphere, build_neighbor_table
from .rank_transfer import TIE_MODES, TransferOps, build_rank_transfer
from .so3 import RotationMapSet


@dataclass
class ModelConfig:
    output_rank: int = 5
    depth: int = 3  # downsampling steps below the token rank; the last rank is the bottleneck
    dim: int = 32
    heads: int = 4
    blocks_per_stage: int = 2
    num_classes: int = 14
    in_channels: int = 3
    anchors: int = 3
    bins: int = 16
    fourier_order: int = 6
    log_scale_init: float = math.log(10.0)
    sigma_scale: float = 1.0  # kernel bandwidth in units of the coarse mean edge length
    transfer_ties: str = "split"  # split | lowest
    init_seed: int = 0
    abs_lat_pe: bool = False
    quadrature_attn: bool = True
    gauge_bias: bool = True
    geo_sampling: bool = True
    l_eq: bool = True
    lambda_eq: float = 0.05

    @property
    def token_rank(self) -> int:
        return self.output_rank - 1

    @property
    def stage_ranks(self) -> list[int]:
        return [self.token_rank - k for k in range(self.depth + 1)]

    def validate(self) -> None:
        if self.output_rank < 1:
            raise ConfigurationError("output_rank must be at least 1")
        if not 0 <= self.depth <= self.token_rank:
            raise ConfigurationError(f"depth {self.depth} needs token rank >= depth (token rank {self.token_rank})")
        if self.dim % self.heads:
            raise ConfigurationError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be at least 2")
        if self.lambda_eq < 0:
            raise ConfigurationError("lambda_eq must be nonnegative")
        if self.transfer_ties not in TIE_MODES:
            raise ConfigurationError(f"transfer_ties must be one of {TIE_MODES}")
        if self.bins < 2 or self.anchors < 1 or self.fourier_order < 0:
            raise ConfigurationError("invalid bias table shape")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


class RankGeometry:
    """Per-rank tables the network reads: attention neighborhoods and bias basis."""

    def __init__(self, rank: int, cfg: ModelConfig):
        self.mesh = build_icosphere(rank)
        table = build_neighbor_table(self.mesh)
        omega = self.mesh.area_weights if cfg.quadrature_attn else None
        self.attn = AttentionGeometry.build(table.gather_indices, table.valid_mask, omega)
        self.bias_basis = None
        if cfg.gauge_bias:
            cache = build_geodesic_cache(self.mesh, table, cfg.anchors, cfg.bins)
            self.bias_basis = BiasBasis(cache, cfg.fourier_order)
        lat = self.mesh.latitudes
        self.lat_features = torch.as_tensor(np.stack([np.sin(lat), np.cos(lat)], axis=1))


@lru_cache(maxsize=64)
def _rank_geometry(rank, quadrature, gauge, anchors, bins, order) -> RankGeometry:
    cfg = ModelConfig(quadrature_attn=quadrature, gauge_bias=gauge, anchors=anchors, bins=bins, fourier_order=order)
    return RankGeometry(rank, cfg)


@lru_cache(maxsize=64)
def _transfer(fine_rank, geometric, sigma_scale, ties) -> TransferOps:
    fine, coarse = build_icosphere(fine_rank), build_icosphere(fine_rank - 1)
    t = build_rank_transfer(fine, coarse, sigma_scale * coarse.mean_edge_length(), ties)
    return TransferOps(t, fine.area_weights, geometric)


def rank_geometry(rank: int, cfg: ModelConfig) -> RankGeometry:
    return _rank_geometry(rank, cfg.quadrature_attn, cfg.gauge_bias, cfg.anchors, cfg.bins, cfg.fourier_order)


def transfer_ops(fine_rank: int, cfg: ModelConfig) -> TransferOps:
    return _transfer(fine_rank, cfg.geo_sampling, cfg.sigma_scale, cfg.transfer_ties)


class Stage(nn.Module):
    def __init__(self, cfg: ModelConfig, generator: torch.Generator):
        super().__init__()
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.dim, cfg.heads, generator, cfg.log_scale_init) for _ in range(cfg.blocks_per_stage)
        )
        shape = (cfg.blocks_per_stage, cfg.heads, cfg.fourier_order + 1, cfg.bins)
        self.bias_A = nn.Parameter(torch.zeros(shape, dtype=torch.float64)) if cfg.gauge_bias else None
        self.bias_B = nn.Parameter(torch.zeros(shape, dtype=torch.float64)) if cfg.gauge_bias else None

    def forward(self, x, geo: RankGeometry):
        for b, block in enumerate(self.blocks):
            bias = None
            if self.bias_A is not None:
                bias = eval_bias(FourierBiasTable(self.bias_A[b], self.bias_B[b]), geo.bias_basis)
            x = block(x, geo.attn, bias)
        return x


class SphereSegNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        g = torch.Generator().manual_seed(cfg.init_seed)
        D = cfg.dim
        self.embed = Linear(cfg.in_channels, D, g)
        self.lat_embed = Linear(2, D, g, bias=False) if cfg.abs_lat_pe else None
        ranks = cfg.stage_ranks
        self.encoder = nn.ModuleList(Stage(cfg, g) for _ in ranks[:-1])
        self.bottleneck = Stage(cfg, g)
        self.fuse = nn.ModuleList(Linear(2 * D, D, g) for _ in ranks[:-1])
        self.decoder = nn.ModuleList(Stage(cfg, g) for _ in ranks[:-1])
        self.head = Linear(D, cfg.num_classes, g)

    # -- geometry lookups ------------------------------------------------
    def geometry(self, rank: int) -> RankGeometry:
        return rank_geometry(rank, self.cfg)

    def transfer(self, fine_rank: int) -> TransferOps:
        return transfer_ops(fine_rank, self.cfg)

    # -- pipeline ----------------------------------------------------------
    def tokenize(self, x_img: torch.Tensor) -> torch.Tensor:
        """Pool output-rank features to the token rank (no learned weights)."""
        return self.transfer(self.cfg.output_rank).down(x_img)

    def project_tokens(self, x_img: torch.Tensor) -> torch.Tensor:
        x_img = torch.as_tensor(x_img)
        L_img = build_icosphere(self.cfg.output_rank).num_vertices
        if x_img.shape[-2] != L_img:
            raise ConfigurationError(f"input has {x_img.shape[-2]} nodes, output rank needs {L_img}")
        return self.embed(self.tokenize(x_img))

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """Token features ``(N, L_tok, D)`` to output-rank logits ``(N, L_img, C)``."""
        cfg = self.cfg
        ranks = cfg.stage_ranks
        x = tokens
        if self.lat_embed is not None:
            # same as appending (sin lat, cos lat) channels before the embedding
            x = x + self.lat_embed(self.geometry(cfg.token_rank).lat_features)
        skips = []
        for stage, r in zip(self.encoder, ranks[:-1]):
            x = stage(x, self.geometry(r))
            skips.append(x)
            x = self.transfer(r).down(x)
        x = self.bottleneck(x, self.geometry(ranks[-1]))
        for k, (fuse, stage) in enumerate(zip(self.fuse, self.decoder)):
            r = ranks[-2 - k]
            x = self.transfer(r).up(x)
            x = fuse(torch.cat([x, skips[-1 - k]], dim=-1))
            x = stage(x, self.geometry(r))
        logits = self.head(x)
        return self.transfer(cfg.output_rank).up(logits)

    def predict(self, x_img: torch.Tensor) -> torch.Tensor:
        return self.forward(self.project_tokens(x_img))


# -- losses --------------------------------------------------------------


def seg_loss(logits: torch.Tensor, labels) -> tuple[torch.Tensor, bool]:
    """Cross-entropy averaged over nodes with label != 0.

    Returns ``(loss, has_valid)``; the loss is 0 when every label is 0.
    """
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    C = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= C):
        raise DataError(f"labels must lie in [0, {C})")
    if labels.shape != logits.shape[:-1]:
        raise DataError(f"label shape {tuple(labels.shape)} does not match logits {tuple(logits.shape[:-1])}")
    valid = labels != 0
    if not bool(valid.any()):
        return logits.sum() * 0.0, False
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, labels[..., None])[..., 0]
    return nll[valid].mean(), True


def apply_index_map(x: torch.Tensor, idx) -> torch.Tensor:
    """Reindex the node axis (second to last)."""
    return x[..., torch.as_tensor(np.asarray(idx), dtype=torch.long), :]


def eq_loss(model: SphereSegNet, tokens: torch.Tensor, maps: RotationMapSet, z: torch.Tensor | None = None):
    """Logit-space consistency between rotated input and reindexed prediction.

    The target branch is detached. Pass ``z`` to reuse an existing forward of
    ``tokens``.
    """
    with torch.no_grad():
        target = model(tokens) if z is None else z.detach()
    z_tgt = apply_index_map(target, maps.idx_img)
    z_rot = model(apply_index_map(tokens, maps.idx_proj))
    return ((z_rot - z_tgt) ** 2).mean()


def total_loss(seg, eq, lam: float):
    if lam < 0:
        raise ConfigurationError("lambda must be nonnegative")
    return seg + lam * eq


# -- optimizer -------------------------------------------------------------


class Adam:
    """Adam with bias-corrected first and second moments."""

    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            p.sub_(self.lr * (m / c1) / (torch.sqrt(v / c2) + self.eps))
