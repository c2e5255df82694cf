"""Local multi-head attention on icosphere neighborhoods.

Logits combine a clamped-scale cosine similarity, a relative positional bias
and a quadrature correction ``log(omega_j)``; padded slots are masked before
the softmax. The backward pass is written out by hand (``attention_backward``)
and wired into autograd through :class:`LocalAttentionFn`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import DataError

LOG_TAU_MAX = math.log(100.0)
NORM_EPS = 1e-12
OMEGA_FLOOR = 1e-12


@dataclass
class AttentionParams:
    W_Q: torch.Tensor  # (D, D); head h uses columns h*dh:(h+1)*dh
    W_K: torch.Tensor
    W_V: torch.Tensor
    W_O: torch.Tensor  # (D, D)
    s: torch.Tensor  # (H,) log-scale

    @property
    def heads(self) -> int:
        return self.s.shape[0]

    @property
    def dim(self) -> int:
        return self.W_Q.shape[0]

    @classmethod
    def init(cls, dim: int, heads: int, generator: torch.Generator, log_scale: float = math.log(10.0),
             dtype=torch.float64) -> "AttentionParams":
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        return cls(
            *(xavier_uniform((dim, dim), generator, dtype) for _ in range(4)),
            s=torch.full((heads,), log_scale, dtype=dtype),
        )


def xavier_uniform(shape: tuple[int, int], generator: torch.Generator, dtype=torch.float64) -> torch.Tensor:
    a = math.sqrt(6.0 / (shape[0] + shape[1]))
    return (torch.rand(shape, generator=generator, dtype=dtype) * 2.0 - 1.0) * a


def effective_scale(s: torch.Tensor) -> torch.Tensor:
    return torch.exp(torch.clamp(s, max=LOG_TAU_MAX))


@dataclass
class AttentionGeometry:
    """Neighborhood indices, mask and ``log(omega)`` per slot, as tensors."""

    index: torch.Tensor  # (L, K) long, padding replaced by self
    mask: torch.Tensor  # (L, K) bool
    log_omega: torch.Tensor  # (L, K) float, 0 on padding

    @classmethod
    def build(cls, gather_indices: np.ndarray, valid_mask: np.ndarray, omega: np.ndarray | None,
              dtype=torch.float64) -> "AttentionGeometry":
        idx = np.asarray(gather_indices)
        mask = np.asarray(valid_mask, dtype=bool)
        if omega is None:
            logw = np.zeros(idx.shape)
        else:
            w = np.asarray(omega, dtype=np.float64)[idx]
            if np.any(~np.isfinite(w[mask])) or np.any(w[mask] <= 0):
                raise DataError("area weights must be positive on valid neighbor slots")
            logw = np.where(mask, np.log(np.maximum(w, OMEGA_FLOOR)), 0.0)
        return cls(
            torch.as_tensor(idx, dtype=torch.long),
            torch.as_tensor(mask),
            torch.as_tensor(logw, dtype=dtype),
        )


def _normalize(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    n = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    return x / torch.clamp(n, min=NORM_EPS), n


def attention_forward(x: torch.Tensor, p: AttentionParams, geom: AttentionGeometry, bias: torch.Tensor | None):
    """Return ``(y, state)``. ``x`` is ``(N, L, D)`` or ``(L, D)``; bias is ``(L, K, H)``."""
    squeeze = x.dim() == 2
    if squeeze:
        x = x[None]
    if not torch.isfinite(x).all():
        raise DataError("non-finite attention input")
    N, L, D = x.shape
    H = p.heads
    dh = D // H
    idx, mask = geom.index, geom.mask
    K = idx.shape[1]

    Qr = (x @ p.W_Q).view(N, L, H, dh)
    Kr = (x @ p.W_K).view(N, L, H, dh)
    V = (x @ p.W_V).view(N, L, H, dh)
    q, nq = _normalize(Qr)
    k, nk = _normalize(Kr)
    kg = k[:, idx]  # (N, L, K, H, dh)
    vg = V[:, idx]
    u = torch.einsum("nlhd,nlkhd->nlkh", q, kg)
    tau = effective_scale(p.s)
    logits = tau * u + geom.log_omega[None, :, :, None]
    if bias is not None:
        logits = logits + bias[None]
    logits = logits.masked_fill(~mask[None, :, :, None], float("-inf"))
    logits = logits - logits.amax(dim=2, keepdim=True)
    a = torch.exp(logits)
    a = a / a.sum(dim=2, keepdim=True)
    yh = torch.einsum("nlkh,nlkhd->nlhd", a, vg)
    y_cat = yh.reshape(N, L, D)
    out = y_cat @ p.W_O
    state = dict(x=x, q=q, nq=nq, k=k, nk=nk, kg=kg, vg=vg, u=u, tau=tau, a=a, y_cat=y_cat,
                 params=p, geom=geom, squeeze=squeeze, has_bias=bias is not None)
    return (out[0] if squeeze else out), state


def _normalize_backward(g: torch.Tensor, unit: torch.Tensor, n: torch.Tensor) -> torch.Tensor:
    big = n > NORM_EPS
    proj = g - unit * (unit * g).sum(-1, keepdim=True)
    return torch.where(big, proj / torch.clamp(n, min=NORM_EPS), g / NORM_EPS)


def attention_backward(state: dict, upstream: torch.Tensor) -> dict[str, torch.Tensor]:
    """Analytic gradients of ``sum(upstream * y)``.

    Keys: ``x, W_Q, W_K, W_V, W_O, s, bias``. The scale clamp passes zero
    gradient to ``s`` at and above ``log(100)``.
    """
    p: AttentionParams = state["params"]
    geom: AttentionGeometry = state["geom"]
    x, q, k, kg, vg, u, tau, a = (state[n] for n in ("x", "q", "k", "kg", "vg", "u", "tau", "a"))
    g = upstream[None] if state["squeeze"] else upstream
    N, L, D = x.shape
    H = p.heads
    dh = D // H
    idx = geom.index
    K = idx.shape[1]
    flat_idx = idx.reshape(-1)

    dW_O = state["y_cat"].reshape(-1, D).T @ g.reshape(-1, D)
    dy = (g @ p.W_O.T).view(N, L, H, dh)

    da = torch.einsum("nlhd,nlkhd->nlkh", dy, vg)
    dvg = a[..., None] * dy[:, :, None]
    dV = torch.zeros(N, L, H, dh, dtype=x.dtype)
    dV.index_add_(1, flat_idx, dvg.reshape(N, L * K, H, dh))

    dlogit = a * (da - (a * da).sum(dim=2, keepdim=True))
    dbias = dlogit.sum(0)
    dtau = (dlogit * u).sum(dim=(0, 1, 2))
    ds = torch.where(p.s < LOG_TAU_MAX, dtau * tau, torch.zeros_like(tau))

    du = dlogit * tau
    dq = torch.einsum("nlkh,nlkhd->nlhd", du, kg)
    dkg = du[..., None] * q[:, :, None]
    dk = torch.zeros(N, L, H, dh, dtype=x.dtype)
    dk.index_add_(1, flat_idx, dkg.reshape(N, L * K, H, dh))

    dQr = _normalize_backward(dq, q, state["nq"]).reshape(N, L, D)
    dKr = _normalize_backward(dk, k, state["nk"]).reshape(N, L, D)
    dV = dV.reshape(N, L, D)
    xf = x.reshape(-1, D)
    grads = {
        "W_Q": xf.T @ dQr.reshape(-1, D),
        "W_K": xf.T @ dKr.reshape(-1, D),
        "W_V": xf.T @ dV.reshape(-1, D),
        "W_O": dW_O,
        "s": ds,
        "bias": dbias if state["has_bias"] else None,
    }
    dx = dQr @ p.W_Q.T + dKr @ p.W_K.T + dV @ p.W_V.T
    grads["x"] = dx[0] if state["squeeze"] else dx
    return grads


class LocalAttentionFn(torch.autograd.Function):
    """Autograd bridge: forward via :func:`attention_forward`, backward via the analytic pass."""

    @staticmethod
    def forward(ctx, x, W_Q, W_K, W_V, W_O, s, bias, geom):
        p = AttentionParams(W_Q, W_K, W_V, W_O, s)
        y, state = attention_forward(x, p, geom, bias)
        ctx.state = state
        return y

    @staticmethod
    def backward(ctx, g):
        gr = attention_backward(ctx.state, g)
        return gr["x"], gr["W_Q"], gr["W_K"], gr["W_V"], gr["W_O"], gr["s"], gr["bias"], None


def local_attention(x: torch.Tensor, p: AttentionParams, geom: AttentionGeometry, bias: torch.Tensor | None):
    return LocalAttentionFn.apply(x, p.W_Q, p.W_K, p.W_V, p.W_O, p.s, bias, geom)


class LocalAttention(nn.Module):
    def __init__(self, dim: int, heads: int, generator: torch.Generator, log_scale: float = math.log(10.0)):
        super().__init__()
        init = AttentionParams.init(dim, heads, generator, log_scale)
        self.W_Q = nn.Parameter(init.W_Q)
        self.W_K = nn.Parameter(init.W_K)
        self.W_V = nn.Parameter(init.W_V)
        self.W_O = nn.Parameter(init.W_O)
        self.s = nn.Parameter(init.s)

    @property
    def params(self) -> AttentionParams:
        return AttentionParams(self.W_Q, self.W_K, self.W_V, self.W_O, self.s)

    def forward(self, x, geom: AttentionGeometry, bias: torch.Tensor | None):
        return local_attention(x, self.params, geom, bias)


class Linear(nn.Module):
    """``x @ W + b`` with Glorot-uniform ``W`` and zero ``b``."""

    def __init__(self, d_in: int, d_out: int, generator: torch.Generator, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(xavier_uniform((d_in, d_out), generator))
        self.bias = nn.Parameter(torch.zeros(d_out, dtype=torch.float64)) if bias else None

    def forward(self, x):
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim, dtype=torch.float64))
        self.shift = nn.Parameter(torch.zeros(dim, dtype=torch.float64))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(-1, keepdim=True)
        var = ((x - mu) ** 2).mean(-1, keepdim=True)
        return (x - mu) / torch.sqrt(var + self.eps) * self.gain + self.shift


class TransformerBlock(nn.Module):
    """Pre-norm block: ``x + attn(LN(x))`` then ``x + MLP(LN(x))``; MLP width 2D, GELU."""

    def __init__(self, dim: int, heads: int, generator: torch.Generator, log_scale: float = math.log(10.0)):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = LocalAttention(dim, heads, generator, log_scale)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, 2 * dim, generator)
        self.fc2 = Linear(2 * dim, dim, generator)

    def forward(self, x, geom: AttentionGeometry, bias: torch.Tensor | None):
        x = x + self.attn(self.norm1(x), geom, bias)
        h = torch.nn.functional.gelu(self.fc1(self.norm2(x)))
        return x + self.fc2(h)
