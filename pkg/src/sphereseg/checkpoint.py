"""Model checkpoints in the binary container (tensors) with a JSON manifest (meta)."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .container import read_container, write_container
from .errors import ConfigurationError, DataError
from .model import Adam, ModelConfig, SphereSegNet

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    state: dict[str, torch.Tensor]
    step: int = 0
    rng_state: dict | None = None
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: SphereSegNet, step: int = 0, rng_state=None, opt: Adam | None = None, extra=None):
        state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        optimizer = {}
        if opt is not None:
            names = [n for n, _ in model.named_parameters()]
            for n, m, v in zip(names, opt.m, opt.v):
                optimizer[f"adam.m.{n}"] = m.detach().numpy()
                optimizer[f"adam.v.{n}"] = v.detach().numpy()
            optimizer["adam.t"] = np.array([opt.t], dtype=np.int64)
        return cls(dataclasses.replace(model.cfg), state, step, rng_state, optimizer, dict(extra or {}))

    def build_model(self) -> SphereSegNet:
        model = SphereSegNet(dataclasses.replace(self.config))
        expected = model.state_dict()
        missing = set(expected) - set(self.state)
        if missing:
            raise DataError(f"checkpoint is missing tensors: {sorted(missing)[:3]}...")
        for k, v in expected.items():
            if tuple(v.shape) != tuple(self.state[k].shape):
                raise DataError(f"tensor {k}: shape {tuple(self.state[k].shape)} does not match config {tuple(v.shape)}")
        model.load_state_dict(self.state)
        return model


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    arrays = {f"param.{k}": v.numpy() for k, v in ckpt.state.items()}
    arrays.update(ckpt.optimizer)
    meta = {
        "format_version": FORMAT_VERSION,
        "config": dataclasses.asdict(ckpt.config),
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
    }
    write_container(path, "checkpoint", arrays, meta)


def load_checkpoint(path: str | Path) -> Checkpoint:
    arrays, meta = read_container(path, "checkpoint")
    if meta.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
    try:
        cfg = ModelConfig(**meta["config"])
    except TypeError as e:
        raise ConfigurationError(f"{path}: bad model config: {e}") from None
    state = {k[len("param."):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("param.")}
    opt = {k: v for k, v in arrays.items() if k.startswith("adam.")}
    return Checkpoint(cfg, state, meta.get("step", 0), meta.get("rng_state"), opt, meta.get("extra", {}))
