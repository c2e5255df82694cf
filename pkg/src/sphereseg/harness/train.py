"""Deterministic single-process training loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..checkpoint import Checkpoint
from ..config import ExperimentConfig
from ..errors import ConfigurationError, SphereSegError
from ..icosphere import build_icosphere
from ..model import Adam, SphereSegNet, eq_loss, seg_loss, total_loss
from ..so3 import build_rotation_maps, mirror_index_map, rotation_index_map, sample_rotation_uniform, yaw_rotation
from .data import SegSample, stack
from .metrics import confusion, miou_from_confusion

log = logging.getLogger(__name__)


class TrainingDiverged(SphereSegError):
    exit_code = 1


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    records: list[dict] = field(default_factory=list)


def predict_classes(model: SphereSegNet, features: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Arg-max over the non-ignore classes 1..C-1, shape ``(N, L)``."""
    out = []
    with torch.no_grad():
        for s in range(0, len(features), batch_size):
            z = model.predict(torch.as_tensor(features[s : s + batch_size]))
            out.append(1 + z[..., 1:].argmax(-1).numpy())
    return np.concatenate(out)


def evaluate_miou(model: SphereSegNet, dataset: list[SegSample]):
    feats, labels = stack(dataset)
    pred = predict_classes(model, feats)
    return miou_from_confusion(confusion(pred, labels, model.cfg.num_classes))


class Augmenter:
    """Random yaw plus horizontal flip, applied as node index maps."""

    def __init__(self, mesh, mode: str, flip: bool):
        self.mesh = mesh
        self.mode = mode
        self.flip = flip
        self.mirror = mirror_index_map(mesh) if flip else None
        # the base orientation makes multiples of 72 degrees exact permutations
        self.sym_maps = [rotation_index_map(yaw_rotation(2 * np.pi * k / 5), mesh) for k in range(5)]

    def __call__(self, rng: np.random.Generator) -> np.ndarray:
        idx = np.arange(self.mesh.num_vertices)
        if self.mode == "symmetric":
            idx = idx[self.sym_maps[int(rng.integers(5))]]
        elif self.mode == "continuous":
            idx = idx[rotation_index_map(yaw_rotation(rng.uniform(0, 2 * np.pi)), self.mesh)]
        if self.flip and rng.random() < 0.5:
            idx = idx[self.mirror]
        return idx


def train(cfg: ExperimentConfig, train_set: list[SegSample], val_set: list[SegSample] | None = None,
          log_path: str | Path | None = None, model: SphereSegNet | None = None) -> TrainResult:
    mcfg, tcfg = cfg.model, cfg.train
    model = model or SphereSegNet(mcfg)
    out_mesh = build_icosphere(mcfg.output_rank)
    tok_mesh = build_icosphere(mcfg.token_rank)
    if train_set[0].features.shape[0] != out_mesh.num_vertices:
        raise ConfigurationError(
            f"dataset has {train_set[0].features.shape[0]} nodes; output rank {mcfg.output_rank} needs {out_mesh.num_vertices}"
        )
    params = list(model.parameters())
    opt = Adam(params, lr=tcfg.lr, betas=(tcfg.adam_beta1, tcfg.adam_beta2), eps=tcfg.adam_eps)
    rng = np.random.default_rng(tcfg.train_seed)
    aug = Augmenter(out_mesh, tcfg.yaw_aug, tcfg.flip_aug)
    feats, labels = stack(train_set)
    lam = mcfg.lambda_eq if mcfg.l_eq else 0.0
    records = []
    fh = open(log_path, "a") if log_path else None
    t0 = time.perf_counter()
    step = 0
    try:
        for epoch in range(tcfg.epochs):
            order = rng.permutation(len(train_set))
            seg_sum = eq_sum = 0.0
            nb = 0
            for s in range(0, len(order), tcfg.batch_size):
                batch = order[s : s + tcfg.batch_size]
                maps = [aug(rng) for _ in batch]
                x = torch.as_tensor(np.stack([feats[b][m] for b, m in zip(batch, maps)]))
                y = np.stack([labels[b][m] for b, m in zip(batch, maps)])
                opt.zero_grad()
                tokens = model.project_tokens(x)
                z = model(tokens)
                seg, _ = seg_loss(z, y)
                eq = torch.zeros((), dtype=z.dtype)
                if mcfg.l_eq:
                    rot = sample_rotation_uniform(rng)
                    eq = eq_loss(model, tokens, build_rotation_maps(rot, tok_mesh, out_mesh), z=z)
                loss = total_loss(seg, eq, lam)
                if not math.isfinite(loss.item()):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} step {step}: seg={seg.item()} eq={eq.item()}"
                    )
                loss.backward()
                opt.step()
                seg_sum += seg.item()
                eq_sum += eq.item()
                nb += 1
                step += 1
            rec = {
                "epoch": epoch,
                "step": step,
                "seg_loss": seg_sum / nb,
                "eq_loss": eq_sum / nb,
                "val_miou": None,
                "wall_time": time.perf_counter() - t0,
            }
            if val_set is not None and tcfg.val_every > 0 and (epoch + 1) % tcfg.val_every == 0:
                rec["val_miou"] = evaluate_miou(model, val_set).miou
            records.append(rec)
            log.info("epoch %d seg %.4f eq %.4f val %s", epoch, rec["seg_loss"], rec["eq_loss"], rec["val_miou"])
            if fh:
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
    finally:
        if fh:
            fh.close()
    ckpt = Checkpoint.from_model(
        model, step=step, rng_state=rng.bit_generator.state, opt=opt,
        extra={"fingerprint": cfg.fingerprint(), "epochs": tcfg.epochs},
    )
    return TrainResult(ckpt, records)
