"""Rotation stress test: base mIoU versus mean mIoU under random ZYX rotations."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConfigurationError
from ..icosphere import build_icosphere
from ..model import SphereSegNet
from ..so3 import Rotation, rotation_index_map, sample_rotation_zyx
from .data import SegSample, stack
from .metrics import confusion, miou_from_confusion
from .train import predict_classes


@dataclass
class RotationResult:
    quaternion: list[float]
    miou: float | None


@dataclass
class StressReport:
    base_miou: float | None
    so3_miou: float | None
    per_rotation: list[RotationResult]
    base_per_class: dict[int, float]
    so3_per_class: dict[int, float]  # mean IoU per class over rotations where it is defined
    fingerprint: str
    seeds: dict[str, int]
    eval_frame: str
    num_samples: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def validate(self) -> None:
        vals = [self.base_miou, self.so3_miou] + [r.miou for r in self.per_rotation]
        for v in vals:
            if v is not None and not (0.0 <= v <= 100.0):
                raise ValueError(f"mIoU {v} outside [0, 100]")
        defined = [r.miou for r in self.per_rotation if r.miou is not None]
        if defined and self.so3_miou is not None and abs(np.mean(defined) - self.so3_miou) > 1e-9:
            raise ValueError("so3_miou is not the mean of the per-rotation values")


def stress_rotations(n_rotations: int, n_repeats: int, seed: int) -> list[Rotation]:
    """The rotation list depends only on the seed, never on the model under test."""
    rng = np.random.default_rng(seed)
    return [sample_rotation_zyx(rng) for _ in range(n_rotations * n_repeats)]


def _rotated_miou(model, feats, labels, rotation: Rotation, mesh, frame: str):
    idx = rotation_index_map(rotation, mesh)
    pred = predict_classes(model, feats[:, idx])
    if frame == "rotated":
        return miou_from_confusion(confusion(pred, labels[:, idx], model.cfg.num_classes))
    # pull predictions back onto the original nodes and score against the original labels
    back = rotation_index_map(rotation.inverse(), mesh)
    return miou_from_confusion(confusion(pred[:, back], labels, model.cfg.num_classes))


def stress_test(model: SphereSegNet, dataset: list[SegSample], n_rotations: int = 10, n_repeats: int = 3,
                seed: int = 0, eval_frame: str = "source", fingerprint: str = "",
                rotations: list[Rotation] | None = None) -> StressReport:
    mesh = build_icosphere(model.cfg.output_rank)
    feats, labels = stack(dataset)
    if feats.shape[1] != mesh.num_vertices:
        raise ConfigurationError(
            f"dataset has {feats.shape[1]} nodes but the checkpoint's output rank {model.cfg.output_rank} "
            f"needs {mesh.num_vertices}"
        )
    if eval_frame not in ("source", "rotated"):
        raise ConfigurationError(f"unknown eval_frame {eval_frame!r}")
    model.eval()
    base = miou_from_confusion(confusion(predict_classes(model, feats), labels, model.cfg.num_classes))
    rots = rotations if rotations is not None else stress_rotations(n_rotations, n_repeats, seed)
    per_rot = []
    per_class: dict[int, list[float]] = {}
    for rot in rots:
        res = _rotated_miou(model, feats, labels, rot, mesh, eval_frame)
        per_rot.append(RotationResult([float(q) for q in rot.quaternion], res.miou))
        for c, v in res.per_class.items():
            per_class.setdefault(c, []).append(v)
    defined = [r.miou for r in per_rot if r.miou is not None]
    return StressReport(
        base_miou=base.miou,
        so3_miou=float(np.mean(defined)) if defined else None,
        per_rotation=per_rot,
        base_per_class=base.per_class,
        so3_per_class={c: float(np.mean(v)) for c, v in sorted(per_class.items())},
        fingerprint=fingerprint,
        seeds={"stress_seed": seed, "n_rotations": n_rotations, "n_repeats": n_repeats},
        eval_frame=eval_frame,
        num_samples=len(dataset),
    )
