"""Command line entry point.

Exit codes: 0 success, 1 property or assertion failure, 2 configuration error,
3 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import selftest
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .container import read_container, write_container
from .errors import ConfigurationError, DataError, PropertyFailure, SphereSegError
from .geometry import build_geodesic_cache, cache_arrays
from .icosphere import build_icosphere, build_neighbor_table
from .rank_transfer import build_rank_transfer
from .so3 import build_rotation_maps, sample_rotation_capped, sample_rotation_uniform, sample_rotation_zyx

log = logging.getLogger("sphereseg")

EXIT_OK, EXIT_PROPERTY, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3


# -- mesh / tables / rotmap -------------------------------------------------


def mesh_arrays(rank: int) -> tuple[dict[str, np.ndarray], dict]:
    m = build_icosphere(rank)
    table = build_neighbor_table(m)
    arrays = {
        "vertices": m.vertices,
        "faces": m.faces.astype(np.int32),
        "neighbors": table.indices.astype(np.int32),
        "area_weights": m.area_weights,
        "raw_areas": m.raw_areas,
    }
    meta = {"rank": rank, "vertices": m.num_vertices, "edges": len(m.edges), "faces": len(m.faces)}
    return arrays, meta


def load_mesh_file(path: str):
    """Read a mesh container and check it against a fresh build of the same rank."""
    arrays, meta = _read(path, "mesh")
    rank = meta.get("rank")
    if not isinstance(rank, int) or rank < 0:
        raise DataError(f"{path}: mesh container has no valid rank")
    mesh = build_icosphere(rank)
    if arrays["vertices"].shape != mesh.vertices.shape or not np.array_equal(arrays["vertices"], mesh.vertices):
        raise DataError(f"{path}: vertices do not match a rank-{rank} icosphere")
    return mesh


def _read(path: str, kind: str):
    try:
        return read_container(path, kind)
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None


def cmd_mesh(args) -> int:
    arrays, meta = mesh_arrays(args.rank)
    write_container(args.out, "mesh", arrays, meta)
    print("rank\tvertices\tedges\tfaces")
    print(f"{meta['rank']}\t{meta['vertices']}\t{meta['edges']}\t{meta['faces']}")
    return EXIT_OK


def cmd_tables(args) -> int:
    mesh = load_mesh_file(args.mesh)
    table = build_neighbor_table(mesh)
    cache = build_geodesic_cache(mesh, table, args.anchors, args.bins)
    arrays = {f"cache.{k}": v for k, v in cache_arrays(cache).items()}
    meta = {"rank": mesh.rank, "anchors": args.anchors, "bins": args.bins}
    if mesh.rank >= 1:
        coarse = build_icosphere(mesh.rank - 1)
        t = build_rank_transfer(mesh, coarse, args.sigma_scale * coarse.mean_edge_length(), args.ties)
        arrays.update({
            "transfer.parent": t.parent.astype(np.int32),
            "transfer.pool_parents": t.pool_parents.astype(np.int32),
            "transfer.pool_share": t.pool_share,
            "transfer.up_candidates": t.up_candidates.astype(np.int32),
            "transfer.up_weights": t.up_weights,
            "transfer.up_mask": t.up_mask,
        })
        meta.update({"coarse_rank": coarse.rank, "sigma": t.sigma, "ties": args.ties})
    write_container(args.out, "tables", arrays, meta)
    print("rank\tanchors\tbins\tdegenerate_slots\ttransfer")
    print(f"{mesh.rank}\t{args.anchors}\t{args.bins}\t{int(cache.degenerate.sum())}\t{'yes' if mesh.rank else 'no'}")
    return EXIT_OK


def cmd_rotmap(args) -> int:
    tok = load_mesh_file(args.mesh_token)
    out = load_mesh_file(args.mesh_out)
    if args.count < 1:
        raise ConfigurationError("--count must be at least 1")
    rng = np.random.default_rng(args.seed)
    draw = {
        "capped35": lambda: sample_rotation_capped(math.radians(35.0), rng),
        "uniform": lambda: sample_rotation_uniform(rng),
        "zyx": lambda: sample_rotation_zyx(rng),
    }[args.mode]
    maps = [build_rotation_maps(draw(), tok, out) for _ in range(args.count)]
    arrays = {
        "quaternions": np.stack([m.rotation.quaternion for m in maps]),
        "idx_proj": np.stack([m.idx_proj for m in maps]).astype(np.int32),
        "idx_img": np.stack([m.idx_img for m in maps]).astype(np.int32),
    }
    write_container(args.out, "rotmap", arrays,
                    {"mode": args.mode, "seed": args.seed, "token_rank": tok.rank, "output_rank": out.rank})
    print("index\tqw\tqx\tqy\tqz\tangle_deg")
    for i, m in enumerate(maps):
        q = m.rotation.quaternion
        print(f"{i}\t" + "\t".join(f"{v:.9f}" for v in q) + f"\t{math.degrees(m.rotation.angle):.6f}")
    return EXIT_OK


# -- data / train / stress / render ----------------------------------------


def _config(args) -> ExperimentConfig:
    return load_config(getattr(args, "config", None), getattr(args, "set", None))


def split_seeds(cfg: ExperimentConfig, split: str) -> tuple[int, int]:
    """(scene seed, pose seed) for a split; train and val never share a stream."""
    base = cfg.data.data_seed
    return (base, base + 1000) if split == "train" else (base + 1, base + 1001)


def build_split(cfg: ExperimentConfig, split: str):
    from .harness.data import make_synthetic_dataset, pose_perturb_dataset

    mesh = build_icosphere(cfg.model.output_rank)
    n = cfg.data.n_train if split == "train" else cfg.data.n_val
    scene_seed, pose_seed = split_seeds(cfg, split)
    ds = make_synthetic_dataset(mesh, n, scene_seed, cfg.data)
    return pose_perturb_dataset(ds, mesh, math.radians(cfg.data.pose_max_deg), pose_seed)


def cmd_gen_data(args) -> int:
    from .harness.data import save_dataset

    cfg = _config(args)
    ds = build_split(cfg, args.split)
    save_dataset(args.out, ds, cfg.model.output_rank,
                 {"split": args.split, "fingerprint": cfg.fingerprint(), "seeds": list(split_seeds(cfg, args.split))})
    counts = np.bincount(np.concatenate([s.labels for s in ds]), minlength=14)
    print("split\tsamples\tnodes\tignore_fraction")
    print(f"{args.split}\t{len(ds)}\t{len(ds[0].labels)}\t{counts[0] / counts.sum():.4f}")
    return EXIT_OK


def _load_data(path: str, rank: int):
    from .harness.data import load_dataset

    ds, meta = load_dataset(path)
    if meta.get("rank") != rank:
        raise ConfigurationError(f"{path}: dataset rank {meta.get('rank')} does not match output rank {rank}")
    return ds


def cmd_train(args) -> int:
    from .harness.train import train
    from .report import plot_training

    cfg = _config(args)
    train_set = _load_data(args.data, cfg.model.output_rank)
    val_set = _load_data(args.val, cfg.model.output_rank) if args.val else None
    if args.log:
        Path(args.log).write_text("")
    res = train(cfg, train_set, val_set, log_path=args.log)
    save_checkpoint(args.out, res.checkpoint)
    if args.report_dir:
        out = Path(args.report_dir)
        out.mkdir(parents=True, exist_ok=True)
        plot_training(res.records, out / "training.png")
    print("epoch\tstep\tseg_loss\teq_loss\tval_miou")
    for r in res.records:
        val = "" if r["val_miou"] is None else f"{r['val_miou']:.4f}"
        print(f"{r['epoch']}\t{r['step']}\t{r['seg_loss']:.6f}\t{r['eq_loss']:.6f}\t{val}")
    return EXIT_OK


def cmd_stress(args) -> int:
    from .harness.stress import stress_test
    from .report import plot_stress, write_stress_tables

    cfg = _config(args)
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    ds = _load_data(args.data, model.cfg.output_rank)
    s = cfg.stress
    report = stress_test(model, ds, s.n_rotations, s.n_repeats, s.stress_seed, s.eval_frame,
                         fingerprint=ckpt.extra.get("fingerprint", ""))
    try:
        report.validate()
    except ValueError as e:
        raise PropertyFailure(str(e)) from None
    Path(args.out).write_text(report.to_json() + "\n")
    if args.report_dir:
        out = Path(args.report_dir)
        write_stress_tables(report, out)
        plot_stress(report, out / "stress.png")
    fmt = lambda v: "" if v is None else f"{v:.4f}"  # noqa: E731
    print("base_miou\tso3_miou\trotations\tsamples\teval_frame")
    print(f"{fmt(report.base_miou)}\t{fmt(report.so3_miou)}\t{len(report.per_rotation)}\t{report.num_samples}"
          f"\t{report.eval_frame}")
    return EXIT_OK


def cmd_render(args) -> int:
    from .harness.render import render_erp
    from .harness.train import predict_classes

    ds, meta = _read_dataset(args.data)
    if not 0 <= args.index < len(ds):
        raise ConfigurationError(f"--index {args.index} outside [0, {len(ds)})")
    mesh = build_icosphere(meta["rank"])
    sample = ds[args.index]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [
        render_erp(sample.labels, mesh, args.height, out / f"sample{args.index}_labels.png", labels=True),
        render_erp(sample.features, mesh, args.height, out / f"sample{args.index}_features.png", labels=False),
    ]
    names = ["labels", "features"]
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint).build_model()
        if model.cfg.output_rank != meta["rank"]:
            raise ConfigurationError("checkpoint and dataset ranks differ")
        pred = predict_classes(model, sample.features[None])[0]
        written.append(render_erp(pred, mesh, args.height, out / f"sample{args.index}_pred.png", labels=True))
        names.append("pred")
    print("image\theight\twidth\tpath")
    for n, img in zip(names, written):
        print(f"{n}\t{img.shape[0]}\t{img.shape[1]}\t{out / f'sample{args.index}_{n}.png'}")
    return EXIT_OK


def _read_dataset(path: str):
    from .harness.data import load_dataset

    try:
        return load_dataset(path)
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None


def cmd_selftest(args) -> int:
    names = args.only or list(selftest.CHECKS)
    unknown = set(names) - set(selftest.CHECKS)
    if unknown:
        raise ConfigurationError(f"unknown checks: {sorted(unknown)}")
    results = selftest.run_all(names)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_PROPERTY if failed else EXIT_OK


def cmd_config(args) -> int:
    sys.stdout.write(_config(args).to_text())
    return EXIT_OK


def cmd_ablation(args) -> int:
    """Train with and without the latitude encoding and stress both on one rotation set."""
    from .harness.stress import stress_rotations, stress_test
    from .harness.train import train
    from .report import plot_ablation

    cfg = _config(args)
    train_set, val_set = build_split(cfg, "train"), build_split(cfg, "val")
    s = cfg.stress
    rots = stress_rotations(s.n_rotations, s.n_repeats, s.stress_seed)
    rows = []
    for pe in (True, False):
        run = load_config(getattr(args, "config", None), (args.set or []) + [f"abs_lat_pe={pe}"])
        res = train(run, train_set, None)
        rep = stress_test(res.checkpoint.build_model(), val_set, s.n_rotations, s.n_repeats, s.stress_seed,
                          s.eval_frame, run.fingerprint(), rotations=rots)
        rows.append({"name": f"lat PE {'on' if pe else 'off'}", "base": rep.base_miou, "so3": rep.so3_miou})
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plot_ablation(rows, out / "ablation.png")
    (out / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
    print("variant\tbase_miou\tso3_miou")
    for r in rows:
        print(f"{r['name']}\t{r['base']:.4f}\t{r['so3']:.4f}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def _add_config(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sphereseg", description="Rotation-robust spherical segmentation toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mesh", help="write an icosphere mesh container")
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("tables", help="geodesic cache and rank transfer for a mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--anchors", type=int, default=3)
    p.add_argument("--bins", type=int, default=16)
    p.add_argument("--sigma-scale", type=float, default=1.0)
    p.add_argument("--ties", choices=("split", "lowest"), default="split")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tables)

    p = sub.add_parser("rotmap", help="sample rotations and dump their index maps")
    p.add_argument("--mesh-token", required=True)
    p.add_argument("--mesh-out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=("capped35", "uniform", "zyx"), default="zyx")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rotmap)

    p = sub.add_parser("gen-data", help="write a synthetic dataset split")
    _add_config(p)
    p.add_argument("--split", choices=("train", "val"), default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_config(p)
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="line-delimited JSON metrics log")
    p.add_argument("--report-dir", help="directory for the training curve figure")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("stress", help="rotation stress test of a checkpoint")
    _add_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="StressReport JSON")
    p.add_argument("--report-dir", help="directory for TSV tables and the figure")
    p.set_defaults(func=cmd_stress)

    p = sub.add_parser("render", help="equirectangular PNGs of a dataset sample")
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--checkpoint")
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("selftest", help="run the property checks")
    p.add_argument("--only", nargs="+", metavar="CHECK", help=f"subset of {', '.join(selftest.CHECKS)}")
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("config", help="print the effective configuration")
    _add_config(p)
    p.set_defaults(func=cmd_config)

    p = sub.add_parser("ablation", help="latitude-encoding ablation under the stress test")
    _add_config(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_ablation)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except SphereSegError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except (OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
