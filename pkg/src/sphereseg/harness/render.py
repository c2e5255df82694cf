"""Equirectangular rendering of node fields and label maps, and ERP ingestion."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import DataError, PreconditionError
from ..icosphere import IcosphereMesh
from ..rank_transfer import nearest_vertex
from ..so3 import directions_to_lonlat, erp_directions

# class 0 (unknown) renders black; 1..13 follow a fixed qualitative palette
PALETTE = np.array(
    [
        [0, 0, 0],
        [241, 255, 82],  # ceiling
        [102, 168, 226],  # floor
        [0, 255, 0],  # wall
        [113, 143, 65],
        [89, 173, 163],
        [254, 158, 137],
        [190, 123, 75],
        [100, 22, 116],
        [0, 18, 141],
        [84, 84, 84],
        [85, 116, 127],
        [255, 31, 33],
        [228, 228, 228],
    ],
    dtype=np.uint8,
)


def erp_node_lookup(mesh: IcosphereMesh, H: int) -> np.ndarray:
    """Nearest mesh node for every pixel of an ``H x 2H`` raster."""
    _, _, d = erp_directions(H, 2 * H)
    return nearest_vertex(d.reshape(-1, 3), mesh.vertices).reshape(H, 2 * H)


def labels_to_rgb(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= len(PALETTE):
        raise DataError("label outside the palette")
    return PALETTE[labels]


def field_to_rgb(values: np.ndarray, cmap: str = "viridis") -> np.ndarray:
    """Scalar fields go through a colormap; 3-channel fields are clipped to [0, 1]."""
    import matplotlib

    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 3 and values.shape[-1] == 3:
        return (np.clip(values, 0.0, 1.0) * 255).round().astype(np.uint8)
    lo, hi = float(values.min()), float(values.max())
    scaled = np.zeros_like(values) if hi <= lo else (values - lo) / (hi - lo)
    return (matplotlib.colormaps[cmap](scaled)[..., :3] * 255).round().astype(np.uint8)


def render_erp(values: np.ndarray, mesh: IcosphereMesh, H: int, path: str | Path | None = None,
               labels: bool | None = None) -> np.ndarray:
    """Rasterize per-node labels (integers) or features to an ``H x 2H x 3`` uint8 image.

    Writes a PNG when ``path`` is given.
    """
    if H < 16:
        raise PreconditionError("render height must be at least 16")
    values = np.asarray(values)
    if len(values) != mesh.num_vertices:
        raise DataError(f"field has {len(values)} nodes, mesh has {mesh.num_vertices}")
    if labels is None:
        labels = values.ndim == 1 and np.issubdtype(values.dtype, np.integer)
    raster = values[erp_node_lookup(mesh, H)]
    rgb = labels_to_rgb(raster) if labels else field_to_rgb(raster)
    if path is not None:
        import matplotlib.pyplot as plt

        plt.imsave(str(path), rgb)
    return rgb


def rgb_to_labels(rgb: np.ndarray) -> np.ndarray:
    """Invert :func:`labels_to_rgb`; unknown colors raise."""
    rgb = np.asarray(rgb)[..., :3]
    if rgb.dtype != np.uint8:
        rgb = (np.asarray(rgb, dtype=np.float64) * 255).round().astype(np.uint8)
    key = (rgb[..., 0].astype(np.int64) << 16) | (rgb[..., 1].astype(np.int64) << 8) | rgb[..., 2]
    pal = (PALETTE[:, 0].astype(np.int64) << 16) | (PALETTE[:, 1].astype(np.int64) << 8) | PALETTE[:, 2]
    order = np.argsort(pal)
    pos = np.searchsorted(pal[order], key)
    pos = np.clip(pos, 0, len(pal) - 1)
    if np.any(pal[order][pos] != key):
        raise DataError("raster contains colors outside the palette")
    return order[pos]


def sample_erp_at_nodes(image: np.ndarray, mesh: IcosphereMesh, interpolation: str = "nearest") -> np.ndarray:
    """Read an equirectangular raster at the mesh node directions."""
    img = np.asarray(image)
    H, W = img.shape[:2]
    if W != 2 * H:
        raise PreconditionError(f"equirectangular raster needs W = 2H, got {H}x{W}")
    lon, lat = directions_to_lonlat(mesh.vertices)
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
        fr, fc = fr[:, None], fc[:, None]
    return (f[r0, c0] * (1 - fc) + f[r0, c1] * fc) * (1 - fr) + (f[r1, c0] * (1 - fc) + f[r1, c1] * fc) * fr


def load_erp(path: str | Path, mesh: IcosphereMesh) -> np.ndarray:
    """Load an RGB equirectangular image and sample it bilinearly at the mesh nodes, values in [0, 1]."""
    import matplotlib.image as mpimg

    img = np.asarray(mpimg.imread(str(path)), dtype=np.float64)
    if img.max() > 1.0:
        img = img / 255.0
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    return sample_erp_at_nodes(img[..., :3], mesh, "bilinear")
