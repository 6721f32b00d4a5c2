"""TSDF fusion of posed depth maps and view-pooled back-projection of 2D features."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .camera import CameraView
from .codec import Reader, Writer
from .tensor import Tensor

TRUNCATION_VOXELS = 3
OCCLUSION_VOXELS = 2.0


@dataclass(frozen=True)
class GridConfig:
    """A voxel lattice: voxel ``v`` covers world ``[(origin+v)*s, (origin+v+1)*s)``."""

    extents: tuple
    voxel_size: float = 0.0469
    origin: tuple = (0, 0, 0)
    truncation_voxels: int = TRUNCATION_VOXELS

    def __post_init__(self):
        object.__setattr__(self, "extents", tuple(int(e) for e in self.extents))
        object.__setattr__(self, "origin", tuple(int(o) for o in self.origin))
        if self.voxel_size <= 0 or any(e <= 0 for e in self.extents):
            raise ValueError("grid needs positive extents and voxel size")

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.extents))

    def centers(self) -> np.ndarray:
        """World coordinates of every voxel center in row-major order, shape (N, 3)."""
        axes = [(np.arange(e) + o + 0.5) * self.voxel_size for e, o in zip(self.extents, self.origin)]
        g = np.meshgrid(*axes, indexing="ij")
        return np.stack([a.reshape(-1) for a in g], axis=1)

    def sub(self, lo, extents) -> "GridConfig":
        return replace(self, extents=tuple(extents), origin=tuple(int(o) + int(l) for o, l in zip(self.origin, lo)))


@dataclass
class TsdfVolume:
    values: np.ndarray  # normalized distances in [-1, 1]
    weights: np.ndarray
    voxel_size: float
    truncation_voxels: int = TRUNCATION_VOXELS
    origin: tuple = (0, 0, 0)

    @property
    def extents(self) -> tuple:
        return self.values.shape

    @property
    def observed(self) -> np.ndarray:
        return self.weights > 0

    def surface(self) -> np.ndarray:
        """Partial-scan surface occupancy: observed voxels inside the truncation band."""
        return self.observed & (np.abs(self.values) < 1.0)

    def network_input(self) -> np.ndarray:
        """Two channels: distance value and an observed flag."""
        return np.stack([self.values, self.observed.astype(float)])

    def crop(self, lo, extents) -> "TsdfVolume":
        sl = tuple(slice(l, l + e) for l, e in zip(lo, extents))
        return TsdfVolume(self.values[sl].copy(), self.weights[sl].copy(), self.voxel_size,
                          self.truncation_voxels, tuple(o + l for o, l in zip(self.origin, lo)))

    def pad_to(self, extents) -> "TsdfVolume":
        pad = [(0, e - s) for e, s in zip(extents, self.values.shape)]
        return TsdfVolume(np.pad(self.values, pad, constant_values=1.0), np.pad(self.weights, pad),
                          self.voxel_size, self.truncation_voxels, self.origin)


@dataclass
class Projection:
    """Per-voxel projection into one view."""

    px: np.ndarray
    py: np.ndarray
    z: np.ndarray
    valid: np.ndarray


def project_points(points: np.ndarray, view: CameraView, voxel_size: float,
                   tolerance: float = OCCLUSION_VOXELS) -> Projection:
    u, v, z = view.project(points)
    inimg = (z > 0) & (u >= 0) & (u < view.width) & (v >= 0) & (v < view.height)
    px = np.where(inimg, np.floor(np.where(inimg, u, 0)), 0).astype(np.int64)
    py = np.where(inimg, np.floor(np.where(inimg, v, 0)), 0).astype(np.int64)
    d = np.where(inimg, view.depth[py, px], 0.0)
    valid = inimg & (d > 0) & (np.abs(d - z) <= tolerance * voxel_size)
    return Projection(px, py, z, valid)


def project_voxels(grid: GridConfig, view: CameraView) -> Projection:
    return project_points(grid.centers(), view, grid.voxel_size)


def project_voxel(v, view: CameraView, grid: GridConfig) -> tuple[tuple[int, int], float, bool]:
    """Pixel ``(x, y)``, camera depth and validity for a single voxel index."""
    center = (np.asarray(v, dtype=float) + np.asarray(grid.origin) + 0.5) * grid.voxel_size
    p = project_points(center[None], view, grid.voxel_size)
    return (int(p.px[0]), int(p.py[0])), float(p.z[0]), bool(p.valid[0])


def fuse_tsdf(views: Sequence[CameraView], grid: GridConfig) -> TsdfVolume:
    """Weight-one averaging of truncated signed distances over views.

    Voxels further than one truncation band behind the observed surface
    are left untouched; never-updated voxels keep value +1 and weight 0.
    """
    if len(views) == 0:
        raise ValueError("fusion needs at least one view")
    pts = grid.centers()
    band = grid.truncation_voxels * grid.voxel_size
    total = np.zeros(grid.n_voxels)
    count = np.zeros(grid.n_voxels)
    for view in views:
        u, v, z = view.project(pts)
        inimg = (z > 0) & (u >= 0) & (u < view.width) & (v >= 0) & (v < view.height)
        idx = np.flatnonzero(inimg)
        d = view.depth[np.floor(v[idx]).astype(np.int64), np.floor(u[idx]).astype(np.int64)]
        sdf = (d - z[idx]) / band
        keep = (d > 0) & (sdf >= -1.0)
        idx, sdf = idx[keep], sdf[keep]
        total[idx] += np.minimum(sdf, 1.0)
        count[idx] += 1.0
    values = np.ones(grid.n_voxels)
    seen = count > 0
    values[seen] = total[seen] / count[seen]
    return TsdfVolume(values.reshape(grid.extents), count.reshape(grid.extents), grid.voxel_size,
                      grid.truncation_voxels, grid.origin)


def zero_crossings(vol: TsdfVolume) -> np.ndarray:
    """Observed voxels whose sign differs from an observed 6-neighbor."""
    pos = vol.values >= 0
    obs = vol.observed
    out = np.zeros_like(obs)
    for ax in range(3):
        n = vol.values.shape[ax]
        a = [slice(None)] * 3
        b = [slice(None)] * 3
        a[ax], b[ax] = slice(0, n - 1), slice(1, n)
        a, b = tuple(a), tuple(b)
        flip = obs[a] & obs[b] & (pos[a] != pos[b])
        out[a] |= flip
        out[b] |= flip
    return out


def dilate(mask: np.ndarray, radius: int = 1, full: bool = False) -> np.ndarray:
    """Binary dilation by the 6-neighborhood (or the 26-neighborhood with ``full``)."""
    out = mask.copy()
    for _ in range(radius):
        cur = out.copy()
        if full:
            p = np.pad(cur, 1)
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    for dz in (-1, 0, 1):
                        out |= p[1 + dx:p.shape[0] - 1 + dx, 1 + dy:p.shape[1] - 1 + dy, 1 + dz:p.shape[2] - 1 + dz]
        else:
            for ax in range(mask.ndim):
                n = mask.shape[ax]
                a = [slice(None)] * mask.ndim
                b = [slice(None)] * mask.ndim
                a[ax], b[ax] = slice(0, n - 1), slice(1, n)
                out[tuple(a)] |= cur[tuple(b)]
                out[tuple(b)] |= cur[tuple(a)]
    return out


# ----------------------------------------------------------------------------
# feature back-projection


@dataclass
class FeatureVolume:
    features: Tensor  # [C, X, Y, Z]
    view_count: np.ndarray = field(repr=False)


def feature_stride(view: CameraView, fmap_shape) -> int:
    h, w = fmap_shape
    if view.height % h or view.width % w or view.height // h != view.width // w:
        raise ValueError(f"feature map {h}x{w} does not evenly divide image {view.height}x{view.width}")
    return view.height // h


def backproject_features(features: Sequence[Tensor], views: Sequence[CameraView], grid: GridConfig,
                         pool: str = "max") -> FeatureVolume:
    """Assign every voxel the 2D feature at its projected pixel, pooled over views.

    Sampling is nearest-neighbor at the feature stride. Max pooling keeps
    the earliest view on ties and routes gradients to that source only.
    """
    if len(features) != len(views):
        raise ValueError("one feature map per view is required")
    if pool not in ("max", "mean"):
        raise ValueError(f"unknown pool mode {pool!r}")
    pts = grid.centers()
    N = grid.n_voxels
    C = features[0].shape[0]
    sources = []
    for f, view in zip(features, views):
        if f.data.ndim != 3 or f.shape[0] != C:
            raise T.ShapeError(f"feature map shape {f.shape} inconsistent with {C} channels")
        s = feature_stride(view, f.shape[1:])
        p = project_points(pts, view, grid.voxel_size)
        vox = np.flatnonzero(p.valid)
        src = (p.py[vox] // s) * f.shape[2] + p.px[vox] // s
        sources.append((vox, src))
    count = np.zeros(N)
    for vox, _ in sources:
        count[vox] += 1
    if pool == "max":
        out = np.full((C, N), -np.inf)
        arg = np.full((C, N), -1, dtype=np.int64)
        for k, (f, (vox, src)) in enumerate(zip(features, sources)):
            vals = f.data.reshape(C, -1)[:, src]
            better = vals > out[:, vox]
            out[:, vox] = np.where(better, vals, out[:, vox])
            arg[:, vox] = np.where(better, k, arg[:, vox])
        out[:, count == 0] = 0.0
    else:
        out = np.zeros((C, N))
        for f, (vox, src) in zip(features, sources):
            out[:, vox] += f.data.reshape(C, -1)[:, src]
        seen = count > 0
        out[:, seen] /= count[seen]

    def bw(g):
        g = g.reshape(C, N)
        grads = []
        for k, (f, (vox, src)) in enumerate(zip(features, sources)):
            hw = f.shape[1] * f.shape[2]
            if pool == "max":
                contrib = np.where(arg[:, vox] == k, g[:, vox], 0.0)
            else:
                contrib = g[:, vox] / count[vox]
            gk = np.stack([np.bincount(src, weights=contrib[c], minlength=hw) for c in range(C)])
            grads.append(gk.reshape(f.shape))
        return grads

    vol = T._record("backproject", out.reshape((C,) + grid.extents), tuple(features), bw)
    return FeatureVolume(vol, count.reshape(grid.extents))


# ----------------------------------------------------------------------------
# RVNV volume files

_VOLUME_MAGIC = b"RVNV"
_VOLUME_VERSION = 1


def save_volume(path, vol: TsdfVolume) -> None:
    with open(path, "wb") as fh:
        w = Writer(fh)
        fh.write(_VOLUME_MAGIC)
        w.u32(_VOLUME_VERSION)
        w.u32(*vol.extents)
        w.f64(vol.voxel_size)
        w.u32(vol.truncation_voxels)
        w.array(vol.values, "<f4")
        w.array(vol.weights, "<f4")


def load_volume(path) -> TsdfVolume:
    with open(path, "rb") as fh:
        r = Reader(fh)
        r.magic(_VOLUME_MAGIC)
        version = r.u32()
        if version != _VOLUME_VERSION:
            raise ValueError(f"unsupported volume version {version}")
        ext = r.u32(3)
        voxel = r.f64()
        trunc = r.u32()
        n = int(np.prod(ext))
        values = r.array(n, "<f4").astype(np.float64).reshape(ext)
        weights = r.array(n, "<f4").astype(np.float64).reshape(ext)
    return TsdfVolume(values, weights, voxel, trunc)
