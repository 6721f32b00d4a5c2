"""Procedural desk-scale scenes: primitive objects in a walled room, ray-cast RGB-D views, training chunks."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .camera import CameraView, look_at
from .codec import Reader, Writer, rle_decode, rle_encode
from .detection import Box3
from .fusion import GridConfig, dilate, project_points

SHAPES = ("box", "cylinder", "lshape", "table")

EMPTY, SHELL = 0, 1  # label grid codes; instance i is stored as 2 + i


@dataclass
class SceneConfig:
    seed: int = 0
    extents: tuple = (64, 32, 64)
    voxel_size: float = 0.0469
    n_objects: tuple = (2, 5)
    n_classes: int = 4
    wall_thickness: int = 1
    max_object_size: int = 10
    image_width: int = 64
    image_height: int = 48
    focal: float = 44.0
    n_views: int = 12
    depth_noise: float = 0.0  # meters; 0 keeps rendering exact

    def __post_init__(self):
        self.extents = tuple(int(e) for e in self.extents)
        self.n_objects = tuple(int(n) for n in self.n_objects)
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if len(self.extents) != 3 or min(self.extents) < 32:
            raise ValueError("grid extents must be at least 32 per axis")
        if not 0 <= self.n_objects[0] <= self.n_objects[1]:
            raise ValueError("object count range must be ordered and nonnegative")

    def grid(self) -> GridConfig:
        return GridConfig(self.extents, self.voxel_size)


@dataclass
class InstanceGT:
    box: Box3  # voxel units, lattice aligned
    mask: np.ndarray  # bool over the box lattice extent
    class_id: int

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        lo, hi = self.lattice
        if self.mask.shape != tuple(h - l for l, h in zip(lo, hi)):
            raise ValueError(f"mask shape {self.mask.shape} does not match box lattice {lo}..{hi}")
        if not self.mask.any():
            raise ValueError("instance mask is empty")

    @property
    def lattice(self) -> tuple[tuple, tuple]:
        return self.box.lattice()

    def paint(self, extents) -> np.ndarray:
        """The complete mask placed in a grid of the given extents (clipped)."""
        out = np.zeros(extents, dtype=bool)
        lo, hi = self.lattice
        src, dst = _overlap(lo, hi, (0, 0, 0), extents)
        if src is not None:
            out[dst] = self.mask[src]
        return out


def _overlap(lo, hi, glo, ghi):
    """Slices mapping a box lattice [lo, hi) onto a grid window [glo, ghi)."""
    a = np.maximum(lo, glo)
    b = np.minimum(hi, ghi)
    if np.any(b <= a):
        return None, None
    src = tuple(slice(int(x - l), int(y - l)) for x, y, l in zip(a, b, lo))
    dst = tuple(slice(int(x - g), int(y - g)) for x, y, g in zip(a, b, glo))
    return src, dst


@dataclass
class Scene:
    config: SceneConfig
    instances: list
    labels: np.ndarray  # int16: 0 empty, 1 room shell, 2+i instance i
    views: list = field(default_factory=list)
    name: str = ""

    @property
    def voxel_size(self) -> float:
        return self.config.voxel_size

    @property
    def extents(self) -> tuple:
        return self.labels.shape

    @property
    def occupancy(self) -> np.ndarray:
        return self.labels > EMPTY

    @property
    def world_from_grid(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] *= self.voxel_size
        return m

    def grid(self) -> GridConfig:
        return GridConfig(self.extents, self.voxel_size)

    def instance_union(self) -> np.ndarray:
        return self.labels >= 2


# ----------------------------------------------------------------------------
# shapes


def _shape_mask(kind: str, rng: np.random.Generator, max_size: int) -> np.ndarray:
    hi = max(max_size, 5)
    if kind == "box":
        w, d = rng.integers(4, hi, endpoint=True, size=2)
        h = rng.integers(3, hi - 1, endpoint=True)
        return np.ones((w, h, d), dtype=bool)
    if kind == "cylinder":
        D = int(rng.integers(5, hi, endpoint=True))
        h = int(rng.integers(4, hi, endpoint=True))
        c = (np.arange(D) + 0.5 - D / 2) ** 2
        disk = (c[:, None] + c[None, :]) <= (D / 2) ** 2
        return np.repeat(disk[:, None, :], h, axis=1)
    if kind == "lshape":
        w = int(rng.integers(5, hi, endpoint=True))
        d = int(rng.integers(4, hi - 1, endpoint=True))
        h = int(rng.integers(6, hi, endpoint=True))
        base = int(rng.integers(2, h // 2, endpoint=True))
        back = int(rng.integers(2, w // 2, endpoint=True))
        x = np.arange(w)[:, None, None]
        y = np.arange(h)[None, :, None]
        m = np.broadcast_to((y < base) | (x < back), (w, h, d)).copy()
        return np.rot90(m, k=int(rng.integers(4)), axes=(0, 2)).copy()
    if kind == "table":
        w, d = rng.integers(6, hi, endpoint=True, size=2)
        h = int(rng.integers(5, hi - 1, endpoint=True))
        m = np.zeros((w, h, d), dtype=bool)
        m[:, h - 1, :] = True
        for x in (0, w - 1):
            for z in (0, d - 1):
                m[x, :, z] = True
        return m
    raise ValueError(f"unknown shape {kind!r}")


def _room_shell(extents, t: int) -> np.ndarray:
    shell = np.zeros(extents, dtype=bool)
    shell[:, :t, :] = True
    shell[:t], shell[-t:] = True, True
    shell[:, :, :t], shell[:, :, -t:] = True, True
    return shell


def generate_scene(config: SceneConfig) -> Scene:
    """Place non-touching primitives on the floor of a walled room.

    Objects keep a one-voxel gap; a placement that fails after a bounded
    number of tries is dropped, so the scene may hold fewer objects.
    """
    rng = np.random.default_rng(config.seed)
    X, Y, Z = config.extents
    t = config.wall_thickness
    labels = np.zeros(config.extents, dtype=np.int16)
    labels[_room_shell(config.extents, t)] = SHELL
    lo_n, hi_n = config.n_objects
    n = int(rng.integers(lo_n, hi_n, endpoint=True))
    footprint = np.zeros((X, Z), dtype=bool)
    instances = []
    for _ in range(n):
        cls = int(rng.integers(config.n_classes))
        mask = _shape_mask(SHAPES[cls % len(SHAPES)], rng, config.max_object_size)
        w, h, d = mask.shape
        for _attempt in range(50):
            x0 = int(rng.integers(t + 1, X - t - 1 - w, endpoint=True))
            z0 = int(rng.integers(t + 1, Z - t - 1 - d, endpoint=True))
            if not footprint[x0 - 1:x0 + w + 1, z0 - 1:z0 + d + 1].any():
                break
        else:
            continue
        footprint[x0:x0 + w, z0:z0 + d] |= mask.any(axis=1)
        lo = np.array([x0, t, z0])
        box = Box3.from_bounds(lo, lo + mask.shape)
        region = labels[x0:x0 + w, t:t + h, z0:z0 + d]
        region[mask] = 2 + len(instances)
        instances.append(InstanceGT(box, mask, cls))
    return Scene(config, instances, labels, name=f"scene_{config.seed}")


# ----------------------------------------------------------------------------
# rendering

_SHELL_ALBEDO = np.array([0.7, 0.7, 0.68])
_CLASS_ALBEDO = np.array([
    [0.85, 0.25, 0.2], [0.2, 0.6, 0.9], [0.25, 0.8, 0.3], [0.9, 0.75, 0.2],
    [0.7, 0.3, 0.8], [0.3, 0.8, 0.8], [0.9, 0.5, 0.6], [0.5, 0.4, 0.2],
])


def albedo_table(scene: Scene) -> np.ndarray:
    """Albedo per label code."""
    rows = [np.zeros(3), _SHELL_ALBEDO]
    rows += [_CLASS_ALBEDO[inst.class_id % len(_CLASS_ALBEDO)] for inst in scene.instances]
    return np.array(rows)


def raycast(occupancy: np.ndarray, origin_vox: np.ndarray, dirs_vox: np.ndarray, t_max: float = np.inf):
    """First occupied voxel along each ray ``origin + t * dir`` (voxel units).

    Returns hit parameter ``t`` (inf for a miss), the hit voxel index and the
    axis of the face that was entered.
    """
    n = len(dirs_vox)
    ext = np.array(occupancy.shape, dtype=float)
    o = np.broadcast_to(np.asarray(origin_vox, dtype=float), (n, 3))
    d = np.asarray(dirs_vox, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = np.where(d != 0, (0.0 - o) * inv, -np.inf)
        t1 = np.where(d != 0, (ext - o) * inv, np.inf)
    inside_axis = (d == 0) & ((o < 0) | (o >= ext))
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    enter_axis = np.argmax(tmin, axis=1)
    t_enter = np.maximum(tmin.max(axis=1), 0.0)
    t_exit = np.minimum(tmax.min(axis=1), t_max)
    alive = (t_enter < t_exit) & ~inside_axis.any(axis=1)
    p = o + d * t_enter[:, None]
    vox = np.floor(p).astype(np.int64)
    # rays entering through a face land exactly on it; snap onto the inner side
    step = np.where(d > 0, 1, -1).astype(np.int64)
    for ax in range(3):
        on_far = (d[:, ax] < 0) & (p[:, ax] == np.floor(p[:, ax]))
        vox[on_far, ax] -= 1
    vox = np.clip(vox, 0, np.array(occupancy.shape) - 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        next_bound = np.where(d > 0, vox + 1, vox).astype(float)
        t_next = np.where(d != 0, (next_bound - o) * inv, np.inf)
        t_delta = np.where(d != 0, np.abs(inv), np.inf)
    hit_t = np.full(n, np.inf)
    hit_vox = np.zeros((n, 3), dtype=np.int64)
    axis = np.where(t_enter > 0, enter_axis, -1)
    active = np.flatnonzero(alive)
    shape = np.array(occupancy.shape)
    while active.size:
        v = vox[active]
        occ = occupancy[v[:, 0], v[:, 1], v[:, 2]]
        if occ.any():
            h = active[occ]
            hit_t[h] = t_enter[h]
            hit_vox[h] = vox[h]
        active = active[~occ]
        if not active.size:
            break
        tn = t_next[active]
        ax = np.argmin(tn, axis=1)
        r = np.arange(active.size)
        t_here = tn[r, ax]
        vox[active, ax] += step[active, ax]
        t_next[active, ax] += t_delta[active, ax]
        axis[active] = ax
        t_enter[active] = t_here
        v = vox[active]
        ok = np.all((v >= 0) & (v < shape), axis=1) & (t_here < t_exit[active])
        active = active[ok]
    return hit_t, hit_vox, axis


def render_view(scene: Scene, world_from_camera: np.ndarray, fx: float | None = None, fy: float | None = None,
                width: int | None = None, height: int | None = None,
                rng: np.random.Generator | None = None) -> CameraView:
    """Ray-cast depth (camera z, meters) and shaded color for one pose."""
    cfg = scene.config
    width = width or cfg.image_width
    height = height or cfg.image_height
    fx = fx or cfg.focal
    fy = fy or cfg.focal
    view = CameraView(fx, fy, width / 2.0, height / 2.0, world_from_camera,
                      np.zeros((height, width)), np.zeros((height, width, 3)))
    dc = view.pixel_directions().reshape(-1, 3)
    dw = dc @ view.rotation.T
    s = scene.voxel_size
    t, vox, axis = raycast(scene.occupancy, view.position / s, dw / s)
    hit = np.isfinite(t)
    depth = np.where(hit, t, 0.0)
    if cfg.depth_noise > 0 and rng is not None:
        depth = np.where(hit, np.maximum(depth + rng.normal(0, cfg.depth_noise, depth.shape), 0.0), 0.0)
    albedo = albedo_table(scene)
    code = scene.labels[vox[:, 0], vox[:, 1], vox[:, 2]]
    unit = dw / np.linalg.norm(dw, axis=1, keepdims=True)
    cosine = np.abs(unit[np.arange(len(unit)), np.clip(axis, 0, 2)])
    cosine = np.where(axis >= 0, cosine, 1.0)
    color = albedo[code] * (0.25 + 0.75 * cosine)[:, None]
    color[~hit] = 0.0
    return view.with_images(depth.reshape(height, width), np.clip(color, 0, 1).reshape(height, width, 3))


def _camera_pose(scene: Scene, rng: np.random.Generator) -> np.ndarray | None:
    X, Y, Z = scene.extents
    s = scene.voxel_size
    occ = scene.occupancy
    eye_v = np.array([rng.uniform(0.15, 0.85) * X, rng.uniform(0.6, 0.95) * Y, rng.uniform(0.15, 0.85) * Z])
    iv = np.floor(eye_v).astype(int)
    if dilate(occ[max(iv[0] - 1, 0):iv[0] + 2, max(iv[1] - 1, 0):iv[1] + 2, max(iv[2] - 1, 0):iv[2] + 2]).any():
        return None
    if scene.instances:
        inst = scene.instances[int(rng.integers(len(scene.instances)))]
        target = np.asarray(inst.box.center) + rng.uniform(-2, 2, 3)
    else:
        target = np.array([rng.uniform(0.3, 0.7) * X, 0.15 * Y, rng.uniform(0.3, 0.7) * Z])
    if np.linalg.norm(target - eye_v) < 4:
        return None
    return look_at(eye_v * s, target * s)


def render_views(scene: Scene, n_views: int, seed: int) -> list[CameraView]:
    """Render ``n_views`` poses from inside free space looking into the room."""
    if n_views < 1:
        raise ValueError("n_views must be at least 1")
    rng = np.random.default_rng([seed, scene.config.seed, 7919])
    X, Y, Z = scene.extents
    s = scene.voxel_size
    views = []
    for k in range(n_views):
        pose = None
        for _ in range(20):
            pose = _camera_pose(scene, rng)
            if pose is not None:
                break
        if pose is None:
            ang = 2 * np.pi * k / n_views
            center = np.array([X / 2, 0.15 * Y, Z / 2])
            eye = center + np.array([0.3 * X * np.cos(ang), 0.65 * Y, 0.3 * Z * np.sin(ang)])
            pose = look_at(eye * s, center * s)
        views.append(render_view(scene, pose, rng=rng))
    return views


# ----------------------------------------------------------------------------
# training chunks


@dataclass
class TrainingChunk:
    origin: tuple
    extents: tuple
    instances: list  # InstanceGT in chunk-local voxel coordinates, clipped to the chunk
    view_indices: list
    views: list


def object_surface(scene: Scene) -> np.ndarray:
    """Instance voxels with at least one empty 6-neighbor."""
    occ = scene.occupancy
    return scene.instance_union() & dilate(~occ)


def visible_voxels(scene: Scene, view: CameraView, voxels: np.ndarray) -> np.ndarray:
    """Boolean per voxel index row: projects into the image unoccluded."""
    if len(voxels) == 0:
        return np.zeros(0, dtype=bool)
    centers = (voxels + 0.5) * scene.voxel_size
    return project_points(centers, view, scene.voxel_size).valid


def greedy_views(coverage: Sequence[np.ndarray], max_views: int = 5, fill: bool = False) -> list[int]:
    """Repeatedly add the view with the largest count of not yet covered elements.

    Stops once no view adds coverage, unless ``fill`` is set, in which case the
    remaining views are appended in order until ``max_views`` are chosen.
    """
    if not coverage:
        return []
    covered = np.zeros_like(coverage[0], dtype=bool)
    chosen = []
    while len(chosen) < max_views:
        gains = [int((c & ~covered).sum()) if i not in chosen else -1 for i, c in enumerate(coverage)]
        best = int(np.argmax(gains))
        if gains[best] < 0 or (gains[best] == 0 and not fill):
            break
        chosen.append(best)
        covered |= coverage[best]
    return chosen


def chunk_instances(scene: Scene, origin, extents, threshold: float = 0.5) -> list:
    """Instances with at least ``threshold`` of their voxels in the window, clipped to local coordinates."""
    origin = np.asarray(origin)
    end = origin + np.asarray(extents)
    out = []
    for inst in scene.instances:
        lo, hi = inst.lattice
        src, dst = _overlap(np.asarray(lo), np.asarray(hi), origin, end)
        if src is None:
            continue
        inside = int(inst.mask[src].sum())
        if inside < threshold * int(inst.mask.sum()):
            continue
        sub = inst.mask[src]
        nz = np.nonzero(sub)
        tlo = np.array([a.min() for a in nz])
        thi = np.array([a.max() + 1 for a in nz])
        sub = sub[tuple(slice(a, b) for a, b in zip(tlo, thi))]
        local_lo = np.array([d.start for d in dst]) + tlo
        out.append(InstanceGT(Box3.from_bounds(local_lo, local_lo + sub.shape), sub, inst.class_id))
    return out


def crop_chunk(scene: Scene, views: Sequence[CameraView], rng: np.random.Generator,
               extents=(32, 16, 32), max_views: int = 5, sampling: str = "uniform",
               fill_views: bool = False) -> TrainingChunk:
    """Random window, its instances (>= 50% inside) and greedily chosen views.

    ``sampling="uniform"`` draws the origin uniformly over all placements.
    ``"instances"`` redraws (up to 100 times) until the window holds at
    least one instance, which keeps short training budgets from spending
    most steps on empty floor.
    """
    extents = tuple(int(e) for e in extents)
    if any(e > s for e, s in zip(extents, scene.extents)):
        raise ValueError(f"scene {scene.extents} is smaller than chunk {extents}")
    if sampling not in ("uniform", "instances"):
        raise ValueError(f"unknown chunk sampling {sampling!r}")

    def draw():
        return tuple(int(rng.integers(0, s - e, endpoint=True)) for s, e in zip(scene.extents, extents))

    origin = draw()
    if sampling == "instances" and scene.instances:
        for _ in range(100):
            if chunk_instances(scene, origin, extents):
                break
            origin = draw()
    return chunk_at(scene, views, origin, extents, max_views, fill_views)


def chunk_at(scene: Scene, views: Sequence[CameraView], origin, extents, max_views: int = 5,
             fill_views: bool = False) -> TrainingChunk:
    origin = tuple(int(o) for o in origin)
    extents = tuple(int(e) for e in extents)
    sl = tuple(slice(o, o + e) for o, e in zip(origin, extents))
    surf = np.zeros(scene.extents, dtype=bool)
    surf[sl] = object_surface(scene)[sl]
    voxels = np.argwhere(surf)
    coverage = [visible_voxels(scene, v, voxels) for v in views]
    chosen = greedy_views(coverage, max_views, fill_views) if len(voxels) else []
    return TrainingChunk(origin, extents, chunk_instances(scene, origin, extents), chosen,
                         [views[i] for i in chosen])


# ----------------------------------------------------------------------------
# RVNS scene archives

_SCENE_MAGIC = b"RVNS"
_SCENE_VERSION = 1


def save_scene(path, scene: Scene) -> None:
    """Write the binary scene archive.

    After the view table come two trailing sections: the scene config as
    JSON and the run-length-encoded label grid (needed to recover the room
    shell, which is not an instance).
    """
    with open(path, "wb") as fh:
        w = Writer(fh)
        fh.write(_SCENE_MAGIC)
        w.u32(_SCENE_VERSION)
        w.f64(scene.voxel_size)
        w.u32(*scene.extents)
        w.u32(len(scene.instances))
        for inst in scene.instances:
            w.u32(inst.class_id)
            w.f64(*inst.box.as_array())
            runs = rle_encode(inst.mask)
            w.u32(len(runs))
            w.array(runs, "<u4")
        w.u32(len(scene.views))
        for v in scene.views:
            w.f64(*v.intrinsics)
            w.f64(*v.world_from_camera[:3].reshape(-1))
            w.u32(v.width, v.height)
            w.array(v.depth, "<f4")
            w.array(v.color, "<f4")
        cfg = asdict(scene.config)
        w.blob(json.dumps({"config": cfg, "name": scene.name}).encode("utf-8"))
        runs = rle_encode(scene.labels.reshape(-1) == SHELL)
        w.u32(len(runs))
        w.array(runs, "<u4")


def load_scene(path) -> Scene:
    with open(path, "rb") as fh:
        r = Reader(fh)
        r.magic(_SCENE_MAGIC)
        version = r.u32()
        if version != _SCENE_VERSION:
            raise ValueError(f"unsupported scene archive version {version}")
        voxel = r.f64()
        ext = r.u32(3)
        instances = []
        for _ in range(r.u32()):
            cls = r.u32()
            box = Box3.from_array(r.f64(6))
            lo, hi = box.lattice()
            shape = tuple(h - l for l, h in zip(lo, hi))
            runs = r.array(r.u32(), "<u4")
            instances.append(InstanceGT(box, rle_decode(runs, int(np.prod(shape))).reshape(shape), cls))
        views = []
        for _ in range(r.u32()):
            fx, fy, cx, cy = r.f64(4)
            M = np.eye(4)
            M[:3] = np.array(r.f64(12)).reshape(3, 4)
            W, H = r.u32(2)
            depth = r.array(W * H, "<f4").astype(np.float64).reshape(H, W)
            color = r.array(W * H * 3, "<f4").astype(np.float64).reshape(H, W, 3)
            views.append(CameraView(fx, fy, cx, cy, _orthonormalize(M), depth, color))
        meta = json.loads(r.blob().decode("utf-8"))
        shell = rle_decode(r.array(r.u32(), "<u4"), int(np.prod(ext))).reshape(ext)
    cfg = SceneConfig(**meta["config"])
    cfg.voxel_size = voxel
    labels = np.where(shell, SHELL, EMPTY).astype(np.int16)
    for i, inst in enumerate(instances):
        lo, hi = inst.lattice
        region = labels[tuple(slice(l, h) for l, h in zip(lo, hi))]
        region[inst.mask] = 2 + i
    return Scene(cfg, instances, labels, views, meta.get("name", ""))


def _orthonormalize(M: np.ndarray) -> np.ndarray:
    # rotations are stored as f64 so this is a no-op up to roundoff
    u, _, vt = np.linalg.svd(M[:3, :3])
    out = M.copy()
    out[:3, :3] = u @ vt
    return out
