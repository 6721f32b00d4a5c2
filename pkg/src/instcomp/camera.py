"""Pinhole cameras (OpenCV convention: x right, y down, z forward)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class CameraView:
    fx: float
    fy: float
    cx: float
    cy: float
    world_from_camera: np.ndarray  # 4x4 rigid transform
    depth: np.ndarray  # (H, W) meters, 0 marks invalid
    color: np.ndarray  # (H, W, 3) in [0, 1]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.world_from_camera = np.asarray(self.world_from_camera, dtype=float)
        self.depth = np.asarray(self.depth, dtype=float)
        self.color = np.asarray(self.color, dtype=float)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.world_from_camera.shape != (4, 4):
            raise ValueError("extrinsics must be a 4x4 matrix")
        R = self.world_from_camera[:3, :3]
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9:
            raise ValueError("extrinsic rotation is not orthonormal")
        if self.depth.ndim != 2 or self.color.shape != self.depth.shape + (3,):
            raise ValueError(f"image shape mismatch: depth {self.depth.shape}, color {self.color.shape}")
        if np.any(~np.isfinite(self.depth)) or np.any(self.depth < 0):
            raise ValueError("depth must be finite and nonnegative")

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy])

    @property
    def rotation(self) -> np.ndarray:
        return self.world_from_camera[:3, :3]

    @property
    def position(self) -> np.ndarray:
        return self.world_from_camera[:3, 3]

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        """World points (n, 3) to camera coordinates."""
        return (np.asarray(points, dtype=float) - self.position) @ self.rotation

    def to_world(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.position

    def project(self, points: np.ndarray):
        """Return continuous pixel coordinates (u, v) and camera depth z."""
        pc = self.to_camera(points)
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[:, 0] / z + self.cx
            v = self.fy * pc[:, 1] / z + self.cy
        return u, v, z

    def pixel_directions(self) -> np.ndarray:
        """Camera-frame rays with unit z through every pixel center, shape (H, W, 3)."""
        j, i = np.meshgrid(np.arange(self.height) + 0.5, np.arange(self.width) + 0.5, indexing="ij")
        return np.stack([(i - self.cx) / self.fx, (j - self.cy) / self.fy, np.ones_like(i)], axis=-1)

    def unproject(self) -> tuple[np.ndarray, np.ndarray]:
        """World points of all valid depth pixels and their (row, col) indices."""
        rows, cols = np.nonzero(self.depth > 0)
        d = self.pixel_directions()[rows, cols] * self.depth[rows, cols, None]
        return self.to_world(d), np.stack([rows, cols], axis=1)

    def with_images(self, depth: np.ndarray, color: np.ndarray) -> "CameraView":
        return CameraView(self.fx, self.fy, self.cx, self.cy, self.world_from_camera, depth, color, dict(self.meta))


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-from-camera transform for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=float)
    f = np.asarray(target, dtype=float) - eye
    n = np.linalg.norm(f)
    if n == 0:
        raise ValueError("eye and target coincide")
    f /= n
    up = np.asarray(up, dtype=float)
    if np.linalg.norm(np.cross(f, up)) < 1e-6:
        up = np.array([0.0, 0.0, 1.0])
    r = np.cross(f, up)
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    M = np.eye(4)
    M[:3, :3] = np.stack([r, d, f], axis=1)
    M[:3, 3] = eye
    return M


def blank_view(fx, fy, cx, cy, world_from_camera, width: int, height: int) -> CameraView:
    return CameraView(fx, fy, cx, cy, world_from_camera, np.zeros((height, width)), np.zeros((height, width, 3)))
