"""Front-view feature to bird's-eye-view translation.

Camera convention: x right, y down, z forward; the projective divisor is
the forward (depth) coordinate. The voxel grid's width axis is camera-x,
its depth axis camera-z, its height axis camera-y. A voxel projecting
outside the feature plane (or behind the camera) samples exactly 0 and
receives exactly 0 gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .params import ParameterStore
from .rng import Rng
from .tensor import Tensor, bilinear_sample, conv2d, gelu, reshape, transpose


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def to_dict(self, image_w: int, image_h: int) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "image_w": image_w, "image_h": image_h}

    @staticmethod
    def from_dict(d: dict) -> "CameraIntrinsics":
        return CameraIntrinsics(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"])


@dataclass(frozen=True)
class VoxelGridSpec:
    """Three strictly increasing 1-D grids in camera-space length units."""

    width_vals: tuple    # camera-x sample positions (m values)
    depth_vals: tuple    # camera-z sample positions (n values), all > 0
    height_vals: tuple   # camera-y sample positions (h values)

    def __post_init__(self):
        for name, vals in (("width", self.width_vals), ("depth", self.depth_vals),
                           ("height", self.height_vals)):
            arr = np.asarray(vals, dtype=np.float64)
            if arr.ndim != 1 or arr.size < 1:
                raise ConfigError(f"{name} grid must be a non-empty 1-D array")
            if arr.size > 1 and not np.all(np.diff(arr) > 0):
                raise ConfigError(f"{name} grid must be strictly increasing")
        if np.asarray(self.depth_vals).min() <= 0:
            raise ConfigError("depth grid values must be strictly positive")

    @property
    def m(self) -> int:
        return len(self.width_vals)

    @property
    def n(self) -> int:
        return len(self.depth_vals)

    @property
    def h(self) -> int:
        return len(self.height_vals)

    @staticmethod
    def regular(m: int, n: int, h: int, width=(-4.0, 4.0), depth=(0.5, 8.5),
                height=(-2.0, 2.0)) -> "VoxelGridSpec":
        return VoxelGridSpec(
            width_vals=tuple(np.linspace(width[0], width[1], m)),
            depth_vals=tuple(np.linspace(depth[0], depth[1], n)),
            height_vals=tuple(np.linspace(height[0], height[1], h)),
        )

    def centers(self) -> np.ndarray:
        """Voxel centers [m, n, h, 3] as camera (x, y, z) points."""
        x = np.asarray(self.width_vals)
        z = np.asarray(self.depth_vals)
        y = np.asarray(self.height_vals)
        gx, gz, gy = np.meshgrid(x, z, y, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)


def project_point(K: CameraIntrinsics, point) -> tuple[float, float] | None:
    """Pinhole projection of one camera-space (x, y, z) point to pixel
    coordinates; None when the point is at or behind the camera plane."""
    x, y, z = float(point[0]), float(point[1]), float(point[2])
    if z <= 0:
        return None
    return (K.fx * x / z + K.cx, K.fy * y / z + K.cy)


def project_points(K: CameraIntrinsics, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of [..., 3] points; invalid entries (depth <= 0)
    are flagged rather than raised."""
    z = pts[..., 2]
    valid = z > 0
    zs = np.where(valid, z, 1.0)
    u = K.fx * pts[..., 0] / zs + K.cx
    v = K.fy * pts[..., 1] / zs + K.cy
    return np.stack([u, v], axis=-1), valid


def unproject_point(K: CameraIntrinsics, u: float, v: float, depth: float) -> np.ndarray:
    """Inverse of project_point at a given depth."""
    return np.array([(u - K.cx) * depth / K.fx, (v - K.cy) * depth / K.fy, depth])


def volume_sample_points(K: CameraIntrinsics, grid: VoxelGridSpec,
                         image_size: tuple[int, int],
                         feat_size: tuple[int, int]) -> np.ndarray:
    """Feature-plane coordinates [m*n*h, 2] for every voxel center.

    Pixel coordinates are rescaled by feature/image size; voxels behind the
    camera are pushed far outside the sampling window so they read as 0.
    """
    W_img, H_img = image_size
    Wf, Hf = feat_size
    pts = grid.centers().reshape(-1, 3)
    uv, valid = project_points(K, pts)
    uv = uv * np.array([Wf / W_img, Hf / H_img])
    uv[~valid] = -1e9
    return uv


def build_volume(feat: Tensor, K: CameraIntrinsics, grid: VoxelGridSpec,
                 image_size: tuple[int, int]) -> Tensor:
    """Sample a front-view feature [c, Hf, Wf] at every voxel projection,
    producing the volume [c, m, n, h]. Differentiable w.r.t. feat."""
    c, Hf, Wf = feat.shape
    uv = volume_sample_points(K, grid, image_size, (Wf, Hf))
    sampled = bilinear_sample(feat, uv)  # [c, m*n*h]
    return reshape(sampled, (c, grid.m, grid.n, grid.h))


def build_volume_reference(feat: np.ndarray, K: CameraIntrinsics, grid: VoxelGridSpec,
                           image_size: tuple[int, int]) -> np.ndarray:
    """Scalar per-voxel loop oracle for build_volume (forward only)."""
    c, Hf, Wf = feat.shape
    W_img, H_img = image_size
    out = np.zeros((c, grid.m, grid.n, grid.h))
    for i, x in enumerate(grid.width_vals):
        for j, z in enumerate(grid.depth_vals):
            for k, y in enumerate(grid.height_vals):
                uv = project_point(K, (x, y, z))
                if uv is None:
                    continue
                u = uv[0] * Wf / W_img
                v = uv[1] * Hf / H_img
                u0, v0 = int(np.floor(u)), int(np.floor(v))
                du, dv = u - u0, v - v0
                acc = np.zeros(c)
                for (ui, vi, w) in ((u0, v0, (1 - du) * (1 - dv)),
                                    (u0 + 1, v0, du * (1 - dv)),
                                    (u0, v0 + 1, (1 - du) * dv),
                                    (u0 + 1, v0 + 1, du * dv)):
                    if 0 <= ui < Wf and 0 <= vi < Hf:
                        acc += feat[:, vi, ui] * w
                out[:, i, j, k] = acc
    return out


def volume_to_channels(vol: Tensor, h: int) -> Tensor:
    """Rearrange [c, m, n, h] (or [B, c, m, n, h]) to [(c*h), m, n]: output
    channel index is c_idx * h + height_idx."""
    if len(vol.shape) == 4:
        c, m, n, _ = vol.shape
        return reshape(transpose(vol, (0, 3, 1, 2)), (c * h, m, n))
    B, c, m, n, _ = vol.shape
    return reshape(transpose(vol, (0, 1, 4, 2, 3)), (B, c * h, m, n))


class BevCompressor:
    """Two 3x3 convs collapsing the height-expanded channels to bev channels."""

    def __init__(self, store: ParameterStore, prefix: str, in_channels: int,
                 hidden: int, out_channels: int, rng: Rng):
        self.w1 = store.parameter(f"{prefix}.conv1.weight", (hidden, in_channels, 3, 3),
                                  "fan_in_uniform", rng)
        self.b1 = store.parameter(f"{prefix}.conv1.bias", (hidden, 1, 1), "zeros", rng)
        self.w2 = store.parameter(f"{prefix}.conv2.weight", (out_channels, hidden, 3, 3),
                                  "fan_in_uniform", rng)
        self.b2 = store.parameter(f"{prefix}.conv2.bias", (out_channels, 1, 1), "zeros", rng)

    def __call__(self, x: Tensor) -> Tensor:
        """x: [B, c*h, m, n] -> [B, out_channels, m, n]."""
        y = gelu(conv2d(x, self.w1, stride=1, pad=1) + self.b1)
        return conv2d(y, self.w2, stride=1, pad=1) + self.b2


def compress_to_bev(vol: Tensor, compressor: BevCompressor) -> Tensor:
    """Full Eq.-style collapse: rearrange the volume then run the conv net.

    vol: [c, m, n, h] -> [c', m, n] (batch dim added/removed internally).
    """
    h = vol.shape[-1]
    stacked = volume_to_channels(vol, h)
    batched = reshape(stacked, (1,) + stacked.shape)
    out = compressor(batched)
    return reshape(out, out.shape[1:])
