"""Pinhole camera, 2.5D root lifting, frustum culling and feature sampling.

Pixel coordinates put pixel centres on integers, so a ``w``-wide crop spans
``[-0.5, w - 0.5]`` and pixel ``k`` is sampled exactly at ``u = k``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InvalidDepth, PointBehindCamera

MIN_DEPTH = 1e-9


@dataclass(frozen=True, eq=False)
class Camera:
    """Crop-adjusted pinhole camera.

    ``R`` and ``t`` map scene coordinates to camera coordinates:
    ``p_cam = R @ p_scene + t``. ``w`` is the side of the square crop.
    """

    f: float
    cx: float
    cy: float
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    w: float = 224.0

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if not self.f > 0 or not self.w > 0:
            raise ConfigError(f"camera needs f > 0 and w > 0, got f={self.f}, w={self.w}")
        if np.abs(R.T @ R - np.eye(3)).max() >= 1e-9 or np.linalg.det(R) < 0:
            raise ConfigError("camera rotation must be orthonormal with det +1")

    def __eq__(self, other):
        if not isinstance(other, Camera):
            return NotImplemented
        return (
            (self.f, self.cx, self.cy, self.w) == (other.f, other.cx, other.cy, other.w)
            and np.array_equal(self.R, other.R)
            and np.array_equal(self.t, other.t)
        )

    @property
    def center(self) -> np.ndarray:
        """Camera centre in scene coordinates."""
        return -self.R.T @ self.t

    @property
    def optical_axis(self) -> np.ndarray:
        """Camera +z axis expressed in scene coordinates."""
        return self.R[2].copy()

    def to_camera(self, p):
        return np.asarray(p, dtype=np.float64) @ self.R.T + self.t

    def to_scene(self, p):
        return (np.asarray(p, dtype=np.float64) - self.t) @ self.R

    def rigid(self, R_s, t_s) -> "Camera":
        """Camera seeing the same image after the scene moves by ``x -> R_s x + t_s``."""
        R_s = np.asarray(R_s, dtype=np.float64)
        R_new = self.R @ R_s.T
        return Camera(self.f, self.cx, self.cy, R_new, self.t - R_new @ np.asarray(t_s), self.w)

    def to_dict(self) -> dict:
        return {
            "f": float(self.f),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "w": float(self.w),
            "R": [float(x) for x in self.R.ravel()],
            "t": [float(x) for x in self.t],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        try:
            return cls(
                f=float(d["f"]),
                cx=float(d["cx"]),
                cy=float(d["cy"]),
                R=np.array(d["R"], dtype=np.float64).reshape(3, 3),
                t=np.array(d["t"], dtype=np.float64),
                w=float(d["w"]),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"malformed camera record: {exc}") from exc

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "Camera":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Root3D:
    """Root position in camera coordinates (metres)."""

    X: float
    Y: float
    Z: float
    provenance: str = "initial"  # initial | refined | ground-truth

    @property
    def xyz(self) -> np.ndarray:
        return np.array([self.X, self.Y, self.Z])

    @classmethod
    def from_xyz(cls, xyz, provenance="initial") -> "Root3D":
        x, y, z = (float(v) for v in np.asarray(xyz, dtype=np.float64).reshape(3))
        return cls(x, y, z, provenance)

    def in_scene(self, camera: Camera) -> np.ndarray:
        return camera.to_scene(self.xyz)


def crop_camera(f, cx, cy, R, t, bbox, w=224) -> Camera:
    """Intrinsics of a square crop ``bbox = (x0, y0, side)`` resized to ``w``.

    Scale then shift, keeping pixel centres consistent with the integer
    convention used throughout.
    """
    x0, y0, side = (float(v) for v in bbox)
    if side <= 0:
        raise ConfigError("bounding box side must be positive")
    s = w / side
    return Camera(
        f=f * s,
        cx=(cx - x0 + 0.5) * s - 0.5,
        cy=(cy - y0 + 0.5) * s - 0.5,
        R=R,
        t=t,
        w=float(w),
    )


def square_bbox(uv, margin=1.2):
    """Square box ``(x0, y0, side)`` around 2D points, enlarged by ``margin``."""
    uv = np.asarray(uv, dtype=np.float64)
    lo, hi = uv.min(axis=0), uv.max(axis=0)
    c = 0.5 * (lo + hi)
    side = float(max(hi - lo) * margin)
    return c[0] - side / 2, c[1] - side / 2, side


def project(camera: Camera, p) -> np.ndarray:
    """Project scene point(s) to ``(u, v, depth)``; shape ``(..., 3)``."""
    pc = camera.to_camera(p)
    z = pc[..., 2]
    if np.any(z <= MIN_DEPTH):
        raise PointBehindCamera("point at or behind the camera plane")
    out = np.empty_like(pc)
    out[..., 0] = camera.f * pc[..., 0] / z + camera.cx
    out[..., 1] = camera.f * pc[..., 1] / z + camera.cy
    out[..., 2] = z
    return out


def project_camera_frame(camera: Camera, pc) -> np.ndarray:
    """Pixel coordinates of points already expressed in camera coordinates."""
    pc = np.asarray(pc, dtype=np.float64)
    z = pc[..., 2]
    if np.any(z <= MIN_DEPTH):
        raise PointBehindCamera("point at or behind the camera plane")
    return np.stack([camera.f * pc[..., 0] / z + camera.cx, camera.f * pc[..., 1] / z + camera.cy], axis=-1)


def normalized_depth(camera: Camera, Z):
    """Inverse of the depth lifting: ``Z * w / f``."""
    return Z * camera.w / camera.f


def lift_root(camera: Camera, x, y, z_norm, provenance="initial") -> Root3D:
    if not z_norm > 0:
        raise InvalidDepth(f"normalized depth must be positive, got {z_norm}")
    Z = z_norm * camera.f / camera.w
    X = (x - camera.cx) / camera.f * Z
    Y = (y - camera.cy) / camera.f * Z
    return Root3D(float(X), float(Y), float(Z), provenance)


def frustum_select(camera: Camera, points) -> np.ndarray:
    """Indices of points in front of the camera that land inside the crop."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return np.zeros(0, dtype=np.int64)
    pc = camera.to_camera(pts)
    z = pc[:, 2]
    ok = z > MIN_DEPTH
    zs = np.where(ok, z, 1.0)
    u = camera.f * pc[:, 0] / zs + camera.cx
    v = camera.f * pc[:, 1] / zs + camera.cy
    ok &= (u >= 0) & (u < camera.w) & (v >= 0) & (v < camera.w)
    return np.flatnonzero(ok)


def bilinear_sample(fmap, u, v) -> np.ndarray:
    """Bilinear lookup in an ``H x W x C`` map, clamping to the border.

    ``u`` indexes columns and ``v`` rows. Scalars give a ``C`` vector,
    arrays of shape ``S`` give ``S + (C,)``.
    """
    fmap = np.asarray(fmap, dtype=np.float64)
    if fmap.ndim == 2:
        fmap = fmap[..., None]
    H, W = fmap.shape[:2]
    u = np.clip(np.asarray(u, dtype=np.float64), 0.0, W - 1)
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, H - 1)
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    a = (u - u0)[..., None]
    b = (v - v0)[..., None]
    return (
        fmap[v0, u0] * (1 - a) * (1 - b)
        + fmap[v0, u1] * a * (1 - b)
        + fmap[v1, u0] * (1 - a) * b
        + fmap[v1, u1] * a * b
    )


def cell_to_crop(idx, stride):
    """Centre of heatmap cell ``idx`` in crop pixel coordinates."""
    return stride * np.asarray(idx, dtype=np.float64) + (stride - 1) / 2.0


def crop_to_cell(u, stride):
    return (np.asarray(u, dtype=np.float64) - (stride - 1) / 2.0) / stride


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """Scene->camera rotation and translation for a camera at ``eye`` facing ``target``.

    Camera axes follow the image convention: +x right, +y down, +z forward.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return R, -R @ eye
