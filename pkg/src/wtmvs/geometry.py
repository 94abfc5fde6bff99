"""Pinhole cameras, plane-sweep warping, epipolar lines and reprojection errors.

Conventions: world-to-camera ``X_cam = R X + t``; pixel ``(x, y)`` is
(column, row) with pixel centres on integer coordinates; depth is the
camera-frame z coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
import torch

from .numeric import DTYPE, bilinear_sample, nearest_sample


class CameraError(ValueError):
    pass


class BehindCameraError(ValueError):
    pass


class DegenerateEpipoleError(ValueError):
    pass


@dataclass(frozen=True)
class ViewCamera:
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    depth_range: tuple[float, float]

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "depth_range", (float(self.depth_range[0]), float(self.depth_range[1])))
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1) > 1e-9:
            raise CameraError("R must be a rotation (orthonormal, det +1)")
        if np.abs(np.tril(K, -1)).max() > 0 or K[0, 0] <= 0 or K[1, 1] <= 0 or K[2, 2] != 1:
            raise CameraError("K must be upper-triangular with positive focal lengths and K[2,2]=1")
        d_min, d_max = self.depth_range
        if not 0 < d_min < d_max:
            raise CameraError(f"invalid depth range {self.depth_range}")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def P(self) -> np.ndarray:
        """3x4 projection matrix K [R | t]."""
        return self.K @ np.hstack([self.R, self.t[:, None]])

    @property
    def T(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def scaled(self, factor: float) -> "ViewCamera":
        """Camera for an image resampled so that new pixel i sits on old pixel i/factor."""
        S = np.diag([factor, factor, 1.0])
        return ViewCamera(S @ self.K, self.R, self.t, self.depth_range)

    def tensors(self):
        return (torch.as_tensor(self.K, dtype=DTYPE), torch.as_tensor(self.R, dtype=DTYPE),
                torch.as_tensor(self.t, dtype=DTYPE))


def relative_pose(ref: ViewCamera, src: ViewCamera) -> tuple[np.ndarray, np.ndarray]:
    """(R_rel, t_rel) with X_src = R_rel X_ref + t_rel in camera frames."""
    R_rel = src.R @ ref.R.T
    return R_rel, src.t - R_rel @ ref.t


def _to_tensor(a) -> torch.Tensor:
    return a.to(DTYPE) if torch.is_tensor(a) else torch.as_tensor(np.asarray(a, dtype=np.float64))


def project(cam: ViewCamera, X) -> tuple[torch.Tensor, torch.Tensor]:
    """World points (..., 3) to pixels (..., 2) and depths (...)."""
    X = _to_tensor(X)
    K, R, t = cam.tensors()
    Xc = X @ R.T + t
    z = Xc[..., 2]
    if bool((z <= 0).any()):
        raise BehindCameraError("point at or behind the camera plane")
    uvw = Xc @ K.T
    return uvw[..., :2] / uvw[..., 2:3], z


def backproject(cam: ViewCamera, pixel, depth) -> torch.Tensor:
    """Pixels (..., 2) at depths (...) to world points (..., 3)."""
    pixel, depth = _to_tensor(pixel), _to_tensor(depth)
    if bool((depth <= 0).any()):
        raise BehindCameraError("depth must be positive")
    K, R, t = cam.tensors()
    ones = torch.ones_like(pixel[..., :1])
    rays = torch.cat([pixel, ones], dim=-1) @ torch.linalg.inv(K).T
    Xc = rays * depth.unsqueeze(-1)
    return (Xc - t) @ R


def plane_sweep_homography(ref: ViewCamera, src: ViewCamera, d: float) -> np.ndarray:
    """Homography taking reference pixels to source pixels for the plane z_ref = d.

    For X_ref on that plane, n^T X_ref / d = 1 with n = (0, 0, 1), so
    X_src = (R_rel + t_rel n^T / d) X_ref.
    """
    R_rel, t_rel = relative_pose(ref, src)
    n = np.array([0.0, 0.0, 1.0])
    return src.K @ (R_rel + np.outer(t_rel, n) / d) @ np.linalg.inv(ref.K)


def _pixel_grid(h: int, w: int) -> tuple[torch.Tensor, torch.Tensor]:
    ys, xs = torch.meshgrid(torch.arange(h, dtype=DTYPE), torch.arange(w, dtype=DTYPE), indexing="ij")
    return xs, ys


def warp_grid(src_feature: torch.Tensor, H_matrix, out_shape: tuple[int, int] | None = None):
    """Resample ``src_feature`` (C, H, W) into the reference frame through a homography.

    Returns the warped grid and the in-bounds mask; out-of-bounds samples are zero.
    """
    h, w = out_shape if out_shape is not None else src_feature.shape[-2:]
    Hm = _to_tensor(H_matrix)
    xs, ys = _pixel_grid(h, w)
    p = torch.stack([xs, ys, torch.ones_like(xs)], dim=-1) @ Hm.T
    z = p[..., 2]
    ok = z > 0
    safe_z = torch.where(ok, z, torch.ones_like(z))
    out, mask = bilinear_sample(src_feature, p[..., 0] / safe_z, p[..., 1] / safe_z)
    mask = mask & ok
    return out * mask.to(out.dtype), mask


def warp_to_source(ref: ViewCamera, src: ViewCamera, depth: torch.Tensor):
    """Source-view pixel coordinates of every reference pixel at the given depths.

    ``depth`` has shape (..., H, W); returns (x_src, y_src, z_src) with the same shape.
    Equivalent to applying :func:`plane_sweep_homography` per depth, but also
    handles per-pixel depth hypotheses.
    """
    h, w = depth.shape[-2:]
    R_rel, t_rel = relative_pose(ref, src)
    M = torch.as_tensor(src.K @ R_rel @ np.linalg.inv(ref.K), dtype=DTYPE)
    b = torch.as_tensor(src.K @ t_rel, dtype=DTYPE)
    xs, ys = _pixel_grid(h, w)
    rot = torch.stack([M[r, 0] * xs + M[r, 1] * ys + M[r, 2] for r in range(3)])
    q = [rot[r] * depth + b[r] for r in range(3)]
    z = q[2]
    safe_z = torch.where(z > 1e-12, z, torch.ones_like(z))
    return q[0] / safe_z, q[1] / safe_z, z


def warp_features_at_depths(src_feature: torch.Tensor, ref: ViewCamera, src: ViewCamera,
                            depth: torch.Tensor):
    """Warp source features (C, H, W) onto reference pixels for hypotheses (D, h, w).

    Returns (C, D, h, w) features and a (D, h, w) in-bounds mask.
    """
    x, y, z = warp_to_source(ref, src, depth)
    out, mask = bilinear_sample(src_feature, x, y)
    mask = mask & (z > 1e-12)
    return out * mask.to(out.dtype), mask


def skew(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])


def fundamental_matrix(ref: ViewCamera, src: ViewCamera) -> np.ndarray:
    """F with l_src = F p_ref, F = K_s^-T [t]_x R K_r^-1."""
    R_rel, t_rel = relative_pose(ref, src)
    return np.linalg.inv(src.K).T @ skew(t_rel) @ R_rel @ np.linalg.inv(ref.K)


def epipolar_line(ref: ViewCamera, src: ViewCamera, p) -> np.ndarray:
    """Line (a, b, c), a^2 + b^2 = 1, in the source image for reference pixel ``p``."""
    if np.linalg.norm(ref.center - src.center) < 1e-12:
        raise DegenerateEpipoleError("camera centres coincide; epipolar geometry is undefined")
    line = fundamental_matrix(ref, src) @ np.array([p[0], p[1], 1.0])
    norm = np.hypot(line[0], line[1])
    if norm < 1e-15:
        raise DegenerateEpipoleError("reference pixel maps to the epipole")
    return line / norm


def _safe_norm2(dx: torch.Tensor, dy: torch.Tensor) -> torch.Tensor:
    # sqrt has an infinite slope at 0; pick the zero subgradient there instead
    r2 = dx * dx + dy * dy
    pos = r2 > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, r2, torch.ones_like(r2))), torch.zeros_like(r2))


def _snap_to_border(v: torch.Tensor, n: int, tol: float = 1e-9) -> torch.Tensor:
    c = v.clamp(0, n - 1)
    return torch.where((v - c).abs() < tol, c, v)


DepthSampler = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]
DepthSource = Union[torch.Tensor, DepthSampler]


def reprojection_errors(D0: torch.Tensor, D_src: DepthSource, ref: ViewCamera, src: ViewCamera,
                        src_sampling: str = "nearest"):
    """Forward-backward reprojection errors between a reference depth map and a source view.

    Each reference pixel p is lifted with D0(p), projected into the source view
    (p'), lifted again with the source depth found at p', and projected back
    into the reference view (p''). Returns:

    * ``xi_p`` = ||p - p''||_2 in pixels,
    * ``xi_d`` = |D0(p'') - D0(p)| / D0(p), with D0(p'') bilinearly sampled,
    * ``valid`` - False where D0(p) is not positive, any lookup leaves the
      image, a depth is non-positive or a point lands behind a camera.

    ``D_src`` is either a depth grid (H_s, W_s), sampled with ``src_sampling``
    ("nearest" or "bilinear"), or a callable ``(x, y) -> depth`` evaluated at
    the exact landing coordinates (0 meaning no surface).

    Note: the printed forward-backward formula multiplies by the source
    extrinsic inside the projection and divides by the ground-truth depth; the
    sequence implemented here (project, look up source depth, lift, reproject)
    is the geometric reading of it.
    """
    h, w = D0.shape
    xs, ys = _pixel_grid(h, w)
    valid = D0 > 0
    d0 = torch.where(valid, D0, torch.ones_like(D0))

    x1, y1, z1 = warp_to_source(ref, src, d0)
    valid = valid & (z1 > 1e-12)

    if callable(D_src):
        ds = D_src(x1, y1)
        inb = torch.isfinite(x1) & torch.isfinite(y1)
    else:
        sampler = nearest_sample if src_sampling == "nearest" else bilinear_sample
        ds, inb = sampler(D_src.unsqueeze(0), x1, y1)
        ds = ds[0]
        if src_sampling == "bilinear":
            # every contributing source pixel must carry a depth
            support, _ = bilinear_sample((D_src > 0).to(DTYPE).unsqueeze(0), x1, y1)
            inb = inb & (support[0] > 1 - 1e-9)
    valid = valid & inb & (ds > 0)
    ds = torch.where(valid, ds, torch.ones_like(ds))

    # lift p' with the source depth and carry it back into the reference frame
    K_s, R_s, t_s = src.tensors()
    K_r, R_r, t_r = ref.tensors()
    ray = torch.stack([x1, y1, torch.ones_like(x1)], dim=-1) @ torch.linalg.inv(K_s).T
    Xs = ray * ds.unsqueeze(-1)
    Xw = (Xs - t_s) @ R_s
    Xr = Xw @ R_r.T + t_r
    z2 = Xr[..., 2]
    valid = valid & (z2 > 1e-12)
    uvw = Xr @ K_r.T
    safe_z = torch.where(valid, uvw[..., 2], torch.ones_like(z2))
    x2 = uvw[..., 0] / safe_z
    y2 = uvw[..., 1] / safe_z

    xi_p = _safe_norm2(xs - x2, ys - y2)
    # a point that returns to the border column may overshoot it by rounding error only
    xb = _snap_to_border(torch.where(valid, x2, xs), w)
    yb = _snap_to_border(torch.where(valid, y2, ys), h)
    d_back, inb2 = bilinear_sample(D0.unsqueeze(0), xb, yb)
    support, _ = bilinear_sample((D0 > 0).to(DTYPE).unsqueeze(0), xb, yb)
    valid = valid & inb2 & (support[0] > 1 - 1e-9)
    xi_d = torch.abs(d_back[0] - d0) / d0

    zero = torch.zeros_like(xi_p)
    return torch.where(valid, xi_p, zero), torch.where(valid, xi_d, zero), valid
