"""Synthetic multi-view scenes with analytic depth.

Every pixel's depth comes from an exact ray-surface intersection and its
colour from a solid texture evaluated at the hit point, so ground truth is
exact up to floating point.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .geometry import ViewCamera
from .io import read_camera, read_dmap, read_kv, read_ply, read_ppm, write_camera, write_dmap, \
    write_kv, write_ply, write_ppm
from .numeric import DTYPE


class SceneError(ValueError):
    pass


GEOMETRIES = ("plane", "sphere", "step")


@dataclass(frozen=True)
class SceneSpec:
    geometry: str = "plane"
    height: int = 64
    width: int = 80
    n_views: int = 5
    focal: float = 80.0
    baseline: float = 1.6
    target_depth: float = 4.0
    tilt_deg: float = 20.0
    depth_range: tuple[float, float] = (2.0, 21.0)
    sphere_radius: float = 1.2
    step_offset: float = 0.8
    checker_size: float = 0.4
    noise_terms: int = 24
    noise_wavelengths: tuple[float, float] = (0.15, 0.6)
    noise_amp: float = 0.35

    def __post_init__(self):
        if self.geometry not in GEOMETRIES:
            raise SceneError(f"unknown geometry {self.geometry!r}; choose from {GEOMETRIES}")
        if self.height % 4 or self.width % 4:
            raise SceneError("resolution must be a multiple of 4")
        if self.n_views < 2:
            raise SceneError("need at least two views")


def spec_from_kv(values: dict[str, str]) -> SceneSpec:
    """Scene spec from parsed key=value text; unknown keys raise SceneError naming them."""
    known = {f.name for f in fields(SceneSpec)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise SceneError(f"unknown scene keys: {', '.join(unknown)}")
    base = SceneSpec()
    kwargs = {}
    for key, raw in values.items():
        default = getattr(base, key)
        try:
            if isinstance(default, str):
                kwargs[key] = raw
            elif isinstance(default, tuple):
                kwargs[key] = tuple(float(v) for v in raw.split(","))
            elif isinstance(default, int):
                kwargs[key] = int(raw)
            else:
                kwargs[key] = float(raw)
        except ValueError as exc:
            raise SceneError(f"bad value for {key}: {raw!r}") from exc
    return SceneSpec(**kwargs)


def look_at(center, target) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera (R, t) for a camera at ``center`` looking at ``target``; image y points along world +y."""
    center, target = np.asarray(center, float), np.asarray(target, float)
    z = target - center
    z /= np.linalg.norm(z)
    x = np.cross(np.array([0.0, 1.0, 0.0]), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return R, -R @ center


def make_rig(spec: SceneSpec) -> list[ViewCamera]:
    K = np.array([[spec.focal, 0, (spec.width - 1) / 2],
                  [0, spec.focal, (spec.height - 1) / 2],
                  [0, 0, 1.0]])
    target = np.array([0.0, 0.0, spec.target_depth])
    cams = [ViewCamera(K, np.eye(3), np.zeros(3), spec.depth_range)]
    n_src = spec.n_views - 1
    for k in range(n_src):
        a = 2 * np.pi * k / n_src
        c = spec.baseline * np.array([np.cos(a), np.sin(a), 0.0])
        R, t = look_at(c, target)
        cams.append(ViewCamera(K, R, t, spec.depth_range))
    return cams


# -- surfaces: intersect(origins, dirs) -> ray parameter t (inf on miss)

@dataclass
class Plane:
    normal: np.ndarray
    offset: float
    x_below: float | None = None  # keep only hits with X[0] < x_below

    def intersect(self, o, d):
        denom = d @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.offset - o @ self.normal) / denom
        t = np.where((np.abs(denom) > 1e-15) & (t > 1e-9), t, np.inf)
        if self.x_below is not None:
            hit_x = o[..., 0] + np.where(np.isfinite(t), t, 0) * d[..., 0]
            t = np.where(hit_x < self.x_below, t, np.inf)
        return t


@dataclass
class Sphere:
    center: np.ndarray
    radius: float

    def intersect(self, o, d):
        oc = o - self.center
        a = np.einsum("...i,...i->...", d, d)
        b = 2 * np.einsum("...i,...i->...", oc, d)
        c = np.einsum("...i,...i->...", oc, oc) - self.radius ** 2
        disc = b * b - 4 * a * c
        sq = np.sqrt(np.where(disc >= 0, disc, 0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        t = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
        return np.where(disc >= 0, t, np.inf)


def build_surfaces(spec: SceneSpec) -> list:
    zc = spec.target_depth
    if spec.geometry == "plane":
        a = np.deg2rad(spec.tilt_deg)
        n = np.array([np.sin(a), 0.0, np.cos(a)])
        return [Plane(n, float(n @ np.array([0, 0, zc])))]
    if spec.geometry == "sphere":
        return [Sphere(np.array([0.0, 0.0, zc]), spec.sphere_radius),
                Plane(np.array([0.0, 0.0, 1.0]), zc + 1.5 * spec.sphere_radius)]
    h = spec.step_offset / 2
    return [Plane(np.array([0.0, 0.0, 1.0]), zc + h),
            Plane(np.array([0.0, 0.0, 1.0]), zc - h, x_below=0.0)]


class SolidTexture:
    """Soft checker modulated by a sum of random 3D sinusoids; non-periodic at window scale."""

    def __init__(self, spec: SceneSpec, rng: np.random.Generator):
        n = spec.noise_terms
        dirs = rng.normal(size=(4, n, 3))
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        lo, hi = spec.noise_wavelengths
        wl = np.exp(rng.uniform(np.log(lo), np.log(hi), size=(4, n, 1)))
        self.freqs = dirs * (2 * np.pi / wl)
        self.phases = rng.uniform(0, 2 * np.pi, size=(4, n))
        self.checker = spec.checker_size
        self.amp = spec.noise_amp

    def noise(self, X, channel):
        s = np.sin(X @ self.freqs[channel].T + self.phases[channel])
        return s.sum(axis=-1) / np.sqrt(self.freqs.shape[1] / 2)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        k = np.pi / self.checker
        check = np.tanh(3 * np.sin(k * X[..., 0]) * np.sin(k * X[..., 1]) * np.cos(0.5 * k * X[..., 2]))
        mod = 0.6 + 0.4 * np.tanh(self.noise(X, 3))
        rgb = [0.5 + 0.25 * check * mod + 0.5 * self.amp * np.tanh(self.noise(X, c)) for c in range(3)]
        return np.clip(np.stack(rgb, axis=-1), 0.0, 1.0)


def pixel_rays(cam: ViewCamera, x, y):
    """Camera centre, world ray directions with unit camera-z component."""
    pix = np.stack([x, y, np.ones_like(x)], axis=-1)
    rays_cam = pix @ np.linalg.inv(cam.K).T
    return cam.center, rays_cam @ cam.R


def cast(surfaces, cam: ViewCamera, x, y):
    """Nearest hit along each pixel ray: (depth, world points); depth 0 on a miss."""
    o, d = pixel_rays(cam, np.asarray(x, float), np.asarray(y, float))
    o = np.broadcast_to(o, d.shape)
    t = np.full(d.shape[:-1], np.inf)
    for s in surfaces:
        t = np.minimum(t, s.intersect(o, d))
    hit = np.isfinite(t)
    tt = np.where(hit, t, 0.0)
    # the ray's camera-z component is 1, so the ray parameter is the depth
    return np.where(hit, tt, 0.0), o + tt[..., None] * d


@dataclass
class Scene:
    spec: SceneSpec
    cams: list[ViewCamera]
    images: np.ndarray   # (V, H, W, 3) in [0, 1]
    depths: np.ndarray   # (V, H, W); 0 = no surface
    gt_points: np.ndarray
    surfaces: list = field(repr=False, default_factory=list)

    def depth_sampler(self, view: int):
        """Exact depth at real pixel coordinates (torch in, torch out); 0 outside the image."""
        cam, H, W = self.cams[view], self.spec.height, self.spec.width

        def sample(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
            xn, yn = x.detach().numpy(), y.detach().numpy()
            inside = np.isfinite(xn) & np.isfinite(yn) & (xn >= 0) & (xn <= W - 1) & (yn >= 0) & (yn <= H - 1)
            d, _ = cast(self.surfaces, cam, np.where(inside, xn, 0), np.where(inside, yn, 0))
            return torch.as_tensor(np.where(inside, d, 0.0), dtype=DTYPE)
        return sample

    def covisibility(self, ref: int, src: int) -> np.ndarray:
        """Reference pixels whose surface point is the first hit seen from the source view."""
        H, W = self.spec.height, self.spec.width
        ys, xs = np.mgrid[0:H, 0:W].astype(float)
        depth, X = cast(self.surfaces, self.cams[ref], xs, ys)
        cam = self.cams[src]
        Xc = X @ cam.R.T + cam.t
        z = Xc[..., 2]
        ok = (depth > 0) & (z > 1e-9)
        uvw = Xc @ cam.K.T
        zz = np.where(ok, uvw[..., 2], 1.0)
        u, v = uvw[..., 0] / zz, uvw[..., 1] / zz
        ok &= (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
        d_src, _ = cast(self.surfaces, cam, np.where(ok, u, 0), np.where(ok, v, 0))
        return ok & (np.abs(d_src - z) <= 1e-9 * np.maximum(z, 1.0))

    def view_order(self, ref: int) -> list[int]:
        return [ref] + [v for v in range(len(self.cams)) if v != ref]

    def sample(self, ref: int = 0):
        """Tensors for one training/inference sample with ``ref`` as view 0."""
        order = self.view_order(ref)
        images = torch.as_tensor(self.images[order], dtype=DTYPE).permute(0, 3, 1, 2).contiguous()
        depths = torch.as_tensor(self.depths[order], dtype=DTYPE)
        return images, [self.cams[v] for v in order], depths


def generate(spec: SceneSpec = SceneSpec(), seed: int = 0) -> Scene:
    rng = np.random.default_rng(seed)
    surfaces = build_surfaces(spec)
    texture = SolidTexture(spec, rng)
    cams = make_rig(spec)
    H, W = spec.height, spec.width
    ys, xs = np.mgrid[0:H, 0:W].astype(float)
    images, depths, points = [], [], []
    for v, cam in enumerate(cams):
        depth, X = cast(surfaces, cam, xs, ys)
        hit = depth > 0
        if not hit.any():
            raise SceneError(f"view {v} sees no geometry")
        img = np.where(hit[..., None], texture(X), 0.0)
        images.append(img)
        depths.append(depth)
        points.append(X[hit])
    return Scene(spec, cams, np.stack(images), np.stack(depths), np.concatenate(points), surfaces)


def view_name(v: int) -> str:
    return f"{v:08d}"


def save_scene(scene: Scene, out) -> None:
    """images/*.ppm, cams/*_cam.txt, depths/*.dmap, gt.ply and scene.cfg under ``out``."""
    out = Path(out)
    for sub in ("images", "cams", "depths"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for v, cam in enumerate(scene.cams):
        write_ppm(out / "images" / f"{view_name(v)}.ppm", scene.images[v])
        write_camera(out / "cams" / f"{view_name(v)}_cam.txt", cam)
        write_dmap(out / "depths" / f"{view_name(v)}.dmap", scene.depths[v])
    write_ply(out / "gt.ply", scene.gt_points)
    write_kv(out / "scene.cfg", {f.name: getattr(scene.spec, f.name) for f in fields(scene.spec)})


def load_scene(path) -> Scene:
    """Read a directory written by ``save_scene``. Images come back 8-bit quantised,
    depths float32-rounded; there is no analytic geometry attached."""
    path = Path(path)
    spec = spec_from_kv(read_kv(path / "scene.cfg"))
    cams, images, depths = [], [], []
    for v in range(spec.n_views):
        cams.append(read_camera(path / "cams" / f"{view_name(v)}_cam.txt"))
        images.append(read_ppm(path / "images" / f"{view_name(v)}.ppm"))
        depths.append(read_dmap(path / "depths" / f"{view_name(v)}.dmap"))
    return Scene(spec, cams, np.stack(images), np.stack(depths), read_ply(path / "gt.ply"))
