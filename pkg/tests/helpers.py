"""Shared builders for the test suite."""

import numpy as np
from scipy.spatial.transform import Rotation

from wtmvs.geometry import ViewCamera


def random_camera(rng, focal=(60, 120), spread=0.4, depth_range=(1.0, 10.0)) -> ViewCamera:
    """A camera near the origin looking roughly down +z."""
    f = rng.uniform(*focal)
    K = np.array([[f, rng.uniform(-0.5, 0.5), rng.uniform(20, 40)],
                  [0, f * rng.uniform(0.9, 1.1), rng.uniform(15, 30)],
                  [0, 0, 1.0]])
    R = Rotation.from_rotvec(rng.normal(scale=0.15, size=3)).as_matrix()
    center = rng.normal(scale=spread, size=3)
    return ViewCamera(K, R, -R @ center, depth_range)


def camera_pair(rng):
    a, b = random_camera(rng), random_camera(rng)
    while np.linalg.norm(a.center - b.center) < 0.1:
        b = random_camera(rng)
    return a, b


def project_oracle(cam: ViewCamera, X):
    """Direct 3x4 matrix product and perspective division."""
    h = cam.P @ np.append(np.asarray(X, float), 1.0)
    return h[:2] / h[2], (cam.R @ X + cam.t)[2]


def backproject_oracle(cam: ViewCamera, p, d):
    Xc = d * np.linalg.solve(cam.K, np.array([p[0], p[1], 1.0]))
    return cam.R.T @ (Xc - cam.t)
