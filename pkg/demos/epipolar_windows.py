"""Show where reference windows land in each source view and how close they sit to the epipolar line.

    python demos/epipolar_windows.py
"""

import numpy as np
import torch

from wtmvs.geometry import epipolar_line
from wtmvs.numeric import DTYPE
from wtmvs.scenes import SceneSpec, generate
from wtmvs.wet import reference_windows, warp_window_centers

EXTENTS = (8, 10)


def main():
    scene = generate(SceneSpec(), 0)
    spec = scene.spec
    # stage-1 resolution and camera, with a constant coarse depth guess
    s = 0.25
    shape = (spec.height // 4, spec.width // 4)
    cams = [c.scaled(s) for c in scene.cams]
    coarse = torch.full(shape, spec.target_depth * 1.3, dtype=DTYPE)
    _, centers = reference_windows(shape, EXTENTS)
    print(f"{len(centers)} reference windows of {EXTENTS[0]}x{EXTENTS[1]} on a {shape[0]}x{shape[1]} grid")
    for v in range(1, len(cams)):
        src = warp_window_centers(cams[0], cams[v], coarse, EXTENTS)
        ok = src.in_bounds
        dist = [abs(epipolar_line(cams[0], cams[v], p) @ np.append(q, 1.0))
                for p, q in zip(centers[ok], src.centers[ok])]
        shift = np.abs(src.centers[ok] - centers[ok]).max(axis=0)
        print(f"view {v}: max shift (x, y) = ({shift[0]:.2f}, {shift[1]:.2f}) px, "
              f"max distance to epipolar line = {max(dist):.1e} px, "
              f"clamped windows = {int(src.clamped.sum())}/{len(src.clamped)}")


if __name__ == "__main__":
    main()
