"""On-disk formats: camera text files, DMAP depth maps, PPM images, ASCII PLY,
parameter checkpoints and flat key=value config files."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geometry import ViewCamera


class FormatError(ValueError):
    pass


def write_camera(path, cam: ViewCamera) -> None:
    lines = ["extrinsic"]
    lines += [" ".join(repr(float(v)) for v in row) for row in cam.T]
    lines += ["", "intrinsic"]
    lines += [" ".join(repr(float(v)) for v in row) for row in cam.K]
    lines += ["", "depth_range", f"{cam.depth_range[0]!r} {cam.depth_range[1]!r}", ""]
    Path(path).write_text("\n".join(lines))


def read_camera(path) -> ViewCamera:
    sections: dict[str, list[float]] = {}
    current = None
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line:
            continue
        if line in ("extrinsic", "intrinsic", "depth_range"):
            current = line
            sections[current] = []
            continue
        if current is None:
            raise FormatError(f"{path}: values before any section header")
        sections[current] += [float(v) for v in line.split()]
    try:
        T = np.array(sections["extrinsic"]).reshape(4, 4)
        K = np.array(sections["intrinsic"]).reshape(3, 3)
        d_min, d_max = sections["depth_range"][:2]
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: malformed camera file ({exc})") from exc
    return ViewCamera(K, T[:3, :3], T[:3, 3], (d_min, d_max))


def write_dmap(path, depth: np.ndarray, scale: float = 1.0) -> None:
    """``DMAP H W scale`` header line, then little-endian float32 values (depth = value * scale)."""
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    body = (depth / scale).astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(f"DMAP {h} {w} {scale!r}\n".encode("ascii"))
        f.write(body)


def read_dmap(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").split()
        if len(header) != 4 or header[0] != "DMAP":
            raise FormatError(f"{path}: not a DMAP file")
        h, w, scale = int(header[1]), int(header[2]), float(header[3])
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != h * w:
        raise FormatError(f"{path}: expected {h * w} values, found {data.size}")
    return data.reshape(h, w).astype(np.float64) * scale


def write_ppm(path, image: np.ndarray) -> None:
    """8-bit binary PPM from a float image in [0, 1] of shape (H, W, 3)."""
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end].decode("ascii"))
        pos = end
    if tokens[0] != "P6":
        raise FormatError(f"{path}: only binary P6 PPM is supported")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pixels = np.frombuffer(data[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    return pixels.reshape(h, w, 3).astype(np.float64) / maxval


def write_ply(path, points: np.ndarray) -> None:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    header = ["ply", "format ascii 1.0", f"element vertex {len(points)}",
              "property double x", "property double y", "property double z", "end_header"]
    body = [f"{p[0]!r} {p[1]!r} {p[2]!r}" for p in points.tolist()]
    Path(path).write_text("\n".join(header + body) + "\n")


def read_ply(path) -> np.ndarray:
    """Read x y z from an ASCII PLY; any further vertex properties (normals, colour) are ignored."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}: not a PLY file")
    n_vertex, props, i = None, [], 1
    in_vertex = False
    while i < len(lines):
        parts = lines[i].split()
        i += 1
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise FormatError(f"{path}: only ASCII PLY is supported")
        if parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n_vertex = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            props.append(parts[-1])
        elif parts[0] == "end_header":
            break
    if n_vertex is None or not {"x", "y", "z"} <= set(props):
        raise FormatError(f"{path}: missing vertex x/y/z")
    cols = [props.index(c) for c in ("x", "y", "z")]
    rows = [lines[i + k].split() for k in range(n_vertex)]
    return np.array([[float(r[c]) for c in cols] for r in rows], dtype=np.float64).reshape(-1, 3)


def save_checkpoint(path, state: dict) -> None:
    """Write ``<path>.bin`` (little-endian float64 blob) and ``<path>.manifest``.

    Manifest lines are ``name<TAB>shape<TAB>offset`` with the shape as
    comma-separated ints and the offset in values.
    """
    path = Path(path)
    offset, chunks, manifest = 0, [], []
    for name in sorted(state):
        arr = np.asarray(state[name].detach().cpu().numpy() if hasattr(state[name], "detach")
                         else state[name], dtype="<f8")
        manifest.append(f"{name}\t{','.join(str(s) for s in arr.shape)}\t{offset}")
        chunks.append(arr.ravel().tobytes())
        offset += arr.size
    path.with_suffix(".bin").write_bytes(b"".join(chunks))
    path.with_suffix(".manifest").write_text("\n".join(manifest) + "\n")


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    blob = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    state = {}
    for line in path.with_suffix(".manifest").read_text().splitlines():
        if not line.strip():
            continue
        name, shape, offset = line.split("\t")
        shape = tuple(int(s) for s in shape.split(",")) if shape else ()
        size = int(np.prod(shape)) if shape else 1
        start = int(offset)
        state[name] = blob[start:start + size].reshape(shape).copy()
    return state


def read_kv(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{n}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_kv(path, values: dict) -> None:
    Path(path).write_text("".join(f"{k} = {_fmt(v)}\n" for k, v in values.items()))


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
