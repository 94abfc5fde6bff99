"""Dense float64 grids, reverse-mode differentiation and gradient checking.

Grids are plain ``torch.Tensor`` objects in double precision; torch's autograd
tape plays the role of the computation record. This module adds the pieces the
rest of the package relies on: shape-checked graph evaluation, explicit
backward with a seed, a central finite-difference checker that recognises
non-smooth points, and the bilinear / nearest samplers used for warping.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

DTYPE = torch.float64

ValueGrid = torch.Tensor


class ShapeError(ValueError):
    """Input or intermediate shapes do not agree with what a graph expects."""


class GraphStateError(RuntimeError):
    pass


def grid(data, requires_grad: bool = False) -> ValueGrid:
    """Copy ``data`` into a fresh float64 grid."""
    t = torch.as_tensor(np.asarray(data, dtype=np.float64) if not torch.is_tensor(data) else data)
    t = t.detach().to(DTYPE).clone()
    t.requires_grad_(requires_grad)
    return t


class Graph:
    """A named differentiable function with declared input shapes.

    ``None`` in a declared shape matches any length on that axis; a declared
    shape of ``None`` skips the check for that input.
    """

    def __init__(self, fn: Callable[..., ValueGrid], input_shapes: Sequence | None = None,
                 name: str | None = None):
        self.fn = fn
        self.input_shapes = None if input_shapes is None else [
            None if s is None else tuple(s) for s in input_shapes]
        self.name = name or getattr(fn, "__name__", "graph")
        self._inputs: list[ValueGrid] | None = None
        self._output: ValueGrid | None = None

    def check_inputs(self, inputs: Sequence[ValueGrid]) -> None:
        if self.input_shapes is None:
            return
        if len(inputs) != len(self.input_shapes):
            raise ShapeError(f"{self.name}: expected {len(self.input_shapes)} inputs, got {len(inputs)}")
        for i, (x, want) in enumerate(zip(inputs, self.input_shapes)):
            if want is None:
                continue
            got = tuple(x.shape)
            if len(got) != len(want) or any(w is not None and w != g for w, g in zip(want, got)):
                raise ShapeError(f"{self.name}: input {i} has shape {got}, expected {want}")


def evaluate(graph: Graph | Callable, inputs: Sequence[ValueGrid]) -> ValueGrid:
    """Run the forward pass. Deterministic: same inputs give bit-identical output."""
    if not isinstance(graph, Graph):
        graph = Graph(graph)
    graph.check_inputs(inputs)
    try:
        out = graph.fn(*inputs)
    except RuntimeError as exc:
        # torch reports the failing primitive in its message
        raise ShapeError(f"{graph.name}: {exc}") from exc
    graph._inputs = list(inputs)
    graph._output = out
    return out


def backward(graph: Graph, output_seed: ValueGrid | None = None) -> list[ValueGrid]:
    """Propagate ``output_seed`` back to every input that requires grad.

    Gradients are accumulated into ``.grad`` (fan-out and repeated calls add up)
    and the contribution of this call alone is returned.
    """
    if graph._output is None:
        raise GraphStateError(f"{graph.name}: backward called before evaluate")
    out = graph._output
    if output_seed is None:
        output_seed = torch.ones_like(out)
    if tuple(output_seed.shape) != tuple(out.shape):
        raise ShapeError(f"{graph.name}: seed shape {tuple(output_seed.shape)} != output {tuple(out.shape)}")
    leaves = [x for x in graph._inputs if torch.is_tensor(x) and x.requires_grad]
    if not leaves:
        return []
    grads = torch.autograd.grad(out, leaves, grad_outputs=output_seed, retain_graph=True,
                                allow_unused=True)
    result = []
    for x, g in zip(leaves, grads):
        g = torch.zeros_like(x) if g is None else g
        if x.grad is None:
            x.grad = g.detach().clone()
        else:
            x.grad = x.grad + g.detach()
        result.append(g.detach())
    return result


@dataclass
class CoordinateCheck:
    input_index: int
    coordinate: tuple
    analytic: float
    numeric: float
    rel_error: float
    excluded: bool = False
    note: str = ""


@dataclass
class GradCheckReport:
    step: float
    tolerance: float
    entries: list[CoordinateCheck] = field(default_factory=list)

    @property
    def checked(self) -> list[CoordinateCheck]:
        return [e for e in self.entries if not e.excluded]

    @property
    def excluded(self) -> list[CoordinateCheck]:
        return [e for e in self.entries if e.excluded]

    @property
    def max_rel_error(self) -> float:
        errs = [e.rel_error for e in self.checked]
        return max(errs) if errs else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel={self.max_rel_error:.3e} tol={self.tolerance:g} "
                f"checked={len(self.checked)} excluded={len(self.excluded)}")


def _slopes(f, x, idx, h):
    orig = x[idx].item()
    x[idx] = orig + h
    fp = f()
    x[idx] = orig - h
    fm = f()
    x[idx] = orig
    f0 = f()
    return (fp - f0) / h, (f0 - fm) / h


def finite_difference_check(fn: Callable[..., ValueGrid], inputs: Sequence, step: float = 1e-4,
                            tolerance: float = 1e-4, wrt: Sequence[int] | None = None,
                            max_coords: int | None = None, seed: int = 0,
                            output_seed: ValueGrid | None = None) -> GradCheckReport:
    """Compare autograd gradients of ``fn`` with central differences.

    Vector outputs are reduced to a scalar by a fixed random projection.
    Every coordinate also gets its one-sided slopes at ``step``; when they
    differ noticeably, or the central estimate disagrees with autograd, the
    slopes are recomputed at ``step/10``. If their gap neither becomes
    negligible nor shrinks in proportion to the step, the point is
    non-smooth (a max tie, a gather boundary, a ReLU hinge) and the coordinate
    is excluded and noted rather than checked. Otherwise any kink lay
    between the two scales and the finer central difference is used.
    """
    rng = np.random.default_rng(seed)
    xs = [x.detach().clone().to(DTYPE) if torch.is_tensor(x) else x for x in inputs]
    if wrt is None:
        wrt = [i for i, x in enumerate(xs) if torch.is_tensor(x) and x.is_floating_point()]
    for i in wrt:
        xs[i].requires_grad_(True)
    out = fn(*xs)
    if output_seed is None:
        gen = torch.Generator().manual_seed(seed)
        output_seed = torch.randn(out.shape, generator=gen, dtype=DTYPE)
    scalar = (out * output_seed).sum()
    analytic = torch.autograd.grad(scalar, [xs[i] for i in wrt], allow_unused=True)
    analytic = [torch.zeros_like(xs[i]) if g is None else g.detach() for i, g in zip(wrt, analytic)]
    gmax = max((g.abs().max().item() for g in analytic if g.numel()), default=0.0)
    floor = max(1e-6 * gmax, 1e-12)

    plain = [x.detach().clone() if torch.is_tensor(x) else x for x in xs]

    def f() -> float:
        with torch.no_grad():
            return float((fn(*plain) * output_seed).sum())

    report = GradCheckReport(step=step, tolerance=tolerance)
    f0 = f()
    for slot, i in enumerate(wrt):
        x = plain[i]
        flat = x.view(-1)
        n = flat.numel()
        picks = np.arange(n) if max_coords is None or max_coords >= n else \
            np.sort(rng.choice(n, size=max_coords, replace=False))
        g_flat = analytic[slot].reshape(-1)
        for k in picks:
            k = int(k)
            orig = flat[k].item()
            flat[k] = orig + step
            fp = f()
            flat[k] = orig - step
            fm = f()
            flat[k] = orig
            num = (fp - fm) / (2 * step)
            ana = g_flat[k].item()
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            coord = tuple(int(c) for c in np.unravel_index(k, tuple(x.shape)))
            entry = CoordinateCheck(i, coord, ana, num, err)
            # one-sided slopes come for free; a gap that does not shrink with the step is a kink
            sp1, sm1 = (fp - f0) / step, (f0 - fm) / step
            gap1 = abs(sp1 - sm1)
            if gap1 > tolerance * max(abs(sp1), abs(sm1), floor) or err >= tolerance:
                sp2, sm2 = _slopes(f, flat, k, step / 10)
                gap2 = abs(sp2 - sm2)
                # curvature makes the gap shrink tenfold with the step; a nearby kink does not
                smooth = gap2 <= 0.2 * gap1 or \
                    gap2 <= tolerance * max(abs(sp2), abs(sm2), floor) + 1e-7 * (1 + abs(num))
                if not smooth:
                    entry.excluded = True
                    entry.note = f"non-smooth near the point (one-sided slopes {sp2:.4g} / {sm2:.4g})"
                else:
                    # a kink lay between step/10 and step; the finer central difference is valid
                    num2 = (sp2 + sm2) / 2
                    err2 = abs(ana - num2) / max(abs(ana), abs(num2), floor)
                    if err2 < err:
                        entry.numeric, entry.rel_error = num2, err2
                        entry.note = "central difference refined at step/10"
            report.entries.append(entry)
    return report


def bilinear_sample(img: ValueGrid, x: ValueGrid, y: ValueGrid) -> tuple[ValueGrid, ValueGrid]:
    """Sample ``img`` of shape (C, H, W) at real pixel coordinates.

    Pixel centres sit on integer coordinates. Points outside ``[0, W-1] x
    [0, H-1]`` return zero (value and gradient) and are flagged False in the
    returned mask. Differentiable w.r.t. ``img`` and the coordinates.
    """
    C, H, W = img.shape
    mask = (x >= 0) & (x <= W - 1) & (y >= 0) & (y <= H - 1) & torch.isfinite(x) & torch.isfinite(y)
    xs = torch.where(mask, x, torch.zeros_like(x))
    ys = torch.where(mask, y, torch.zeros_like(y))
    x0 = torch.clamp(torch.floor(xs.detach()), 0, max(W - 2, 0)).long()
    y0 = torch.clamp(torch.floor(ys.detach()), 0, max(H - 2, 0)).long()
    x1 = torch.clamp(x0 + 1, max=W - 1)
    y1 = torch.clamp(y0 + 1, max=H - 1)
    wx = xs - x0.to(xs.dtype)
    wy = ys - y0.to(ys.dtype)
    flat = img.reshape(C, H * W)

    def g(yy, xx):
        return flat[:, (yy * W + xx).reshape(-1)].reshape((C,) + tuple(x.shape))

    out = (g(y0, x0) * ((1 - wx) * (1 - wy)) + g(y0, x1) * (wx * (1 - wy))
           + g(y1, x0) * ((1 - wx) * wy) + g(y1, x1) * (wx * wy))
    out = out * mask.to(out.dtype)
    return out, mask


def nearest_sample(img: ValueGrid, x: ValueGrid, y: ValueGrid) -> tuple[ValueGrid, ValueGrid]:
    """Nearest-neighbour counterpart of :func:`bilinear_sample` (same bounds rule)."""
    C, H, W = img.shape
    mask = (x >= 0) & (x <= W - 1) & (y >= 0) & (y <= H - 1) & torch.isfinite(x) & torch.isfinite(y)
    xi = torch.clamp(torch.round(torch.where(mask, x, torch.zeros_like(x))).detach(), 0, W - 1).long()
    yi = torch.clamp(torch.round(torch.where(mask, y, torch.zeros_like(y))).detach(), 0, H - 1).long()
    out = img.reshape(C, H * W)[:, (yi * W + xi).reshape(-1)].reshape((C,) + tuple(x.shape))
    return out * mask.to(out.dtype), mask


def upsample(x: ValueGrid, factor: int, size: tuple[int, int] | None = None) -> ValueGrid:
    """Bilinear upsampling of (..., h, w) where output pixel i reads input i/factor.

    This matches the stride-2 convolutions of the feature pyramid, whose output
    pixel i is centred on input pixel 2i. Coordinates past the last input
    sample are clamped.
    """
    h, w = x.shape[-2:]
    H, W = size if size is not None else (h * factor, w * factor)
    out = x
    for axis, (n_in, n_out) in enumerate(((h, H), (w, W))):
        dim = out.dim() - 2 + axis
        pos = torch.clamp(torch.arange(n_out, dtype=DTYPE) / factor, 0, n_in - 1)
        lo = torch.clamp(torch.floor(pos), 0, max(n_in - 2, 0)).long()
        hi = torch.clamp(lo + 1, max=n_in - 1)
        wt = pos - lo.to(DTYPE)
        shape = [1] * out.dim()
        shape[dim] = n_out
        wt = wt.view(shape)
        out = out.index_select(dim, lo) * (1 - wt) + out.index_select(dim, hi) * wt
    return out
