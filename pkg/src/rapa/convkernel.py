"""Matrix formulation of convolution: patch extraction (im2col), the
forward product, both backward products, and MAC accounting.

A convolution over an h x w x c_in image is a matmul between the n_p x k
patch matrix (one flattened patch per output pixel, raster order, patch
interior flattened (k_h, k_w, c_in) with channels fastest) and the
k x c_out kernel matrix, plus a per-channel bias.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .numcore import ShapeError, matmul

__all__ = [
    "ConvGeometry",
    "KernelMatrix",
    "PatchMatrix",
    "im2col",
    "conv_forward",
    "conv_backward_kernel",
    "conv_backward_input",
    "mac_count",
]


@dataclass(frozen=True)
class ConvGeometry:
    """Static extents of one conv layer (symmetric zero padding)."""

    h: int
    w: int
    c_in: int
    k_h: int
    k_w: int
    pad: int
    stride: int
    c_out: int

    def __post_init__(self):
        for name in ("h", "w", "c_in", "k_h", "k_w", "stride", "c_out"):
            if getattr(self, name) < 1:
                raise ShapeError(f"ConvGeometry.{name} must be >= 1")
        if self.pad < 0:
            raise ShapeError("ConvGeometry.pad must be >= 0")
        for span, kern in ((self.h, self.k_h), (self.w, self.k_w)):
            run = span + 2 * self.pad - kern
            if run < 0:
                raise ShapeError("kernel larger than padded input")
            if run % self.stride != 0:
                # No implicit floor: keeps n_p bookkeeping exact.
                raise ShapeError(
                    f"({span} + 2*{self.pad} - {kern}) not divisible by stride {self.stride}"
                )

    @property
    def out_h(self) -> int:
        return (self.h + 2 * self.pad - self.k_h) // self.stride + 1

    @property
    def out_w(self) -> int:
        return (self.w + 2 * self.pad - self.k_w) // self.stride + 1

    @property
    def n_p(self) -> int:
        return self.out_h * self.out_w

    @property
    def k(self) -> int:
        return self.k_h * self.k_w * self.c_in


@dataclass
class KernelMatrix:
    """Flattened, stacked filters (k x c_out) with a per-channel bias."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        self.bias = np.asarray(self.bias)
        if self.weights.ndim != 2:
            raise ShapeError("KernelMatrix.weights must be 2-D (k x c_out)")
        if self.bias.shape != (self.weights.shape[1],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match c_out {self.weights.shape[1]}"
            )

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @property
    def c_out(self) -> int:
        return self.weights.shape[1]


@dataclass
class PatchMatrix:
    """im2col matrix: row i is the flattened patch of output pixel i."""

    geometry: ConvGeometry
    rows: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.rows.shape != (self.geometry.n_p, self.geometry.k):
            raise ShapeError(
                f"patch rows {self.rows.shape} != (n_p, k) = "
                f"({self.geometry.n_p}, {self.geometry.k})"
            )


@dataclass(frozen=True)
class Im2colPlan:
    """Precomputed gather indices for one geometry.

    indices: (n_p, k) flat positions into the zero-padded image.
    src_y / src_x: (n_p, k) source coordinates in unpadded pixels
    (negative or >= h/w means the entry reads padding).
    """

    geometry: ConvGeometry
    indices: np.ndarray = field(repr=False)
    src_y: np.ndarray = field(repr=False)
    src_x: np.ndarray = field(repr=False)

    @property
    def padded_shape(self) -> tuple[int, int, int]:
        g = self.geometry
        return (g.h + 2 * g.pad, g.w + 2 * g.pad, g.c_in)


@lru_cache(maxsize=None)
def plan_for(geom: ConvGeometry) -> Im2colPlan:
    """Build (and cache) the gather plan for a geometry."""
    oy = np.arange(geom.out_h) * geom.stride
    ox = np.arange(geom.out_w) * geom.stride
    dy = np.arange(geom.k_h)
    dx = np.arange(geom.k_w)
    ch = np.arange(geom.c_in)
    # (out_h, out_w, k_h, k_w, c_in) padded-grid coordinates.
    py = oy[:, None, None, None, None] + dy[None, None, :, None, None]
    px = ox[None, :, None, None, None] + dx[None, None, None, :, None]
    py, px, pc = np.broadcast_arrays(py, px, ch[None, None, None, None, :])
    wp = geom.w + 2 * geom.pad
    flat = (py * wp + px) * geom.c_in + pc
    shape = (geom.n_p, geom.k)
    return Im2colPlan(
        geometry=geom,
        indices=np.ascontiguousarray(flat.reshape(shape)),
        src_y=np.ascontiguousarray((py - geom.pad).reshape(shape)),
        src_x=np.ascontiguousarray((px - geom.pad).reshape(shape)),
    )


def _pad(x: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    if geom.pad == 0:
        return x
    p = geom.pad
    out = np.zeros((geom.h + 2 * p, geom.w + 2 * p, geom.c_in), dtype=x.dtype)
    out[p : p + geom.h, p : p + geom.w] = x
    return out


def im2col(x: np.ndarray, geom: ConvGeometry) -> PatchMatrix:
    """Stack all n_p image patches as rows, raster order of output pixels."""
    x = np.asarray(x)
    if x.shape != (geom.h, geom.w, geom.c_in):
        raise ShapeError(
            f"input shape {x.shape} does not match geometry "
            f"({geom.h}, {geom.w}, {geom.c_in})"
        )
    plan = plan_for(geom)
    rows = _pad(x, geom).reshape(-1)[plan.indices]
    return PatchMatrix(geometry=geom, rows=rows)


def conv_forward(patches: PatchMatrix, kernel: KernelMatrix) -> np.ndarray:
    """I @ K + bias, reshaped to (out_h, out_w, c_out)."""
    geom = patches.geometry
    if kernel.k != geom.k or kernel.c_out != geom.c_out:
        raise ShapeError(
            f"kernel ({kernel.k}, {kernel.c_out}) does not match geometry "
            f"(k={geom.k}, c_out={geom.c_out})"
        )
    out = matmul(patches.rows, kernel.weights) + kernel.bias
    return out.reshape(geom.out_h, geom.out_w, geom.c_out)


def conv_backward_kernel(
    patches: PatchMatrix, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient wrt kernel: dK = I^T dM, dbias = column sums of dM."""
    geom = patches.geometry
    grad_out = np.asarray(grad_out)
    if grad_out.shape != (geom.n_p, geom.c_out):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} != (n_p, c_out) = "
            f"({geom.n_p}, {geom.c_out})"
        )
    d_weights = matmul(patches.rows.T, grad_out)
    d_bias = grad_out.sum(axis=0)
    return d_weights, d_bias


def col2im(row_grads: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """Scatter-add patch-row gradients back onto the input pixels.

    The scatter pattern is regular, so it reduces to one strided slice-add
    per kernel offset; accumulation stays in the input dtype.
    """
    g = np.asarray(row_grads).reshape(
        geom.out_h, geom.out_w, geom.k_h, geom.k_w, geom.c_in
    )
    hp, wp = geom.h + 2 * geom.pad, geom.w + 2 * geom.pad
    padded = np.zeros((hp, wp, geom.c_in), dtype=g.dtype)
    sy = geom.out_h * geom.stride
    sx = geom.out_w * geom.stride
    for dy in range(geom.k_h):
        for dx in range(geom.k_w):
            padded[dy : dy + sy : geom.stride, dx : dx + sx : geom.stride] += g[:, :, dy, dx, :]
    p = geom.pad
    return padded[p : p + geom.h, p : p + geom.w, :]


def conv_backward_input(
    grad_out: np.ndarray, kernel: KernelMatrix, geom: ConvGeometry
) -> np.ndarray:
    """Gradient wrt the input image: scatter-add of dM K^T (padding dropped)."""
    grad_out = np.asarray(grad_out)
    if grad_out.shape != (geom.n_p, geom.c_out):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} != (n_p, c_out) = "
            f"({geom.n_p}, {geom.c_out})"
        )
    if kernel.k != geom.k or kernel.c_out != geom.c_out:
        raise ShapeError("kernel extents do not match geometry")
    row_grads = matmul(grad_out, kernel.weights.T)
    return col2im(row_grads, geom)


def mac_count(geom: ConvGeometry) -> int:
    """Multiply-accumulate volume of the layer: n_p * k * c_out."""
    return geom.n_p * geom.k * geom.c_out
