"""Patch-to-tile assignment schemes and convolution over replicated kernels.

Each of the n_p patch rows is assigned to exactly one of n_t kernel
matrices ("tiles"); the tiled forward computes row l with the kernel its
tile owns and returns rows in original patch order. Tile and patch indices
are 0-based here; the closed-form assignment formulas drop the paper-style
"+1" accordingly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import isqrt

import numpy as np

from .convkernel import ConvGeometry, KernelMatrix, PatchMatrix, col2im, plan_for
from .numcore import SeededRng, ShapeError, matmul

__all__ = [
    "SCHEME_KINDS",
    "TilingScheme",
    "TilePartition",
    "TiledKernelBank",
    "assign_image",
    "assign_alternate",
    "sample_random_partition",
    "sample_keep_set",
    "build_partition",
    "tiled_conv_forward",
    "perforated_forward",
    "tiled_conv_backward",
]

# CLI-facing scheme names; used verbatim as the internal vocabulary.
SCHEME_KINDS = (
    "none",
    "random",
    "random-fixed",
    "image-overlap",
    "image-pad",
    "alternate",
    "perforated",
)

_SQUARE_KINDS = ("image-overlap", "image-pad", "alternate")


@dataclass
class TilingScheme:
    """A scheme kind plus its tile count.

    For "perforated", n_t is the subsample divisor (a single kernel is
    trained on ceil(n_p/n_t) patches per image); the kernel bank size is 1.
    """

    kind: str
    n_t: int = 1
    _cached: "TilePartition | None" = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise ValueError(f"unknown tiling scheme {self.kind!r}; expected one of {SCHEME_KINDS}")
        if self.n_t < 1:
            raise ValueError(f"n_t must be >= 1, got {self.n_t}")
        if self.kind == "none" and self.n_t != 1:
            raise ValueError("scheme 'none' requires n_t = 1")
        if self.kind in _SQUARE_KINDS and isqrt(self.n_t) ** 2 != self.n_t:
            raise ValueError(f"scheme {self.kind!r} requires a square tile count, got {self.n_t}")

    @property
    def bank_size(self) -> int:
        """Number of kernel matrices the scheme trains."""
        return 1 if self.kind in ("none", "perforated") else self.n_t

    @property
    def grid_side(self) -> int:
        """q with q**2 = n_t for the image/alternate formulas."""
        return isqrt(self.n_t)


@dataclass
class TilePartition:
    """Assignment of each patch index to one tile (a partition of 0..n_p-1).

    row_mask, when present (image-pad scheme), marks the patch-row entries
    whose source pixels lie inside the patch's own image region; the rest
    are zeroed as if each region were a separately padded sub-image.
    """

    assignment: np.ndarray
    n_t: int
    row_mask: np.ndarray | None = field(default=None, repr=False)
    _order: np.ndarray | None = field(default=None, repr=False, compare=False)
    _bounds: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        if self.assignment.ndim != 1:
            raise ShapeError("assignment must be 1-D")
        if self.assignment.size and (
            self.assignment.min() < 0 or self.assignment.max() >= self.n_t
        ):
            raise ValueError("assignment values must lie in [0, n_t)")

    @property
    def n_p(self) -> int:
        return self.assignment.size

    def subsets(self) -> list[np.ndarray]:
        """S_j as index arrays, ascending within each subset."""
        return [np.flatnonzero(self.assignment == j) for j in range(self.n_t)]

    def tile_blocks(self) -> tuple[np.ndarray, np.ndarray]:
        """(order, bounds): a stable sort of patch indices by tile, with
        bounds[j]:bounds[j+1] slicing tile j's block; cached."""
        if self._order is None:
            self._order = np.argsort(self.assignment, kind="stable")
            counts = np.bincount(self.assignment, minlength=self.n_t)
            self._bounds = np.concatenate(([0], np.cumsum(counts)))
        return self._order, self._bounds


@dataclass
class TiledKernelBank:
    """n_t kernel matrices of identical extents."""

    kernels: list[KernelMatrix]

    def __post_init__(self):
        if not self.kernels:
            raise ValueError("bank must hold at least one kernel")
        k0 = self.kernels[0]
        for km in self.kernels[1:]:
            if km.k != k0.k or km.c_out != k0.c_out:
                raise ShapeError("bank members differ in (k, c_out)")

    @property
    def n_t(self) -> int:
        return len(self.kernels)

    @property
    def c_out(self) -> int:
        return self.kernels[0].c_out


def assign_image(x: int, y: int, n: int, q: int) -> int:
    """Image-based tile of the patch centered at column x, row y.

    Tiles correspond to q x q image regions: floor(q*x/n) + q*floor(q*y/n).
    """
    if not (0 <= x < n and 0 <= y < n):
        raise ValueError(f"coordinates ({x}, {y}) outside [0, {n})")
    return (q * x) // n + q * ((q * y) // n)


def assign_alternate(x: int, y: int, q: int) -> int:
    """Alternate tile of the patch at column x, row y: neighbors go to
    different tiles, (x mod q) + q*(y mod q)."""
    return (x % q) + q * (y % q)


def sample_random_partition(n_p: int, n_t: int, rng: SeededRng) -> TilePartition:
    """Uniform random partition into n_t subsets of near-equal size.

    Shuffle 0..n_p-1 and split into consecutive blocks; the first
    (n_p mod n_t) subsets get the extra patch, so sizes are exactly equal
    whenever n_t divides n_p.
    """
    if n_t < 1:
        raise ValueError("n_t must be >= 1")
    if n_t > n_p:
        raise ValueError(f"cannot split {n_p} patches into {n_t} non-empty subsets")
    perm = rng.permutation(n_p)
    assignment = np.empty(n_p, dtype=np.int64)
    base, extra = divmod(n_p, n_t)
    start = 0
    for j in range(n_t):
        size = base + (1 if j < extra else 0)
        assignment[perm[start : start + size]] = j
        start += size
    return TilePartition(assignment=assignment, n_t=n_t)


def sample_keep_set(n_p: int, n_t: int, rng: SeededRng) -> np.ndarray:
    """Random keep set for perforated convolution: ceil(n_p/n_t) indices."""
    if n_t < 1:
        raise ValueError("n_t must be >= 1")
    size = -(-n_p // n_t)
    perm = rng.permutation(n_p)
    return np.sort(perm[:size])


def _formula_assignment(scheme: TilingScheme, geom: ConvGeometry) -> np.ndarray:
    if geom.out_h != geom.out_w:
        raise ShapeError(
            f"scheme {scheme.kind!r} needs a square output grid, got "
            f"{geom.out_h} x {geom.out_w}"
        )
    n = geom.out_h
    q = scheme.grid_side
    ys, xs = np.divmod(np.arange(geom.n_p), geom.out_w)
    if scheme.kind == "alternate":
        return (xs % q) + q * (ys % q)
    return (q * xs) // n + q * ((q * ys) // n)


def _image_pad_mask(scheme: TilingScheme, geom: ConvGeometry, assignment: np.ndarray) -> np.ndarray:
    """True where a patch entry's source pixel lies in the patch's own region."""
    if geom.h != geom.w:
        raise ShapeError("image-pad scheme needs a square input image")
    plan = plan_for(geom)
    q = scheme.grid_side
    inside = (
        (plan.src_x >= 0) & (plan.src_x < geom.w)
        & (plan.src_y >= 0) & (plan.src_y < geom.h)
    )
    # Region of each source pixel on the input grid; clip keeps the formula
    # happy on padded entries, which `inside` already rules out.
    sx = np.clip(plan.src_x, 0, geom.w - 1)
    sy = np.clip(plan.src_y, 0, geom.h - 1)
    pixel_region = (q * sx) // geom.w + q * ((q * sy) // geom.h)
    return inside & (pixel_region == assignment[:, None])


def build_partition(scheme: TilingScheme, geom: ConvGeometry, rng: SeededRng) -> TilePartition:
    """Assignment of every patch of `geom` under `scheme`.

    "random" resamples on every call; "random-fixed" samples once and
    returns the cached partition afterwards. Perforated convolution keeps a
    patch subset rather than partitioning, so it is served by
    :func:`sample_keep_set` instead.
    """
    if scheme.kind == "none":
        return TilePartition(assignment=np.zeros(geom.n_p, dtype=np.int64), n_t=1)
    if scheme.kind == "random":
        return sample_random_partition(geom.n_p, scheme.n_t, rng)
    if scheme.kind == "random-fixed":
        if scheme._cached is None or scheme._cached.n_p != geom.n_p:
            scheme._cached = sample_random_partition(geom.n_p, scheme.n_t, rng)
        return scheme._cached
    if scheme.kind == "perforated":
        raise ValueError("perforated convolution keeps a patch subset; use sample_keep_set")
    assignment = _formula_assignment(scheme, geom)
    mask = None
    if scheme.kind == "image-pad":
        mask = _image_pad_mask(scheme, geom, assignment)
    return TilePartition(assignment=assignment, n_t=scheme.n_t, row_mask=mask)


def _masked_rows(patches: PatchMatrix, part: TilePartition) -> np.ndarray:
    if part.row_mask is None:
        return patches.rows
    return np.where(part.row_mask, patches.rows, 0)


def tiled_conv_forward(
    patches: PatchMatrix, bank: TiledKernelBank, part: TilePartition
) -> np.ndarray:
    """Row l of the result is patch l through its assigned tile's kernel.

    Rows come back in original patch order, so identical bank members
    reproduce the untiled convolution exactly.
    """
    geom = patches.geometry
    if part.n_p != geom.n_p:
        raise ShapeError(f"partition covers {part.n_p} patches, geometry has {geom.n_p}")
    if part.n_t != bank.n_t:
        raise ShapeError(f"partition has {part.n_t} tiles, bank has {bank.n_t}")
    rows = _masked_rows(patches, part)
    order, bounds = part.tile_blocks()
    sorted_rows = rows[order]
    sorted_out = np.empty((geom.n_p, bank.c_out), dtype=rows.dtype)
    for j, kernel in enumerate(bank.kernels):
        s, e = bounds[j], bounds[j + 1]
        if e > s:
            sorted_out[s:e] = sorted_rows[s:e] @ kernel.weights + kernel.bias
    out = np.empty_like(sorted_out)
    out[order] = sorted_out
    return out


def perforated_forward(
    patches: PatchMatrix, kernel: KernelMatrix, keep: np.ndarray
) -> np.ndarray:
    """Compute only the kept rows; the rest (bias included) are exactly 0."""
    geom = patches.geometry
    keep = np.asarray(keep, dtype=np.int64)
    if keep.size == 0:
        raise ValueError("perforated keep set must not be empty")
    if keep.min() < 0 or keep.max() >= geom.n_p:
        raise ValueError("keep indices out of range")
    out = np.zeros((geom.n_p, kernel.c_out), dtype=patches.rows.dtype)
    out[keep] = matmul(patches.rows[keep], kernel.weights) + kernel.bias
    return out


def tiled_conv_backward(
    patches: PatchMatrix,
    bank: TiledKernelBank,
    part: TilePartition,
    grad_out: np.ndarray,
    need_input_grad: bool = True,
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray | None]:
    """Per-tile kernel gradients plus the scatter-added input gradient.

    Tile j sees only the rows of S_j: dK_j = I_j^T dM_j. The input gradient
    routes each row through its own tile's kernel before col2im.
    """
    geom = patches.geometry
    grad_out = np.asarray(grad_out)
    if grad_out.shape != (geom.n_p, bank.c_out):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} != ({geom.n_p}, {bank.c_out})"
        )
    rows = _masked_rows(patches, part)
    order, bounds = part.tile_blocks()
    sorted_rows = rows[order]
    sorted_g = grad_out[order]
    grads = []
    sorted_row_grads = (
        np.empty((geom.n_p, geom.k), dtype=grad_out.dtype) if need_input_grad else None
    )
    for j, kernel in enumerate(bank.kernels):
        s, e = bounds[j], bounds[j + 1]
        if e > s:
            g = sorted_g[s:e]
            grads.append((sorted_rows[s:e].T @ g, g.sum(axis=0)))
            if need_input_grad:
                sorted_row_grads[s:e] = g @ kernel.weights.T
        else:
            grads.append(
                (
                    np.zeros_like(kernel.weights),
                    np.zeros_like(kernel.bias),
                )
            )
    if not need_input_grad:
        return grads, None
    row_grads = np.empty_like(sorted_row_grads)
    row_grads[order] = sorted_row_grads
    if part.row_mask is not None:
        row_grads = np.where(part.row_mask, row_grads, 0)
    return grads, col2im(row_grads, geom)
