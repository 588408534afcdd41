"""Dense tensors, convolution lowering, GEMM, and compacted GEMM.

Conventions used throughout the package:

* a 4-D weight tensor is a C-contiguous float ndarray of shape
  ``(filters, channels, kernel_h, kernel_w)``,
* an activation batch is ``(batch, channels, height, width)``,
* the lowered view of a kernel is the ``(filters, channels*kernel_h*kernel_w)``
  matrix whose columns walk ``(channel, kernel_row, kernel_col)`` in row-major
  order, so lowering is a plain ``reshape`` and round-trips bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class GeometryError(ValueError):
    """Convolution geometry is inconsistent with the tensor it is applied to."""


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


def validate_tensor4(arr: np.ndarray) -> np.ndarray:
    """Check the 4-D tensor convention: 4 axes, float dtype, finite entries."""
    arr = np.asarray(arr)
    if arr.ndim != 4:
        raise ShapeError(f"expected a 4-D tensor, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        raise ShapeError(f"expected a float tensor, got dtype {arr.dtype}")
    if not np.isfinite(arr).all():
        raise ValueError("tensor contains non-finite entries")
    return arr


@dataclass(frozen=True)
class ConvGeometry:
    """Spatial wiring of one convolution over a fixed input shape.

    ``in_channels/in_h/in_w`` describe the input feature map, ``kernel_h/
    kernel_w`` the kernel window, and ``stride``/``pad`` the usual scan
    parameters. Output dims must come out at least 1.
    """

    in_channels: int
    in_h: int
    in_w: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        if min(self.in_channels, self.in_h, self.in_w, self.kernel_h, self.kernel_w) < 1:
            raise GeometryError(f"all counts must be positive: {self}")
        if self.stride < 1 or self.pad < 0:
            raise GeometryError(f"stride must be >= 1 and pad >= 0: {self}")
        if self.out_h < 1 or self.out_w < 1:
            raise GeometryError(f"kernel does not fit the padded input: {self}")

    @property
    def out_h(self) -> int:
        return (self.in_h + 2 * self.pad - self.kernel_h) // self.stride + 1

    @property
    def out_w(self) -> int:
        return (self.in_w + 2 * self.pad - self.kernel_w) // self.stride + 1

    @property
    def cols(self) -> int:
        """Width of the lowered weight matrix: channels * kernel_h * kernel_w."""
        return self.in_channels * self.kernel_h * self.kernel_w

    @property
    def positions(self) -> int:
        """Number of receptive-field positions: out_h * out_w."""
        return self.out_h * self.out_w


def col_map(geom: ConvGeometry) -> np.ndarray:
    """Per-column (channel, kernel_row, kernel_col) provenance, shape (cols, 3)."""
    c, kh, kw = np.unravel_index(
        np.arange(geom.cols), (geom.in_channels, geom.kernel_h, geom.kernel_w)
    )
    return np.stack([c, kh, kw], axis=1)


def col_index(geom: ConvGeometry, channel: int, kh: int, kw: int) -> int:
    """Inverse of :func:`col_map`: lowered column index of one kernel position."""
    if not (0 <= channel < geom.in_channels and 0 <= kh < geom.kernel_h and 0 <= kw < geom.kernel_w):
        raise IndexError(f"kernel position ({channel},{kh},{kw}) out of range for {geom}")
    return (channel * geom.kernel_h + kh) * geom.kernel_w + kw


@dataclass
class LoweredMatrix:
    """2-D view of a 4-D kernel: rows are filters, columns kernel positions."""

    data: np.ndarray                  # (rows, cols), row-major
    col_map: np.ndarray               # (cols, 3) of (channel, kh, kw)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def validate(self) -> None:
        if self.data.ndim != 2:
            raise ShapeError(f"lowered matrix must be 2-D, got {self.data.shape}")
        if self.col_map.shape != (self.cols, 3):
            raise ShapeError(
                f"col_map shape {self.col_map.shape} does not match {self.cols} columns"
            )
        # bijectivity: every (c,kh,kw) appears exactly once
        if len({tuple(t) for t in self.col_map.tolist()}) != self.cols:
            raise ValueError("col_map is not a bijection onto the column set")


def lower_kernel(weights: np.ndarray) -> LoweredMatrix:
    """Lower a (filters, channels, kh, kw) kernel into its 2-D matrix view."""
    w = validate_tensor4(weights)
    n, c, kh, kw = w.shape
    geom = ConvGeometry(in_channels=c, in_h=kh, in_w=kw, kernel_h=kh, kernel_w=kw)
    return LoweredMatrix(data=w.reshape(n, c * kh * kw), col_map=col_map(geom))


def raise_kernel(lowered: LoweredMatrix, dims: tuple[int, int, int, int]) -> np.ndarray:
    """Invert :func:`lower_kernel`; bit-for-bit with the original tensor."""
    n, c, kh, kw = dims
    if lowered.data.shape != (n, c * kh * kw):
        raise ShapeError(f"lowered shape {lowered.data.shape} does not match dims {dims}")
    return lowered.data.reshape(n, c, kh, kw)


def im2col(image: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """Lower one (channels, h, w) image into the (cols, positions) patch matrix.

    Entry (col_index(c,kh,kw), p) is the input pixel under position p's
    receptive field, zero where the window hangs over the padding.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape != (geom.in_channels, geom.in_h, geom.in_w):
        raise GeometryError(
            f"image shape {image.shape} does not match geometry "
            f"({geom.in_channels},{geom.in_h},{geom.in_w})"
        )
    return im2col_batch(image[None], geom)[0]


def im2col_batch(
    x: np.ndarray, geom: ConvGeometry, rows: np.ndarray | None = None
) -> np.ndarray:
    """Batched lowering: (batch, C, H, W) -> (batch, cols, positions).

    ``rows``, if given, is an array of lowered-row indices to emit (the
    compacted path builds only the rows that survive column pruning).
    """
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1:] != (geom.in_channels, geom.in_h, geom.in_w):
        raise GeometryError(f"batch shape {x.shape} does not match geometry {geom}")
    p = geom.pad
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (geom.kernel_h, geom.kernel_w), axis=(2, 3))
    win = win[:, :, :: geom.stride, :: geom.stride]          # (B, C, Ho, Wo, kh, kw)
    b = x.shape[0]
    if rows is None:
        cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, geom.cols, geom.positions)
        return np.ascontiguousarray(cols)
    # subset path: gather only the requested rows so work scales with them
    rows = _check_index_set(rows, geom.cols, "rows")
    cm = col_map(geom)[rows]
    sub = win.transpose(0, 1, 4, 5, 2, 3)[:, cm[:, 0], cm[:, 1], cm[:, 2]]
    return np.ascontiguousarray(sub.reshape(b, len(rows), geom.positions))


def _scatter_indices(geom: ConvGeometry) -> np.ndarray:
    """Flat indices into the padded image for every (col, position) entry."""
    hp = geom.in_h + 2 * geom.pad
    wp = geom.in_w + 2 * geom.pad
    cm = col_map(geom)
    oh, ow = np.unravel_index(np.arange(geom.positions), (geom.out_h, geom.out_w))
    rows_h = oh[None, :] * geom.stride + cm[:, 1][:, None]   # (cols, positions)
    rows_w = ow[None, :] * geom.stride + cm[:, 2][:, None]
    return (cm[:, 0][:, None] * hp + rows_h) * wp + rows_w


def col2im(cols: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patches back to a (C, H, W) image."""
    cols = np.asarray(cols)
    if cols.shape != (geom.cols, geom.positions):
        raise GeometryError(
            f"column matrix shape {cols.shape} does not match geometry "
            f"({geom.cols},{geom.positions})"
        )
    return col2im_batch(cols[None], geom)[0]


def col2im_batch(cols: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """Batched adjoint lowering: (batch, cols, positions) -> (batch, C, H, W)."""
    cols = np.asarray(cols)
    b = cols.shape[0]
    hp = geom.in_h + 2 * geom.pad
    wp = geom.in_w + 2 * geom.pad
    size = geom.in_channels * hp * wp
    idx = _scatter_indices(geom).ravel()
    out = np.empty((b, geom.in_channels, hp, wp), dtype=cols.dtype)
    for i in range(b):
        # bincount gives a fast deterministic scatter-add (stride overlaps sum)
        flat = np.bincount(idx, weights=cols[i].ravel(), minlength=size)
        out[i] = flat.reshape(geom.in_channels, hp, wp).astype(cols.dtype, copy=False)
    p = geom.pad
    if p:
        out = out[:, :, p:-p, p:-p]
    return np.ascontiguousarray(out)


def gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Real matrix product with shape checking.

    Backed by numpy's BLAS matmul; output is deterministic for identical
    inputs under a fixed build/thread configuration.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"gemm expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dims mismatch: {a.shape} @ {b.shape}")
    return a @ b


def compact_gemm(
    w: LoweredMatrix,
    keep_rows: np.ndarray,
    keep_cols: np.ndarray,
    x: np.ndarray,
) -> np.ndarray:
    """Multiply a row/column-restricted lowered weight by a matching input.

    ``x`` must already be restricted to the retained rows: row i of ``x``
    corresponds to kernel position ``keep_cols[i]``. The result equals the
    full product with removed entries zeroed, restricted to ``keep_rows``.
    """
    keep_rows = _check_index_set(keep_rows, w.rows, "keep_rows")
    keep_cols = _check_index_set(keep_cols, w.cols, "keep_cols")
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeError(f"input matrix must be 2-D, got {x.shape}")
    if x.shape[0] != len(keep_cols):
        raise ShapeError(
            f"input has {x.shape[0]} rows but {len(keep_cols)} columns are kept"
        )
    return gemm(w.data[np.ix_(keep_rows, keep_cols)], x)


def _check_index_set(indices, limit: int, name: str) -> np.ndarray:
    # strictly increasing keeps the x-row <-> kept-column alignment unambiguous
    idx = np.asarray(indices, dtype=np.intp).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= limit):
        raise IndexError(f"{name} contains indices outside [0, {limit})")
    if idx.size > 1 and not (np.diff(idx) > 0).all():
        raise ValueError(f"{name} must be strictly increasing")
    return idx
