"""Forward/backward rules for the network layers.

Everything here is a pure function from tensors to tensors; backward rules
are registered on the tape by ``Tensor._from_op``. The flexible pyramid
pooling layer (``fspp_forward``) turns a feature map of any spatial size
into a fixed-length vector of per-bin maxima plus the argmax coordinates
of every bin, which later drive attribute localization.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .tensor import ShapeError, Tensor


def relu(x):
    a = x
    out_data = np.maximum(a.data, 0.0)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > 0.0))

    return Tensor._from_op(out_data, (a,), "relu", bw)


def sigmoid(x):
    a = x
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * out_data * (1.0 - out_data))

    return Tensor._from_op(out_data, (a,), "sigmoid", bw)


def channel_bias_add(x, bias):
    """Add a per-channel bias to a C×H×W map."""
    a, b = x, bias
    if a.data.ndim != 3 or b.data.shape != (a.data.shape[0],):
        raise ShapeError(f"channel_bias_add: got map {a.data.shape}, bias {b.data.shape}")
    out_data = a.data + b.data[:, None, None]

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g.sum(axis=(1, 2)))

    return Tensor._from_op(out_data, (a, b), "channel_bias_add", bw)


def conv2d(x, kernel, stride=1, pad=0):
    """Cross-correlation of a C×H×W map with a K×C×kh×kw kernel, zero padding.

    Output extents follow floor((H + 2*pad - kh)/stride) + 1. Forward and
    backward both reduce to one matrix product over an im2col view.
    """
    a, w = x, kernel
    if a.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: got input {a.data.shape}, kernel {w.data.shape}")
    C, H, W = a.data.shape
    K, Ck, kh, kw = w.data.shape
    if Ck != C:
        raise ShapeError(f"conv2d: kernel expects {Ck} channels, input has {C}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    Hp, Wp = H + 2 * pad, W + 2 * pad
    if kh > Hp or kw > Wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1

    xp = np.pad(a.data, ((0, 0), (pad, pad), (pad, pad))) if pad else a.data
    s0, s1, s2 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(C, kh, kw, Ho, Wo),
        strides=(s0, s1, s2, s1 * stride, s2 * stride),
        writeable=False,
    )
    cols = windows.reshape(C * kh * kw, Ho * Wo)
    wmat = w.data.reshape(K, C * kh * kw)
    out_data = (wmat @ cols).reshape(K, Ho, Wo)

    def bw(g):
        gmat = g.reshape(K, Ho * Wo)
        if w.requires_grad:
            w.accumulate_grad((gmat @ cols.T).reshape(w.data.shape))
        if a.requires_grad:
            gcols = (wmat.T @ gmat).reshape(C, kh, kw, Ho, Wo)
            gxp = np.zeros((C, Hp, Wp))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[:, i, j]
            a.accumulate_grad(gxp[:, pad : pad + H, pad : pad + W] if pad else gxp)

    return Tensor._from_op(out_data, (a, w), "conv2d", bw)


def maxpool2x2(x):
    """Stride-2 2x2 max pooling; an odd trailing row/column is dropped.

    The gradient of each window goes to its maximum only; ties resolve to
    the lowest row, then lowest column, keeping backward deterministic.
    """
    a = x
    if a.data.ndim != 3:
        raise ShapeError(f"maxpool2x2: expected C×H×W, got {a.data.shape}")
    C, H, W = a.data.shape
    if H < 2 or W < 2:
        raise ShapeError(f"maxpool2x2: spatial extents must be >= 2, got {H}x{W}")
    H2, W2 = H // 2, W // 2
    crop = a.data[:, : 2 * H2, : 2 * W2]
    win = crop.reshape(C, H2, 2, W2, 2).transpose(0, 1, 3, 2, 4).reshape(C, H2, W2, 4)
    idx = win.argmax(axis=3)  # first max in row-major window order
    out_data = np.take_along_axis(win, idx[..., None], axis=3)[..., 0]

    def bw(g):
        if not a.requires_grad:
            return
        ga = np.zeros_like(a.data)
        cs, ys, xs = np.meshgrid(np.arange(C), np.arange(H2), np.arange(W2), indexing="ij")
        np.add.at(ga, (cs, 2 * ys + idx // 2, 2 * xs + idx % 2), g)
        a.accumulate_grad(ga)

    return Tensor._from_op(out_data, (a,), "maxpool2x2", bw)


# -- flexible spatial pyramid pooling ---------------------------------------


@dataclass(frozen=True)
class PyramidSpec:
    """Per-branch pooling geometry: a whole-map bin plus an optional grid
    of half-overlapping bins (extent 2/(n+1) of the map, stride 1/(n+1)).
    """

    levels: tuple

    def __post_init__(self):
        if not 1 <= len(self.levels) <= 2:
            raise ValueError(f"pyramid height must be 1 or 2, got {len(self.levels)}")
        if tuple(self.levels[0]) != (1, 1):
            raise ValueError(f"level 1 must be the whole-map 1x1 bin, got {self.levels[0]}")
        for rows, cols in self.levels:
            if rows < 1 or cols < 1:
                raise ValueError(f"grid extents must be positive, got {rows}x{cols}")

    @classmethod
    def single(cls):
        return cls(((1, 1),))

    @classmethod
    def two_level(cls, rows, cols):
        return cls(((1, 1), (int(rows), int(cols))))

    @property
    def bins_per_channel(self):
        return sum(r * c for r, c in self.levels)

    @property
    def grid(self):
        """Level-2 grid, or None for a whole-map-only spec."""
        return self.levels[1] if len(self.levels) == 2 else None


def _axis_spans(n, extent):
    # Half-overlap rule: bin i covers [floor(i*E/(n+1)), ceil((i+2)*E/(n+1))),
    # clamped so every span is non-empty even for maps smaller than the grid.
    spans = []
    for i in range(n):
        lo = (i * extent) // (n + 1)
        hi = min(extent, -((-(i + 2) * extent) // (n + 1)))
        lo = min(lo, extent - 1)
        hi = max(hi, lo + 1)
        spans.append((lo, hi))
    return spans


def fspp_bins(spec, height, width):
    """Bin regions as (y0, y1, x0, x1) half-open boxes, whole-map bin first,
    then the level-2 grid in row-major order."""
    if height < 1 or width < 1:
        raise ShapeError(f"fspp_bins: map extents must be positive, got {height}x{width}")
    regions = [(0, height, 0, width)]
    if spec.grid is not None:
        rows, cols = spec.grid
        for y0, y1 in _axis_spans(rows, height):
            for x0, x1 in _axis_spans(cols, width):
                regions.append((y0, y1, x0, x1))
    return regions


class FsppResult(NamedTuple):
    """Bin maxima (channel-major, in-graph) and per-bin argmax coordinates."""

    scores: Tensor
    locations: np.ndarray  # (channels * bins, 2) int64 rows of (y, x)


def fspp_forward(x, spec):
    """Max-pool a C×H×W map over the pyramid bins.

    The output length is C * bins_per_channel regardless of H and W. Each
    bin's score is the maximum over its region; its location is the argmax
    with ties broken by lowest row then lowest column. Backward routes each
    bin's upstream gradient to its argmax element only, accumulating where
    overlapping bins share an argmax.
    """
    a = x
    if a.data.ndim != 3:
        raise ShapeError(f"fspp_forward: expected C×H×W, got {a.data.shape}")
    C, H, W = a.data.shape
    regions = fspp_bins(spec, H, W)
    nb = len(regions)
    scores = np.empty((C, nb))
    locs = np.empty((C, nb, 2), dtype=np.int64)
    for b, (y0, y1, x0, x1) in enumerate(regions):
        flat = a.data[:, y0:y1, x0:x1].reshape(C, -1)
        idx = flat.argmax(axis=1)
        scores[:, b] = flat[np.arange(C), idx]
        locs[:, b, 0] = y0 + idx // (x1 - x0)
        locs[:, b, 1] = x0 + idx % (x1 - x0)

    def bw(g):
        if not a.requires_grad:
            return
        g2 = g.reshape(C, nb)
        ga = np.zeros_like(a.data)
        cs = np.arange(C)
        for b in range(nb):
            np.add.at(ga, (cs, locs[:, b, 0], locs[:, b, 1]), g2[:, b])
        a.accumulate_grad(ga)

    out = Tensor._from_op(scores.reshape(-1), (a,), "fspp", bw)
    return FsppResult(out, locs.reshape(-1, 2))


def fspp_bin_count(branch_configs):
    """Total detector bins over (channels, PyramidSpec) branch pairs."""
    return sum(int(channels) * spec.bins_per_channel for channels, spec in branch_configs)
