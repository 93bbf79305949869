"""Attribute localization from detector bin responses.

The pipeline: per-bin correlation statistics over a labeled split (average
score on positives vs negatives and their ratio), then per-image fusion of
Gaussian-masked activation maps weighted by those statistics into a
possibility map, then weighted k-means over the above-mean pixels to pick
candidate centers. A body-shaped informative region falls out of averaging
the maps of positively predicted attributes.
"""

from dataclasses import dataclass

import numpy as np

from . import model as model_mod
from .imageio import bilinear_resize
from .tensor import FormatError

RS_GUARD = 1e-9


@dataclass(frozen=True)
class CorrelationStats:
    """Per-bin statistics for one attribute over a training split."""

    pave: np.ndarray
    nave: np.ndarray
    rs: np.ndarray


@dataclass(frozen=True)
class LocationResult:
    centroids: np.ndarray  # (k, 2) float rows of (y, x), by descending mass
    masses: np.ndarray  # (k,) total member weight per cluster
    truncated: bool = False  # fewer above-mean pixels than requested clusters


def collect_scores(state, samples):
    """Bin score matrix (N×B) of pooled maxima over a dataset."""
    rows = []
    for s in samples:
        result = model_mod.forward(state, s.image)
        rows.append(np.concatenate([d.scores.data for d in result.detections]))
    return np.stack(rows)


def estimate_relationship(scores, labels):
    """Average bin score on positive vs negative samples and their ratio.

    Needs at least one positive and one negative label; the negative
    average is floored at 1e-9 so the ratio stays finite. Accumulation
    runs in sample order, so an independent pass-by-pass recomputation
    reproduces the result bit for bit.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.ndim != 2 or labels.shape != (scores.shape[0],):
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} disagree")
    npos = int(np.count_nonzero(labels == 1.0))
    nneg = int(np.count_nonzero(labels == 0.0))
    if npos == 0 or nneg == 0:
        raise ValueError("relationship strength needs both positive and negative samples")
    pave = np.zeros(scores.shape[1])
    nave = np.zeros(scores.shape[1])
    for i in range(scores.shape[0]):
        if labels[i] == 1.0:
            pave += scores[i]
        else:
            nave += scores[i]
    pave /= npos
    nave /= nneg
    rs = pave / np.maximum(nave, RS_GUARD)
    return CorrelationStats(pave, nave, rs)


def gaussian_mask(map_shape, center, var):
    """exp(-((i-cy)^2 + (j-cx)^2) / (2 var)) on an H×W grid; 1 at the center."""
    if var <= 0:
        raise ValueError(f"var must be positive, got {var}")
    h, w = map_shape
    cy, cx = center
    yy = (np.arange(h) - cy) ** 2
    xx = (np.arange(w) - cx) ** 2
    return np.exp(-(yy[:, None] + xx[None, :]) / (2.0 * var))


def bin_fusion_weights(detections, stats, prediction):
    """Normalized per-bin fusion weights: score * norm_score * rs over all
    bins, scaled to sum 1. norm_score divides each score by the positive
    average when the attribute is predicted present (>= 0.5), else by the
    negative average."""
    scores = np.concatenate([d.scores.data for d in detections])
    ref = stats.pave if prediction >= 0.5 else stats.nave
    if ref.shape != scores.shape:
        raise ValueError(f"stats cover {ref.shape[0]} bins, model produced {scores.shape[0]}")
    norm_score = scores / np.maximum(ref, RS_GUARD)
    raw = scores * norm_score * stats.rs
    total = raw.sum()
    if total <= 0:
        raise ValueError("no active bins: fusion weight normalizer is zero")
    return raw / total


def estimate_shape(prediction, detections, activation_maps, stats, image_shape):
    """Possibility map of one attribute at image resolution.

    Every bin contributes its detector's activation map, masked by a
    Gaussian centered at the bin's argmax with variance
    (W_img * H_img) / (W_d * H_d), resized bilinearly to the image and
    scaled by the bin's fusion weight.
    """
    h_img, w_img = image_shape
    weights = bin_fusion_weights(detections, stats, prediction)
    out = np.zeros((h_img, w_img))
    offset = 0
    for det, act in zip(detections, activation_maps):
        amap = act.data
        channels, h_d, w_d = amap.shape
        nbins = det.scores.data.size // channels
        var = (w_img * h_img) / (w_d * h_d)
        for c in range(channels):
            for k in range(nbins):
                idx = offset + c * nbins + k
                w = weights[idx]
                if w == 0.0:
                    continue
                y, x = det.locations[c * nbins + k]
                mask = gaussian_mask((h_d, w_d), (y, x), var)
                out += w * bilinear_resize(amap[c] * mask, image_shape)
        offset += det.scores.data.size
    return out


def locate(heat, k):
    """Weighted k-means over above-mean pixels of a possibility map.

    Pixels with value strictly greater than the map mean are the sample
    set, weighted by their values. Initialization is deterministic:
    first center at the heaviest pixel, then farthest-point; iteration
    stops after 100 rounds or when no centroid moves 0.5 px. Clusters are
    returned by descending total member weight; if fewer points than
    clusters exist the result is truncated and flagged.
    """
    heat = np.asarray(heat, dtype=np.float64)
    if k < 1:
        raise ValueError(f"candidate count must be >= 1, got {k}")
    mean = heat.mean()
    pts = np.argwhere(heat > mean).astype(np.float64)
    if pts.shape[0] == 0:
        raise ValueError("possibility map is constant: no above-mean pixels")
    wts = heat[heat > mean]
    truncated = pts.shape[0] < k
    k_eff = min(k, pts.shape[0])

    centers = np.empty((k_eff, 2))
    centers[0] = pts[int(np.argmax(wts))]
    if k_eff > 1:
        d2 = np.sum((pts - centers[0]) ** 2, axis=1)
        for j in range(1, k_eff):
            centers[j] = pts[int(np.argmax(d2))]
            d2 = np.minimum(d2, np.sum((pts - centers[j]) ** 2, axis=1))

    assign = np.zeros(pts.shape[0], dtype=np.int64)
    for _ in range(100):
        dists = np.sum((pts[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        assign = dists.argmin(axis=1)
        moved = 0.0
        for j in range(k_eff):
            member = assign == j
            total = wts[member].sum()
            if total > 0:
                new = (wts[member][:, None] * pts[member]).sum(axis=0) / total
                moved = max(moved, float(np.abs(new - centers[j]).max()))
                centers[j] = new
        if moved < 0.5:
            break

    masses = np.array([wts[assign == j].sum() for j in range(k_eff)])
    order = np.argsort(-masses, kind="stable")
    return LocationResult(centers[order], masses[order], truncated)


def body_region(maps):
    """Informative-region estimate from the possibility maps of the
    positively predicted attributes: peak-normalize each map, average,
    zero everything below the average map's own mean, rescale to peak 1."""
    if not maps:
        raise ValueError("body region needs at least one positively predicted attribute")
    acc = np.zeros_like(np.asarray(maps[0], dtype=np.float64))
    for m in maps:
        m = np.asarray(m, dtype=np.float64)
        if m.shape != acc.shape:
            raise ValueError(f"possibility maps disagree in shape: {m.shape} vs {acc.shape}")
        peak = m.max()
        acc += m / peak if peak > 0 else m
    acc /= len(maps)
    out = np.where(acc > acc.mean(), acc, 0.0)
    peak = out.max()
    return out / peak if peak > 0 else out


def rank_bins(stats, branch_index, k):
    """Top-k bins by descending relationship strength, ties by bin index.

    Returns (bin index, 1-based branch level, rs) triples.
    """
    rs = stats.rs
    order = np.lexsort((np.arange(rs.size), -rs))[: int(k)]
    return [(int(i), int(branch_index[i]), float(rs[i])) for i in order]


# -- stats serialization ---------------------------------------------------------


def write_stats_csv(path, per_attribute, branch_index):
    """CSV rows `attribute,bin,branch,PAve,NAve,RS` for every attribute."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("attribute,bin,branch,PAve,NAve,RS\n")
        for name, stats in per_attribute.items():
            for i in range(stats.rs.size):
                fh.write(
                    f"{name},{i},{int(branch_index[i])},"
                    f"{float(stats.pave[i])!r},{float(stats.nave[i])!r},{float(stats.rs[i])!r}\n"
                )


def read_stats_csv(path):
    """Returns (per-attribute CorrelationStats dict, branch index array)."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "attribute,bin,branch,PAve,NAve,RS":
        raise FormatError("stats csv line 1: bad header")
    rows = {}
    branches = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 6:
            raise FormatError(f"stats csv line {lineno}: expected 6 columns")
        name, bin_str, branch, pave, nave, rs = parts
        try:
            rows.setdefault(name, []).append((int(bin_str), float(pave), float(nave), float(rs)))
            branches[int(bin_str)] = int(branch)
        except ValueError:
            raise FormatError(f"stats csv line {lineno}: bad numeric field") from None
    out = {}
    size = None
    for name, items in rows.items():
        items.sort()
        bins = [i for i, _, _, _ in items]
        if bins != list(range(len(bins))):
            raise FormatError(f"stats csv: attribute {name!r} has gaps in bin indices")
        if size is None:
            size = len(bins)
        elif len(bins) != size:
            raise FormatError(f"stats csv: attribute {name!r} covers {len(bins)} bins, expected {size}")
        out[name] = CorrelationStats(
            np.array([p for _, p, _, _ in items]),
            np.array([q for _, _, q, _ in items]),
            np.array([r for _, _, _, r in items]),
        )
    branch_index = np.array([branches[i] for i in range(size)], dtype=np.int64)
    return out, branch_index
