"""Node descriptors: optical flow, texture and intensity measurements.

Each instance yields one vector: flow magnitude/orientation histograms with
six descriptive statistics each (computed on the raw values, not the bins),
followed by a local-binary-pattern histogram and an intensity histogram for
each of the four RoI images: current frame, previous frame, background, and
the absolute current/background difference.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .background import BackgroundModel, extract_roi
from .media import Frame, Instance, MediaError

STATS_PER_HISTOGRAM = 6

# Structure-tensor eigenvalues below this are treated as zero rank.
_FLOW_EIGEN_TOL = 1e-6

_FEATURES_MAGIC = b"GMFM"


class FeatureError(MediaError):
    """Inputs violate a feature-extraction contract."""


@dataclass(frozen=True)
class FeatureLayout:
    """Bin counts and flow parameters that fix the descriptor dimension."""

    flow_magnitude_bins: int = 32
    flow_orientation_bins: int = 32
    lbp_bins: int = 256
    intensity_bins: int = 64
    flow_magnitude_max: float = 16.0
    flow_window: int = 5

    def __post_init__(self):
        for name in ("flow_magnitude_bins", "flow_orientation_bins",
                     "lbp_bins", "intensity_bins"):
            if getattr(self, name) < 1:
                raise FeatureError(f"{name} must be >= 1")
        if self.flow_window < 3 or self.flow_window % 2 == 0:
            raise FeatureError("flow window must be odd and >= 3")
        if self.flow_magnitude_max <= 0:
            raise FeatureError("flow magnitude range must be positive")

    @property
    def dimension(self) -> int:
        per_hist = STATS_PER_HISTOGRAM
        return ((self.flow_magnitude_bins + per_hist)
                + (self.flow_orientation_bins + per_hist)
                + 4 * self.lbp_bins
                + 4 * self.intensity_bins)


@dataclass(frozen=True, eq=False)
class NodeFeatures:
    """Descriptor vector of one node, with the segments that came up empty."""

    node_id: int
    vector: np.ndarray
    degenerate: frozenset[str] = frozenset()


@dataclass(eq=False)
class FeatureMatrix:
    """Node descriptors stacked so that row i belongs to node_id i."""

    layout: FeatureLayout
    values: np.ndarray  # (N, C) float64

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != self.layout.dimension:
            raise FeatureError(
                f"feature matrix shape {self.values.shape} does not match "
                f"layout dimension {self.layout.dimension}")

    @property
    def num_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def dimension(self) -> int:
        return self.values.shape[1]

    @staticmethod
    def from_nodes(layout: FeatureLayout, nodes) -> "FeatureMatrix":
        nodes = sorted(nodes, key=lambda n: n.node_id)
        for row, node in enumerate(nodes):
            if node.node_id != row:
                raise FeatureError("node_ids must be a gap-free 0..N-1 range")
        values = np.stack([n.vector for n in nodes]) if nodes else \
            np.zeros((0, layout.dimension))
        return FeatureMatrix(layout=layout, values=values)


def _pixels_of(frame) -> np.ndarray:
    return frame.pixels if isinstance(frame, Frame) else np.asarray(frame, dtype=np.float64)


# ---------------------------------------------------------------------------
# Optical flow
# ---------------------------------------------------------------------------

def _box_sums(values: np.ndarray, rows: np.ndarray, cols: np.ndarray,
              half: int) -> np.ndarray:
    """Sum of ``values`` over a (2*half+1)^2 window at each pixel, clipped
    to the image bounds, via a summed-area table."""
    h, w = values.shape
    sat = np.zeros((h + 1, w + 1))
    np.cumsum(np.cumsum(values, axis=0), axis=1, out=sat[1:, 1:])
    r0 = np.clip(rows - half, 0, h)
    r1 = np.clip(rows + half + 1, 0, h)
    c0 = np.clip(cols - half, 0, w)
    c1 = np.clip(cols + half + 1, 0, w)
    return sat[r1, c1] - sat[r0, c1] - sat[r1, c0] + sat[r0, c0]


def lucas_kanade(prev, curr, support, window: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Estimate per-pixel flow (u, v) = (column, row displacement) at the
    support pixels by solving the 2x2 normal equations over a square window.

    Spatial gradients are central differences on the earlier frame; the
    temporal derivative is the forward difference. The structure tensor is
    solved rank-aware: full rank gives the least-squares flow, rank one gives
    the normal flow along the dominant gradient, and rank zero (both
    eigenvalues below 1e-6) yields a zero vector with its degeneracy flag set.

    Returns (flows, degenerate) where flows is (n, 2) float and degenerate is
    an (n,) bool array, both in the row-major order of the sorted support set.
    """
    prev_px = _pixels_of(prev)
    curr_px = _pixels_of(curr)
    if prev_px.shape != curr_px.shape:
        raise FeatureError(
            f"frame size mismatch: {prev_px.shape} vs {curr_px.shape}")
    if window < 3 or window % 2 == 0:
        raise FeatureError("window must be odd and >= 3")
    pts = np.asarray(sorted(support) if isinstance(support, (set, frozenset))
                     else support, dtype=np.int64).reshape(-1, 2)
    if pts.size == 0:
        raise FeatureError("empty flow support")
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
    if (pts.min() < 0 or pts[:, 0].max() >= prev_px.shape[0]
            or pts[:, 1].max() >= prev_px.shape[1]):
        raise FeatureError("support pixel outside frame")

    gy, gx = np.gradient(prev_px)  # central differences, one-sided at borders
    gt = curr_px - prev_px
    half = window // 2
    rows, cols = pts[:, 0], pts[:, 1]
    sxx = _box_sums(gx * gx, rows, cols, half)
    sxy = _box_sums(gx * gy, rows, cols, half)
    syy = _box_sums(gy * gy, rows, cols, half)
    bx = -_box_sums(gx * gt, rows, cols, half)
    by = -_box_sums(gy * gt, rows, cols, half)

    trace = sxx + syy
    disc = np.sqrt(np.maximum((sxx - syy) ** 2 + 4.0 * sxy ** 2, 0.0))
    lam_max = 0.5 * (trace + disc)
    lam_min = 0.5 * (trace - disc)

    flows = np.zeros((len(pts), 2))
    degenerate = lam_max < _FLOW_EIGEN_TOL

    full = lam_min >= _FLOW_EIGEN_TOL
    if np.any(full):
        det = sxx[full] * syy[full] - sxy[full] ** 2
        flows[full, 0] = (syy[full] * bx[full] - sxy[full] * by[full]) / det
        flows[full, 1] = (sxx[full] * by[full] - sxy[full] * bx[full]) / det

    rank1 = (~full) & (~degenerate)
    if np.any(rank1):
        # Normal flow: project onto the eigenvector of the large eigenvalue.
        e1 = np.stack([sxy[rank1], lam_max[rank1] - sxx[rank1]], axis=1)
        alt = np.stack([lam_max[rank1] - syy[rank1], sxy[rank1]], axis=1)
        use_alt = np.linalg.norm(alt, axis=1) > np.linalg.norm(e1, axis=1)
        e1[use_alt] = alt[use_alt]
        e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
        coeff = (e1[:, 0] * bx[rank1] + e1[:, 1] * by[rank1]) / lam_max[rank1]
        flows[rank1] = e1 * coeff[:, None]

    return flows, degenerate


# ---------------------------------------------------------------------------
# Histograms
# ---------------------------------------------------------------------------

def _stats(values: np.ndarray) -> np.ndarray:
    """(min, max, mean, std, mean absolute deviation, range)."""
    mean = float(values.mean())
    lo = float(values.min())
    hi = float(values.max())
    return np.array([lo, hi, mean, float(values.std()),
                     float(np.abs(values - mean).mean()), hi - lo])


def flow_features(flows, layout: FeatureLayout) -> np.ndarray:
    """Magnitude histogram + stats, then orientation histogram + stats.

    Magnitudes are binned over [0, flow_magnitude_max] with overflow clamped
    into the last bin; orientations over [-pi, pi]. An empty flow list, or one
    whose vectors are all exactly zero (no motion evidence), yields an
    all-zero segment.
    """
    flows = np.asarray(flows, dtype=np.float64).reshape(-1, 2)
    size = (layout.flow_magnitude_bins + STATS_PER_HISTOGRAM
            + layout.flow_orientation_bins + STATS_PER_HISTOGRAM)
    if flows.shape[0] == 0 or not np.any(flows):
        return np.zeros(size)
    mags = np.hypot(flows[:, 0], flows[:, 1])
    oris = np.arctan2(flows[:, 1], flows[:, 0])
    mag_hist, _ = np.histogram(np.clip(mags, 0.0, layout.flow_magnitude_max),
                               bins=layout.flow_magnitude_bins,
                               range=(0.0, layout.flow_magnitude_max))
    ori_hist, _ = np.histogram(oris, bins=layout.flow_orientation_bins,
                               range=(-np.pi, np.pi))
    n = flows.shape[0]
    return np.concatenate([mag_hist / n, _stats(mags), ori_hist / n, _stats(oris)])


def lbp_histogram(image, bins: int = 256) -> tuple[np.ndarray, bool]:
    """Normalised histogram of 8-neighbour local binary patterns (radius 1).

    Bit b is set when the b-th neighbour, ordered clockwise from the top-left,
    is >= the centre. Interior pixels only. Images smaller than 3x3 return an
    all-zero histogram and a degeneracy flag.
    """
    px = _pixels_of(image)
    if bins < 1:
        raise FeatureError("bins must be >= 1")
    if px.shape[0] < 3 or px.shape[1] < 3:
        return np.zeros(bins), True
    centre = px[1:-1, 1:-1]
    neighbours = (
        px[:-2, :-2], px[:-2, 1:-1], px[:-2, 2:], px[1:-1, 2:],
        px[2:, 2:], px[2:, 1:-1], px[2:, :-2], px[1:-1, :-2],
    )
    codes = np.zeros(centre.shape, dtype=np.int64)
    for bit, nb in enumerate(neighbours):
        codes |= (nb >= centre).astype(np.int64) << bit
    hist, _ = np.histogram(codes, bins=bins, range=(0, 256))
    return hist / codes.size, False


def intensity_histogram(image, bins: int) -> tuple[np.ndarray, bool]:
    """Normalised intensity histogram over [0, 1] (last bin right-closed)."""
    px = _pixels_of(image)
    if bins < 1:
        raise FeatureError("bins must be >= 1")
    if px.size == 0:
        return np.zeros(bins), True
    hist, _ = np.histogram(px.ravel(), bins=bins, range=(0.0, 1.0))
    return hist / px.size, False


# ---------------------------------------------------------------------------
# Node descriptors
# ---------------------------------------------------------------------------

_ROI_NAMES = ("current", "previous", "background", "difference")


def node_features(frame_t: Frame, frame_prev: Frame, background: BackgroundModel,
                  inst: Instance, layout: FeatureLayout) -> NodeFeatures:
    """Full descriptor of one instance.

    Flow is supported on the instance's exact pixel set between frame_prev
    and frame_t; texture and intensity are measured on the bounding-box RoI
    of the four images (current, previous, background, |current-background|).
    """
    shapes = {frame_t.pixels.shape, frame_prev.pixels.shape,
              background.image.pixels.shape}
    if len(shapes) != 1:
        raise FeatureError("frames and background must share dimensions")

    flows, flow_degen = lucas_kanade(frame_prev, frame_t, inst.mask_pixels,
                                     window=layout.flow_window)
    segments = [flow_features(flows, layout)]
    degenerate = set()
    if bool(np.all(flow_degen)) or not np.any(flows):
        degenerate.add("flow")

    roi_t = extract_roi(frame_t, inst.bbox)
    roi_prev = extract_roi(frame_prev, inst.bbox)
    roi_bg = extract_roi(background.image, inst.bbox)
    diff = np.abs(roi_t.pixels - roi_bg.pixels)
    for name, roi in zip(_ROI_NAMES, (roi_t.pixels, roi_prev.pixels, roi_bg.pixels, diff)):
        lbp, lbp_degen = lbp_histogram(roi, layout.lbp_bins)
        inten, inten_degen = intensity_histogram(roi, layout.intensity_bins)
        segments.append(lbp)
        segments.append(inten)
        if lbp_degen:
            degenerate.add(f"lbp:{name}")
        if inten_degen:
            degenerate.add(f"intensity:{name}")

    vector = np.concatenate(segments)
    if vector.shape[0] != layout.dimension:
        raise FeatureError("descriptor length disagrees with layout")
    return NodeFeatures(node_id=inst.node_id, vector=vector,
                        degenerate=frozenset(degenerate))


def extract_features(videos, layout: FeatureLayout) -> FeatureMatrix:
    """Run node_features over an iterable of per-video bundles.

    Each bundle is (frames, background, instances); frame lookup is by
    frame_index, and the first frame of a video doubles as its own
    predecessor, which forces zero flow there.
    """
    nodes = []
    for frames, bg, instances in videos:
        by_index = {f.frame_index: f for f in frames}
        order = sorted(by_index)
        prev_of = {idx: order[max(0, i - 1)] for i, idx in enumerate(order)}
        for inst in instances:
            if inst.frame_index not in by_index:
                raise FeatureError(
                    f"instance on frame {inst.frame_index} has no matching frame")
            frame_t = by_index[inst.frame_index]
            frame_prev = by_index[prev_of[inst.frame_index]]
            nodes.append(node_features(frame_t, frame_prev, bg, inst, layout))
    return FeatureMatrix.from_nodes(layout, nodes)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIIIIIIIf")  # magic, N, C, 4 bin counts, window, mag_max


def save_features(matrix: FeatureMatrix, path) -> None:
    """Binary layout: little-endian header followed by N*C float32 values."""
    lay = matrix.layout
    header = _HEADER.pack(
        _FEATURES_MAGIC, matrix.num_nodes, matrix.dimension,
        lay.flow_magnitude_bins, lay.flow_orientation_bins,
        lay.lbp_bins, lay.intensity_bins, lay.flow_window,
        lay.flow_magnitude_max)
    Path(path).write_bytes(header + matrix.values.astype("<f4").tobytes())


def load_features(path) -> FeatureMatrix:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size or data[:4] != _FEATURES_MAGIC:
        raise FeatureError(f"{path}: not a feature matrix file")
    (_, n, c, fm, fo, lbp, inten, window, mag_max) = _HEADER.unpack_from(data)
    layout = FeatureLayout(flow_magnitude_bins=fm, flow_orientation_bins=fo,
                           lbp_bins=lbp, intensity_bins=inten,
                           flow_magnitude_max=float(mag_max), flow_window=window)
    if c != layout.dimension:
        raise FeatureError(f"{path}: header dimension {c} does not match layout")
    values = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
    if values.size != n * c:
        raise FeatureError(f"{path}: payload size mismatch")
    return FeatureMatrix(layout=layout, values=values.reshape(n, c).astype(np.float64))


def export_features_csv(matrix: FeatureMatrix, path) -> None:
    """Debug export: one row per node, node_id first."""
    with open(path, "w") as fh:
        fh.write("node_id," + ",".join(f"f{i}" for i in range(matrix.dimension)) + "\n")
        for node_id, row in enumerate(matrix.values):
            fh.write(str(node_id) + "," + ",".join(repr(float(v)) for v in row) + "\n")
