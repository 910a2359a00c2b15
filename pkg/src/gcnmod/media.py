"""Frame, instance-mask and ground-truth ingestion, plus synthetic test sequences.

On-disk conventions (CDNet2014 style, image sequences only):

* frames: ``inNNNNNN.pgm`` / ``.png`` / ``.jpg``, 8-bit grayscale or 24-bit RGB,
  intensities normalised to [0, 1] on load (RGB reduced with BT.601 luma).
* instance masks: either a directory of per-frame 16-bit label images
  (0 = no instance, n > 0 = instance label), or a single line-delimited text
  file in the RLE format described under :func:`write_instances_rle`.
* ground truth: per-frame 8-bit images, 255 = foreground, 85/170 = unknown,
  every other value (including shadow markers) counts as background.
  Unknown pixels are excluded from labelling and scoring downstream.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

# Ground-truth pixel codes used throughout the pipeline.
GT_BACKGROUND = 0
GT_FOREGROUND = 1
GT_UNKNOWN = 2

# Raw 8-bit ground-truth values (CDNet2014 convention).
_GT_RAW_FOREGROUND = 255
_GT_RAW_UNKNOWN = (85, 170)

# ITU-R BT.601 luma weights.
_LUMA = (0.299, 0.587, 0.114)

_IMAGE_EXTENSIONS = (".pgm", ".png", ".jpg", ".jpeg", ".bmp")

# Connected components use the full 8-neighbourhood, so diagonally touching
# pixels belong to one instance.
_CC_STRUCTURE = np.ones((3, 3), dtype=bool)


class MediaError(Exception):
    """Base error for ingestion and synthesis failures."""


class NoFramesError(MediaError):
    """Directory yielded fewer than two readable frames."""


class DimensionMismatchError(MediaError):
    """Images of one video disagree on width/height."""


class MalformedMaskError(MediaError):
    """Instance mask file violates the documented format."""


class TrajectoryError(MediaError):
    """A synthetic object leaves the frame bounds."""


@dataclass(frozen=True, eq=False)
class Frame:
    """One grayscale video frame with intensities in [0, 1]."""

    frame_index: int
    pixels: np.ndarray  # (height, width) float64, row-major

    def __post_init__(self):
        p = np.ascontiguousarray(np.asarray(self.pixels, dtype=np.float64))
        if p.ndim != 2:
            raise MediaError(f"frame pixels must be 2-D, got shape {p.shape}")
        if p.size and (float(p.min()) < 0.0 or float(p.max()) > 1.0):
            raise MediaError("frame intensities must lie in [0, 1]")
        p.setflags(write=False)
        object.__setattr__(self, "pixels", p)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True, eq=False)
class Instance:
    """One segmented object in one frame, the unit classified by the network.

    ``bbox`` is ``(x, y, w, h)`` in pixel coordinates (x = column of the left
    edge, y = row of the top edge); ``mask_pixels`` holds ``(row, col)`` pairs.
    """

    video_id: str
    frame_index: int
    bbox: tuple[int, int, int, int]
    mask_pixels: frozenset[tuple[int, int]]
    node_id: int = -1

    def __post_init__(self):
        if not self.mask_pixels:
            raise MediaError("instance mask must be non-empty")
        if tuple(self.bbox) != tight_bbox(self.mask_pixels):
            raise MediaError(
                f"bbox {self.bbox} is not the tight bounds of the mask")

    def mask_array(self) -> np.ndarray:
        """Mask pixels as an (n, 2) int array sorted row-major."""
        arr = np.array(sorted(self.mask_pixels), dtype=np.int64)
        return arr

    def mask_bool(self, shape: tuple[int, int]) -> np.ndarray:
        """Boolean image of the mask on a frame of the given (height, width)."""
        out = np.zeros(shape, dtype=bool)
        arr = self.mask_array()
        out[arr[:, 0], arr[:, 1]] = True
        return out


@dataclass(frozen=True, eq=False)
class GroundTruthMask:
    """Per-pixel labels for one frame, coded with GT_* constants."""

    video_id: str
    frame_index: int
    labels: np.ndarray  # (height, width) uint8 in {0, 1, 2}

    def __post_init__(self):
        lab = np.ascontiguousarray(np.asarray(self.labels, dtype=np.uint8))
        if lab.ndim != 2:
            raise MediaError("ground truth must be 2-D")
        if lab.size and int(lab.max()) > GT_UNKNOWN:
            raise MediaError("ground-truth codes must be 0, 1 or 2")
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)


def tight_bbox(mask_pixels) -> tuple[int, int, int, int]:
    """Minimal axis-aligned (x, y, w, h) rectangle containing the pixels."""
    arr = np.asarray(sorted(mask_pixels), dtype=np.int64)
    r0, c0 = arr.min(axis=0)
    r1, c1 = arr.max(axis=0)
    return (int(c0), int(r0), int(c1 - c0 + 1), int(r1 - r0 + 1))


def to_grayscale(r, g, b):
    """BT.601 luma of an RGB triple; inputs and output clamped to [0, 1]."""
    r = np.clip(r, 0.0, 1.0)
    g = np.clip(g, 0.0, 1.0)
    b = np.clip(b, 0.0, 1.0)
    return np.clip(_LUMA[0] * r + _LUMA[1] * g + _LUMA[2] * b, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Image files
# ---------------------------------------------------------------------------

def _read_pgm(path: Path) -> np.ndarray:
    """Read a binary (P5) or ASCII (P2) PGM as an integer array."""
    data = path.read_bytes()
    tokens = []
    pos = 0
    # Header = magic, width, height, maxval, with '#' comments allowed.
    while len(tokens) < 4:
        if pos >= len(data):
            raise MalformedMaskError(f"{path}: truncated PGM header")
        chunk = data[pos:pos + 1]
        if chunk.isspace():
            pos += 1
        elif chunk == b"#":
            pos = data.index(b"\n", pos) + 1
        else:
            end = pos
            while end < len(data) and not data[end:end + 1].isspace():
                end += 1
            tokens.append(data[pos:end])
            pos = end
    magic, width, height, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic == b"P5":
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        body = data[pos + 1:]
        count = width * height
        arr = np.frombuffer(body, dtype=dtype, count=count)
        return arr.reshape(height, width).astype(np.uint16 if maxval > 255 else np.uint8)
    if magic == b"P2":
        values = np.array(data[pos:].split(), dtype=np.int64)
        return values.reshape(height, width).astype(np.uint16 if maxval > 255 else np.uint8)
    raise MalformedMaskError(f"{path}: unsupported PGM magic {magic!r}")


def _write_pgm(path: Path, array: np.ndarray, maxval: int) -> None:
    """Write a binary PGM; 16-bit payloads are big-endian per the format."""
    arr = np.asarray(array)
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n".encode("ascii")
    if maxval > 255:
        body = arr.astype(">u2").tobytes()
    else:
        body = arr.astype("u1").tobytes()
    path.write_bytes(header + body)


def read_image_gray(path: Path) -> np.ndarray:
    """Load an image as float grayscale in [0, 1] (RGB reduced via BT.601)."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        raw = _read_pgm(path)
        maxval = 65535.0 if raw.dtype == np.uint16 else 255.0
        return raw.astype(np.float64) / maxval
    from PIL import Image

    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim == 3:
        rgb = arr[..., :3].astype(np.float64) / 255.0
        return to_grayscale(rgb[..., 0], rgb[..., 1], rgb[..., 2])
    if arr.dtype in (np.uint16, np.int32):  # 16-bit PNG opens as mode I
        return arr.astype(np.float64) / 65535.0
    if arr.dtype == np.bool_:
        return arr.astype(np.float64)
    return arr.astype(np.float64) / 255.0


def read_label_image(path: Path) -> np.ndarray:
    """Load an instance label image as integer labels (0 = no instance)."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return _read_pgm(path).astype(np.int64)
    from PIL import Image

    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim != 2:
        raise MalformedMaskError(f"{path}: label image must be single channel")
    return arr.astype(np.int64)


_INDEX_RE = re.compile(r"(\d+)")


def _frame_index_of(path: Path) -> int:
    m = _INDEX_RE.findall(path.stem)
    if not m:
        raise MediaError(f"cannot parse a frame index from {path.name!r}")
    return int(m[-1])


def load_sequence(directory, pattern: str = "in*") -> list[Frame]:
    """Load a frame sequence sorted by the index parsed from the filenames.

    Raises NoFramesError when fewer than two frames match, and
    DimensionMismatchError when the images disagree on size.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise MediaError(f"no such directory: {directory}")
    paths = [p for p in sorted(directory.glob(pattern))
             if p.suffix.lower() in _IMAGE_EXTENSIONS]
    if len(paths) < 2:
        raise NoFramesError(f"no frames (need at least 2, found {len(paths)}) in {directory}")
    frames = []
    shape = None
    for path in sorted(paths, key=_frame_index_of):
        pixels = read_image_gray(path)
        if shape is None:
            shape = pixels.shape
        elif pixels.shape != shape:
            raise DimensionMismatchError(
                f"{path.name}: dimension mismatch {pixels.shape} vs {shape}")
        frames.append(Frame(frame_index=_frame_index_of(path), pixels=pixels))
    return frames


# ---------------------------------------------------------------------------
# Instance masks
# ---------------------------------------------------------------------------

def _instances_from_labels(labels: np.ndarray, video_id: str, frame_index: int) -> list[Instance]:
    """Split a label image into one Instance per connected labelled region."""
    instances = []
    for value in np.unique(labels):
        if value <= 0:
            continue
        components, count = ndimage.label(labels == value, structure=_CC_STRUCTURE)
        for comp in range(1, count + 1):
            rows, cols = np.nonzero(components == comp)
            pixels = frozenset(zip(rows.tolist(), cols.tolist()))
            instances.append(Instance(
                video_id=video_id,
                frame_index=frame_index,
                bbox=tight_bbox(pixels),
                mask_pixels=pixels,
            ))
    return instances


def encode_rle(mask_pixels, height: int, width: int) -> str:
    """Encode a pixel set as 'H W count value count value ...' (row-major runs)."""
    flat = np.zeros(height * width, dtype=bool)
    arr = np.asarray(sorted(mask_pixels), dtype=np.int64)
    if arr.size:
        if arr.min() < 0 or arr[:, 0].max() >= height or arr[:, 1].max() >= width:
            raise MalformedMaskError("mask pixel outside frame")
        flat[arr[:, 0] * width + arr[:, 1]] = True
    tokens = [str(height), str(width)]
    boundaries = np.flatnonzero(np.diff(flat.astype(np.int8)))
    starts = np.concatenate(([0], boundaries + 1))
    ends = np.concatenate((boundaries + 1, [flat.size]))
    for s, e in zip(starts, ends):
        tokens.append(str(int(e - s)))
        tokens.append("1" if flat[s] else "0")
    return " ".join(tokens)


def decode_rle(rle: str) -> tuple[frozenset[tuple[int, int]], int, int]:
    """Inverse of :func:`encode_rle`; returns (pixels, height, width)."""
    try:
        values = [int(tok) for tok in rle.split()]
    except ValueError as exc:
        raise MalformedMaskError(f"non-integer RLE token: {exc}") from exc
    if len(values) < 2 or len(values) % 2 != 0:
        raise MalformedMaskError("RLE must be 'H W' followed by count/value pairs")
    height, width = values[0], values[1]
    if height <= 0 or width <= 0:
        raise MalformedMaskError("RLE dimensions must be positive")
    flat = np.zeros(height * width, dtype=bool)
    pos = 0
    for count, value in zip(values[2::2], values[3::2]):
        if count <= 0 or value not in (0, 1):
            raise MalformedMaskError(f"bad RLE run ({count}, {value})")
        if pos + count > flat.size:
            raise MalformedMaskError("RLE runs exceed frame size")
        if value:
            flat[pos:pos + count] = True
        pos += count
    if pos != flat.size:
        raise MalformedMaskError("RLE runs do not cover the frame")
    rows, cols = np.divmod(np.flatnonzero(flat), width)
    return frozenset(zip(rows.tolist(), cols.tolist())), height, width


def load_instances(path, video_id: str | None = None) -> list[Instance]:
    """Load instances from a label-image directory or an RLE text file.

    Label images are split into connected components (one Instance per
    component, so a label reused for disjoint blobs yields several nodes);
    RLE lines are taken verbatim, one Instance per line, which preserves
    overlapping and disconnected masks exactly. Bounding boxes are always
    recomputed as the tight bounds of the pixels. node_ids are sequential
    in load order.
    """
    path = Path(path)
    if path.is_dir():
        instances = []
        files = sorted((p for p in path.iterdir() if p.suffix.lower() in _IMAGE_EXTENSIONS),
                       key=_frame_index_of)
        for file in files:
            labels = read_label_image(file)
            vid = video_id if video_id is not None else path.parent.name
            instances.extend(_instances_from_labels(labels, vid, _frame_index_of(file)))
    elif path.is_file():
        instances = []
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",", 3)
            if len(parts) != 4:
                raise MalformedMaskError(f"{path}:{lineno}: expected 'video,frame,label,rle'")
            vid, frame_s, _label, rle = parts
            try:
                frame_index = int(frame_s)
            except ValueError as exc:
                raise MalformedMaskError(f"{path}:{lineno}: bad frame index") from exc
            pixels, _, _ = decode_rle(rle)
            if not pixels:
                raise MalformedMaskError(f"{path}:{lineno}: empty mask for declared instance")
            instances.append(Instance(
                video_id=video_id if video_id is not None else vid,
                frame_index=frame_index,
                bbox=tight_bbox(pixels),
                mask_pixels=pixels,
            ))
    else:
        raise MediaError(f"no such instance mask path: {path}")
    return assign_node_ids(instances)


def assign_node_ids(instances) -> list[Instance]:
    """Return instances re-numbered 0..n-1 in the given order."""
    return [
        Instance(video_id=inst.video_id, frame_index=inst.frame_index,
                 bbox=inst.bbox, mask_pixels=inst.mask_pixels, node_id=i)
        for i, inst in enumerate(instances)
    ]


def write_instances_rle(instances, shape: tuple[int, int], path) -> None:
    """Write instances as 'video,frame,label,rle' lines (see encode_rle).

    The label field is the 1-based position of the instance within its frame.
    This format round-trips overlapping and disconnected masks bit-exactly.
    """
    height, width = shape
    per_frame_counter: dict[tuple[str, int], int] = {}
    lines = []
    for inst in instances:
        key = (inst.video_id, inst.frame_index)
        per_frame_counter[key] = per_frame_counter.get(key, 0) + 1
        rle = encode_rle(inst.mask_pixels, height, width)
        lines.append(f"{inst.video_id},{inst.frame_index},{per_frame_counter[key]},{rle}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def write_instances_labels(instances, shape: tuple[int, int], directory) -> None:
    """Write per-frame 16-bit label images; masks within a frame must be disjoint."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    by_frame: dict[int, list[Instance]] = {}
    for inst in instances:
        by_frame.setdefault(inst.frame_index, []).append(inst)
    for frame_index, frame_instances in sorted(by_frame.items()):
        labels = np.zeros(shape, dtype=np.uint16)
        for ordinal, inst in enumerate(frame_instances, start=1):
            arr = inst.mask_array()
            if np.any(labels[arr[:, 0], arr[:, 1]]):
                raise MediaError(
                    f"frame {frame_index}: overlapping masks cannot be written "
                    "as a label image, use the RLE format")
            labels[arr[:, 0], arr[:, 1]] = ordinal
        _write_pgm(directory / f"in{frame_index:06d}.pgm", labels, maxval=65535)


# ---------------------------------------------------------------------------
# Ground truth
# ---------------------------------------------------------------------------

def decode_ground_truth(raw: np.ndarray) -> np.ndarray:
    """Map raw 8-bit ground-truth values onto GT_* codes."""
    codes = np.full(raw.shape, GT_BACKGROUND, dtype=np.uint8)
    codes[raw == _GT_RAW_FOREGROUND] = GT_FOREGROUND
    for value in _GT_RAW_UNKNOWN:
        codes[raw == value] = GT_UNKNOWN
    return codes


def load_ground_truth(directory, video_id: str, pattern: str = "gt*") -> dict[int, GroundTruthMask]:
    """Load all ground-truth images of one video, keyed by frame index."""
    directory = Path(directory)
    if not directory.is_dir():
        raise MediaError(f"no such directory: {directory}")
    masks = {}
    for path in sorted(directory.glob(pattern)):
        if path.suffix.lower() not in _IMAGE_EXTENSIONS:
            continue
        if path.suffix.lower() == ".pgm":
            raw = _read_pgm(path)
        else:
            raw = np.asarray((read_image_gray(path) * 255.0).round(), dtype=np.uint16)
        idx = _frame_index_of(path)
        masks[idx] = GroundTruthMask(video_id=video_id, frame_index=idx,
                                     labels=decode_ground_truth(raw))
    return masks


def write_ground_truth(mask: GroundTruthMask, path) -> None:
    raw = np.zeros(mask.labels.shape, dtype=np.uint8)
    raw[mask.labels == GT_FOREGROUND] = _GT_RAW_FOREGROUND
    raw[mask.labels == GT_UNKNOWN] = _GT_RAW_UNKNOWN[1]
    _write_pgm(Path(path), raw, maxval=255)


# ---------------------------------------------------------------------------
# Synthetic sequences
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MovingObject:
    """Rectangle translating at constant velocity, carrying its own texture."""

    start: tuple[int, int]           # (row, col) of the top-left corner at frame 1
    velocity: tuple[float, float]    # (d_row, d_col) pixels per frame
    size: tuple[int, int]            # (height, width)
    intensity: float
    texture: float = 0.0


@dataclass(frozen=True)
class StaticShape:
    """Stationary rectangle; an instance that belongs to the background."""

    position: tuple[int, int]
    size: tuple[int, int]
    intensity: float
    texture: float = 0.0


@dataclass(frozen=True)
class SyntheticSpec:
    video_id: str
    num_frames: int
    height: int
    width: int
    seed: int
    noise: float = 0.02
    background_level: float = 0.5
    background_texture: float = 0.05
    objects: tuple[MovingObject, ...] = ()
    distractors: tuple[StaticShape, ...] = ()

    def __post_init__(self):
        if self.num_frames < 2:
            raise MediaError("synthetic sequences need at least 2 frames")
        if self.height < 3 or self.width < 3:
            raise MediaError("synthetic frames must be at least 3x3")

    @staticmethod
    def from_dict(data: dict) -> "SyntheticSpec":
        objects = tuple(
            MovingObject(start=tuple(o["start"]), velocity=tuple(o["velocity"]),
                         size=tuple(o["size"]), intensity=float(o["intensity"]),
                         texture=float(o.get("texture", 0.0)))
            for o in data.get("objects", ()))
        distractors = tuple(
            StaticShape(position=tuple(d["position"]), size=tuple(d["size"]),
                        intensity=float(d["intensity"]),
                        texture=float(d.get("texture", 0.0)))
            for d in data.get("distractors", ()))
        return SyntheticSpec(
            video_id=str(data["video_id"]),
            num_frames=int(data["frames"]),
            height=int(data["height"]),
            width=int(data["width"]),
            seed=int(data["seed"]),
            noise=float(data.get("noise", 0.02)),
            background_level=float(data.get("background_level", 0.5)),
            background_texture=float(data.get("background_texture", 0.05)),
            objects=objects,
            distractors=distractors,
        )


def _pattern(rows: np.ndarray, cols: np.ndarray, period: float) -> np.ndarray:
    return np.cos(2.0 * math.pi * rows / period) * np.cos(2.0 * math.pi * cols / period)


def _rect_position(obj: MovingObject, frame_index: int) -> tuple[int, int]:
    steps = frame_index - 1
    top = int(round(obj.start[0] + steps * obj.velocity[0]))
    left = int(round(obj.start[1] + steps * obj.velocity[1]))
    return top, left


def _paint_rect(image: np.ndarray, top: int, left: int, size: tuple[int, int],
                intensity: float, texture: float) -> None:
    h, w = size
    lr, lc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    patch = intensity + texture * _pattern(lr, lc, period=6.0)
    image[top:top + h, left:left + w] = patch


def _rect_pixels(top: int, left: int, size: tuple[int, int]) -> frozenset[tuple[int, int]]:
    h, w = size
    return frozenset((r, c) for r in range(top, top + h) for c in range(left, left + w))


def synth_sequence(spec: SyntheticSpec) -> tuple[list[Frame], list[Instance], dict[int, GroundTruthMask]]:
    """Render a labelled synthetic video.

    Returns frames (indices 1..num_frames), instances for both moving objects
    and static distractors (node_ids in frame-major order), and ground truth
    that marks exactly the moving-object pixels of each frame. Deterministic
    for a fixed spec, including the seed.
    """
    rng = np.random.default_rng(spec.seed)
    rows, cols = np.meshgrid(np.arange(spec.height), np.arange(spec.width), indexing="ij")
    backdrop = spec.background_level + spec.background_texture * _pattern(rows, cols, period=13.0)

    frames: list[Frame] = []
    instances: list[Instance] = []
    gts: dict[int, GroundTruthMask] = {}
    for frame_index in range(1, spec.num_frames + 1):
        image = backdrop.copy()
        gt = np.zeros((spec.height, spec.width), dtype=np.uint8)
        frame_instances: list[Instance] = []

        for obj in spec.objects:
            top, left = _rect_position(obj, frame_index)
            h, w = obj.size
            if top < 0 or left < 0 or top + h > spec.height or left + w > spec.width:
                raise TrajectoryError(
                    f"{spec.video_id}: object leaves frame at frame {frame_index}")
            _paint_rect(image, top, left, obj.size, obj.intensity, obj.texture)
            pixels = _rect_pixels(top, left, obj.size)
            gt[top:top + h, left:left + w] = GT_FOREGROUND
            frame_instances.append(Instance(
                video_id=spec.video_id, frame_index=frame_index,
                bbox=(left, top, w, h), mask_pixels=pixels))

        for shape in spec.distractors:
            top, left = shape.position
            h, w = shape.size
            if top < 0 or left < 0 or top + h > spec.height or left + w > spec.width:
                raise TrajectoryError(
                    f"{spec.video_id}: distractor outside frame bounds")
            _paint_rect(image, top, left, shape.size, shape.intensity, shape.texture)
            frame_instances.append(Instance(
                video_id=spec.video_id, frame_index=frame_index,
                bbox=(left, top, w, h), mask_pixels=_rect_pixels(top, left, shape.size)))

        if spec.noise > 0.0:
            image = image + rng.normal(0.0, spec.noise, size=image.shape)
        frames.append(Frame(frame_index=frame_index, pixels=np.clip(image, 0.0, 1.0)))
        gts[frame_index] = GroundTruthMask(video_id=spec.video_id,
                                           frame_index=frame_index, labels=gt)
        instances.extend(frame_instances)

    return frames, assign_node_ids(instances), gts


def write_synth_dataset(specs, out_dir, challenge: str = "synthetic") -> Path:
    """Materialise synthetic videos in the on-disk dataset layout.

    Produces ``<out>/<video>/{frames,instances,gt}/`` plus a ``manifest.json``
    that the feature stage consumes. Returns the manifest path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    videos = []
    for spec in specs:
        frames, instances, gts = synth_sequence(spec)
        vdir = out_dir / spec.video_id
        (vdir / "frames").mkdir(parents=True, exist_ok=True)
        (vdir / "gt").mkdir(parents=True, exist_ok=True)
        for frame in frames:
            q = np.asarray((frame.pixels * 255.0).round(), dtype=np.uint8)
            _write_pgm(vdir / "frames" / f"in{frame.frame_index:06d}.pgm", q, maxval=255)
        write_instances_labels(instances, (spec.height, spec.width), vdir / "instances")
        for idx, gt in gts.items():
            write_ground_truth(gt, vdir / "gt" / f"gt{idx:06d}.pgm")
        videos.append({
            "id": spec.video_id,
            "challenge": challenge,
            "frames": str(Path(spec.video_id) / "frames"),
            "instances": str(Path(spec.video_id) / "instances"),
            "gt": str(Path(spec.video_id) / "gt"),
            "height": spec.height,
            "width": spec.width,
        })
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps({"videos": videos}, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_manifest(path) -> list[dict]:
    """Read a dataset manifest; relative paths are resolved against its parent."""
    path = Path(path)
    data = json.loads(path.read_text())
    videos = data.get("videos")
    if not isinstance(videos, list) or not videos:
        raise MediaError(f"{path}: manifest lists no videos")
    root = path.parent
    resolved = []
    for entry in videos:
        item = dict(entry)
        for key in ("frames", "instances", "gt"):
            if key in item and item[key] is not None:
                item[key] = str((root / item[key]).resolve())
        resolved.append(item)
    return resolved
