"""Static-scene estimation by temporal median filtering, plus RoI extraction."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .media import Frame, MediaError, _read_pgm, _write_pgm


class RoiBoundsError(MediaError):
    """Requested bounding box extends beyond the image."""


@dataclass(frozen=True, eq=False)
class BackgroundModel:
    """Per-video background image and the frame indices that produced it."""

    video_id: str
    image: Frame
    source_frame_indices: tuple[int, ...]

    def __post_init__(self):
        idx = self.source_frame_indices
        if not idx:
            raise MediaError("background needs at least one source frame")
        if list(idx) != sorted(set(idx)):
            raise MediaError("source frame indices must be sorted and duplicate-free")


def median_background(frames, max_samples: int = 150, stride: int | None = None,
                      video_id: str = "") -> BackgroundModel:
    """Per-pixel temporal median over a strided, capped sample of the frames.

    With ``stride=None`` the stride is chosen so that at most ``max_samples``
    frames contribute. Even sample counts take the mean of the two middle
    values.
    """
    frames = list(frames)
    if not frames:
        raise MediaError("empty frame list")
    if stride is None:
        stride = max(1, math.ceil(len(frames) / max_samples))
    if stride < 1:
        raise MediaError("stride must be >= 1")
    sampled = frames[::stride][:max_samples]
    shape = sampled[0].pixels.shape
    for frame in sampled:
        if frame.pixels.shape != shape:
            raise MediaError("frames must share dimensions")
    stack = np.stack([frame.pixels for frame in sampled], axis=0)
    median = np.median(stack, axis=0)
    indices = tuple(sorted(frame.frame_index for frame in sampled))
    return BackgroundModel(video_id=video_id,
                           image=Frame(frame_index=0, pixels=median),
                           source_frame_indices=indices)


def extract_roi(image: Frame, bbox: tuple[int, int, int, int]) -> Frame:
    """Sub-image of ``bbox`` = (x, y, w, h); raises RoiBoundsError when outside."""
    x, y, w, h = bbox
    if w <= 0 or h <= 0:
        raise RoiBoundsError(f"bbox {bbox} has non-positive extent")
    if x < 0 or y < 0 or x + w > image.width or y + h > image.height:
        raise RoiBoundsError(
            f"bbox {bbox} outside image of size {image.height}x{image.width}")
    return Frame(frame_index=image.frame_index,
                 pixels=image.pixels[y:y + h, x:x + w].copy())


def save_background(model: BackgroundModel, path) -> None:
    """Persist as 16-bit PGM plus a JSON sidecar with the source indices."""
    path = Path(path)
    quantised = np.asarray((model.image.pixels * 65535.0).round(), dtype=np.uint16)
    _write_pgm(path, quantised, maxval=65535)
    sidecar = {
        "video_id": model.video_id,
        "source_frame_indices": list(model.source_frame_indices),
    }
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_background(path) -> BackgroundModel:
    path = Path(path)
    pixels = _read_pgm(path).astype(np.float64) / 65535.0
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    return BackgroundModel(
        video_id=sidecar["video_id"],
        image=Frame(frame_index=0, pixels=pixels),
        source_frame_indices=tuple(sidecar["source_frame_indices"]),
    )
