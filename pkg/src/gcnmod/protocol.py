"""Node labelling, unseen-video splits, pixel scoring and Monte Carlo runs.

Evaluation follows the agnostic-video scheme: test nodes come exclusively
from videos that contribute no training or validation nodes. Scores are
pixel-level precision/recall/F aggregated per video by summed counts, then
averaged per challenge without weighting, and the overall figure is the
unweighted mean of the challenge averages.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import gcn
from .media import GT_FOREGROUND, GT_UNKNOWN, GroundTruthMask, Instance
from .seeding import derive_seed

VALIDATION_FRACTION = 0.01

# Training densities exercised by the sweep.
DEFAULT_DENSITIES = (0.001, 0.005, 0.05, 0.1)

# Change-detection challenge abbreviations used in report summaries.
CHALLENGE_ABBREV = {
    "badWeather": "BWT",
    "baseline": "BSL",
    "cameraJitter": "CJI",
    "dynamicBackground": "DBA",
    "intermittentObjectMotion": "IOM",
    "lowFramerate": "LFR",
    "PTZ": "PTZ",
    "shadow": "SHW",
    "thermal": "THL",
}


class ProtocolError(Exception):
    pass


@dataclass(eq=False)
class LabelMatrix:
    """One-hot node labels plus a coverage flag for nodes without usable truth."""

    y: np.ndarray        # (N, 2)
    covered: np.ndarray  # (N,) bool


@dataclass(eq=False)
class SplitSpec:
    partition_id: str
    train_nodes: np.ndarray
    val_nodes: np.ndarray
    unseen_nodes: np.ndarray
    unseen_videos: tuple[str, ...]
    density: float
    seed: int

    def validate(self) -> None:
        sets = [set(self.train_nodes.tolist()), set(self.val_nodes.tolist()),
                set(self.unseen_nodes.tolist())]
        if (sets[0] & sets[1]) or (sets[0] & sets[2]) or (sets[1] & sets[2]):
            raise ProtocolError("split sets must be pairwise disjoint")

    def write_json(self, path) -> None:
        payload = {
            "partition": self.partition_id,
            "unseen_videos": list(self.unseen_videos),
            "density": self.density,
            "seed": self.seed,
            "train_nodes": self.train_nodes.tolist(),
            "val_nodes": self.val_nodes.tolist(),
            "unseen_nodes": self.unseen_nodes.tolist(),
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def label_nodes(instances, ground_truth) -> LabelMatrix:
    """Label each node by strict pixel-majority vote against the ground truth.

    A node is foreground when strictly more than half of its non-unknown mask
    pixels are ground-truth foreground; exact ties fall to background. Nodes
    whose frame has no ground truth, or whose mask is entirely unknown, are
    marked uncovered and take no part in training or scoring.
    """
    n = len(instances)
    y = np.zeros((n, gcn.NUM_CLASSES))
    covered = np.zeros(n, dtype=bool)
    for inst in instances:
        gt = ground_truth.get((inst.video_id, inst.frame_index))
        if gt is None:
            continue  # uncovered, row stays zero and is never read
        pixels = inst.mask_array()
        h, w = gt.labels.shape
        if pixels[:, 0].max() >= h or pixels[:, 1].max() >= w:
            raise ProtocolError(
                f"node {inst.node_id}: mask exceeds ground-truth dimensions")
        values = gt.labels[pixels[:, 0], pixels[:, 1]]
        known = values != GT_UNKNOWN
        if not np.any(known):
            continue  # entirely unknown, uncovered
        foreground = int(np.sum(values[known] == GT_FOREGROUND))
        is_fg = 2 * foreground > int(np.sum(known))
        y[inst.node_id, gcn.FOREGROUND if is_fg else gcn.BACKGROUND] = 1.0
        covered[inst.node_id] = True
    return LabelMatrix(y=y, covered=covered)


def make_split(node_videos, covered, unseen_videos, density: float, seed: int,
               partition_id: str = "0") -> SplitSpec:
    """Sample the training and validation node sets away from unseen videos.

    ``node_videos`` maps node id to video id by position. |train| =
    round(density * N) covered nodes drawn uniformly without replacement from
    the non-unseen videos, |val| = round(0.01 * N) from the remaining covered
    non-unseen nodes, and the unseen set is every node of the unseen videos.
    Deterministic per seed.
    """
    if not (0.0 < density < 1.0):
        raise ProtocolError(f"density must lie in (0, 1), got {density}")
    node_videos = list(node_videos)
    n = len(node_videos)
    unseen_videos = tuple(unseen_videos)
    missing = [v for v in unseen_videos if v not in set(node_videos)]
    if missing:
        raise ProtocolError(f"unseen videos absent from the catalog: {missing}")
    covered = np.asarray(covered, dtype=bool)
    unseen_set = set(unseen_videos)
    is_unseen = np.array([v in unseen_set for v in node_videos])
    unseen_nodes = np.flatnonzero(is_unseen)

    pool = np.flatnonzero(covered & ~is_unseen)
    n_train = _round_half_up(density * n)
    n_val = _round_half_up(VALIDATION_FRACTION * n)
    if n_train < 1:
        raise ProtocolError(f"density {density} selects no training nodes for N={n}")
    if n_train + n_val > pool.size:
        raise ProtocolError(
            f"not enough covered non-unseen nodes: need {n_train}+{n_val}, "
            f"have {pool.size}")
    rng = np.random.default_rng(seed)
    shuffled = rng.permutation(pool)
    split = SplitSpec(
        partition_id=str(partition_id),
        train_nodes=np.sort(shuffled[:n_train]),
        val_nodes=np.sort(shuffled[n_train:n_train + n_val]),
        unseen_nodes=unseen_nodes,
        unseen_videos=unseen_videos,
        density=density,
        seed=seed,
    )
    split.validate()
    return split


def render_prediction(instances, classes, shape: tuple[int, int]) -> np.ndarray:
    """Union of the masks of every instance predicted foreground."""
    mask = np.zeros(shape, dtype=bool)
    for inst in instances:
        if classes[inst.node_id] == gcn.FOREGROUND:
            arr = inst.mask_array()
            mask[arr[:, 0], arr[:, 1]] = True
    return mask


@dataclass(frozen=True)
class MaskScore:
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f_measure(self) -> float:
        p, r = self.precision, self.recall
        return 2.0 * p * r / (p + r) if p + r else 0.0

    def __add__(self, other: "MaskScore") -> "MaskScore":
        return MaskScore(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def f_measure(pred_mask: np.ndarray, gt) -> MaskScore:
    """Pixel counts against ground truth; unknown pixels are excluded.

    Precision and recall are zero when their denominators vanish, and F is
    zero when precision + recall is zero.
    """
    labels = gt.labels if isinstance(gt, GroundTruthMask) else np.asarray(gt)
    pred_mask = np.asarray(pred_mask, dtype=bool)
    if pred_mask.shape != labels.shape:
        raise ProtocolError(
            f"mask dimensions {pred_mask.shape} differ from ground truth {labels.shape}")
    known = labels != GT_UNKNOWN
    fg = labels == GT_FOREGROUND
    tp = int(np.sum(pred_mask & fg))
    fp = int(np.sum(pred_mask & known & ~fg))
    fn = int(np.sum(~pred_mask & fg))
    return MaskScore(tp=tp, fp=fp, fn=fn)


@dataclass(frozen=True)
class VideoScore:
    video_id: str
    challenge: str
    counts: MaskScore
    frames_scored: int

    @property
    def f_measure(self) -> float:
        return self.counts.f_measure


@dataclass(eq=False)
class Experiment:
    """One trainable problem: descriptors, operator, labels and the catalog."""

    features: np.ndarray
    operator: object                  # normalised propagation matrix
    labels: LabelMatrix
    instances: list[Instance]
    ground_truth: dict
    frame_shapes: dict                # video_id -> (height, width)
    challenges: dict                  # video_id -> challenge name
    unseen_videos: tuple[str, ...]
    density: float
    train_config: gcn.TrainConfig
    partition_id: str = "0"


@dataclass(eq=False)
class EvalReport:
    """Per-repetition video scores plus mean/best aggregates."""

    partition_id: str
    density: float
    repetition_scores: list[list[VideoScore]]
    histories: list[gcn.TrainHistory] = field(default_factory=list)

    def _per_video(self, reduce_fn) -> dict[str, float]:
        by_video: dict[str, list[float]] = {}
        for rep in self.repetition_scores:
            for score in rep:
                by_video.setdefault(score.video_id, []).append(score.f_measure)
        return {vid: reduce_fn(vals) for vid, vals in sorted(by_video.items())}

    @property
    def mean_f(self) -> dict[str, float]:
        return self._per_video(lambda vals: float(np.mean(vals)))

    @property
    def best_f(self) -> dict[str, float]:
        return self._per_video(max)

    def _challenge_of(self) -> dict[str, str]:
        mapping = {}
        for rep in self.repetition_scores:
            for score in rep:
                mapping[score.video_id] = score.challenge
        return mapping

    def challenge_averages(self, per_video: dict[str, float]) -> dict[str, float]:
        challenge_of = self._challenge_of()
        grouped: dict[str, list[float]] = {}
        for vid, value in per_video.items():
            name = challenge_of[vid]
            grouped.setdefault(CHALLENGE_ABBREV.get(name, name), []).append(value)
        return {ch: float(np.mean(vals)) for ch, vals in sorted(grouped.items())}

    def summary(self) -> dict:
        mean_by_challenge = self.challenge_averages(self.mean_f)
        best_by_challenge = self.challenge_averages(self.best_f)
        return {
            "partition": self.partition_id,
            "density": self.density,
            "repetitions": len(self.repetition_scores),
            "videos": {
                vid: {"mean_f": self.mean_f[vid], "best_f": self.best_f[vid]}
                for vid in self.mean_f
            },
            "challenges": {
                ch: {"mean_f": mean_by_challenge[ch], "best_f": best_by_challenge[ch]}
                for ch in mean_by_challenge
            },
            "overall_mean_f": float(np.mean(list(mean_by_challenge.values()))),
            "overall_best_f": float(np.mean(list(best_by_challenge.values()))),
        }

    def write_csv(self, path) -> None:
        """Rows grouped by repetition in order; each row is one video."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["video", "challenge", "TP", "FP", "FN",
                             "precision", "recall", "f"])
            for rep in self.repetition_scores:
                for s in rep:
                    writer.writerow([
                        s.video_id, s.challenge,
                        s.counts.tp, s.counts.fp, s.counts.fn,
                        repr(s.counts.precision), repr(s.counts.recall),
                        repr(s.counts.f_measure),
                    ])

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def evaluate_unseen(experiment: Experiment, classes: np.ndarray) -> list[VideoScore]:
    """Micro-aggregated per-video scores over the ground-truth frames of the
    unseen videos. Frames without ground truth are not scored."""
    by_frame: dict[tuple[str, int], list[Instance]] = {}
    for inst in experiment.instances:
        if inst.video_id in experiment.unseen_videos:
            by_frame.setdefault((inst.video_id, inst.frame_index), []).append(inst)
    scores = []
    for video_id in experiment.unseen_videos:
        counts = MaskScore(0, 0, 0)
        frames_scored = 0
        shape = experiment.frame_shapes[video_id]
        frame_keys = sorted(k for k in experiment.ground_truth if k[0] == video_id)
        for key in frame_keys:
            gt = experiment.ground_truth[key]
            pred = render_prediction(by_frame.get(key, []), classes, shape)
            frame_counts = f_measure(pred, gt)
            if frame_counts.tp + frame_counts.fp + frame_counts.fn == 0:
                continue  # no foreground anywhere, nothing to score
            counts = counts + frame_counts
            frames_scored += 1
        scores.append(VideoScore(
            video_id=video_id,
            challenge=experiment.challenges.get(video_id, "unknown"),
            counts=counts,
            frames_scored=frames_scored,
        ))
    return scores


def run_repetition(experiment: Experiment, seed: int
                   ) -> tuple[SplitSpec, gcn.GcnModel, gcn.TrainHistory, list[VideoScore]]:
    """One split / train / score pass with seeds derived from ``seed``."""
    split = make_split([inst.video_id for inst in experiment.instances],
                       experiment.labels.covered,
                       experiment.unseen_videos, experiment.density,
                       seed=derive_seed(seed, "split"),
                       partition_id=experiment.partition_id)
    config = replace(experiment.train_config, seed=derive_seed(seed, "train"))
    model, history = gcn.train(experiment.features, experiment.operator,
                               experiment.labels.y, split.train_nodes,
                               split.val_nodes, config)
    classes, _ = gcn.predict(model, experiment.features, experiment.operator)
    return split, model, history, evaluate_unseen(experiment, classes)


def monte_carlo(experiment: Experiment, repetitions: int, base_seed: int) -> EvalReport:
    """Repeat split/train/evaluate with per-repetition derived seeds."""
    if repetitions < 1:
        raise ProtocolError("repetitions must be >= 1")
    report = EvalReport(partition_id=experiment.partition_id,
                        density=experiment.density, repetition_scores=[])
    for rep in range(repetitions):
        rep_seed = derive_seed(base_seed, "rep", experiment.partition_id,
                               repr(experiment.density), rep)
        _, _, history, scores = run_repetition(experiment, rep_seed)
        report.repetition_scores.append(scores)
        report.histories.append(history)
    return report
