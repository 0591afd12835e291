"""Frame- and video-level detection metrics."""

from __future__ import annotations

import csv
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata


class MetricInputError(ValueError):
    pass


@dataclass(frozen=True)
class ScoredFrame:
    video_id: str
    frame_id: str
    score: float
    label: int


@dataclass
class MetricsReport:
    auc: float
    pauc_at_0_1: float
    accuracy: float
    n_videos: int
    n_frames: int
    level: str

    def to_json(self) -> dict:
        return asdict(self)


def _binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise MetricInputError(f"{scores.size} scores for {labels.size} labels")
    if not np.isfinite(scores).all():
        raise MetricInputError("non-finite scores")
    if not np.isin(labels, (0, 1)).all():
        raise MetricInputError("labels must be 0/1")
    return scores, labels.astype(np.int64)


def _two_class(labels: np.ndarray) -> tuple[int, int]:
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricInputError("need at least one positive and one negative sample")
    return n_pos, n_neg


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with midranks for ties."""
    scores, labels = _binary(scores, labels)
    n_pos, n_neg = _two_class(labels)
    ranks = rankdata(scores)  # average ranks
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """ROC vertices ``(fpr, tpr, thresholds)`` from (0, 0) to (1, 1).

    One vertex per distinct score; tied scores move diagonally.
    """
    scores, labels = _binary(scores, labels)
    n_pos, n_neg = _two_class(labels)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last_of_run = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(y)[last_of_run]
    fps = (last_of_run + 1) - tps
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    thr = np.r_[np.inf, s[last_of_run]]
    return fpr, tpr, thr


def pauc(scores, labels, max_fpr: float = 0.1) -> float:
    """Area under the ROC curve for FPR in [0, max_fpr], divided by max_fpr."""
    if not 0.0 < max_fpr <= 1.0:
        raise MetricInputError(f"max_fpr must be in (0, 1], got {max_fpr}")
    fpr, tpr, _ = roc_curve(scores, labels)
    stop = np.searchsorted(fpr, max_fpr, side="right")
    x, y = fpr[:stop], tpr[:stop]
    if x[-1] < max_fpr:
        x0, x1 = fpr[stop - 1], fpr[stop]
        y0, y1 = tpr[stop - 1], tpr[stop]
        x = np.r_[x, max_fpr]
        y = np.r_[y, y0 + (y1 - y0) * (max_fpr - x0) / (x1 - x0)]
    area = float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))
    return area / max_fpr


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    scores, labels = _binary(scores, labels)
    if scores.size == 0:
        raise MetricInputError("empty input")
    return float(np.mean((scores >= threshold).astype(np.int64) == labels))


def video_aggregate(frames: Iterable[ScoredFrame]) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Average frame scores per video.

    Returns ``(video_ids, scores, labels)`` in first-seen video order.
    """
    groups: OrderedDict[str, list[ScoredFrame]] = OrderedDict()
    for fr in frames:
        groups.setdefault(fr.video_id, []).append(fr)
    if not groups:
        raise MetricInputError("no frames to aggregate")
    ids, scores, labels = [], [], []
    for vid, frs in groups.items():
        labs = {fr.label for fr in frs}
        if len(labs) != 1:
            raise MetricInputError(f"video {vid!r} has mixed labels {sorted(labs)}")
        ids.append(vid)
        scores.append(float(np.mean([fr.score for fr in frs])))
        labels.append(labs.pop())
    return ids, np.asarray(scores), np.asarray(labels, dtype=np.int64)


def report(frames: Sequence[ScoredFrame], level: str = "video", max_fpr: float = 0.1) -> MetricsReport:
    frames = list(frames)
    if level == "video":
        ids, scores, labels = video_aggregate(frames)
        n_videos = len(ids)
    elif level == "frame":
        scores = np.array([fr.score for fr in frames])
        labels = np.array([fr.label for fr in frames])
        n_videos = len({fr.video_id for fr in frames})
    else:
        raise MetricInputError(f"unknown level {level!r}")
    return MetricsReport(
        auc=roc_auc(scores, labels),
        pauc_at_0_1=pauc(scores, labels, max_fpr),
        accuracy=accuracy(scores, labels),
        n_videos=n_videos,
        n_frames=len(frames),
        level=level,
    )


def write_scores_csv(path, frames: Iterable[ScoredFrame]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["video_id", "frame_id", "label", "score"])
        for fr in frames:
            w.writerow([fr.video_id, fr.frame_id, fr.label, repr(float(fr.score))])


def read_scores_csv(path) -> list[ScoredFrame]:
    with open(path, newline="") as fh:
        return [
            ScoredFrame(row["video_id"], row["frame_id"], float(row["score"]), int(row["label"]))
            for row in csv.DictReader(fh)
        ]


def write_report_json(path, reports: dict[str, MetricsReport]) -> None:
    with open(path, "w") as fh:
        json.dump({k: r.to_json() for k, r in reports.items()}, fh, indent=2)
