"""Retrieval metrics: recall@L in both directions, mean recall, fold
averaging for the 5x1k protocol, and similarity-matrix ensembling.

An image query counts as a hit when any of its captions reaches the top L;
a caption query only when its own image does. Metrics are fractions in
[0, 1]; the CLI scales them to percentages for display.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeMismatchError
from .matrix import Mat, check_matrix
from .reranking import rank_row


@dataclass(frozen=True)
class GroundTruth:
    """Caption-to-image map plus its inverse."""

    caption_to_image: np.ndarray
    image_to_captions: tuple[tuple[int, ...], ...]

    @classmethod
    def from_group_map(cls, groups, n_images: int | None = None) -> "GroundTruth":
        groups = np.asarray(groups, dtype=np.int64)
        if groups.ndim != 1 or groups.shape[0] == 0:
            raise ConfigError("group map must be a non-empty 1-D index list")
        if n_images is None:
            n_images = int(groups.max()) + 1
        if groups.min() < 0 or groups.max() >= n_images:
            raise ConfigError(
                f"group map indices outside 0..{n_images - 1}"
            )
        inverse: list[list[int]] = [[] for _ in range(n_images)]
        for t, i in enumerate(groups):
            inverse[int(i)].append(t)
        if any(not caps for caps in inverse):
            raise ConfigError("every image needs at least one caption")
        return cls(groups, tuple(tuple(caps) for caps in inverse))

    @property
    def n_images(self) -> int:
        return len(self.image_to_captions)

    @property
    def n_texts(self) -> int:
        return self.caption_to_image.shape[0]


@dataclass(frozen=True)
class RetrievalMetrics:
    """Recall@1/5/10 for both directions, as fractions."""

    i2t_r1: float
    i2t_r5: float
    i2t_r10: float
    t2i_r1: float
    t2i_r5: float
    t2i_r10: float

    def __post_init__(self):
        vals = self.as_tuple()
        if any(not 0.0 <= v <= 1.0 for v in vals):
            raise ConfigError(f"recalls must lie in [0, 1]: {vals}")
        if not (self.i2t_r1 <= self.i2t_r5 <= self.i2t_r10
                and self.t2i_r1 <= self.t2i_r5 <= self.t2i_r10):
            raise ConfigError(f"recalls must be non-decreasing in L: {vals}")

    def as_tuple(self) -> tuple[float, ...]:
        return (self.i2t_r1, self.i2t_r5, self.i2t_r10,
                self.t2i_r1, self.t2i_r5, self.t2i_r10)

    @property
    def mr(self) -> float:
        return mean_recall(self)


def mean_recall(m: RetrievalMetrics) -> float:
    """Arithmetic mean of the six recall values."""
    return sum(m.as_tuple()) / 6.0


def recall_at(rank_lists: Sequence[np.ndarray], gt: GroundTruth, L: int,
              direction: str) -> float:
    """Fraction of queries with a relevant item in the top L.

    ``direction`` is "i2t" (image queries over sentences) or "t2i"
    (sentence queries over images).
    """
    if direction not in ("i2t", "t2i"):
        raise ConfigError(f"direction must be i2t or t2i, got {direction!r}")
    if L < 1:
        raise ConfigError(f"L must be >= 1, got {L}")
    n_queries = gt.n_images if direction == "i2t" else gt.n_texts
    gallery = gt.n_texts if direction == "i2t" else gt.n_images
    if L > gallery:
        raise ConfigError(f"L={L} exceeds gallery size {gallery}")
    if len(rank_lists) != n_queries:
        raise ShapeMismatchError(
            f"{len(rank_lists)} rank lists for {n_queries} queries"
        )
    hits = 0
    for q, ranking in enumerate(rank_lists):
        top = np.asarray(ranking[:L])
        if direction == "i2t":
            hits += bool(np.any(gt.caption_to_image[top] == q))
        else:
            hits += bool(np.any(top == gt.caption_to_image[q]))
    return hits / n_queries


def rank_lists_from_sim(sim: Mat) -> list[np.ndarray]:
    """One full rank list per row of a score matrix."""
    sim = check_matrix(sim, "sim")
    return [rank_row(row) for row in sim]


def metrics_from_rank_lists(i2t_lists: Sequence[np.ndarray],
                            t2i_lists: Sequence[np.ndarray],
                            gt: GroundTruth) -> RetrievalMetrics:
    return RetrievalMetrics(
        i2t_r1=recall_at(i2t_lists, gt, 1, "i2t"),
        i2t_r5=recall_at(i2t_lists, gt, 5, "i2t"),
        i2t_r10=recall_at(i2t_lists, gt, 10, "i2t"),
        t2i_r1=recall_at(t2i_lists, gt, 1, "t2i"),
        t2i_r5=recall_at(t2i_lists, gt, 5, "t2i"),
        t2i_r10=recall_at(t2i_lists, gt, 10, "t2i"),
    )


def metrics_from_sim(s_it: Mat, gt: GroundTruth) -> RetrievalMetrics:
    """Recall metrics straight from an image-text score matrix."""
    s_it = check_matrix(s_it, "s_it")
    if s_it.shape != (gt.n_images, gt.n_texts):
        raise ShapeMismatchError(
            f"s_it shape {s_it.shape} does not match ground truth "
            f"({gt.n_images}, {gt.n_texts})"
        )
    i2t = rank_lists_from_sim(s_it)
    t2i = rank_lists_from_sim(s_it.T)
    return metrics_from_rank_lists(i2t, t2i, gt)


def fold_average(per_fold: Sequence[RetrievalMetrics]) -> RetrievalMetrics:
    """Componentwise mean over folds."""
    if not per_fold:
        raise ConfigError("fold_average needs at least one fold")
    sums = np.zeros(6)
    for m in per_fold:
        sums += np.asarray(m.as_tuple())
    means = sums / len(per_fold)
    return RetrievalMetrics(*means)


def fold_image_slices(n_images: int, folds: int) -> list[np.ndarray]:
    """Split image indices into ``folds`` contiguous, near-equal folds."""
    if folds < 1 or folds > n_images:
        raise ConfigError(f"folds must be in 1..{n_images}, got {folds}")
    bounds = np.linspace(0, n_images, folds + 1).astype(int)
    return [np.arange(bounds[f], bounds[f + 1]) for f in range(folds)]


def metrics_by_fold(s_it: Mat, gt: GroundTruth,
                    folds: int) -> tuple[list[RetrievalMetrics], RetrievalMetrics]:
    """Evaluate each image fold as its own gallery, then average.

    Each fold keeps its images and exactly their captions; recalls are
    computed inside the fold and averaged componentwise.
    """
    s_it = check_matrix(s_it, "s_it")
    per_fold = []
    for image_ids in fold_image_slices(gt.n_images, folds):
        caption_ids = np.concatenate(
            [np.asarray(gt.image_to_captions[int(i)]) for i in image_ids]
        )
        sub = s_it[np.ix_(image_ids, caption_ids)]
        remap = {int(img): f for f, img in enumerate(image_ids)}
        sub_groups = np.asarray(
            [remap[int(gt.caption_to_image[int(t)])] for t in caption_ids]
        )
        sub_gt = GroundTruth.from_group_map(sub_groups, len(image_ids))
        per_fold.append(metrics_from_sim(sub, sub_gt))
    return per_fold, fold_average(per_fold)


def ensemble_average(mats: Sequence[Mat]) -> Mat:
    """Entrywise mean of same-shape score matrices."""
    if not mats:
        raise ConfigError("ensemble_average needs at least one matrix")
    first = check_matrix(mats[0], "matrix 0")
    total = first.copy()
    for i, m in enumerate(mats[1:], start=1):
        m = check_matrix(m, f"matrix {i}")
        if m.shape != first.shape:
            raise ShapeMismatchError(
                f"matrix {i} shape {m.shape} != {first.shape}"
            )
        total += m
    return total / len(mats)


def metrics_record(m: RetrievalMetrics, percent: bool = True) -> str:
    """Structured one-key-per-line record of the metrics."""
    scale = 100.0 if percent else 1.0
    keys = ("i2t_r1", "i2t_r5", "i2t_r10", "t2i_r1", "t2i_r5", "t2i_r10")
    lines = [f"{k}={v * scale!r}" for k, v in zip(keys, m.as_tuple())]
    lines.append(f"mr={m.mr * scale!r}")
    return "\n".join(lines)


def metrics_table(m: RetrievalMetrics) -> str:
    """Aligned human-readable table, in percent."""
    rows = [
        ("", "R@1", "R@5", "R@10"),
        ("i2t", f"{m.i2t_r1 * 100:.1f}", f"{m.i2t_r5 * 100:.1f}", f"{m.i2t_r10 * 100:.1f}"),
        ("t2i", f"{m.t2i_r1 * 100:.1f}", f"{m.t2i_r5 * 100:.1f}", f"{m.t2i_r10 * 100:.1f}"),
    ]
    widths = [max(len(r[c]) for r in rows) for c in range(4)]
    out = [
        "  ".join(cell.rjust(widths[c]) for c, cell in enumerate(row))
        for row in rows
    ]
    out.append(f"mR: {m.mr * 100:.1f}")
    return "\n".join(out)
