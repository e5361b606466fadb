"""Bidirectional k-reciprocal re-ranking of cross-modal retrieval lists.

Both directions share one idea: a query's top-K candidates are re-ordered
by how early the query (or a sentence semantically tied to it) shows up in
each candidate's reverse-direction ranking. Positions are 1-based; the
tail beyond the top-K window keeps its initial order.

Image-to-text: for each candidate sentence, rank every image by that
sentence's column of the image-text score matrix and record the position
of the query image; candidates are re-sorted by ascending position.

Text-to-image: for each candidate image, walk that image's sentence
ranking from the top and record the first position k whose sentence has
the query inside its text-neighbour set G(., K'); if the walk never fires
the candidate gets a fallback position (one past the walked list). G is
built from the text-text score matrix, or, when none is available, from a
rank-correlation affinity derived from the image-text matrix columns.

Ties in the refined order break by higher original score, then lower
index, making every output a deterministic total order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeMismatchError
from .matrix import Mat, check_matrix


@dataclass(frozen=True)
class RerankConfig:
    """Window sizes for re-ranking.

    ``top_k`` is the re-rank window (15 suits Flickr30k-sized galleries,
    7 MSCOCO-sized ones). ``text_neighbors`` is K', the size of the
    text-neighbour set in text-to-image re-ranking; 5 matches the usual
    captions-per-image. ``fallback_position`` defaults to one past the
    walked gallery.
    """

    top_k: int = 15
    text_neighbors: int = 5
    fallback_position: int | None = None

    def __post_init__(self):
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")
        if self.text_neighbors < 1:
            raise ConfigError(
                f"text_neighbors must be >= 1, got {self.text_neighbors}"
            )


def rank_row(scores) -> np.ndarray:
    """Indices sorted by score descending, ties by ascending index."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.shape[0] == 0:
        raise ShapeMismatchError(
            f"rank_row expects a non-empty 1-D row, got shape {scores.shape}"
        )
    if not np.all(np.isfinite(scores)):
        raise ShapeMismatchError("rank_row scores contain NaN or Inf")
    return np.argsort(-scores, kind="stable")


def _check_window(k: int, n_gallery: int) -> None:
    if not 1 <= k <= n_gallery:
        raise ConfigError(f"top-K window {k} outside 1..{n_gallery}")


def _refined_order(candidates: np.ndarray, positions: dict[int, int],
                   original: Mat) -> list[int]:
    # ascending position, then descending original score, then ascending index
    return sorted((int(c) for c in candidates),
                  key=lambda c: (positions[c], -original[c], c))


def rerank_i2t(s_it: Mat, query: int, k: int) -> np.ndarray:
    """Refined sentence ranking for one image query.

    Positions come from the full image ranking of each candidate
    sentence's column; the query image always appears there, so no
    fallback is needed.
    """
    s_it = check_matrix(s_it, "s_it")
    n_images, n_texts = s_it.shape
    if not 0 <= query < n_images:
        raise ConfigError(f"image query {query} outside 0..{n_images - 1}")
    _check_window(k, n_texts)
    initial = rank_row(s_it[query])
    candidates = initial[:k]
    positions = {}
    for t in candidates:
        image_ranking = rank_row(s_it[:, t])
        positions[int(t)] = int(np.flatnonzero(image_ranking == query)[0]) + 1
    refined = _refined_order(candidates, positions, s_it[query])
    return np.concatenate([np.asarray(refined, dtype=initial.dtype), initial[k:]])


def text_neighbor_sets(s_tt: Mat, k_neighbors: int) -> np.ndarray:
    """Boolean membership: out[t, s] iff s is in G(t, K').

    G(t, K') contains t itself plus its K'-1 highest-scoring other
    sentences, so a sentence is never excluded from its own neighbourhood
    even if the matrix's diagonal is not maximal.
    """
    s_tt = check_matrix(s_tt, "s_tt")
    n = s_tt.shape[0]
    if s_tt.shape != (n, n):
        raise ShapeMismatchError(f"s_tt must be square, got {s_tt.shape}")
    member = np.zeros((n, n), dtype=bool)
    for t in range(n):
        member[t, t] = True
        ranked = rank_row(s_tt[t])
        take = k_neighbors - 1
        picked = 0
        for s in ranked:
            if picked == take:
                break
            if s == t:
                continue
            member[t, s] = True
            picked += 1
    return member


def rerank_t2i(s_it: Mat, s_tt: Mat, query: int, k: int, k_neighbors: int,
               fallback: int | None = None) -> np.ndarray:
    """Refined image ranking for one text query.

    For each candidate image the position is the first rank k in that
    image's sentence ranking whose sentence's neighbour set contains the
    query; ``fallback`` (default: number of sentences + 1) is used when no
    rank fires.
    """
    s_it = check_matrix(s_it, "s_it")
    n_images, n_texts = s_it.shape
    if not 0 <= query < n_texts:
        raise ConfigError(f"text query {query} outside 0..{n_texts - 1}")
    _check_window(k, n_images)
    if k_neighbors < 1:
        raise ConfigError(f"k_neighbors must be >= 1, got {k_neighbors}")
    s_tt = check_matrix(s_tt, "s_tt")
    if s_tt.shape != (n_texts, n_texts):
        raise ShapeMismatchError(
            f"s_tt shape {s_tt.shape} inconsistent with {n_texts} texts"
        )
    if fallback is None:
        fallback = n_texts + 1
    member = text_neighbor_sets(s_tt, k_neighbors)
    return _rerank_t2i_with_sets(s_it, member, query, k, fallback)


def _rerank_t2i_with_sets(s_it: Mat, member: np.ndarray, query: int, k: int,
                          fallback: int) -> np.ndarray:
    column = s_it[:, query]
    initial = rank_row(column)
    candidates = initial[:k]
    positions = {}
    for i in candidates:
        sentence_ranking = rank_row(s_it[i])
        pos = fallback
        for rank0, t in enumerate(sentence_ranking):
            if member[t, query]:
                pos = rank0 + 1
                break
        positions[int(i)] = pos
    refined = _refined_order(candidates, positions, column)
    return np.concatenate([np.asarray(refined, dtype=initial.dtype), initial[k:]])


def text_affinity_from_it(s_it: Mat) -> Mat:
    """Text-text affinity derived from the image-text matrix alone.

    Sentences are compared by how similarly they rank the images: affinity
    is the negated squared difference of their image rank-position vectors.
    Depending only on orderings keeps every downstream ranking invariant
    under strictly increasing transforms of the scores, and self-affinity
    (zero) is always maximal.
    """
    s_it = check_matrix(s_it, "s_it")
    n_images, n_texts = s_it.shape
    pos = np.empty((n_texts, n_images))
    for t in range(n_texts):
        ranking = rank_row(s_it[:, t])
        pos[t, ranking] = np.arange(1, n_images + 1)
    out = np.empty((n_texts, n_texts))
    for t in range(n_texts):
        diff = pos - pos[t]
        out[t] = -np.sum(diff * diff, axis=1)
    return out


def rerank_all(s_it: Mat, s_tt: Mat | None = None,
               cfg: RerankConfig = RerankConfig(), workers: int = 1
               ) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Refined rank lists for every image and every text query.

    Without ``s_tt`` the text-to-image side falls back to
    :func:`text_affinity_from_it`. Per-query outputs are exactly those of
    the single-query functions, for any ``workers`` count.
    """
    s_it = check_matrix(s_it, "s_it")
    n_images, n_texts = s_it.shape
    k_i2t = cfg.top_k
    k_t2i = cfg.top_k
    _check_window(k_i2t, n_texts)
    _check_window(k_t2i, n_images)
    if s_tt is None:
        s_tt = text_affinity_from_it(s_it)
    else:
        s_tt = check_matrix(s_tt, "s_tt")
        if s_tt.shape != (n_texts, n_texts):
            raise ShapeMismatchError(
                f"s_tt shape {s_tt.shape} inconsistent with {n_texts} texts"
            )
    fallback = cfg.fallback_position
    if fallback is None:
        fallback = n_texts + 1
    member = text_neighbor_sets(s_tt, cfg.text_neighbors)

    def one_i2t(q: int) -> np.ndarray:
        return rerank_i2t(s_it, q, k_i2t)

    def one_t2i(q: int) -> np.ndarray:
        return _rerank_t2i_with_sets(s_it, member, q, k_t2i, fallback)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            i2t = list(pool.map(one_i2t, range(n_images)))
            t2i = list(pool.map(one_t2i, range(n_texts)))
    else:
        i2t = [one_i2t(q) for q in range(n_images)]
        t2i = [one_t2i(q) for q in range(n_texts)]
    return i2t, t2i
