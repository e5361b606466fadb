"""Training: bidirectional hinge loss with in-batch hardest negatives,
text-text triplet loss, Adam with step decay, and the two-phase loop.

A batch pairs each sampled image with exactly one of its captions, images
all distinct, so every pair has at least one eligible negative on each
side. The image-text loss for a pair (I_p, T_p) hinges the positive score
against the hardest non-matching text for I_p and the hardest non-matching
image for T_p, both mined from the batch score matrix. The text-text loss
is a single-hinge triplet over same-caption-group sentence pairs.

Both losses return a subgradient w.r.t. the batch score matrix; hinges
exactly at the kink contribute zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ShapeMismatchError, TrainingDivergedError
from .matrix import Mat, SeededRng
from .model import (
    FusionBranch,
    ModelConfig,
    ModelParams,
    accumulate_grads,
    backward_pair,
    branch_from_dict,
    branch_to_dict,
    forward_pair,
    init_params,
    init_tt_from_it,
    score_matrix,
    zero_grads_like,
)

BRANCH_CHOICES = ("both", "image-text", "text-text")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    epochs: int = 50
    lr0: float = 1e-4
    decay_factor: float = 2.0
    decay_every: int = 10
    margin: float = 0.2
    seed: int = 0
    branch: str = "both"
    track_recall: bool = True

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError(
                f"batch_size must be >= 2 to mine negatives, got {self.batch_size}"
            )
        if self.margin <= 0:
            raise ConfigError(f"margin must be positive, got {self.margin}")
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if self.decay_factor <= 0 or self.decay_every <= 0:
            raise ConfigError("decay_factor and decay_every must be positive")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.branch not in BRANCH_CHOICES:
            raise ConfigError(
                f"branch must be one of {BRANCH_CHOICES}, got {self.branch!r}"
            )


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Step decay: lr0 / decay_factor ** floor(epoch / decay_every)."""
    return cfg.lr0 / cfg.decay_factor ** (epoch // cfg.decay_every)


def mine_hardest(sim: Mat, pair_pos: int, pairs: list[tuple[int, int]],
                 groups: np.ndarray) -> tuple[int, int]:
    """Hardest in-batch negatives for one positive pair.

    ``sim[i, j]`` scores image of pair i against text of pair j. Returns
    batch positions (i_h, t_h): t_h maximizes row ``pair_pos`` over texts
    outside the pair's caption group, i_h maximizes the column over images
    whose caption group excludes the pair's text. Ties break to the
    smallest index.
    """
    n = len(pairs)
    if sim.shape != (n, n) or n < 2:
        raise ShapeMismatchError(
            f"batch sim must be {n}x{n} with n >= 2, got {sim.shape}"
        )
    img_p, txt_p = pairs[pair_pos]
    t_h = -1
    best = -math.inf
    for j in range(n):
        if groups[pairs[j][1]] == img_p:
            continue
        if sim[pair_pos, j] > best:
            best = sim[pair_pos, j]
            t_h = j
    i_h = -1
    best = -math.inf
    for j in range(n):
        if pairs[j][0] == groups[txt_p]:
            continue
        if sim[j, pair_pos] > best:
            best = sim[j, pair_pos]
            i_h = j
    if t_h < 0 or i_h < 0:
        raise ConfigError(f"pair {pair_pos} has no eligible negative in batch")
    return i_h, t_h


def batch_loss_it(sim: Mat, pairs: list[tuple[int, int]], groups: np.ndarray,
                  margin: float) -> tuple[float, Mat]:
    """Bidirectional max-margin loss over a batch, mean over pairs.

    For each pair p: [m - sim[p,p] + sim[p,t_h]]_+ + [m - sim[p,p] + sim[i_h,p]]_+
    with both hardest negatives mined from ``sim``. Returns the loss and
    its subgradient w.r.t. every entry of ``sim``.
    """
    n = len(pairs)
    if sim.shape != (n, n):
        raise ShapeMismatchError(f"sim shape {sim.shape} != ({n}, {n})")
    if margin <= 0:
        raise ConfigError(f"margin must be positive, got {margin}")
    dsim = np.zeros_like(sim)
    total = 0.0
    for p in range(n):
        i_h, t_h = mine_hardest(sim, p, pairs, groups)
        slack_t = margin - sim[p, p] + sim[p, t_h]
        slack_i = margin - sim[p, p] + sim[i_h, p]
        if slack_t > 0:
            total += slack_t
            dsim[p, p] -= 1.0
            dsim[p, t_h] += 1.0
        if slack_i > 0:
            total += slack_i
            dsim[p, p] -= 1.0
            dsim[i_h, p] += 1.0
    dsim /= n
    return total / n, dsim


def batch_loss_tt(sim_tt: Mat, group_ids: np.ndarray,
                  margin: float) -> tuple[float, Mat]:
    """Triplet loss over same-group sentence pairs, mean over pairs.

    Positives are all ordered pairs (p, q), p != q, with equal group ids;
    the shared negative for anchor p is the hardest batch text from any
    other group. Rejects batches with no positive pair or no negative.
    """
    n = sim_tt.shape[0]
    group_ids = np.asarray(group_ids)
    if sim_tt.shape != (n, n) or group_ids.shape != (n,):
        raise ShapeMismatchError(
            f"sim_tt {sim_tt.shape} and groups {group_ids.shape} inconsistent"
        )
    if margin <= 0:
        raise ConfigError(f"margin must be positive, got {margin}")
    positives = [(p, q) for p in range(n) for q in range(n)
                 if p != q and group_ids[p] == group_ids[q]]
    if not positives:
        raise ConfigError("batch has no same-group sentence pair")
    hardest: dict[int, int] = {}
    for p in set(p for p, _ in positives):
        best, h = -math.inf, -1
        for j in range(n):
            if group_ids[j] == group_ids[p]:
                continue
            if sim_tt[p, j] > best:
                best, h = sim_tt[p, j], j
        if h < 0:
            raise ConfigError("batch has no out-of-group negative sentence")
        hardest[p] = h
    dsim = np.zeros_like(sim_tt)
    total = 0.0
    for p, q in positives:
        h = hardest[p]
        slack = margin - sim_tt[p, q] + sim_tt[p, h]
        if slack > 0:
            total += slack
            dsim[p, q] -= 1.0
            dsim[p, h] += 1.0
    dsim /= len(positives)
    return total / len(positives), dsim


@dataclass
class AdamState:
    """First/second moment accumulators, keyed like the parameter dict."""

    m: dict[str, Mat] = field(default_factory=dict)
    v: dict[str, Mat] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, Mat], grads: dict[str, Mat],
              state: AdamState, lr: float) -> dict[str, Mat]:
    """One Adam update with bias correction; mutates ``state``."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient for {k!r}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    out = {}
    for k in params:
        g = grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(params[k])
            state.v[k] = np.zeros_like(params[k])
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[k] / bc1
        v_hat = state.v[k] / bc2
        out[k] = params[k] - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out


@dataclass
class EpochRecord:
    branch: str
    epoch: int
    lr: float
    loss: float
    i2t_r1: float | None = None
    t2i_r1: float | None = None


@dataclass
class TrainResult:
    params: ModelParams
    log: list[EpochRecord]


def _image_batches(n_images: int, batch_size: int, rng: SeededRng) -> list[np.ndarray]:
    order = rng.shuffled(n_images)
    batches = [order[i:i + batch_size] for i in range(0, n_images, batch_size)]
    # a trailing singleton has no negatives; drop it
    return [b for b in batches if len(b) >= 2]


def _captions_by_image(dataset) -> list[np.ndarray]:
    return [np.flatnonzero(dataset.groups == i) for i in range(dataset.n_images)]


def _train_r1(branch: FusionBranch, dataset) -> tuple[float, float]:
    from .evaluation import GroundTruth, recall_at
    from .reranking import rank_row

    sim = score_matrix(branch, dataset.images, dataset.texts)
    gt = GroundTruth.from_group_map(dataset.groups, dataset.n_images)
    i2t = [rank_row(row) for row in sim]
    t2i = [rank_row(col) for col in sim.T]
    return (recall_at(i2t, gt, 1, direction="i2t"),
            recall_at(t2i, gt, 1, direction="t2i"))


def _fit_it_branch(branch: FusionBranch, dataset, cfg: TrainConfig,
                   rng: SeededRng, log: list[EpochRecord]) -> FusionBranch:
    caps = _captions_by_image(dataset)
    weights = branch_to_dict(branch)
    state = AdamState()
    for epoch in range(cfg.epochs):
        lr = learning_rate(cfg, epoch)
        epoch_loss = 0.0
        batches = _image_batches(dataset.n_images, cfg.batch_size, rng)
        for image_ids in batches:
            pairs = [(int(i), int(caps[i][rng.choice(len(caps[i]), 1)[0]])) for i in image_ids]
            branch = branch_from_dict(weights)
            xs = dataset.images[[p[0] for p in pairs]]
            ys = dataset.texts[[p[1] for p in pairs]]
            sim = score_matrix(branch, xs, ys)
            loss, dsim = batch_loss_it(sim, pairs, dataset.groups, cfg.margin)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"image-text loss is {loss} at epoch {epoch}")
            epoch_loss += loss
            grads = zero_grads_like(branch)
            for i, j in zip(*np.nonzero(dsim)):
                _, cache = forward_pair(branch, xs[i], ys[j])
                accumulate_grads(grads, [backward_pair(branch, cache, dsim[i, j])])
            weights = adam_step(weights, grads, state, lr)
        branch = branch_from_dict(weights)
        rec = EpochRecord("image-text", epoch, lr, epoch_loss / max(1, len(batches)))
        if cfg.track_recall:
            rec.i2t_r1, rec.t2i_r1 = _train_r1(branch, dataset)
        log.append(rec)
    return branch


def _fit_tt_branch(branch: FusionBranch, dataset, cfg: TrainConfig,
                   rng: SeededRng, log: list[EpochRecord],
                   it_branch: FusionBranch | None = None) -> FusionBranch:
    caps = _captions_by_image(dataset)
    if any(len(c) < 2 for c in caps):
        raise ConfigError(
            "text-text training needs at least 2 captions per image"
        )
    images_per_batch = cfg.batch_size // 2
    if images_per_batch < 2:
        raise ConfigError(
            "text-text training needs batch_size >= 4 (two captions per "
            "image, at least two images)"
        )
    weights = branch_to_dict(branch)
    state = AdamState()
    for epoch in range(cfg.epochs):
        lr = learning_rate(cfg, epoch)
        epoch_loss = 0.0
        batches = _image_batches(dataset.n_images, images_per_batch, rng)
        for image_ids in batches:
            text_ids: list[int] = []
            for i in image_ids:
                picked = rng.choice(len(caps[i]), 2)
                text_ids.extend(int(caps[i][k]) for k in picked)
            branch = branch_from_dict(weights)
            ts = dataset.texts[text_ids]
            group_ids = dataset.groups[text_ids]
            sim = score_matrix(branch, ts, ts)
            loss, dsim = batch_loss_tt(sim, group_ids, cfg.margin)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"text-text loss is {loss} at epoch {epoch}")
            epoch_loss += loss
            grads = zero_grads_like(branch)
            for i, j in zip(*np.nonzero(dsim)):
                _, cache = forward_pair(branch, ts[i], ts[j])
                accumulate_grads(grads, [backward_pair(branch, cache, dsim[i, j])])
            weights = adam_step(weights, grads, state, lr)
        branch = branch_from_dict(weights)
        rec = EpochRecord("text-text", epoch, lr,
                          epoch_loss / max(1, len(batches)))
        if cfg.track_recall and it_branch is not None:
            rec.i2t_r1, rec.t2i_r1 = _train_r1(it_branch, dataset)
        log.append(rec)
    return branch


def train(dataset, cfg: TrainConfig, model_cfg: ModelConfig | None = None,
          params: ModelParams | None = None) -> TrainResult:
    """Train the model on a paired dataset.

    With ``branch="both"`` the image-text branch is fitted first, the
    text-text branch is warm-started from it and then fitted. A single
    branch can be selected instead; ``params`` supplies starting weights
    (required when training only the text-text branch so there is an
    image-text branch to warm-start from).
    """
    if dataset.n_images == 0:
        raise ConfigError("dataset is empty")
    rng = SeededRng(cfg.seed)
    if params is None:
        if model_cfg is None:
            model_cfg = ModelConfig(d_raw_img=dataset.images.shape[1],
                                    d_raw_txt=dataset.texts.shape[1])
        params = init_params(model_cfg, rng)
    if (params.image_text.raw_a != dataset.images.shape[1]
            or params.image_text.raw_b != dataset.texts.shape[1]):
        raise ShapeMismatchError(
            f"model raw dims ({params.image_text.raw_a}, "
            f"{params.image_text.raw_b}) do not match dataset "
            f"({dataset.images.shape[1]}, {dataset.texts.shape[1]})"
        )
    log: list[EpochRecord] = []
    if cfg.branch in ("both", "image-text"):
        it = _fit_it_branch(params.image_text, dataset, cfg, rng, log)
        params = replace(params, image_text=it)
    if cfg.branch in ("both", "text-text"):
        params = init_tt_from_it(params, rng)
        tt = _fit_tt_branch(params.text_text, dataset, cfg, rng, log,
                            it_branch=params.image_text)
        params = replace(params, text_text=tt)
    return TrainResult(params, log)


def grad_check(branch: FusionBranch, x_raw, y_raw, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Perturbs every weight entry by +-h and compares the score difference
    quotient against :func:`backward_pair`. Relative error uses the
    denominator max(1e-8, |analytic| + |numeric|).
    """
    _, cache = forward_pair(branch, x_raw, y_raw)
    analytic = backward_pair(branch, cache, 1.0)
    from .model import grads_to_dict

    a_dict = grads_to_dict(analytic)
    weights = {k: v.copy() for k, v in branch_to_dict(branch).items()}
    worst = 0.0
    for key, w in weights.items():
        for idx in np.ndindex(w.shape):
            orig = w[idx]
            w[idx] = orig + h
            plus, _ = forward_pair(branch_from_dict(weights), x_raw, y_raw)
            w[idx] = orig - h
            minus, _ = forward_pair(branch_from_dict(weights), x_raw, y_raw)
            w[idx] = orig
            numeric = (plus - minus) / (2.0 * h)
            a = a_dict[key][idx]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
