"""Bilinear fusion similarity model with a rank constraint.

A branch scores a pair (x, y) of raw feature vectors as

    score = sigmoid( w_out . sum_r (A_r @ (W_a @ x)) * (B_r @ (W_b @ y)) )

where W_a, W_b project each side into its own space, the R factor pairs
(A_r, B_r) map both sides into a shared fusion space where they interact
through an elementwise product, and w_out reads the fused vector out to a
logit. The image-text branch takes an image on side a and a sentence on
side b; the text-text branch takes sentences on both sides.

The backward pass is hand-derived and exact; ``grad_check`` in the training
module verifies it against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from .errors import ConfigError, ShapeMismatchError
from .matrix import Mat, SeededRng, check_matrix, check_vector, matmul, sigmoid


@dataclass(frozen=True)
class FusionBranch:
    """Weights of one fusion branch; immutable once constructed.

    Shapes: w_in_a (d_a, raw_a), w_in_b (d_b, raw_b), each factor pair
    (d_fused, d_a) / (d_fused, d_b), w_out (1, d_fused), optional out_bias
    (1, 1).
    """

    w_in_a: Mat
    w_in_b: Mat
    factors_a: tuple[Mat, ...]
    factors_b: tuple[Mat, ...]
    w_out: Mat
    out_bias: Mat | None = None

    def __post_init__(self):
        if len(self.factors_a) != len(self.factors_b) or not self.factors_a:
            raise ConfigError(
                f"factor banks must be equal-length and non-empty, got "
                f"{len(self.factors_a)} and {len(self.factors_b)}"
            )
        d_a, d_b, d_f = self.d_a, self.d_b, self.d_fused
        for r, (fa, fb) in enumerate(zip(self.factors_a, self.factors_b)):
            if fa.shape != (d_f, d_a) or fb.shape != (d_f, d_b):
                raise ShapeMismatchError(
                    f"factor pair {r} has shapes {fa.shape}/{fb.shape}, "
                    f"expected {(d_f, d_a)}/{(d_f, d_b)}"
                )
        if self.w_out.shape != (1, d_f):
            raise ShapeMismatchError(
                f"w_out shape {self.w_out.shape} != (1, {d_f})"
            )
        if self.out_bias is not None and self.out_bias.shape != (1, 1):
            raise ShapeMismatchError(
                f"out_bias shape {self.out_bias.shape} != (1, 1)"
            )

    @property
    def rank(self) -> int:
        return len(self.factors_a)

    @property
    def d_a(self) -> int:
        return self.w_in_a.shape[0]

    @property
    def d_b(self) -> int:
        return self.w_in_b.shape[0]

    @property
    def d_fused(self) -> int:
        return self.factors_a[0].shape[0]

    @property
    def raw_a(self) -> int:
        return self.w_in_a.shape[1]

    @property
    def raw_b(self) -> int:
        return self.w_in_b.shape[1]


@dataclass(frozen=True)
class ModelParams:
    """Both branches plus the seed they were initialized from."""

    image_text: FusionBranch
    text_text: FusionBranch
    seed: int = 0


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions of a full model; desk-scale defaults.

    The reference configuration (all projection and fusion dims 1024,
    rank 20) is expressible by overriding the fields.
    """

    d_raw_img: int = 32
    d_raw_txt: int = 32
    d_img: int = 16
    d_txt: int = 16
    d_fused: int = 16
    d_fused_tt: int | None = None  # None -> same as d_fused
    rank: int = 4
    output_bias: bool = False

    def __post_init__(self):
        dims = [self.d_raw_img, self.d_raw_txt, self.d_img, self.d_txt,
                self.d_fused, self.rank]
        if self.d_fused_tt is not None:
            dims.append(self.d_fused_tt)
        if any(d <= 0 for d in dims):
            raise ConfigError(f"model dims must be positive: {self}")

    @property
    def fused_tt(self) -> int:
        return self.d_fused if self.d_fused_tt is None else self.d_fused_tt


@dataclass
class ForwardCache:
    """Every intermediate of one pair's forward pass, for exact backprop."""

    branch: FusionBranch
    x_raw: Mat
    y_raw: Mat
    x_proj: Mat
    y_proj: Mat
    u: tuple[Mat, ...]  # factors_a[r] @ x_proj
    v: tuple[Mat, ...]  # factors_b[r] @ y_proj
    fused: Mat
    logit: float
    score: float


@dataclass
class BranchGrads:
    """Gradients of a scalar w.r.t. every weight of a FusionBranch."""

    w_in_a: Mat
    w_in_b: Mat
    factors_a: list[Mat]
    factors_b: list[Mat]
    w_out: Mat
    out_bias: Mat | None = None


def _draw(rng: SeededRng, rows: int, cols: int) -> Mat:
    # uniform on [-1/sqrt(fan_in), +1/sqrt(fan_in)], fan_in = cols
    return rng.uniform(rows, cols, 1.0 / np.sqrt(cols))


def _init_branch(rng: SeededRng, raw_a: int, raw_b: int, d_a: int, d_b: int,
                 d_fused: int, rank: int, output_bias: bool) -> FusionBranch:
    w_in_a = _draw(rng, d_a, raw_a)
    w_in_b = _draw(rng, d_b, raw_b)
    factors_a = tuple(_draw(rng, d_fused, d_a) for _ in range(rank))
    factors_b = tuple(_draw(rng, d_fused, d_b) for _ in range(rank))
    w_out = _draw(rng, 1, d_fused)
    bias = np.zeros((1, 1)) if output_bias else None
    return FusionBranch(w_in_a, w_in_b, factors_a, factors_b, w_out, bias)


def init_params(cfg: ModelConfig, rng: SeededRng) -> ModelParams:
    """Draw all weights of both branches from ``rng`` (scale 1/sqrt(fan_in)).

    Draw order is fixed (image-text branch first, then text-text; within a
    branch: w_in_a, w_in_b, factor banks, w_out), so a seed pins every
    weight.
    """
    it = _init_branch(rng, cfg.d_raw_img, cfg.d_raw_txt, cfg.d_img,
                      cfg.d_txt, cfg.d_fused, cfg.rank, cfg.output_bias)
    tt = _init_branch(rng, cfg.d_raw_txt, cfg.d_raw_txt, cfg.d_txt,
                      cfg.d_txt, cfg.fused_tt, cfg.rank, cfg.output_bias)
    return ModelParams(image_text=it, text_text=tt, seed=rng.seed)


def init_tt_from_it(params: ModelParams, rng: SeededRng | None = None) -> ModelParams:
    """Warm-start the text-text branch from the trained image-text branch.

    Both text pathways of the text-text branch (input projection and factor
    bank) are copied from the image-text branch's text side. The output
    layer is copied too when the fusion dims agree; otherwise the output
    layer and the factor banks are re-initialized (their shapes depend on
    the text-text fusion dim). ``params`` is returned unchanged apart from
    the new text-text branch.
    """
    it = params.image_text
    tt = params.text_text
    if tt.w_in_a.shape != it.w_in_b.shape or tt.w_in_b.shape != it.w_in_b.shape:
        raise ShapeMismatchError(
            f"text projections incompatible: text-text expects "
            f"{tt.w_in_a.shape}, image-text provides {it.w_in_b.shape}"
        )
    w_in = it.w_in_b.copy()
    if tt.d_fused == it.d_fused:
        factors = tuple(f.copy() for f in it.factors_b)
        new_tt = replace(
            tt,
            w_in_a=w_in,
            w_in_b=it.w_in_b.copy(),
            factors_a=factors,
            factors_b=tuple(f.copy() for f in it.factors_b),
            w_out=it.w_out.copy(),
        )
    else:
        # fusion dims differ: factor banks and w_out keep their own shapes,
        # freshly drawn from a seeded stream
        if rng is None:
            rng = SeededRng(params.seed)
        factors_a = tuple(_draw(rng, tt.d_fused, tt.d_a) for _ in range(tt.rank))
        factors_b = tuple(_draw(rng, tt.d_fused, tt.d_b) for _ in range(tt.rank))
        w_out = _draw(rng, 1, tt.d_fused)
        new_tt = replace(
            tt,
            w_in_a=w_in,
            w_in_b=it.w_in_b.copy(),
            factors_a=factors_a,
            factors_b=factors_b,
            w_out=w_out,
        )
    return replace(params, text_text=new_tt)


def _project_side(w_in: Mat, factors: tuple[Mat, ...], raw: Mat) -> tuple[Mat, tuple[Mat, ...]]:
    proj = matmul(w_in, raw)
    return proj, tuple(matmul(f, proj) for f in factors)


def _combine(branch: FusionBranch, u: tuple[Mat, ...], v: tuple[Mat, ...]) -> tuple[Mat, float, float]:
    fused = u[0] * v[0]
    for r in range(1, len(u)):
        fused = fused + u[r] * v[r]
    logit = float(np.dot(branch.w_out[0], fused))
    if branch.out_bias is not None:
        logit += float(branch.out_bias[0, 0])
    return fused, logit, sigmoid(logit)


def forward_pair(branch: FusionBranch, x_raw, y_raw) -> tuple[float, ForwardCache]:
    """Score one (x, y) pair; returns the score in (0, 1) and a cache."""
    x_raw = check_vector(x_raw, "x_raw")
    y_raw = check_vector(y_raw, "y_raw")
    if x_raw.shape[0] != branch.raw_a or y_raw.shape[0] != branch.raw_b:
        raise ShapeMismatchError(
            f"raw feature dims ({x_raw.shape[0]}, {y_raw.shape[0]}) do not "
            f"match branch ({branch.raw_a}, {branch.raw_b})"
        )
    x_proj, u = _project_side(branch.w_in_a, branch.factors_a, x_raw)
    y_proj, v = _project_side(branch.w_in_b, branch.factors_b, y_raw)
    fused, logit, score = _combine(branch, u, v)
    cache = ForwardCache(branch, x_raw, y_raw, x_proj, y_proj, u, v,
                         fused, logit, score)
    return score, cache


def score_matrix(branch: FusionBranch, xs: Mat, ys: Mat, workers: int = 1) -> Mat:
    """Dense score matrix: entry [i, j] = forward_pair(xs[i], ys[j]) score.

    Per-item projections are hoisted out of the pair loop; each entry is
    then the same arithmetic as ``forward_pair``, so the result is
    bit-identical to the pairwise loop for any ``workers`` count.
    """
    xs = check_matrix(xs, "xs")
    ys = check_matrix(ys, "ys")
    if xs.shape[0] == 0 or ys.shape[0] == 0:
        raise ShapeMismatchError("score_matrix inputs must be non-empty")
    if xs.shape[1] != branch.raw_a or ys.shape[1] != branch.raw_b:
        raise ShapeMismatchError(
            f"feature dims ({xs.shape[1]}, {ys.shape[1]}) do not match "
            f"branch ({branch.raw_a}, {branch.raw_b})"
        )
    side_a = [_project_side(branch.w_in_a, branch.factors_a, x)[1] for x in xs]
    side_b = [_project_side(branch.w_in_b, branch.factors_b, y)[1] for y in ys]

    out = np.empty((xs.shape[0], ys.shape[0]))

    def fill_row(i: int) -> None:
        u = side_a[i]
        row = out[i]
        for j, v in enumerate(side_b):
            row[j] = _combine(branch, u, v)[2]

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill_row, range(xs.shape[0])))
    else:
        for i in range(xs.shape[0]):
            fill_row(i)
    return out


def backward_pair(branch: FusionBranch, cache: ForwardCache,
                  upstream_dscore: float) -> BranchGrads:
    """Exact gradient of (upstream_dscore * score) w.r.t. every weight."""
    if cache.branch is not branch:
        raise ConfigError(
            "forward cache was produced by different branch parameters"
        )
    dlogit = upstream_dscore * cache.score * (1.0 - cache.score)
    d_w_out = dlogit * cache.fused[np.newaxis, :]
    d_bias = np.array([[dlogit]]) if branch.out_bias is not None else None
    d_fused = dlogit * branch.w_out[0]

    d_x_proj = np.zeros_like(cache.x_proj)
    d_y_proj = np.zeros_like(cache.y_proj)
    d_factors_a = []
    d_factors_b = []
    for r in range(branch.rank):
        du = d_fused * cache.v[r]
        dv = d_fused * cache.u[r]
        d_factors_a.append(np.outer(du, cache.x_proj))
        d_factors_b.append(np.outer(dv, cache.y_proj))
        d_x_proj += branch.factors_a[r].T @ du
        d_y_proj += branch.factors_b[r].T @ dv
    d_w_in_a = np.outer(d_x_proj, cache.x_raw)
    d_w_in_b = np.outer(d_y_proj, cache.y_raw)
    return BranchGrads(d_w_in_a, d_w_in_b, d_factors_a, d_factors_b,
                       d_w_out, d_bias)


# --- flat dict views, used by the optimizer and checkpoint code ---

def branch_to_dict(branch: FusionBranch) -> dict[str, Mat]:
    """Flatten a branch to named arrays; key order is deterministic."""
    out: dict[str, Mat] = {"w_in_a": branch.w_in_a, "w_in_b": branch.w_in_b}
    for r, (fa, fb) in enumerate(zip(branch.factors_a, branch.factors_b)):
        out[f"factor_a_{r:03d}"] = fa
        out[f"factor_b_{r:03d}"] = fb
    out["w_out"] = branch.w_out
    if branch.out_bias is not None:
        out["out_bias"] = branch.out_bias
    return out


def branch_from_dict(d: dict[str, Mat]) -> FusionBranch:
    """Rebuild a branch from :func:`branch_to_dict` output."""
    rank = sum(1 for k in d if k.startswith("factor_a_"))
    if rank == 0:
        raise ConfigError("branch dict has no factor matrices")
    return FusionBranch(
        w_in_a=d["w_in_a"],
        w_in_b=d["w_in_b"],
        factors_a=tuple(d[f"factor_a_{r:03d}"] for r in range(rank)),
        factors_b=tuple(d[f"factor_b_{r:03d}"] for r in range(rank)),
        w_out=d["w_out"],
        out_bias=d.get("out_bias"),
    )


def grads_to_dict(grads: BranchGrads) -> dict[str, Mat]:
    out: dict[str, Mat] = {"w_in_a": grads.w_in_a, "w_in_b": grads.w_in_b}
    for r, (fa, fb) in enumerate(zip(grads.factors_a, grads.factors_b)):
        out[f"factor_a_{r:03d}"] = fa
        out[f"factor_b_{r:03d}"] = fb
    out["w_out"] = grads.w_out
    if grads.out_bias is not None:
        out["out_bias"] = grads.out_bias
    return out


def zero_grads_like(branch: FusionBranch) -> dict[str, Mat]:
    return {k: np.zeros_like(v) for k, v in branch_to_dict(branch).items()}


def accumulate_grads(total: dict[str, Mat], grads: Iterable[BranchGrads]) -> dict[str, Mat]:
    """Sum gradients into ``total`` in the given (deterministic) order."""
    for g in grads:
        for k, v in grads_to_dict(g).items():
            total[k] += v
    return total
