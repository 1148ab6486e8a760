"""Perplexity evaluation under budgeted caches, (t, r) grid search, and
the empirical layer sweep.

Losses are mean teacher-forced negative log-likelihoods (natural log);
perplexity is exp(loss). Sweep scores are perplexities, so higher score
means more degradation from compressing that window of layers.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .allocation import (
    AllocationPlan,
    DEFAULT_SINKS,
    PlanParams,
    build_plan,
    uniform_plan,
    window_plan,
)
from .cache import CacheSet, build_cache_set, reset
from .errors import AllocationError, InputError, ShapeError
from .model import Model, forward_chunk
from .numerics import log_softmax_f64
from .profiling import ImportanceProfile, spearman

DEFAULT_T_GRID = (0.5, 0.6, 0.7, 0.8, 0.9, 0.95)
DEFAULT_R_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
DEFAULT_WINDOW = 5


def chunk_nll(model: Model, tokens, caches: CacheSet) -> float:
    """Mean negative log-likelihood of tokens[1:] given what precedes them,
    teacher-forced through the budgeted caches."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size < 2:
        raise InputError(f"need at least 2 tokens for a loss, got {tokens.size}")
    logits, _ = forward_chunk(model, tokens, caches)
    log_probs = log_softmax_f64(logits[:-1])
    picked = log_probs[np.arange(tokens.size - 1), tokens[1:]]
    return float(-np.mean(picked))


def chunked_perplexity(
    model: Model,
    corpus_tokens,
    context_len: int,
    plan: AllocationPlan,
) -> float:
    """Mean chunk loss over consecutive non-overlapping chunks.

    The corpus splits into chunks of `context_len` tokens (a trailing
    partial chunk is dropped); the caches are rebuilt from the plan and
    reset before each chunk. Returns the mean NLL; exp() for perplexity.
    """
    corpus_tokens = np.asarray(corpus_tokens, dtype=np.int64)
    cfg = model.config
    if context_len < 2:
        raise InputError(f"context_len must be >= 2, got {context_len}")
    if context_len > cfg.max_context:
        raise InputError(
            f"context_len {context_len} exceeds max_context {cfg.max_context}"
        )
    if corpus_tokens.size < context_len:
        raise InputError(
            f"corpus has {corpus_tokens.size} tokens; need at least one full "
            f"context of {context_len}"
        )
    caches = build_cache_set(plan, cfg)
    losses = []
    for start in range(0, corpus_tokens.size - context_len + 1, context_len):
        reset(caches)
        losses.append(chunk_nll(model, corpus_tokens[start : start + context_len], caches))
    return float(np.mean(losses))


@dataclass
class GridPoint:
    t: float
    r: float
    loss: float  # NaN when infeasible
    feasible: bool


@dataclass
class SearchReport:
    compression: float
    grid: list[GridPoint]
    best: tuple[float, float] | None  # (t, r) of the minimum feasible loss
    best_loss: float | None
    uniform_loss: float  # same corpus under the uniform plan, for comparison
    chunks_evaluated: int
    tokens_per_chunk: int
    sinks: int = DEFAULT_SINKS
    layer_t: float = 0.0
    layer_r: float = 0.0


def parameter_search(
    model: Model,
    corpus_tokens,
    context_len: int,
    compression: float,
    grid: list[tuple[float, float]],
    profile: ImportanceProfile,
    sinks: int = DEFAULT_SINKS,
    layer_t: float = 0.0,
    layer_r: float = 0.0,
    max_workers: int = 1,
) -> SearchReport:
    """Evaluate the head-reallocation plan at every (t, r) grid point.

    Infeasible points (plan construction fails the budget floor) are
    recorded but excluded from the argmin. The best point is the first
    grid entry achieving the minimum loss. Grid points are independent
    jobs; results are reduced in grid order regardless of completion
    order, so fan-out does not change the report.
    """
    if not grid:
        raise InputError("parameter grid is empty")
    corpus_tokens = np.asarray(corpus_tokens, dtype=np.int64)
    cfg = model.config

    def evaluate(point):
        t, r = point
        try:
            plan = build_plan(
                profile,
                cfg,
                "baklava",
                compression,
                PlanParams(t=t, r=r, layer_t=layer_t, layer_r=layer_r),
                sinks,
            )
        except AllocationError:
            return GridPoint(t, r, math.nan, False)
        loss = chunked_perplexity(model, corpus_tokens, context_len, plan)
        return GridPoint(t, r, loss, True)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            points = list(pool.map(evaluate, grid))
    else:
        points = [evaluate(p) for p in grid]

    best = None
    best_loss = None
    for point in points:
        if point.feasible and (best_loss is None or point.loss < best_loss):
            best, best_loss = (point.t, point.r), point.loss

    uniform_loss = chunked_perplexity(
        model, corpus_tokens, context_len, uniform_plan(cfg, compression, sinks)
    )
    n_chunks = corpus_tokens.size // context_len
    return SearchReport(
        compression=compression,
        grid=points,
        best=best,
        best_loss=best_loss,
        uniform_loss=uniform_loss,
        chunks_evaluated=n_chunks,
        tokens_per_chunk=context_len,
        sinks=sinks,
        layer_t=layer_t,
        layer_r=layer_r,
    )


@dataclass
class SweepReport:
    window: int
    compression: float
    scores: list[float]  # perplexity per center layer; len == num_layers
    bounds: list[tuple[int, int]] = field(default_factory=list)


def layer_sweep(
    model: Model,
    corpus_tokens,
    context_len: int,
    window: int,
    compression: float,
    sinks: int = DEFAULT_SINKS,
) -> SweepReport:
    """Compress a sliding window of layers around each center and score it.

    For center L the window is [max(0, L - window//2),
    min(last_layer, L + window//2)]; only those layers are compressed,
    all others keep full budgets. The score is the chunked perplexity.
    """
    cfg = model.config
    if window % 2 != 1 or not 1 <= window <= cfg.num_layers:
        raise InputError(
            f"window must be odd and within [1, {cfg.num_layers}], got {window}"
        )
    half = window // 2
    scores = []
    bounds = []
    for center in range(cfg.num_layers):
        lo = max(0, center - half)
        hi = min(cfg.num_layers - 1, center + half)
        plan = window_plan(cfg, lo, hi, compression, sinks)
        loss = chunked_perplexity(model, corpus_tokens, context_len, plan)
        scores.append(float(math.exp(loss)))
        bounds.append((lo, hi))
    return SweepReport(window=window, compression=compression, scores=scores, bounds=bounds)


@dataclass
class CorrelationReport:
    """Alignment between the layer heuristic and the empirical sweep.

    Sweep scores are perplexities, so a higher score already means more
    degradation; the correlation is positive when the heuristic ranks the
    empirically fragile layers as important. The trimmed variant drops
    window//2 layers at each end, where window overlap at the boundaries
    biases scores.
    """

    full: float
    full_degenerate: bool
    trimmed: float
    trimmed_degenerate: bool
    trim: int


def heuristic_vs_empirical(
    profile: ImportanceProfile, sweep: SweepReport
) -> CorrelationReport:
    imp = np.asarray(profile.layer_importance, dtype=np.float64)
    scores = np.asarray(sweep.scores, dtype=np.float64)
    if imp.shape != scores.shape:
        raise ShapeError(
            f"layer importance ({imp.shape}) and sweep scores ({scores.shape}) differ"
        )
    full, full_deg = spearman(imp, scores)
    trim = sweep.window // 2
    if trim > 0 and imp.size - 2 * trim >= 2:
        trimmed, trimmed_deg = spearman(imp[trim:-trim], scores[trim:-trim])
    elif trim == 0:
        trimmed, trimmed_deg = full, full_deg
    else:
        trimmed, trimmed_deg = 0.0, True
    return CorrelationReport(full, full_deg, trimmed, trimmed_deg, trim)
