"""Query strategies: pure scorers and selectors over posteriors and embeddings.

All scores are oriented "higher = more informative" so that pool ranking is
strategy-agnostic. Scorers are pure functions of their inputs; the registry at
the bottom adapts them to the controller's query interface and accepts
external plugins by name.
"""

from __future__ import annotations

import warnings as _warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

UNCERTAINTY_METHODS = ("CONF", "MAR", "ENT")


@dataclass
class QueryResult:
    """Ranked pool slice: scores non-increasing, ties broken by sample_id."""

    ranked: List[Tuple[str, float]]
    strategy: str
    round_index: int = 0
    rng_seed: int = 0

    @property
    def sample_ids(self) -> List[str]:
        return [sid for sid, _ in self.ranked]


@dataclass
class CealOutput:
    query: QueryResult
    pseudo: Dict[str, np.ndarray] = field(default_factory=dict)  # sample_id -> argmax mask


def _check_posterior(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 3:
        raise ValueError(f"posterior must be HxWxK, got shape {p.shape}")
    if p.shape[-1] < 2:
        raise ValueError("posterior needs at least 2 classes")
    return p


def _entropy_map(p: np.ndarray) -> np.ndarray:
    # -sum p ln p with 0 ln 0 := 0
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(p > 0, np.log(p), 0.0)
    return -(p * logs).sum(axis=-1)


def score_uncertainty(p: np.ndarray, method: str) -> float:
    """Mean per-pixel uncertainty of a posterior.

    CONF = 1 - max_k p_k, MAR = 1 - (p_(1) - p_(2)), ENT = -sum p ln p.
    """
    p = _check_posterior(p)
    if method == "ENT":
        pixel = _entropy_map(p)
    elif method == "CONF":
        pixel = 1.0 - p.max(axis=-1)
    elif method == "MAR":
        part = np.partition(p, -2, axis=-1)
        pixel = 1.0 - (part[..., -1] - part[..., -2])
    else:
        raise ValueError(f"unknown uncertainty method {method!r}")
    return float(pixel.mean())


def _mc_entropy_map(replicates: Sequence[np.ndarray]) -> np.ndarray:
    if len(replicates) < 2:
        raise ValueError("need at least 2 posterior replicates")
    stack = np.stack([_check_posterior(r) for r in replicates], axis=0)
    if len({r.shape for r in map(np.asarray, replicates)}) != 1:
        raise ValueError("replicate shapes differ")
    return _entropy_map(stack.mean(axis=0))


def score_mc_entropy(replicates: Sequence[np.ndarray]) -> float:
    """Predictive entropy of the across-replicate mean posterior, pixel-averaged."""
    return float(_mc_entropy_map(replicates).mean())


def score_regional_mc(replicates: Sequence[np.ndarray], region_size: int) -> float:
    """Max over r x r tiles of the tile-mean MC entropy (ragged edges allowed)."""
    if region_size < 1:
        raise ValueError("region_size must be >= 1")
    ent = _mc_entropy_map(replicates)
    h, w = ent.shape
    r = region_size
    best = -np.inf
    for i in range(0, h, r):
        for j in range(0, w, r):
            best = max(best, float(ent[i : i + r, j : j + r].mean()))
    return best


def select_coreset(
    labeled: Sequence[np.ndarray],
    pool: Sequence[Tuple[str, np.ndarray]],
    k: int,
) -> List[str]:
    """k-center greedy under Euclidean distance.

    Repeatedly picks the pool point farthest from its nearest chosen center
    (labeled plus already selected); ties go to the ascending sample_id. With
    no labeled points, seeding starts from the pool's pairwise-farthest pair
    (the smaller id of the winning pair).
    """
    if k > len(pool):
        raise ValueError(f"k={k} exceeds pool size {len(pool)}")
    if k == 0:
        return []
    pool = sorted(pool, key=lambda t: t[0])
    ids = [sid for sid, _ in pool]
    feats = np.stack([np.asarray(v, dtype=np.float64).ravel() for _, v in pool])

    if len(labeled):
        centers = np.stack([np.asarray(v, dtype=np.float64).ravel() for v in labeled])
        min_dist = np.linalg.norm(feats[:, None, :] - centers[None, :, :], axis=-1).min(axis=1)
    else:
        if len(pool) == 1:
            return [ids[0]]
        pairwise = np.linalg.norm(feats[:, None, :] - feats[None, :, :], axis=-1)
        # farthest pair; ids are sorted so the first argmax is the smallest (i, j)
        i, j = np.unravel_index(int(pairwise.argmax()), pairwise.shape)
        seed = min(int(i), int(j))
        min_dist = np.linalg.norm(feats - feats[seed], axis=-1)
        selected = [ids[seed]]
        taken = {seed}
        for _ in range(k - 1):
            order = np.argsort(-min_dist, kind="stable")  # ids sorted, so stable = id tiebreak
            nxt = next(int(x) for x in order if int(x) not in taken)
            taken.add(nxt)
            selected.append(ids[nxt])
            min_dist = np.minimum(min_dist, np.linalg.norm(feats - feats[nxt], axis=-1))
        return selected

    selected: List[str] = []
    taken: set = set()
    for _ in range(k):
        order = np.argsort(-min_dist, kind="stable")
        nxt = next(int(x) for x in order if int(x) not in taken)
        taken.add(nxt)
        selected.append(ids[nxt])
        min_dist = np.minimum(min_dist, np.linalg.norm(feats - feats[nxt], axis=-1))
    return selected


def _cos_sim_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    bn = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    return an @ bn.T


def score_representative(
    candidates: Sequence[Tuple[str, np.ndarray, float]],
    pool_embeddings: Sequence[np.ndarray],
    n: int,
) -> List[str]:
    """Two-stage pick: keep the 2n most uncertain candidates, then greedily
    maximize the marginal gain of Rep(S) = sum_x max_{s in S} cos(x, s)."""
    if n == 0:
        return []
    if n > len(candidates):
        raise ValueError(f"n={n} exceeds candidate count {len(candidates)}")
    if n == len(candidates):
        return sorted(sid for sid, _, _ in candidates)

    # Shortlist stays in (uncertainty desc, id asc) order so that stable
    # argsort resolves equal gains toward the more uncertain candidate.
    shortlist = sorted(candidates, key=lambda t: (-t[2], t[0]))[: 2 * n]
    ids = [sid for sid, _, _ in shortlist]
    cand_feats = np.stack([np.asarray(e, dtype=np.float64).ravel() for _, e, _ in shortlist])
    pool_feats = np.stack([np.asarray(e, dtype=np.float64).ravel() for e in pool_embeddings])
    sims = _cos_sim_matrix(pool_feats, cand_feats)  # |pool| x |shortlist|

    best_cover = np.full(len(pool_feats), -np.inf)
    chosen: List[str] = []
    taken: set = set()
    for _ in range(n):
        gains = np.maximum(sims, best_cover[:, None]).sum(axis=0)
        order = np.argsort(-gains, kind="stable")
        nxt = next(int(x) for x in order if int(x) not in taken)
        taken.add(nxt)
        chosen.append(ids[nxt])
        best_cover = np.maximum(best_cover, sims[:, nxt])
    return chosen


def rank_pool(
    scores: Dict[str, float],
    n: int,
    strategy: str,
    rng_seed: int = 0,
    round_index: int = 0,
) -> QueryResult:
    """Top-n ranking: (score desc, sample_id asc), or a seeded permutation for RANDOM."""
    ids = sorted(scores)
    if not ids:
        _warnings.warn("rank_pool called on an empty pool", stacklevel=2)
        return QueryResult([], strategy, round_index, rng_seed)
    if n > len(ids):
        _warnings.warn(f"requested {n} samples from a pool of {len(ids)}; truncating", stacklevel=2)
        n = len(ids)
    if strategy == "RANDOM":
        rng = np.random.default_rng(rng_seed)
        perm = rng.permutation(len(ids))
        ranked = [(ids[int(i)], float(len(ids) - rank)) for rank, i in enumerate(perm)]
    else:
        ranked = sorted(((sid, float(scores[sid])) for sid in ids), key=lambda t: (-t[1], t[0]))
    return QueryResult(ranked[:n], strategy, round_index, rng_seed)


def select_ceal(
    pool_scores: QueryResult,
    posteriors: Dict[str, np.ndarray],
    n: int,
    delta: float,
) -> CealOutput:
    """Top-n entropy queries for humans; pseudo-label the sub-delta remainder."""
    top = QueryResult(pool_scores.ranked[:n], pool_scores.strategy, pool_scores.round_index, pool_scores.rng_seed)
    queried = set(top.sample_ids)
    pseudo: Dict[str, np.ndarray] = {}
    for sid, score in pool_scores.ranked[n:]:
        if sid in queried:
            continue
        if score < delta and sid in posteriors:
            pseudo[sid] = np.asarray(posteriors[sid]).argmax(axis=-1).astype(np.int16)
    return CealOutput(query=top, pseudo=pseudo)


# --- controller-facing registry -------------------------------------------
#
# A strategy implementation takes a QueryContext plus the number of samples to
# query and returns a CealOutput (pseudo set empty for everything but CEAL).


@dataclass
class QueryContext:
    """What a strategy may ask of the backend during one query round."""

    pool_ids: List[str]
    round_index: int
    rng_seed: int
    mc_passes: int = 10
    region_size: int = 8
    ceal_delta: float = 0.05
    posterior: Optional[Callable[[str], np.ndarray]] = None
    mc_posteriors: Optional[Callable[[str], List[np.ndarray]]] = None
    embedding: Optional[Callable[[str], np.ndarray]] = None
    labeled_embeddings: Optional[Callable[[], List[np.ndarray]]] = None


def _scores_via(ctx: QueryContext, fn: Callable[[str], float]) -> Dict[str, float]:
    return {sid: fn(sid) for sid in ctx.pool_ids}


def _uncertainty_strategy(method: str):
    def run(ctx: QueryContext, n: int) -> CealOutput:
        scores = _scores_via(ctx, lambda sid: score_uncertainty(ctx.posterior(sid), method))
        return CealOutput(rank_pool(scores, n, method, ctx.rng_seed, ctx.round_index))

    return run


def _mcdr(ctx: QueryContext, n: int) -> CealOutput:
    scores = _scores_via(ctx, lambda sid: score_mc_entropy(ctx.mc_posteriors(sid)))
    return CealOutput(rank_pool(scores, n, "MCDR", ctx.rng_seed, ctx.round_index))


def _rmcdr(ctx: QueryContext, n: int) -> CealOutput:
    scores = _scores_via(ctx, lambda sid: score_regional_mc(ctx.mc_posteriors(sid), ctx.region_size))
    return CealOutput(rank_pool(scores, n, "RMCDR", ctx.rng_seed, ctx.round_index))


def _coreset(ctx: QueryContext, n: int) -> CealOutput:
    n = min(n, len(ctx.pool_ids))
    pool = [(sid, ctx.embedding(sid)) for sid in ctx.pool_ids]
    picked = select_coreset(ctx.labeled_embeddings(), pool, n)
    ranked = [(sid, float(len(picked) - i)) for i, sid in enumerate(picked)]
    return CealOutput(QueryResult(ranked, "CORESET", ctx.round_index, ctx.rng_seed))


def _maxrpr(ctx: QueryContext, n: int) -> CealOutput:
    n = min(n, len(ctx.pool_ids))
    cands = []
    embeds = []
    for sid in ctx.pool_ids:
        emb = ctx.embedding(sid)
        cands.append((sid, emb, score_uncertainty(ctx.posterior(sid), "ENT")))
        embeds.append(emb)
    picked = score_representative(cands, embeds, n)
    ranked = [(sid, float(len(picked) - i)) for i, sid in enumerate(picked)]
    return CealOutput(QueryResult(ranked, "MAXRPR", ctx.round_index, ctx.rng_seed))


def _ceal(ctx: QueryContext, n: int) -> CealOutput:
    posteriors = {sid: ctx.posterior(sid) for sid in ctx.pool_ids}
    scores = {sid: score_uncertainty(p, "ENT") for sid, p in posteriors.items()}
    full = rank_pool(scores, len(scores), "CEAL", ctx.rng_seed, ctx.round_index)
    return select_ceal(full, posteriors, min(n, len(full.ranked)), ctx.ceal_delta)


def _random(ctx: QueryContext, n: int) -> CealOutput:
    scores = {sid: 0.0 for sid in ctx.pool_ids}
    return CealOutput(rank_pool(scores, n, "RANDOM", ctx.rng_seed, ctx.round_index))


_REGISTRY: Dict[str, Callable[[QueryContext, int], CealOutput]] = {
    "CONF": _uncertainty_strategy("CONF"),
    "MAR": _uncertainty_strategy("MAR"),
    "ENT": _uncertainty_strategy("ENT"),
    "MCDR": _mcdr,
    "RMCDR": _rmcdr,
    "CORESET": _coreset,
    "MAXRPR": _maxrpr,
    "CEAL": _ceal,
    "RANDOM": _random,
}


def register_strategy(name: str, impl: Callable[[QueryContext, int], CealOutput]) -> None:
    """Plugin hook: make an external scorer or selector available by name."""
    _REGISTRY[name] = impl


def strategy_names() -> set:
    return set(_REGISTRY)


def get_strategy(name: str) -> Callable[[QueryContext, int], CealOutput]:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown strategy {name!r}; registered: {sorted(_REGISTRY)}") from None
