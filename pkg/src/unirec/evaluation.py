"""Ranking metrics, exact inner-product retrieval, recall evaluation and the
recall-embedding timing benchmark."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import statistics
import time
from functools import partial
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .corpus import Corpus, ImpressionLog, clicked_sets
from .encoders import (
    RENORM_SOFTMAX,
    BasisMemory,
    RankingModel,
    basis_attention,
    compose_recall_all,
    compose_recall_top,
    history_window,
)
from .errors import ConfigurationError, InputError
from .numerics import Tensor, no_grad

logger = logging.getLogger(__name__)

RANKING_METRICS = ("auc", "mrr", "ndcg@5", "ndcg@10")
DEFAULT_RECALL_KS = (100, 200, 500, 1000)

# Full-scale reference numbers (1M-user MIND), printed for context only.
REFERENCE_RANKING = {"auc": 0.6841, "mrr": 0.3350, "ndcg@5": 0.3647, "ndcg@10": 0.4226}
REFERENCE_RECALL = {
    "YoutubeNet": {"recall@100": 0.01395, "recall@200": 0.02284, "recall@500": 0.04171, "recall@1000": 0.06867},
    "UniRec(all)": {"recall@100": 0.01443, "recall@200": 0.02402, "recall@500": 0.05022, "recall@1000": 0.08294},
    "UniRec(top)": {"recall@100": 0.01516, "recall@200": 0.02531, "recall@500": 0.05142, "recall@1000": 0.08485},
}


# ---------------------------------------------------------------------------
# Per-impression metrics
# ---------------------------------------------------------------------------


def _rank_order(scores: np.ndarray) -> np.ndarray:
    """Positions sorted by descending score; equal scores keep input order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def auc(scores, labels) -> float | None:
    """Mann-Whitney AUC with ties worth one half; ``None`` for single-class input."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels) > 0
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    # Average ranks (1-based) over tied groups.
    order = np.argsort(s, kind="stable")
    sorted_s = s[order]
    ranks = np.empty(s.size)
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], s.size]
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = (a + b + 1) / 2.0
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def mrr(scores, labels) -> float | None:
    y = np.asarray(labels)[_rank_order(scores)] > 0
    if not y.any():
        return None
    ranks = np.flatnonzero(y) + 1
    return float(np.mean(1.0 / ranks))


def ndcg_at_k(scores, labels, k: int) -> float | None:
    if k < 1:
        raise ConfigurationError("k must be at least 1")
    y = np.asarray(labels, dtype=np.float64)
    if not (y > 0).any():
        return None
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    gains = y[_rank_order(scores)][:k]
    ideal = np.sort(y)[::-1][:k]
    return float((gains * discounts[: gains.size]).sum() / (ideal * discounts[: ideal.size]).sum())


def recall_at_k(retrieved: Iterable, clicked: Iterable) -> float | None:
    clicked = set(clicked)
    if not clicked:
        return None
    return len(clicked & set(retrieved)) / len(clicked)


# ---------------------------------------------------------------------------
# Retrieval
# ---------------------------------------------------------------------------


@dataclass
class RetrievalResult:
    user_id: str
    indices: np.ndarray
    scores: np.ndarray
    ids: list[str] = field(default_factory=list)
    truncated: bool = False


def _topk_from_scores(scores: np.ndarray, k: int, exclude: np.ndarray | None) -> tuple[np.ndarray, bool]:
    eligible = np.ones(scores.size, dtype=bool)
    if exclude is not None and len(exclude):
        eligible[np.asarray(exclude, dtype=np.int64)] = False
    cand = np.flatnonzero(eligible)
    truncated = k > cand.size
    k = min(k, cand.size)
    if k == 0:
        return cand[:0], truncated
    s = scores[cand]
    if k < cand.size:
        # Everything tied with the k-th best value stays in play for the exact tie-break.
        kth = np.partition(s, cand.size - k)[cand.size - k]
        keep = s >= kth
        cand, s = cand[keep], s[keep]
    order = np.lexsort((cand, -s))[:k]
    return cand[order], truncated


def brute_force_topk(
    u_re,
    pool: np.ndarray,
    k: int,
    exclude: Iterable[int] = (),
    ids: Sequence[str] | None = None,
    user_id: str = "",
) -> RetrievalResult:
    """Exact top-k of ``pool @ u_re`` after dropping ``exclude``; ties go to the lower index."""
    u = u_re.data if isinstance(u_re, Tensor) else np.asarray(u_re, dtype=np.float64)
    scores = np.asarray(pool, dtype=np.float64) @ u
    excl = np.fromiter(exclude, dtype=np.int64) if not isinstance(exclude, np.ndarray) else exclude
    idx, truncated = _topk_from_scores(scores, k, excl)
    if truncated:
        logger.warning("k=%d exceeds the %d eligible pool items; returning all of them", k, idx.size)
    return RetrievalResult(
        user_id,
        idx,
        scores[idx],
        [ids[i] for i in idx] if ids is not None else [],
        truncated,
    )


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    """Named metrics, one value per repetition, plus run metadata."""

    label: str
    values: dict[str, list[float]] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def add(self, name: str, value: float) -> None:
        self.values.setdefault(name, []).append(float(value))

    def mean(self, name: str) -> float:
        return float(np.mean(self.values[name]))

    def std(self, name: str) -> float:
        vals = self.values[name]
        return float(statistics.stdev(vals)) if len(vals) > 1 else 0.0

    @classmethod
    def combine(cls, reports: Sequence["MetricsReport"], label: str | None = None) -> "MetricsReport":
        out = cls(label or reports[0].label, metadata=dict(reports[0].metadata))
        out.metadata["repetitions"] = len(reports)
        for r in reports:
            for name, vals in r.values.items():
                out.values.setdefault(name, []).extend(vals)
        return out

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "metrics": {
                name: {"mean": self.mean(name), "std": self.std(name), "repetitions": len(vals)}
                for name, vals in self.values.items()
            },
            "metadata": self.metadata,
        }

    def write_json(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "metric", "mean", "std", "repetitions"])
            for name, vals in self.values.items():
                w.writerow([self.label, name, repr(self.mean(name)), repr(self.std(name)), len(vals)])


# ---------------------------------------------------------------------------
# Model-driven evaluation
# ---------------------------------------------------------------------------


def news_embeddings(model: RankingModel, corpus: Corpus, batch: int = 512) -> np.ndarray:
    tokens = corpus.tokens
    out = np.empty((len(corpus), model.config.dim))
    with no_grad():
        for start in range(0, len(corpus), batch):
            out[start : start + batch] = model.encode_news_batch(tokens[start : start + batch]).data
    return out


def user_embeddings(
    model: RankingModel, news_emb: np.ndarray, histories: Sequence[np.ndarray], batch: int = 256
) -> np.ndarray:
    """u_ra for each history (corpus indices, oldest first)."""
    out = np.empty((len(histories), model.config.dim))
    table = Tensor._wrap(news_emb)
    with no_grad():
        for start in range(0, len(histories), batch):
            idx, lengths = history_window(histories[start : start + batch], model.config.history_len)
            hist = Tensor._wrap(table.data[idx]) if idx.size else Tensor._wrap(np.zeros(idx.shape + (model.config.dim,)))
            out[start : start + batch] = model.encode_users_batch(hist, lengths).data
    return out


def _as_model(model_or_ckpt) -> RankingModel:
    if isinstance(model_or_ckpt, RankingModel):
        return model_or_ckpt
    return model_or_ckpt.model()


def evaluate_ranking(
    model_or_ckpt,
    corpus: Corpus,
    impressions: Sequence[ImpressionLog],
    news_emb: np.ndarray | None = None,
    label: str = "UniRec",
) -> MetricsReport:
    """Per-impression AUC, MRR, nDCG@5 and nDCG@10, averaged over impressions
    where each metric is defined."""
    if not impressions:
        raise InputError("empty evaluation set")
    model = _as_model(model_or_ckpt)
    if news_emb is None:
        news_emb = news_embeddings(model, corpus)
    hists = [corpus.indices(imp.history) for imp in impressions]
    users = user_embeddings(model, news_emb, hists)
    scored = []
    for imp, u in zip(impressions, users):
        idx = corpus.indices(n for n, _ in imp.candidates)
        scored.append((news_emb[idx] @ u, np.array([lab for _, lab in imp.candidates])))
    return ranking_report(scored, label)


def ranking_report(scored: Iterable[tuple[np.ndarray, np.ndarray]], label: str = "UniRec") -> MetricsReport:
    per: dict[str, list[float]] = {m: [] for m in RANKING_METRICS}
    count = 0
    for scores, labels in scored:
        count += 1
        for name, val in (
            ("auc", auc(scores, labels)),
            ("mrr", mrr(scores, labels)),
            ("ndcg@5", ndcg_at_k(scores, labels, 5)),
            ("ndcg@10", ndcg_at_k(scores, labels, 10)),
        ):
            if val is not None:
                per[name].append(val)
    report = MetricsReport(label, metadata={"impressions": count})
    for name, vals in per.items():
        report.add(name, math.fsum(vals) / len(vals) if vals else float("nan"))
        report.metadata[f"{name}_impressions"] = len(vals)
    return report


@dataclass
class RecallUser:
    user_id: str
    history: tuple[str, ...]
    clicked: frozenset[str]
    exclude: frozenset[str]


def recall_users(
    impressions: Sequence[ImpressionLog], prior: Sequence[ImpressionLog] = ()
) -> list[RecallUser]:
    """Group evaluation impressions by user.

    The query history is the one attached to the user's earliest evaluation
    impression; the pool excludes that history and every news the user
    clicked in ``prior`` (training-period) impressions; targets are the
    evaluation-period clicks outside that exclusion set.
    """
    earlier = clicked_sets(prior)
    first: dict[str, ImpressionLog] = {}
    clicks: dict[str, set[str]] = {}
    for imp in impressions:
        cur = first.get(imp.user_id)
        if cur is None or imp.time < cur.time:
            first[imp.user_id] = imp
        clicks.setdefault(imp.user_id, set()).update(imp.clicked)
    out = []
    for uid in sorted(first):
        excl = frozenset(first[uid].history) | frozenset(earlier.get(uid, ()))
        target = frozenset(clicks[uid] - excl)
        if target:
            out.append(RecallUser(uid, first[uid].history, target, excl))
    return out


def evaluate_recall(
    model_or_ckpt,
    memory: BasisMemory | None,
    corpus: Corpus,
    users: Sequence[RecallUser],
    ks: Sequence[int] = DEFAULT_RECALL_KS,
    mode: str = "top",
    P: int = 5,
    renorm: str = RENORM_SOFTMAX,
    news_emb: np.ndarray | None = None,
    seed: int = 0,
) -> MetricsReport:
    """Recall@K over the full pool for each user, averaged over users.

    ``mode`` is ``"top"`` / ``"all"`` (basis memory), ``"average"`` (mean of
    clicked-news embeddings) or ``"random"`` (uniform random ranking of the
    eligible pool, the chance level).
    """
    if not users:
        raise InputError("no users with evaluation-period clicks")
    if isinstance(model_or_ckpt, RankingModel):
        model = model_or_ckpt
    else:
        model = model_or_ckpt.recall_model()
        if memory is None and mode in ("top", "all"):
            memory = model_or_ckpt.basis_memory()
    if news_emb is None:
        news_emb = news_embeddings(model, corpus)
    hists = [corpus.indices(u.history) for u in users]
    queries = _recall_queries(model, memory, news_emb, hists, mode, P, renorm)

    labels = {"top": "UniRec(top)", "all": "UniRec(all)", "average": "YoutubeNet", "random": "Random"}
    report = MetricsReport(labels.get(mode, mode), metadata={"users": len(users), "pool": len(corpus), "mode": mode})
    if mode == "top":
        report.metadata["P"] = P
    kmax = max(ks)
    per = {k: [] for k in ks}
    rng = np.random.default_rng(seed)
    for user, q in zip(users, queries):
        excl = corpus.indices(user.exclude) if user.exclude else np.zeros(0, dtype=np.int64)
        scores = rng.random(len(corpus)) if q is None else news_emb @ q
        top, _ = _topk_from_scores(scores, kmax, excl)
        target = {corpus.index[n] for n in user.clicked}
        for k in ks:
            per[k].append(len(target.intersection(top[:k].tolist())) / len(target))
    for k in ks:
        report.add(f"recall@{k}", math.fsum(per[k]) / len(per[k]))
    return report


def _recall_queries(model, memory, news_emb, hists, mode, P, renorm):
    if mode == "average":
        cold = model.params["user.cold_start"].data
        return np.stack([news_emb[h].mean(axis=0) if len(h) else cold for h in hists])
    if mode == "random":
        return [None] * len(hists)
    if memory is None:
        raise ConfigurationError(f"mode {mode!r} needs a basis memory")
    u_ra = user_embeddings(model, news_emb, hists)
    with no_grad():
        alpha = basis_attention(Tensor._wrap(u_ra), memory)
        if mode == "all":
            return compose_recall_all(alpha, memory).data
        if mode == "top":
            return compose_recall_top(alpha, memory, P, renorm)[0].data
    raise ConfigurationError(f"unknown recall mode {mode!r}")


# ---------------------------------------------------------------------------
# Timing benchmark
# ---------------------------------------------------------------------------

PHASE_USER = "user_encoder"
PHASE_RECALL = "recall_embedding"


@dataclass
class BenchRow:
    phase: str
    N: int
    M: int
    rep: int
    micros: float


def bench_recall_embedding(
    model: RankingModel,
    memory: BasisMemory | None,
    n_values: Sequence[int] = (10, 50, 200),
    m_values: Sequence[int] = (5, 20, 100),
    reps: int = 30,
    warmup: int = 5,
    inner: int = 20,
    seed: int = 0,
) -> list[BenchRow]:
    """Time u_ra encoding against N and the basis-attention step against M.

    Each repetition times ``inner`` back-to-back calls and records the mean
    microseconds per call. ``warmup`` repetitions are run and discarded.
    Memories of sizes other than the trained one are random (timing only).
    When N exceeds the model's history window the behaviour position table
    is extended with random rows so that the full N positions are encoded.
    """
    if reps < 1:
        raise ConfigurationError("reps must be at least 1")
    if reps < 30:
        logger.warning("only %d repetitions; medians are unstable below 30", reps)
    rng = np.random.default_rng(seed)
    d = model.config.dim
    model = _widen_history(model, max(n_values), rng)
    rows: list[BenchRow] = []
    memories = {
        M: memory if memory is not None and memory.size == M else BasisMemory.initialize(M, d, rng)
        for M in m_values
    }
    cells = []
    with no_grad():
        for N in n_values:
            hist = Tensor._wrap(rng.normal(size=(1, N, d)))
            lengths = np.array([N])
            u_ra = model.encode_users_batch(hist, lengths)
            for M in m_values:
                mem = memories[M]
                cells.append((PHASE_USER, N, M, partial(model.encode_users_batch, hist, lengths)))
                cells.append((PHASE_RECALL, N, M, partial(_recall_step, u_ra, mem)))
        # Cells are interleaved within each repetition so slow drift in
        # machine speed affects every configuration alike.
        for rep in range(-warmup, reps):
            for phase, N, M, fn in cells:
                t0 = time.perf_counter_ns()
                for _ in range(inner):
                    fn()
                micros = (time.perf_counter_ns() - t0) / inner / 1000.0
                if rep >= 0:
                    rows.append(BenchRow(phase, N, M, rep, micros))
    rows.sort(key=lambda r: (r.phase, r.N, r.M, r.rep))
    return rows


def _recall_step(u_ra: Tensor, memory: BasisMemory) -> Tensor:
    return compose_recall_all(basis_attention(u_ra, memory), memory)


def _widen_history(model: RankingModel, n: int, rng: np.random.Generator) -> RankingModel:
    cfg = model.config
    if n <= cfg.history_len:
        return model
    params = dict(model.params)
    pos = params["user.position_embeddings"].data
    extra = rng.uniform(-1, 1, size=(n - pos.shape[0], cfg.dim)) / math.sqrt(cfg.dim)
    params["user.position_embeddings"] = Tensor(np.concatenate([pos, extra]), name="user.position_embeddings")
    return RankingModel(replace(cfg, history_len=n), params)


def bench_medians(rows: Sequence[BenchRow]) -> dict[tuple[str, int, int], float]:
    groups: dict[tuple[str, int, int], list[float]] = {}
    for r in rows:
        groups.setdefault((r.phase, r.N, r.M), []).append(r.micros)
    return {k: float(np.median(v)) for k, v in groups.items()}


def write_bench_csv(rows: Sequence[BenchRow], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["phase", "N", "M", "rep", "micros"])
        for r in rows:
            w.writerow([r.phase, r.N, r.M, r.rep, f"{r.micros:.3f}"])
