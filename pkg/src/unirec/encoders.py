"""News encoder, ranking user encoder, basis user-embedding memory and the
two scoring functions."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .corpus import DEFAULT_HISTORY_LEN, DEFAULT_TITLE_LEN, PAD_ID, NewsArticle
from .errors import ConfigurationError, DimensionError, InputError
from .numerics import (
    AttentionParams,
    PoolingParams,
    Tensor,
    as_tensor,
    attention_pool,
    dropout,
    layer_norm,
    matmul,
    multi_head_self_attention,
    softmax,
    stack,
    take,
    take_along_last,
    where,
)

RENORM_SOFTMAX = "softmax_alpha"
RENORM_PROPORTIONAL = "proportional"  # alternative rule: alpha_i / sum(alpha_top)


@dataclass
class ModelConfig:
    vocab_size: int
    dim: int = 64
    heads: int = 4
    title_len: int = DEFAULT_TITLE_LEN
    history_len: int = DEFAULT_HISTORY_LEN
    pool_dim: int = 0  # 0 -> same as dim
    position_embeddings: bool = True
    user_residual: bool = False
    layer_norm: bool = False
    dropout: float = 0.0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigurationError("vocabulary must hold at least the reserved ids")
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads:
            raise ConfigurationError(f"dim={self.dim} must be a positive multiple of heads={self.heads}")
        if self.title_len < 1 or self.history_len < 1:
            raise ConfigurationError("title_len and history_len must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must be in [0, 1)")

    @property
    def hidden(self) -> int:
        return self.pool_dim or self.dim

    def to_dict(self) -> dict:
        return asdict(self)


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], dim: int, name: str) -> Tensor:
    bound = 1.0 / math.sqrt(dim)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# Ranking model
# ---------------------------------------------------------------------------


class RankingModel:
    """Word/position tables plus news-tower and user-tower parameters."""

    def __init__(self, config: ModelConfig, params: Mapping[str, Tensor]):
        self.config = config
        self.params: dict[str, Tensor] = dict(params)
        expected = set(self.param_shapes(config))
        if set(self.params) != expected:
            missing = sorted(expected - set(self.params))
            extra = sorted(set(self.params) - expected)
            raise ConfigurationError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        for name, shape in self.param_shapes(config).items():
            if self.params[name].shape != shape:
                raise DimensionError(f"{name}: shape {self.params[name].shape}, expected {shape}")

    @staticmethod
    def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
        d, h = config.dim, config.hidden
        shapes: dict[str, tuple[int, ...]] = {
            "news.word_embeddings": (config.vocab_size, d),
            "news.position_embeddings": (config.title_len, d),
            "user.position_embeddings": (config.history_len, d),
            "user.cold_start": (d,),
        }
        for tower in ("news", "user"):
            for part in ("query", "key", "value", "output"):
                shapes[f"{tower}.attention.{part}"] = (d, d)
            shapes[f"{tower}.pool.proj"] = (d, h)
            shapes[f"{tower}.pool.bias"] = (h,)
            shapes[f"{tower}.pool.query"] = (h,)
        return shapes

    @classmethod
    def initialize(cls, config: ModelConfig, rng: np.random.Generator) -> "RankingModel":
        params = {
            name: _uniform(rng, shape, config.dim, name) for name, shape in cls.param_shapes(config).items()
        }
        return cls(config, params)

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: Mapping[str, np.ndarray]) -> "RankingModel":
        names = cls.param_shapes(config)
        return cls(config, {n: Tensor(arrays[n], requires_grad=True, name=n) for n in names if n in arrays})

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def news_parameters(self) -> list[Tensor]:
        return [t for n, t in self.params.items() if n.startswith("news.")]

    def user_parameters(self) -> list[Tensor]:
        return [t for n, t in self.params.items() if n.startswith("user.")]

    def _attention(self, tower: str) -> AttentionParams:
        p = self.params
        return AttentionParams(
            p[f"{tower}.attention.query"],
            p[f"{tower}.attention.key"],
            p[f"{tower}.attention.value"],
            p[f"{tower}.attention.output"],
        )

    def _pooling(self, tower: str) -> PoolingParams:
        p = self.params
        return PoolingParams(p[f"{tower}.pool.proj"], p[f"{tower}.pool.bias"], p[f"{tower}.pool.query"])

    # -- news tower -----------------------------------------------------------

    def encode_news_batch(self, tokens: np.ndarray, rng: np.random.Generator | None = None) -> Tensor:
        """Title token ids (B, L) -> news embeddings (B, d).

        Trailing columns that are padding in every row are trimmed; a title
        with no real token attends to position 0 only, so trimming is exact.
        """
        cfg = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise DimensionError("tokens must be a (batch, length) array")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
            raise InputError(f"token id outside vocabulary of size {cfg.vocab_size}")
        if tokens.shape[1] > cfg.title_len:
            raise DimensionError(f"title length {tokens.shape[1]} exceeds title_len={cfg.title_len}")
        mask = tokens != PAD_ID
        mask[~mask.any(axis=1), 0] = True
        width = int(np.flatnonzero(mask.any(axis=0)).max()) + 1 if tokens.shape[0] else 1
        tokens, mask = tokens[:, :width], mask[:, :width]

        x = take(self.params["news.word_embeddings"], tokens)
        if cfg.position_embeddings:
            x = x + self.params["news.position_embeddings"][:width]
        x = dropout(x, cfg.dropout, rng)
        h = multi_head_self_attention(x, self._attention("news"), cfg.heads, mask)
        if cfg.layer_norm:
            h = layer_norm(h)
        h = dropout(h, cfg.dropout, rng)
        return attention_pool(h, self._pooling("news"), mask)

    # -- user tower -----------------------------------------------------------

    def encode_users_batch(
        self, history: Tensor, lengths: np.ndarray, rng: np.random.Generator | None = None
    ) -> Tensor:
        """Left-aligned clicked-news embeddings (B, N, d) -> ranking user embeddings (B, d).

        Rows with ``lengths == 0`` receive the learned cold-start vector.
        """
        cfg = self.config
        history = as_tensor(history)
        lengths = np.asarray(lengths, dtype=np.int64)
        if history.ndim != 3 or history.shape[-1] != cfg.dim:
            raise DimensionError(f"history must be (B, N, {cfg.dim}), got {history.shape}")
        n = history.shape[1]
        if n > cfg.history_len:
            raise DimensionError(f"history of {n} exceeds history_len={cfg.history_len}")
        if n == 0:
            cold = self.params["user.cold_start"]
            return cold.reshape(1, cfg.dim) + Tensor._wrap(np.zeros((history.shape[0], cfg.dim)))
        mask = np.arange(n)[None, :] < lengths[:, None]
        empty = lengths == 0
        mask[empty, 0] = True

        x = history
        if cfg.position_embeddings:
            x = x + self.params["user.position_embeddings"][:n]
        h = multi_head_self_attention(x, self._attention("user"), cfg.heads, mask)
        if cfg.user_residual:
            h = h + x
        if cfg.layer_norm:
            h = layer_norm(h)
        h = dropout(h, cfg.dropout, rng)
        u = attention_pool(h, self._pooling("user"), mask)
        if empty.any():
            u = where(empty[:, None], self.params["user.cold_start"], u)
        return u


def history_window(history_idx: Sequence[Sequence[int]], history_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Keep the most recent ``history_len`` clicks; left-align and pad with 0."""
    rows = [list(h)[-history_len:] for h in history_idx]
    lengths = np.array([len(r) for r in rows], dtype=np.int64)
    width = int(lengths.max()) if len(rows) else 0
    idx = np.zeros((len(rows), width), dtype=np.int64)
    for i, r in enumerate(rows):
        idx[i, : len(r)] = r
    return idx, lengths


def encode_news(article: NewsArticle, model: RankingModel) -> Tensor:
    return model.encode_news_batch(np.asarray([article.title_tokens]))[0]


def encode_user_rank(history, model: RankingModel) -> Tensor:
    """Clicked-news embeddings (N, d), oldest first -> u_ra (d,)."""
    d = model.config.dim
    if isinstance(history, Tensor):
        hist = history
    elif len(history) == 0:
        hist = Tensor._wrap(np.zeros((0, d)))
    elif isinstance(history[0], Tensor):
        hist = stack(list(history))
    else:
        hist = as_tensor(np.asarray(history, dtype=np.float64).reshape(len(history), -1))
    hist = hist[-model.config.history_len :]
    return model.encode_users_batch(hist.reshape(1, hist.shape[0], d), np.array([hist.shape[0]]))[0]


def _check_pair(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"score needs two equal-length vectors, got {a.shape} and {b.shape}")


def rank_score(u_ra, r_c) -> Tensor:
    u, r = as_tensor(u_ra), as_tensor(r_c)
    _check_pair(u, r)
    return (u * r).sum()


def recall_score(u_re, r_c) -> Tensor:
    u, r = as_tensor(u_re), as_tensor(r_c)
    _check_pair(u, r)
    return (u * r).sum()


def average_pool_user(history, cold_start=None) -> Tensor:
    """Mean of clicked-news embeddings (YoutubeNet-style recall baseline)."""
    hist = as_tensor(history)
    if hist.shape[0] == 0:
        if cold_start is None:
            raise DimensionError("empty history and no cold-start vector")
        return as_tensor(cold_start)
    return hist.mean(axis=0)


# ---------------------------------------------------------------------------
# Basis memory and recall embedding synthesis
# ---------------------------------------------------------------------------


class BasisMemory:
    """M attention keys and M basis values, stored as separate tensors."""

    def __init__(self, keys: Tensor, values: Tensor):
        keys, values = as_tensor(keys), as_tensor(values)
        if keys.ndim != 2 or keys.shape != values.shape or keys.shape[0] < 1:
            raise DimensionError(f"keys {keys.shape} and values {values.shape} must both be (M, d), M >= 1")
        if keys is values or np.shares_memory(keys.data, values.data):
            raise ConfigurationError("basis keys and values must not alias")
        self.keys = keys
        self.values = values

    @property
    def size(self) -> int:
        return self.keys.shape[0]

    @property
    def dim(self) -> int:
        return self.keys.shape[1]

    @classmethod
    def initialize(cls, M: int, dim: int, rng: np.random.Generator) -> "BasisMemory":
        if M < 1:
            raise ConfigurationError("M must be at least 1")
        keys = _uniform(rng, (M, dim), dim, "memory.keys")
        values = _uniform(rng, (M, dim), dim, "memory.values")
        return cls(keys, values)

    def parameters(self) -> list[Tensor]:
        return [self.keys, self.values]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"memory.keys": self.keys.data.copy(), "memory.values": self.values.data.copy()}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "BasisMemory":
        return cls(
            Tensor(arrays["memory.keys"], requires_grad=True, name="memory.keys"),
            Tensor(arrays["memory.values"], requires_grad=True, name="memory.values"),
        )


@dataclass
class AttentionWeights:
    alpha: np.ndarray
    selected_indices: np.ndarray | None = None


@dataclass
class UserEmbeddings:
    u_ra: np.ndarray
    u_re: np.ndarray
    mode: str = "all"


def basis_attention(u_ra, memory: BasisMemory) -> Tensor:
    """alpha_i = softmax_i(u_ra . w_i); works on (d,) or batched (B, d) queries."""
    u = as_tensor(u_ra)
    if u.shape[-1] != memory.dim:
        raise DimensionError(f"query dimension {u.shape[-1]} != memory dimension {memory.dim}")
    return softmax(matmul(u, memory.keys.T), axis=-1)


def compose_recall_all(alpha, memory: BasisMemory) -> Tensor:
    alpha = as_tensor(alpha)
    if alpha.shape[-1] != memory.size:
        raise DimensionError(f"{alpha.shape[-1]} weights for {memory.size} bases")
    return matmul(alpha, memory.values)


def select_top(alpha: np.ndarray, P: int) -> np.ndarray:
    """Indices of the P largest weights along the last axis, ties to the lower index."""
    alpha = np.asarray(alpha)
    return np.argsort(-alpha, axis=-1, kind="stable")[..., :P]


def compose_recall_top(
    alpha, memory: BasisMemory, P: int, renorm: str = RENORM_SOFTMAX
) -> tuple[Tensor, Tensor, np.ndarray]:
    """Keep the P heaviest bases and re-weight them.

    The default re-weighting is a softmax taken over the attention
    probabilities themselves (exp(alpha_t) / sum exp(alpha_t)), exactly as
    published. Returns ``(u_re, weights, indices)``.
    """
    alpha = as_tensor(alpha)
    M = memory.size
    if alpha.shape[-1] != M:
        raise DimensionError(f"{alpha.shape[-1]} weights for {M} bases")
    if not 1 <= P <= M:
        raise ConfigurationError(f"P={P} must lie in [1, M={M}]")
    idx = select_top(alpha.data, P)
    top = take_along_last(alpha, idx)
    if renorm == RENORM_SOFTMAX:
        weights = softmax(top, axis=-1)
    elif renorm == RENORM_PROPORTIONAL:
        weights = top / top.sum(axis=-1, keepdims=True)
    else:
        raise ConfigurationError(f"unknown renormalisation {renorm!r}")
    chosen = take(memory.values, idx)  # (..., P, d)
    lead = alpha.shape[:-1]
    u_re = matmul(weights.reshape(lead + (1, P)), chosen).reshape(lead + (memory.dim,))
    return u_re, weights, idx


def attention_weights(u_ra, memory: BasisMemory, P: int | None = None) -> AttentionWeights:
    alpha = basis_attention(u_ra, memory).data
    return AttentionWeights(alpha, None if P is None else select_top(alpha, P))


def recall_embedding(u_ra, memory: BasisMemory, mode: str = "all", P: int | None = None,
                     renorm: str = RENORM_SOFTMAX) -> Tensor:
    """u_ra -> u_re using all bases (``mode="all"``) or the top P (``mode="top"``)."""
    alpha = basis_attention(u_ra, memory)
    if mode == "all":
        return compose_recall_all(alpha, memory)
    if mode == "top":
        if P is None:
            raise ConfigurationError("top mode needs P")
        return compose_recall_top(alpha, memory, P, renorm)[0]
    raise ConfigurationError(f"unknown recall mode {mode!r}")
