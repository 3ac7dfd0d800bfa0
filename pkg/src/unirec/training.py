"""Two-stage training: ranking towers first, then the basis memory with the
towers frozen."""

from __future__ import annotations

import hashlib
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import evaluation
from .corpus import Corpus, ImpressionLog, clicked_sets, sample_ranking_batch, sample_recall_indices
from .encoders import BasisMemory, ModelConfig, RankingModel, basis_attention, history_window
from .errors import CompatibilityError, ConfigurationError, NumericError
from .numerics import AdamState, Tensor, adam_step, as_tensor, concat, logsumexp, matmul, no_grad, take
from .numerics.serialize import canonical_json, read_container, write_container

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "unirec-checkpoint/1"


@dataclass
class TrainConfig:
    K: int = 4
    T: int = 200
    M: int = 20
    P: int = 5
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 10
    patience: int = 2
    seed: int = 0
    stage2_learning_rate: float = 0.0  # 0 -> learning_rate
    stage2_max_epochs: int = 0  # 0 -> max_epochs
    freeze_user_encoder: bool = True
    val_recall_k: int = 0  # 0 -> 1% of the news pool

    def __post_init__(self):
        if self.K < 1 or self.T < 1:
            raise ConfigurationError("K and T must be at least 1")
        if not 1 <= self.P <= self.M:
            raise ConfigurationError(f"need 1 <= P <= M, got P={self.P}, M={self.M}")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ConfigurationError("batch_size >= 1, max_epochs >= 0, patience >= 1 required")
        if self.learning_rate < 0 or self.stage2_learning_rate < 0:
            raise ConfigurationError("learning rates must be non-negative")

    @property
    def recall_lr(self) -> float:
        return self.stage2_learning_rate or self.learning_rate

    @property
    def recall_epochs(self) -> int:
        return self.stage2_max_epochs or self.max_epochs


@dataclass
class TrainingData:
    corpus: Corpus
    train: list[ImpressionLog]
    validation: list[ImpressionLog] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def contrastive_loss(scores) -> Tensor:
    """Softmax cross-entropy with the positive in column 0; mean over leading axes."""
    scores = as_tensor(scores)
    if not np.isfinite(scores.data).all():
        raise NumericError("non-finite scores")
    per_row = logsumexp(scores, axis=-1) - scores[..., 0]
    return per_row.mean() if per_row.ndim else per_row


def _stack_scores(positive_score, negative_scores) -> Tensor:
    pos = as_tensor(positive_score).reshape(1)
    negs = as_tensor(negative_scores).reshape(-1)
    if negs.shape[0] < 1:
        raise ConfigurationError("need at least one negative score")
    return concat([pos, negs])


def ranking_loss(positive_score, negative_scores) -> Tensor:
    """-log(exp(y+) / (exp(y+) + sum_i exp(y_i-))) over K in-impression negatives."""
    return contrastive_loss(_stack_scores(positive_score, negative_scores))


def recall_loss(positive_score, negative_scores) -> Tensor:
    """Same contrastive form as :func:`ranking_loss`, over T corpus-wide negatives."""
    return contrastive_loss(_stack_scores(positive_score, negative_scores))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    stage: int
    model_config: ModelConfig
    train_config: TrainConfig
    params: dict[str, np.ndarray]
    memory: dict[str, np.ndarray] | None = None
    recall_user: dict[str, np.ndarray] | None = None  # stage-2 user tower when not frozen
    history: list[dict] = field(default_factory=list)

    @property
    def config_hash(self) -> str:
        blob = canonical_json({"model": self.model_config.to_dict(), "train": asdict(self.train_config)})
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def model(self) -> RankingModel:
        return RankingModel.from_arrays(self.model_config, self.params)

    def recall_model(self) -> RankingModel:
        """Model whose user tower produces the query for the basis memory."""
        if not self.recall_user:
            return self.model()
        merged = dict(self.params)
        merged.update({k.removeprefix("recall."): v for k, v in self.recall_user.items()})
        return RankingModel.from_arrays(self.model_config, merged)

    def basis_memory(self) -> BasisMemory:
        if self.memory is None:
            raise ConfigurationError("checkpoint has no basis memory (stage 1)")
        return BasisMemory.from_arrays(self.memory)

    def tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.params)
        out.update(self.memory or {})
        out.update(self.recall_user or {})
        return out

    def same_as(self, other: "Checkpoint") -> bool:
        """Bitwise equality of every tensor plus identical metadata."""
        mine, theirs = self.tensors(), other.tensors()
        if self.stage != other.stage or self.config_hash != other.config_hash or mine.keys() != theirs.keys():
            return False
        if canonical_json(self.history) != canonical_json(other.history):
            return False
        return all(mine[k].shape == theirs[k].shape and mine[k].tobytes() == theirs[k].tobytes() for k in mine)


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    header = {
        "format": CHECKPOINT_FORMAT,
        "stage": ckpt.stage,
        "config_hash": ckpt.config_hash,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": asdict(ckpt.train_config),
        "history": ckpt.history,
    }
    write_container(path, ckpt.tensors(), header)


def load_checkpoint(
    path: str | os.PathLike, expected_hash: str | None = None, min_stage: int = 1
) -> Checkpoint:
    header, tensors = read_container(path)
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CompatibilityError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
    try:
        model_config = ModelConfig(**header["model_config"])
        train_config = TrainConfig(**header["train_config"])
    except (TypeError, KeyError, ConfigurationError) as exc:
        raise CompatibilityError(f"{path}: config snapshot does not match this version") from exc
    ckpt = Checkpoint(
        stage=int(header["stage"]),
        model_config=model_config,
        train_config=train_config,
        params={k: v for k, v in tensors.items() if k.startswith(("news.", "user."))},
        memory={k: v for k, v in tensors.items() if k.startswith("memory.")} or None,
        recall_user={k: v for k, v in tensors.items() if k.startswith("recall.")} or None,
        history=header.get("history", []),
    )
    if ckpt.config_hash != header.get("config_hash"):
        raise CompatibilityError(f"{path}: stored config hash does not match its config snapshot")
    if expected_hash is not None and ckpt.config_hash != expected_hash:
        raise CompatibilityError(f"{path}: config hash {ckpt.config_hash[:12]} != expected {expected_hash[:12]}")
    if ckpt.stage < min_stage:
        raise CompatibilityError(f"{path}: stage {ckpt.stage} checkpoint, need stage >= {min_stage}")
    if set(ckpt.params) != set(RankingModel.param_shapes(model_config)):
        raise CompatibilityError(f"{path}: ranking parameters incomplete")
    if ckpt.stage == 2 and ckpt.memory is None:
        raise CompatibilityError(f"{path}: stage-2 checkpoint without basis memory")
    return ckpt


# ---------------------------------------------------------------------------
# Stage 1: ranking towers
# ---------------------------------------------------------------------------

EpochLog = Callable[[str], None]


def _streams(seed: int, stage: int, count: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence([seed, stage]).spawn(count)]


def ranking_batch_loss(
    model: RankingModel,
    corpus: Corpus,
    histories: Sequence[np.ndarray],
    candidates: np.ndarray,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Mean ranking loss; ``candidates`` is (B, 1+K) corpus indices, positive first."""
    hist_idx, lengths = history_window(histories, model.config.history_len)
    valid = np.arange(hist_idx.shape[1])[None, :] < lengths[:, None]
    needed = np.unique(np.concatenate([hist_idx[valid], candidates.ravel()]))
    news = model.encode_news_batch(corpus.tokens[needed], rng)
    local_hist = np.where(valid, np.searchsorted(needed, hist_idx), 0)
    user = model.encode_users_batch(take(news, local_hist), lengths, rng)
    cands = take(news, np.searchsorted(needed, candidates))
    b, c = candidates.shape
    scores = matmul(cands, user.reshape(b, model.config.dim, 1)).reshape(b, c)
    return contrastive_loss(scores)


def _history_cache(corpus: Corpus, impressions: Sequence[ImpressionLog]) -> dict[tuple[str, ...], np.ndarray]:
    cache: dict[tuple[str, ...], np.ndarray] = {}
    for imp in impressions:
        if imp.history not in cache:
            cache[imp.history] = corpus.indices(imp.history)
    return cache


def train_stage1(
    data: TrainingData,
    config: TrainConfig,
    model_config: ModelConfig,
    log: EpochLog | None = None,
) -> Checkpoint:
    """Fit news and user towers on the in-impression contrastive loss.

    Early-stops on validation AUC and returns the best-validation parameters.
    """
    if not any(imp.clicked and imp.skipped for imp in data.train):
        raise ConfigurationError("no impression has both a click and a non-click")
    init_rng, sample_rng, shuffle_rng, dropout_rng = _streams(config.seed, 1, 4)
    model = RankingModel.initialize(model_config, init_rng)
    params = list(model.params.values())
    state = AdamState(lr=config.learning_rate)
    corpus = data.corpus
    hist_cache = _history_cache(corpus, data.train)
    drop = dropout_rng if model_config.dropout > 0 else None

    best_arrays = model.arrays()
    best_auc = -math.inf
    bad_epochs = 0
    history: list[dict] = []
    for epoch in range(1, config.max_epochs + 1):
        samples = sample_ranking_batch(data.train, config.K, sample_rng)
        order = shuffle_rng.permutation(len(samples))
        total = 0.0
        for start in range(0, len(samples), config.batch_size):
            batch = [samples[i] for i in order[start : start + config.batch_size]]
            hists = [hist_cache[s.history] for s in batch]
            cands = np.array([[corpus.index[s.positive], *(corpus.index[n] for n in s.negatives)] for s in batch])
            loss = ranking_batch_loss(model, corpus, hists, cands, drop)
            for p in params:
                p.grad = None
            loss.backward()
            adam_step(params, [p.grad for p in params], state)
            total += loss.item() * len(batch)
        record = {"stage": 1, "epoch": epoch, "loss": total / len(samples)}
        if data.validation:
            report = evaluation.evaluate_ranking(model, corpus, data.validation)
            record["val_auc"] = report.mean("auc")
        history.append(record)
        if log is not None:
            log(_format_record(record))

        score = record.get("val_auc", -record["loss"])
        if score > best_auc:
            best_auc = score
            best_arrays = model.arrays()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break
    return Checkpoint(1, model_config, config, best_arrays, history=history)


def _format_record(record: dict) -> str:
    parts = []
    for k, v in record.items():
        parts.append(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}")
    return " ".join(parts)


# ---------------------------------------------------------------------------
# Stage 2: basis memory
# ---------------------------------------------------------------------------


def _user_tower_copy(model: RankingModel) -> RankingModel:
    params = dict(model.params)
    for name in list(params):
        if name.startswith("user."):
            params[name] = Tensor(params[name].data.copy(), requires_grad=True, name=name)
        else:
            params[name] = Tensor(params[name].data, requires_grad=False, name=name)
    return RankingModel(model.config, params)


def train_stage2(
    stage1: Checkpoint,
    data: TrainingData,
    config: TrainConfig,
    log: EpochLog | None = None,
) -> Checkpoint:
    """Fit the basis memory on the corpus-wide contrastive recall loss.

    The news tower is frozen; so is the user tower unless
    ``config.freeze_user_encoder`` is false, in which case a separate copy
    of it is tuned and stored next to the untouched stage-1 parameters.
    Training composes with all M bases; early stopping uses validation
    Recall@K.
    """
    if stage1.memory is not None:
        existing = stage1.memory["memory.keys"].shape[0]
        if existing != config.M:
            raise ConfigurationError(f"config M={config.M} differs from the checkpoint memory M={existing}")
    corpus = data.corpus
    model = stage1.model()
    dim = model.config.dim
    init_rng, sample_rng, shuffle_rng = _streams(config.seed, 2, 3)
    memory = BasisMemory.initialize(config.M, dim, init_rng)

    with no_grad():
        news_emb = evaluation.news_embeddings(model, corpus)
    clicked = clicked_sets(data.train)
    hist_cache = _history_cache(corpus, data.train)
    train_hists = [hist_cache[imp.history] for imp in data.train]

    tuned = None
    if config.freeze_user_encoder:
        with no_grad():
            user_emb = evaluation.user_embeddings(model, news_emb, train_hists)
        trainable = memory.parameters()
    else:
        tuned = _user_tower_copy(model)
        trainable = memory.parameters() + tuned.user_parameters()
    state = AdamState(lr=config.recall_lr)
    news_const = Tensor._wrap(news_emb)

    k_val = config.val_recall_k or max(1, len(corpus) // 100)
    val_users = evaluation.recall_users(data.validation, prior=data.train) if data.validation else []

    best = (memory.arrays(), tuned.arrays() if tuned else None)
    best_score = -math.inf
    bad_epochs = 0
    history: list[dict] = []
    for epoch in range(1, config.recall_epochs + 1):
        rows, pos, negs = sample_recall_indices(data.train, corpus, config.T, sample_rng, clicked)
        cand_all = np.concatenate([pos[:, None], negs], axis=1)
        order = shuffle_rng.permutation(len(rows))
        total = 0.0
        for start in range(0, len(rows), config.batch_size):
            sel = order[start : start + config.batch_size]
            if tuned is None:
                query = Tensor._wrap(user_emb[rows[sel]])
            else:
                hist_idx, lengths = history_window([train_hists[r] for r in rows[sel]], model.config.history_len)
                query = tuned.encode_users_batch(take(news_const, hist_idx), lengths)
            alpha = basis_attention(query, memory)
            u_re = matmul(alpha, memory.values)
            cands = Tensor._wrap(news_emb[cand_all[sel]])
            scores = matmul(cands, u_re.reshape(len(sel), dim, 1)).reshape(len(sel), cand_all.shape[1])
            loss = contrastive_loss(scores)
            for p in trainable:
                p.grad = None
            loss.backward()
            adam_step(trainable, [p.grad for p in trainable], state)
            total += loss.item() * len(sel)
        record = {"stage": 2, "epoch": epoch, "loss": total / max(len(rows), 1)}
        if val_users:
            rep = evaluation.evaluate_recall(
                tuned or model, memory, corpus, val_users, ks=(k_val,), mode="all", news_emb=news_emb
            )
            record[f"val_recall@{k_val}"] = rep.mean(f"recall@{k_val}")
        history.append(record)
        if log is not None:
            log(_format_record(record))

        score = record.get(f"val_recall@{k_val}", -record["loss"])
        if score > best_score:
            best_score = score
            best = (memory.arrays(), tuned.arrays() if tuned else None)
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break

    recall_user = None
    if best[1] is not None:
        recall_user = {f"recall.{k}": v for k, v in best[1].items() if k.startswith("user.")}
    return Checkpoint(
        2,
        stage1.model_config,
        config,
        {k: v.copy() for k, v in stage1.params.items()},
        memory=best[0],
        recall_user=recall_user,
        history=list(stage1.history) + history,
    )

