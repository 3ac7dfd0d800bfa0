from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import unirec.training as training
from unirec.encoders import BasisMemory, ModelConfig, RankingModel
from unirec.errors import CompatibilityError, ConfigurationError, NumericError
from unirec.evaluation import evaluate_ranking
from unirec.training import (
    TrainConfig,
    TrainingData,
    load_checkpoint,
    ranking_loss,
    recall_loss,
    save_checkpoint,
    train_stage1,
    train_stage2,
)

scores = st.floats(-30, 30, allow_nan=False)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def test_loss_examples():
    assert abs(ranking_loss(0.0, np.zeros(4)).item() - math.log(5)) <= 1e-9
    assert abs(ranking_loss(1.0, [0.0]).item() - math.log1p(math.exp(-1))) <= 1e-12
    assert abs(ranking_loss(1.0, [0.0]).item() - 0.3133) <= 1e-4
    assert ranking_loss(800.0, [0.0, 0.0]).item() < 1e-300
    assert abs(recall_loss(0.3, np.full(200, 0.3)).item() - math.log(201)) <= 1e-9
    assert abs(recall_loss(2.0, [0.0, 0.0]).item() - math.log1p(2 * math.exp(-2))) <= 1e-12
    assert abs(recall_loss(2.0, [0.0, 0.0]).item() - 0.2395) <= 1e-4


@given(scores, scores)
def test_recall_loss_with_one_negative_is_ranking_loss(p, n):
    assert recall_loss(p, [n]).item() == ranking_loss(p, [n]).item()


@given(st.lists(scores, min_size=1, max_size=8), scores)
def test_ranking_loss_nonnegative_and_uniform_value(negs, c):
    assert ranking_loss(negs[0], negs[1:] or [negs[0]]).item() >= 0
    K = len(negs)
    assert abs(ranking_loss(c, np.full(K, c)).item() - math.log(K + 1)) <= 1e-9


@given(st.lists(scores, min_size=1, max_size=6), scores, st.floats(1e-3, 5))
def test_ranking_loss_decreases_in_positive_score(negs, p, step):
    assert ranking_loss(p + step, negs).item() < ranking_loss(p, negs).item() or \
        ranking_loss(p, negs).item() < 1e-12


def test_loss_rejects_non_finite():
    with pytest.raises(NumericError):
        ranking_loss(float("nan"), [0.0])
    with pytest.raises(NumericError):
        recall_loss(0.0, [float("inf")])
    with pytest.raises(ConfigurationError):
        ranking_loss(0.0, [])


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(M=4, P=5)
    with pytest.raises(ConfigurationError):
        TrainConfig(K=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(learning_rate=-1.0)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, small_run):
    _, ckpt1, ckpt2 = small_run
    for ckpt in (ckpt1, ckpt2):
        path = tmp_path / f"s{ckpt.stage}.ckpt"
        save_checkpoint(ckpt, path)
        assert load_checkpoint(path).same_as(ckpt)


def test_truncated_checkpoint_rejected(tmp_path, small_run):
    path = tmp_path / "c.ckpt"
    save_checkpoint(small_run[2], path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CompatibilityError):
        load_checkpoint(path)


def test_checkpoint_hash_and_stage_checks(tmp_path, small_run):
    _, ckpt1, ckpt2 = small_run
    path = tmp_path / "c.ckpt"
    save_checkpoint(ckpt1, path)
    with pytest.raises(CompatibilityError):
        load_checkpoint(path, expected_hash="0" * 64)
    with pytest.raises(CompatibilityError):
        load_checkpoint(path, min_stage=2)
    assert load_checkpoint(path, expected_hash=ckpt1.config_hash).stage == 1


def test_stage2_checkpoint_serves_ranking(tmp_path, small_run):
    data, ckpt1, ckpt2 = small_run
    path = tmp_path / "c.ckpt"
    save_checkpoint(ckpt2, path)
    loaded = load_checkpoint(path)
    a = evaluate_ranking(loaded, data.corpus, data.validation)
    b = evaluate_ranking(ckpt1, data.corpus, data.validation)
    assert a.values == b.values


# ---------------------------------------------------------------------------
# Stage 1
# ---------------------------------------------------------------------------


def _small_configs(data, **train):
    mc = ModelConfig(vocab_size=len(data.corpus.vocab), dim=8, heads=2, title_len=12, history_len=20)
    base = dict(T=40, M=6, P=3, max_epochs=2, learning_rate=3e-3)
    base.update(train)
    return mc, TrainConfig(**base)


def test_zero_epochs_returns_initialization(small_run):
    data = small_run[0]
    mc, tc = _small_configs(data, max_epochs=0)
    ckpt = train_stage1(data, tc, mc)
    init = RankingModel.initialize(mc, training._streams(tc.seed, 1, 4)[0]).arrays()
    assert all(ckpt.params[k].tobytes() == init[k].tobytes() for k in init)


def test_stage1_deterministic(small_run):
    data, ckpt1, _ = small_run
    mc, tc = _small_configs(data)
    assert train_stage1(data, tc, mc).same_as(ckpt1)


def test_stage1_needs_usable_impressions(small_run):
    data = small_run[0]
    only_clicks = [imp for imp in data.train if not imp.skipped][:5]
    mc, tc = _small_configs(data)
    with pytest.raises(ConfigurationError):
        train_stage1(TrainingData(data.corpus, only_clicks), tc, mc)


def test_stage1_loss_moving_average_non_increasing(small_synthetic):
    ds = small_synthetic
    data = TrainingData(ds.corpus, ds.train)
    mc, tc = _small_configs(data, max_epochs=6, patience=6)
    ckpt = train_stage1(data, tc, mc)
    losses = [r["loss"] for r in ckpt.history]
    assert len(losses) == 6
    avg = np.convolve(losses, np.ones(3) / 3, mode="valid")
    assert all(b <= a for a, b in zip(avg, avg[1:])), losses


def test_stage1_history_records_validation_auc(small_run):
    records = [r for r in small_run[1].history if r["stage"] == 1]
    assert records and all(0.0 <= r["val_auc"] <= 1.0 for r in records)


# ---------------------------------------------------------------------------
# Stage 2
# ---------------------------------------------------------------------------


def test_stage2_leaves_stage1_parameters_bitwise(small_run):
    _, ckpt1, ckpt2 = small_run
    assert ckpt2.params.keys() == ckpt1.params.keys()
    assert all(ckpt2.params[k].tobytes() == ckpt1.params[k].tobytes() for k in ckpt1.params)
    assert ckpt2.recall_user is None


def test_encoders_constant_at_every_stage2_step(small_run, monkeypatch):
    data, ckpt1, _ = small_run
    snapshot = {k: v.tobytes() for k, v in ckpt1.params.items()}
    steps = []
    real_step = training.adam_step

    def checked(params, grads, state):
        real_step(params, grads, state)
        steps.append(all(ckpt1.params[k].tobytes() == b for k, b in snapshot.items()))

    monkeypatch.setattr(training, "adam_step", checked)
    _, tc = _small_configs(data, max_epochs=1)
    train_stage2(ckpt1, data, tc)
    assert steps and all(steps)


def test_stage2_zero_learning_rate_keeps_memory(small_run):
    data, ckpt1, _ = small_run
    mc, tc = _small_configs(data, learning_rate=0.0, max_epochs=1)
    ckpt = train_stage2(ckpt1, data, tc)
    init = BasisMemory.initialize(tc.M, mc.dim, training._streams(tc.seed, 2, 3)[0]).arrays()
    assert all(ckpt.memory[k].tobytes() == init[k].tobytes() for k in init)


def test_stage2_memory_size_mismatch(small_run):
    data, _, ckpt2 = small_run
    _, tc = _small_configs(data, M=8)
    with pytest.raises(ConfigurationError):
        train_stage2(ckpt2, data, tc)


def test_stage2_deterministic(small_run):
    data, ckpt1, ckpt2 = small_run
    _, tc = _small_configs(data)
    assert train_stage2(ckpt1, data, tc).same_as(ckpt2)


def test_unfrozen_user_tower_is_stored_separately(small_run):
    data, ckpt1, _ = small_run
    _, tc = _small_configs(data, max_epochs=1, freeze_user_encoder=False)
    ckpt = train_stage2(ckpt1, data, tc)
    assert all(ckpt.params[k].tobytes() == ckpt1.params[k].tobytes() for k in ckpt1.params)
    assert ckpt.recall_user and all(k.startswith("recall.user.") for k in ckpt.recall_user)
    tuned = ckpt.recall_model().arrays()
    assert any(tuned[k].tobytes() != ckpt1.params[k].tobytes() for k in ckpt1.params if k.startswith("user."))
    assert all(tuned[k].tobytes() == ckpt1.params[k].tobytes() for k in ckpt1.params if k.startswith("news."))
