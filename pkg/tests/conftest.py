from __future__ import annotations

import numpy as np
import pytest

from unirec.corpus import generate_synthetic
from unirec.encoders import ModelConfig, RankingModel
from unirec.training import TrainConfig, TrainingData, train_stage1, train_stage2


def tiny_config(vocab_size: int = 12, **overrides) -> ModelConfig:
    base = dict(vocab_size=vocab_size, dim=4, heads=2, title_len=4, history_len=3)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_model(seed: int = 0, **overrides) -> RankingModel:
    return RankingModel.initialize(tiny_config(**overrides), np.random.default_rng(seed))


@pytest.fixture(scope="session")
def small_synthetic():
    return generate_synthetic(num_topics=3, num_users=120, num_news=250, words_per_topic=20, seed=3,
                              impressions_per_user=12)


@pytest.fixture(scope="session")
def small_run(small_synthetic):
    """A quickly trained stage-1 and stage-2 pair on the small synthetic set."""
    ds = small_synthetic
    data = TrainingData(ds.corpus, ds.train, ds.validation)
    mc = ModelConfig(vocab_size=len(ds.corpus.vocab), dim=8, heads=2, title_len=12, history_len=20)
    tc = TrainConfig(T=40, M=6, P=3, max_epochs=2, learning_rate=3e-3)
    ckpt1 = train_stage1(data, tc, mc)
    ckpt2 = train_stage2(ckpt1, data, tc)
    return data, ckpt1, ckpt2


# ---------------------------------------------------------------------------
# Acceptance summary
# ---------------------------------------------------------------------------

ACCEPTANCE_RESULTS: dict[int, tuple[str, str]] = {}


def record_criterion(number: int, status: str, detail: str) -> None:
    ACCEPTANCE_RESULTS[number] = (status, detail)
    print(f"CRITERION {number}: {status} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        status, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"CRITERION {number:>2}: {status}  {detail}")
