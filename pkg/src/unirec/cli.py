"""Command-line entry point: prepare, train, eval, sweep, bench, synth.

Every command works inside a run directory::

    <run>/config.txt        exact key=value config of the run
    <run>/vocab.txt         vocabulary (one word per line, reserved ids omitted)
    <run>/cache/news.npz    tokenized titles
    <run>/data/             generated TSVs (synthetic datasets only)
    <run>/checkpoints/      stage1.ckpt, stage2.ckpt, sweep checkpoints
    <run>/reports/          JSON + CSV metric reports, sweep and bench CSVs
    <run>/logs/             one metrics line per epoch; wall times

A run directory whose config differs from the requested one is refused
unless ``--force`` is given.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import evaluation
from .corpus import (
    Corpus,
    ImpressionLog,
    NewsArticle,
    Vocab,
    generate_synthetic,
    parse_behaviors_tsv,
    parse_news_tsv,
    split_validation,
    split_words,
)
from .encoders import RENORM_SOFTMAX, RENORM_PROPORTIONAL, ModelConfig
from .errors import IO_EXIT_CODE, ConfigurationError, UniRecError, UsageError
from .training import (
    Checkpoint,
    TrainConfig,
    TrainingData,
    load_checkpoint,
    save_checkpoint,
    train_stage1,
    train_stage2,
)

logger = logging.getLogger("unirec")

DATA_ROOT_ENV = "UNIREC_DATA_ROOT"
BENCH_FAILED_EXIT_CODE = 8


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    # dataset
    dataset: str = "synthetic"  # synthetic | mind | tsv
    data_dir: str = ""
    num_topics: int = 5
    num_users: int = 2000
    num_news: int = 3000
    words_per_topic: int = 60
    impressions_per_user: int = 30
    popularity_scale: float = 4.0
    min_count: int = 1
    validation_fraction: float = 0.1
    validation_by: str = "time"
    # model
    dim: int = 64
    heads: int = 4
    title_len: int = 30
    history_len: int = 50
    position_embeddings: bool = True
    user_residual: bool = False
    layer_norm: bool = False
    dropout: float = 0.0
    # training
    K: int = 4
    T: int = 200
    M: int = 20
    P: int = 5
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 10
    patience: int = 2
    stage2_learning_rate: float = 0.0
    stage2_max_epochs: int = 0
    freeze_user_encoder: bool = True
    val_recall_k: int = 0
    # evaluation
    recall_ks: tuple[int, ...] = (100, 200, 500, 1000)
    renorm: str = RENORM_SOFTMAX
    # run
    out_dir: str = "runs/default"
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.dataset not in ("synthetic", "mind", "tsv"):
            raise ConfigurationError(f"dataset must be synthetic, mind or tsv, not {self.dataset!r}")
        if self.renorm not in (RENORM_SOFTMAX, RENORM_PROPORTIONAL):
            raise ConfigurationError(f"renorm must be {RENORM_SOFTMAX} or {RENORM_PROPORTIONAL}")
        if self.workers < 1:
            raise ConfigurationError("workers must be at least 1")
        if not self.recall_ks or min(self.recall_ks) < 1:
            raise ConfigurationError("recall_ks must be positive integers")

    # -- conversions ----------------------------------------------------------

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def model_config(self, vocab_size: int) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)} - {"vocab_size"}
        return ModelConfig(vocab_size=vocab_size, **{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def dataset_id(self) -> str:
        if self.dataset == "synthetic":
            return (
                f"synthetic(topics={self.num_topics},users={self.num_users},news={self.num_news},"
                f"words={self.words_per_topic},seed={self.seed})"
            )
        return f"{self.dataset}:{Path(self.data_dir).name}"

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind.startswith("tuple"):
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {key}: {raw!r}") from exc
    return raw


def parse_assignments(lines: Sequence[str], source: str = "config") -> dict:
    """``key=value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigurationError(f"{source}:{n}: expected key=value, got {line!r}")
        if key not in _FIELD_TYPES:
            raise ConfigurationError(f"{source}:{n}: unknown config key {key!r}")
        out[key] = _convert(key, value)
    return out


def load_run_config(path: str | None, overrides: Sequence[str] = (), out_dir: str | None = None) -> RunConfig:
    values: dict = {}
    if path:
        values.update(parse_assignments(Path(path).read_text(encoding="utf-8").splitlines(), path))
    values.update(parse_assignments(overrides, "--set"))
    if out_dir:
        values["out_dir"] = out_dir
    return RunConfig(**values)


# ---------------------------------------------------------------------------
# Run directory
# ---------------------------------------------------------------------------


class RunDir:
    def __init__(self, config: RunConfig):
        self.config = config
        self.root = Path(config.out_dir)

    def __truediv__(self, name: str) -> Path:
        return self.root / name

    def claim(self, force: bool) -> None:
        """Create the run directory or verify it belongs to this config."""
        cfg_path = self / "config.txt"
        text = self.config.to_text()
        if cfg_path.exists():
            if cfg_path.read_text(encoding="utf-8") == text:
                return
            if not force:
                raise ConfigurationError(
                    f"{self.root} was created with a different config; pass --force to overwrite it"
                )
            shutil.rmtree(self.root)
        elif self.root.exists() and any(self.root.iterdir()) and not force:
            raise ConfigurationError(f"{self.root} exists and is not a run directory; pass --force")
        for sub in ("cache", "checkpoints", "reports", "logs"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        cfg_path.write_text(text, encoding="utf-8")

    @property
    def stage1(self) -> Path:
        return self / "checkpoints/stage1.ckpt"

    @property
    def stage2(self) -> Path:
        return self / "checkpoints/stage2.ckpt"

    def log_wall_time(self, command: str, seconds: float) -> None:
        with open(self / "logs/wall_time.log", "a", encoding="utf-8") as fh:
            fh.write(f"{command} {seconds:.3f}\n")


# ---------------------------------------------------------------------------
# Dataset loading
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    corpus: Corpus
    train: list[ImpressionLog]
    validation: list[ImpressionLog]
    test: list[ImpressionLog]
    title_words: float = 0.0
    notes: list[str] = field(default_factory=list)


def _data_dir(config: RunConfig) -> Path:
    d = Path(config.data_dir or ".")
    if not d.is_absolute() and os.environ.get(DATA_ROOT_ENV):
        d = Path(os.environ[DATA_ROOT_ENV]) / d
    return d


def _require(path: Path) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"missing input file: {path}")
    return path


def _source_files(config: RunConfig, run: RunDir) -> tuple[list[Path], dict[str, Path | None]]:
    """News files and behaviour files (train / valid / test) for the dataset."""
    if config.dataset == "synthetic":
        d = run / "data"
        return [d / "news.tsv"], {
            "train": d / "behaviors_train.tsv",
            "valid": d / "behaviors_valid.tsv",
            "test": d / "behaviors_test.tsv",
        }
    d = _data_dir(config)
    if config.dataset == "mind":
        train_dir = next((d / n for n in ("MINDsmall_train", "train") if (d / n).is_dir()), d / "train")
        dev_dir = next((d / n for n in ("MINDsmall_dev", "dev", "valid") if (d / n).is_dir()), d / "dev")
        return [_require(train_dir / "news.tsv"), _require(dev_dir / "news.tsv")], {
            "train": _require(train_dir / "behaviors.tsv"),
            "valid": None,
            "test": _require(dev_dir / "behaviors.tsv"),
        }
    valid = d / "behaviors_valid.tsv"
    return [_require(d / "news.tsv")], {
        "train": _require(d / "behaviors_train.tsv"),
        "valid": valid if valid.is_file() else None,
        "test": _require(d / "behaviors_test.tsv"),
    }


def _split_behaviours(config: RunConfig, corpus: Corpus, files: dict[str, Path | None]) -> tuple[list, list, list]:
    train = parse_behaviors_tsv(files["train"], corpus).impressions
    if files["valid"] is not None:
        valid = parse_behaviors_tsv(files["valid"], corpus).impressions
    else:
        train, valid = split_validation(train, config.validation_fraction, config.validation_by, config.seed)
    test = parse_behaviors_tsv(files["test"], corpus).impressions
    return train, valid, test


def prepare_dataset(config: RunConfig, run: RunDir) -> Dataset:
    """Parse or generate the data and write the vocabulary and token cache."""
    if config.dataset == "synthetic":
        synth = generate_synthetic(
            num_topics=config.num_topics,
            num_users=config.num_users,
            num_news=config.num_news,
            words_per_topic=config.words_per_topic,
            seed=config.seed,
            impressions_per_user=config.impressions_per_user,
            popularity_scale=config.popularity_scale,
            title_len=config.title_len,
        )
        synth.write(run / "data")
    news_files, behaviour_files = _source_files(config, run)
    corpus = parse_news_tsv(news_files, title_len=config.title_len, min_count=config.min_count)
    corpus.vocab.save(run / "vocab.txt")
    _write_cache(corpus, run / "cache/news.npz")
    train, valid, test = _split_behaviours(config, corpus, behaviour_files)
    words = [len(split_words(a.title)) for a in corpus.articles]
    return Dataset(corpus, train, valid, test, float(np.mean(words)) if words else 0.0)


def _write_cache(corpus: Corpus, path: Path) -> None:
    with open(path, "wb") as fh:
        np.savez(
            fh,
            ids=np.array([a.news_id for a in corpus.articles], dtype=np.str_),
            categories=np.array([a.category for a in corpus.articles], dtype=np.str_),
            tokens=corpus.tokens,
        )


def load_dataset(config: RunConfig, run: RunDir) -> Dataset:
    """Load a prepared run's corpus from its cache and re-read the behaviours."""
    cache = run / "cache/news.npz"
    if not cache.is_file() or not (run / "vocab.txt").is_file():
        raise UsageError(f"{run.root} is not prepared; run `unirec prepare` first")
    vocab = Vocab.load(run / "vocab.txt")
    with np.load(cache) as z:
        ids, cats, tokens = z["ids"].tolist(), z["categories"].tolist(), z["tokens"]
    corpus = Corpus(
        [NewsArticle(i, c, tuple(int(t) for t in row), "") for i, c, row in zip(ids, cats, tokens)],
        vocab,
        config.title_len,
    )
    _, behaviour_files = _source_files(config, run)
    train, valid, test = _split_behaviours(config, corpus, behaviour_files)
    return Dataset(corpus, train, valid, test)


def dataset_summary(data: Dataset) -> dict:
    imps = data.train + data.validation + data.test
    return {
        "# News": len(data.corpus),
        "# Users": len({imp.user_id for imp in imps}),
        "# Impressions": len(imps),
        "# Clicks": sum(len(imp.clicked) for imp in imps),
        "Avg. news title len.": round(data.title_words, 2),
        "# Train impressions": len(data.train),
        "# Validation impressions": len(data.validation),
        "# Test impressions": len(data.test),
        "# Vocabulary": len(data.corpus.vocab),
    }


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _epoch_logger(path: Path):
    fh = open(path, "w", encoding="utf-8")

    def log(line: str) -> None:
        fh.write(line + "\n")
        fh.flush()
        print(line, flush=True)

    return fh, log


def cmd_prepare(config: RunConfig, run: RunDir) -> dict:
    data = prepare_dataset(config, run)
    summary = dataset_summary(data)
    with open(run / "reports/dataset_summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    width = max(len(k) for k in summary)
    for k, v in summary.items():
        print(f"{k:<{width}}  {v:,}" if isinstance(v, int) else f"{k:<{width}}  {v}")
    return summary


def _ensure_prepared(config: RunConfig, run: RunDir) -> Dataset:
    if not (run / "cache/news.npz").is_file():
        cmd_prepare(config, run)
    return load_dataset(config, run)


def cmd_train(config: RunConfig, run: RunDir, stage: str) -> list[Path]:
    data = _ensure_prepared(config, run)
    tdata = TrainingData(data.corpus, data.train, data.validation)
    tcfg = config.train_config()
    written = []
    if stage in ("1", "both"):
        fh, log = _epoch_logger(run / "logs/train_stage1.log")
        with fh:
            ckpt1 = train_stage1(tdata, tcfg, config.model_config(len(data.corpus.vocab)), log)
        save_checkpoint(ckpt1, run.stage1)
        written.append(run.stage1)
    if stage in ("2", "both"):
        if not run.stage1.is_file():
            raise UsageError(f"stage 2 needs a stage-1 checkpoint at {run.stage1}")
        ckpt1 = load_checkpoint(run.stage1)
        fh, log = _epoch_logger(run / "logs/train_stage2.log")
        with fh:
            ckpt2 = train_stage2(ckpt1, tdata, tcfg, log)
        save_checkpoint(ckpt2, run.stage2)
        written.append(run.stage2)
    for p in written:
        print(f"wrote {p}")
    return written


def _pick_checkpoint(run: RunDir, explicit: str | None, need_stage2: bool) -> Path:
    if explicit:
        return Path(explicit)
    if run.stage2.is_file():
        return run.stage2
    if need_stage2:
        raise UsageError(f"no stage-2 checkpoint in {run.root}; train stage 2 first")
    if run.stage1.is_file():
        return run.stage1
    raise UsageError(f"no checkpoint in {run.root}; run `unirec train` first")


def _report_metadata(config: RunConfig, ckpt: Checkpoint, split: str) -> dict:
    return {"config_hash": ckpt.config_hash, "seed": config.seed, "dataset": config.dataset_id(), "split": split}


def _write_report(report: evaluation.MetricsReport, run: RunDir, name: str) -> None:
    report.write_json(run / f"reports/{name}.json")
    report.write_csv(run / f"reports/{name}.csv")
    for metric in report.values:
        print(f"{report.label:<12} {metric:<12} {report.mean(metric):.5f} ± {report.std(metric):.5f}")


def _print_reference(table: dict, report: evaluation.MetricsReport) -> None:
    print("  full-scale reference (1M-user MIND, informational only):")
    for metric, value in table.items():
        mine = f"{report.mean(metric):.4f}" if metric in report.values else "n/a"
        print(f"    {metric:<12} reference {value:.4f}   this run {mine}")


def cmd_eval(
    config: RunConfig,
    run: RunDir,
    task: str,
    mode: str,
    checkpoint: str | None = None,
    P: int | None = None,
    ks: Sequence[int] | None = None,
    baseline: str | None = None,
    split: str = "test",
) -> list[evaluation.MetricsReport]:
    need_memory = task in ("recall", "both") and baseline is None
    path = _pick_checkpoint(run, checkpoint, need_memory)
    ckpt = load_checkpoint(path, min_stage=2 if need_memory else 1)
    data = load_dataset(config, run)
    impressions = data.test if split == "test" else data.validation
    reports = []
    model = ckpt.model()
    news_emb = evaluation.news_embeddings(model, data.corpus)
    if task in ("rank", "both"):
        rep = evaluation.evaluate_ranking(model, data.corpus, impressions, news_emb=news_emb)
        rep.metadata.update(_report_metadata(config, ckpt, split))
        _write_report(rep, run, "rank")
        if config.dataset == "mind":
            _print_reference(evaluation.REFERENCE_RANKING, rep)
        reports.append(rep)
    if task in ("recall", "both"):
        prior = data.train + data.validation if split == "test" else data.train
        users = evaluation.recall_users(impressions, prior=prior)
        recall_mode = baseline or mode
        P = config.P if P is None else P
        rep = evaluation.evaluate_recall(
            ckpt,
            None,
            data.corpus,
            users,
            ks=tuple(ks or config.recall_ks),
            mode=recall_mode,
            P=P,
            renorm=config.renorm,
            news_emb=news_emb,
            seed=config.seed,
        )
        rep.metadata.update(_report_metadata(config, ckpt, split))
        if recall_mode == "top" and config.renorm != RENORM_SOFTMAX:
            rep.label += f"[{config.renorm}]"
        name = {"top": f"recall_top_P{P}", "all": "recall_all", "average": "recall_average"}.get(
            recall_mode, f"recall_{recall_mode}"
        )
        _write_report(rep, run, name)
        if config.dataset == "mind" and rep.label in evaluation.REFERENCE_RECALL:
            _print_reference(evaluation.REFERENCE_RECALL[rep.label], rep)
        reports.append(rep)
    return reports


def cmd_sweep(
    config: RunConfig,
    run: RunDir,
    parameter: str,
    values: Sequence[int],
    seeds: Sequence[int] | None = None,
    k: int | None = None,
    split: str = "test",
) -> Path:
    """Recall@k against M (stage 2 retrained per value, P=M) or against
    test-time P (one stage-2 run per seed at the configured M)."""
    if parameter not in ("M", "P"):
        raise UsageError("sweep parameter must be M or P")
    data = _ensure_prepared(config, run)
    if not run.stage1.is_file():
        cmd_train(config, run, "1")
    ckpt1 = load_checkpoint(run.stage1)
    tdata = TrainingData(data.corpus, data.train, data.validation)
    k = k or config.val_recall_k or max(1, len(data.corpus) // 100)
    impressions = data.test if split == "test" else data.validation
    prior = data.train + data.validation if split == "test" else data.train
    users = evaluation.recall_users(impressions, prior=prior)
    news_emb = evaluation.news_embeddings(ckpt1.model(), data.corpus)
    seeds = list(seeds) if seeds else [config.seed]

    out = run / f"reports/sweep_{parameter}.csv"
    with open(out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parameter", "value", "seed", "metric", "score"])
        for seed in seeds:
            if parameter == "P":
                ckpt2 = _sweep_stage2(run, ckpt1, tdata, config, seed, config.M)
            for value in values:
                if parameter == "M":
                    ckpt2 = _sweep_stage2(run, ckpt1, tdata, config, seed, value)
                    P = value
                else:
                    P = value
                    if P > config.M:
                        logger.warning("skipping P=%d > M=%d", P, config.M)
                        continue
                rep = evaluation.evaluate_recall(
                    ckpt2, None, data.corpus, users, ks=(k,), mode="top", P=P, renorm=config.renorm,
                    news_emb=news_emb,
                )
                score = rep.mean(f"recall@{k}")
                w.writerow([parameter, value, seed, f"recall@{k}", repr(score)])
                print(f"{parameter}={value} seed={seed} recall@{k}={score:.5f}", flush=True)
    print(f"wrote {out}")
    return out


def _sweep_stage2(run: RunDir, ckpt1: Checkpoint, tdata: TrainingData, config: RunConfig, seed: int, M: int):
    tcfg = dataclasses.replace(config.train_config(), seed=seed, M=M, P=min(config.P, M))
    path = run / f"checkpoints/sweep_M{M}_seed{seed}.ckpt"
    if path.is_file():
        ckpt = load_checkpoint(path, expected_hash=None, min_stage=2)
        if ckpt.train_config == tcfg:
            return ckpt
    fh, log = _epoch_logger(run / f"logs/sweep_M{M}_seed{seed}.log")
    with fh:
        ckpt = train_stage2(ckpt1, tdata, tcfg, log)
    save_checkpoint(ckpt, path)
    return ckpt


def cmd_bench(
    config: RunConfig,
    run: RunDir,
    checkpoint: str | None = None,
    n_values: Sequence[int] = (10, 50, 200),
    m_values: Sequence[int] = (5, 20, 100),
    reps: int = 30,
) -> int:
    path = _pick_checkpoint(run, checkpoint, need_stage2=False)
    ckpt = load_checkpoint(path)
    memory = ckpt.basis_memory() if ckpt.memory is not None else None
    rows = evaluation.bench_recall_embedding(
        ckpt.model(), memory, n_values, m_values, reps=reps, seed=config.seed
    )
    out = run / "reports/bench.csv"
    evaluation.write_bench_csv(rows, out)
    med = evaluation.bench_medians(rows)
    for (phase, n, m), v in sorted(med.items()):
        print(f"{phase:<18} N={n:<5} M={m:<5} median {v:10.2f} us")
    m_mid = sorted(m_values)[len(m_values) // 2]
    lo, hi = min(n_values), max(n_values)
    ratio = med[(evaluation.PHASE_RECALL, hi, m_mid)] / med[(evaluation.PHASE_RECALL, lo, m_mid)]
    ok = 0.5 <= ratio <= 2.0
    print(f"recall-embedding time ratio N={hi} / N={lo} at M={m_mid}: {ratio:.3f} ({'within' if ok else 'outside'} [0.5, 2.0])")
    print(f"wrote {out}")
    return 0 if ok else BENCH_FAILED_EXIT_CODE


def cmd_synth(config: RunConfig, out: Path) -> None:
    synth = generate_synthetic(
        num_topics=config.num_topics,
        num_users=config.num_users,
        num_news=config.num_news,
        words_per_topic=config.words_per_topic,
        seed=config.seed,
        impressions_per_user=config.impressions_per_user,
        popularity_scale=config.popularity_scale,
        title_len=config.title_len,
    )
    synth.write(out)
    print(f"wrote {len(synth.corpus)} news, {len(synth.train)}/{len(synth.validation)}/{len(synth.test)} impressions to {out}")


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--run-dir", help="run directory (overrides out_dir)")
    common.add_argument("--force", action="store_true", help="overwrite a run directory with a different config")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="unirec", description="Unified news recall and ranking.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("prepare", parents=[common], help="parse or generate data, write vocab and token cache")

    p = sub.add_parser("train", parents=[common], help="train stage 1, stage 2 or both")
    p.add_argument("--stage", choices=("1", "2", "both"), default="both")

    p = sub.add_parser("eval", parents=[common], help="ranking and/or recall evaluation")
    p.add_argument("--task", choices=("rank", "recall", "both"), default="both")
    p.add_argument("--mode", choices=("all", "top"), default="top")
    p.add_argument("--baseline", choices=("average", "random"), help="evaluate a comparator instead of the memory")
    p.add_argument("--checkpoint")
    p.add_argument("--P", type=int)
    p.add_argument("--ks", type=_int_list, help="recall cutoffs, e.g. 100,200,500,1000")
    p.add_argument("--split", choices=("test", "validation"), default="test")

    p = sub.add_parser("sweep", parents=[common], help="recall against M or test-time P")
    p.add_argument("--param", choices=("M", "P"), required=True)
    p.add_argument("--values", type=_int_list, required=True)
    p.add_argument("--seeds", type=_int_list, help="stage-2 seeds (default: the config seed)")
    p.add_argument("--k", type=int, help="recall cutoff (default 1%% of the pool)")
    p.add_argument("--split", choices=("test", "validation"), default="test")

    p = sub.add_parser("bench", parents=[common], help="time user encoding vs recall-embedding synthesis")
    p.add_argument("--checkpoint")
    p.add_argument("--n", type=_int_list, default=[10, 50, 200])
    p.add_argument("--m", type=_int_list, default=[5, 20, 100])
    p.add_argument("--reps", type=int, default=30)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset as MIND-style TSVs")
    p.add_argument("--out", required=True)
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    stored = Path(args.run_dir or "", "config.txt")
    if args.run_dir and not args.config and not args.set and stored.is_file():
        # Follow-up commands on an existing run reuse its recorded config.
        config = load_run_config(str(stored), (), args.run_dir)
    else:
        config = load_run_config(args.config, args.set, args.run_dir)
    if args.command == "synth":
        cmd_synth(config, Path(args.out))
        return 0
    rdir = RunDir(config)
    rdir.claim(args.force)
    start = time.perf_counter()
    code = 0
    if args.command == "prepare":
        cmd_prepare(config, rdir)
    elif args.command == "train":
        cmd_train(config, rdir, args.stage)
    elif args.command == "eval":
        cmd_eval(config, rdir, args.task, args.mode, args.checkpoint, args.P, args.ks, args.baseline, args.split)
    elif args.command == "sweep":
        cmd_sweep(config, rdir, args.param, args.values, args.seeds, args.k, args.split)
    elif args.command == "bench":
        code = cmd_bench(config, rdir, args.checkpoint, args.n, args.m, args.reps)
    rdir.log_wall_time(args.command, time.perf_counter() - start)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    try:
        return run(argv)
    except UniRecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return IO_EXIT_CODE


if __name__ == "__main__":
    sys.exit(main())
