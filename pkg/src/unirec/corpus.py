"""MIND-format ingestion, vocabulary, training-sample construction and a
synthetic topic-preference dataset generator."""

from __future__ import annotations

import logging
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError

logger = logging.getLogger(__name__)

PAD_ID = 0
UNK_ID = 1
DEFAULT_TITLE_LEN = 30
DEFAULT_HISTORY_LEN = 50
TIME_FORMAT = "%m/%d/%Y %I:%M:%S %p"

_TOKEN_RE = re.compile(r"[^\W_]+")


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NewsArticle:
    news_id: str
    category: str
    title_tokens: tuple[int, ...]
    title: str = field(default="", compare=False)


@dataclass(frozen=True)
class ImpressionLog:
    impression_id: str
    user_id: str
    timestamp: str
    history: tuple[str, ...]
    candidates: tuple[tuple[str, int], ...]

    @property
    def clicked(self) -> list[str]:
        return [nid for nid, label in self.candidates if label == 1]

    @property
    def skipped(self) -> list[str]:
        return [nid for nid, label in self.candidates if label == 0]

    @property
    def time(self) -> datetime:
        return parse_timestamp(self.timestamp)


@dataclass(frozen=True)
class RankingSample:
    history: tuple[str, ...]
    positive: str
    negatives: tuple[str, ...]


@dataclass(frozen=True)
class RecallSample:
    history: tuple[str, ...]
    positive: str
    negatives: tuple[str, ...]


class Vocab:
    """Word -> id map with PAD=0 and UNK=1 reserved."""

    def __init__(self, words: Sequence[str] = ()):
        self.words: list[str] = ["<pad>", "<unk>", *words]
        self.index: dict[str, int] = {w: i for i, w in enumerate(self.words)}
        self.index["<pad>"] = PAD_ID
        self.index["<unk>"] = UNK_ID

    def __len__(self) -> int:
        return len(self.words)

    def __getitem__(self, word: str) -> int:
        return self.index.get(word, UNK_ID)

    def __contains__(self, word: str) -> bool:
        return word in self.index and self.index[word] > UNK_ID

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.words == other.words

    def as_dict(self) -> dict[str, int]:
        """Real words only (reserved ids omitted)."""
        return {w: i for i, w in enumerate(self.words) if i > UNK_ID}

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text("".join(w + "\n" for w in self.words[2:]), encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocab":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


class Corpus:
    """Ordered news collection; row ``i`` of :attr:`tokens` encodes article ``i``."""

    def __init__(self, articles: Sequence[NewsArticle], vocab: Vocab, title_len: int, skipped_rows: int = 0):
        self.articles = list(articles)
        self.vocab = vocab
        self.title_len = title_len
        self.skipped_rows = skipped_rows
        self.index: dict[str, int] = {}
        for i, art in enumerate(self.articles):
            if art.news_id in self.index:
                raise ConfigurationError(f"duplicate news id {art.news_id}")
            self.index[art.news_id] = i
        self._tokens: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.articles)

    def __contains__(self, news_id: str) -> bool:
        return news_id in self.index

    def __getitem__(self, news_id: str) -> NewsArticle:
        return self.articles[self.index[news_id]]

    @property
    def tokens(self) -> np.ndarray:
        if self._tokens is None:
            arr = np.zeros((len(self.articles), self.title_len), dtype=np.int64)
            for i, art in enumerate(self.articles):
                arr[i] = art.title_tokens
            self._tokens = arr
        return self._tokens

    def indices(self, news_ids: Iterable[str]) -> np.ndarray:
        return np.fromiter((self.index[n] for n in news_ids), dtype=np.int64)


@dataclass
class BehaviorLog:
    impressions: list[ImpressionLog]
    skipped_rows: int = 0
    dropped_ids: int = 0


# ---------------------------------------------------------------------------
# Tokenisation and vocabulary
# ---------------------------------------------------------------------------


def split_words(title: str) -> list[str]:
    return _TOKEN_RE.findall(title.lower())


def tokenize_title(title: str, vocab: Vocab, title_len: int = DEFAULT_TITLE_LEN) -> list[int]:
    ids = [vocab[w] for w in split_words(title)][:title_len]
    return ids + [PAD_ID] * (title_len - len(ids))


def build_vocab(titles: "Corpus | Iterable[str]", min_count: int = 1) -> Vocab:
    """Ids by descending frequency, ties broken lexicographically."""
    if isinstance(titles, Corpus):
        titles = (a.title for a in titles.articles)
    counts = Counter(w for t in titles for w in split_words(t))
    kept = sorted((w for w, c in counts.items() if c >= min_count), key=lambda w: (-counts[w], w))
    return Vocab(kept)


# ---------------------------------------------------------------------------
# TSV parsing
# ---------------------------------------------------------------------------


def _read_rows(path: str | os.PathLike) -> list[list[str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return [line.rstrip("\r\n").split("\t") for line in fh if line.strip("\r\n")]


def parse_news_tsv(
    path: str | os.PathLike | Sequence[str | os.PathLike],
    vocab: Vocab | None = None,
    title_len: int = DEFAULT_TITLE_LEN,
    min_count: int = 1,
) -> Corpus:
    """Read one or more ``news.tsv`` files; later duplicates of an id are ignored.

    With no ``vocab`` one is built from the titles read.
    """
    paths = [path] if isinstance(path, (str, os.PathLike)) else list(path)
    rows: list[tuple[str, str, str]] = []
    seen: set[str] = set()
    skipped = 0
    for p in paths:
        for cols in _read_rows(p):
            if len(cols) < 4 or not cols[0]:
                skipped += 1
                continue
            if cols[0] in seen:
                continue
            seen.add(cols[0])
            rows.append((cols[0], cols[1], cols[3]))
    if skipped:
        logger.warning("skipped %d malformed news rows", skipped)
    if vocab is None:
        vocab = build_vocab((r[2] for r in rows), min_count=min_count)
    articles = [
        NewsArticle(nid, cat, tuple(tokenize_title(title, vocab, title_len)), title) for nid, cat, title in rows
    ]
    return Corpus(articles, vocab, title_len, skipped_rows=skipped)


def parse_behaviors_tsv(path: str | os.PathLike, corpus: Corpus) -> BehaviorLog:
    impressions = []
    skipped = dropped = 0
    for cols in _read_rows(path):
        if len(cols) < 5:
            skipped += 1
            continue
        imp_id, user, ts, hist_field, cand_field = cols[:5]
        history = []
        for nid in hist_field.split():
            if nid in corpus:
                history.append(nid)
            else:
                dropped += 1
        candidates = []
        malformed = False
        for tok in cand_field.split():
            nid, sep, label = tok.rpartition("-")
            if not sep or label not in ("0", "1"):
                malformed = True
                break
            if nid in corpus:
                candidates.append((nid, int(label)))
            else:
                dropped += 1
        if malformed or not candidates:
            skipped += 1
            continue
        impressions.append(ImpressionLog(imp_id, user, ts, tuple(history), tuple(candidates)))
    if skipped or dropped:
        logger.warning("behaviors %s: skipped %d rows, dropped %d unknown ids", path, skipped, dropped)
    return BehaviorLog(impressions, skipped, dropped)


def write_news_tsv(corpus: Corpus, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for a in corpus.articles:
            fh.write("\t".join([a.news_id, a.category, "", a.title, "", "", "[]", "[]"]) + "\n")


def write_behaviors_tsv(impressions: Iterable[ImpressionLog], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for imp in impressions:
            cands = " ".join(f"{nid}-{label}" for nid, label in imp.candidates)
            fh.write("\t".join([imp.impression_id, imp.user_id, imp.timestamp, " ".join(imp.history), cands]) + "\n")


def parse_timestamp(ts: str) -> datetime:
    return datetime.strptime(ts, TIME_FORMAT)


def split_validation(
    impressions: Sequence[ImpressionLog],
    fraction: float = 0.1,
    by: str = "time",
    seed: int = 0,
) -> tuple[list[ImpressionLog], list[ImpressionLog]]:
    """Hold out the latest ``fraction`` of impressions (``by="time"``) or a
    random ``fraction`` of users (``by="user"``)."""
    if not 0.0 <= fraction < 1.0:
        raise ConfigurationError("validation fraction must be in [0, 1)")
    if by == "time":
        order = sorted(range(len(impressions)), key=lambda i: (impressions[i].time, i))
        cut = len(order) - int(round(fraction * len(order)))
        keep = set(order[:cut])
        train = [imp for i, imp in enumerate(impressions) if i in keep]
        valid = [imp for i, imp in enumerate(impressions) if i not in keep]
        return train, valid
    if by == "user":
        users = sorted({imp.user_id for imp in impressions})
        rng = np.random.default_rng(seed)
        held = set(rng.permutation(users)[: int(round(fraction * len(users)))].tolist())
        return (
            [imp for imp in impressions if imp.user_id not in held],
            [imp for imp in impressions if imp.user_id in held],
        )
    raise ConfigurationError(f"unknown validation split {by!r}")


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def sample_ranking_batch(
    impressions: Sequence[ImpressionLog], K: int, rng: np.random.Generator
) -> list[RankingSample]:
    """One sample per clicked candidate with ``K`` in-impression negatives.

    Impressions without non-clicked candidates are skipped; fewer than ``K``
    non-clicks are drawn with replacement.
    """
    if K < 1:
        raise ConfigurationError("K must be at least 1")
    samples = []
    for imp in impressions:
        negatives = imp.skipped
        if not negatives:
            continue
        replace = len(negatives) < K
        for pos in imp.clicked:
            picks = rng.choice(len(negatives), size=K, replace=replace)
            samples.append(RankingSample(imp.history, pos, tuple(negatives[i] for i in picks)))
    return samples


def clicked_sets(impressions: Iterable[ImpressionLog]) -> dict[str, set[str]]:
    """Per user: every news id seen in a history or clicked in an impression."""
    out: dict[str, set[str]] = {}
    for imp in impressions:
        s = out.setdefault(imp.user_id, set())
        s.update(imp.history)
        s.update(imp.clicked)
    return out


def sample_recall_indices(
    impressions: Sequence[ImpressionLog],
    corpus: Corpus,
    T: int,
    rng: np.random.Generator,
    clicked: dict[str, set[str]] | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Index form of :func:`sample_recall_batch`.

    Returns ``(impression_row, positive, negatives)`` with ``negatives`` of
    shape (S, T), one row per clicked candidate in impression order.
    """
    if T < 1:
        raise ConfigurationError("T must be at least 1")
    n = len(corpus)
    if n < T + 1:
        raise ConfigurationError(f"corpus of {n} news cannot supply {T} negatives plus a positive")
    if clicked is None:
        clicked = clicked_sets(impressions)
    excluded = {u: {corpus.index[nid] for nid in s} for u, s in clicked.items()}
    rows, positives, negatives = [], [], []
    for r, imp in enumerate(impressions):
        excl = excluded.get(imp.user_id, set())
        for pos in imp.clicked:
            p = corpus.index[pos]
            rows.append(r)
            positives.append(p)
            negatives.append(_draw_excluding(n, T, excl | {p}, rng))
    return (
        np.array(rows, dtype=np.int64),
        np.array(positives, dtype=np.int64),
        np.array(negatives, dtype=np.int64).reshape(len(rows), T),
    )


def sample_recall_batch(
    impressions: Sequence[ImpressionLog],
    corpus: Corpus,
    T: int,
    rng: np.random.Generator,
    clicked: dict[str, set[str]] | None = None,
) -> list[RecallSample]:
    """One sample per clicked candidate with ``T`` distinct negatives drawn
    uniformly from the corpus minus the user's clicked news."""
    rows, positives, negatives = sample_recall_indices(impressions, corpus, T, rng, clicked)
    ids = [a.news_id for a in corpus.articles]
    return [
        RecallSample(impressions[r].history, ids[p], tuple(ids[i] for i in negs))
        for r, p, negs in zip(rows.tolist(), positives.tolist(), negatives.tolist())
    ]


def _draw_excluding(n: int, T: int, excluded: set[int], rng: np.random.Generator) -> list[int]:
    eligible = n - len(excluded)
    if eligible <= 0:
        raise ConfigurationError("every news item is excluded; no negatives can be drawn")
    if eligible < T:
        pool = np.array(sorted(set(range(n)) - excluded))
        return pool[rng.integers(0, len(pool), size=T)].tolist()
    draw = T + len(excluded)
    if draw <= n:
        # A uniform ordered draw, filtered, is a uniform ordered draw of the eligible set.
        picks = rng.choice(n, size=draw, replace=False)
    else:
        picks = rng.permutation(n)
    out = [int(i) for i in picks if int(i) not in excluded]
    return out[:T]


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SyntheticDataset:
    corpus: Corpus
    train: list[ImpressionLog]
    validation: list[ImpressionLog]
    test: list[ImpressionLog]
    topics: dict[str, int]
    user_topics: dict[str, tuple[int, ...]]

    def write(self, directory: str | os.PathLike) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_news_tsv(self.corpus, d / "news.tsv")
        write_behaviors_tsv(self.train, d / "behaviors_train.tsv")
        write_behaviors_tsv(self.validation, d / "behaviors_valid.tsv")
        write_behaviors_tsv(self.test, d / "behaviors_test.tsv")


_FILLER = ("news", "report", "update", "today", "says", "new", "after", "over", "more", "first")


def generate_synthetic(
    num_topics: int = 5,
    num_users: int = 2000,
    num_news: int = 3000,
    words_per_topic: int = 60,
    seed: int = 0,
    impressions_per_user: int = 30,
    candidates_per_impression: int = 10,
    clicks_per_impression: int = 1,
    initial_history: tuple[int, int] = (3, 10),
    preference_strength: float = 0.9,
    popularity_scale: float = 4.0,
    title_words: tuple[int, int] = (6, 12),
    title_len: int = 12,
    split: tuple[float, float] = (0.7, 0.1),
) -> SyntheticDataset:
    """Topic-preference click logs in MIND shape.

    Each news item belongs to one topic and draws title words from that
    topic's pool (plus occasional filler words). Every word has an appeal
    score; an item's popularity is ``exp(popularity_scale * mean appeal)``,
    so popularity is readable from the title. Each user prefers 1-3 topics.
    A click lands on a preferred topic with probability
    ``preference_strength``; within the chosen topic items are drawn in
    proportion to popularity without repeating a user's earlier clicks.
    Non-clicked candidates are uniform over the corpus. Impressions are
    split chronologically per user into train/validation/test.
    """
    if min(num_topics, num_users, num_news, words_per_topic) < 1:
        raise ConfigurationError("synthetic counts must all be at least 1")
    if clicks_per_impression >= candidates_per_impression:
        raise ConfigurationError("impressions need at least one non-clicked candidate")
    rng = np.random.default_rng(seed)

    topic_words = [[f"t{t}w{j}" for j in range(words_per_topic)] for t in range(num_topics)]
    appeal = rng.normal(size=(num_topics, words_per_topic))

    news_ids = [f"N{i + 1}" for i in range(num_news)]
    news_topic = rng.integers(0, num_topics, size=num_news)
    titles = []
    popularity = np.empty(num_news)
    for i in range(num_news):
        t = news_topic[i]
        length = rng.integers(title_words[0], title_words[1] + 1)
        picks = rng.integers(0, words_per_topic, size=length)
        filler = rng.random(length) < 0.15
        words = [_FILLER[rng.integers(len(_FILLER))] if f else topic_words[t][p] for p, f in zip(picks, filler)]
        topical = picks[~filler]
        score = appeal[t, topical].mean() if topical.size else 0.0
        popularity[i] = np.exp(popularity_scale * score)
        titles.append(" ".join(words))

    vocab = build_vocab(titles)
    articles = [
        NewsArticle(news_ids[i], f"topic{news_topic[i]}", tuple(tokenize_title(titles[i], vocab, title_len)), titles[i])
        for i in range(num_news)
    ]
    corpus = Corpus(articles, vocab, title_len)
    by_topic = [np.flatnonzero(news_topic == t) for t in range(num_topics)]

    def draw_click(prefs: np.ndarray, others: np.ndarray, taken: np.ndarray) -> int | None:
        for _ in range(4):
            pool_topics = prefs if (others.size == 0 or rng.random() < preference_strength) else others
            t = pool_topics[rng.integers(len(pool_topics))]
            members = by_topic[t]
            members = members[~taken[members]]
            if members.size == 0:
                continue
            w = popularity[members]
            return int(members[rng.choice(members.size, p=w / w.sum())])
        return None

    base_time = datetime(2019, 11, 9)
    span = timedelta(days=6)
    user_ids = [f"U{u + 1}" for u in range(num_users)]
    user_topics: dict[str, tuple[int, ...]] = {}
    per_user: list[list[ImpressionLog]] = []
    imp_counter = 0
    for u, uid in enumerate(user_ids):
        k = int(rng.integers(1, min(3, num_topics) + 1))
        prefs = np.sort(rng.choice(num_topics, size=k, replace=False))
        others = np.setdiff1d(np.arange(num_topics), prefs)
        user_topics[uid] = tuple(int(x) for x in prefs)

        taken = np.zeros(num_news, dtype=bool)
        history: list[int] = []
        for _ in range(int(rng.integers(initial_history[0], initial_history[1] + 1))):
            c = draw_click(prefs, others, taken)
            if c is not None:
                taken[c] = True
                history.append(c)

        offset = rng.random() * span.total_seconds() / impressions_per_user
        logs = []
        for j in range(impressions_per_user):
            clicks = []
            for _ in range(clicks_per_impression):
                c = draw_click(prefs, others, taken)
                if c is not None:
                    taken[c] = True
                    clicks.append(c)
            if not clicks:
                continue
            n_neg = candidates_per_impression - len(clicks)
            shown = set(clicks)
            negs = []
            while len(negs) < n_neg:
                c = int(rng.integers(num_news))
                if c not in shown and not taken[c]:
                    shown.add(c)
                    negs.append(c)
            cands = [(news_ids[c], 1) for c in clicks] + [(news_ids[c], 0) for c in negs]
            order = rng.permutation(len(cands))
            when = base_time + timedelta(seconds=offset + j * span.total_seconds() / impressions_per_user)
            imp_counter += 1
            logs.append(
                ImpressionLog(
                    impression_id=str(imp_counter),
                    user_id=uid,
                    timestamp=when.strftime(TIME_FORMAT),
                    history=tuple(news_ids[h] for h in history),
                    candidates=tuple(cands[i] for i in order),
                )
            )
            history.extend(clicks)
        per_user.append(logs)

    train, valid, test = [], [], []
    for logs in per_user:
        n = len(logs)
        n_train = int(round(split[0] * n))
        n_valid = int(round(split[1] * n))
        train.extend(logs[:n_train])
        valid.extend(logs[n_train : n_train + n_valid])
        test.extend(logs[n_train + n_valid :])
    topics = {news_ids[i]: int(news_topic[i]) for i in range(num_news)}
    return SyntheticDataset(corpus, train, valid, test, topics, user_topics)
