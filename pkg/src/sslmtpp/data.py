"""Event-sequence data: containers, file formats, synthetic generation, protocol splits, batching."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

NUM_RETWEET_CLASSES = 3
# labeled-event budgets of the six evaluation protocols P-1 ... P-6
DEFAULT_BUDGETS = (10_000, 20_000, 30_000, 50_000, 140_000, 700_000)
DEFAULT_TEST_EVENTS = 60_000


class DataFormatError(ValueError):
    """A record in a sequence file or manifest is malformed."""


class InsufficientPoolError(ValueError):
    """The pool holds fewer events than the requested split needs."""


@dataclass(frozen=True)
class MarkedSequence:
    """Strictly increasing event times with optional per-event marker ids."""

    seq_id: str
    times: np.ndarray
    markers: np.ndarray | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        object.__setattr__(self, "times", times)
        if times.ndim != 1 or times.size < 2:
            raise DataFormatError(f"sequence {self.seq_id!r}: need at least 2 event times")
        if not np.all(np.isfinite(times)):
            raise DataFormatError(f"sequence {self.seq_id!r}: non-finite event time")
        if np.any(np.diff(times) <= 0):
            raise DataFormatError(f"sequence {self.seq_id!r}: event times must be strictly increasing")
        if self.markers is not None:
            markers = np.asarray(self.markers, dtype=np.int64)
            object.__setattr__(self, "markers", markers)
            if markers.shape != times.shape:
                raise DataFormatError(f"sequence {self.seq_id!r}: {markers.size} markers for {times.size} events")

    def __len__(self) -> int:
        return self.times.size

    @property
    def labeled(self) -> bool:
        return self.markers is not None

    def gaps(self) -> np.ndarray:
        """Inter-event gaps, first event assigned 0."""
        return np.concatenate(([0.0], np.diff(self.times)))

    def without_markers(self) -> "MarkedSequence":
        return MarkedSequence(self.seq_id, self.times, None)


@dataclass
class SequencePool:
    """A collection of sequences over ``num_classes`` marker classes.

    ``hidden_markers`` keeps ground truth for sequences whose markers were
    stripped; it may only be read through :meth:`oracle_markers`.
    """

    sequences: list[MarkedSequence]
    num_classes: int = NUM_RETWEET_CLASSES
    hidden_markers: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        ids = [s.seq_id for s in self.sequences]
        if len(set(ids)) != len(ids):
            raise DataFormatError("duplicate sequence ids in pool")
        for s in self.sequences:
            if s.markers is not None and s.markers.size and (s.markers.min() < 0 or s.markers.max() >= self.num_classes):
                raise DataFormatError(f"sequence {s.seq_id!r}: marker out of range [0, {self.num_classes})")
        self._index = {s.seq_id: i for i, s in enumerate(self.sequences)}

    def __len__(self) -> int:
        return len(self.sequences)

    def __getitem__(self, seq_id: str) -> MarkedSequence:
        return self.sequences[self._index[seq_id]]

    def __contains__(self, seq_id: str) -> bool:
        return seq_id in self._index

    @property
    def ids(self) -> list[str]:
        return [s.seq_id for s in self.sequences]

    def total_events(self, ids: Sequence[str] | None = None) -> int:
        seqs = self.sequences if ids is None else [self[i] for i in ids]
        return int(sum(len(s) for s in seqs))

    def subset(self, ids: Sequence[str]) -> list[MarkedSequence]:
        return [self[i] for i in ids]

    def label_status(self) -> dict[str, bool]:
        return {s.seq_id: s.labeled for s in self.sequences}

    def strip_markers(self, ids: Sequence[str]) -> "SequencePool":
        """Copy with markers of ``ids`` hidden (kept for oracle-access evaluation only)."""
        hide = set(ids)
        hidden = dict(self.hidden_markers)
        seqs = []
        for s in self.sequences:
            if s.seq_id in hide and s.markers is not None:
                hidden[s.seq_id] = s.markers
                seqs.append(s.without_markers())
            else:
                seqs.append(s)
        return SequencePool(seqs, self.num_classes, hidden)

    def oracle_markers(self, seq_id: str) -> np.ndarray:
        """Ground-truth markers of a stripped sequence. Oracle access: evaluation only."""
        return self.hidden_markers[seq_id]

    def class_shares(self) -> np.ndarray:
        counts = np.zeros(self.num_classes, dtype=np.int64)
        for s in self.sequences:
            if s.markers is not None:
                counts += np.bincount(s.markers, minlength=self.num_classes)
        total = counts.sum()
        return counts / total if total else counts.astype(float)

    def summary(self) -> dict:
        lengths = np.array([len(s) for s in self.sequences])
        return {
            "sequences": len(self.sequences),
            "events": int(lengths.sum()),
            "mean_length": float(lengths.mean()) if lengths.size else 0.0,
            "class_shares": [float(x) for x in self.class_shares()],
        }


# ---------------------------------------------------------------------------
# file formats


def _record_to_json(seq: MarkedSequence) -> str:
    return json.dumps({
        "id": seq.seq_id,
        "times": [float(t) for t in seq.times],
        "markers": None if seq.markers is None else [int(m) for m in seq.markers],
    })


def save_pool(pool: SequencePool, path: str | os.PathLike) -> None:
    """Write newline-delimited JSON records ``{"id", "times", "markers"}``."""
    with open(path, "w", encoding="utf-8") as fh:
        for seq in pool.sequences:
            fh.write(_record_to_json(seq))
            fh.write("\n")


def load_pool(path: str | os.PathLike, num_classes: int = NUM_RETWEET_CLASSES) -> SequencePool:
    """Read a sequence file; every malformed record is reported with its line number."""
    sequences = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}:{lineno}: parse error: {exc.msg}") from None
            if not isinstance(rec, dict) or "times" not in rec:
                raise DataFormatError(f"{path}:{lineno}: record must be an object with 'times'")
            seq_id = str(rec.get("id", f"seq{lineno - 1}"))
            markers = rec.get("markers")
            if markers is not None:
                if any(not isinstance(m, int) or isinstance(m, bool) for m in markers):
                    raise DataFormatError(f"{path}:{lineno}: markers must be integers")
                if any(m < 0 or m >= num_classes for m in markers):
                    raise DataFormatError(f"{path}:{lineno}: marker out of range [0, {num_classes})")
            try:
                sequences.append(MarkedSequence(seq_id, rec["times"], markers))
            except (DataFormatError, TypeError, ValueError) as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
    return SequencePool(sequences, num_classes)


load_retweet_format = load_pool


# ---------------------------------------------------------------------------
# synthetic marked self-exciting process


@dataclass
class GeneratorConfig:
    """Settings for :func:`generate_synthetic`.

    Event times follow an exponential-kernel Hawkes process
    ``mu + sum_i alpha * beta * exp(-beta (t - t_i))`` where ``alpha`` is the
    branching ratio. For ``j >= 2`` the marker of event ``j`` depends on the
    mean of the ``coupling_window`` most recent gaps completed before event
    ``j`` arrives (gap ``j - 1`` and earlier): with probability ``coupling``
    it is the class whose cumulative-prior interval holds the pool-wide
    quantile of that mean, otherwise a draw from ``priors``. Both routes have
    marginal ``priors``; events 0 and 1 always draw from ``priors``.
    """

    n_sequences: int = 1000
    num_classes: int = NUM_RETWEET_CLASSES
    priors: tuple[float, ...] = (0.506, 0.45, 0.044)
    base_intensity: float = 1.0
    alpha: float = 0.5
    beta: float = 1.0
    mean_length: float = 209.0
    min_length: int = 2
    coupling: float = 0.8
    coupling_window: int = 1
    total_events: int | None = None

    def validate(self) -> None:
        priors = np.asarray(self.priors, dtype=float)
        if priors.size != self.num_classes:
            raise ValueError(f"priors has {priors.size} entries for {self.num_classes} classes")
        if np.any(priors < 0) or abs(priors.sum() - 1.0) > 1e-9:
            raise ValueError(f"priors must be non-negative and sum to 1 within 1e-9 (sum={priors.sum()!r})")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1) for a stationary process, got {self.alpha}")
        if self.beta <= 0 or self.base_intensity <= 0:
            raise ValueError("beta and base_intensity must be positive")
        if not 0.0 <= self.coupling <= 1.0:
            raise ValueError("coupling must lie in [0, 1]")
        if self.coupling_window < 1:
            raise ValueError("coupling_window must be >= 1")
        if self.mean_length < self.min_length or self.min_length < 2:
            raise ValueError("need mean_length >= min_length >= 2")
        if self.n_sequences < 1 and not self.total_events:
            raise ValueError("n_sequences must be positive")


def simulate_hawkes(n_events: int, mu: float, alpha: float, beta: float,
                    rng: np.random.Generator) -> np.ndarray:
    """Ogata thinning for an exponential-kernel Hawkes process, stopped after ``n_events``."""
    times = np.empty(n_events)
    t = 0.0
    excitation = 0.0  # sum of alpha*beta*exp(-beta (t - t_i)) at current t
    k = 0
    jump = alpha * beta
    # draw uniforms/exponentials in blocks; thinning consumes ~ (1 + excitation/mu) per event
    while k < n_events:
        upper = mu + excitation  # intensity is non-increasing until the next event
        w = rng.exponential(1.0 / upper)
        decay = math.exp(-beta * w)
        t += w
        excitation *= decay
        if rng.random() * upper <= mu + excitation:
            times[k] = t
            k += 1
            excitation += jump
    return times


def _recent_gap_mean(times: np.ndarray, window: int) -> np.ndarray:
    """Entry ``j - 2`` is the mean of gaps ``max(1, j - window) .. j - 1`` for events ``j = 2 .. k-1``."""
    gaps = np.diff(times)[:-1]
    if window == 1:
        return gaps
    csum = np.concatenate(([0.0], np.cumsum(gaps)))
    hi = np.arange(1, gaps.size + 1)
    lo = np.maximum(hi - window, 0)
    return (csum[hi] - csum[lo]) / (hi - lo)


def _sequence_lengths(cfg: GeneratorConfig, rng: np.random.Generator) -> list[int]:
    extra = cfg.mean_length - cfg.min_length
    if cfg.total_events is None:
        return [cfg.min_length + int(rng.poisson(extra)) for _ in range(cfg.n_sequences)]
    lengths, total = [], 0
    while total < cfg.total_events:
        k = cfg.min_length + int(rng.poisson(extra))
        k = min(k, cfg.total_events - total)
        if k < cfg.min_length:  # fold a too-short remainder into the previous sequence
            lengths[-1] += k
        else:
            lengths.append(k)
        total += k
    return lengths


def generate_synthetic(config: GeneratorConfig, seed: int) -> SequencePool:
    """Draw a marked self-exciting pool; identical output for identical (config, seed)."""
    config.validate()
    root = np.random.SeedSequence(seed)
    len_rng, time_rng, mark_rng = (np.random.default_rng(s) for s in root.spawn(3))
    lengths = _sequence_lengths(config, len_rng)
    all_times = [simulate_hawkes(k, config.base_intensity, config.alpha, config.beta, time_rng) for k in lengths]

    priors = np.asarray(config.priors, dtype=float)
    cum = np.cumsum(priors)
    cum[-1] = 1.0
    # pool-wide quantile of the recent-gap statistic preceding each coupled marker
    coupled_gaps = np.concatenate([_recent_gap_mean(t, config.coupling_window) for t in all_times])
    ranks = np.empty(coupled_gaps.size)
    ranks[np.argsort(coupled_gaps, kind="stable")] = (np.arange(coupled_gaps.size) + 0.5) / max(coupled_gaps.size, 1)

    sequences, offset = [], 0
    for i, times in enumerate(all_times):
        k = times.size
        markers = mark_rng.choice(config.num_classes, size=k, p=priors)
        n_coupled = k - 2
        if n_coupled > 0:
            q = ranks[offset: offset + n_coupled]
            offset += n_coupled
            coupled = np.minimum(np.searchsorted(cum, q, side="right"), config.num_classes - 1)
            use = mark_rng.random(n_coupled) < config.coupling
            markers[2:] = np.where(use, coupled, markers[2:])
        sequences.append(MarkedSequence(f"s{i:06d}", times - times[0], markers))
    return SequencePool(sequences, config.num_classes)


# ---------------------------------------------------------------------------
# protocol splits


@dataclass
class ProtocolSplit:
    name: str
    budget: int
    labeled: list[str]
    unlabeled: list[str]
    test: list[str]
    seed: int

    def to_manifest(self) -> dict:
        return {"protocol": self.name, "labeled": list(self.labeled), "unlabeled": list(self.unlabeled),
                "test": list(self.test), "seed": int(self.seed)}

    @classmethod
    def from_manifest(cls, doc: dict) -> "ProtocolSplit":
        try:
            return cls(str(doc["protocol"]), int(doc.get("budget", 0)), list(doc["labeled"]),
                       list(doc["unlabeled"]), list(doc["test"]), int(doc["seed"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"malformed split manifest: {exc}") from None

    def check(self, pool: SequencePool) -> None:
        sets = [set(self.labeled), set(self.unlabeled), set(self.test)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise DataFormatError(f"split {self.name}: labeled/unlabeled/test overlap")
        missing = [i for s in sets for i in s if i not in pool]
        if missing:
            raise DataFormatError(f"split {self.name}: {len(missing)} ids absent from pool (e.g. {missing[0]!r})")


def save_manifest(split: ProtocolSplit, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(split.to_manifest(), fh)
        fh.write("\n")


def load_manifest(path: str | os.PathLike) -> ProtocolSplit:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: parse error: {exc.msg}") from None
    return ProtocolSplit.from_manifest(doc)


def protocol_names(n: int) -> list[str]:
    return [f"P-{k + 1}" for k in range(n)]


def make_protocol_splits(pool: SequencePool, budgets: Sequence[int] = DEFAULT_BUDGETS,
                         test_events: int | float = DEFAULT_TEST_EVENTS, seed: int = 0,
                         names: Sequence[str] | None = None) -> list[ProtocolSplit]:
    """Hold out one test set, then mark nested labeled subsets of the rest.

    The test set takes shuffled sequences while its event total stays within
    ``test_events`` (a float in (0, 1) is a fraction of the pool). Each labeled
    set is the shortest prefix of a second shuffle whose event total meets
    its budget, so labeled sets are nested across budgets.
    """
    if isinstance(test_events, float) and 0 < test_events < 1:
        test_events = int(round(test_events * pool.total_events()))
    names = list(names) if names is not None else protocol_names(len(budgets))
    if len(names) != len(budgets):
        raise ValueError("one name per budget required")
    rng = np.random.default_rng(seed)
    ids = pool.ids
    lengths = {s.seq_id: len(s) for s in pool.sequences}
    if pool.total_events() < max(budgets, default=0) + test_events:
        raise InsufficientPoolError(
            f"pool has {pool.total_events()} events; need {max(budgets)} labeled + {test_events} test")

    test, test_total, train = [], 0, []
    for j in rng.permutation(len(ids)):
        sid = ids[j]
        if test_total + lengths[sid] <= test_events:
            test.append(sid)
            test_total += lengths[sid]
        else:
            train.append(sid)
    train_total = sum(lengths[s] for s in train)
    if max(budgets, default=0) > train_total:
        raise InsufficientPoolError(f"training part has {train_total} events; budget {max(budgets)} exceeds it")

    order = [train[j] for j in rng.permutation(len(train))]
    cumulative = np.cumsum([lengths[s] for s in order])
    splits = []
    for name, budget in zip(names, budgets):
        n_lab = int(np.searchsorted(cumulative, budget, side="left")) + 1 if budget > 0 else 0
        n_lab = min(n_lab, len(order))
        splits.append(ProtocolSplit(name, int(budget), order[:n_lab], order[n_lab:], list(test), seed))
    return splits


def fraction_budget(pool: SequencePool, fraction: float, test_events: int | float) -> int:
    """Labeled-event budget equal to ``fraction`` of the events left after the test hold-out."""
    if isinstance(test_events, float) and 0 < test_events < 1:
        test_events = int(round(test_events * pool.total_events()))
    return int(round(fraction * (pool.total_events() - test_events)))


# ---------------------------------------------------------------------------
# batching


@dataclass(frozen=True)
class GapScaler:
    """log1p then standardize, fitted on training gaps (first-event zeros excluded)."""

    mean: float
    std: float

    @classmethod
    def fit(cls, sequences: Sequence[MarkedSequence]) -> "GapScaler":
        if not sequences:
            raise ValueError("cannot fit gap scaler on no sequences")
        logs = np.log1p(np.concatenate([np.diff(s.times) for s in sequences]))
        std = float(logs.std())
        return cls(float(logs.mean()), std if std > 0 else 1.0)

    def transform(self, gaps: np.ndarray) -> np.ndarray:
        return (np.log1p(gaps) - self.mean) / self.std

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return np.expm1(z * self.std + self.mean)

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std}


@dataclass
class Batch:
    """Padded, masked view of a group of sequences (``B`` rows, ``T`` = longest)."""

    seq_ids: list[str]
    gaps: np.ndarray      # [B, T] raw inter-event gaps, 0 at padding
    features: np.ndarray  # [B, T] scaled gaps, 0 at padding
    markers: np.ndarray   # [B, T] class ids, -1 where absent or padded
    mask: np.ndarray      # [B, T] 1.0 on real events
    labeled: np.ndarray   # [B] bool

    @property
    def size(self) -> int:
        return len(self.seq_ids)

    @property
    def max_len(self) -> int:
        return self.mask.shape[1]

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1).astype(np.int64)


def make_batch(sequences: Sequence[MarkedSequence], scaler: GapScaler) -> Batch:
    B = len(sequences)
    T = max(len(s) for s in sequences)
    gaps = np.zeros((B, T))
    feats = np.zeros((B, T))
    markers = np.full((B, T), -1, dtype=np.int64)
    mask = np.zeros((B, T))
    labeled = np.zeros(B, dtype=bool)
    for b, s in enumerate(sequences):
        k = len(s)
        g = s.gaps()
        gaps[b, :k] = g
        feats[b, :k] = scaler.transform(g)
        mask[b, :k] = 1.0
        if s.markers is not None:
            markers[b, :k] = s.markers
            labeled[b] = True
    return Batch([s.seq_id for s in sequences], gaps, feats, markers, mask, labeled)


def batch_iter(sequences: Sequence[MarkedSequence], batch_size: int, scaler: GapScaler,
               rng: np.random.Generator | None = None) -> Iterator[Batch]:
    """One epoch of batches, shuffled by ``rng`` when given (else in order)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(sequences)) if rng is None else rng.permutation(len(sequences))
    for lo in range(0, len(order), batch_size):
        yield make_batch([sequences[j] for j in order[lo: lo + batch_size]], scaler)


def cycle_batches(sequences: Sequence[MarkedSequence], batch_size: int, scaler: GapScaler,
                  rng: np.random.Generator) -> Iterator[Batch]:
    """Endless reshuffled batch stream; empty input yields nothing."""
    if not sequences:
        return
    while True:
        yield from batch_iter(sequences, batch_size, scaler, rng)
