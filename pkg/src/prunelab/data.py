"""Deterministic synthetic sequence-classification tasks.

Three rules with closed-form labels, so any emitted example can be
re-checked against its tokens:

* parity: label = (number of occurrences of token 1) mod 2
* majority: bucket each token as ``token mod num_classes``; the label is
  the most frequent bucket, ties to the lower class
* pattern: label 1 iff a fixed 3-token motif (drawn once per task seed)
  appears contiguously; positives get the motif planted

Labels always come from the rule applied to the drawn tokens; the sampler
only shapes the proposal distribution.  Majority proposals lean toward one
bucket per example, because uniform draws pile up at the count boundary
where the margin is a single token and nothing desk-sized can learn it.
Parity proposals thin token 1 for the mirror-image reason: uniform draws
put most of the mass on counts {0, 1, 2}, so the label hinges on telling
one occurrence from two.  Thinned, the count is almost surely 0 or 1 and
the rule reduces to presence detection, which small models do learn.

Splits are label-balanced by quota sampling and train/eval disjoint by
membership check.  Everything is a pure function of the TaskSpec.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError

TASK_KINDS = ("parity", "majority", "pattern")

# Majority proposals draw a token from the leaned-toward bucket this many
# times more often than from any other, putting the typical count gap a few
# standard deviations clear of the tie line.
MAJORITY_LEAN = 2.5

# Parity proposals weight token 1 at this fraction of any other token, so
# at the reference shape (vocab 32, seq 32) the expected count is ~0.2 and
# two occurrences in one sequence are a rare event.
PARITY_THIN = 0.2


@dataclass
class TaskSpec:
    kind: str
    vocab_size: int
    seq_len: int
    num_classes: int
    train_size: int
    eval_size: int
    seed: int

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.train_size < 1 or self.eval_size < 1:
            raise ConfigError("train_size and eval_size must be >= 1")
        if self.kind == "parity":
            if self.num_classes != 2:
                raise ConfigError("parity is a 2-class task")
            if self.vocab_size < 2:
                raise ConfigError("parity needs token 1 in the vocabulary")
        elif self.kind == "majority":
            if self.num_classes < 2:
                raise ConfigError("majority needs at least 2 classes")
            if self.vocab_size < self.num_classes:
                raise ConfigError("majority needs vocab_size >= num_classes")
        elif self.kind == "pattern":
            if self.num_classes != 2:
                raise ConfigError("pattern is a 2-class task")
            if self.vocab_size < 2:
                raise ConfigError("pattern needs at least 2 distinct tokens")
            if self.seq_len < 3:
                raise ConfigError("pattern needs seq_len >= 3 for the motif")


@dataclass
class Dataset:
    tokens: np.ndarray
    labels: np.ndarray
    motif: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.labels)


def parity_label(seq: np.ndarray) -> int:
    return int(np.count_nonzero(seq == 1) % 2)


def majority_label(seq: np.ndarray, num_classes: int) -> int:
    counts = np.bincount(seq % num_classes, minlength=num_classes)
    return int(np.argmax(counts))  # argmax takes the lower class on ties


def pattern_label(seq: np.ndarray, motif: np.ndarray) -> int:
    k = len(motif)
    for i in range(len(seq) - k + 1):
        if np.array_equal(seq[i:i + k], motif):
            return 1
    return 0


def label_of(seq: np.ndarray, spec: TaskSpec, motif: Optional[np.ndarray]) -> int:
    if spec.kind == "parity":
        return parity_label(seq)
    if spec.kind == "majority":
        return majority_label(seq, spec.num_classes)
    return pattern_label(seq, motif)


def task_motif(spec: TaskSpec) -> Optional[np.ndarray]:
    if spec.kind != "pattern":
        return None
    rng = T.seeded_rng(spec.seed ^ 0x5EED)
    return rng.integers(0, spec.vocab_size, size=3, dtype=np.int64)


def _quota(n: int, num_classes: int) -> List[int]:
    base, extra = divmod(n, num_classes)
    return [base + (1 if c < extra else 0) for c in range(num_classes)]


def _lean_probs(spec: TaskSpec, lean_class: int) -> np.ndarray:
    residues = np.arange(spec.vocab_size) % spec.num_classes
    weights = np.where(residues == lean_class, MAJORITY_LEAN, 1.0)
    return weights / weights.sum()


def _thin_probs(spec: TaskSpec) -> np.ndarray:
    weights = np.ones(spec.vocab_size)
    weights[1] = PARITY_THIN
    return weights / weights.sum()


def _fill_split(spec: TaskSpec, rng, n: int, motif, taken: set) -> Dataset:
    quota = _quota(n, spec.num_classes)
    tokens = np.empty((n, spec.seq_len), dtype=np.int64)
    labels = np.empty(n, dtype=np.int64)
    filled = 0
    want_positive = 0  # pattern only: interleave planted positives
    attempts = 0
    limit = 500 * n + 1000
    while filled < n:
        attempts += 1
        if attempts > limit:
            raise DataError(
                f"{spec.kind}: could not draw {n} distinct balanced examples "
                f"from vocab {spec.vocab_size}, seq {spec.seq_len}")
        if spec.kind == "majority":
            open_classes = [c for c in range(spec.num_classes) if quota[c] > 0]
            lean = open_classes[int(rng.integers(0, len(open_classes)))]
            seq = rng.choice(spec.vocab_size, size=spec.seq_len,
                             p=_lean_probs(spec, lean)).astype(np.int64)
        elif spec.kind == "parity":
            seq = rng.choice(spec.vocab_size, size=spec.seq_len,
                             p=_thin_probs(spec)).astype(np.int64)
        else:
            seq = rng.integers(0, spec.vocab_size, size=spec.seq_len, dtype=np.int64)
        if spec.kind == "pattern" and quota[1] > 0 and want_positive:
            pos = int(rng.integers(0, spec.seq_len - len(motif) + 1))
            seq[pos:pos + len(motif)] = motif
        y = label_of(seq, spec, motif)
        if quota[y] <= 0:
            if spec.kind == "pattern":
                want_positive = 1 if quota[1] > 0 else 0
            continue
        key = seq.tobytes()
        if key in taken:
            continue
        taken.add(key)
        tokens[filled] = seq
        labels[filled] = y
        quota[y] -= 1
        filled += 1
        if spec.kind == "pattern":
            want_positive = 1 if quota[1] >= quota[0] else 0
    return Dataset(tokens=tokens, labels=labels, motif=motif)


def generate(spec: TaskSpec) -> Tuple[Dataset, Dataset]:
    """Build the train and eval splits; same spec always gives same bytes."""
    motif = task_motif(spec)
    rng = T.seeded_rng(spec.seed)
    taken: set = set()
    train = _fill_split(spec, rng, spec.train_size, motif, taken)
    evals = _fill_split(spec, rng, spec.eval_size, motif, taken)
    return train, evals


def batches(ds: Dataset, batch_size: int, seed: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """One epoch: seeded shuffle, full batches only (remainder dropped)."""
    order = T.seeded_rng(seed).permutation(len(ds))
    for start in range(0, len(ds) - batch_size + 1, batch_size):
        idx = order[start:start + batch_size]
        yield ds.tokens[idx], ds.labels[idx]


def batch_stream(ds: Dataset, batch_size: int, seed: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Endless epochs, epoch e shuffled with seed + e."""
    epoch = 0
    while True:
        yield from batches(ds, batch_size, seed + epoch)
        epoch += 1


def eval_batches(ds: Dataset, batch_size: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Fixed order, remainder kept: every example scored exactly once."""
    for start in range(0, len(ds), batch_size):
        yield ds.tokens[start:start + batch_size], ds.labels[start:start + batch_size]


def export_text(ds: Dataset, path: str) -> None:
    """Line format: space-separated tokens, a tab, then the label."""
    with open(path, "w") as fh:
        for seq, y in zip(ds.tokens, ds.labels):
            fh.write(" ".join(str(t) for t in seq) + f"\t{y}\n")
