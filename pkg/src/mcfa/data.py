"""Corpus ingestion, vocabularies, embeddings, splits, batching, and the
synthetic multi-view generator used by the desk-scale checks.

Corpus files are UTF-8, one example per line, `LABEL<TAB>tok1 tok2 ...`,
aligned line-by-line across views. Tokenization happens upstream; this
module only consumes pre-tokenized text.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .numerics import Tensor

PAD = 0
UNK = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"


class Vocabulary:
    """Token <-> dense id map for one view; ids 0 and 1 are PAD and UNK."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.tokens: list[str] = [PAD_TOKEN, UNK_TOKEN]
        self.index: dict[str, int] = {PAD_TOKEN: PAD, UNK_TOKEN: UNK}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        idx = self.index.get(token)
        if idx is None:
            idx = len(self.tokens)
            self.index[token] = idx
            self.tokens.append(token)
        return idx

    def lookup(self, token: str) -> int:
        return self.index.get(token, UNK)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.lookup(t) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index


@dataclass
class EmbeddingTable:
    """Per-view word vectors; row 0 (PAD) stays all-zero and frozen."""

    view: int
    matrix: Tensor
    d_word: int

    def __post_init__(self):
        if self.matrix.shape[1] != self.d_word:
            raise DataError(
                f"embedding width {self.matrix.shape[1]} != d_word {self.d_word}"
            )

    @classmethod
    def random(cls, view: int, vocab_size: int, d_word: int, seed: int) -> "EmbeddingTable":
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, view])))
        mat = rng.uniform(-0.25, 0.25, size=(vocab_size, d_word))
        mat[PAD] = 0.0
        return cls(view=view, matrix=Tensor(mat), d_word=d_word)


@dataclass
class RawExample:
    """One labeled instance before id-encoding: token strings per view."""

    label: int
    views: list[list[str]]


@dataclass
class MultiViewExample:
    """One labeled instance: aligned token-id sequences, one per view."""

    label: int
    tokens: list[list[int]]

    @property
    def n_views(self) -> int:
        return len(self.tokens)


@dataclass
class MultiViewDataset:
    """Immutable bundle of encoded examples plus the vocabularies behind them."""

    examples: list[MultiViewExample]
    vocabs: list[Vocabulary]
    view_names: list[str]
    n_classes: int
    raw: list[RawExample] = field(default_factory=list)

    @property
    def labels(self) -> np.ndarray:
        return np.array([ex.label for ex in self.examples], dtype=np.intp)

    def __len__(self) -> int:
        return len(self.examples)


@dataclass
class DatasetSplit:
    """Disjoint train/dev/test index lists; dev is carved from train."""

    train: list[int]
    dev: list[int]
    test: list[int]
    fold: int = 0


# ---------------------------------------------------------------------------
# Corpus files


def read_corpus_files(paths: Sequence[str], view_names: Sequence[str] | None = None) -> list[RawExample]:
    """Parse aligned per-view corpus files into raw examples.

    All files must have the same line count and identical labels per line.
    """
    if not paths:
        raise DataError("no corpus files given")
    names = list(view_names) if view_names else [Path(p).stem for p in paths]
    per_view: list[list[tuple[int, list[str]]]] = []
    for path in paths:
        lines = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh):
                line = line.rstrip("\n")
                if not line:
                    continue
                label_s, _, text = line.partition("\t")
                try:
                    label = int(label_s)
                except ValueError:
                    raise DataError(f"{path}:{lineno + 1}: label {label_s!r} is not an integer") from None
                if label < 0:
                    raise DataError(f"{path}:{lineno + 1}: label must be nonnegative, got {label}")
                lines.append((label, text.split()))
        per_view.append(lines)
    counts = {len(v) for v in per_view}
    if len(counts) != 1:
        detail = ", ".join(f"{p}={len(v)}" for p, v in zip(paths, per_view))
        raise DataError(f"corpus files are not aligned: line counts differ ({detail})")
    examples = []
    for i in range(len(per_view[0])):
        labels = [per_view[v][i][0] for v in range(len(paths))]
        if len(set(labels)) != 1:
            raise DataError(
                f"label disagreement at line {i}: {labels} across files {list(paths)}"
            )
        examples.append(RawExample(label=labels[0], views=[per_view[v][i][1] for v in range(len(paths))]))
    _ = names
    return examples


def build_vocabularies(examples: Sequence[RawExample], n_views: int) -> list[Vocabulary]:
    vocabs = [Vocabulary() for _ in range(n_views)]
    for ex in examples:
        for v, toks in enumerate(ex.views):
            for tok in toks:
                vocabs[v].add(tok)
    return vocabs


def encode_examples(examples: Sequence[RawExample], vocabs: Sequence[Vocabulary]) -> list[MultiViewExample]:
    return [
        MultiViewExample(label=ex.label, tokens=[vocabs[v].encode(toks) for v, toks in enumerate(ex.views)])
        for ex in examples
    ]


def load_parallel_corpus(paths: Sequence[str], view_names: Sequence[str] | None = None) -> MultiViewDataset:
    """Load aligned corpus files; vocabularies are built from these files only."""
    raw = read_corpus_files(paths, view_names)
    names = list(view_names) if view_names else [Path(p).stem for p in paths]
    if len(names) != len(paths):
        raise DataError(f"{len(paths)} files but {len(names)} view names")
    vocabs = build_vocabularies(raw, len(paths))
    n_classes = max(ex.label for ex in raw) + 1 if raw else 0
    return MultiViewDataset(
        examples=encode_examples(raw, vocabs),
        vocabs=vocabs,
        view_names=names,
        n_classes=n_classes,
        raw=raw,
    )


def write_corpus(examples: Sequence[RawExample], paths: Sequence[str]) -> None:
    """Inverse of read_corpus_files: one file per view, `LABEL<TAB>tokens`."""
    n_views = len(examples[0].views) if examples else len(paths)
    if len(paths) != n_views:
        raise DataError(f"{n_views} views but {len(paths)} output paths")
    for v, path in enumerate(paths):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            for ex in examples:
                fh.write(f"{ex.label}\t{' '.join(ex.views[v])}\n")


# ---------------------------------------------------------------------------
# Embeddings


def load_embeddings(path: str, vocab: Vocabulary, view: int = 0, d_word: int | None = None, seed: int = 0) -> EmbeddingTable:
    """Read a text embedding file into a table aligned with `vocab`.

    Vocab tokens found in the file get the stored vector; the rest are
    drawn U(-0.25, 0.25) from a seeded generator (bit-reproducible for a
    fixed seed regardless of file contents). The PAD row is zeroed.
    """
    vectors: dict[str, np.ndarray] = {}
    width: int | None = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            parts = line.rstrip("\n").split(" ")
            parts = [p for p in parts if p]
            if not parts:
                continue
            if lineno == 0 and len(parts) == 2 and all(_is_int(p) for p in parts):
                # optional `COUNT DIM` header
                width = int(parts[1])
                continue
            token, vals = parts[0], parts[1:]
            try:
                vec = np.array([float(v) for v in vals], dtype=np.float64)
            except ValueError:
                raise DataError(f"{path}:{lineno + 1}: non-numeric embedding value") from None
            if width is None:
                width = vec.shape[0]
            elif vec.shape[0] != width:
                raise DataError(
                    f"{path}:{lineno + 1}: vector width {vec.shape[0]} != expected {width}"
                )
            if token in vocab:
                vectors[token] = vec
    if width is None:
        raise DataError(f"{path}: no embedding vectors found")
    if d_word is not None and width != d_word:
        raise DataError(f"{path}: embedding width {width} != configured d_word {d_word}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, view])))
    mat = rng.uniform(-0.25, 0.25, size=(len(vocab), width))
    for token, vec in vectors.items():
        mat[vocab.lookup(token)] = vec
    mat[PAD] = 0.0
    return EmbeddingTable(view=view, matrix=Tensor(mat), d_word=width)


def _is_int(s: str) -> bool:
    try:
        int(s)
    except ValueError:
        return False
    return True


# ---------------------------------------------------------------------------
# Splits


def make_folds(labels: Sequence[int], k: int, seed: int, dev_fraction: float = 0.10) -> list[DatasetSplit]:
    """Stratified k-fold splits with a seeded random dev carve per fold.

    Fold i's test set takes every k-th example of each class after a
    seeded shuffle; dev is a random `dev_fraction` of the remaining train
    indices (at least one example).
    """
    n = len(labels)
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    if n < k:
        raise ConfigError(f"cannot make {k} folds from {n} examples")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    labels_arr = np.asarray(labels)
    fold_test: list[list[int]] = [[] for _ in range(k)]
    for cls in np.unique(labels_arr):
        idx = np.flatnonzero(labels_arr == cls)
        if idx.size < k:
            warnings.warn(
                f"class {cls} has {idx.size} examples for {k} folds; distributing best-effort",
                stacklevel=2,
            )
        idx = rng.permutation(idx)
        for j, example in enumerate(idx):
            fold_test[j % k].append(int(example))
    splits = []
    for i in range(k):
        test = sorted(fold_test[i])
        pool = sorted(set(range(n)) - set(test))
        dev_n = max(1, int(round(dev_fraction * len(pool))))
        dev_pick = rng.permutation(len(pool))[:dev_n]
        dev = sorted(pool[j] for j in dev_pick)
        train = sorted(set(pool) - set(dev))
        splits.append(DatasetSplit(train=train, dev=dev, test=test, fold=i))
    return splits


def fixed_split(n_train: int, n_test: int, seed: int, dev_fraction: float = 0.10) -> DatasetSplit:
    """Split for datasets laid out as train block followed by test block."""
    if n_train < 2:
        raise ConfigError(f"need at least 2 training examples, got {n_train}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    pool = list(range(n_train))
    dev_n = max(1, int(round(dev_fraction * n_train)))
    dev_pick = rng.permutation(n_train)[:dev_n]
    dev = sorted(pool[j] for j in dev_pick)
    train = sorted(set(pool) - set(dev))
    test = list(range(n_train, n_train + n_test))
    return DatasetSplit(train=train, dev=dev, test=test, fold=0)


# ---------------------------------------------------------------------------
# Synthetic generator


@dataclass
class SyntheticConfig:
    """Desk-scale multi-view task: each view carries class signal only for
    its `informative` classes; tokens are corrupted at the view's noise rate."""

    n_views: int
    n_classes: int
    n_examples: int
    informative: list[list[int]]
    noise_rate: float | list[float] = 0.0
    seed: int = 0
    d_word: int = 16
    min_len: int = 6
    max_len: int = 12
    signal_tokens: int = 4
    filler_tokens: int = 20
    noise_tokens: int = 200

    def noise_rates(self) -> list[float]:
        if isinstance(self.noise_rate, (int, float)):
            return [float(self.noise_rate)] * self.n_views
        rates = [float(r) for r in self.noise_rate]
        if len(rates) != self.n_views:
            raise ConfigError(f"{len(rates)} noise rates for {self.n_views} views")
        return rates

    def validate(self) -> None:
        if len(self.informative) != self.n_views:
            raise ConfigError(
                f"informative mask has {len(self.informative)} entries for {self.n_views} views"
            )
        covered = set()
        for classes in self.informative:
            covered.update(classes)
        missing = [c for c in range(self.n_classes) if c not in covered]
        if missing:
            raise ConfigError(f"classes {missing} are informative in no view")
        self.noise_rates()


def gen_synthetic(cfg: SyntheticConfig) -> MultiViewDataset:
    """Generate a deterministic labeled multi-view corpus.

    Labels cycle over classes. In a view informative for the label, at
    least one exclusive signal token `s<class>_<j>` is guaranteed and the
    rest mix signal and filler; otherwise the view emits fillers only.
    Corruption replaces tokens with draws from a wide per-view noise
    inventory, so a high-noise view is dominated by rare random tokens.
    """
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed])))
    rates = cfg.noise_rates()
    raw: list[RawExample] = []
    for i in range(cfg.n_examples):
        label = i % cfg.n_classes
        views = []
        for v in range(cfg.n_views):
            length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
            toks = []
            if label in cfg.informative[v]:
                for _ in range(length):
                    if rng.random() < 0.5:
                        toks.append(f"s{label}_{rng.integers(cfg.signal_tokens)}")
                    else:
                        toks.append(f"f{rng.integers(cfg.filler_tokens)}")
                slot = int(rng.integers(length))
                toks[slot] = f"s{label}_{rng.integers(cfg.signal_tokens)}"
            else:
                toks = [f"f{rng.integers(cfg.filler_tokens)}" for _ in range(length)]
            rate = rates[v]
            if rate > 0:
                for j in range(length):
                    if rng.random() < rate:
                        toks[j] = f"n{rng.integers(cfg.noise_tokens)}"
            views.append(toks)
        raw.append(RawExample(label=label, views=views))
    vocabs = build_vocabularies(raw, cfg.n_views)
    return MultiViewDataset(
        examples=encode_examples(raw, vocabs),
        vocabs=vocabs,
        view_names=[f"v{v}" for v in range(cfg.n_views)],
        n_classes=cfg.n_classes,
        raw=raw,
    )


# ---------------------------------------------------------------------------
# Batching


@dataclass
class Batch:
    """One shuffled mini-batch with per-view padding to the batch maximum."""

    indices: np.ndarray
    labels: np.ndarray
    view_tokens: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.indices)

    def example_tokens(self, row: int) -> list[np.ndarray]:
        return [vt[row] for vt in self.view_tokens]


def pad_tokens(ids: Sequence[int], min_len: int) -> np.ndarray:
    out = np.full(max(min_len, len(ids)), PAD, dtype=np.intp)
    out[: len(ids)] = ids
    return out


def batch_iter(
    examples: Sequence[MultiViewExample],
    indices: Sequence[int],
    batch_size: int,
    seed: int,
    epoch: int,
    min_len: int = 5,
):
    """Yield shuffled padded batches; order is keyed by (seed, epoch).

    Within a batch, each view is padded with PAD to that batch's maximum
    length for the view, and never below `min_len` so the largest filter
    window always fits.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, epoch])))
    order = rng.permutation(np.asarray(indices, dtype=np.intp))
    n_views = examples[order[0]].n_views if len(order) else 0
    for start in range(0, len(order), batch_size):
        chunk = order[start : start + batch_size]
        view_tokens = []
        for v in range(n_views):
            width = max(min_len, max(len(examples[i].tokens[v]) for i in chunk))
            mat = np.full((len(chunk), width), PAD, dtype=np.intp)
            for r, i in enumerate(chunk):
                toks = examples[i].tokens[v]
                mat[r, : len(toks)] = toks
            view_tokens.append(mat)
        yield Batch(
            indices=chunk.copy(),
            labels=np.array([examples[i].label for i in chunk], dtype=np.intp),
            view_tokens=view_tokens,
        )
