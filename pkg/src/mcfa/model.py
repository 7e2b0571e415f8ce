"""End-to-end classifier assembly for the three operating modes (plain
concatenation, L2-regularized concatenation, and context fixing), the
training loop (Adadelta, dropout, max-norm, early stopping), ensembling,
and model persistence."""

from __future__ import annotations

import json
import struct
from collections import namedtuple
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import (
    PAD,
    PAD_TOKEN,
    UNK_TOKEN,
    Batch,
    DatasetSplit,
    EmbeddingTable,
    MultiViewDataset,
    MultiViewExample,
    Vocabulary,
    batch_iter,
    pad_tokens,
)
from .encoder import EncoderParams, encode
from .errors import ConfigError, DataError, FormatError, McfaError, ShapeError, TrainingAbort
from .fixing import FixReport, McfaParams, mcfa_forward
from .numerics import (
    AdadeltaState,
    GradTape,
    Tensor,
    add,
    backward,
    broadcast_scale,
    concat,
    cross_entropy,
    hadamard,
    matmul,
    max_norm_rescale,
    softmax,
    sum_all,
    adadelta_step,
)

MODES = ("b1", "b2", "mcfa")
MAGIC = b"MCFA1\n"

LogEntry = namedtuple("LogEntry", ["epoch", "train_loss", "dev_acc"])
Prediction = namedtuple("Prediction", ["index", "label", "pred", "probs"])


@dataclass
class TrainConfig:
    """Training protocol knobs; defaults follow the reference protocol
    (batch 50, dropout 0.5, max-norm 3, ten-percent dev carve)."""

    batch_size: int = 50
    dropout_rate: float = 0.5
    max_norm_c: float = 3.0
    rho: float = 0.95
    epsilon: float = 1e-6
    l2_lambda: float = 1e-4
    max_epochs: int = 50
    patience: int = 10
    seed: int = 0
    dev_fraction: float = 0.10

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0,1), got {self.dropout_rate}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if not 0.0 < self.dev_fraction < 0.5:
            raise ConfigError(f"dev_fraction must be in (0,0.5), got {self.dev_fraction}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.rho < 1.0:
            raise ConfigError(f"rho must be in (0,1), got {self.rho}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.max_norm_c <= 0:
            raise ConfigError(f"max_norm_c must be positive, got {self.max_norm_c}")


@dataclass
class ModelConfig:
    """Encoder geometry and embedding handling."""

    d_word: int = 50
    n_maps: int = 100
    window_sizes: tuple[int, ...] = (3, 4, 5)
    train_embeddings: bool = True

    def __post_init__(self):
        self.window_sizes = tuple(int(h) for h in self.window_sizes)
        if not self.window_sizes:
            raise ConfigError("window_sizes must be non-empty")


@dataclass
class ModelBundle:
    """Everything one trained classifier needs to run."""

    mode: str
    view_names: list[str]
    vocabs: list[Vocabulary]
    embeddings: list[EmbeddingTable]
    encoders: list[EncoderParams]
    fixer: McfaParams | None
    cls_w: Tensor
    cls_b: Tensor
    n_classes: int
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if (self.mode == "mcfa") != (self.fixer is not None):
            raise ConfigError("fixing parameters must be present exactly in mcfa mode")

    @property
    def n_views(self) -> int:
        return len(self.view_names)

    @property
    def encoder_dim(self) -> int:
        return self.encoders[0].output_dim

    def tensor_table(self) -> list[tuple[str, Tensor]]:
        """Canonical (name, tensor) order used by persistence and training."""
        table: list[tuple[str, Tensor]] = []
        for k, emb in enumerate(self.embeddings):
            table.append((f"emb/{k}", emb.matrix))
        for k, enc in enumerate(self.encoders):
            for h, w, b in zip(enc.window_sizes, enc.filters, enc.biases):
                table.append((f"enc/{k}/w{h}", w))
                table.append((f"enc/{k}/b{h}", b))
        if self.fixer is not None:
            for k in range(self.fixer.n_views):
                table.append((f"fix/self/{k}", self.fixer.self_scorers[k]))
                table.append((f"fix/attn/{k}", self.fixer.attn_projs[k]))
                table.append((f"fix/ctx/{k}", self.fixer.ctx_projs[k]))
                table.append((f"fix/gate/{k}", self.fixer.gate_weights[k]))
            table.append(("fix/score", self.fixer.score_vec))
        table.append(("cls/w", self.cls_w))
        table.append(("cls/b", self.cls_b))
        return table

    def trainable_params(self) -> list[tuple[str, Tensor]]:
        train_emb = self.config.get("train_embeddings", True)
        return [
            (name, t)
            for name, t in self.tensor_table()
            if train_emb or not name.startswith("emb/")
        ]


def build_bundle(
    dataset: MultiViewDataset,
    mode: str,
    mcfg: ModelConfig,
    seed: int,
    embeddings: Sequence[EmbeddingTable] | None = None,
) -> ModelBundle:
    """Fresh bundle: random encoders, neutral fixer, zero classifier."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 11])))
    n_views = len(dataset.view_names)
    if embeddings is None:
        embeddings = [
            EmbeddingTable.random(k, len(dataset.vocabs[k]), mcfg.d_word, seed)
            for k in range(n_views)
        ]
    else:
        embeddings = list(embeddings)
        for k, emb in enumerate(embeddings):
            if emb.matrix.shape[0] != len(dataset.vocabs[k]):
                raise DataError(
                    f"view {k}: embedding rows {emb.matrix.shape[0]} != vocab size {len(dataset.vocabs[k])}"
                )
            if emb.d_word != mcfg.d_word:
                raise DataError(f"view {k}: embedding width {emb.d_word} != d_word {mcfg.d_word}")
    encoders = [
        EncoderParams.init(mcfg.d_word, rng, mcfg.window_sizes, mcfg.n_maps)
        for _ in range(n_views)
    ]
    d = encoders[0].output_dim
    fixer = McfaParams.init(n_views, d, rng) if mode == "mcfa" else None
    # Zero classifier start: an untrained bundle predicts uniform probabilities.
    cls_w = Tensor(np.zeros((n_views * d, dataset.n_classes)))
    cls_b = Tensor(np.zeros(dataset.n_classes))
    config = {
        "mode": mode,
        "d_word": mcfg.d_word,
        "n_maps": mcfg.n_maps,
        "window_sizes": list(mcfg.window_sizes),
        "train_embeddings": mcfg.train_embeddings,
    }
    return ModelBundle(
        mode=mode,
        view_names=list(dataset.view_names),
        vocabs=list(dataset.vocabs),
        embeddings=embeddings,
        encoders=encoders,
        fixer=fixer,
        cls_w=cls_w,
        cls_b=cls_b,
        n_classes=dataset.n_classes,
        config=config,
    )


# ---------------------------------------------------------------------------
# Forward / loss


def make_dropout_mask(rng: np.random.Generator, size: int, rate: float) -> Tensor:
    """Inverted dropout mask: entries are 0 or 1/keep, so inference needs
    no rescaling."""
    keep = 1.0 - rate
    return Tensor((rng.random(size) >= rate).astype(np.float64) / keep)


def _example_token_rows(bundle: ModelBundle, example, min_len: int) -> list[np.ndarray]:
    if isinstance(example, MultiViewExample):
        if example.n_views != bundle.n_views:
            raise ShapeError(
                f"example has {example.n_views} views, model expects {bundle.n_views}"
            )
        return [pad_tokens(toks, min_len) for toks in example.tokens]
    rows = list(example)
    if len(rows) != bundle.n_views:
        raise ShapeError(f"got {len(rows)} token rows, model expects {bundle.n_views}")
    return rows


def _features(
    bundle: ModelBundle,
    example,
    training: bool = False,
    rng: np.random.Generator | None = None,
    tape: GradTape | None = None,
    gate_override: Sequence[Tensor] | None = None,
) -> tuple[Tensor, FixReport | None]:
    min_len = max(e.max_window for e in bundle.encoders)
    rows = _example_token_rows(bundle, example, min_len)
    rate = float(bundle.config.get("dropout_rate", 0.0)) if training else 0.0
    use_dropout = training and rate > 0.0 and rng is not None
    d = bundle.encoder_dim
    report = None
    if bundle.mode == "mcfa":
        vectors = []
        for k in range(bundle.n_views):
            mask = make_dropout_mask(rng, d, rate) if use_dropout else None
            vectors.append(encode(rows[k], bundle.embeddings[k], bundle.encoders[k], mask, tape))
        report = mcfa_forward(vectors, bundle.fixer, tape, gate_override)
        feat = concat(report.altered, tape)
        if use_dropout:
            feat = hadamard(feat, make_dropout_mask(rng, feat.size, rate), tape)
    else:
        vectors = [
            encode(rows[k], bundle.embeddings[k], bundle.encoders[k], None, tape)
            for k in range(bundle.n_views)
        ]
        feat = concat(vectors, tape)
        if use_dropout:
            feat = hadamard(feat, make_dropout_mask(rng, feat.size, rate), tape)
    return feat, report


def _logits(bundle: ModelBundle, feat: Tensor, tape: GradTape | None = None) -> Tensor:
    return add(matmul(feat, bundle.cls_w, tape), bundle.cls_b, tape)


def forward(
    bundle: ModelBundle,
    example,
    training: bool = False,
    rng: np.random.Generator | None = None,
    tape: GradTape | None = None,
    gate_override: Sequence[Tensor] | None = None,
) -> Tensor:
    """Class probabilities for one example (sum to 1, strictly positive)."""
    feat, _ = _features(bundle, example, training, rng, tape, gate_override)
    return softmax(_logits(bundle, feat, tape), tape)


def forward_report(bundle: ModelBundle, example) -> tuple[Tensor, FixReport | None]:
    """Inference probabilities plus the fixing report (mcfa mode only)."""
    feat, report = _features(bundle, example)
    return softmax(_logits(bundle, feat)), report


def loss(
    bundle: ModelBundle,
    batch: Batch | Sequence[MultiViewExample],
    cfg: TrainConfig,
    tape: GradTape | None = None,
    rng: np.random.Generator | None = None,
    training: bool = True,
) -> Tensor:
    """Mean cross-entropy over the batch; b2 adds l2_lambda * ||cls_w||^2."""
    if isinstance(batch, Batch):
        items = [(batch.example_tokens(r), int(batch.labels[r])) for r in range(len(batch))]
    else:
        items = [(ex, ex.label) for ex in batch]
    if not items:
        raise DataError("loss over an empty batch")
    ces = []
    for example, label in items:
        feat, _ = _features(bundle, example, training, rng, tape)
        ces.append(cross_entropy(_logits(bundle, feat, tape), label, tape))
    mean = matmul(concat(ces, tape), Tensor(np.full(len(ces), 1.0 / len(ces))), tape)
    if bundle.mode == "b2" and cfg.l2_lambda != 0.0:
        penalty = sum_all(hadamard(bundle.cls_w, bundle.cls_w, tape), tape)
        mean = add(mean, broadcast_scale(penalty, cfg.l2_lambda, tape), tape)
    return mean


# ---------------------------------------------------------------------------
# Training


def _snapshot(bundle: ModelBundle) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in bundle.tensor_table()}


def _restore(bundle: ModelBundle, snap: dict[str, np.ndarray]) -> None:
    for name, t in bundle.tensor_table():
        t.data[...] = snap[name]


def train(
    dataset: MultiViewDataset,
    split: DatasetSplit,
    mode: str,
    cfg: TrainConfig,
    mcfg: ModelConfig | None = None,
    embeddings: Sequence[EmbeddingTable] | None = None,
    on_step: Callable[[ModelBundle, int], None] | None = None,
) -> tuple[ModelBundle, list[LogEntry]]:
    """Train one model on split.train, early-stopping on split.dev.

    Deterministic: (seed, config, data) fixes the batch order, dropout
    masks, initial weights, and therefore the entire log. Returns the
    best-dev snapshot (ties keep the earliest epoch).
    """
    mcfg = mcfg or ModelConfig()
    bundle = build_bundle(dataset, mode, mcfg, cfg.seed, embeddings)
    bundle.config.update(
        {"dropout_rate": cfg.dropout_rate, "seed": cfg.seed, "train": asdict(cfg)}
    )
    if not split.train:
        raise DataError("empty training split")
    if not split.dev:
        raise DataError("empty dev split")

    states = {
        name: AdadeltaState(t, cfg.rho, cfg.epsilon) for name, t in bundle.trainable_params()
    }
    root = np.random.SeedSequence([cfg.seed, 23])
    drop_seq, batch_seq = root.spawn(2)
    drop_rng = np.random.Generator(np.random.PCG64(drop_seq))
    batch_seed = int(batch_seq.generate_state(1)[0])
    min_len = max(e.max_window for e in bundle.encoders)

    log: list[LogEntry] = []
    best_acc = -1.0
    best_snap = _snapshot(bundle)
    stale = 0
    step = 0
    dev_examples = [dataset.examples[i] for i in split.dev]
    for epoch in range(1, cfg.max_epochs + 1):
        ce_total = 0.0
        seen = 0
        for b, batch in enumerate(
            batch_iter(dataset.examples, split.train, cfg.batch_size, batch_seed, epoch, min_len)
        ):
            tape = GradTape()
            params = bundle.trainable_params()
            for name, p in params:
                tape.watch(p, name)
            try:
                batch_loss = loss(bundle, batch, cfg, tape, drop_rng)
                value = batch_loss.item()
                grads = backward(tape, batch_loss)
            except McfaError as err:
                raise TrainingAbort(
                    f"non-finite loss at epoch {epoch}, batch {b}: {err}"
                ) from err
            for name, p in params:
                g = grads[p]
                if name.startswith("emb/"):
                    g[PAD] = 0.0  # PAD embedding stays frozen at zero
                adadelta_step(p, g, states[name])
            bundle.cls_w.data[...] = max_norm_rescale(bundle.cls_w, cfg.max_norm_c).data
            step += 1
            ce_total += value * len(batch)
            seen += len(batch)
            if on_step is not None:
                on_step(bundle, step)
        dev_acc, _ = evaluate(bundle, dev_examples)
        log.append(LogEntry(epoch=epoch, train_loss=ce_total / seen, dev_acc=dev_acc))
        if dev_acc > best_acc:
            best_acc = dev_acc
            best_snap = _snapshot(bundle)
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    _restore(bundle, best_snap)
    return bundle, log


def evaluate(
    bundle: ModelBundle, examples: Sequence[MultiViewExample], indices: Sequence[int] | None = None
) -> tuple[float, list[Prediction]]:
    """Accuracy plus per-example predictions; argmax ties go to the lowest
    class id; dropout is off."""
    if not examples:
        raise DataError("empty split")
    idx = list(indices) if indices is not None else list(range(len(examples)))
    preds = []
    correct = 0
    for i, ex in zip(idx, examples):
        probs = forward(bundle, ex).data
        pred = int(np.argmax(probs))
        correct += int(pred == ex.label)
        preds.append(Prediction(index=i, label=ex.label, pred=pred, probs=probs))
    return correct / len(examples), preds


def ensemble_predict(bundles: Sequence[ModelBundle], examples) -> np.ndarray:
    """Average the class probability vectors of several models.

    `examples` is either one example shared by all bundles or one
    re-encoded example per bundle (when vocabularies differ).
    """
    if not bundles:
        raise DataError("ensemble of zero models")
    n_classes = bundles[0].n_classes
    for b in bundles[1:]:
        if b.n_classes != n_classes:
            raise DataError(f"class count mismatch: {n_classes} vs {b.n_classes}")
    if isinstance(examples, MultiViewExample):
        examples = [examples] * len(bundles)
    if len(examples) != len(bundles):
        raise DataError(f"{len(bundles)} models but {len(examples)} examples")
    probs = np.stack([forward(b, ex).data for b, ex in zip(bundles, examples)])
    return probs.mean(axis=0)


# ---------------------------------------------------------------------------
# Persistence


def save(bundle: ModelBundle, path: str) -> None:
    """Binary model file: magic, JSON header, then raw little-endian
    float64 tensors in header order."""
    table = bundle.tensor_table()
    header = {
        "mode": bundle.mode,
        "views": bundle.view_names,
        "n_classes": bundle.n_classes,
        "config": bundle.config,
        "vocabs": [v.tokens for v in bundle.vocabs],
        "tensors": [[name, list(t.shape)] for name, t in table],
    }
    blob = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, t in table:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load(path: str) -> ModelBundle:
    """Read a model file back; any inconsistency raises FormatError and no
    partial bundle is returned."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic[:5]!r}; expected {MAGIC[:5].decode()}")
        raw_len = fh.read(8)
        if len(raw_len) != 8:
            raise FormatError("truncated file: missing header length")
        (header_len,) = struct.unpack("<Q", raw_len)
        blob = fh.read(header_len)
        if len(blob) != header_len:
            raise FormatError("truncated file: incomplete header")
        try:
            header = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as err:
            raise FormatError(f"unreadable header: {err}") from err
        tensors: dict[str, Tensor] = {}
        for name, shape in header["tensors"]:
            shape = tuple(int(s) for s in shape)
            nbytes = int(np.prod(shape)) * 8
            chunk = fh.read(nbytes)
            if len(chunk) != nbytes:
                raise FormatError(f"truncated file: tensor {name} incomplete")
            tensors[name] = Tensor(np.frombuffer(chunk, dtype="<f8").reshape(shape).copy())
        if fh.read(1):
            raise FormatError("trailing data after tensor payload")
    return _rebuild(header, tensors)


def _rebuild(header: dict, tensors: dict[str, Tensor]) -> ModelBundle:
    try:
        mode = header["mode"]
        views = list(header["views"])
        n_classes = int(header["n_classes"])
        config = dict(header["config"])
        vocab_tokens = header["vocabs"]
    except KeyError as err:
        raise FormatError(f"header missing field {err}") from err
    window_sizes = tuple(int(h) for h in config.get("window_sizes", (3, 4, 5)))
    n_maps = int(config.get("n_maps", 100))
    d_word = int(config.get("d_word", 50))
    vocabs = []
    for toks in vocab_tokens:
        if toks[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise FormatError("vocabulary does not start with PAD/UNK rows")
        vocabs.append(Vocabulary(toks[2:]))
    try:
        embeddings = [
            EmbeddingTable(view=k, matrix=tensors[f"emb/{k}"], d_word=d_word)
            for k in range(len(views))
        ]
        encoders = [
            EncoderParams(
                window_sizes=window_sizes,
                n_maps=n_maps,
                filters=[tensors[f"enc/{k}/w{h}"] for h in window_sizes],
                biases=[tensors[f"enc/{k}/b{h}"] for h in window_sizes],
            )
            for k in range(len(views))
        ]
        fixer = None
        if mode == "mcfa":
            fixer = McfaParams(
                self_scorers=[tensors[f"fix/self/{k}"] for k in range(len(views))],
                attn_projs=[tensors[f"fix/attn/{k}"] for k in range(len(views))],
                ctx_projs=[tensors[f"fix/ctx/{k}"] for k in range(len(views))],
                gate_weights=[tensors[f"fix/gate/{k}"] for k in range(len(views))],
                score_vec=tensors["fix/score"],
            )
        bundle = ModelBundle(
            mode=mode,
            view_names=views,
            vocabs=vocabs,
            embeddings=embeddings,
            encoders=encoders,
            fixer=fixer,
            cls_w=tensors["cls/w"],
            cls_b=tensors["cls/b"],
            n_classes=n_classes,
            config=config,
        )
    except (KeyError, DataError, ConfigError) as err:
        raise FormatError(f"inconsistent model file: {err}") from err
    if bundle.cls_b.shape != (n_classes,):
        raise FormatError(
            f"classifier bias shape {bundle.cls_b.shape} != class count {n_classes}"
        )
    return bundle
