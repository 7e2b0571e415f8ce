"""Per-view convolutional sentence encoder: filters over word windows,
ReLU, max-over-time pooling, concatenation into one fixed-width vector."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import EmbeddingTable
from .errors import ShapeError
from .numerics import (
    GradTape,
    Tensor,
    activation,
    add,
    concat,
    embed_windows,
    hadamard,
    matmul,
    max_over_time,
    transpose,
)


@dataclass
class EncoderParams:
    """Filter banks W_h [n_maps, h*d_word] and biases b_h [n_maps], one
    pair per window size; output width is n_maps * len(window_sizes)."""

    window_sizes: tuple[int, ...]
    n_maps: int
    filters: list[Tensor]
    biases: list[Tensor]

    @property
    def output_dim(self) -> int:
        return self.n_maps * len(self.window_sizes)

    @property
    def max_window(self) -> int:
        return max(self.window_sizes)

    @classmethod
    def init(
        cls,
        d_word: int,
        rng: np.random.Generator,
        window_sizes: tuple[int, ...] = (3, 4, 5),
        n_maps: int = 100,
    ) -> "EncoderParams":
        filters, biases = [], []
        for h in window_sizes:
            fan_in = h * d_word
            bound = np.sqrt(6.0 / (fan_in + n_maps))
            filters.append(Tensor(rng.uniform(-bound, bound, size=(n_maps, fan_in))))
            biases.append(Tensor(np.zeros(n_maps)))
        return cls(window_sizes=tuple(window_sizes), n_maps=n_maps, filters=filters, biases=biases)


@dataclass
class SentenceVector:
    """Encoded sentence for one view; entries are >= 0 (ReLU then max)."""

    view: int
    vector: Tensor


def conv_feature_map(
    token_ids,
    emb: EmbeddingTable,
    filt: Tensor,
    bias: Tensor,
    tape: GradTape | None = None,
) -> Tensor:
    """ReLU feature map [n_maps, L-h+1]; column t covers tokens t..t+h-1."""
    window = filt.shape[1] // emb.d_word
    if window * emb.d_word != filt.shape[1]:
        raise ShapeError(
            f"filter width {filt.shape[1]} is not a multiple of d_word {emb.d_word}"
        )
    windows = embed_windows(token_ids, emb.matrix, window, tape)
    z = add(matmul(windows, transpose(filt, tape), tape), bias, tape)
    return transpose(activation(z, "relu", tape), tape)


def encode(
    token_ids,
    emb: EmbeddingTable,
    params: EncoderParams,
    dropout_mask: Tensor | None = None,
    tape: GradTape | None = None,
) -> Tensor:
    """Concatenate the pooled feature maps for every window size, in order."""
    pooled = []
    for filt, bias in zip(params.filters, params.biases):
        fmap = conv_feature_map(token_ids, emb, filt, bias, tape)
        pooled.append(max_over_time(fmap, tape))
    v = concat(pooled, tape)
    if dropout_mask is not None:
        v = hadamard(v, dropout_mask, tape)
    return v
