"""The context-fixing attachment: per-view self usability, cross-view
relative usability (an extended additive attention), attention-weighted
context integration, and sigmoid-gated vector fixing.

All views play both roles -- source and context -- so each view k owns one
projection matrix for attention scoring and one for context integration,
while a single scoring vector is shared across all pairs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .numerics import (
    GradTape,
    Tensor,
    activation,
    add,
    broadcast_scale,
    concat,
    hadamard,
    matmul,
    softmax,
    stack_rows,
)


@dataclass
class McfaParams:
    """Per-view trainables plus the shared attention scoring vector.

    self_scorers[k]  [d, 1]  -- self-usability scorer
    attn_projs[k]    [d, d]  -- projection for attention scoring
    ctx_projs[k]     [d, d]  -- projection into the common context space
    gate_weights[k]  [2d, d] -- gate from [vector; context]
    score_vec        [d, 1]  -- shared attention scoring vector
    """

    self_scorers: list[Tensor]
    attn_projs: list[Tensor]
    ctx_projs: list[Tensor]
    gate_weights: list[Tensor]
    score_vec: Tensor

    @property
    def n_views(self) -> int:
        return len(self.self_scorers)

    @classmethod
    def init(cls, n_views: int, d: int, rng: np.random.Generator) -> "McfaParams":
        # Projections are Glorot-uniform; scorers start at zero so training
        # begins from neutral usabilities (0.5) and uniform attention.
        def glorot(rows, cols):
            bound = np.sqrt(6.0 / (rows + cols))
            return Tensor(rng.uniform(-bound, bound, size=(rows, cols)))

        return cls(
            self_scorers=[Tensor(np.zeros((d, 1))) for _ in range(n_views)],
            attn_projs=[glorot(d, d) for _ in range(n_views)],
            ctx_projs=[glorot(d, d) for _ in range(n_views)],
            gate_weights=[glorot(2 * d, d) for _ in range(n_views)],
            score_vec=Tensor(np.zeros((d, 1))),
        )


@dataclass
class FixReport:
    """Everything the attachment computed for one example.

    attention_rows[i][j] is how much view j is used when fixing view i;
    each row sums to 1. altered[k] is exactly unaltered[k] * gates[k].
    """

    self_usability: list[Tensor]
    attention_rows: list[Tensor]
    contexts: list[Tensor]
    gates: list[Tensor]
    altered: list[Tensor]
    unaltered: list[Tensor]

    @property
    def attention(self) -> np.ndarray:
        return np.stack([row.data for row in self.attention_rows])

    def self_usability_values(self) -> list[float]:
        return [u.item() for u in self.self_usability]


def self_usability(v: Tensor, scorer: Tensor, tape: GradTape | None = None) -> Tensor:
    """sigmoid(v . scorer): the view's own confidence for the task, in (0,1)."""
    if v.shape[0] != scorer.shape[0]:
        raise ShapeError(f"vector dim {v.shape} vs scorer {scorer.shape}")
    return activation(matmul(v, scorer, tape), "sigmoid", tape)


def relative_usability(
    vectors: Sequence[Tensor],
    rho_self: Sequence[Tensor],
    params: McfaParams,
    tape: GradTape | None = None,
) -> list[Tensor]:
    """Attention rows: row i softmax-normalizes the scores of every view j
    (including i itself) for fixing view i.

    The score is score_vec . tanh(v_i X_i + (v_j X_j) * rho_self(j)); the
    self usability scales only the context role of a view.
    """
    m = len(vectors)
    if len(rho_self) != m:
        raise ShapeError(f"{m} views but {len(rho_self)} self-usability entries")
    src = [matmul(v, params.attn_projs[k], tape) for k, v in enumerate(vectors)]
    ctx = [broadcast_scale(src[k], rho_self[k], tape) for k in range(m)]
    rows = []
    for i in range(m):
        scores = [
            matmul(activation(add(src[i], ctx[j], tape), "tanh", tape), params.score_vec, tape)
            for j in range(m)
        ]
        rows.append(softmax(concat(scores, tape), tape))
    return rows


def integrate_context(
    vectors: Sequence[Tensor],
    attention_rows: Sequence[Tensor],
    params: McfaParams,
    tape: GradTape | None = None,
) -> list[Tensor]:
    """Attention-weighted sum of the views projected into a common space."""
    projected = stack_rows(
        [matmul(v, params.ctx_projs[k], tape) for k, v in enumerate(vectors)], tape
    )
    return [matmul(row, projected, tape) for row in attention_rows]


def fix_vectors(
    vectors: Sequence[Tensor],
    contexts: Sequence[Tensor],
    params: McfaParams,
    tape: GradTape | None = None,
    gate_override: Sequence[Tensor] | None = None,
) -> tuple[list[Tensor], list[Tensor]]:
    """Gate each view by sigmoid([v; c] . gate weights) and attenuate it.

    The gate is strictly inside (0,1) per dimension, so fixing can only
    shrink a dimension, never amplify it or flip its sign. gate_override
    substitutes precomputed gates (used to recover plain concatenation).
    """
    gates, altered = [], []
    for k, (v, c) in enumerate(zip(vectors, contexts)):
        if gate_override is not None:
            gate = gate_override[k]
        else:
            gate = activation(
                matmul(concat([v, c], tape), params.gate_weights[k], tape), "sigmoid", tape
            )
        gates.append(gate)
        altered.append(hadamard(v, gate, tape))
    return gates, altered


def mcfa_forward(
    vectors: Sequence[Tensor],
    params: McfaParams,
    tape: GradTape | None = None,
    gate_override: Sequence[Tensor] | None = None,
) -> FixReport:
    """Full attachment: self usability -> relative usability -> integrated
    context -> gated fixing. Differentiable end to end."""
    if len(vectors) != params.n_views:
        raise ShapeError(f"{len(vectors)} views but params cover {params.n_views}")
    rho = [self_usability(v, params.self_scorers[k], tape) for k, v in enumerate(vectors)]
    rows = relative_usability(vectors, rho, params, tape)
    contexts = integrate_context(vectors, rows, params, tape)
    gates, altered = fix_vectors(vectors, contexts, params, tape, gate_override)
    return FixReport(
        self_usability=rho,
        attention_rows=rows,
        contexts=contexts,
        gates=gates,
        altered=altered,
        unaltered=list(vectors),
    )
