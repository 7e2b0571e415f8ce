"""Multi-view sentence classification with usability-gated context fixing.

A sentence and its translations are encoded per view by a small
convolutional encoder; an attachment scores how usable each view is,
attends across views, and multiplicatively fixes each sentence vector
before classification. Ships with plain-concatenation and L2-regularized
baselines, a training protocol (Adadelta, dropout, max-norm, early
stopping), and interpretation tooling.
"""

from .data import (
    EmbeddingTable,
    MultiViewDataset,
    MultiViewExample,
    SyntheticConfig,
    Vocabulary,
    gen_synthetic,
    load_embeddings,
    load_parallel_corpus,
    make_folds,
)
from .encoder import EncoderParams, encode
from .errors import (
    ConfigError,
    DataError,
    FormatError,
    McfaError,
    NonFiniteError,
    ShapeError,
    TrainingAbort,
)
from .fixing import FixReport, McfaParams, mcfa_forward
from .model import (
    ModelBundle,
    ModelConfig,
    TrainConfig,
    build_bundle,
    ensemble_predict,
    evaluate,
    forward,
    load,
    save,
    train,
)
from .numerics import GradTape, Tensor, backward

__version__ = "0.1.0"
