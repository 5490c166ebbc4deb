"""Collaborative distillation for encoder-decoder style transfer."""

__version__ = "0.1.0"

from .architectures import (
    ArchSpec,
    Network,
    build_encoder,
    build_mirror_decoder,
    count_flops,
    count_macs,
    count_params,
    estimate_peak_activation_memory,
    init_student_from_teacher,
    preset,
    select_filters_l1,
)
from .checkpoint import Checkpoint
from .data import Corpus, load_corpus
from .errors import (
    CollabDistillError,
    ConfigurationError,
    DataError,
    DegenerateFeatureError,
    DivergenceError,
    InfeasibleError,
    PreconditionError,
    SpecificationError,
)
from .losses import EmbeddingMap, LossWeights
from .stylize import ModelBundle, StageModel, StylizationRequest, gatys_stylize, probe_max_resolution, stylize
from .training import HyperParams, collaborative_distill, cross_pair_experiment, train_decoder
from .transforms import adain_transfer, gram, style_distance, wct_transfer
