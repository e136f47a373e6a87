"""Collaboratively trained multi-depth streaming transducer models.

One shared-trunk encoder grows several branch stacks of different depths;
all branches train jointly on a transducer loss plus frame-level class
supervision and branch-to-teacher distribution matching. Any branch can
be extracted afterwards as a standalone streaming recognizer.
"""

from .autodiff import GraphNode, Tensor, backpropagate, evaluate_graph, zero_gradients
from .data import (
    FeaturePipelineConfig,
    SyntheticCorpusConfig,
    Utterance,
    align_to_encoder_rate,
    band_reference,
    generate_corpus,
    read_corpus,
    stack_frames,
    write_corpus,
)
from .decoding import greedy_decode, greedy_loop, token_error_rate
from .distill import (
    FactorToggles,
    LossBreakdown,
    LossWeights,
    ce_frame_loss,
    kl_codistill_loss,
    select_teacher,
    total_loss,
)
from .errors import (
    BandDisconnectedError,
    BranchIndexError,
    ConfigError,
    NonFiniteError,
    NonFiniteLossError,
    ShapeMismatchError,
)
from .gradcheck import GradCheckReport, check_gradients
from .model import (
    BranchSpec,
    CollabModelParams,
    EncoderConfig,
    ModelConfig,
    algorithmic_latency,
    build_attention_mask,
    count_params,
    effective_depth,
    encode,
    encode_streaming,
    extract_branch,
    forward_branches,
    init_params,
    join,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from .optim import OptimizerState, adam_step, warmup_lr
from .training import (
    RunConfig,
    default_run_config,
    load_run_config,
    save_run_config,
    train_run,
    utterance_loss,
)
from .transducer import (
    AlignmentBand,
    ar_transducer_loss,
    brute_force_loss,
    build_band,
    lattice_consistency,
    transducer_loss,
    transducer_loss_node,
)

__version__ = "0.1.0"
