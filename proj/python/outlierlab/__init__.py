"""Small masked-language-model toolkit for studying outlier hidden dimensions.

The heavy lifting lives in the C++ extension module ``outlierlab._core``;
this package re-exports its public surface.
"""

from outlierlab._core import (  # noqa: F401
    AblationMask,
    CandidateOutlier,
    Checkpoint,
    CorpusSpec,
    FrequencyTable,
    ModelConfig,
    Scheme,
    TrainConfig,
    TrainingStream,
    __version__,
    apply_tokenization_scheme,
    default_config_text,
    estimate_frequency,
    eval_mlm_loss,
    find_candidates,
    generate_corpus,
    hidden_states,
    load_checkpoint,
    run_command,
    save_checkpoint,
    train_mlm,
)

__all__ = [
    "AblationMask",
    "CandidateOutlier",
    "Checkpoint",
    "CorpusSpec",
    "FrequencyTable",
    "ModelConfig",
    "Scheme",
    "TrainConfig",
    "TrainingStream",
    "apply_tokenization_scheme",
    "default_config_text",
    "estimate_frequency",
    "eval_mlm_loss",
    "find_candidates",
    "generate_corpus",
    "hidden_states",
    "load_checkpoint",
    "run_command",
    "save_checkpoint",
    "train_mlm",
]
