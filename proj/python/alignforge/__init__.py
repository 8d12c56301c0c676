"""Python bindings for alignforge."""

# In a build tree the compiled module lives in a separate alignforge/ directory.
__path__ = __import__("pkgutil").extend_path(__path__, __name__)

from ._core import (  # noqa: E402
    AuthError,
    CheckpointError,
    DataError,
    LMConfig,
    Model,
    bleu,
    bleu1,
    decode,
    dpo_pair_loss,
    encode,
    kto_value,
    load_config,
    log_sigmoid,
    mock_judge_intensity,
    plan_names,
    rouge_l,
    rouge_n,
    run_all,
    sigmoid,
    synthesize_corpus,
    tokenize,
)

__all__ = [
    "AuthError",
    "CheckpointError",
    "DataError",
    "LMConfig",
    "Model",
    "bleu",
    "bleu1",
    "decode",
    "dpo_pair_loss",
    "encode",
    "kto_value",
    "load_config",
    "log_sigmoid",
    "mock_judge_intensity",
    "plan_names",
    "rouge_l",
    "rouge_n",
    "run_all",
    "sigmoid",
    "synthesize_corpus",
    "tokenize",
]
