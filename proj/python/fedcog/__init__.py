"""Deterministic federated-learning simulator with consensus-oriented generation."""

from ._core import (
    ConfigError,
    FedcogError,
    FormatError,
    InputError,
    Model,
    NumericError,
    ProtocolError,
    ShapeError,
    aggregate,
    backward,
    complementary_distribution,
    cross_entropy,
    evaluate_accuracy,
    generate,
    gradcheck,
    js_disagreement,
    kl_divergence,
    model_difference,
    normalize_config,
    partition,
    run_experiment,
    secure_aggregate,
    softmax,
    synth_blobs,
    theorem_bound,
)

__all__ = [name for name in dir() if not name.startswith("_")]
