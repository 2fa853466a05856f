"""Neural networks with exact derivative bundles."""

from .network import (
    DerivativeBundle,
    MlpConfig,
    MlpNetwork,
    backend_name,
    forward,
    init_network,
    input_derivatives,
    load_weights,
    parameter_gradient,
    save_weights,
    weights_from_bytes,
    weights_to_bytes,
)

__all__ = [
    "DerivativeBundle",
    "MlpConfig",
    "MlpNetwork",
    "backend_name",
    "forward",
    "init_network",
    "input_derivatives",
    "load_weights",
    "parameter_gradient",
    "save_weights",
    "weights_from_bytes",
    "weights_to_bytes",
]
