"""Cross-subject EEG decoding with learned spatio-temporal masks."""

# Installed layout keeps the extension inside the package; in-tree builds put
# it on sys.path instead.
try:
    from ._ptsm import (
        ConfigError,
        ContractViolation,
        DatasetError,
        Model,
        NumericError,
        __version__,
        compute_metrics,
        config_hash,
        default_config,
        generate,
        gradcheck,
        load_dataset,
        save_dataset,
    )
except ImportError:
    from _ptsm import (
        ConfigError,
        ContractViolation,
        DatasetError,
        Model,
        NumericError,
        __version__,
        compute_metrics,
        config_hash,
        default_config,
        generate,
        gradcheck,
        load_dataset,
        save_dataset,
    )

__all__ = [
    "ConfigError",
    "ContractViolation",
    "DatasetError",
    "Model",
    "NumericError",
    "__version__",
    "compute_metrics",
    "config_hash",
    "default_config",
    "generate",
    "gradcheck",
    "load_dataset",
    "save_dataset",
]
