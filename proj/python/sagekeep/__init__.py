"""Adversarial token-importance maps and significance-preserving augmentation.

The heavy lifting lives in the C++ extension; this package re-exports it.
"""

from sagekeep._core import (  # noqa: F401
    DataError,
    ImportanceMap,
    KeepConfig,
    NumericError,
    OracleNet,
    SageConfig,
    SyntheticTask,
    anneal,
    augment_spec_from_json,
    brute_force_importance,
    keep_augment,
    load_weights,
    make_default_oracle,
    overlap_metrics,
    read_kct1,
    read_kcw1,
    run_sage,
    save_weights,
    surface_distances,
    synth_dataset,
    write_kct1,
    write_kcw1,
)

__all__ = [
    "DataError",
    "ImportanceMap",
    "KeepConfig",
    "NumericError",
    "OracleNet",
    "SageConfig",
    "SyntheticTask",
    "anneal",
    "augment_spec_from_json",
    "brute_force_importance",
    "keep_augment",
    "load_weights",
    "make_default_oracle",
    "overlap_metrics",
    "read_kct1",
    "read_kcw1",
    "run_sage",
    "save_weights",
    "surface_distances",
    "synth_dataset",
    "write_kct1",
    "write_kcw1",
]
