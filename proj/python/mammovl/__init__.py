"""Vision-language pretraining and BI-RADS fine-tuning for mammography."""

from ._core import (
    ConfigError,
    ContractError,
    DataValidationError,
    ExtractionError,
    IntegrityError,
    NumericalAbort,
    cap_class_counts,
    checkpoint_info,
    contrastive_loss,
    contrastive_loss_grad,
    extract_pairs,
    f1_scores,
    filter_views,
    kfold_split,
    letterbox_geometry,
    load_manifest,
    macro_f1,
    map_label,
    profile_names,
    run_cli,
    similarity_matrix,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "DataValidationError",
    "ExtractionError",
    "IntegrityError",
    "NumericalAbort",
    "cap_class_counts",
    "checkpoint_info",
    "contrastive_loss",
    "contrastive_loss_grad",
    "extract_pairs",
    "f1_scores",
    "filter_views",
    "kfold_split",
    "letterbox_geometry",
    "load_manifest",
    "macro_f1",
    "map_label",
    "profile_names",
    "run_cli",
    "similarity_matrix",
]


def main() -> int:
    """Console entry point mirroring the C++ `mammovl` tool."""
    import sys

    code, out, err = run_cli(sys.argv[1:])
    sys.stdout.write(out)
    sys.stderr.write(err)
    return code
