"""Direct white-matter tract segmentation from diffusion MRI.

The package fits a compact spherical-harmonics representation to each
voxel's diffusion signal, predicts multi-label tract probability maps
from it, averages predictions over resampled measurement subsets, and
scores the disagreement between those predictions to flag scans whose
segmentation should not be trusted.
"""

from .core import (
    BinaryMask,
    Grid3,
    GridMismatchError,
    Volume,
    argmax_threshold_binarize,
    check_same_grid,
    resample_cubic,
    voxel_coords,
    voxel_index,
)
from .dwi_io import (
    BadMagicError,
    GradientFormatError,
    NiftiError,
    TruncatedFileError,
    UnsupportedDatatypeError,
    read_gradients,
    read_nifti,
    write_gradients,
    write_nifti,
)
from .model import (
    AdamState,
    LogEntry,
    PatchSpec,
    Predictor,
    ReferenceModel,
    TrainConfig,
    TrainingDivergenceError,
    TtaResult,
    adam_step,
    load_checkpoint,
    mean_prediction,
    save_checkpoint,
    sliding_window_predict,
    soft_dice_grad,
    soft_dice_loss,
    train_reference,
    tta_predict,
    tta_subsets,
    write_train_log,
)
from .phantom import (
    CurvedTube,
    DiffusionTensor,
    PhantomOutput,
    PhantomSpec,
    TractComponent,
    Tube,
    default_crossing_spec,
    simulate,
    tensor_signal,
)
from .qspace import (
    DegeneratePairError,
    GradientTable,
    InsufficientDirectionsError,
    SubsetSelection,
    disjoint_subsets,
    electrostatic_energy,
    random_subset,
    select_subset,
    sh_design_condition,
)
from .segmetrics import (
    DetectionStats,
    SegScores,
    UndefinedMetricError,
    assd,
    detection_stats,
    dsc,
    evaluate_masks,
    hd95,
    spearman,
    surface_voxels,
)
from .shfit import (
    FitError,
    ShBasis,
    b0_normalize,
    design_matrix,
    fit_sh,
    sh_basis_row,
    sh_basis_values,
    sh_reconstruct,
)
from .uncertainty import (
    MassMismatchError,
    ReportEntry,
    TractUncertainty,
    UncertaintyReport,
    UnfoldedMass,
    ZeroMassError,
    baseline_scores,
    build_report,
    detect,
    emd3,
    emd_unfolded,
    prepare_mass,
    uncertainty_u,
    unfold,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "BadMagicError",
    "BinaryMask",
    "CurvedTube",
    "DegeneratePairError",
    "DetectionStats",
    "DiffusionTensor",
    "FitError",
    "GradientFormatError",
    "GradientTable",
    "Grid3",
    "GridMismatchError",
    "InsufficientDirectionsError",
    "LogEntry",
    "MassMismatchError",
    "NiftiError",
    "PatchSpec",
    "PhantomOutput",
    "PhantomSpec",
    "Predictor",
    "ReferenceModel",
    "ReportEntry",
    "SegScores",
    "ShBasis",
    "SubsetSelection",
    "TractComponent",
    "TractUncertainty",
    "TrainConfig",
    "TrainingDivergenceError",
    "TruncatedFileError",
    "TtaResult",
    "Tube",
    "UncertaintyReport",
    "UndefinedMetricError",
    "UnfoldedMass",
    "UnsupportedDatatypeError",
    "Volume",
    "ZeroMassError",
    "adam_step",
    "argmax_threshold_binarize",
    "assd",
    "b0_normalize",
    "baseline_scores",
    "build_report",
    "check_same_grid",
    "default_crossing_spec",
    "design_matrix",
    "detect",
    "detection_stats",
    "disjoint_subsets",
    "dsc",
    "electrostatic_energy",
    "emd3",
    "emd_unfolded",
    "evaluate_masks",
    "fit_sh",
    "hd95",
    "load_checkpoint",
    "mean_prediction",
    "prepare_mass",
    "random_subset",
    "read_gradients",
    "read_nifti",
    "resample_cubic",
    "save_checkpoint",
    "select_subset",
    "sh_basis_row",
    "sh_basis_values",
    "sh_design_condition",
    "sh_reconstruct",
    "simulate",
    "sliding_window_predict",
    "soft_dice_grad",
    "soft_dice_loss",
    "spearman",
    "surface_voxels",
    "tensor_signal",
    "train_reference",
    "tta_predict",
    "tta_subsets",
    "uncertainty_u",
    "unfold",
    "voxel_coords",
    "voxel_index",
    "write_gradients",
    "write_nifti",
    "write_train_log",
]
