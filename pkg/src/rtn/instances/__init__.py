"""From volumes and centerlines to bags of instance cubes, plus synthetic data."""

from .archive import load_bags, manifest_lines, save_bags
from .cubes import (
    Bag,
    Centerline,
    Instance,
    Volume,
    bag_from_volume,
    crop_cubes,
    extract_cube,
    jitter_augment,
    jitter_cubes,
    sample_positions,
    shift_cube,
)
from .folds import kfold_split
from .synthetic import (
    InstanceKind,
    SignalPatterns,
    SyntheticDataset,
    SyntheticSpec,
    generate_synthetic_dataset,
    mean_intensity_threshold_accuracy,
)

__all__ = [
    "Bag",
    "Centerline",
    "Instance",
    "InstanceKind",
    "SignalPatterns",
    "SyntheticDataset",
    "SyntheticSpec",
    "Volume",
    "bag_from_volume",
    "crop_cubes",
    "extract_cube",
    "generate_synthetic_dataset",
    "jitter_augment",
    "jitter_cubes",
    "kfold_split",
    "load_bags",
    "manifest_lines",
    "mean_intensity_threshold_accuracy",
    "sample_positions",
    "save_bags",
    "shift_cube",
]
