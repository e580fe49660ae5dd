//! Augmented LR/HR patch datasets and the `F4D1` container they are stored in.

pub mod augment;
pub mod build;
pub mod container;
pub mod patch;

pub use augment::{Augmentation, AugmentationPolicy};
pub use build::{
    build_dataset, build_into, simulate_lr, synthetic_frames, BuildConfig, DatasetManifest, DatasetPlan,
    DatasetSinks, HrFrame, LrFrame, SourceInfo, SourceInput, SourceRole, SplitCounts,
};
pub use container::{
    read_dataset, read_volumes, write_dataset, write_volumes, ContainerHeader, ContainerReader, ContainerWriter,
    RecordKind, VolumeRecord,
};
pub use patch::{normalize_pair, rotate_patch, PatchPair, RawPatch, RightAngle, HR_PATCH, LR_PATCH};
