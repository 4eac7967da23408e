//! Dataset loading, synthesis, splitting, and augmentation.

pub mod augment;
pub mod record;
pub mod split;
pub mod synthetic;

pub use augment::{augment_once, augment_pair, resize_plain, AugmentConfig, ViewPair};
pub use record::{load_manifest, save_manifest, DatasetManifest, ImageRecord};
pub use split::{
    check_stratification, stratified_participant_split, SplitSpec,
    DEFAULT_STRATIFICATION_TOLERANCE_PP,
};
pub use synthetic::{default_lesions, generate_synthetic_dataset, MIN_IMAGE_SIZE};
