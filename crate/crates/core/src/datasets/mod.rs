//! Synthetic data generation, image preprocessing and augmentation, and
//! grayscale PNG input/output.

pub mod io;
pub mod preprocess;
pub mod synthetic;

pub use io::{load_gray, quantize, save_gray};
pub use preprocess::{augment, preprocess, AugmentPolicy, PreprocessPolicy};
pub use synthetic::{generate_in_memory, generate_synthetic, BandSpec, ClassSpec, Direction, SyntheticRecipe};
