//! Seeded image and text augmentation.

mod image;
mod text;

pub use image::{augment_image, blur_kernel_size, gaussian_blur, ImageAugPolicy};
pub use text::{augment_text, delete_words, swap_words, SynonymTable, TextAugPolicy, TextStrategy};

#[derive(Debug, thiserror::Error)]
pub enum AugmentError {
    #[error("invalid augmentation policy: {0}")]
    Policy(String),
    #[error("cannot augment an empty caption")]
    EmptyCaption,
    #[error("synonym table line {line}: {message}")]
    Synonyms { line: usize, message: String },
    #[error("{0}")]
    Io(String),
}
