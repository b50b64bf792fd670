//! Synthetic four-questions-per-image benchmark: scene rendering, question
//! quads built from two reversal pairs, dataset balancing and validation,
//! and the question-diversity diagnostic.

pub mod dataset;
pub mod diversity;
pub mod questions;
pub mod record;
pub mod scene;
pub mod validate;

pub use dataset::{
    generate_dataset, load_dataset, read_records, write_dataset, Dataset, GenConfig,
};
pub use diversity::{diversity_matrix, pair_similarity_stats};
pub use questions::{generate_question_quad, grammar_words};
pub use record::{MM4Record, PairGroup, Question};
pub use scene::{generate_scene, Color, Scene, SceneConfig, ShapeKind};
pub use validate::{validate_dataset, DatasetReport, ValidateOptions, ViolationKind};
