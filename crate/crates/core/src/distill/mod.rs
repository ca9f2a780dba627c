//! Distillation of the flow teacher into a one-step student.

mod chamfer;
mod dataset;
mod imle;

pub use chamfer::{chamfer_distance, chamfer_loss, path_embed, path_matrix, squared_dist};
pub use dataset::{build_distill_dataset, dataset_items, sample_rng, DatasetConfig};
pub use imle::{imle_train_student, student_sample_set, DistillConfig, DistillItem};
