//! Interaction sequences, the dual masking sampler, the synthetic generator
//! and dataset files.

pub mod io;
mod mask;
mod synth;
mod types;

pub use io::{corpus_digest, load_dataset, save_dataset};
pub use mask::{sample_mask_plan, sample_mask_plan_with, MaskPlan};
pub use synth::{generate_synthetic, SyntheticConfig};
pub use types::{
    group_by_user, Corpus, CtrExample, FeatureSchema, InteractionEvent, InteractionSequence,
    UserGroup,
};
