//! Character-level SMILES variational autoencoders trained jointly with
//! descriptor predictors, QSAR models over their latent embeddings, and
//! latent-space diagnostics.

pub mod chem_data;
pub mod descriptors;
pub mod neural;
pub mod stats;
pub mod seeding;
pub mod qsar;
pub mod vae;
pub mod latent;
pub mod pipelines;
