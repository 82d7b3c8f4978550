//! Training, evaluation, ablation and artifact export.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod export;
pub mod optim;
pub mod train;

pub use ablation::{run_ablation, AblationAxis, AblationTable};
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use data::LoadedData;
pub use eval::{episodic_loss, evaluate, EvalReport};
pub use export::export_embeddings;
pub use train::{train, TrainOutcome};
