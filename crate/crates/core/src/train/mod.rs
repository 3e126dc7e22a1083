//! Training orchestration: denoising pretraining, the alternating
//! comparative/evaluator updates, the two baselines, validation-based model
//! selection and resumable checkpoints.

pub mod checkpoint;
pub mod config;
pub mod experiment;
pub mod export;
pub mod losses;
pub mod metrics;
pub mod trainer;

pub use checkpoint::load_checkpoint_params;
pub use config::{apply_flat_text, flat_keys, flat_text, set_key, Mode, TrainConfig};
pub use experiment::{branch, gold_metrics, pretrain, sweep_k, GoldMetrics, SweepRow, SWEEP_CSV_HEADER};
pub use export::{ModelCard, Translator};
pub use losses::{comparative_loss, evaluator_loss, prepare_candidates, selection_score, Candidates, RankingBatch};
pub use metrics::{metrics_csv, window_means, write_metrics, MetricsRow, CSV_HEADER};
pub use trainer::{init_rng, BestRecord, TrainState, Trainer};
