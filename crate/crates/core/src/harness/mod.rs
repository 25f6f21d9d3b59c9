//! Few-shot class-incremental protocol: embedding data, session plans,
//! rehearsal, training, evaluation on the cumulative test set, metrics,
//! the centre-distance probe and ablation sweeps.

pub mod config;
pub mod dataset;
pub mod eval;
pub mod persist;
pub mod probe;
pub mod run;
pub mod session;
pub mod sweep;
pub mod train;

pub use config::{Config, SynthConfig};
pub use dataset::{load_embeddings, synth_generate, EmbeddingDataset, EmbeddingRecord, Split, SynthSpec};
pub use eval::{compute_metrics, evaluate, EvalReport, Metrics};
pub use persist::{snapshot_dir, write_reports};
pub use probe::{center_distances, probe_centers, ProbeRow, ProbeTable};
pub use run::{load_data, run_protocol, run_protocol_with, synth_spec, RunOutcome};
pub use session::{plan_sessions, validate_sessions, Exemplar, RehearsalBuffer, Role, SessionSpec};
pub use sweep::{parse_values, sweep, Axis, SweepTable};
pub use train::{run_session, Adam, EngineState, Model, SessionLog, Slot, TrainSchedule};
