//! The whole protocol: data, every session, evaluation after each.

use super::config::Config;
use super::dataset::{load_embeddings, synth_generate, EmbeddingDataset, Split, SynthSpec};
use super::eval::{compute_metrics, evaluate, EvalReport, Metrics};
use super::session::plan_sessions;
use super::train::{run_session, EngineState, SessionLog};
use crate::error::{G2gError, Result};

/// Synthetic generator settings implied by a config.
pub fn synth_spec(cfg: &Config) -> SynthSpec {
    SynthSpec {
        classes: cfg.total_classes(),
        train_per_class: cfg.synth.train_per_class,
        test_per_class: cfg.synth.test_per_class,
        d_h: cfg.synth.d_h,
        tokens: cfg.synth.tokens,
        sigma: cfg.synth.sigma,
        aug_sigma: cfg.synth.aug_sigma,
        seed: cfg.synth.seed,
    }
}

/// Train and test sets: the configured files, or the synthetic generator.
pub fn load_data(cfg: &Config) -> Result<(EmbeddingDataset, EmbeddingDataset)> {
    let (train, test) = match (&cfg.train_path, &cfg.test_path) {
        (Some(a), Some(b)) => (
            load_embeddings(a, Split::Train, cfg.segments)?,
            load_embeddings(b, Split::Test, cfg.segments)?,
        ),
        _ => synth_generate(&synth_spec(cfg))?,
    };
    train.check_segments(cfg.segments)?;
    if (train.d_h, train.tokens) != (test.d_h, test.tokens) {
        return Err(G2gError::Config(format!(
            "train features are {}x{}, test features are {}x{}",
            train.d_h, train.tokens, test.d_h, test.tokens
        )));
    }
    Ok((train, test))
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub state: EngineState,
    pub logs: Vec<SessionLog>,
    pub evals: Vec<EvalReport>,
    /// Accuracies in percent.
    pub metrics: Metrics,
}

/// Runs every planned session and evaluates `E^(t)` after each one.
/// `after_session` sees the state right after session `t` is evaluated.
pub fn run_protocol_with(
    cfg: &Config,
    train: &EmbeddingDataset,
    test: &EmbeddingDataset,
    mut after_session: impl FnMut(&EngineState, &SessionLog, &EvalReport) -> Result<()>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    train.check_segments(cfg.segments)?;
    let plan = plan_sessions(cfg, train)?;
    let mut state = EngineState::new(cfg.clone(), train.d_h, train.tokens)?;
    let mut logs = Vec::with_capacity(plan.len());
    let mut evals = Vec::with_capacity(plan.len());
    for spec in &plan {
        let log = run_session(&mut state, spec, train)?;
        let report = evaluate(&state, test, spec.index)?;
        after_session(&state, &log, &report)?;
        logs.push(log);
        evals.push(report);
    }
    let accs: Vec<f64> = evals.iter().map(|e| 100.0 * e.accuracy()).collect();
    let mut metrics = compute_metrics(&accs)?;
    metrics.seconds = logs.iter().map(|l| l.seconds).collect();
    Ok(RunOutcome {
        state,
        logs,
        evals,
        metrics,
    })
}

pub fn run_protocol(cfg: &Config, train: &EmbeddingDataset, test: &EmbeddingDataset) -> Result<RunOutcome> {
    run_protocol_with(cfg, train, test, |_, _, _| Ok(()))
}
