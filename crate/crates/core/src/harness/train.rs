//! Model construction, Adam, and one session of training.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{G2gError, Result};
use crate::gnn::{interact, InteractiveFeature, Interactor};
use crate::matrix::Matrix;
use crate::memory::ExplicitMemory;
use crate::objectives::{total_loss, Batch, LossContext, LossReport};
use crate::params::{ParamId, ParamStore};
use crate::pipeline::{synthetic_augment, Pipeline, RawFeature};

use super::config::Config;
use super::dataset::EmbeddingDataset;
use super::session::{Exemplar, RehearsalBuffer, Role, SessionSpec};

/// Pipeline and interactor sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub pipeline: Pipeline,
    pub interactor: Interactor,
}

impl Model {
    /// Seeded from `train.seed`; the pipeline registers its parameters first.
    pub fn build(cfg: &Config, d_h: usize, tokens: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let pipeline = Pipeline::new(cfg.pipeline_config(d_h, tokens), &mut store, &mut rng)?;
        let interactor = Interactor::new(cfg.interactor_config(), &mut store, &mut rng)?;
        Ok(Model {
            store,
            pipeline,
            interactor,
        })
    }

    pub fn context<'a>(&'a self, memory: &'a ExplicitMemory) -> LossContext<'a> {
        LossContext {
            store: &self.store,
            pipeline: &self.pipeline,
            interactor: &self.interactor,
            memory,
        }
    }

    pub fn feature(&self, h: &Matrix) -> Result<InteractiveFeature> {
        interact(&RawFeature::new(h.clone(), None), &self.pipeline, &self.interactor, &self.store)
    }

    /// `ξ` for many inputs, evaluated in parallel, returned in input order.
    pub fn features(&self, hs: &[&Matrix]) -> Result<Vec<InteractiveFeature>> {
        hs.par_iter().map(|h| self.feature(h)).collect()
    }
}

/// Which tensor an Adam moment belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Slot {
    Param(usize),
    Prototype(u32),
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Adam with bias correction. Each slot counts its own steps.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    moments: BTreeMap<Slot, Moments>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            moments: BTreeMap::new(),
        }
    }

    pub fn from_config(cfg: &Config) -> Self {
        Self::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    }

    pub fn step(&mut self, slot: Slot, value: &mut [f64], grad: &[f64]) {
        assert_eq!(value.len(), grad.len(), "adam step on mismatched lengths");
        let s = self.moments.entry(slot).or_insert_with(|| Moments {
            m: vec![0.0; grad.len()],
            v: vec![0.0; grad.len()],
            t: 0,
        });
        s.t += 1;
        let c1 = 1.0 - self.beta1.powi(s.t);
        let c2 = 1.0 - self.beta2.powi(s.t);
        for i in 0..grad.len() {
            let g = grad[i];
            s.m[i] = self.beta1 * s.m[i] + (1.0 - self.beta1) * g;
            s.v[i] = self.beta2 * s.v[i] + (1.0 - self.beta2) * g * g;
            let mh = s.m[i] / c1;
            let vh = s.v[i] / c2;
            value[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }

    pub fn steps(&self, slot: Slot) -> i32 {
        self.moments.get(&slot).map_or(0, |m| m.t)
    }
}

/// Epochs, prototype phase and optimizer of one session.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub proto_iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl TrainSchedule {
    pub fn from_config(cfg: &Config, epochs: usize) -> Result<Self> {
        if cfg.proto_iters > epochs {
            return Err(G2gError::Config(format!(
                "train.proto_iters = {} exceeds the session's {epochs} epochs",
                cfg.proto_iters
            )));
        }
        Ok(TrainSchedule {
            epochs,
            proto_iters: cfg.proto_iters,
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            seed: cfg.seed,
        })
    }
}

/// Everything a protocol run carries between sessions.
#[derive(Clone, Debug)]
pub struct EngineState {
    pub config: Config,
    pub d_h: usize,
    pub tokens: usize,
    pub model: Model,
    pub memory: ExplicitMemory,
    pub buffer: RehearsalBuffer,
    /// Class lists of the completed sessions, in order.
    pub sessions: Vec<Vec<u32>>,
}

impl EngineState {
    pub fn new(config: Config, d_h: usize, tokens: usize) -> Result<Self> {
        config.validate()?;
        let model = Model::build(&config, d_h, tokens)?;
        let memory = ExplicitMemory::new(config.segments, config.d_xi)?;
        Ok(EngineState {
            config,
            d_h,
            tokens,
            model,
            memory,
            buffer: RehearsalBuffer::new(),
            sessions: Vec::new(),
        })
    }

    pub fn completed(&self) -> usize {
        self.sessions.len()
    }

    /// Classes of sessions `1..=t`.
    pub fn classes_through(&self, t: usize) -> BTreeSet<u32> {
        self.sessions.iter().take(t).flatten().copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionLog {
    pub index: usize,
    pub role: Role,
    pub classes: Vec<u32>,
    /// Session samples plus replayed exemplars.
    pub stream_len: usize,
    /// Sample-weighted mean total loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub last: Option<LossReport>,
    pub seconds: f64,
}

#[derive(Clone, Copy)]
enum Item {
    Sample(usize),
    Exemplar(u32),
}

fn session_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Trains session `spec` on `train` and commits it to `state`: new
/// prototypes start at their class-mean `ξ`, the stream is the session's
/// samples plus one exemplar per earlier class, prototypes move only during
/// the first `proto_iters` epochs, and at the end the session's prototypes
/// are frozen and one exemplar per new class is stored.
pub fn run_session(state: &mut EngineState, spec: &SessionSpec, train: &EmbeddingDataset) -> Result<SessionLog> {
    let started = Instant::now();
    if spec.index != state.completed() + 1 {
        return Err(G2gError::Config(format!(
            "session {} requested after {} completed sessions",
            spec.index,
            state.completed()
        )));
    }
    if let Some(&c) = spec.classes.iter().find(|&&c| state.memory.contains(c)) {
        return Err(G2gError::SessionOverlap { session: spec.index, class: c });
    }
    if (train.d_h, train.tokens) != (state.d_h, state.tokens) {
        return Err(G2gError::shape(
            "run_session",
            format!(
                "training data is {}x{}, model expects {}x{}",
                train.d_h, train.tokens, state.d_h, state.tokens
            ),
        ));
    }
    let sched = TrainSchedule::from_config(&state.config, spec.epochs)?;
    let indices = spec.sample_indices(train);
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for &i in &indices {
        by_class.entry(train.records[i].label).or_default().push(i);
    }
    if let Some(&c) = spec.classes.iter().find(|c| !by_class.contains_key(c)) {
        return Err(G2gError::Config(format!(
            "session {} has no training samples of class {c}",
            spec.index
        )));
    }

    let mut rng = session_rng(sched.seed, spec.index);
    for (&y, members) in &by_class {
        let hs: Vec<&Matrix> = members.iter().map(|&i| &train.records[i].base).collect();
        let feats = state.model.features(&hs)?;
        let mut mean = vec![0.0; state.memory.dim()];
        for f in &feats {
            mean.iter_mut().zip(&f.xi).for_each(|(a, b)| *a += b);
        }
        mean.iter_mut().for_each(|v| *v /= feats.len() as f64);
        state.memory.add_class(y, spec.index as u16, Some(&mean), &mut rng)?;
    }

    let mut stream: Vec<Item> = indices.iter().map(|&i| Item::Sample(i)).collect();
    stream.extend(state.buffer.iter().map(|(c, _)| Item::Exemplar(c)));
    let (lambda, eta) = (state.config.lambda, state.config.eta);
    let (aug_factor, rehearsal_aug) = (state.config.aug_factor, state.config.rehearsal_aug);
    let mut adam = Adam::new(sched.lr, sched.beta1, sched.beta2, sched.eps);
    let mut epoch_loss = Vec::with_capacity(sched.epochs);
    let mut last = None;
    let mut order: Vec<usize> = (0..stream.len()).collect();

    for epoch in 0..sched.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(sched.batch_size) {
            let mut feats = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            let mut augs = Vec::with_capacity(chunk.len());
            for &k in chunk {
                let (label, h, stored) = match stream[k] {
                    Item::Sample(i) => {
                        let r = &train.records[i];
                        (r.label, &r.base, r.augmented.as_ref())
                    }
                    Item::Exemplar(c) => {
                        let e = state.buffer.get(c).expect("buffer entry listed in stream");
                        (c, &e.h, e.augmented.as_ref().filter(|_| rehearsal_aug))
                    }
                };
                if eta > 0.0 {
                    augs.push(match stored {
                        Some(a) => a.clone(),
                        None => synthetic_augment(h, aug_factor, &mut rng),
                    });
                }
                feats.push(h.clone());
                labels.push(label);
            }
            let batch = Batch::new(feats, labels, (eta > 0.0).then_some(augs))?;
            let (report, grads) = total_loss(state.model.context(&state.memory), &batch, lambda, eta)?;
            if !report.total.is_finite() {
                return Err(G2gError::NonFinite("training loss"));
            }
            sum += report.total * batch.len() as f64;
            last = Some(report);

            for (i, g) in grads.params.iter().enumerate() {
                if let Some(g) = g {
                    let p = state.model.store.get_mut(ParamId(i));
                    if p.trainable {
                        adam.step(Slot::Param(i), p.value.data_mut(), g.data());
                    }
                }
            }
            if epoch < sched.proto_iters {
                for (&y, g) in &grads.prototypes {
                    if let Some(m) = state.memory.trainable_mut(y)? {
                        adam.step(Slot::Prototype(y), m, g);
                    }
                }
            }
        }
        epoch_loss.push(sum / stream.len() as f64);
    }

    state.memory.freeze_session(&spec.classes)?;
    for (&y, members) in &by_class {
        let r = &train.records[members[0]];
        state.buffer.insert(
            y,
            Exemplar {
                h: r.base.clone(),
                augmented: r.augmented.clone(),
            },
        )?;
    }
    state.sessions.push(spec.classes.clone());
    Ok(SessionLog {
        index: spec.index,
        role: spec.role,
        classes: spec.classes.clone(),
        stream_len: stream.len(),
        epoch_loss,
        last,
        seconds: started.elapsed().as_secs_f64(),
    })
}
