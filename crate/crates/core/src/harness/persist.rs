//! Parameter and run-state files.
//!
//! A run directory holds `config.txt`, one `session_<t>/` snapshot per
//! completed session (`params.bin`, `memory.bin`, `state.bin`), and the
//! report files `accuracies.csv` and `metrics.txt`.
//!
//! ```text
//! params.bin  "G2GPAR1" u32 version=1 u32 count
//!             count x { u32 len, name bytes, u32 rows, u32 cols, u8 trainable, f64[rows*cols] }
//! state.bin   "G2GSTA1" u32 version=1 u32 d_h u32 L
//!             u32 sessions, each { u32 n, u32[n] classes }
//!             u32 exemplars, each { u32 class, u8 has_aug, f64[d_h*L] [, f64[d_h*L]] }
//! ```

use std::path::{Path, PathBuf};

use crate::codec::{write_atomic, Reader, Writer};
use crate::error::{G2gError, Result};
use crate::matrix::Matrix;
use crate::memory::ExplicitMemory;
use crate::params::ParamStore;

use super::config::Config;
use super::eval::{EvalReport, Metrics};
use super::session::{Exemplar, RehearsalBuffer};
use super::train::{EngineState, Model};

const PARAMS_MAGIC: &[u8; 7] = b"G2GPAR1";
const STATE_MAGIC: &[u8; 7] = b"G2GSTA1";
const VERSION: u32 = 1;

fn version(r: &mut Reader, what: &'static str) -> Result<()> {
    let found = r.u32("version")?;
    if found != VERSION {
        return Err(G2gError::Version { what, found, expected: VERSION });
    }
    Ok(())
}

pub fn params_to_bytes(store: &ParamStore) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(PARAMS_MAGIC);
    w.u32(VERSION);
    w.u32(store.len() as u32);
    for (_, p) in store.iter() {
        w.string(&p.name);
        w.u32(p.value.rows() as u32);
        w.u32(p.value.cols() as u32);
        w.u8(p.trainable as u8);
        w.f64s(p.value.data());
    }
    w.buf
}

/// Overwrites every parameter of `store` from `bytes`. The file must name
/// exactly the store's parameters, with the same shapes.
pub fn params_from_bytes(store: &mut ParamStore, bytes: &[u8]) -> Result<()> {
    let mut r = Reader::new(bytes, "parameter file");
    r.magic(PARAMS_MAGIC)?;
    version(&mut r, "parameter file")?;
    let count = r.u32("count")? as usize;
    if count != store.len() {
        return Err(G2gError::Config(format!(
            "parameter file has {count} tensors, model has {}",
            store.len()
        )));
    }
    for _ in 0..count {
        let name = r.string("name")?;
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let trainable = r.u8("trainable")? != 0;
        let data = r.f64s(rows * cols, "values")?;
        let p = store
            .by_name_mut(&name)
            .ok_or_else(|| G2gError::Config(format!("parameter file names unknown tensor {name:?}")))?;
        if p.value.shape() != (rows, cols) {
            return Err(G2gError::shape(
                "load parameters",
                format!("{name} is {rows}x{cols} in the file, {:?} in the model", p.value.shape()),
            ));
        }
        p.value = Matrix::from_vec(rows, cols, data)?;
        p.trainable = trainable;
    }
    r.finish()
}

fn state_to_bytes(state: &EngineState) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(STATE_MAGIC);
    w.u32(VERSION);
    w.u32(state.d_h as u32);
    w.u32(state.tokens as u32);
    w.u32(state.sessions.len() as u32);
    for s in &state.sessions {
        w.u32(s.len() as u32);
        s.iter().for_each(|&c| w.u32(c));
    }
    w.u32(state.buffer.len() as u32);
    for (c, e) in state.buffer.iter() {
        w.u32(c);
        w.u8(e.augmented.is_some() as u8);
        w.f64s(e.h.data());
        if let Some(a) = &e.augmented {
            w.f64s(a.data());
        }
    }
    w.buf
}

struct StateFile {
    d_h: usize,
    tokens: usize,
    sessions: Vec<Vec<u32>>,
    buffer: RehearsalBuffer,
}

fn state_from_bytes(bytes: &[u8]) -> Result<StateFile> {
    let mut r = Reader::new(bytes, "state file");
    r.magic(STATE_MAGIC)?;
    version(&mut r, "state file")?;
    let d_h = r.u32("d_h")? as usize;
    let tokens = r.u32("L")? as usize;
    let n_sessions = r.u32("session count")?;
    let mut sessions = Vec::new();
    for _ in 0..n_sessions {
        let n = r.u32("class count")?;
        sessions.push((0..n).map(|_| r.u32("class")).collect::<Result<Vec<u32>>>()?);
    }
    let n_ex = r.u32("exemplar count")?;
    let mut buffer = RehearsalBuffer::new();
    for _ in 0..n_ex {
        let c = r.u32("class")?;
        let has_aug = r.u8("has_aug")? != 0;
        let h = Matrix::from_vec(d_h, tokens, r.f64s(d_h * tokens, "exemplar")?)?;
        let augmented = if has_aug {
            Some(Matrix::from_vec(d_h, tokens, r.f64s(d_h * tokens, "exemplar view")?)?)
        } else {
            None
        };
        buffer.insert(c, Exemplar { h, augmented })?;
    }
    r.finish()?;
    Ok(StateFile {
        d_h,
        tokens,
        sessions,
        buffer,
    })
}

pub fn snapshot_dir(root: &Path, t: usize) -> PathBuf {
    root.join(format!("session_{t}"))
}

impl EngineState {
    /// Writes `params.bin`, `memory.bin` and `state.bin` into `dir`.
    pub fn save_snapshot(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("params.bin"), &params_to_bytes(&self.model.store))?;
        self.memory.save(&dir.join("memory.bin"))?;
        write_atomic(&dir.join("state.bin"), &state_to_bytes(self))
    }

    /// Rebuilds the model from `config` and overwrites it from the snapshot.
    pub fn load_snapshot(config: &Config, dir: &Path) -> Result<Self> {
        let sf = state_from_bytes(&std::fs::read(dir.join("state.bin"))?)?;
        let mut model = Model::build(config, sf.d_h, sf.tokens)?;
        params_from_bytes(&mut model.store, &std::fs::read(dir.join("params.bin"))?)?;
        let memory = ExplicitMemory::load(&dir.join("memory.bin"))?;
        if memory.segments() != config.segments || memory.dim() != config.d_xi {
            return Err(G2gError::Config(format!(
                "memory file is S = {}, d_xi = {}; config says S = {}, d_xi = {}",
                memory.segments(),
                memory.dim(),
                config.segments,
                config.d_xi
            )));
        }
        Ok(EngineState {
            config: config.clone(),
            d_h: sf.d_h,
            tokens: sf.tokens,
            model,
            memory,
            buffer: sf.buffer,
            sessions: sf.sessions,
        })
    }
}

/// `session,samples,accuracy,accuracy_v2v,seconds`, session 0-based,
/// accuracies in percent.
pub fn accuracies_csv(evals: &[EvalReport], metrics: &Metrics) -> String {
    let mut o = String::from("session,samples,accuracy,accuracy_v2v,seconds\n");
    for (i, e) in evals.iter().enumerate() {
        let secs = metrics.seconds.get(i).copied().unwrap_or(f64::NAN);
        o.push_str(&format!(
            "{},{},{:.4},{:.4},{:.3}\n",
            e.session - 1,
            e.samples,
            100.0 * e.accuracy(),
            100.0 * e.accuracy_v2v(),
            secs
        ));
    }
    o
}

/// Writes `config.txt`, `accuracies.csv` and `metrics.txt` under `root`.
pub fn write_reports(root: &Path, config: &Config, evals: &[EvalReport], metrics: &Metrics) -> Result<()> {
    std::fs::create_dir_all(root)?;
    write_atomic(&root.join("config.txt"), config.to_text().as_bytes())?;
    write_atomic(&root.join("accuracies.csv"), accuracies_csv(evals, metrics).as_bytes())?;
    write_atomic(&root.join("metrics.txt"), metrics.to_text().as_bytes())
}
