use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use g2g_core::gnn::Variant;
use g2g_core::harness::persist::accuracies_csv;
use g2g_core::harness::{
    evaluate, load_data, parse_values, probe_centers, run_protocol, run_protocol_with, snapshot_dir, sweep,
    write_reports, Axis, Config, EngineState, RunOutcome,
};
use g2g_core::memory::ExplicitMemory;

#[derive(Parser)]
#[command(name = "g2g", version, about = "Graph-to-graph explicit memory for few-shot class-incremental learning")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every session of a configured protocol.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "g2g-run")]
        out: PathBuf,
    },
    /// Accuracy of a saved session snapshot on its cumulative test set.
    Eval {
        #[arg(long)]
        state: PathBuf,
        /// 1-based session number.
        #[arg(long)]
        session: usize,
    },
    /// Run the protocol on synthetic Gaussian clusters.
    Simulate {
        /// Base-session classes.
        #[arg(long, default_value_t = 10)]
        classes: usize,
        /// Incremental sessions after the base session.
        #[arg(long, default_value_t = 4)]
        sessions: usize,
        #[arg(long, default_value_t = 2)]
        ways: usize,
        #[arg(long, default_value_t = 5)]
        shots: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Config file applied before the flags above.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the generated train.emb and test.emb here.
        #[arg(long)]
        write_data: Option<PathBuf>,
    },
    /// One full run per value of S, lambda or eta.
    Sweep {
        #[arg(long)]
        axis: Axis,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean distance of learned node features to their class centre, per variant.
    ProbeCenters {
        #[arg(long)]
        state: PathBuf,
        /// Comma-separated variant names; variants other than the saved one
        /// are trained from scratch with the saved config.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<Variant>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Memory file utilities.
    Memory {
        #[command(subcommand)]
        cmd: MemoryCmd,
    },
}

#[derive(Subcommand)]
enum MemoryCmd {
    /// Print the header and prototypes of a memory file.
    Inspect { path: PathBuf },
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(Config::default()),
    }
}

fn state_config(state: &Path) -> Result<Config> {
    load_config(Some(&state.join("config.txt")))
}

/// Trains and writes snapshots, `accuracies.csv`, `metrics.txt` and `config.txt`.
fn train_into(cfg: &Config, out: Option<&Path>) -> Result<RunOutcome> {
    let (train, test) = load_data(cfg).context("loading data")?;
    let outcome = run_protocol_with(cfg, &train, &test, |st, log, rep| {
        eprintln!(
            "session {} ({} classes, {} samples): loss {:.4}, accuracy {:.2}% in {:.1}s",
            log.index - 1,
            st.memory.len(),
            log.stream_len,
            log.epoch_loss.last().copied().unwrap_or(f64::NAN),
            100.0 * rep.accuracy(),
            log.seconds
        );
        match out {
            Some(dir) => st.save_snapshot(&snapshot_dir(dir, log.index)),
            None => Ok(()),
        }
    })?;
    if let Some(dir) = out {
        write_reports(dir, cfg, &outcome.evals, &outcome.metrics)?;
    }
    print!("{}", accuracies_csv(&outcome.evals, &outcome.metrics));
    print!("{}", outcome.metrics.to_text());
    Ok(outcome)
}

fn latest_session(state: &Path) -> Result<usize> {
    let mut t = 0;
    while snapshot_dir(state, t + 1).join("state.bin").exists() {
        t += 1;
    }
    if t == 0 {
        bail!("no session snapshots under {}", state.display());
    }
    Ok(t)
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train { config, out } => {
            let cfg = load_config(Some(&config))?;
            train_into(&cfg, Some(&out))?;
        }
        Cmd::Eval { state, session } => {
            let cfg = state_config(&state)?;
            let st = EngineState::load_snapshot(&cfg, &snapshot_dir(&state, session))
                .with_context(|| format!("loading snapshot of session {session}"))?;
            let (_, test) = load_data(&cfg)?;
            let rep = evaluate(&st, &test, session)?;
            println!("session = {}", session - 1);
            println!("samples = {}", rep.samples);
            println!("accuracy = {:.4}", 100.0 * rep.accuracy());
            println!("accuracy_v2v = {:.4}", 100.0 * rep.accuracy_v2v());
        }
        Cmd::Simulate { classes, sessions, ways, shots, seed, config, epochs, variant, out, write_data } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.base_classes = classes;
            cfg.sessions = sessions;
            cfg.ways = ways;
            cfg.shots = shots;
            cfg.seed = seed;
            cfg.synth.seed = seed;
            cfg.train_path = None;
            cfg.test_path = None;
            if let Some(e) = epochs {
                cfg.epochs = e;
                cfg.proto_iters = cfg.proto_iters.min(e);
            }
            if let Some(v) = variant {
                cfg.variant = v;
                cfg.layers = None;
            }
            cfg.validate()?;
            if let Some(dir) = &write_data {
                let (train, test) = load_data(&cfg)?;
                fs::create_dir_all(dir)?;
                train.save(&dir.join("train.emb"))?;
                test.save(&dir.join("test.emb"))?;
            }
            train_into(&cfg, out.as_deref())?;
        }
        Cmd::Sweep { axis, values, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let values = parse_values(&values)?;
            let (train, test) = load_data(&cfg)?;
            let table = sweep(&cfg, axis, &values, &train, &test)?;
            emit(&table.to_csv(), out.as_deref())?;
        }
        Cmd::ProbeCenters { state, variants, out } => {
            let cfg = state_config(&state)?;
            let saved = EngineState::load_snapshot(&cfg, &snapshot_dir(&state, latest_session(&state)?))?;
            let (train, test) = load_data(&cfg)?;
            let variants = if variants.is_empty() { vec![cfg.variant] } else { variants };
            let mut trained = Vec::new();
            for &v in &variants {
                if v == cfg.variant {
                    trained.push(saved.clone());
                } else {
                    eprintln!("training {v} for the probe");
                    let c = Config { variant: v, layers: None, ..cfg.clone() };
                    trained.push(run_protocol(&c, &train, &test)?.state);
                }
            }
            let refs: Vec<&EngineState> = trained.iter().collect();
            emit(&probe_centers(&refs, &test)?.to_csv(), out.as_deref())?;
        }
        Cmd::Memory { cmd: MemoryCmd::Inspect { path } } => {
            let mem = ExplicitMemory::load(&path).with_context(|| format!("reading {}", path.display()))?;
            println!("segments = {}", mem.segments());
            println!("dim = {}", mem.dim());
            println!("prototypes = {}", mem.len());
            println!("frozen = {}", mem.iter().filter(|p| p.frozen).count());
            println!("class,session,frozen,norm");
            for p in mem.iter() {
                let norm = p.m.iter().map(|v| v * v).sum::<f64>().sqrt();
                println!("{},{},{},{norm:.6}", p.class_id, p.session, p.frozen as u8);
            }
        }
    }
    Ok(())
}
