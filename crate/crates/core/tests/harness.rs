//! Protocol bookkeeping, evaluation oracles, metrics, probes and sweeps.

use std::collections::BTreeSet;

use g2g_core::gnn::Variant;
use g2g_core::harness::*;
use g2g_core::memory::dissimilarity;
use g2g_core::{G2gError, Matrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> Config {
    let mut c = Config {
        segments: 4,
        d_zeta: 16,
        d_xi: 16,
        epochs: 4,
        proto_iters: 2,
        batch_size: 8,
        base_classes: 4,
        sessions: 2,
        ways: 2,
        shots: 3,
        lr: 1e-3,
        seed: 11,
        ..Config::default()
    };
    c.synth = SynthConfig {
        d_h: 16,
        tokens: 2,
        train_per_class: 6,
        test_per_class: 3,
        sigma: 0.1,
        aug_sigma: 0.05,
        seed: 5,
    };
    c.validate().unwrap();
    c
}

fn nearest_center_accuracy(train: &EmbeddingDataset, test: &EmbeddingDataset) -> f64 {
    let classes = train.classes();
    let centers: Vec<Vec<f64>> = classes
        .iter()
        .map(|&y| {
            let m: Vec<_> = train.records.iter().filter(|r| r.label == y).collect();
            let mut c = vec![0.0; m[0].base.len()];
            for r in &m {
                c.iter_mut().zip(r.base.data()).for_each(|(a, b)| *a += b / m.len() as f64);
            }
            c
        })
        .collect();
    let hits = test
        .records
        .iter()
        .filter(|r| {
            let d = |c: &[f64]| c.iter().zip(r.base.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..classes.len()).min_by(|&i, &j| d(&centers[i]).total_cmp(&d(&centers[j]))).unwrap();
            classes[best] == r.label
        })
        .count();
    hits as f64 / test.len() as f64
}

#[test]
fn embedding_file_round_trip_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let (mut train, _) = synth_generate(&synth_spec(&tiny())).unwrap();
    train.records[0].augmented = None;
    let p = dir.path().join("train.emb");
    train.save(&p).unwrap();
    let back = load_embeddings(&p, Split::Train, 4).unwrap();
    assert_eq!(back, train);
    assert!(back.records[0].augmented.is_none() && back.records[1].augmented.is_some());

    let mut wide = EmbeddingDataset::new(770, 2, Split::Test);
    wide.push(EmbeddingRecord { label: 0, base: Matrix::zeros(770, 2), augmented: None }).unwrap();
    wide.save(&p).unwrap();
    assert!(matches!(load_embeddings(&p, Split::Test, 8), Err(G2gError::Config(_))));
    assert!(load_embeddings(&p, Split::Test, 2).is_ok());
}

#[test]
fn trained_base_session_reaches_the_nearest_center_oracle() {
    let cfg = Config { base_classes: 10, sessions: 0, epochs: 10, proto_iters: 5, ..Config::default() };
    let (train, test) = load_data(&cfg).unwrap();
    assert_eq!(nearest_center_accuracy(&train, &test), 1.0);
    let out = run_protocol(&cfg, &train, &test).unwrap();
    assert!(out.metrics.last() >= 95.0, "{:?}", out.metrics);
}

#[test]
fn session_bookkeeping() {
    let cfg = tiny();
    let (train, _) = load_data(&cfg).unwrap();
    let plan = plan_sessions(&cfg, &train).unwrap();
    let mut st = EngineState::new(cfg.clone(), train.d_h, train.tokens).unwrap();

    let base = run_session(&mut st, &plan[0], &train).unwrap();
    assert_eq!(st.memory.len(), 4);
    assert!(st.memory.iter().all(|p| p.frozen));
    assert_eq!(st.buffer.len(), 4);
    assert_eq!(base.stream_len, 4 * 6);
    for y in 0..4u32 {
        let first = train.records.iter().find(|r| r.label == y).unwrap();
        assert_eq!(st.buffer.get(y).unwrap().h, first.base);
    }

    let inc = run_session(&mut st, &plan[1], &train).unwrap();
    assert_eq!(st.memory.len(), 6);
    assert_eq!(inc.stream_len, 2 * 3 + 4);
    assert_eq!(st.buffer.len(), 6);
    assert_eq!(inc.epoch_loss.len(), cfg.epochs);

    let before = st.clone();
    let again = SessionSpec { index: 3, classes: vec![5, 6], ..plan[2].clone() };
    assert!(matches!(
        run_session(&mut st, &again, &train),
        Err(G2gError::SessionOverlap { session: 3, class: 5 })
    ));
    assert_eq!(st.memory, before.memory);
    assert_eq!(st.model.store, before.model.store);
    assert!(run_session(&mut st, &plan[1], &train).is_err());
}

#[test]
fn prototypes_move_only_before_freezing() {
    let cfg = tiny();
    let (train, _) = load_data(&cfg).unwrap();
    let plan = plan_sessions(&cfg, &train).unwrap();
    let mut st = EngineState::new(cfg.clone(), train.d_h, train.tokens).unwrap();
    let mut frozen_bytes: Vec<(u32, Vec<u8>)> = Vec::new();
    for spec in &plan {
        // Class-mean initialisation, recomputed outside the harness.
        let init: Vec<(u32, Vec<f64>)> = spec
            .classes
            .iter()
            .map(|&y| {
                let idx: Vec<usize> = spec.sample_indices(&train).into_iter().filter(|&i| train.records[i].label == y).collect();
                let mut m = vec![0.0; cfg.d_xi];
                for &i in &idx {
                    let f = st.model.feature(&train.records[i].base).unwrap();
                    m.iter_mut().zip(&f.xi).for_each(|(a, b)| *a += b);
                }
                m.iter_mut().for_each(|v| *v /= idx.len() as f64);
                (y, m)
            })
            .collect();
        run_session(&mut st, spec, &train).unwrap();
        for (y, bytes) in &frozen_bytes {
            let now: Vec<u8> = st.memory.get(*y).unwrap().m.iter().flat_map(|v| v.to_le_bytes()).collect();
            assert_eq!(&now, bytes, "frozen prototype {y} changed in session {}", spec.index);
        }
        for (y, m0) in &init {
            let p = st.memory.get(*y).unwrap();
            assert!(p.frozen);
            assert_ne!(&p.m, m0, "prototype {y} never trained");
            frozen_bytes.push((*y, p.m.iter().flat_map(|v| v.to_le_bytes()).collect()));
        }
    }
}

#[test]
fn zero_prototype_phase_keeps_the_class_mean() {
    let cfg = Config { proto_iters: 0, sessions: 0, ..tiny() };
    let (train, _) = load_data(&cfg).unwrap();
    let plan = plan_sessions(&cfg, &train).unwrap();
    let mut st = EngineState::new(cfg.clone(), train.d_h, train.tokens).unwrap();
    let model0 = st.model.clone();
    run_session(&mut st, &plan[0], &train).unwrap();
    for y in 0..4u32 {
        let members: Vec<_> = train.records.iter().filter(|r| r.label == y).collect();
        let mut m = vec![0.0; cfg.d_xi];
        for r in &members {
            let f = model0.feature(&r.base).unwrap();
            m.iter_mut().zip(&f.xi).for_each(|(a, b)| *a += b);
        }
        m.iter_mut().for_each(|v| *v /= members.len() as f64);
        assert_eq!(st.memory.get(y).unwrap().m, m);
    }
    assert_ne!(st.model.store, model0.store);
}

#[test]
fn evaluation_matches_exhaustive_scan() {
    let cfg = tiny();
    let (train, test) = load_data(&cfg).unwrap();
    let out = run_protocol(&cfg, &train, &test).unwrap();
    let st = &out.state;
    for t in 1..=st.completed() {
        let seen: BTreeSet<u32> = st.sessions[..t].iter().flatten().copied().collect();
        let mut correct = 0;
        let mut n = 0;
        for r in test.records.iter().filter(|r| seen.contains(&r.label)) {
            let xi = st.model.feature(&r.base).unwrap().xi;
            let mut best = (u32::MAX, f64::INFINITY);
            for &y in &seen {
                let d = dissimilarity(&xi, &st.memory.get(y).unwrap().m, cfg.segments).unwrap().total;
                if d < best.1 {
                    best = (y, d);
                }
            }
            n += 1;
            correct += (best.0 == r.label) as usize;
        }
        let rep = evaluate(st, &test, t).unwrap();
        assert_eq!((rep.samples, rep.correct), (n, correct));
    }
    // The final session's report inside the run equals a fresh evaluation.
    assert_eq!(out.evals.last().unwrap(), &evaluate(st, &test, st.completed()).unwrap());
}

#[test]
fn permuted_labels_are_scored_from_the_same_state() {
    let cfg = tiny();
    let (train, test) = load_data(&cfg).unwrap();
    let st = run_protocol(&cfg, &train, &test).unwrap().state;
    let t = st.completed();
    let seen = st.classes_through(t);
    let classes: Vec<u32> = seen.iter().copied().collect();
    let mut permuted = test.clone();
    for r in permuted.records.iter_mut().filter(|r| seen.contains(&r.label)) {
        let k = classes.iter().position(|&c| c == r.label).unwrap();
        r.label = classes[(k + 1) % classes.len()];
    }
    let a = evaluate(&st, &test, t).unwrap();
    let b = evaluate(&st, &permuted, t).unwrap();
    assert_eq!(a.samples, b.samples);
    assert!(a.correct + b.correct <= a.samples);
    assert_eq!(evaluate(&st, &test, t).unwrap(), a);
    assert_eq!(evaluate(&st, &permuted, t).unwrap(), b);
}

#[test]
fn query_equal_to_its_prototype_is_always_right() {
    let cfg = tiny();
    let mut st = EngineState::new(cfg.clone(), 16, 2).unwrap();
    let h = Matrix::from_vec(16, 2, (0..32).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let xi = st.model.feature(&h).unwrap().xi;
    st.memory.add_class(3, 1, Some(&xi), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let far: Vec<f64> = xi.iter().map(|v| v + 5.0).collect();
    st.memory.add_class(4, 1, Some(&far), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    st.sessions.push(vec![3, 4]);
    let mut test = EmbeddingDataset::new(16, 2, Split::Test);
    test.push(EmbeddingRecord { label: 3, base: h, augmented: None }).unwrap();
    assert_eq!(evaluate(&st, &test, 1).unwrap().accuracy(), 1.0);

    let mut other = EmbeddingDataset::new(16, 2, Split::Test);
    other.push(EmbeddingRecord { label: 99, base: Matrix::zeros(16, 2), augmented: None }).unwrap();
    assert!(matches!(evaluate(&st, &other, 1), Err(G2gError::EmptyEvaluation(1))));
    assert!(evaluate(&st, &test, 2).is_err());
}

#[test]
fn table_row_metric_arithmetic() {
    let row = [90.13, 86.02, 83.97, 80.73, 80.80, 79.06, 78.84, 77.27, 76.06];
    let m = compute_metrics(&row).unwrap();
    assert_eq!((m.pd * 100.0).round() / 100.0, 14.07);
    assert_eq!((m.average * 100.0).round() / 100.0, 81.43);
}

#[test]
fn runs_are_bit_reproducible_and_snapshots_round_trip() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = load_data(&cfg).unwrap();
    let a = run_protocol_with(&cfg, &train, &test, |st, log, _| st.save_snapshot(&snapshot_dir(dir.path(), log.index)))
        .unwrap();
    let b = run_protocol(&cfg, &train, &test).unwrap();
    assert_eq!(a.state.model.store, b.state.model.store);
    assert_eq!(a.state.memory.to_bytes(), b.state.memory.to_bytes());
    assert_eq!(a.metrics.accuracies, b.metrics.accuracies);
    assert_eq!(a.logs.iter().map(|l| &l.epoch_loss).collect::<Vec<_>>(), b.logs.iter().map(|l| &l.epoch_loss).collect::<Vec<_>>());

    for (t, rep) in a.evals.iter().enumerate() {
        let st = EngineState::load_snapshot(&cfg, &snapshot_dir(dir.path(), t + 1)).unwrap();
        assert_eq!(st.completed(), t + 1);
        assert_eq!(&evaluate(&st, &test, t + 1).unwrap(), rep);
    }
    let last = EngineState::load_snapshot(&cfg, &snapshot_dir(dir.path(), a.evals.len())).unwrap();
    assert_eq!(last.model.store, a.state.model.store);
    assert_eq!(last.buffer, a.state.buffer);
    assert_eq!(last.memory, a.state.memory);

    let other = Config { d_xi: 32, ..cfg.clone() };
    assert!(EngineState::load_snapshot(&other, &snapshot_dir(dir.path(), 1)).is_err());
    let params = snapshot_dir(dir.path(), 1).join("params.bin");
    let bytes = std::fs::read(&params).unwrap();
    std::fs::write(&params, &bytes[..bytes.len() - 8]).unwrap();
    assert!(EngineState::load_snapshot(&cfg, &snapshot_dir(dir.path(), 1)).is_err());

    write_reports(dir.path(), &cfg, &a.evals, &a.metrics).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("accuracies.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + a.evals.len());
    assert!(csv.lines().nth(1).unwrap().starts_with("0,"));
    let back = Config::load(&dir.path().join("config.txt")).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn contrastive_off_and_without_stored_views() {
    let cfg = Config { eta: 0.0, ..tiny() };
    let (mut train, test) = load_data(&cfg).unwrap();
    assert!(run_protocol(&cfg, &train, &test).is_ok());
    train.records.iter_mut().for_each(|r| r.augmented = None);
    let cfg = Config { eta: 0.1, rehearsal_aug: false, ..tiny() };
    let out = run_protocol(&cfg, &train, &test).unwrap();
    assert!(out.logs.iter().all(|l| l.last.unwrap().l_c.is_some()));
}

fn oracle_center_distance(samples: &[Vec<f64>], s: usize) -> f64 {
    let w = samples[0].len() / s;
    let mut center = vec![0.0; w];
    let mut count = 0.0;
    for xi in samples {
        for k in 0..s {
            for j in 0..w {
                center[j] += xi[k * w + j];
            }
            count += 1.0;
        }
    }
    center.iter_mut().for_each(|c| *c /= count);
    let mut total = 0.0;
    for xi in samples {
        for k in 0..s {
            total += (0..w).map(|j| (xi[k * w + j] - center[j]).powi(2)).sum::<f64>().sqrt();
        }
    }
    total / count
}

#[test]
fn center_distance_probe() {
    let a = vec![1.0, 2.0, 3.0, 4.0];
    let same = vec![(0u32, a.clone()), (0, a.clone())];
    let d = center_distances(&same, 1).unwrap();
    assert_eq!(d, vec![(0, Some(0.0))]);

    let samples = vec![
        (1u32, vec![0.5, -1.0, 2.0, 0.25]),
        (1, vec![1.5, 0.0, -2.0, 0.75]),
        (1, vec![0.0, 3.0, 1.0, 1.0]),
        (2, vec![9.0, 9.0, 9.0, 9.0]),
    ];
    let d = center_distances(&samples, 2).unwrap();
    let members: Vec<Vec<f64>> = samples.iter().filter(|s| s.0 == 1).map(|s| s.1.clone()).collect();
    assert!((d[0].1.unwrap() - oracle_center_distance(&members, 2)).abs() < 1e-12);
    assert_eq!(d[1], (2, None));

    let cfg = Config { sessions: 0, ..tiny() };
    let (train, test) = load_data(&cfg).unwrap();
    let gat = run_protocol(&cfg, &train, &test).unwrap().state;
    let sage_cfg = Config { variant: Variant::GraphSage, ..cfg.clone() };
    let sage = run_protocol(&sage_cfg, &train, &test).unwrap().state;
    let table = probe_centers(&[&gat, &sage], &test).unwrap();
    assert_eq!(table.rows.len(), 2);
    assert_eq!(table.rows[1].variant, Variant::GraphSage);
    let csv = table.to_csv();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("variant,class_0,class_1,class_2,class_3,mean"));
    for (row, st) in table.rows.iter().zip([&gat, &sage]) {
        for (y, d) in &row.per_class {
            let xs: Vec<Vec<f64>> = test
                .records
                .iter()
                .filter(|r| r.label == *y)
                .map(|r| st.model.feature(&r.base).unwrap().xi)
                .collect();
            assert!((d.unwrap() - oracle_center_distance(&xs, cfg.segments)).abs() < 1e-12);
        }
    }
}

#[test]
fn sweeps() {
    let cfg = Config { sessions: 1, epochs: 2, proto_iters: 1, ..tiny() };
    let (train, test) = load_data(&cfg).unwrap();
    let single = run_protocol(&cfg, &train, &test).unwrap().metrics;
    let one = sweep(&cfg, Axis::Lambda, &[cfg.lambda], &train, &test).unwrap();
    assert_eq!(one.rows.len(), 1);
    assert_eq!(one.rows[0].1.accuracies, single.accuracies);

    let values = parse_values("0, 0.01,0.1,1").unwrap();
    let table = sweep(&cfg, Axis::Lambda, &values, &train, &test).unwrap();
    assert_eq!(table.rows.len(), 4);
    assert!(table.rows.iter().all(|r| r.1.accuracies.len() == 2));
    assert_eq!(table.to_csv().lines().count(), 5);
    let again = sweep(&cfg, Axis::Lambda, &values, &train, &test).unwrap();
    assert_eq!(
        table.rows.iter().map(|r| r.1.accuracies.clone()).collect::<Vec<_>>(),
        again.rows.iter().map(|r| r.1.accuracies.clone()).collect::<Vec<_>>()
    );

    let s = sweep(&cfg, Axis::Segments, &[2.0, 4.0], &train, &test).unwrap();
    assert_eq!(s.rows.len(), 2);
    assert!(sweep(&cfg, Axis::Segments, &[4.0, 3.0], &train, &test).is_err());
    assert!(sweep(&cfg, Axis::Eta, &[-0.5], &train, &test).is_err());
    assert!(parse_values("1,x").is_err());
    assert!("depth".parse::<Axis>().is_err());
}
