use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vrlab_analysis::fitts::{fit_model, fitts_features, FittsModel, PointingTrial};
use vrlab_analysis::pca::D95Mode;
use vrlab_analysis::pipelines::{fitts_report, proteus_report, psychometric_report, Corpus};
use vrlab_analysis::psychometric::FitOptions;
use vrlab_analysis::report;
use vrlab_analysis::Exec;
use vrlab_core::config::bundled;
use vrlab_core::dataplane::{export, AnonId, ExportFormat, Pose, SessionMeta, SessionStatus, TrackingFrame, TrialRecord};
use vrlab_core::trial::Phase;
use vrlab_core::Scalar;

fn session(id: &str, exp: &str, group: Option<&str>, status: SessionStatus) -> SessionMeta {
    SessionMeta {
        session_id: id.into(),
        experiment_id: exp.into(),
        participant: AnonId::from_bytes([id.len() as u8; 16]),
        group: group.map(String::from),
        status,
        world_id: "w".into(),
        instance_id: format!("i-{id}"),
        tracking_rate_hz: Some(10.0),
        trials_planned: 2,
    }
}

fn trial(session: &str, i: usize, params: &[(&str, Scalar)], measures: &[(&str, Scalar)]) -> TrialRecord {
    TrialRecord {
        session_id: session.into(),
        trial_index: i,
        phase: Phase::Main,
        params: params.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        measures: measures.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        t_start: i as f64,
        t_end: i as f64 + 1.0,
    }
}

#[test]
fn psychometric_pipeline_excludes_flat_responders() {
    let opts = FitOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut corpus = Corpus::default();
    for s in 0..40 {
        let id = format!("s{s}");
        let flat = s >= 36;
        corpus.sessions.push(session(&id, "hr", None, SessionStatus::Completed));
        for i in 0..22 {
            let g = 0.75 + 0.05 * (i % 11) as f64;
            let faster = flat || rng.random::<f64>() < opts.probability(g, 1.035, 0.0777);
            corpus.trials.push(trial(&id, i, &[("gain", g.into())], &[("faster", Scalar::Bool(faster))]));
        }
    }
    // A dropped session is ignored entirely.
    corpus.sessions.push(session("gone", "hr", None, SessionStatus::Dropped));
    corpus.trials.push(trial("gone", 0, &[("gain", 1.0.into())], &[("faster", true.into())]));

    let rep = psychometric_report(&corpus, Exec::default()).unwrap();
    assert_eq!(rep.summary.n_total, 40);
    assert_eq!(rep.summary.n_excluded, 4);
    let pse = rep.summary.metric("pse").unwrap();
    assert!((pse.mean - 1.035).abs() < 0.03, "{pse:?}");
    let table = report::psychometric_table(&rep);
    assert!(table.contains("PSE") && table.contains("excluded 4 (10.00%)"));
}

fn drummer_frames(session: &str, seconds: f64, rate: f64, jitter: f64, seed: u64) -> Vec<TrackingFrame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, jitter).unwrap();
    let n = (seconds * rate) as u64;
    (0..n)
        .map(|i| {
            let t = i as f64 / rate;
            let strike = (t * 2.0 * std::f64::consts::PI * 2.0).sin();
            let mut poses = BTreeMap::new();
            for (k, name) in ["head", "left_hand", "right_hand"].iter().enumerate() {
                let base = [k as f64 * 0.3, 1.2 + 0.1 * strike * (k > 0) as u8 as f64, 0.4];
                let p = [base[0] + noise.sample(&mut rng), base[1] + noise.sample(&mut rng), base[2] + noise.sample(&mut rng)];
                poses.insert(name.to_string(), Pose::at(p));
            }
            TrackingFrame { session_id: session.into(), frame_index: i, t, poses }
        })
        .collect()
}

#[test]
fn proteus_pipeline_segments_by_condition() {
    let mut corpus = Corpus::default();
    for s in 0..12 {
        let id = format!("d{s}");
        let group = if s % 2 == 0 { "CD" } else { "FL" };
        corpus.sessions.push(session(&id, "pd", Some(group), SessionStatus::Completed));
        let mut frames = drummer_frames(&id, 20.0, 10.0, 0.01, s);
        frames.extend(drummer_frames(&id, 20.0, 10.0, 0.03, 100 + s).into_iter().map(|mut f| {
            f.frame_index += 200;
            f.t += 25.0;
            f
        }));
        corpus.frames.extend(frames);
        let mut b = trial(&id, 0, &[("condition", "baseline".into())], &[]);
        (b.t_start, b.t_end) = (0.0, 20.0);
        let mut a = trial(&id, 1, &[("condition", "avatar".into())], &[]);
        (a.t_start, a.t_end) = (25.0, 45.0);
        corpus.trials.extend([b, a]);
    }
    corpus.sessions.push(session("x", "pd", Some("CD"), SessionStatus::Dropped));

    let rep = proteus_report(&corpus, D95Mode::Integer, Exec::default()).unwrap();
    assert_eq!((rep.n_joined, rep.n_dropped, rep.participants.len()), (13, 1, 12));
    assert_eq!(rep.d95.groups.len(), 2);
    assert_eq!(rep.d95.groups[0].group, "CD");
    assert_eq!(rep.d95.groups[0].n, 6);
    // More jitter in the avatar segment spreads variance over more axes
    // and adds path length.
    for p in &rep.participants {
        assert!(p.avatar.d95 >= p.baseline.d95);
        assert!(p.avatar.total_displacement > p.baseline.total_displacement);
    }
    assert!(rep.displacement.between_base.is_some());
    assert!(rep.displacement.groups.iter().all(|g| g.test.is_some()));
    let text = report::proteus_tables(&rep);
    assert!(text.contains("d95") && text.contains("total_displacement") && text.contains("Cohen's r"));
}

fn pointing_corpus(noise_sd: f64, seed: u64) -> Corpus {
    let stimuli = bundled::fitts_3d().pointing_targets().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sd.max(1e-300)).unwrap();
    let mut corpus = Corpus::default();
    for s in 0..5 {
        let id = format!("f{s}");
        corpus.sessions.push(session(&id, "f", None, SessionStatus::Completed));
        for (i, t) in stimuli.targets.iter().enumerate() {
            let f = fitts_features(t.origin, t.target, t.size).unwrap();
            let e = if noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            let mt = 481.327 + 130.121 * f.id_bits + e;
            let g = [t.origin[0], t.origin[1], t.origin[2], t.target[0], t.target[1], t.target[2], t.size];
            let names = ["origin_x", "origin_y", "origin_z", "target_x", "target_y", "target_z", "size"];
            let mut measures: Vec<(&str, Scalar)> = names.iter().zip(g).map(|(k, v)| (*k, v.into())).collect();
            measures.push(("movement_time_ms", mt.into()));
            corpus.trials.push(trial(&id, i, &[("target", (i as f64).into())], &measures));
        }
    }
    corpus
}

#[test]
fn fitts_pipeline_recovers_noise_free_law() {
    let rep = fitts_report(&pointing_corpus(0.0, 1), Default::default(), Exec::default()).unwrap();
    assert_eq!(rep.n_trials, 500);
    let hoff = &rep.models[0].report;
    assert!((hoff.coefficients[0].estimate - 481.327).abs() < 1e-6);
    assert!((hoff.coefficients[1].estimate - 130.121).abs() < 1e-6);
    assert_eq!(rep.models.len(), 5);
}

#[test]
fn fitts_pipeline_reports_every_model() {
    let rep = fitts_report(&pointing_corpus(286.0, 9), Default::default(), Exec::default()).unwrap();
    for m in &rep.models {
        assert_eq!(m.report.coefficients.len(), m.model.feature_names().len() + 1);
        assert!(m.report.adj_r2 <= m.report.r2);
    }
    let text = report::fitts_table(&rep);
    for label in ["Hoffmann", "Murata", "Cha", "Machuca", "Clark", "Size x theta", "Adj. R²"] {
        assert!(text.contains(label), "{label}");
    }
}

#[test]
fn bundled_geometry_supports_every_model() {
    let stimuli = bundled::fitts_3d().pointing_targets().unwrap();
    let trials: Vec<PointingTrial> = stimuli
        .targets
        .iter()
        .enumerate()
        .map(|(i, t)| PointingTrial {
            features: fitts_features(t.origin, t.target, t.size).unwrap(),
            movement_time_ms: 500.0 + (i as f64 * 7.3).sin() * 100.0,
        })
        .collect();
    for m in FittsModel::ALL {
        fit_model(m, &trials).unwrap();
    }
}

#[test]
fn corpus_loads_from_export_files() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = pointing_corpus(10.0, 2);
    std::fs::write(dir.path().join("trials.csv"), export::write_trials(corpus.trials.iter(), ExportFormat::Csv).unwrap()).unwrap();
    std::fs::write(
        dir.path().join("sessions.ndjson"),
        export::write_sessions(corpus.sessions.iter(), ExportFormat::Json).unwrap(),
    )
    .unwrap();
    let loaded = Corpus::load(dir.path()).unwrap();
    assert_eq!(loaded.trials, corpus.trials);
    assert_eq!(loaded.sessions, corpus.sessions);
    assert!(loaded.frames.is_empty());
}
