//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Tolerances and time limits are pinned below.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::{Arc, Barrier};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vrlab_analysis::fitts::{fitts_features, remove_outliers, PointingTrial};
use vrlab_analysis::pca::compute_d95;
use vrlab_analysis::pipelines::{compare_group, fitts_report_from, psychometric_report, Corpus};
use vrlab_analysis::ranktest::{
    rank_sum_exact_p, rank_sum_normal, signed_rank_exact_p, signed_rank_normal, wilcoxon_signed_rank,
};
use vrlab_analysis::Exec;
use vrlab_client::Client;
use vrlab_core::api::{DeviceClass, JoinOutcome, JoinRequest, RedirectReason};
use vrlab_core::config::{bundled, ExperimentConfig};
use vrlab_core::dataplane::export::reexport;
use vrlab_core::dataplane::{DataStore, ExportFormat, ExportKind, IdMinter, Pose, SessionStatus, TrackingFrame};
use vrlab_core::flow::{
    log_from_ndjson, log_to_ndjson, ActionSpec, Comparator, Flow, FlowSpec, StateDef, StateListenerSpec,
    TransitionDef, Trigger,
};
use vrlab_core::trial::{assign_between_group, generate_trials, GroupCounts, Phase};
use vrlab_core::{Platform, Scalar};
use vrlab_server::{spawn, RunningServer, ServerConfig};
use vrlab_sim::driver::{drive, join};
use vrlab_sim::{
    bundled as cohorts, run_cohort, run_participant, CohortOptions, DrummerModel, ParticipantModel,
    ParticipantOptions, ResponderModel, RunSummary,
};

const PSYCHOMETRIC_TOL: f64 = 0.03;
const D95_TOL: f64 = 1e-9;
const FITTS_EXACT_TOL: f64 = 1e-6;
const FITTS_ADJ_R2: f64 = 0.373;
const FITTS_ADJ_R2_TOL: f64 = 0.05;
const CROSSOVER_TOL: f64 = 0.01;
/// Exact p range over which the crossover tolerance is evaluated.
const CROSSOVER_P_CAP: f64 = 0.2;
const SIGNIFICANCE: f64 = 0.05;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }
}

type Check = fn() -> Result<Outcome, String>;

fn main() {
    let criteria: [(u8, &str, Duration, Check); 12] = [
        (1, "trial generation", secs(1), trial_generation),
        (2, "concurrent joins at limit 1", secs(30), concurrent_joins),
        (3, "routing and group counts", secs(120), routing),
        (4, "flow replay", secs(60), flow_replay),
        (5, "psychometric recovery", secs(60), psychometric),
        (6, "d95 against oracle", secs(10), d95_oracle),
        (7, "paired test power and size", secs(60), rank_power),
        (8, "Fitts regressions", secs(60), fitts),
        (9, "outlier fence", secs(60), outliers),
        (10, "rank-test p values", secs(60), rank_p_values),
        (11, "data-plane round trips", secs(120), data_plane),
        (12, "end-to-end simulation", secs(300), end_to_end),
    ];
    let mut failed = 0;
    for (n, name, limit, check) in criteria {
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check));
        let elapsed = started.elapsed();
        let (pass, detail) = match result {
            Ok(Ok(o)) => (o.pass, o.detail),
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(p) => (false, format!("panic: {}", panic_text(&p))),
        };
        let in_time = elapsed <= limit;
        let pass = pass && in_time;
        if !pass {
            failed += 1;
        }
        let timing = if in_time {
            format!("{:.2} s", elapsed.as_secs_f64())
        } else {
            format!("{:.2} s, over the {} s limit", elapsed.as_secs_f64(), limit.as_secs())
        };
        println!(
            "{} [{n:>2}] {name}: {detail} ({timing})",
            if pass { "PASS" } else { "FAIL" }
        );
    }
    println!("{} of 12 criteria passed", 12 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn panic_text(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown".into())
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn server(seed: u64) -> Result<(RunningServer, Client), String> {
    let srv = spawn(ServerConfig {
        bind: "127.0.0.1:0".parse().unwrap(),
        id_seed: Some(seed),
        ..ServerConfig::default()
    })
    .map_err(err)?;
    let c = Client::new(&srv.url());
    Ok((srv, c))
}

fn publish(c: &Client, config: &ExperimentConfig) -> Result<String, String> {
    let id = c.register_experiment(config).map_err(err)?;
    c.set_published(&id, true).map_err(err)?;
    Ok(id)
}

fn vr(participant: &str) -> JoinRequest {
    JoinRequest {
        participant_id: participant.into(),
        device_class: DeviceClass::Vr,
        device_serial: None,
    }
}

fn trial_generation() -> Result<Outcome, String> {
    let hand = bundled::hand_redirection().factors;
    let fitts = bundled::fitts_3d().factors;
    let mut problems = Vec::new();
    for seed in 0..100u64 {
        let plan = generate_trials(&hand, seed).map_err(err)?;
        let mut per_gain: BTreeMap<String, usize> = BTreeMap::new();
        for t in plan.main_trials() {
            *per_gain.entry(t.params["gain"].to_cell()).or_default() += 1;
        }
        let practice: Vec<f64> = plan.trials.iter().take(3).filter(|t| t.phase == Phase::Practice)
            .filter_map(|t| t.params["gain"].as_f64())
            .collect();
        if plan.main_count() != 22 || per_gain.len() != 11 || per_gain.values().any(|&c| c != 2) {
            problems.push(format!("hand seed {seed}: {} main, {per_gain:?}", plan.main_count()));
        }
        if practice != [0.0, 1.25, 0.75] || plan.practice_trials().count() != 3 {
            problems.push(format!("hand seed {seed}: practice {practice:?}"));
        }

        let plan = generate_trials(&fitts, seed).map_err(err)?;
        let targets: BTreeSet<String> = plan.main_trials().map(|t| t.params["target"].to_cell()).collect();
        if plan.main_count() != 100 || targets.len() != 100 || plan.practice_trials().count() != 3 {
            problems.push(format!(
                "fitts seed {seed}: {} main ({} distinct), {} practice",
                plan.main_count(),
                targets.len(),
                plan.practice_trials().count()
            ));
        }
    }
    Ok(match problems.first() {
        None => Outcome::new(
            true,
            "100 seeds: hand 22 main (11 gains x 2) + practice [0, 1.25, 0.75]; Fitts 100 + 3",
        ),
        Some(p) => Outcome::new(false, format!("{} bad plans, first: {p}", problems.len())),
    })
}

fn concurrent_joins() -> Result<Outcome, String> {
    const JOINERS: usize = 64;
    let mut worst = 0;
    for round in 0..100u64 {
        let p = Arc::new(Platform::builder(DataStore::in_memory()).ids(IdMinter::seeded(round)).build());
        let id = p.register_experiment(bundled::hand_redirection()).map_err(err)?;
        p.set_published(&id, true).map_err(err)?;

        let mut rng = ChaCha8Rng::seed_from_u64(round);
        let mut order: Vec<usize> = (0..JOINERS).collect();
        order.shuffle(&mut rng);
        let spins: Vec<u32> = (0..JOINERS).map(|_| rng.random_range(0..64)).collect();
        let barrier = Arc::new(Barrier::new(JOINERS));
        let handles: Vec<_> = order
            .into_iter()
            .map(|i| {
                let (p, id, barrier, spin) = (p.clone(), id.clone(), barrier.clone(), spins[i]);
                std::thread::spawn(move || {
                    barrier.wait();
                    for _ in 0..spin {
                        std::thread::yield_now();
                    }
                    p.join(&id, &vr(&format!("r{round}-{i}")))
                })
            })
            .collect();
        let mut instances = HashSet::new();
        for h in handles {
            match h.join().map_err(|_| "joiner panicked".to_string())?.map_err(err)? {
                JoinOutcome::Admitted(t) => {
                    instances.insert(t.instance_id.clone());
                }
                other => return Ok(Outcome::new(false, format!("round {round}: {other:?}"))),
            }
        }
        let records = p.instances(&id).map_err(err)?;
        let most = records.iter().map(|r| r.occupants.len()).max().unwrap_or(0);
        worst = worst.max(most);
        if instances.len() != JOINERS || records.len() != JOINERS || most > 1 {
            return Ok(Outcome::new(
                false,
                format!("round {round}: {} instances, max occupancy {most}", instances.len()),
            ));
        }
    }
    Ok(Outcome::new(true, format!("100 interleavings x 64 joins: 64 instances each, max occupancy {worst}")))
}

fn routing() -> Result<Outcome, String> {
    let (_srv, c) = server(31)?;
    let hand = publish(&c, &bundled::hand_redirection())?;
    let model = ParticipantModel::Responder(ResponderModel::new(1.035, 0.0777, 0.01).map_err(err)?);
    let rec = run_participant(&c, &hand, &model, &ParticipantOptions::new("returning", 3)).map_err(err)?;
    let rejoin = c.join(&hand, &vr("returning")).map_err(err)?;
    let rejoin_ok = rec.status == SessionStatus::Completed
        && matches!(rejoin, JoinOutcome::Redirect { reason: RedirectReason::AlreadyCompleted });
    let desktop = c
        .join(&hand, &JoinRequest { device_class: DeviceClass::Desktop, ..vr("flat") })
        .map_err(err)?;
    let desktop_ok = matches!(desktop, JoinOutcome::Redirect { reason: RedirectReason::NonVr });

    // 174 joins balance 87/87; the specified dropouts (7 CD, 9 FL) leave 80/78.
    let p = Platform::builder(DataStore::in_memory()).ids(IdMinter::seeded(5)).build();
    let config = bundled::proteus_drumming();
    let id = p.register_experiment(config.clone()).map_err(err)?;
    p.set_published(&id, true).map_err(err)?;
    let mut by_group: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for i in 0..174 {
        match p.join(&id, &vr(&format!("drummer{i}"))).map_err(err)? {
            JoinOutcome::Admitted(t) => by_group.entry(t.group.clone().unwrap_or_default()).or_default().push(t.session_id),
            other => return Ok(Outcome::new(false, format!("join {i}: {other:?}"))),
        }
    }
    let joined: Vec<usize> = by_group.values().map(Vec::len).collect();
    for (group, quota) in [("CD", 7), ("FL", 9)] {
        for sid in by_group[group].iter().take(quota) {
            p.leave(sid).map_err(err)?;
        }
    }
    let mut retained: BTreeMap<String, usize> = BTreeMap::new();
    for s in p.sessions(&id).map_err(err)? {
        if s.status != SessionStatus::Dropped {
            *retained.entry(s.group.unwrap_or_default()).or_default() += 1;
        }
    }
    let retained_ok = retained.get("CD") == Some(&80) && retained.get("FL") == Some(&78);

    let mut seeded = GroupCounts::with_counts(&config.factors, &[80, 78]).map_err(err)?;
    let next = assign_between_group(&config.factors, &mut seeded).map_err(err)?;
    let mut fresh = GroupCounts::new(&config.factors);
    for _ in 0..158 {
        assign_between_group(&config.factors, &mut fresh).map_err(err)?;
    }
    let fresh: Vec<u64> = fresh.counts().map(|(_, n)| n).collect();

    Ok(Outcome::new(
        rejoin_ok && desktop_ok && joined == [87, 87] && retained_ok && next == "FL",
        format!(
            "rejoin after completion -> {rejoin:?}; desktop -> {desktop:?}; 174 joins {joined:?}, \
             retained after dropouts {retained:?}; seeded 80/78 assigns next to {next}; \
             158 unseeded joins balance {fresh:?}"
        ),
    ))
}

fn random_flow(rng: &mut ChaCha8Rng) -> FlowSpec {
    let n = rng.random_range(2..7);
    let name = |i: usize| format!("S{i}");
    let mut transitions: Vec<TransitionDef> = (0..n - 1)
        .map(|i| {
            let trigger = match rng.random_range(0..4) {
                0 => Trigger::Manual { event: format!("e{}", rng.random_range(0..4)) },
                1 => Trigger::TimerElapsed { seconds: rng.random_range(0.1..5.0) },
                2 => Trigger::Predicate {
                    variable: "x".into(),
                    comparator: Comparator::Ge,
                    value: Scalar::Number(rng.random_range(0.0..4.0)),
                },
                _ => Trigger::TrialsExhausted,
            };
            TransitionDef { from: name(i), to: name(i + 1), trigger }
        })
        .collect();
    for _ in 0..rng.random_range(0..6) {
        let (a, b) = (rng.random_range(0..n - 1), rng.random_range(0..n));
        transitions.push(TransitionDef {
            from: name(a),
            to: name(b),
            trigger: Trigger::Manual { event: format!("e{}", rng.random_range(0..4)) },
        });
    }
    let listeners = (0..rng.random_range(0..4))
        .map(|k| {
            let s = rng.random_range(0..n);
            StateListenerSpec {
                target_object: format!("obj{k}"),
                watched_state: name(s),
                on_enter: vec![ActionSpec::SetVariable {
                    name: "x".into(),
                    value: Scalar::Number(rng.random_range(0.0..4.0)),
                }],
                during: vec![],
                on_exit: vec![],
            }
        })
        .collect();
    FlowSpec {
        states: (0..n).map(|i| StateDef { name: name(i), terminal: i == n - 1 }).collect(),
        initial_state: name(0),
        transitions,
        listeners,
    }
}

fn flow_replay() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut moved, mut terminal) = (0, 0);
    for case in 0..1000 {
        let flow = Flow::compile(random_flow(&mut rng)).map_err(err)?;
        let steps: Vec<(f64, Vec<String>)> = (0..rng.random_range(0..60))
            .map(|_| {
                let events = (0..rng.random_range(0..3)).map(|_| format!("e{}", rng.random_range(0..5))).collect();
                (rng.random_range(0.01..2.0), events)
            })
            .collect();
        let done = rng.random_range(0..4) as f64;
        let run = || {
            let (mut rt, _) = flow.start();
            rt.set_variable("trials_total", 3.0);
            for (k, (dt, events)) in steps.iter().enumerate() {
                if k == 5 {
                    rt.set_variable("trials_completed", done);
                }
                if flow.tick(&mut rt, *dt, events).is_err() {
                    break;
                }
            }
            rt
        };
        let live = run();
        let again = run();
        let log = log_from_ndjson(&log_to_ndjson(&live.transition_log)).map_err(err)?;
        let replayed = flow.replay(&log).map_err(err)?;
        if replayed.current_state != live.current_state
            || replayed.transition_log != live.transition_log
            || again.transition_log != live.transition_log
        {
            return Ok(Outcome::new(
                false,
                format!("case {case}: live `{}`, replayed `{}`", live.current_state, replayed.current_state),
            ));
        }
        moved += usize::from(!live.transition_log.is_empty());
        terminal += usize::from(flow.is_terminal(&live.current_state));
    }
    Ok(Outcome::new(
        true,
        format!("1000 pairs reproduce their final state ({moved} transitioned, {terminal} reached a terminal)"),
    ))
}

fn psychometric() -> Result<Outcome, String> {
    let (_srv, c) = server(55)?;
    let id = publish(&c, &bundled::hand_redirection())?;
    let spec = cohorts::cohort("hand_redirection").ok_or("no bundled cohort")?;
    let out = run_cohort(&c, &id, &spec, 185, 55, CohortOptions::default()).map_err(err)?;
    if !out.failures.is_empty() {
        return Ok(Outcome::new(false, format!("{} participants failed", out.failures.len())));
    }
    let dir = tempfile::tempdir().map_err(err)?;
    vrlab_sim::export_all(&c, &id, ExportFormat::Json, dir.path()).map_err(err)?;
    let report = psychometric_report(&Corpus::load(dir.path()).map_err(err)?, Exec::default()).map_err(err)?;

    let planted: BTreeSet<&str> = out
        .records
        .iter()
        .filter(|r| r.segment.as_deref() == Some("always_faster"))
        .map(|r| r.session_id.as_str())
        .collect();
    let flagged: BTreeSet<&str> = report
        .participants
        .iter()
        .filter(|p| !p.fit.is_usable())
        .map(|p| p.session_id.as_str())
        .collect();
    let s = &report.summary;
    let mut pass = planted.len() == 22 && flagged == planted && (s.exclusion_pct - 100.0 * 22.0 / 185.0).abs() < 1e-9;
    let mut detail = format!("{} of 22 planted flagged ({:.2}% excluded)", flagged.intersection(&planted).count(), s.exclusion_pct);
    for (metric, target) in [("faster", 1.12), ("pse", 1.035), ("slower", 0.945)] {
        let mean = s.metric(metric).ok_or("missing metric")?.mean;
        pass &= (mean - target).abs() <= PSYCHOMETRIC_TOL;
        detail.push_str(&format!("; {metric} {mean:.4} (planted {target})"));
    }
    Ok(Outcome::new(pass, detail))
}

/// Cyclic Jacobi eigenvalues of a symmetric matrix.
fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        let scale: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum();
        if off <= 1e-30 * scale.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let (cs, sn) = (1.0 / (t * t + 1.0).sqrt(), t / (t * t + 1.0).sqrt());
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = cs * akp - sn * akq;
                    a[k][q] = sn * akp + cs * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = cs * apk - sn * aqk;
                    a[q][k] = sn * apk + cs * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

/// Variance fractions (largest first) and the component count reaching 95%.
fn oracle_d95(x: &DMatrix<f64>) -> (Vec<f64>, usize) {
    let (n, d) = x.shape();
    let means: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x[(i, j)]).sum::<f64>() / n as f64).collect();
    let cov: Vec<Vec<f64>> = (0..d)
        .map(|a| {
            (0..d)
                .map(|b| (0..n).map(|i| (x[(i, a)] - means[a]) * (x[(i, b)] - means[b])).sum::<f64>() / (n - 1) as f64)
                .collect()
        })
        .collect();
    let mut eig: Vec<f64> = jacobi_eigenvalues(cov).into_iter().map(|v| v.max(0.0)).collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = eig.iter().sum();
    let fractions: Vec<f64> = eig.iter().map(|v| v / total).collect();
    let mut cum = 0.0;
    let mut k = fractions.len();
    for (i, f) in fractions.iter().enumerate() {
        cum += f;
        if cum >= 0.95 - 1e-12 {
            k = i + 1;
            break;
        }
    }
    (fractions, k)
}

fn d95_oracle() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(95);
    let std = Normal::new(0.0, 1.0).unwrap();
    let mut worst: f64 = 0.0;
    let mut counts = BTreeSet::new();
    for m in 0..50 {
        let scales: Vec<f64> = (0..9).map(|_| (rng.random_range(-4.0..1.0f64)).exp()).collect();
        let mix = DMatrix::from_fn(9, 9, |i, _| std.sample(&mut rng) * scales[i]);
        let z = DMatrix::from_fn(500, 9, |_, _| std.sample(&mut rng));
        let x = z * mix;
        let got = compute_d95(&x).map_err(err)?;
        let (fractions, k) = oracle_d95(&x);
        let gap = got.explained.iter().zip(&fractions).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(gap);
        counts.insert(got.d95);
        if gap > D95_TOL || got.d95 != k {
            return Ok(Outcome::new(false, format!("matrix {m}: d95 {} vs oracle {k}, max gap {gap:.2e}", got.d95)));
        }
    }
    let iso = DMatrix::from_fn(500, 9, |_, _| std.sample(&mut rng));
    let iso_d95 = compute_d95(&iso).map_err(err)?.d95;
    let u: Vec<f64> = (0..500).map(|_| std.sample(&mut rng)).collect();
    let v: Vec<f64> = (0..9).map(|_| std.sample(&mut rng)).collect();
    let rank1 = DMatrix::from_fn(500, 9, |i, j| 0.3 + u[i] * v[j]);
    let rank1_d95 = compute_d95(&rank1).map_err(err)?.d95;
    Ok(Outcome::new(
        iso_d95 == 9 && rank1_d95 == 1,
        format!(
            "50 matrices (d95 values {counts:?}), max fraction gap {worst:.1e}; isotropic {iso_d95}, rank-1 {rank1_d95}"
        ),
    ))
}

fn significant_replications(shift: f64, seed: u64) -> Result<usize, String> {
    let results = Exec::default().map_range(100, |r| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (r as u64).wrapping_mul(0x9E37_79B9));
        let base = Normal::new(8.0, 0.8).unwrap();
        let diff = Normal::new(shift, 0.96).unwrap();
        let pairs: Vec<(f64, f64)> = (0..80)
            .map(|_| {
                let b = base.sample(&mut rng);
                (b, b + diff.sample(&mut rng))
            })
            .collect();
        compare_group("G", &pairs).map(|g| g.test.is_some_and(|t| t.p < SIGNIFICANCE))
    });
    results.into_iter().try_fold(0, |n, r| r.map(|s| n + usize::from(s)).map_err(err))
}

fn rank_power() -> Result<Outcome, String> {
    let cd = significant_replications(0.31, 7)?;
    let fl = significant_replications(0.0, 8)?;
    Ok(Outcome::new(
        cd >= 70 && fl <= 10,
        format!("shift 0.31: {cd}/100 significant (need >= 70); shift 0: {fl}/100 (need <= 10)"),
    ))
}

fn fitts() -> Result<Outcome, String> {
    let stimuli = bundled::fitts_3d().pointing_targets().map_err(err)?;
    let features = stimuli
        .targets
        .iter()
        .map(|t| fitts_features(t.origin, t.target, t.size))
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    let law = |id: f64| 481.327 + 130.121 * id;

    let exact: Vec<PointingTrial> = features
        .iter()
        .map(|f| PointingTrial { features: *f, movement_time_ms: law(f.id_bits) })
        .collect();
    let rep = fitts_report_from(&exact, Exec::default()).map_err(err)?;
    let hoff = &rep.models[0].report;
    let recovered = (hoff.coefficients[0].estimate - 481.327).abs() <= FITTS_EXACT_TOL
        && (hoff.coefficients[1].estimate - 130.121).abs() <= FITTS_EXACT_TOL;

    let mut adj = Vec::new();
    let mut complete = true;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 286.0).unwrap();
        let trials: Vec<PointingTrial> = (0..197)
            .flat_map(|_| features.iter())
            .map(|f| PointingTrial { features: *f, movement_time_ms: law(f.id_bits) + noise.sample(&mut rng) })
            .collect();
        let rep = fitts_report_from(&trials, Exec::default()).map_err(err)?;
        complete &= rep.models.len() == 5
            && rep.models.iter().all(|m| {
                let r = &m.report;
                r.r2.is_finite()
                    && r.adj_r2.is_finite()
                    && r.coefficients.len() == m.model.feature_names().len() + 1
                    && r.coefficients.iter().all(|c| c.estimate.is_finite() && c.se.is_finite() && c.p.is_finite())
                    && r.coefficients.iter().skip(1).all(|c| c.sr.is_some_and(f64::is_finite))
            });
        adj.push(rep.models[0].report.adj_r2);
    }
    let lo = adj.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = adj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let within = adj.iter().all(|a| (a - FITTS_ADJ_R2).abs() <= FITTS_ADJ_R2_TOL);
    Ok(Outcome::new(
        recovered && within && complete,
        format!(
            "noise-free {:.6} + {:.6} ID; noisy Adj R2 over 20 seeds in [{lo:.4}, {hi:.4}] (target {FITTS_ADJ_R2} +/- {FITTS_ADJ_R2_TOL}); \
             all five models complete: {complete}",
            hoff.coefficients[0].estimate, hoff.coefficients[1].estimate
        ),
    ))
}

fn outliers() -> Result<Outcome, String> {
    let features = fitts_features([0.0, 1.0, 0.0], [0.3, 1.1, 0.2], 0.05).map_err(err)?;
    let mut injected_total = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut times: Vec<(f64, bool)> = (0..400).map(|_| (rng.random_range(600.0..1200.0), false)).collect();
        let k = rng.random_range(1..=20);
        injected_total += k;
        times.extend((0..k).map(|_| (rng.random_range(3000.0..8000.0), true)));
        times.shuffle(&mut rng);
        let trials: Vec<PointingTrial> = times.iter().map(|&(t, _)| PointingTrial { features, movement_time_ms: t }).collect();

        let (kept, fence) = remove_outliers(&trials).map_err(err)?;
        let removed: Vec<f64> = trials.iter().map(|t| t.movement_time_ms).filter(|&t| !fence.keeps(t)).collect();
        let mut expected: Vec<f64> = times.iter().filter(|(_, inj)| *inj).map(|(t, _)| *t).collect();
        let mut removed_sorted = removed.clone();
        removed_sorted.sort_by(f64::total_cmp);
        expected.sort_by(f64::total_cmp);
        let (again, _) = remove_outliers(&kept).map_err(err)?;
        if removed_sorted != expected || kept.len() != 400 || again != kept || fence.apply(&kept) != kept {
            return Ok(Outcome::new(
                false,
                format!("seed {seed}: removed {} of {k} injected, second pass kept {}", removed.len(), again.len()),
            ));
        }
    }
    Ok(Outcome::new(true, format!("100 samples: exactly the {injected_total} injected values removed; second pass removes nothing")))
}

fn signed_rank_gap(n: usize, p_cap: f64) -> f64 {
    let ranks: Vec<u64> = (1..=n as u64).map(|r| 2 * r).collect();
    (0..=n * (n + 1) / 2)
        .map(|w| (signed_rank_exact_p(&ranks, 2 * w as u64), signed_rank_normal(n, w as f64, &[]).1))
        .filter(|(e, _)| *e <= p_cap)
        .map(|(e, a)| (e - a).abs())
        .fold(0.0, f64::max)
}

fn rank_sum_gap(m: usize, n: usize, p_cap: f64) -> f64 {
    let ranks: Vec<u64> = (1..=(m + n) as u64).map(|r| 2 * r).collect();
    let lo = m * (m + 1) / 2;
    (lo..=lo + m * n)
        .map(|w| (rank_sum_exact_p(&ranks, m, 2 * w as u64), rank_sum_normal(m, n, w as f64, &[]).1))
        .filter(|(e, _)| *e <= p_cap)
        .map(|(e, a)| (e - a).abs())
        .fold(0.0, f64::max)
}

fn rank_p_values() -> Result<Outcome, String> {
    let pairs: Vec<(f64, f64)> = (1..=5).map(|i| (0.0, i as f64)).collect();
    let p = wilcoxon_signed_rank(&pairs).map_err(err)?.p;
    let gaps = [signed_rank_gap(12, CROSSOVER_P_CAP), signed_rank_gap(13, CROSSOVER_P_CAP), rank_sum_gap(10, 10, CROSSOVER_P_CAP)];
    let full = signed_rank_gap(12, 1.0).max(signed_rank_gap(13, 1.0));
    let worst = gaps.iter().copied().fold(0.0, f64::max);
    Ok(Outcome::new(
        (p - 0.0625).abs() < 1e-12 && worst <= CROSSOVER_TOL,
        format!(
            "5 positive pairs p = {p}; crossover |exact - normal| <= {worst:.4} for exact p <= {CROSSOVER_P_CAP} \
             (signed-rank n 12/13, rank-sum 10 vs 10); full-range signed-rank max {full:.4}"
        ),
    ))
}

const DECOYS: [&str; 4] = ["decoy.alice@example.org", "SN-DECOY-7731-XQ", "decoy.bob", "SN-DECOY-0042"];

fn data_plane() -> Result<Outcome, String> {
    let (_srv, c) = server(11)?;
    let mut drums = bundled::proteus_drumming();
    drums.meta.tracking_rate_hz = Some(2.0);
    let experiments = [bundled::hand_redirection(), drums];
    let ids = experiments.iter().map(|e| publish(&c, e)).collect::<Result<Vec<_>, _>>()?;

    let hand = ParticipantModel::Responder(ResponderModel::new(1.03, 0.08, 0.01).map_err(err)?);
    let drummer = ParticipantModel::Drummer(DrummerModel::new([0.02; 9], 1.1, 2.0).map_err(err)?);
    for (config, (id, model)) in experiments.iter().zip(ids.iter().zip([&hand, &drummer])) {
        for (k, pair) in DECOYS.chunks(2).enumerate() {
            let req = JoinRequest {
                participant_id: pair[0].into(),
                device_class: DeviceClass::Vr,
                device_serial: Some(pair[1].into()),
            };
            let ticket = match c.join(id, &req).map_err(err)? {
                JoinOutcome::Admitted(t) => *t,
                other => return Ok(Outcome::new(false, format!("decoy join: {other:?}"))),
            };
            let mut opts = ParticipantOptions::new(pair[0], 40 + k as u64);
            opts.tracking_rate_hz = 2.0;
            drive(&c, config, ticket, model, &opts).map_err(err)?;
        }
        let extra = join(&c, id, "plain-participant").map_err(err)?;
        drive(&c, config, extra, model, &ParticipantOptions::new("plain-participant", 9)).map_err(err)?;
    }

    let mut checked = 0;
    let mut bytes_total = 0;
    for id in &ids {
        for kind in ExportKind::ALL {
            for format in [ExportFormat::Csv, ExportFormat::Json] {
                let first = c.export(id, kind, format).map_err(err)?;
                let again = reexport(&first, kind, format).map_err(err)?;
                if again != first {
                    return Ok(Outcome::new(false, format!("{id} {kind:?} {format:?} changed on re-export")));
                }
                let text = String::from_utf8_lossy(&first);
                if let Some(d) = DECOYS.iter().find(|d| text.contains(*d)) {
                    return Ok(Outcome::new(false, format!("{id} {kind:?} {format:?} leaks `{d}`")));
                }
                checked += 1;
                bytes_total += first.len();
            }
        }
    }

    // Resends only count while the session is active.
    let resender = join(&c, &ids[1], "resender").map_err(err)?;
    let batch: Vec<TrackingFrame> = (0..700u64)
        .map(|i| TrackingFrame {
            session_id: resender.session_id.clone(),
            frame_index: i,
            t: i as f64 / 72.0,
            poses: BTreeMap::from([("head".to_string(), Pose::at([0.0, 1.6, i as f64 * 1e-3]))]),
        })
        .collect();
    let first_send = c.ingest_frames(&batch).map_err(err)?;
    let before = c.export(&ids[1], ExportKind::Frames, ExportFormat::Json).map_err(err)?;
    let resend = c.ingest_frames(&batch).map_err(err)?;
    let after = c.export(&ids[1], ExportKind::Frames, ExportFormat::Json).map_err(err)?;
    c.leave(&resender.session_id).map_err(err)?;
    let idempotent = first_send.stored == batch.len() && resend.stored == 0 && after == before;
    Ok(Outcome::new(
        idempotent,
        format!(
            "{checked} exports ({bytes_total} bytes) re-export byte-identically with no decoys; \
             a {}-frame batch stored {} then {} on resend, export unchanged: {}",
            batch.len(),
            first_send.stored,
            resend.stored,
            after == before
        ),
    ))
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_vrlab")).args(args).output().map_err(err)?;
    if !out.status.success() {
        return Err(format!(
            "vrlab {} exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn end_to_end() -> Result<Outcome, String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let out_dir = dir.path().to_str().ok_or("temp path is not UTF-8")?;
    let expected = [
        ("hand_redirection", "psychometric", 185, 0),
        ("proteus_drumming", "proteus", 174, 16),
        ("fitts_3d", "fitts", 197, 0),
    ];
    let mut pass = true;
    let mut details = Vec::new();
    for (experiment, pipeline, sessions, dropped) in expected {
        let stdout = run_cli(&["--json", "--out-dir", out_dir, "sim", "run", "--local", "--experiment", experiment, "--seed", "7"])?;
        let summary: RunSummary = serde_json::from_str(stdout.trim()).map_err(err)?;
        let ok = summary.sessions == sessions
            && summary.dropped == dropped
            && summary.completed == sessions - dropped
            && summary.failures.is_empty();
        pass &= ok;

        let input = summary.export_dir.to_str().ok_or("export path is not UTF-8")?.to_string();
        let report_path = dir.path().join(format!("{pipeline}.json"));
        run_cli(&["--json", "analyze", pipeline, "--input", &input, "--out", report_path.to_str().unwrap()])?;
        let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&report_path).map_err(err)?).map_err(err)?;
        let mut line = format!(
            "{experiment} {} sessions ({} completed, {} dropped, {:.1} s)",
            summary.sessions, summary.completed, summary.dropped, summary.seconds
        );
        if experiment == "proteus_drumming" {
            let completed = completed_by_group(Path::new(&input))?;
            pass &= completed.get("CD") == Some(&80) && completed.get("FL") == Some(&78);
            line.push_str(&format!(", completed by group {completed:?}"));
        }
        pass &= report.is_object();
        details.push(line);
    }
    Ok(Outcome::new(pass, format!("{}; all three analysed", details.join("; "))))
}

fn completed_by_group(dir: &Path) -> Result<BTreeMap<String, usize>, String> {
    let corpus = Corpus::load(dir).map_err(err)?;
    let mut out = BTreeMap::new();
    for s in corpus.sessions.iter().filter(|s| s.status == SessionStatus::Completed) {
        *out.entry(s.group.clone().unwrap_or_default()).or_default() += 1;
    }
    Ok(out)
}
