//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test --test acceptance`.

mod common;

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use fscil::cli::{execute_config, Command, ExperimentConfig};
use fscil::data::{session_stream, Dataset, FullData, Profile, SessionPlan, SyntheticSpec};
use fscil::eval::{EvalReport, Tables};
use fscil::nn::{Group, ModelState};
use fscil::numcore::{log_softmax, Rng};
use fscil::session::{run_sessions_with, train_base_for_seed, ProtocolConfig, UpdateMode};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const FIVE: [UpdateMode; 5] = [
    UpdateMode::M1,
    UpdateMode::M2,
    UpdateMode::M3,
    UpdateMode::M4,
    UpdateMode::M5,
];

/// Byte digests of one model after a session.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Digests {
    extractor: u64,
    stats: u64,
    base: u64,
    /// `h¹..hⁱ` at session `i`.
    novel: u64,
    /// `h¹..hⁱ⁻¹` at session `i`.
    novel_but_last: u64,
}

fn digests(m: &ModelState) -> Digests {
    let n = m.novel.len();
    Digests {
        extractor: m.group_digest(Group::Extractor),
        stats: m.stats_digest(),
        base: m.group_digest(Group::Base),
        novel: novel_digest(m, n),
        novel_but_last: novel_digest(m, n.saturating_sub(1)),
    }
}

struct Run {
    report: EvalReport,
    digests: Vec<Digests>,
    /// Kept only for modes inspected sample by sample.
    models: Vec<ModelState>,
}

struct Fixture {
    plan: SessionPlan,
    data: FullData,
    cfg: ProtocolConfig,
    /// `runs[seed][mode]`, modes in `UpdateMode::ALL` order.
    runs: Vec<Vec<Run>>,
    elapsed: Duration,
}

impl Fixture {
    fn build() -> Fixture {
        let start = Instant::now();
        let plan = SessionPlan::from_profile(Profile::CifarLike, 5, 0).unwrap();
        let data = synthetic(&plan, &SyntheticSpec::default());
        let cfg = ProtocolConfig::default();
        let runs = SEEDS
            .iter()
            .map(|&seed| {
                let (base, _) = train_base_for_seed(&plan, &data, &cfg, seed).unwrap();
                UpdateMode::ALL
                    .iter()
                    .map(|&mode| {
                        let keep = matches!(mode, UpdateMode::M2 | UpdateMode::NoNpc);
                        let mut ds = Vec::new();
                        let mut models = Vec::new();
                        let report =
                            run_sessions_with(&base, &plan, &data, &cfg, mode, seed, |_, m| {
                                ds.push(digests(m));
                                if keep {
                                    models.push(m.clone());
                                }
                            })
                            .unwrap();
                        Run {
                            report,
                            digests: ds,
                            models,
                        }
                    })
                    .collect()
            })
            .collect();
        Fixture {
            plan,
            data,
            cfg,
            runs,
            elapsed: start.elapsed(),
        }
    }

    fn run(&self, seed_idx: usize, mode: UpdateMode) -> &Run {
        let m = UpdateMode::ALL.iter().position(|&x| x == mode).unwrap();
        &self.runs[seed_idx][m]
    }

    /// Final-session (base, novel, weighted) averaged over seeds.
    fn final_means(&self, mode: UpdateMode) -> (f64, f64, f64) {
        let n = SEEDS.len() as f64;
        let mut acc = (0.0, 0.0, 0.0);
        for s in 0..SEEDS.len() {
            let r = self.run(s, mode).report.last();
            acc.0 += r.base_acc / n;
            acc.1 += r.novel_acc.unwrap() / n;
            acc.2 += r.weighted_acc / n;
        }
        acc
    }
}

type Check = (bool, String);

fn c1_gradients() -> Check {
    let start = Instant::now();
    let nets = 25;
    let mut worst: f64 = 0.0;
    let mut max_params = 0;
    for seed in 0..nets {
        let case = tiny_case(500 + seed);
        max_params = max_params.max(param_count(&case.model));
        worst = worst.max(max_grad_error(&case));
    }
    let t = start.elapsed();
    (
        worst < GRAD_TOL && max_params <= 64 && t < Duration::from_secs(5),
        format!(
            "{nets} nets (<= {max_params} params), max rel err {worst:.2e}, {:.2}s",
            t.as_secs_f64()
        ),
    )
}

fn c2_freeze(fx: &Fixture) -> Check {
    let mut checked = 0;
    let mut violations = Vec::new();
    for (s, _) in SEEDS.iter().enumerate() {
        for mode in FIVE {
            let ds = &fx.run(s, mode).digests;
            for i in 1..ds.len() {
                let (a, b) = (&ds[i - 1], &ds[i]);
                let mut expect_same = vec![];
                if mode != UpdateMode::M5 {
                    expect_same.push(("f", a.extractor == b.extractor));
                    expect_same.push(("bn-stats", a.stats == b.stats));
                }
                if matches!(mode, UpdateMode::M1 | UpdateMode::M2 | UpdateMode::M3) {
                    expect_same.push(("h0", a.base == b.base));
                }
                if matches!(mode, UpdateMode::M1 | UpdateMode::M2) {
                    expect_same.push(("h1..h(i-1)", a.novel == b.novel_but_last));
                }
                for (name, ok) in expect_same {
                    checked += 1;
                    if !ok {
                        violations.push(format!("{mode} s{i} {name}"));
                    }
                }
            }
        }
    }
    (
        violations.is_empty(),
        format!("{checked} frozen-group comparisons, violations: {violations:?}"),
    )
}

fn base_test(fx: &Fixture) -> Dataset {
    fx.data.test.filter(|l| l < fx.plan.base_classes)
}

fn c3_dilution(fx: &Fixture) -> Check {
    let models = &fx.run(0, UpdateMode::M2).models;
    let test = base_test(fx);
    let mut rng = Rng::new(2024);
    let mut idx: Vec<usize> = (0..test.len()).collect();
    rng.shuffle(&mut idx);
    idx.truncate(100);
    let sample = test.subset(&idx);
    // log-probabilities of the true class per session
    let logp: Vec<Vec<f64>> = models
        .iter()
        .map(|m| {
            let z = m.logits(&m.features(&sample.inputs).unwrap()).unwrap();
            sample
                .labels
                .iter()
                .enumerate()
                .map(|(r, &y)| log_softmax(z.row(r))[y])
                .collect()
        })
        .collect();
    let transitions = logp.len() - 1;
    let mut failures = 0;
    for w in logp.windows(2) {
        failures += w[0]
            .iter()
            .zip(&w[1])
            .filter(|(a, b)| b.partial_cmp(a) != Some(std::cmp::Ordering::Less))
            .count();
    }
    let p_first: f64 = logp[0].iter().map(|v| v.exp()).sum::<f64>() / 100.0;
    let lp_last: f64 = logp[transitions].iter().sum::<f64>() / 100.0;
    (
        failures == 0 && transitions == 8 && sample.len() == 100,
        format!(
            "100 samples x {transitions} transitions, non-decreasing: {failures}; mean p at s0 {p_first:.3}, mean log p at s8 {lp_last:.1}"
        ),
    )
}

fn c4_logit_blowup(fx: &Fixture) -> Check {
    let k = fx.plan.base_classes;
    let mut hits = 0;
    let mut detail = Vec::new();
    for s in 0..SEEDS.len() {
        let prof = fx.run(s, UpdateMode::M2).report.profiles.last().unwrap();
        let logits_ok = prof.probes.iter().all(|p| {
            let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            max(&p.mean_logits[k..]) > max(&p.mean_logits[..k])
        });
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (nb, nn) = (mean(&prof.row_norms[..k]), mean(&prof.row_norms[k..]));
        if logits_ok && nn > nb {
            hits += 1;
        }
        let p0 = &prof.probes[0].mean_logits;
        detail.push(format!(
            "max z novel/base {:.0}/{:.0}, |h| {nn:.2}/{nb:.2}",
            p0[k..].iter().copied().fold(f64::NEG_INFINITY, f64::max),
            p0[..k].iter().copied().fold(f64::NEG_INFINITY, f64::max)
        ));
    }
    (
        hits >= 4 && fx.elapsed < Duration::from_secs(120),
        format!("{hits}/5 seeds; seed 1: {}", detail[0]),
    )
}

fn c5_orderings(fx: &Fixture) -> Check {
    let m: Vec<(f64, f64, f64)> = FIVE.iter().map(|&mode| fx.final_means(mode)).collect();
    let (m1, m2, m5) = (m[0], m[1], m[4]);
    let a = m.iter().all(|x| m1.0 >= x.0) && m.iter().all(|x| m1.1 <= x.1);
    let b = m1.0 - m5.0 >= 0.05;
    let c = m.iter().all(|x| m2.1 >= x.1) && m2.0 < m1.0;
    let table: Vec<String> = FIVE
        .iter()
        .zip(&m)
        .map(|(mode, x)| format!("{mode} {:.3}/{:.3}", x.0, x.1))
        .collect();
    (
        a && b && c && fx.elapsed < Duration::from_secs(600),
        format!("(a) {a} (b) {b} (c) {c}; base/novel: {}", table.join(", ")),
    )
}

/// Cosine-nearest-prototype predictions for the test samples of classes
/// seen by session `i`, prototypes recomputed from scratch.
fn oracle_predictions(fx: &Fixture, model: &ModelState, i: usize) -> (Dataset, Vec<usize>) {
    let mut protos = Vec::new();
    for j in 0..=i {
        let shots = session_stream(&fx.data, &fx.plan, j).unwrap();
        let f = model.features(&shots.inputs).unwrap();
        protos.extend(class_mean_rows(
            &f,
            &shots.labels,
            fx.plan.session_classes(j),
        ));
    }
    let seen = fx.plan.classes_seen(i);
    let test = fx.data.test.filter(|l| l < seen);
    let f = model.features(&test.inputs).unwrap();
    let pred = (0..test.len())
        .map(|r| cosine_nearest(f.row(r), &protos))
        .collect();
    (test, pred)
}

fn c6_oracle(fx: &Fixture) -> Check {
    let (mut total, mut mismatches) = (0, 0);
    for s in 0..SEEDS.len() {
        for (i, model) in fx.run(s, UpdateMode::NoNpc).models.iter().enumerate() {
            let (test, oracle) = oracle_predictions(fx, model, i);
            let pred = model.predict(&test.inputs).unwrap();
            total += pred.len();
            mismatches += pred.iter().zip(&oracle).filter(|(a, b)| a != b).count();
        }
    }
    (
        mismatches == 0,
        format!("{total} predictions over 5 seeds x 9 sessions, {mismatches} mismatches"),
    )
}

fn c7_nonpc_quality(fx: &Fixture) -> Check {
    let k = fx.plan.base_classes;
    let (_, _, weighted) = fx.final_means(UpdateMode::NoNpc);
    let worst = (0..SEEDS.len())
        .map(|s| fx.run(s, UpdateMode::NoNpc).report.last().weighted_acc)
        .fold(f64::INFINITY, f64::min);
    let mut frozen = true;
    let mut base_equal = true;
    for s in 0..SEEDS.len() {
        let run = fx.run(s, UpdateMode::NoNpc);
        let snap = run.digests[0];
        for (i, d) in run.digests.iter().enumerate() {
            frozen &= d.extractor == snap.extractor && d.stats == snap.stats && d.base == snap.base;
            // the frozen snapshot with prototypes appended, rebuilt by the oracle
            let (test, oracle) = oracle_predictions(fx, &run.models[0], i);
            let base_idx: Vec<usize> = (0..test.len()).filter(|&r| test.labels[r] < k).collect();
            let correct = base_idx
                .iter()
                .filter(|&&r| oracle[r] == test.labels[r])
                .count();
            let acc = correct as f64 / base_idx.len() as f64;
            base_equal &= acc.to_bits() == run.report.rows[i].base_acc.to_bits();
        }
    }
    (
        weighted >= 0.90 && frozen && base_equal && fx.elapsed < Duration::from_secs(120),
        format!("final weighted mean {weighted:.4} (worst seed {worst:.4}); f/h0 frozen {frozen}; base acc = snapshot {base_equal}"),
    )
}

fn c8_ladder(fx: &Fixture) -> Check {
    let p = fx.final_means(UpdateMode::AblP);
    let np = fx.final_means(UpdateMode::AblNpNovelOnly);
    let nonpc = fx.final_means(UpdateMode::NoNpc);
    let m1 = fx.final_means(UpdateMode::M1);
    let paired = (0..SEEDS.len())
        .filter(|&s| {
            fx.run(s, UpdateMode::NoNpc).report.last().weighted_acc
                >= fx.run(s, UpdateMode::AblP).report.last().weighted_acc
        })
        .count();
    (
        np.1 >= p.1 && paired >= 4,
        format!(
            "novel ABL_NP {:.3} >= ABL_P {:.3}; NONPC >= ABL_P weighted in {paired}/5; weighted M1/ABL_P/ABL_NP/NONPC {:.3}/{:.3}/{:.3}/{:.3}",
            np.1, p.1, m1.2, p.2, np.2, nonpc.2
        ),
    )
}

fn c9_identities(fx: &Fixture) -> Check {
    let plan = &fx.plan;
    let (k, n) = (plan.base_classes, plan.ways);
    let mut rows = 0;
    let mut bad = Vec::new();
    let mut tables = Tables::new(Some("mode"));
    for (mi, mode) in UpdateMode::ALL.iter().enumerate() {
        let reports: Vec<EvalReport> = fx.runs.iter().map(|r| r[mi].report.clone()).collect();
        tables
            .add(
                Some(fscil::eval::Key {
                    name: "mode",
                    value: mode.name(),
                }),
                &reports,
            )
            .unwrap();
        for rep in &reports {
            for (row, prof) in rep.rows.iter().zip(&rep.profiles) {
                rows += 1;
                let i = row.session;
                let width = k + n * i;
                if prof.row_norms.len() != width
                    || prof.probes.iter().any(|p| p.mean_logits.len() != width)
                {
                    bad.push(format!("{mode} s{i} width"));
                }
                match (i, row.novel_acc) {
                    (0, None) => {
                        if row.weighted_acc.to_bits() != row.base_acc.to_bits() {
                            bad.push(format!("{mode} s0 weighted"));
                        }
                    }
                    (0, Some(_)) => bad.push(format!("{mode} s0 has novel acc")),
                    (_, None) => bad.push(format!("{mode} s{i} lacks novel acc")),
                    (_, Some(nv)) => {
                        let (kf, mf) = (k as f64, (n * i) as f64);
                        let w = (kf * row.base_acc + mf * nv) / (kf + mf);
                        if w.to_bits() != row.weighted_acc.to_bits() || row.novel_classes != n * i {
                            bad.push(format!("{mode} s{i} weighted"));
                        }
                    }
                }
            }
        }
    }
    // the same identity on the emitted CSV text
    let csv = tables.reports.render().unwrap();
    let mut csv_rows = 0;
    for line in csv.lines().skip(1) {
        csv_rows += 1;
        let f: Vec<&str> = line.split(',').collect();
        let (base, novel, weighted): (f64, &str, f64) =
            (f[3].parse().unwrap(), f[4], f[5].parse().unwrap());
        let (kk, mm): (f64, f64) = (f[6].parse().unwrap(), f[7].parse().unwrap());
        let ok = if f[2] == "0" {
            novel.is_empty() && weighted.to_bits() == base.to_bits()
        } else {
            let nv: f64 = novel.parse().unwrap();
            ((kk * base + mm * nv) / (kk + mm)).to_bits() == weighted.to_bits()
        };
        if !ok {
            bad.push(format!("csv line {line}"));
        }
    }
    (
        bad.is_empty() && csv_rows == rows,
        format!("{rows} rows in memory, {csv_rows} CSV rows; violations: {bad:?}"),
    )
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn cli_config(seeds: Vec<u64>) -> ExperimentConfig {
    ExperimentConfig {
        seeds,
        modes: UpdateMode::ALL.to_vec(),
        ..ExperimentConfig::default()
    }
}

fn c10_determinism() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = cli_config(vec![1, 2]);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    execute_config(Command::CompareModes, &cfg, &a, 1, false).unwrap();
    execute_config(Command::CompareModes, &cfg, &b, 2, false).unwrap();
    let (fa, fb) = (read_all(&a), read_all(&b));
    let bytes: usize = fa.iter().map(|f| f.1.len()).sum();
    (
        fa == fb && fa.len() == 5,
        format!("{} files, {bytes} bytes, identical: {}", fa.len(), fa == fb),
    )
}

fn strip_key(text: &str, key: &str) -> Vec<String> {
    text.lines()
        .skip(1)
        .filter_map(|l| {
            l.split_once(',')
                .filter(|(k, _)| *k == key)
                .map(|(_, rest)| rest.to_string())
        })
        .collect()
}

fn c11_sweep() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = cli_config(vec![1]);
    let (sweep, plain) = (tmp.path().join("sweep"), tmp.path().join("plain"));
    execute_config(Command::SweepSmoothing, &cfg, &sweep, 1, false).unwrap();
    execute_config(Command::Run, &cfg, &plain, 1, false).unwrap();
    let sessions = cfg.plan.resolve().unwrap().sessions;
    let agg = fs::read_to_string(sweep.join("aggregate.csv")).unwrap();
    let agg_rows = agg.lines().count() - 1;
    let keys: Vec<String> = {
        let mut k: Vec<String> = agg
            .lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap().to_string())
            .collect();
        k.dedup();
        k
    };
    let mut identical = true;
    for f in [
        "reports.csv",
        "aggregate.csv",
        "logits.csv",
        "row_norms.csv",
    ] {
        let s = fs::read_to_string(sweep.join(f)).unwrap();
        let p = fs::read_to_string(plain.join(f)).unwrap();
        let plain_rows: Vec<String> = p.lines().skip(1).map(String::from).collect();
        identical &= strip_key(&s, "0") == plain_rows;
    }
    let grid = keys
        == [
            "0", "0.1", "0.2", "0.3", "0.4", "0.5", "0.6", "0.7", "0.8", "0.9",
        ];
    (
        grid && agg_rows == 10 * (sessions + 1) && identical,
        format!(
            "keys {}, {agg_rows} aggregate rows, eps=0 bit-identical to plain run: {identical}",
            keys.join("/")
        ),
    )
}

fn main() {
    let mut results: Vec<(u32, &str, Check, Duration)> = Vec::new();
    let mut timed = |id: u32, name: &'static str, f: &dyn Fn() -> Check| {
        let start = Instant::now();
        let check = f();
        results.push((id, name, check, start.elapsed()));
    };
    timed(1, "gradient correctness", &c1_gradients);
    let fx = Fixture::build();
    println!(
        "fixture: cifar-like plan, 5 seeds x {} modes, {:.1}s (shared by criteria 2-9; probes {:?})",
        UpdateMode::ALL.len(),
        fx.elapsed.as_secs_f64(),
        fx.cfg.probe_classes
    );
    timed(2, "freeze contract", &|| c2_freeze(&fx));
    timed(3, "probability dilution under M2", &|| c3_dilution(&fx));
    timed(4, "novel logit and norm blow-up", &|| c4_logit_blowup(&fx));
    timed(5, "update-mode orderings", &|| c5_orderings(&fx));
    timed(6, "NONPC equals cosine-prototype oracle", &|| {
        c6_oracle(&fx)
    });
    timed(7, "NONPC quality and frozen base", &|| {
        c7_nonpc_quality(&fx)
    });
    timed(8, "normalization ladder", &|| c8_ladder(&fx));
    timed(9, "metric identities", &|| c9_identities(&fx));
    timed(10, "compare-modes determinism", &c10_determinism);
    timed(11, "label-smoothing sweep mechanics", &c11_sweep);

    let mut failed = 0;
    for (id, name, (pass, detail), t) in &results {
        if !pass {
            failed += 1;
        }
        println!(
            "[{}] {id:>2} {name}: {detail} ({:.1}s)",
            if *pass { "PASS" } else { "FAIL" },
            t.as_secs_f64()
        );
    }
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
