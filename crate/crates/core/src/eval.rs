//! Accuracies, logit diagnostics, multi-seed aggregation and the CSV
//! schemas for all of them.

use serde::Serialize;

use crate::data::{eval_split, Dataset, FullData, SessionPlan};
use crate::error::{Error, Result};
use crate::nn::{ModelState, RowOrigin};

/// Which samples count; logits always span every seen class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Restrict {
    All,
    Base,
    /// Every novel class the model has seen so far.
    Novel,
}

/// Per-sample correctness under full-logit argmax.
pub fn correctness(model: &ModelState, data: &Dataset) -> Result<Vec<bool>> {
    let predictions = model.predict(&data.inputs)?;
    Ok(predictions
        .iter()
        .zip(&data.labels)
        .map(|(p, l)| p == l)
        .collect())
}

/// Accuracy over the restricted samples, `None` when none qualify.
pub fn accuracy(model: &ModelState, data: &Dataset, restrict: Restrict) -> Result<Option<f64>> {
    let k = model.base_classes();
    let seen = model.num_classes();
    let keep = |l: usize| match restrict {
        Restrict::All => true,
        Restrict::Base => l < k,
        Restrict::Novel => (k..seen).contains(&l),
    };
    let subset = data.filter(keep);
    if subset.is_empty() {
        return Ok(None);
    }
    let correct = correctness(model, &subset)?.iter().filter(|&&c| c).count();
    Ok(Some(correct as f64 / subset.len() as f64))
}

/// Class-count weighted accuracy `(K·base + M·novel)/(K + M)`; `base` when
/// there are no novel classes.
pub fn weighted(base: f64, novel: Option<f64>, base_classes: usize, novel_classes: usize) -> f64 {
    match novel {
        Some(novel) if novel_classes > 0 => {
            let (k, m) = (base_classes as f64, novel_classes as f64);
            (k * base + m * novel) / (k + m)
        }
        _ => base,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub session: usize,
    pub base_acc: f64,
    pub novel_acc: Option<f64>,
    pub weighted_acc: f64,
    pub base_classes: usize,
    pub novel_classes: usize,
}

impl EvalRow {
    pub fn new(
        session: usize,
        base_acc: f64,
        novel_acc: Option<f64>,
        base_classes: usize,
        novel_classes: usize,
    ) -> Self {
        Self {
            session,
            base_acc,
            novel_acc,
            weighted_acc: weighted(base_acc, novel_acc, base_classes, novel_classes),
            base_classes,
            novel_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeLogits {
    pub class: usize,
    /// Mean logit per column over the class's test samples.
    pub mean_logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogitProfile {
    pub session: usize,
    pub probes: Vec<ProbeLogits>,
    pub row_norms: Vec<f64>,
    pub row_origins: Vec<RowOrigin>,
}

impl LogitProfile {
    pub fn width(&self) -> usize {
        self.row_norms.len()
    }
}

/// Mean logit vectors of the probe classes over `base_test`, plus the norm
/// of every classifier row.
pub fn logit_profile(
    model: &ModelState,
    base_test: &Dataset,
    probes: &[usize],
) -> Result<LogitProfile> {
    let k = model.base_classes();
    if let Some(&bad) = probes.iter().find(|&&p| p >= k) {
        return Err(Error::Input(format!(
            "probe class {bad} is not a base class"
        )));
    }
    let mut out = Vec::with_capacity(probes.len());
    for &class in probes {
        let subset = base_test.filter(|l| l == class);
        if subset.is_empty() {
            return Err(Error::Input(format!(
                "probe class {class} has no test samples"
            )));
        }
        let z = model.logits(&model.features(&subset.inputs)?)?;
        let mut mean = vec![0.0; z.cols()];
        for row in z.iter_rows() {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= z.rows() as f64);
        out.push(ProbeLogits {
            class,
            mean_logits: mean,
        });
    }
    Ok(LogitProfile {
        session: model.session(),
        probes: out,
        row_norms: model.classifier_matrix().row_norms(),
        row_origins: model.row_origins(),
    })
}

/// Row and logit profile for the model at session `i`.
pub fn evaluate_session(
    model: &ModelState,
    data: &FullData,
    plan: &SessionPlan,
    i: usize,
    probes: &[usize],
) -> Result<(EvalRow, LogitProfile)> {
    if model.session() != i || model.num_classes() != plan.classes_seen(i) {
        return Err(Error::Input(format!(
            "model at session {} with {} classes evaluated as session {i}",
            model.session(),
            model.num_classes()
        )));
    }
    let (base_test, novel_test) = eval_split(data, plan, i)?;
    let base_acc = accuracy(model, &base_test, Restrict::Base)?
        .ok_or_else(|| Error::Input("no base test samples".into()))?;
    let novel_acc = accuracy(model, &novel_test, Restrict::Novel)?;
    let row = EvalRow::new(
        i,
        base_acc,
        novel_acc,
        plan.base_classes,
        plan.novel_seen(i),
    );
    let profile = logit_profile(model, &base_test, probes)?;
    Ok((row, profile))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub seed: u64,
    pub rows: Vec<EvalRow>,
    pub profiles: Vec<LogitProfile>,
}

impl EvalReport {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rows: Vec::new(),
            profiles: Vec::new(),
        }
    }

    pub fn push(&mut self, row: EvalRow, profile: LogitProfile) {
        self.rows.push(row);
        self.profiles.push(profile);
    }

    pub fn last(&self) -> &EvalRow {
        self.rows.last().expect("report has rows")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        // shifted by the first value so identical inputs give exactly (x, 0)
        let first = values[0];
        let n = values.len() as f64;
        let shift = values.iter().map(|v| v - first).sum::<f64>() / n;
        let mean = first + shift;
        let var = values
            .iter()
            .map(|v| (v - first - shift).powi(2))
            .sum::<f64>()
            / n;
        Stat {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub session: usize,
    pub base: Stat,
    pub novel: Option<Stat>,
    pub weighted: Stat,
    pub base_classes: usize,
    pub novel_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub seeds: Vec<u64>,
    pub rows: Vec<AggregateRow>,
}

/// Per-session mean and standard deviation across seeds.
pub fn aggregate(reports: &[EvalReport]) -> Result<Aggregate> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Input("nothing to aggregate".into()))?;
    for r in reports {
        let same_shape = r.rows.len() == first.rows.len()
            && r.rows.iter().zip(&first.rows).all(|(a, b)| {
                a.session == b.session
                    && a.base_classes == b.base_classes
                    && a.novel_classes == b.novel_classes
                    && a.novel_acc.is_some() == b.novel_acc.is_some()
            });
        if !same_shape {
            return Err(Error::Input(format!(
                "report for seed {} does not match the plan of seed {}",
                r.seed, first.seed
            )));
        }
    }
    let rows = (0..first.rows.len())
        .map(|s| {
            let col = |f: &dyn Fn(&EvalRow) -> Option<f64>| -> Option<Vec<f64>> {
                reports.iter().map(|r| f(&r.rows[s])).collect()
            };
            let template = &first.rows[s];
            AggregateRow {
                session: template.session,
                base: Stat::of(&col(&|r| Some(r.base_acc)).expect("present")),
                novel: col(&|r| r.novel_acc).map(|v| Stat::of(&v)),
                weighted: Stat::of(&col(&|r| Some(r.weighted_acc)).expect("present")),
                base_classes: template.base_classes,
                novel_classes: template.novel_classes,
            }
        })
        .collect();
    Ok(Aggregate {
        seeds: reports.iter().map(|r| r.seed).collect(),
        rows,
    })
}

/// Optional leading key column for combined tables (`mode`, `epsilon`).
#[derive(Debug, Clone, Copy)]
pub struct Key<'a> {
    pub name: &'a str,
    pub value: &'a str,
}

fn num(v: f64) -> String {
    v.to_string()
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn header(key: Option<&str>, cols: &[&str]) -> Vec<String> {
    key.into_iter()
        .chain(cols.iter().copied())
        .map(String::from)
        .collect()
}

fn keyed(key: Option<Key<'_>>, mut fields: Vec<String>) -> Vec<String> {
    if let Some(k) = key {
        fields.insert(0, k.value.to_string());
    }
    fields
}

/// In-memory CSV table; rendering is byte-deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn render(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }
}

pub const REPORT_COLUMNS: [&str; 7] = [
    "seed",
    "session",
    "base_acc",
    "novel_acc",
    "weighted_acc",
    "K",
    "M",
];
pub const AGGREGATE_COLUMNS: [&str; 11] = [
    "session",
    "base_mean",
    "base_std",
    "novel_mean",
    "novel_std",
    "weighted_mean",
    "weighted_std",
    "K",
    "M",
    "n_seeds",
    "seeds",
];
pub const LOGIT_COLUMNS: [&str; 5] = [
    "seed",
    "session",
    "probe_class",
    "column_index",
    "mean_logit",
];
pub const ROW_NORM_COLUMNS: [&str; 5] = ["seed", "session", "row_index", "origin", "norm"];

/// Accumulates the four output tables, each optionally keyed.
#[derive(Debug, Clone)]
pub struct Tables {
    pub reports: Table,
    pub aggregate: Table,
    pub logits: Table,
    pub row_norms: Table,
}

impl Tables {
    pub fn new(key: Option<&str>) -> Self {
        Self {
            reports: Table {
                header: header(key, &REPORT_COLUMNS),
                rows: vec![],
            },
            aggregate: Table {
                header: header(key, &AGGREGATE_COLUMNS),
                rows: vec![],
            },
            logits: Table {
                header: header(key, &LOGIT_COLUMNS),
                rows: vec![],
            },
            row_norms: Table {
                header: header(key, &ROW_NORM_COLUMNS),
                rows: vec![],
            },
        }
    }

    /// Adds every report of one cell plus its aggregate.
    pub fn add(&mut self, key: Option<Key<'_>>, reports: &[EvalReport]) -> Result<()> {
        for rep in reports {
            let seed = rep.seed.to_string();
            for row in &rep.rows {
                self.reports.rows.push(keyed(
                    key,
                    vec![
                        seed.clone(),
                        row.session.to_string(),
                        num(row.base_acc),
                        opt(row.novel_acc),
                        num(row.weighted_acc),
                        row.base_classes.to_string(),
                        row.novel_classes.to_string(),
                    ],
                ));
            }
            for prof in &rep.profiles {
                for probe in &prof.probes {
                    for (c, v) in probe.mean_logits.iter().enumerate() {
                        self.logits.rows.push(keyed(
                            key,
                            vec![
                                seed.clone(),
                                prof.session.to_string(),
                                probe.class.to_string(),
                                c.to_string(),
                                num(*v),
                            ],
                        ));
                    }
                }
                for (r, (n, o)) in prof.row_norms.iter().zip(&prof.row_origins).enumerate() {
                    self.row_norms.rows.push(keyed(
                        key,
                        vec![
                            seed.clone(),
                            prof.session.to_string(),
                            r.to_string(),
                            origin_name(*o).to_string(),
                            num(*n),
                        ],
                    ));
                }
            }
        }
        let agg = aggregate(reports)?;
        let seeds = agg
            .seeds
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(";");
        for row in &agg.rows {
            self.aggregate.rows.push(keyed(
                key,
                vec![
                    row.session.to_string(),
                    num(row.base.mean),
                    num(row.base.std),
                    opt(row.novel.map(|s| s.mean)),
                    opt(row.novel.map(|s| s.std)),
                    num(row.weighted.mean),
                    num(row.weighted.std),
                    row.base_classes.to_string(),
                    row.novel_classes.to_string(),
                    agg.seeds.len().to_string(),
                    seeds.clone(),
                ],
            ));
        }
        Ok(())
    }
}

pub fn origin_name(o: RowOrigin) -> &'static str {
    match o {
        RowOrigin::SgdTrained => "sgd-trained",
        RowOrigin::Prototype => "prototype",
        RowOrigin::NormalizedPrototype => "normalized-prototype",
        RowOrigin::RandomInit => "random-init",
    }
}
