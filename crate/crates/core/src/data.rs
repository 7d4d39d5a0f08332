//! Session plans, synthetic class-conditional Gaussians, CSV ingestion.

use std::fs::File;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Rng, Tensor2D};

/// Named class-incremental setups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// 60 base classes, 8 sessions of 5.
    CifarLike,
    /// 100 base classes, 10 sessions of 10.
    CubLike,
    /// 60 base classes, 8 sessions of 5.
    MiniLike,
}

/// `K` base classes followed by `S` sessions of `n` classes, `k` shots each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionPlan {
    pub base_classes: usize,
    pub ways: usize,
    pub shots: usize,
    pub sessions: usize,
    pub seed: u64,
}

pub const DEFAULT_SHOTS: usize = 5;

impl SessionPlan {
    pub fn new(
        base_classes: usize,
        ways: usize,
        shots: usize,
        sessions: usize,
        seed: u64,
    ) -> Result<Self> {
        if base_classes == 0 || ways == 0 || shots == 0 || sessions == 0 {
            return Err(Error::Config(format!(
                "plan counts must be >= 1 (K={base_classes}, n={ways}, k={shots}, S={sessions})"
            )));
        }
        Ok(Self {
            base_classes,
            ways,
            shots,
            sessions,
            seed,
        })
    }

    pub fn from_profile(profile: Profile, shots: usize, seed: u64) -> Result<Self> {
        let (k, n, s) = match profile {
            Profile::CifarLike | Profile::MiniLike => (60, 5, 8),
            Profile::CubLike => (100, 10, 10),
        };
        Self::new(k, n, shots, s, seed)
    }

    pub fn total_classes(&self) -> usize {
        self.base_classes + self.ways * self.sessions
    }

    /// Classes introduced by session `i`; session 0 owns the base classes.
    pub fn session_classes(&self, i: usize) -> Range<usize> {
        if i == 0 {
            0..self.base_classes
        } else {
            let start = self.base_classes + (i - 1) * self.ways;
            start..start + self.ways
        }
    }

    /// Number of novel classes seen after session `i`.
    pub fn novel_seen(&self, i: usize) -> usize {
        self.ways * i
    }

    pub fn classes_seen(&self, i: usize) -> usize {
        self.base_classes + self.novel_seen(i)
    }

    fn check_session(&self, i: usize) -> Result<()> {
        if i > self.sessions {
            return Err(Error::Input(format!(
                "session {i} out of range 0..={}",
                self.sessions
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub input_dim: usize,
    /// Class means are drawn uniformly on the sphere of this radius.
    pub radius: f64,
    /// Isotropic noise standard deviation.
    pub noise: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            input_dim: 32,
            radius: 6.0,
            noise: 1.0,
            train_per_class: 100,
            test_per_class: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor2D,
    pub labels: Vec<usize>,
    pub role: Role,
}

impl Dataset {
    pub fn new(inputs: Tensor2D, labels: Vec<usize>, role: Role) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::shape(
                "Dataset::new",
                format!("{} rows for {} labels", inputs.rows(), labels.len()),
            ));
        }
        Ok(Self {
            inputs,
            labels,
            role,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Rows whose label satisfies `keep`, in original order.
    pub fn filter(&self, keep: impl Fn(usize) -> bool) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.labels[i])).collect();
        self.subset(&idx)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            role: self.role,
        }
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &l in &self.labels {
            if l < classes {
                counts[l] += 1;
            }
        }
        counts
    }
}

/// Train and test data covering every class of a plan.
#[derive(Debug, Clone, PartialEq)]
pub struct FullData {
    pub train: Dataset,
    pub test: Dataset,
}

impl FullData {
    pub fn check_against(&self, plan: &SessionPlan) -> Result<()> {
        let total = plan.total_classes();
        for ds in [&self.train, &self.test] {
            if let Some(&bad) = ds.labels.iter().find(|&&l| l >= total) {
                return Err(Error::Input(format!(
                    "label {bad} outside the plan's {total} classes"
                )));
            }
        }
        if self.train.dim() != self.test.dim() {
            return Err(Error::Format("train and test widths differ".into()));
        }
        Ok(())
    }
}

/// Class mean plus isotropic Gaussian noise. Generation order: all class
/// means, then training samples class by class, then test samples class by
/// class.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    plan: &SessionPlan,
    rng: &mut Rng,
) -> Result<FullData> {
    if spec.input_dim == 0 || !(spec.noise > 0.0) || !(spec.radius > 0.0) {
        return Err(Error::Config(
            "synthetic spec needs input_dim >= 1, noise > 0, radius > 0".into(),
        ));
    }
    if spec.train_per_class < plan.shots || spec.test_per_class == 0 {
        return Err(Error::Config(format!(
            "train_per_class ({}) must cover k={} shots and test_per_class must be >= 1",
            spec.train_per_class, plan.shots
        )));
    }
    let classes = plan.total_classes();
    let dim = spec.input_dim;
    let mut means = Vec::with_capacity(classes);
    for _ in 0..classes {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let n = crate::numcore::tensor_norm(&v);
            if n > 0.0 {
                let m: Vec<f64> = v.iter().map(|x| spec.radius * x / n).collect();
                if !means.contains(&m) {
                    means.push(m);
                    break;
                }
            }
        }
    }
    let sample = |per_class: usize, role: Role, rng: &mut Rng| -> Result<Dataset> {
        let mut data = Vec::with_capacity(classes * per_class * dim);
        let mut labels = Vec::with_capacity(classes * per_class);
        for (c, mean) in means.iter().enumerate() {
            for _ in 0..per_class {
                data.extend(mean.iter().map(|m| m + spec.noise * rng.normal()));
                labels.push(c);
            }
        }
        Dataset::new(Tensor2D::from_vec(labels.len(), dim, data)?, labels, role)
    };
    let train = sample(spec.train_per_class, Role::Train, rng)?;
    let test = sample(spec.test_per_class, Role::Test, rng)?;
    Ok(FullData { train, test })
}

/// Training data for session `i`: every base-class sample for `i = 0`,
/// otherwise the first `k` samples of each of the session's `n` classes.
pub fn session_stream(full: &FullData, plan: &SessionPlan, i: usize) -> Result<Dataset> {
    plan.check_session(i)?;
    let classes = plan.session_classes(i);
    if i == 0 {
        return Ok(full.train.filter(|l| classes.contains(&l)));
    }
    let mut idx = Vec::with_capacity(plan.ways * plan.shots);
    for c in classes {
        let rows: Vec<usize> = (0..full.train.len())
            .filter(|&r| full.train.labels[r] == c)
            .take(plan.shots)
            .collect();
        if rows.len() < plan.shots {
            return Err(Error::Input(format!(
                "class {c} has {} training samples, need {}",
                rows.len(),
                plan.shots
            )));
        }
        idx.extend(rows);
    }
    Ok(full.train.subset(&idx))
}

/// Test samples of the base classes and of every novel class seen up to
/// session `i`.
pub fn eval_split(full: &FullData, plan: &SessionPlan, i: usize) -> Result<(Dataset, Dataset)> {
    plan.check_session(i)?;
    let k = plan.base_classes;
    let seen = plan.classes_seen(i);
    Ok((
        full.test.filter(|l| l < k),
        full.test.filter(|l| (k..seen).contains(&l)),
    ))
}

/// Reads `label,f1,…,fm` rows (with header).
pub fn load_flatfile(path: &Path, role: Role) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);
    let mut records = reader.records();
    let header = match records.next() {
        None => {
            return Err(Error::Parse {
                line: 1,
                msg: "empty file".into(),
            })
        }
        Some(r) => r.map_err(|e| csv_parse_error(&e))?,
    };
    if header.len() < 2 || header.get(0).map(str::trim) != Some("label") {
        return Err(Error::Parse {
            line: 1,
            msg: "header must be `label,f1,...,fm`".into(),
        });
    }
    let width = header.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| csv_parse_error(&e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width + 1 {
            return Err(Error::Format(format!(
                "line {line}: {} fields, header declares {}",
                rec.len(),
                width + 1
            )));
        }
        let label = rec[0].trim().parse::<usize>().map_err(|e| Error::Parse {
            line,
            msg: format!("label {:?}: {e}", &rec[0]),
        })?;
        for field in rec.iter().skip(1) {
            let v = field.trim().parse::<f64>().map_err(|e| Error::Parse {
                line,
                msg: format!("value {field:?}: {e}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("non-finite value {field:?}"),
                });
            }
            data.push(v);
        }
        labels.push(label);
    }
    Dataset::new(Tensor2D::from_vec(labels.len(), width, data)?, labels, role)
}

fn csv_parse_error(e: &csv::Error) -> Error {
    Error::Parse {
        line: e.position().map_or(0, |p| p.line()),
        msg: e.to_string(),
    }
}

/// Writes a dataset in the format [`load_flatfile`] reads. Values use the
/// shortest round-trip decimal form, so save/load is lossless.
pub fn save_flatfile(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::from("label");
    for j in 1..=ds.dim() {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for (r, &label) in ds.labels.iter().enumerate() {
        out.push_str(&label.to_string());
        for v in ds.inputs.row(r) {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_plan() -> SessionPlan {
        SessionPlan::new(4, 2, 5, 2, 0).unwrap()
    }

    #[test]
    fn profiles() {
        let p = SessionPlan::from_profile(Profile::CifarLike, DEFAULT_SHOTS, 0).unwrap();
        assert_eq!((p.base_classes, p.ways, p.shots, p.sessions), (60, 5, 5, 8));
        let p = SessionPlan::from_profile(Profile::CubLike, DEFAULT_SHOTS, 0).unwrap();
        assert_eq!(
            (p.base_classes, p.ways, p.shots, p.sessions),
            (100, 10, 5, 10)
        );
        let p = SessionPlan::from_profile(Profile::MiniLike, DEFAULT_SHOTS, 0).unwrap();
        assert_eq!((p.base_classes, p.ways, p.shots, p.sessions), (60, 5, 5, 8));
        assert_eq!(toy_plan().total_classes(), 8);
        assert!(matches!(
            SessionPlan::new(0, 2, 5, 2, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn session_ranges_partition_classes() {
        let p = SessionPlan::from_profile(Profile::CubLike, 5, 0).unwrap();
        let mut covered = vec![0; p.total_classes()];
        for i in 0..=p.sessions {
            for c in p.session_classes(i) {
                covered[c] += 1;
            }
        }
        assert!(covered.iter().all(|&c| c == 1));
    }

    #[test]
    fn degenerate_noise_hugs_the_mean() {
        let plan = toy_plan();
        let spec = SyntheticSpec {
            noise: 1e-9,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec, &plan, &mut Rng::new(3)).unwrap();
        // recover each class mean from its first sample, then check all
        for c in 0..plan.total_classes() {
            let rows: Vec<usize> = (0..data.train.len())
                .filter(|&r| data.train.labels[r] == c)
                .collect();
            let first = data.train.inputs.row(rows[0]).to_vec();
            for &r in &rows {
                for (a, b) in data.train.inputs.row(r).iter().zip(&first) {
                    assert!((a - b).abs() < 1e-6);
                }
            }
            let norm = crate::numcore::tensor_norm(&first);
            assert!((norm - spec.radius).abs() < 1e-6);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let plan = toy_plan();
        let spec = SyntheticSpec::default();
        let a = generate_synthetic(&spec, &plan, &mut Rng::new(9)).unwrap();
        let b = generate_synthetic(&spec, &plan, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.test.class_counts(8), vec![50; 8]);
    }

    #[test]
    fn streams_and_splits() {
        let plan = SessionPlan::from_profile(Profile::CifarLike, 5, 0).unwrap();
        let spec = SyntheticSpec {
            train_per_class: 8,
            test_per_class: 3,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec, &plan, &mut Rng::new(1)).unwrap();

        let s3 = session_stream(&data, &plan, 3).unwrap();
        assert_eq!(s3.len(), 25);
        let mut labels = s3.labels.clone();
        labels.dedup();
        assert_eq!(labels, (70..75).collect::<Vec<_>>());

        let s0 = session_stream(&data, &plan, 0).unwrap();
        let mut l0 = s0.labels.clone();
        l0.dedup();
        assert_eq!(l0, (0..60).collect::<Vec<_>>());

        assert!(matches!(
            session_stream(&data, &plan, 9),
            Err(Error::Input(_))
        ));

        let (base, novel) = eval_split(&data, &plan, 0).unwrap();
        assert!(novel.is_empty());
        assert_eq!(base.len(), 60 * 3);
        let (base, novel) = eval_split(&data, &plan, 8).unwrap();
        let mut nl = novel.labels.clone();
        nl.dedup();
        assert_eq!(nl.len(), 40);
        let mut all: Vec<usize> = base.labels.iter().chain(&novel.labels).copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn one_shot_stream() {
        let plan = SessionPlan::new(4, 3, 1, 2, 0).unwrap();
        let data = generate_synthetic(&SyntheticSpec::default(), &plan, &mut Rng::new(2)).unwrap();
        let s = session_stream(&data, &plan, 1).unwrap();
        assert_eq!(s.labels, vec![4, 5, 6]);
    }

    #[test]
    fn stream_takes_first_k_in_generation_order() {
        let plan = toy_plan();
        let data = generate_synthetic(&SyntheticSpec::default(), &plan, &mut Rng::new(4)).unwrap();
        let s = session_stream(&data, &plan, 2).unwrap();
        let first6: Vec<usize> = (0..data.train.len())
            .filter(|&r| data.train.labels[r] == 6)
            .take(5)
            .collect();
        for (i, &r) in first6.iter().enumerate() {
            assert_eq!(s.inputs.row(i), data.train.inputs.row(r));
        }
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let plan = toy_plan();
        let data = generate_synthetic(&SyntheticSpec::default(), &plan, &mut Rng::new(5)).unwrap();
        let p = dir.path().join("train.csv");
        save_flatfile(&data.train, &p).unwrap();
        let back = load_flatfile(&p, Role::Train).unwrap();
        assert_eq!(back, data.train);

        let tiny = dir.path().join("tiny.csv");
        std::fs::write(&tiny, "label,f1,f2\n0,1.5,2\n1,-3,4e-2\n").unwrap();
        let ds = load_flatfile(&tiny, Role::Test).unwrap();
        assert_eq!((ds.inputs.rows(), ds.inputs.cols()), (2, 2));
        assert_eq!(ds.labels, vec![0, 1]);

        let empty = dir.path().join("empty.csv");
        std::fs::write(&empty, "").unwrap();
        assert!(matches!(
            load_flatfile(&empty, Role::Train),
            Err(Error::Parse { .. })
        ));

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "label,f1\n0,1\n1,oops\n").unwrap();
        match load_flatfile(&bad, Role::Train) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }

        let ragged = dir.path().join("ragged.csv");
        std::fs::write(&ragged, "label,f1,f2\n0,1,2\n1,3\n").unwrap();
        assert!(matches!(
            load_flatfile(&ragged, Role::Train),
            Err(Error::Format(_))
        ));
    }
}
