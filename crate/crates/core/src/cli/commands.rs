//! `run`, `compare-modes`, `sweep-smoothing` and `report`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::{ExperimentConfig, Manifest, Resolved, MANIFEST_FORMAT};
use crate::error::{Error, Result};
use crate::eval::{EvalReport, Key, Tables};
use crate::session::{run_protocol, run_sessions, train_base_for_seed, UpdateMode};

pub const REPORTS_CSV: &str = "reports.csv";
pub const AGGREGATE_CSV: &str = "aggregate.csv";
pub const LOGITS_CSV: &str = "logits.csv";
pub const ROW_NORMS_CSV: &str = "row_norms.csv";
pub const MANIFEST_JSON: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Run,
    CompareModes,
    SweepSmoothing,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Run => "run",
            Command::CompareModes => "compare-modes",
            Command::SweepSmoothing => "sweep-smoothing",
        }
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    pub modes: Option<Vec<UpdateMode>>,
    pub smoothing: Option<Vec<f64>>,
    pub jobs: usize,
    pub overwrite: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<PathBuf> {
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        if let Some(m) = &self.modes {
            cfg.modes = m.clone();
        }
        if let Some(e) = &self.smoothing {
            cfg.smoothing = e.clone();
        }
        if let Some(o) = &self.out {
            cfg.output = Some(o.clone());
        }
        cfg.check()?;
        cfg.output
            .clone()
            .ok_or_else(|| Error::Config("no output directory: pass --out or set `output`".into()))
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

/// Runs `f` over `cells` on `jobs` workers; results keep cell order.
fn par_cells<C, T, F>(jobs: usize, cells: &[C], f: F) -> Result<Vec<T>>
where
    C: Sync,
    T: Send,
    F: Fn(&C) -> Result<T> + Sync + Send,
{
    pool(jobs)?
        .install(|| cells.par_iter().map(&f).collect::<Vec<_>>())
        .into_iter()
        .collect()
}

fn run_tables(r: &Resolved, cfg: &ExperimentConfig, jobs: usize) -> Result<Tables> {
    let reports = par_cells(jobs, &cfg.seeds, |&seed| {
        run_protocol(&r.plan, &r.data, &r.protocol, cfg.mode, &[seed]).map(|mut v| v.remove(0))
    })?;
    let mut t = Tables::new(None);
    t.add(None, &reports)?;
    Ok(t)
}

fn compare_tables(r: &Resolved, cfg: &ExperimentConfig, jobs: usize) -> Result<Tables> {
    // one base checkpoint per seed, shared by every mode
    let per_seed: Vec<Vec<EvalReport>> = par_cells(jobs, &cfg.seeds, |&seed| {
        let (base, _) = train_base_for_seed(&r.plan, &r.data, &r.protocol, seed)?;
        cfg.modes
            .iter()
            .map(|&m| run_sessions(&base, &r.plan, &r.data, &r.protocol, m, seed))
            .collect()
    })?;
    let mut t = Tables::new(Some("mode"));
    for (mi, mode) in cfg.modes.iter().enumerate() {
        let reports: Vec<EvalReport> = per_seed.iter().map(|s| s[mi].clone()).collect();
        t.add(
            Some(Key {
                name: "mode",
                value: mode.name(),
            }),
            &reports,
        )?;
    }
    Ok(t)
}

fn sweep_tables(r: &Resolved, cfg: &ExperimentConfig, jobs: usize) -> Result<Tables> {
    let cells: Vec<(f64, u64)> = cfg
        .smoothing
        .iter()
        .flat_map(|&e| cfg.seeds.iter().map(move |&s| (e, s)))
        .collect();
    let reports = par_cells(jobs, &cells, |&(eps, seed)| {
        let mut protocol = r.protocol.clone();
        protocol.base.label_smoothing = eps;
        run_protocol(&r.plan, &r.data, &protocol, UpdateMode::NoNpc, &[seed])
            .map(|mut v| v.remove(0))
    })?;
    let mut t = Tables::new(Some("epsilon"));
    for (chunk, eps) in reports.chunks(cfg.seeds.len()).zip(&cfg.smoothing) {
        let value = eps.to_string();
        t.add(
            Some(Key {
                name: "epsilon",
                value: &value,
            }),
            chunk,
        )?;
    }
    Ok(t)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))
}

/// Loads the config, runs `cmd` and writes its artifacts; returns the
/// output directory.
pub fn execute(cmd: Command, config: &Path, ov: &Overrides) -> Result<PathBuf> {
    let mut cfg = ExperimentConfig::load(config)?;
    let out = ov.apply(&mut cfg)?;
    execute_config(cmd, &cfg, &out, ov.jobs, ov.overwrite)?;
    Ok(out)
}

pub fn execute_config(
    cmd: Command,
    cfg: &ExperimentConfig,
    out: &Path,
    jobs: usize,
    overwrite: bool,
) -> Result<()> {
    if out.join(MANIFEST_JSON).exists() && !overwrite {
        return Err(Error::Config(format!(
            "{} already holds results; pass --overwrite to replace them",
            out.display()
        )));
    }
    let resolved = cfg.resolve()?;
    let tables = match cmd {
        Command::Run => run_tables(&resolved, cfg, jobs)?,
        Command::CompareModes => compare_tables(&resolved, cfg, jobs)?,
        Command::SweepSmoothing => sweep_tables(&resolved, cfg, jobs)?,
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let files = [
        (REPORTS_CSV, &tables.reports),
        (AGGREGATE_CSV, &tables.aggregate),
        (LOGITS_CSV, &tables.logits),
        (ROW_NORMS_CSV, &tables.row_norms),
    ];
    for (name, table) in files {
        write(out, name, &table.render()?)?;
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: cmd.name().into(),
        plan: resolved.plan,
        artifacts: files.iter().map(|(n, _)| n.to_string()).collect(),
        // location-independent: reruns take --out or the manifest's directory
        config: ExperimentConfig {
            output: None,
            ..cfg.clone()
        },
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    write(out, MANIFEST_JSON, &json)
}

/// Final-session summary of `aggregate.csv`, one line per key. Values are
/// printed exactly as stored.
pub fn report(dir: &Path) -> Result<String> {
    let path = dir.join(AGGREGATE_CSV);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = rdr.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("{}: missing column {name}", path.display())))
    };
    let keyed = header.get(0) != Some("session");
    let idx = [
        col("session")?,
        col("base_mean")?,
        col("base_std")?,
        col("novel_mean")?,
        col("novel_std")?,
        col("weighted_mean")?,
        col("weighted_std")?,
        col("n_seeds")?,
    ];
    // last row per key, keys in first-seen order
    let mut last: Vec<(String, csv::StringRecord)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let key = if keyed {
            rec[0].to_string()
        } else {
            "-".to_string()
        };
        match last.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = rec,
            None => last.push((key, rec)),
        }
    }
    if last.is_empty() {
        return Err(Error::Format(format!("{}: no rows", path.display())));
    }
    let key_name = if keyed {
        header[0].to_string()
    } else {
        "run".to_string()
    };
    let mut rows = vec![[
        key_name,
        "session".into(),
        "base".into(),
        "novel".into(),
        "weighted".into(),
        "seeds".into(),
    ]];
    for (key, r) in &last {
        let pm = |m: usize, s: usize| {
            if r[idx[m]].is_empty() {
                "-".to_string()
            } else {
                format!("{} ± {}", &r[idx[m]], &r[idx[s]])
            }
        };
        rows.push([
            key.clone(),
            r[idx[0]].to_string(),
            pm(1, 2),
            pm(3, 4),
            pm(5, 6),
            r[idx[7]].to_string(),
        ]);
    }
    let widths: Vec<usize> = (0..6)
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for r in &rows {
        let line: Vec<String> = r
            .iter()
            .zip(&widths)
            .map(|(v, w)| format!("{v:<w$}"))
            .collect();
        s.push_str(line.join("  ").trim_end());
        s.push('\n');
    }
    Ok(s)
}
