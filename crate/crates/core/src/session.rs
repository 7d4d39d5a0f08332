//! The incremental protocol: base training, per-session updates under each
//! [`UpdateMode`], prototype classifiers, and multi-seed runs.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{session_stream, Dataset, FullData, SessionPlan};
use crate::error::{Error, Result};
use crate::eval::{evaluate_session, EvalReport};
use crate::nn::{
    sgd_step, Classifier, Extractor, ExtractorConfig, Group, ModelState, ParamGroups, RowOrigin,
    SgdParams, TrainConfig,
};
use crate::numcore::{argmax, Rng, Tensor2D};

/// RNG stream ids, split off the per-seed root generator.
const STREAM_INIT: u64 = 1;
const STREAM_BATCHES: u64 = 2;
const STREAM_SESSION_BASE: u64 = 100;

/// What a novel session is allowed to change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UpdateMode {
    /// Nothing trains; `hⁱ` stays at its random initialization.
    M1,
    /// `hⁱ`.
    M2,
    /// `h¹..hⁱ⁻¹` and `hⁱ`.
    M3,
    /// `h⁰`, `h¹..hⁱ⁻¹` and `hⁱ`.
    M4,
    /// Everything, extractor included.
    M5,
    /// No training; normalized prototypes for every classifier, including a
    /// replacement of `h⁰` after the base session.
    #[serde(rename = "NONPC")]
    NoNpc,
    /// SGD base classifier, unnormalized novel prototypes.
    #[serde(rename = "ABL_P")]
    AblP,
    /// SGD base classifier, normalized novel prototypes.
    #[serde(rename = "ABL_NP_NOVEL_ONLY")]
    AblNpNovelOnly,
}

/// How `hⁱ` is created at the start of session `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NovelInit {
    Random,
    Prototype { normalize: bool },
}

impl UpdateMode {
    pub const ALL: [UpdateMode; 8] = [
        UpdateMode::M1,
        UpdateMode::M2,
        UpdateMode::M3,
        UpdateMode::M4,
        UpdateMode::M5,
        UpdateMode::NoNpc,
        UpdateMode::AblP,
        UpdateMode::AblNpNovelOnly,
    ];

    pub fn trained_groups(self) -> &'static [Group] {
        use Group::*;
        match self {
            UpdateMode::M2 => &[Current],
            UpdateMode::M3 => &[Previous, Current],
            UpdateMode::M4 => &[Base, Previous, Current],
            UpdateMode::M5 => &[Extractor, Base, Previous, Current],
            UpdateMode::M1 | UpdateMode::NoNpc | UpdateMode::AblP | UpdateMode::AblNpNovelOnly => {
                &[]
            }
        }
    }

    pub fn trains(self) -> bool {
        !self.trained_groups().is_empty()
    }

    pub fn novel_init(self) -> NovelInit {
        match self {
            UpdateMode::NoNpc | UpdateMode::AblNpNovelOnly => {
                NovelInit::Prototype { normalize: true }
            }
            UpdateMode::AblP => NovelInit::Prototype { normalize: false },
            _ => NovelInit::Random,
        }
    }

    /// Whether `h⁰` is replaced by normalized base prototypes after base
    /// training.
    pub fn snapshots_base(self) -> bool {
        self == UpdateMode::NoNpc
    }

    pub fn name(self) -> &'static str {
        match self {
            UpdateMode::M1 => "M1",
            UpdateMode::M2 => "M2",
            UpdateMode::M3 => "M3",
            UpdateMode::M4 => "M4",
            UpdateMode::M5 => "M5",
            UpdateMode::NoNpc => "NONPC",
            UpdateMode::AblP => "ABL_P",
            UpdateMode::AblNpNovelOnly => "ABL_NP_NOVEL_ONLY",
        }
    }
}

impl fmt::Display for UpdateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for UpdateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        UpdateMode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown update mode {s:?}")))
    }
}

/// Novel-session fine-tuning settings (full batch over the `n·k` shots).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NovelTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    pub label_smoothing: f64,
    /// Standard deviation of the Gaussian initialization of `hⁱ`.
    pub init_std: f64,
}

impl Default for NovelTrainConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            nesterov: true,
            label_smoothing: 0.0,
            init_std: 0.01,
        }
    }
}

impl NovelTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("novel steps must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "novel lr > 0, 0 <= momentum < 1, weight_decay >= 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) || !(self.init_std >= 0.0) {
            return Err(Error::Config(
                "novel label_smoothing in [0, 1), init_std >= 0".into(),
            ));
        }
        Ok(())
    }

    fn sgd(&self) -> SgdParams {
        SgdParams {
            lr: self.lr,
            momentum: self.momentum,
            nesterov: self.nesterov,
            weight_decay: self.weight_decay,
        }
    }
}

/// Everything except the plan, data, mode and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub extractor: ExtractorConfig,
    pub base: TrainConfig,
    pub novel: NovelTrainConfig,
    pub probe_classes: Vec<usize>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            extractor: ExtractorConfig::default(),
            base: TrainConfig::default(),
            novel: NovelTrainConfig::default(),
            probe_classes: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Fraction of minibatch samples classified correctly during the epoch.
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

/// Fresh model: He-initialized extractor, uniform `h⁰`.
pub fn init_model(cfg: &ExtractorConfig, base_classes: usize, rng: &mut Rng) -> Result<ModelState> {
    let extractor = Extractor::new(cfg, rng)?;
    let base = Classifier::uniform(base_classes, cfg.feature_dim, rng);
    ModelState::new(extractor, base)
}

/// Minibatch SGD on `f` and `h⁰` with smoothed cross-entropy.
pub fn train_base(
    model: &mut ModelState,
    base_data: &Dataset,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<TrainLog> {
    cfg.validate()?;
    if model.session() != 0 {
        return Err(Error::Input(
            "base training on a model that already has novel sessions".into(),
        ));
    }
    if base_data.is_empty() {
        return Err(Error::Input("empty base dataset".into()));
    }
    let k = model.base_classes();
    if let Some(&bad) = base_data.labels.iter().find(|&&l| l >= k) {
        return Err(Error::Input(format!("base label {bad} outside [0, {k})")));
    }
    let mut groups = ParamGroups::training(&[Group::Extractor, Group::Base]);
    let mode = groups.extractor_mode();
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..base_data.len()).collect();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let sgd = cfg.sgd_at(epoch);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let x = base_data.inputs.select_rows(batch);
            let labels: Vec<usize> = batch.iter().map(|&i| base_data.labels[i]).collect();
            let out = model
                .loss_and_grads(&x, &labels, cfg.label_smoothing, mode, true)
                .map_err(|e| at_epoch(e, epoch))?;
            if !out.loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    msg: format!("loss became {}", out.loss),
                });
            }
            loss_sum += out.loss * batch.len() as f64;
            correct += out
                .logits
                .iter_rows()
                .zip(&labels)
                .filter(|(row, &l)| argmax(row) == Some(l))
                .count();
            sgd_step(model, &mut groups, &out.grads, &sgd)?;
        }
        if !model
            .extractor
            .param_slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
        {
            return Err(Error::Training {
                epoch,
                msg: "non-finite extractor parameters".into(),
            });
        }
        log.epochs.push(EpochLog {
            epoch,
            lr: sgd.lr,
            loss: loss_sum / base_data.len() as f64,
            accuracy: correct as f64 / base_data.len() as f64,
        });
    }
    model.base.mark(RowOrigin::SgdTrained);
    Ok(log)
}

fn at_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::Training { msg, .. } => Error::Training { epoch, msg },
        e => e,
    }
}

/// Mean inference-mode feature of each class in `classes`, one row per
/// class in order.
pub fn class_means(model: &ModelState, data: &Dataset, classes: Range<usize>) -> Result<Tensor2D> {
    let features = model.features(&data.inputs)?;
    let d = features.cols();
    let mut sums = Tensor2D::zeros(classes.len(), d);
    let mut counts = vec![0usize; classes.len()];
    for (row, &label) in features.iter_rows().zip(&data.labels) {
        if classes.contains(&label) {
            let j = label - classes.start;
            counts[j] += 1;
            sums.row_mut(j)
                .iter_mut()
                .zip(row)
                .for_each(|(s, v)| *s += v);
        }
    }
    if let Some(j) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Input(format!(
            "class {} has no samples",
            classes.start + j
        )));
    }
    for (j, &c) in counts.iter().enumerate() {
        sums.row_mut(j).iter_mut().for_each(|s| *s /= c as f64);
    }
    Ok(sums)
}

/// Replaces `h⁰` by the L2-normalized mean feature of each base class over
/// all of `base_data`. The extractor is untouched.
pub fn snapshot_base_as_prototypes(model: &mut ModelState, base_data: &Dataset) -> Result<()> {
    let means = class_means(model, base_data, 0..model.base_classes())?;
    model.base = Classifier::from_prototypes(means, true);
    Ok(())
}

/// Prototype classifier `cⱼ = mean f(x)` over the shots of each class in
/// `classes`, optionally L2-normalized.
pub fn novel_prototypes(
    model: &ModelState,
    session_data: &Dataset,
    classes: Range<usize>,
    normalize: bool,
) -> Result<Classifier> {
    let means = class_means(model, session_data, classes)?;
    Ok(Classifier::from_prototypes(means, normalize))
}

/// What a novel session left behind.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutcome {
    pub session: usize,
    /// Optimizer state, `None` when the mode trains nothing.
    pub optimizer: Option<ParamGroups>,
    pub final_loss: Option<f64>,
}

/// Applies session `model.session() + 1`: appends `hⁱ` and, for training
/// modes, runs `ncfg.steps` full-batch SGD steps on the session's shots with
/// the loss taken over every seen class.
pub fn run_novel_session(
    model: &mut ModelState,
    plan: &SessionPlan,
    session_data: &Dataset,
    mode: UpdateMode,
    ncfg: &NovelTrainConfig,
    rng: &mut Rng,
) -> Result<SessionOutcome> {
    let i = model.session() + 1;
    if i > plan.sessions {
        return Err(Error::Config(format!(
            "plan has only {} sessions",
            plan.sessions
        )));
    }
    if model.base_classes() != plan.base_classes {
        return Err(Error::Config(format!(
            "model has {} base classes, plan {}",
            model.base_classes(),
            plan.base_classes
        )));
    }
    let classes = plan.session_classes(i);
    if session_data.is_empty() {
        return Err(Error::Config(format!("session {i} has no data")));
    }
    if let Some(&bad) = session_data.labels.iter().find(|l| !classes.contains(l)) {
        return Err(Error::Config(format!(
            "session {i} data has label {bad}, expected {classes:?}"
        )));
    }
    let classifier = match mode.novel_init() {
        NovelInit::Random => Classifier::random(plan.ways, model.feature_dim(), ncfg.init_std, rng),
        NovelInit::Prototype { normalize } => {
            novel_prototypes(model, session_data, classes, normalize)?
        }
    };
    model.push_novel(classifier)?;
    if !mode.trains() {
        return Ok(SessionOutcome {
            session: i,
            optimizer: None,
            final_loss: None,
        });
    }

    ncfg.validate()?;
    let mut groups = ParamGroups::training(mode.trained_groups());
    let emode = groups.extractor_mode();
    let train_f = !groups.is_frozen(Group::Extractor);
    let sgd = ncfg.sgd();
    let mut last = None;
    for step in 0..ncfg.steps {
        let out = model
            .loss_and_grads(
                &session_data.inputs,
                &session_data.labels,
                ncfg.label_smoothing,
                emode,
                train_f,
            )
            .map_err(|e| match at_epoch(e, step) {
                Error::Training { epoch, msg } => Error::Training {
                    epoch,
                    msg: format!("session {i}: {msg}"),
                },
                e => e,
            })?;
        if !out.loss.is_finite() {
            return Err(Error::Training {
                epoch: step,
                msg: format!("session {i}: loss became {}", out.loss),
            });
        }
        last = Some(out.loss);
        sgd_step(model, &mut groups, &out.grads, &sgd)?;
    }
    for g in mode.trained_groups() {
        match g {
            Group::Base => model.base.mark(RowOrigin::SgdTrained),
            Group::Previous => {
                let n = model.novel.len() - 1;
                model.novel[..n]
                    .iter_mut()
                    .for_each(|c| c.mark(RowOrigin::SgdTrained));
            }
            Group::Current => model
                .novel
                .last_mut()
                .expect("just pushed")
                .mark(RowOrigin::SgdTrained),
            Group::Extractor => {}
        }
    }
    Ok(SessionOutcome {
        session: i,
        optimizer: Some(groups),
        final_loss: last,
    })
}

/// Initializes and trains the base model for one seed.
pub fn train_base_for_seed(
    plan: &SessionPlan,
    data: &FullData,
    cfg: &ProtocolConfig,
    seed: u64,
) -> Result<(ModelState, TrainLog)> {
    data.check_against(plan)?;
    let root = Rng::new(seed);
    let mut model = init_model(
        &cfg.extractor,
        plan.base_classes,
        &mut root.split(STREAM_INIT),
    )?;
    let base_data = session_stream(data, plan, 0)?;
    let log = train_base(
        &mut model,
        &base_data,
        &cfg.base,
        &mut root.split(STREAM_BATCHES),
    )?;
    Ok((model, log))
}

/// Runs sessions `0..=S` from a trained base model, evaluating after each.
/// `observe` sees the model after every evaluation.
pub fn run_sessions_with<F>(
    base_model: &ModelState,
    plan: &SessionPlan,
    data: &FullData,
    cfg: &ProtocolConfig,
    mode: UpdateMode,
    seed: u64,
    mut observe: F,
) -> Result<EvalReport>
where
    F: FnMut(usize, &ModelState),
{
    let root = Rng::new(seed);
    let mut model = base_model.clone();
    if mode.snapshots_base() {
        let base_data = session_stream(data, plan, 0)?;
        snapshot_base_as_prototypes(&mut model, &base_data)?;
    }
    let mut report = EvalReport::new(seed);
    let (row, profile) = evaluate_session(&model, data, plan, 0, &cfg.probe_classes)?;
    report.push(row, profile);
    observe(0, &model);
    for i in 1..=plan.sessions {
        let session_data = session_stream(data, plan, i)?;
        let mut rng = root.split(STREAM_SESSION_BASE + i as u64);
        run_novel_session(&mut model, plan, &session_data, mode, &cfg.novel, &mut rng)?;
        let (row, profile) = evaluate_session(&model, data, plan, i, &cfg.probe_classes)?;
        report.push(row, profile);
        observe(i, &model);
    }
    Ok(report)
}

pub fn run_sessions(
    base_model: &ModelState,
    plan: &SessionPlan,
    data: &FullData,
    cfg: &ProtocolConfig,
    mode: UpdateMode,
    seed: u64,
) -> Result<EvalReport> {
    run_sessions_with(base_model, plan, data, cfg, mode, seed, |_, _| {})
}

/// Full protocol for each seed in order: base training, then every novel
/// session under `mode`.
pub fn run_protocol(
    plan: &SessionPlan,
    data: &FullData,
    cfg: &ProtocolConfig,
    mode: UpdateMode,
    seeds: &[u64],
) -> Result<Vec<EvalReport>> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    seeds
        .iter()
        .map(|&seed| {
            let (base, _) = train_base_for_seed(plan, data, cfg, seed)?;
            run_sessions(&base, plan, data, cfg, mode, seed)
        })
        .collect()
}
