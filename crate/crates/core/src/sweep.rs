//! Deferral-rate sweeps over in-distribution and corrupted test splits,
//! zero-deferral classification tables and seed replication.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{corrupt, CorruptionKind, CorruptionLevels, CorruptionSpec, Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::metrics::{auc, deferral_curve_point, pauc, CurvePoint};
use crate::pipelines::{train_one_stage, train_two_stage, train_uq, Artifacts, DeferralModel, Method, ModelSettings, ScoreRecord};
use crate::rng::derive_seed;

/// Evaluation condition: clean test split or a corrupted copy of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    Id,
    Corrupted(CorruptionKind, u8),
}

impl Condition {
    /// ID, noise 1..=5, blur 1..=5.
    pub fn all() -> Vec<Condition> {
        let mut out = vec![Condition::Id];
        for kind in [CorruptionKind::Noise, CorruptionKind::Blur] {
            out.extend((1..=5).map(|l| Condition::Corrupted(kind, l)));
        }
        out
    }

    pub fn name(self) -> &'static str {
        match self {
            Condition::Id => "id",
            Condition::Corrupted(kind, _) => kind.name(),
        }
    }

    pub fn level(self) -> u8 {
        match self {
            Condition::Id => 0,
            Condition::Corrupted(_, l) => l,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Id => f.write_str("id"),
            Condition::Corrupted(kind, l) => write!(f, "{}:{l}", kind.name()),
        }
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "id" {
            return Ok(Condition::Id);
        }
        let bad = || Error::Config(format!("condition must be 'id', 'noise:L' or 'blur:L' with L in 1..=5, got '{s}'"));
        let (kind, level) = s.split_once(':').ok_or_else(bad)?;
        let kind = match kind {
            "noise" => CorruptionKind::Noise,
            "blur" => CorruptionKind::Blur,
            _ => return Err(bad()),
        };
        let level: u8 = level.parse().map_err(|_| bad())?;
        if !(1..=5).contains(&level) {
            return Err(bad());
        }
        Ok(Condition::Corrupted(kind, level))
    }
}

impl Serialize for Condition {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Condition {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Which score range the thresholds span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdAnchor {
    /// The evaluated condition's own test scores.
    Condition,
    /// The clean test scores of the same model.
    Id,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepPlan {
    pub methods: Vec<Method>,
    pub steps: usize,
    pub alpha_grid: Vec<f64>,
    pub beta_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub conditions: Vec<Condition>,
    pub anchor: ThresholdAnchor,
}

impl Default for SweepPlan {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            steps: 200,
            alpha_grid: vec![1.0, 0.95, 0.9, 0.85, 0.8, 0.75, 0.7, 0.65, 0.6, 0.55],
            beta_grid: vec![2.0, 1.5, 1.2, 1.0, 0.8, 0.6, 0.5, 0.4, 0.3, 0.2],
            seeds: vec![0, 1, 2, 3, 4],
            conditions: Condition::all(),
            anchor: ThresholdAnchor::Condition,
        }
    }
}

impl SweepPlan {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::Config(format!("steps must be at least 2, got {}", self.steps)));
        }
        if self.seeds.is_empty() || self.methods.is_empty() || self.conditions.is_empty() {
            return Err(Error::Config("plan needs at least one seed, method and condition".into()));
        }
        let unique = |v: &[u64]| {
            let mut s = v.to_vec();
            s.sort_unstable();
            s.dedup();
            s.len() == v.len()
        };
        if !unique(&self.seeds) {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.methods.contains(&Method::LearnedOneStage) && self.alpha_grid.is_empty() {
            return Err(Error::Config("alpha_grid is empty".into()));
        }
        if self.methods.contains(&Method::LearnedTwoStage) && self.beta_grid.is_empty() {
            return Err(Error::Config("beta_grid is empty".into()));
        }
        if self.alpha_grid.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::Config("alpha values must lie in (0, 1]".into()));
        }
        if self.beta_grid.iter().any(|&b| !(b >= 0.0 && b.is_finite())) {
            return Err(Error::Config("beta values must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// `steps` thresholds from the maximum score down to the minimum. The last
/// sits just below the minimum, so the sweep ends with every input deferred.
/// Constant scores give a single threshold and `degenerate = true`.
pub fn thresholds(scores: &[f64], steps: usize) -> Result<(Vec<f64>, bool)> {
    if scores.is_empty() {
        return Err(Error::Empty("no scores to sweep".into()));
    }
    if steps < 2 {
        return Err(Error::Config("steps must be at least 2".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite uncertainty score".into()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    if max == min {
        return Ok((vec![max], true));
    }
    let last = steps - 1;
    let mut out: Vec<f64> = (0..last)
        .map(|i| max - (max - min) * i as f64 / last as f64)
        .collect();
    out.push(min.next_down());
    Ok((out, false))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCurve {
    /// `(threshold, point)` in sweep order.
    pub points: Vec<(f64, CurvePoint)>,
    /// All scores were equal, so the curve is a single point.
    pub degenerate: bool,
}

/// Curve of a score record over thresholds anchored on `anchor_scores`.
pub fn sweep_record(record: &ScoreRecord, labels: &[usize], anchor_scores: &[f64], steps: usize) -> Result<SweepCurve> {
    let (taus, degenerate) = thresholds(anchor_scores, steps)?;
    let points = taus
        .into_iter()
        .map(|tau| Ok((tau, deferral_curve_point(&record.decisions(tau), labels)?)))
        .collect::<Result<_>>()?;
    Ok(SweepCurve { points, degenerate })
}

/// Threshold sweep of a UQ model over a test set.
pub fn uq_sweep(model: &DeferralModel, test: &Dataset, steps: usize) -> Result<SweepCurve> {
    if model.method().is_learned() {
        return Err(Error::Usage(format!("{} has no threshold to sweep", model.method())));
    }
    let record = model.scores(test.features())?;
    sweep_record(&record, test.labels(), &record.uncertainty, steps)
}

/// One point of a learned-method sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedPoint {
    pub seed: u64,
    pub cost: f64,
    /// The point, or the training error message.
    pub outcome: std::result::Result<CurvePoint, String>,
}

/// Retrains once per grid value and seed; each model gives one point on the
/// test split. Training failures are recorded and the sweep continues.
pub fn learned_sweep(
    data: &Dataset,
    method: Method,
    grid: &[f64],
    seeds: &[u64],
    settings: &ModelSettings,
) -> Result<Vec<LearnedPoint>> {
    let test = data.subset(SplitTag::Test)?;
    let jobs: Vec<(u64, f64)> = seeds.iter().flat_map(|&s| grid.iter().map(move |&c| (s, c))).collect();
    let members: Vec<(u64, std::result::Result<Vec<crate::nnet::Network>, String>)> = if method == Method::LearnedTwoStage {
        seeds
            .iter()
            .map(|&s| {
                let m = train_uq(Method::Ensemble, data, settings, s).map_err(|e| e.to_string()).map(|m| match m.artifacts {
                    Artifacts::Ensemble(n) => n,
                    _ => unreachable!("ensemble training returns ensemble artifacts"),
                });
                (s, m)
            })
            .collect()
    } else {
        Vec::new()
    };
    jobs.into_par_iter()
        .map(|(seed, cost)| {
            let model = match method {
                Method::LearnedOneStage => train_one_stage(data, settings, seed, cost).map_err(|e| e.to_string()),
                Method::LearnedTwoStage => {
                    let m = &members.iter().find(|(s, _)| *s == seed).expect("members per seed").1;
                    m.clone().and_then(|m| train_two_stage(data, &m, settings, seed, cost).map_err(|e| e.to_string()))
                }
                other => return Err(Error::Usage(format!("{other} is not a learned method"))),
            };
            let outcome = model.and_then(|m| {
                let p = m.predict(test.features()).map_err(|e| e.to_string())?;
                deferral_curve_point(&p.decisions, test.labels()).map_err(|e| e.to_string())
            });
            Ok(LearnedPoint { seed, cost, outcome })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    /// bAcc undefined (everything deferred or a class missing).
    Absent,
    Failed,
}

impl Status {
    pub fn name(self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::Absent => "absent",
            Status::Failed => "failed",
        }
    }
}

pub const RESULT_HEADER: [&str; 14] = [
    "method",
    "condition",
    "level",
    "seed",
    "param_kind",
    "param_value",
    "deferral_rate",
    "bacc",
    "auc",
    "pauc",
    "acc0",
    "acc1",
    "frac_pos_deferred",
    "status",
];

pub const CLASSIFICATION_HEADER: [&str; 12] = [
    "method",
    "condition",
    "level",
    "seed",
    "param_kind",
    "param_value",
    "auc",
    "pauc",
    "bacc",
    "acc0",
    "acc1",
    "status",
];

/// One row of the results table. `auc` and `pauc` describe the model's
/// ranking of the whole test split; the rest refer to the operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: Method,
    pub condition: Condition,
    pub seed: u64,
    /// `threshold`, `alpha` or `beta`.
    pub param_kind: &'static str,
    pub param_value: Option<f64>,
    pub deferral_rate: Option<f64>,
    pub bacc: Option<f64>,
    pub auc: Option<f64>,
    pub pauc: Option<f64>,
    pub acc0: Option<f64>,
    pub acc1: Option<f64>,
    pub frac_pos_deferred: Option<f64>,
    pub status: Status,
}

fn field(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl ResultRow {
    pub fn fields(&self) -> Vec<String> {
        vec![
            self.method.name().into(),
            self.condition.name().into(),
            self.condition.level().to_string(),
            self.seed.to_string(),
            self.param_kind.into(),
            field(self.param_value),
            field(self.deferral_rate),
            field(self.bacc),
            field(self.auc),
            field(self.pauc),
            field(self.acc0),
            field(self.acc1),
            field(self.frac_pos_deferred),
            self.status.name().into(),
        ]
    }

    fn from_point(
        key: (Method, Condition, u64),
        param: (&'static str, f64),
        ranking: (Option<f64>, Option<f64>),
        p: &CurvePoint,
    ) -> Self {
        Self {
            method: key.0,
            condition: key.1,
            seed: key.2,
            param_kind: param.0,
            param_value: Some(param.1),
            deferral_rate: Some(p.deferral_rate),
            bacc: p.bacc,
            auc: ranking.0,
            pauc: ranking.1,
            acc0: p.acc0,
            acc1: p.acc1,
            frac_pos_deferred: Some(p.positive_deferred_fraction),
            status: if p.bacc.is_some() { Status::Ok } else { Status::Absent },
        }
    }

    fn failed(method: Method, condition: Condition, seed: u64, param_kind: &'static str, param_value: Option<f64>) -> Self {
        Self {
            method,
            condition,
            seed,
            param_kind,
            param_value,
            deferral_rate: None,
            bacc: None,
            auc: None,
            pauc: None,
            acc0: None,
            acc1: None,
            frac_pos_deferred: None,
            status: Status::Failed,
        }
    }
}

/// Zero-deferral classification metrics of one model on one condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationRow {
    pub method: Method,
    pub condition: Condition,
    pub seed: u64,
    /// For learned methods, the grid model with the lowest ID deferral
    /// rate, evaluated with its deferral class suppressed.
    pub param_kind: &'static str,
    pub param_value: Option<f64>,
    pub auc: Option<f64>,
    pub pauc: Option<f64>,
    pub bacc: Option<f64>,
    pub acc0: Option<f64>,
    pub acc1: Option<f64>,
    pub status: Status,
}

impl ClassificationRow {
    pub fn fields(&self) -> Vec<String> {
        vec![
            self.method.name().into(),
            self.condition.name().into(),
            self.condition.level().to_string(),
            self.seed.to_string(),
            self.param_kind.into(),
            field(self.param_value),
            field(self.auc),
            field(self.pauc),
            field(self.bacc),
            field(self.acc0),
            field(self.acc1),
            self.status.name().into(),
        ]
    }
}

fn param_kind(method: Method) -> &'static str {
    match method {
        Method::LearnedOneStage => "alpha",
        Method::LearnedTwoStage => "beta",
        _ => "threshold",
    }
}

fn model_label(t: &TrainedModel) -> String {
    match t.cost {
        Some(c) => format!("{} seed {} {}={c}", t.method, t.seed, param_kind(t.method)),
        None => format!("{} seed {}", t.method, t.seed),
    }
}

/// A trained model (or its training failure) with its provenance.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub method: Method,
    pub seed: u64,
    /// Position in the cost grid for learned methods, 0 otherwise.
    pub grid_index: usize,
    pub cost: Option<f64>,
    pub model: std::result::Result<DeferralModel, String>,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rows: Vec<ResultRow>,
    pub classification: Vec<ClassificationRow>,
    pub models: Vec<TrainedModel>,
    /// Human-readable notes: training failures and degenerate sweeps.
    pub notes: Vec<String>,
}

impl RunOutput {
    pub fn any_failed(&self) -> bool {
        self.models.iter().any(|m| m.model.is_err())
    }
}

/// Test split of `data` under `condition`. Corruption noise for a kind is
/// drawn from one seed shared by all its levels.
pub fn condition_test_set(data: &Dataset, condition: Condition, levels: &CorruptionLevels, seed: u64) -> Result<Dataset> {
    let corrupted = match condition {
        Condition::Id => data.clone(),
        Condition::Corrupted(kind, level) => {
            let spec = CorruptionSpec::new(kind, level, levels)?;
            corrupt(data, spec, derive_seed(seed, &[0xC0, kind as u64]))?
        }
    };
    corrupted.subset(SplitTag::Test)
}

/// Trains every model of the plan on the clean training split.
pub fn train_plan(data: &Dataset, plan: &SweepPlan, settings: &ModelSettings) -> Result<Vec<TrainedModel>> {
    plan.validate()?;
    settings.validate()?;
    let wants = |m| plan.methods.contains(&m);
    let mut first: Vec<(Method, u64, usize, Option<f64>)> = Vec::new();
    for &seed in &plan.seeds {
        for m in Method::ALL {
            let uq_needed = !m.is_learned() && (wants(m) || (m == Method::Ensemble && wants(Method::LearnedTwoStage)));
            if uq_needed {
                first.push((m, seed, 0, None));
            }
        }
        if wants(Method::LearnedOneStage) {
            first.extend(plan.alpha_grid.iter().enumerate().map(|(i, &a)| (Method::LearnedOneStage, seed, i, Some(a))));
        }
    }
    let stage_one: Vec<TrainedModel> = first
        .into_par_iter()
        .map(|(method, seed, grid_index, cost)| {
            let model = match cost {
                Some(alpha) => train_one_stage(data, settings, seed, alpha),
                None => train_uq(method, data, settings, seed),
            };
            TrainedModel { method, seed, grid_index, cost, model: model.map_err(|e| e.to_string()) }
        })
        .collect();
    let mut out = stage_one;
    if wants(Method::LearnedTwoStage) {
        let jobs: Vec<(u64, usize, f64)> = plan
            .seeds
            .iter()
            .flat_map(|&s| plan.beta_grid.iter().enumerate().map(move |(i, &b)| (s, i, b)))
            .collect();
        let two: Vec<TrainedModel> = jobs
            .into_par_iter()
            .map(|(seed, grid_index, beta)| {
                let ensemble = out
                    .iter()
                    .find(|t| t.method == Method::Ensemble && t.seed == seed)
                    .expect("ensemble trained for every seed");
                let model = match &ensemble.model {
                    Ok(DeferralModel { artifacts: Artifacts::Ensemble(members), .. }) => {
                        train_two_stage(data, members, settings, seed, beta).map_err(|e| e.to_string())
                    }
                    Ok(_) => unreachable!("ensemble training returns ensemble artifacts"),
                    Err(e) => Err(format!("stage-1 ensemble failed: {e}")),
                };
                TrainedModel { method: Method::LearnedTwoStage, seed, grid_index, cost: Some(beta), model }
            })
            .collect();
        out.extend(two);
    }
    // Ensembles trained only to feed stage 2 are kept for bundles but not
    // reported.
    out.sort_by_key(|t| (t.method, t.seed, t.grid_index));
    Ok(out)
}

struct Evaluated {
    key: (Method, usize, u64, usize),
    rows: Vec<ResultRow>,
    classification: Option<ClassificationRow>,
    /// ID deferral rate of a learned model, for choosing its classification row.
    id_rate: Option<f64>,
    note: Option<String>,
}

fn evaluate(
    trained: &TrainedModel,
    condition: Condition,
    cond_index: usize,
    test: &Dataset,
    id_test: &Dataset,
    plan: &SweepPlan,
) -> Evaluated {
    let key = (trained.method, cond_index, trained.seed, trained.grid_index);
    let kind = param_kind(trained.method);
    let model = match &trained.model {
        Ok(m) => m,
        Err(e) => {
            return Evaluated {
                key,
                rows: vec![ResultRow::failed(trained.method, condition, trained.seed, kind, trained.cost)],
                classification: None,
                id_rate: None,
                note: Some(format!("{} {condition}: not trained: {e}", model_label(trained))),
            }
        }
    };
    let result = (|| -> Result<Evaluated> {
        let labels = test.labels();
        let record = model.scores(test.features())?;
        let ranking = (auc(&record.positive_prob, labels), pauc(&record.positive_prob, labels));
        let zero = deferral_curve_point(&record.class_decisions(), labels)?;
        let classification = ClassificationRow {
            method: trained.method,
            condition,
            seed: trained.seed,
            param_kind: if trained.method.is_learned() { kind } else { "none" },
            param_value: trained.cost,
            auc: ranking.0,
            pauc: ranking.1,
            bacc: zero.bacc,
            acc0: zero.acc0,
            acc1: zero.acc1,
            status: if zero.bacc.is_some() { Status::Ok } else { Status::Absent },
        };
        let rk = (trained.method, condition, trained.seed);
        if let Some(cost) = trained.cost {
            let point = deferral_curve_point(&record.decisions(f64::INFINITY), labels)?;
            let id_rate = if condition == Condition::Id {
                Some(point.deferral_rate)
            } else {
                let id_record = model.scores(id_test.features())?;
                Some(deferral_curve_point(&id_record.decisions(f64::INFINITY), id_test.labels())?.deferral_rate)
            };
            return Ok(Evaluated {
                key,
                rows: vec![ResultRow::from_point(rk, (kind, cost), ranking, &point)],
                classification: Some(classification),
                id_rate,
                note: None,
            });
        }
        let anchor = match plan.anchor {
            ThresholdAnchor::Condition => record.uncertainty.clone(),
            ThresholdAnchor::Id => model.scores(id_test.features())?.uncertainty,
        };
        let curve = sweep_record(&record, labels, &anchor, plan.steps)?;
        let rows = curve
            .points
            .iter()
            .map(|(tau, p)| ResultRow::from_point(rk, (kind, *tau), ranking, p))
            .collect();
        let note = curve
            .degenerate
            .then(|| format!("{} seed {} {condition}: constant uncertainty scores, single-point curve", trained.method, trained.seed));
        Ok(Evaluated { key, rows, classification: Some(classification), id_rate: None, note })
    })();
    result.unwrap_or_else(|e| Evaluated {
        key,
        rows: vec![ResultRow::failed(trained.method, condition, trained.seed, kind, trained.cost)],
        classification: None,
        id_rate: None,
        note: Some(format!("{} {condition}: evaluation failed: {e}", model_label(trained))),
    })
}

/// Evaluates trained models on every condition of the plan. Rows are sorted
/// by (method, condition, seed, grid position, sweep step).
pub fn evaluate_plan(
    data: &Dataset,
    plan: &SweepPlan,
    models: &[TrainedModel],
    levels: &CorruptionLevels,
    corruption_seed: u64,
) -> Result<(Vec<ResultRow>, Vec<ClassificationRow>, Vec<String>)> {
    plan.validate()?;
    levels.validate()?;
    let id_test = data.subset(SplitTag::Test)?;
    let tests = plan
        .conditions
        .iter()
        .map(|&c| condition_test_set(data, c, levels, corruption_seed))
        .collect::<Result<Vec<_>>>()?;
    let reported: Vec<&TrainedModel> = models.iter().filter(|t| plan.methods.contains(&t.method)).collect();
    let jobs: Vec<(&TrainedModel, usize)> = reported
        .iter()
        .flat_map(|&t| (0..plan.conditions.len()).map(move |c| (t, c)))
        .collect();
    let mut evaluated: Vec<Evaluated> = jobs
        .into_par_iter()
        .map(|(t, c)| evaluate(t, plan.conditions[c], c, &tests[c], &id_test, plan))
        .collect();
    evaluated.sort_by_key(|e| e.key);

    let mut rows = Vec::new();
    let mut classification = Vec::new();
    let mut notes = Vec::new();
    let mut learned_best: Vec<(Method, usize, u64, f64, usize, ClassificationRow)> = Vec::new();
    for e in evaluated {
        rows.extend(e.rows);
        notes.extend(e.note);
        let Some(c) = e.classification else { continue };
        match e.id_rate {
            None => classification.push(c),
            Some(rate) => {
                let (method, cond, seed, grid) = e.key;
                let slot = learned_best.iter_mut().find(|b| b.0 == method && b.1 == cond && b.2 == seed);
                match slot {
                    Some(b) if rate < b.3 || (rate == b.3 && grid < b.4) => *b = (method, cond, seed, rate, grid, c),
                    Some(_) => {}
                    None => learned_best.push((method, cond, seed, rate, grid, c)),
                }
            }
        }
    }
    classification.extend(learned_best.into_iter().map(|b| b.5));
    let cond_pos = |c: Condition| plan.conditions.iter().position(|&x| x == c).unwrap_or(usize::MAX);
    classification.sort_by_key(|c| (c.method, cond_pos(c.condition), c.seed));
    Ok((rows, classification, notes))
}

/// Trains and evaluates the whole plan.
pub fn run_plan(
    data: &Dataset,
    plan: &SweepPlan,
    settings: &ModelSettings,
    levels: &CorruptionLevels,
    corruption_seed: u64,
) -> Result<RunOutput> {
    let models = train_plan(data, plan, settings)?;
    let (rows, classification, mut notes) = evaluate_plan(data, plan, &models, levels, corruption_seed)?;
    let training_notes: Vec<String> = models
        .iter()
        .filter_map(|t| t.model.as_ref().err().map(|e| format!("{}: training failed: {e}", model_label(t))))
        .collect();
    notes.splice(0..0, training_notes);
    Ok(RunOutput { rows, classification, models, notes })
}

/// Plans restricted to one condition; see [`run_plan`].
pub fn run_condition(
    data: &Dataset,
    plan: &SweepPlan,
    condition: Condition,
    settings: &ModelSettings,
    levels: &CorruptionLevels,
    corruption_seed: u64,
) -> Result<RunOutput> {
    let plan = SweepPlan { conditions: vec![condition], ..plan.clone() };
    run_plan(data, &plan, settings, levels, corruption_seed)
}

pub fn write_results_csv<W: std::io::Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RESULT_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.fields()).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_classification_csv<W: std::io::Write>(rows: &[ClassificationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CLASSIFICATION_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.fields()).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, split, SynthSpec};
    use crate::nnet::SgdConfig;

    #[test]
    fn threshold_endpoints() {
        let (t, degenerate) = thresholds(&[0.1, 0.5, 0.3, 0.5], 5).unwrap();
        assert!(!degenerate);
        assert_eq!(t.len(), 5);
        assert_eq!(t[0], 0.5);
        assert!(t[4] < 0.1 && t[3] > 0.1);
        assert!(t.windows(2).all(|w| w[1] < w[0]));
        let (c, degenerate) = thresholds(&[0.2; 4], 200).unwrap();
        assert!(degenerate);
        assert_eq!(c, vec![0.2]);
        assert!(thresholds(&[], 3).is_err());
        assert!(thresholds(&[0.1, 0.2], 1).is_err());
    }

    fn record(unc: Vec<f64>, prob: Vec<f64>) -> ScoreRecord {
        ScoreRecord { positive_prob: prob, uncertainty: unc, learned: None }
    }

    #[test]
    fn sweep_rates_rise_to_one_and_final_point_is_absent() {
        let r = record(vec![0.9, 0.1, 0.5, 0.5, 0.2, 0.7], vec![0.9, 0.2, 0.6, 0.4, 0.1, 0.3]);
        let labels = [1, 0, 1, 0, 0, 1];
        let curve = sweep_record(&r, &labels, &r.uncertainty, 50).unwrap();
        let rates: Vec<f64> = curve.points.iter().map(|p| p.1.deferral_rate).collect();
        assert!(rates.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(rates[0], 0.0);
        let last = curve.points.last().unwrap().1;
        assert_eq!(last.deferral_rate, 1.0);
        assert!(last.bacc.is_none());
    }

    #[test]
    fn oracle_scores_reach_perfect_remainder_at_error_mass() {
        let prob = vec![0.9, 0.8, 0.2, 0.1, 0.7, 0.3, 0.6, 0.4, 0.95, 0.05];
        let labels = [1, 1, 0, 0, 0, 1, 1, 0, 1, 0];
        let wrong: Vec<f64> = prob
            .iter()
            .zip(&labels)
            .map(|(&p, &y)| f64::from(usize::from(p >= 0.5) != y))
            .collect();
        let error_mass = wrong.iter().sum::<f64>() / labels.len() as f64;
        let r = record(wrong.clone(), prob);
        let curve = sweep_record(&r, &labels, &wrong, 200).unwrap();
        let first_perfect = curve.points.iter().find(|p| p.1.bacc == Some(1.0)).unwrap().1;
        assert!((first_perfect.deferral_rate - error_mass).abs() <= 1.0 / labels.len() as f64);
    }

    #[test]
    fn condition_text_round_trip() {
        for c in Condition::all() {
            assert_eq!(c.to_string().parse::<Condition>().unwrap(), c);
        }
        assert_eq!(Condition::all().len(), 11);
        assert!("noise:0".parse::<Condition>().is_err());
        assert!("fog:1".parse::<Condition>().is_err());
    }

    #[test]
    fn plan_validation() {
        assert!(SweepPlan::default().validate().is_ok());
        assert!(SweepPlan { steps: 1, ..SweepPlan::default() }.validate().is_err());
        assert!(SweepPlan { seeds: vec![], ..SweepPlan::default() }.validate().is_err());
        assert!(SweepPlan { seeds: vec![1, 1], ..SweepPlan::default() }.validate().is_err());
        assert!(SweepPlan { alpha_grid: vec![1.2], ..SweepPlan::default() }.validate().is_err());
    }

    fn tiny() -> (Dataset, ModelSettings) {
        let spec = SynthSpec { positive_fraction: 0.2, ..SynthSpec::image(500, 6, 6, 0.15, 3) };
        let data = split(&generate(&spec).unwrap(), 3).unwrap();
        let sgd = SgdConfig { epochs: 4, batch_size: 32, ..SgdConfig::default() };
        let settings = ModelSettings {
            hidden_dims: vec![8],
            sgd: sgd.clone(),
            n_samples: 2,
            stage2_hidden_dims: vec![4],
            stage2_sgd: sgd,
            ..ModelSettings::default()
        };
        (data, settings)
    }

    #[test]
    fn small_plan_runs_and_is_ordered() {
        let (data, settings) = tiny();
        let plan = SweepPlan {
            methods: vec![Method::Softmax, Method::LearnedTwoStage],
            steps: 10,
            alpha_grid: vec![1.0],
            beta_grid: vec![0.5, 10.0],
            seeds: vec![1, 0],
            conditions: vec![Condition::Id, Condition::Corrupted(CorruptionKind::Blur, 2)],
            anchor: ThresholdAnchor::Condition,
        };
        let out = run_plan(&data, &plan, &settings, &CorruptionLevels::default(), 0).unwrap();
        // softmax: 2 seeds x 2 conditions x 10 steps; two-stage: 2 x 2 x 2.
        assert_eq!(out.rows.len(), 40 + 8);
        assert!(out.rows[..40].iter().all(|r| r.method == Method::Softmax));
        assert_eq!(out.rows[0].seed, 0);
        assert_eq!(out.rows[0].condition, Condition::Id);
        // The stage-1 ensembles are trained but not reported.
        assert!(out.models.iter().any(|m| m.method == Method::Ensemble));
        assert!(out.rows.iter().all(|r| r.method != Method::Ensemble));
        // One classification row per (method, condition, seed).
        assert_eq!(out.classification.len(), 2 * 2 * 2);
        let again = run_plan(&data, &plan, &settings, &CorruptionLevels::default(), 0).unwrap();
        assert_eq!(again.rows, out.rows);
    }

    #[test]
    fn large_beta_defers_almost_everything() {
        let (data, settings) = tiny();
        let points = learned_sweep(&data, Method::LearnedTwoStage, &[10.0], &[0], &settings).unwrap();
        let p = points[0].outcome.as_ref().unwrap();
        assert!(p.deferral_rate > 0.9, "{}", p.deferral_rate);
    }

    #[test]
    fn uq_sweep_rejects_learned_models() {
        let (data, settings) = tiny();
        let m = train_one_stage(&data, &settings, 0, 0.9).unwrap();
        let test = data.subset(SplitTag::Test).unwrap();
        assert!(matches!(uq_sweep(&m, &test, 10), Err(Error::Usage(_))));
        let softmax = train_uq(Method::Softmax, &data, &settings, 0).unwrap();
        let curve = uq_sweep(&softmax, &test, 10).unwrap();
        assert_eq!(curve.points.len(), 10);
        assert!(curve.points.iter().all(|p| p.1.evaluated + p.1.deferred == test.len()));
    }
}
