//! Training and inference for all seven deferral methods behind one
//! `DeferralModel` type, plus model bundles on disk.
//!
//! UQ methods defer when their uncertainty exceeds a threshold and otherwise
//! predict positive when the mean positive-class probability is at least
//! 0.5. Learned methods take the argmax over `n + 1` logits, the last of
//! which is the deferral class.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ParamFile;
use crate::data::{oversample_weights, Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::losses::{softmax, LossSpec, OneStageCost, TwoStageCost};
use crate::metrics::{pauc, Decision};
use crate::nnet::{train, Checkpoint, NetConfig, Network, SgdConfig};
use crate::rng::derive_seed;
use crate::uq::{
    bnn_predict, bnn_train, ensemble_predict, mc_dropout_predict, softmax_uncertainty, swag_collect, swag_predict,
    BnnConfig, BnnPosterior, MonteCarloPrediction, SamplerConfig, SwagConfig, SwagPosterior,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Softmax,
    Ensemble,
    Swag,
    McDropout,
    Bnn,
    LearnedOneStage,
    LearnedTwoStage,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Softmax,
        Method::Ensemble,
        Method::Swag,
        Method::McDropout,
        Method::Bnn,
        Method::LearnedOneStage,
        Method::LearnedTwoStage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Softmax => "softmax",
            Method::Ensemble => "ensemble",
            Method::Swag => "swag",
            Method::McDropout => "mc_dropout",
            Method::Bnn => "bnn",
            Method::LearnedOneStage => "learned_one_stage",
            Method::LearnedTwoStage => "learned_two_stage",
        }
    }

    pub fn is_learned(self) -> bool {
        matches!(self, Method::LearnedOneStage | Method::LearnedTwoStage)
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Architecture and optimiser settings shared by every method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub hidden_dims: Vec<usize>,
    /// `seed` is replaced per model.
    pub sgd: SgdConfig,
    /// Ensemble size and number of Monte-Carlo draws.
    pub n_samples: usize,
    pub mc_dropout_rate: f64,
    pub swag: SwagConfig,
    pub bnn: BnnConfig,
    pub stage2_hidden_dims: Vec<usize>,
    pub stage2_sgd: SgdConfig,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            hidden_dims: vec![64, 64],
            sgd: SgdConfig::default(),
            n_samples: 10,
            mc_dropout_rate: 0.2,
            swag: SwagConfig::default(),
            bnn: BnnConfig::default(),
            stage2_hidden_dims: vec![32, 32],
            stage2_sgd: SgdConfig::default(),
        }
    }
}

impl ModelSettings {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        self.stage2_sgd.validate()?;
        self.bnn.validate()?;
        SamplerConfig { n_samples: self.n_samples, seed: 0 }.validate()?;
        if !(0.0..1.0).contains(&self.mc_dropout_rate) {
            return Err(Error::Config(format!("mc_dropout_rate must lie in [0, 1), got {}", self.mc_dropout_rate)));
        }
        if !(0.0..1.0).contains(&self.swag.burn_in_fraction) || self.swag.max_rank < 2 {
            return Err(Error::Config("swag needs burn_in_fraction in [0, 1) and max_rank >= 2".into()));
        }
        if self.hidden_dims.contains(&0) || self.stage2_hidden_dims.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        Ok(())
    }

    fn net(&self, input_dim: usize, output_dim: usize, seed: u64) -> NetConfig {
        NetConfig::new(input_dim, self.hidden_dims.clone(), output_dim).with_seed(seed)
    }

    fn sgd_with_seed(&self, seed: u64) -> SgdConfig {
        SgdConfig { seed, ..self.sgd.clone() }
    }

    fn sampler(&self, seed: u64) -> SamplerConfig {
        SamplerConfig { n_samples: self.n_samples, seed: derive_seed(seed, &[0x5A]) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Artifacts {
    Softmax(Network),
    Ensemble(Vec<Network>),
    Swag(SwagPosterior),
    McDropout(Network),
    Bnn(BnnPosterior),
    OneStage { network: Network, alpha: f64 },
    TwoStage { members: Vec<Network>, stage2: Network, beta: f64 },
}

impl Artifacts {
    pub fn method(&self) -> Method {
        match self {
            Artifacts::Softmax(_) => Method::Softmax,
            Artifacts::Ensemble(_) => Method::Ensemble,
            Artifacts::Swag(_) => Method::Swag,
            Artifacts::McDropout(_) => Method::McDropout,
            Artifacts::Bnn(_) => Method::Bnn,
            Artifacts::OneStage { .. } => Method::LearnedOneStage,
            Artifacts::TwoStage { .. } => Method::LearnedTwoStage,
        }
    }
}

/// A trained model that maps each input to a class or to `Defer`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeferralModel {
    pub artifacts: Artifacts,
    /// Uncertainty threshold for UQ methods; unused by learned methods.
    pub threshold: Option<f64>,
    pub sampler: SamplerConfig,
}

/// Per-input scores behind a prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    /// Mean positive-class probability (over the real classes for learned
    /// methods).
    pub positive_prob: Vec<f64>,
    /// Uncertainty score for UQ methods, deferral-class probability for
    /// learned methods.
    pub uncertainty: Vec<f64>,
    /// Argmax decisions of learned methods.
    pub learned: Option<Vec<Decision>>,
}

impl ScoreRecord {
    /// Thresholded UQ decisions; learned decisions ignore `tau`.
    pub fn decisions(&self, tau: f64) -> Vec<Decision> {
        if let Some(d) = &self.learned {
            return d.clone();
        }
        self.uncertainty
            .iter()
            .zip(&self.positive_prob)
            .map(|(&u, &p)| if u > tau { Decision::Defer } else { class_of(p) })
            .collect()
    }

    /// Decisions with deferral disabled.
    pub fn class_decisions(&self) -> Vec<Decision> {
        self.positive_prob.iter().map(|&p| class_of(p)).collect()
    }
}

fn class_of(p: f64) -> Decision {
    Decision::Class(usize::from(p >= 0.5))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub decisions: Vec<Decision>,
    pub scores: ScoreRecord,
}

impl DeferralModel {
    pub fn method(&self) -> Method {
        self.artifacts.method()
    }

    pub fn with_threshold(mut self, tau: f64) -> Self {
        self.threshold = Some(tau);
        self
    }

    /// `(kind, value)` of the deferral cost for learned methods.
    pub fn cost(&self) -> Option<(&'static str, f64)> {
        match self.artifacts {
            Artifacts::OneStage { alpha, .. } => Some(("alpha", alpha)),
            Artifacts::TwoStage { beta, .. } => Some(("beta", beta)),
            _ => None,
        }
    }

    pub fn scores(&self, batch: ArrayView2<f64>) -> Result<ScoreRecord> {
        let from_mc = |mc: MonteCarloPrediction| ScoreRecord {
            positive_prob: mc.mean,
            uncertainty: mc.variance,
            learned: None,
        };
        Ok(match &self.artifacts {
            Artifacts::Softmax(net) => {
                let p = net.positive_probability(batch, None)?;
                let u = p.iter().map(|&s| softmax_uncertainty(s)).collect::<Result<_>>()?;
                ScoreRecord { positive_prob: p, uncertainty: u, learned: None }
            }
            Artifacts::Ensemble(members) => from_mc(ensemble_predict(members, batch)?),
            Artifacts::Swag(post) => from_mc(swag_predict(post, batch, self.sampler)?),
            Artifacts::McDropout(net) => from_mc(mc_dropout_predict(net, batch, self.sampler)?.prediction),
            Artifacts::Bnn(post) => from_mc(bnn_predict(post, batch, self.sampler)?),
            Artifacts::OneStage { network, .. } => learned_scores(&network.forward(batch, None)?),
            Artifacts::TwoStage { members, stage2, .. } => {
                let features = two_stage_features(members, batch)?;
                learned_scores(&stage2.forward(features.view(), None)?)
            }
        })
    }

    pub fn predict(&self, batch: ArrayView2<f64>) -> Result<Prediction> {
        let scores = self.scores(batch)?;
        let decisions = if self.method().is_learned() {
            scores.decisions(f64::INFINITY)
        } else {
            let tau = self.threshold.ok_or_else(|| {
                Error::Usage(format!("{} model has no deferral threshold set", self.method()))
            })?;
            scores.decisions(tau)
        };
        Ok(Prediction { decisions, scores })
    }
}

/// Positive probability over the two real classes, deferral probability and
/// argmax decision (first maximum wins) from `[l0, l1, l_defer]` rows.
fn learned_scores(logits: &Array2<f64>) -> ScoreRecord {
    let mut positive_prob = Vec::with_capacity(logits.nrows());
    let mut uncertainty = Vec::with_capacity(logits.nrows());
    let mut learned = Vec::with_capacity(logits.nrows());
    for row in logits.rows() {
        let row = row.as_slice().expect("standard layout");
        positive_prob.push(crate::nnet::sigmoid(row[1] - row[0]));
        uncertainty.push(softmax(row)[2]);
        let best = (1..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
        learned.push(if best == 2 { Decision::Defer } else { Decision::Class(best) });
    }
    ScoreRecord { positive_prob, uncertainty, learned: Some(learned) }
}

/// Binary entropy in nats with `0 ln 0 = 0`.
pub fn binary_entropy(p: f64) -> f64 {
    let h = |q: f64| if q <= 0.0 { 0.0 } else { -q * q.ln() };
    h(p) + h(1.0 - p)
}

/// `(diagnostic, model)` entropy of member positive probabilities: entropy
/// of the member mean, and mean of the member entropies.
pub fn entropies(member_probs: &[f64]) -> (f64, f64) {
    let n = member_probs.len() as f64;
    let mean = member_probs.iter().sum::<f64>() / n;
    let model = member_probs.iter().map(|&p| binary_entropy(p)).sum::<f64>() / n;
    (binary_entropy(mean), model)
}

/// Rows of `N` member probabilities (member order) followed by the
/// diagnostic and model entropy.
pub fn two_stage_features(members: &[Network], batch: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mc = ensemble_predict(members, batch)?;
    let n = members.len();
    let mut out = Array2::zeros((batch.nrows(), n + 2));
    let mut column = vec![0.0; n];
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        for (k, c) in column.iter_mut().enumerate() {
            *c = mc.samples[k][i];
            row[k] = *c;
        }
        let (diag, model) = entropies(&column);
        row[n] = diag;
        row[n + 1] = model;
    }
    Ok(out)
}

struct Splits {
    train_x: Array2<f64>,
    train_y: Vec<usize>,
    weights: Vec<f64>,
    val_x: Array2<f64>,
    val_y: Vec<usize>,
}

fn splits(data: &Dataset) -> Result<Splits> {
    let train = data.subset(SplitTag::Train)?;
    let val = data.subset(SplitTag::Val)?;
    Ok(Splits {
        weights: oversample_weights(train.labels())?,
        train_x: train.features().to_owned(),
        train_y: train.labels().to_vec(),
        val_x: val.features().to_owned(),
        val_y: val.labels().to_vec(),
    })
}

/// Index of the highest validation pAUC (earliest on ties).
fn select_by_pauc<F>(candidates: usize, val_y: &[usize], mut positive_prob: F) -> Result<usize>
where
    F: FnMut(usize) -> Result<Vec<f64>>,
{
    let mut best = (0, f64::NEG_INFINITY);
    for i in 0..candidates {
        let score = pauc(&positive_prob(i)?, val_y).unwrap_or(f64::NEG_INFINITY);
        if score > best.1 {
            best = (i, score);
        }
    }
    Ok(best.0)
}

/// Mean over classes of the per-class mean loss, matching the oversampled
/// training objective.
pub fn balanced_loss(net: &Network, x: ArrayView2<f64>, labels: &[usize], loss: LossSpec) -> Result<f64> {
    let logits = net.forward(x, None)?;
    let mut sums = [0.0; 2];
    let mut counts = [0usize; 2];
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        sums[y] += loss.value(row.as_slice().expect("standard layout"), y)?;
        counts[y] += 1;
    }
    let present: Vec<f64> = (0..2).filter(|&c| counts[c] > 0).map(|c| sums[c] / counts[c] as f64).collect();
    if present.is_empty() {
        return Err(Error::Empty("no validation rows".into()));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

fn network_at(config: &NetConfig, checkpoint: &Checkpoint) -> Result<Network> {
    let mut net = Network::zeros(config.clone())?;
    net.set_params(&checkpoint.params)?;
    Ok(net)
}

/// Trains one classifier and keeps the epoch with the best validation pAUC.
fn train_pauc_selected(s: &Splits, config: NetConfig, sgd: &SgdConfig) -> Result<Network> {
    let out = train(Network::new(config.clone())?, s.train_x.view(), &s.train_y, LossSpec::CrossEntropy, sgd, &s.weights)?;
    let nets = out
        .checkpoints
        .iter()
        .map(|c| network_at(&config, c))
        .collect::<Result<Vec<_>>>()?;
    let best = select_by_pauc(nets.len(), &s.val_y, |i| nets[i].positive_probability(s.val_x.view(), None))?;
    Ok(nets.into_iter().nth(best).expect("index in range"))
}

fn uq_model(artifacts: Artifacts, sampler: SamplerConfig) -> DeferralModel {
    DeferralModel { artifacts, threshold: None, sampler }
}

pub fn train_softmax(data: &Dataset, settings: &ModelSettings, seed: u64) -> Result<DeferralModel> {
    let s = splits(data)?;
    let k = derive_seed(seed, &[Method::Softmax.tag()]);
    let net = train_pauc_selected(&s, settings.net(data.dim(), 2, k), &settings.sgd_with_seed(k))?;
    Ok(uq_model(Artifacts::Softmax(net), settings.sampler(seed)))
}

/// `n_samples` members from independent seeds, each selected on validation
/// pAUC. Members train in parallel; their order is fixed by index.
pub fn train_ensemble(data: &Dataset, settings: &ModelSettings, seed: u64) -> Result<DeferralModel> {
    let s = splits(data)?;
    let members = (0..settings.n_samples)
        .into_par_iter()
        .map(|m| {
            let k = derive_seed(seed, &[Method::Ensemble.tag(), m as u64]);
            train_pauc_selected(&s, settings.net(data.dim(), 2, k), &settings.sgd_with_seed(k))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(uq_model(Artifacts::Ensemble(members), settings.sampler(seed)))
}

/// One SGD run; posteriors collected up to each post-burn-in epoch are the
/// selection candidates, scored by the pAUC of their predictive mean.
pub fn train_swag(data: &Dataset, settings: &ModelSettings, seed: u64) -> Result<DeferralModel> {
    let s = splits(data)?;
    let k = derive_seed(seed, &[Method::Swag.tag()]);
    let config = settings.net(data.dim(), 2, k);
    let sampler = settings.sampler(seed);
    let out = train(Network::new(config.clone())?, s.train_x.view(), &s.train_y, LossSpec::CrossEntropy, &settings.sgd_with_seed(k), &s.weights)?;
    let epochs = out.checkpoints.len();
    let burn_in = (settings.swag.burn_in_fraction * epochs as f64).ceil() as usize;
    let collected: Vec<&[f64]> = out.checkpoints.iter().skip(burn_in).map(|c| c.params.as_slice()).collect();
    if collected.len() < 2 {
        return Err(Error::Collection(format!(
            "{} iterates after a burn-in of {burn_in} of {epochs} epochs; need at least 2",
            collected.len()
        )));
    }
    let candidates = (2..=collected.len())
        .map(|end| swag_collect(config.clone(), &collected[..end], settings.swag.max_rank))
        .collect::<Result<Vec<_>>>()?;
    let best = select_by_pauc(candidates.len(), &s.val_y, |i| {
        Ok(swag_predict(&candidates[i], s.val_x.view(), sampler)?.mean)
    })?;
    Ok(uq_model(Artifacts::Swag(candidates.into_iter().nth(best).expect("index in range")), sampler))
}

pub fn train_mc_dropout(data: &Dataset, settings: &ModelSettings, seed: u64) -> Result<DeferralModel> {
    let s = splits(data)?;
    let k = derive_seed(seed, &[Method::McDropout.tag()]);
    let config = settings.net(data.dim(), 2, k).with_dropout(settings.mc_dropout_rate);
    let sampler = settings.sampler(seed);
    let out = train(Network::new(config.clone())?, s.train_x.view(), &s.train_y, LossSpec::CrossEntropy, &settings.sgd_with_seed(k), &s.weights)?;
    let nets = out
        .checkpoints
        .iter()
        .map(|c| network_at(&config, c))
        .collect::<Result<Vec<_>>>()?;
    let best = select_by_pauc(nets.len(), &s.val_y, |i| {
        Ok(mc_dropout_predict(&nets[i], s.val_x.view(), sampler)?.prediction.mean)
    })?;
    Ok(uq_model(Artifacts::McDropout(nets.into_iter().nth(best).expect("index in range")), sampler))
}

pub fn train_bnn(data: &Dataset, settings: &ModelSettings, seed: u64) -> Result<DeferralModel> {
    let s = splits(data)?;
    let k = derive_seed(seed, &[Method::Bnn.tag()]);
    let sampler = settings.sampler(seed);
    let out = bnn_train(
        settings.net(data.dim(), 2, k),
        s.train_x.view(),
        &s.train_y,
        &settings.sgd_with_seed(k),
        &settings.bnn,
        &s.weights,
    )?;
    let best = select_by_pauc(out.epochs.len(), &s.val_y, |i| {
        Ok(bnn_predict(&out.epochs[i], s.val_x.view(), sampler)?.mean)
    })?;
    Ok(uq_model(Artifacts::Bnn(out.epochs.into_iter().nth(best).expect("index in range")), sampler))
}

/// Trains on `(x, y)` with `loss` and keeps the checkpoint with the lowest
/// class-balanced validation loss.
fn train_loss_selected(
    config: NetConfig,
    sgd: &SgdConfig,
    loss: LossSpec,
    train_xy: (ArrayView2<f64>, &[usize], &[f64]),
    val_xy: (ArrayView2<f64>, &[usize]),
) -> Result<Network> {
    let (x, y, w) = train_xy;
    let out = train(Network::new(config.clone())?, x, y, loss, sgd, w)?;
    let mut best: Option<(f64, Network)> = None;
    for c in &out.checkpoints {
        let net = network_at(&config, c)?;
        let v = balanced_loss(&net, val_xy.0, val_xy.1, loss)?;
        if best.as_ref().is_none_or(|(b, _)| v < *b) {
            best = Some((v, net));
        }
    }
    Ok(best.expect("at least one epoch").1)
}

pub fn train_one_stage(data: &Dataset, settings: &ModelSettings, seed: u64, alpha: f64) -> Result<DeferralModel> {
    let loss = LossSpec::OneStage(OneStageCost::new(alpha)?);
    let s = splits(data)?;
    let k = derive_seed(seed, &[Method::LearnedOneStage.tag(), alpha.to_bits()]);
    let network = train_loss_selected(
        settings.net(data.dim(), 3, k),
        &settings.sgd_with_seed(k),
        loss,
        (s.train_x.view(), &s.train_y, &s.weights),
        (s.val_x.view(), &s.val_y),
    )?;
    Ok(DeferralModel {
        artifacts: Artifacts::OneStage { network, alpha },
        threshold: None,
        sampler: settings.sampler(seed),
    })
}

/// Stage 2 on the features of an already trained ensemble.
pub fn train_two_stage(
    data: &Dataset,
    members: &[Network],
    settings: &ModelSettings,
    seed: u64,
    beta: f64,
) -> Result<DeferralModel> {
    let loss = LossSpec::TwoStage(TwoStageCost::new(beta)?);
    if members.len() != settings.n_samples {
        return Err(Error::Config(format!(
            "two-stage features expect {} ensemble members, got {}",
            settings.n_samples,
            members.len()
        )));
    }
    let s = splits(data)?;
    let train_f = two_stage_features(members, s.train_x.view())?;
    let val_f = two_stage_features(members, s.val_x.view())?;
    let k = derive_seed(seed, &[Method::LearnedTwoStage.tag(), beta.to_bits()]);
    let config = NetConfig::new(members.len() + 2, settings.stage2_hidden_dims.clone(), 3).with_seed(k);
    let stage2 = train_loss_selected(
        config,
        &SgdConfig { seed: k, ..settings.stage2_sgd.clone() },
        loss,
        (train_f.view(), &s.train_y, &s.weights),
        (val_f.view(), &s.val_y),
    )?;
    Ok(DeferralModel {
        artifacts: Artifacts::TwoStage { members: members.to_vec(), stage2, beta },
        threshold: None,
        sampler: settings.sampler(seed),
    })
}

/// Trains any UQ method.
pub fn train_uq(method: Method, data: &Dataset, settings: &ModelSettings, seed: u64) -> Result<DeferralModel> {
    match method {
        Method::Softmax => train_softmax(data, settings, seed),
        Method::Ensemble => train_ensemble(data, settings, seed),
        Method::Swag => train_swag(data, settings, seed),
        Method::McDropout => train_mc_dropout(data, settings, seed),
        Method::Bnn => train_bnn(data, settings, seed),
        m => Err(Error::Usage(format!("{m} needs a deferral cost; use its own training function"))),
    }
}

const MANIFEST: &str = "manifest.txt";
const ENSEMBLE_INDEX: &str = "ensemble.txt";

fn write_members(dir: &Path, members: &[Network]) -> Result<()> {
    let mut index = String::new();
    for (k, net) in members.iter().enumerate() {
        let name = format!("member_{k:02}.dfb");
        ParamFile::from_network(net).write(&dir.join(&name))?;
        index.push_str(&name);
        index.push('\n');
    }
    fs::write(dir.join(ENSEMBLE_INDEX), index)?;
    Ok(())
}

fn read_members(dir: &Path) -> Result<Vec<Network>> {
    fs::read_to_string(dir.join(ENSEMBLE_INDEX))?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|name| ParamFile::read(&dir.join(name.trim()))?.to_network())
        .collect()
}

/// Writes a bundle directory: `manifest.txt`, parameter files and, for
/// ensemble-based methods, `ensemble.txt` listing member files in order.
pub fn save_bundle(model: &DeferralModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = format!("method={}\n", model.method());
    let threshold = model.threshold.map_or("none".to_string(), |t| t.to_string());
    manifest.push_str(&format!("threshold={threshold}\n"));
    manifest.push_str(&format!("n_samples={}\nsampler_seed={}\n", model.sampler.n_samples, model.sampler.seed));
    if let Some((kind, value)) = model.cost() {
        manifest.push_str(&format!("{kind}={value}\n"));
    }
    let config = match &model.artifacts {
        Artifacts::Softmax(net) | Artifacts::McDropout(net) | Artifacts::OneStage { network: net, .. } => {
            ParamFile::from_network(net).write(&dir.join("model.dfb"))?;
            net.config().to_string()
        }
        Artifacts::Ensemble(members) => {
            write_members(dir, members)?;
            members[0].config().to_string()
        }
        Artifacts::Swag(post) => {
            post.to_param_file().write(&dir.join("posterior.dfb"))?;
            post.config.to_string()
        }
        Artifacts::Bnn(post) => {
            post.to_param_file().write(&dir.join("posterior.dfb"))?;
            post.config.to_string()
        }
        Artifacts::TwoStage { members, stage2, .. } => {
            write_members(dir, members)?;
            ParamFile::from_network(stage2).write(&dir.join("stage2.dfb"))?;
            stage2.config().to_string()
        }
    };
    manifest.push_str(&format!("config={config}\n"));
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Key-value pairs of a bundle manifest.
pub fn read_manifest(dir: &Path) -> Result<Vec<(String, String)>> {
    fs::read_to_string(dir.join(MANIFEST))?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Format(format!("manifest line without '=': {l}")))
        })
        .collect()
}

pub fn load_bundle(dir: &Path) -> Result<DeferralModel> {
    let manifest = read_manifest(dir)?;
    let get = |key: &str| {
        manifest
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Format(format!("manifest has no '{key}'")))
    };
    let num = |key: &str| -> Result<f64> {
        get(key)?.parse().map_err(|_| Error::Format(format!("manifest '{key}' is not a number")))
    };
    let method: Method = get("method")?.parse()?;
    let threshold = match get("threshold")? {
        "none" => None,
        t => Some(t.parse().map_err(|_| Error::Format(format!("bad threshold '{t}'")))?),
    };
    let sampler = SamplerConfig {
        n_samples: num("n_samples")? as usize,
        seed: get("sampler_seed")?.parse().map_err(|_| Error::Format("bad sampler_seed".into()))?,
    };
    let net = |name: &str| ParamFile::read(&dir.join(name))?.to_network();
    let artifacts = match method {
        Method::Softmax => Artifacts::Softmax(net("model.dfb")?),
        Method::McDropout => Artifacts::McDropout(net("model.dfb")?),
        Method::Ensemble => Artifacts::Ensemble(read_members(dir)?),
        Method::Swag => Artifacts::Swag(SwagPosterior::from_param_file(&ParamFile::read(&dir.join("posterior.dfb"))?)?),
        Method::Bnn => Artifacts::Bnn(BnnPosterior::from_param_file(&ParamFile::read(&dir.join("posterior.dfb"))?)?),
        Method::LearnedOneStage => Artifacts::OneStage { network: net("model.dfb")?, alpha: num("alpha")? },
        Method::LearnedTwoStage => Artifacts::TwoStage {
            members: read_members(dir)?,
            stage2: net("stage2.dfb")?,
            beta: num("beta")?,
        },
    };
    Ok(DeferralModel { artifacts, threshold, sampler })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, split, SynthSpec};
    use std::f64::consts::LN_2;

    fn small_settings() -> ModelSettings {
        let sgd = SgdConfig { epochs: 6, batch_size: 32, ..SgdConfig::default() };
        ModelSettings {
            hidden_dims: vec![16],
            sgd: sgd.clone(),
            n_samples: 3,
            stage2_hidden_dims: vec![8],
            stage2_sgd: sgd,
            ..ModelSettings::default()
        }
    }

    fn small_data(seed: u64) -> Dataset {
        let spec = SynthSpec { positive_fraction: 0.2, ..SynthSpec::blobs(600, 4, 0.3, seed) };
        split(&generate(&spec).unwrap(), seed).unwrap()
    }

    #[test]
    fn entropy_decomposition_examples() {
        let (d, m) = entropies(&[0.5, 0.5, 0.5]);
        assert!((d - LN_2).abs() < 1e-15 && (m - LN_2).abs() < 1e-15);
        assert_eq!(entropies(&[1.0, 1.0]), (0.0, 0.0));
        let (d, m) = entropies(&[1.0, 0.0]);
        assert!((d - LN_2).abs() < 1e-15);
        assert_eq!(m, 0.0);
    }

    #[test]
    fn features_reuse_member_probabilities() {
        let data = small_data(1);
        let members: Vec<Network> = (0..3).map(|k| Network::new(NetConfig::new(4, vec![5], 2).with_seed(k)).unwrap()).collect();
        let x = data.features();
        let f = two_stage_features(&members, x).unwrap();
        assert_eq!(f.ncols(), 5);
        let mc = ensemble_predict(&members, x).unwrap();
        for i in 0..x.nrows() {
            for k in 0..3 {
                assert_eq!(f[[i, k]], mc.samples[k][i]);
            }
            assert!((0.0..=LN_2 + 1e-15).contains(&f[[i, 3]]));
            assert!((0.0..=LN_2 + 1e-15).contains(&f[[i, 4]]));
        }
    }

    #[test]
    fn learned_decision_is_argmax() {
        let logits = ndarray::array![[2.0, 1.0, 0.0], [0.0, 3.0, 1.0], [0.0, 0.0, 5.0], [1.0, 1.0, 1.0]];
        let r = learned_scores(&logits);
        assert_eq!(
            r.learned.unwrap(),
            vec![Decision::Class(0), Decision::Class(1), Decision::Defer, Decision::Class(0)]
        );
    }

    #[test]
    fn uq_prediction_needs_a_threshold_and_routes_only() {
        let data = small_data(2);
        let settings = small_settings();
        let model = train_softmax(&data, &settings, 3).unwrap();
        let x = data.features();
        assert!(matches!(model.predict(x), Err(Error::Usage(_))));
        let plain = model.clone().with_threshold(f64::INFINITY).predict(x).unwrap();
        assert!(plain.decisions.iter().all(|d| !d.is_defer()));
        let tight = model.with_threshold(0.5).predict(x).unwrap();
        for (a, b) in plain.decisions.iter().zip(&tight.decisions) {
            if !b.is_defer() {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn one_stage_alpha_one_does_not_defer_on_separable_data() {
        let spec = SynthSpec { positive_fraction: 0.3, separation: 2.0, ..SynthSpec::blobs(600, 4, 0.05, 4) };
        let data = split(&generate(&spec).unwrap(), 4).unwrap();
        let settings = small_settings();
        let model = train_one_stage(&data, &settings, 1, 1.0).unwrap();
        let test = data.subset(SplitTag::Test).unwrap();
        let p = model.predict(test.features()).unwrap();
        assert_eq!(p.decisions.iter().filter(|d| d.is_defer()).count(), 0);
        let again = train_one_stage(&data, &settings, 1, 1.0).unwrap();
        assert_eq!(again.predict(test.features()).unwrap(), p);
        assert!(train_one_stage(&data, &settings, 1, 1.5).is_err());
    }

    #[test]
    fn two_stage_checks_member_count() {
        let data = small_data(5);
        let members: Vec<Network> = (0..2).map(|k| Network::new(NetConfig::new(4, vec![5], 2).with_seed(k)).unwrap()).collect();
        assert!(matches!(train_two_stage(&data, &members, &small_settings(), 0, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn dominant_deferral_logit_defers_everything() {
        let mut net = Network::zeros(NetConfig::new(4, vec![], 3)).unwrap();
        let mut params = vec![0.0; net.parameter_count()];
        let last = params.len() - 1;
        params[last] = 10.0;
        net.set_params(&params).unwrap();
        let model = DeferralModel {
            artifacts: Artifacts::OneStage { network: net, alpha: 0.5 },
            threshold: None,
            sampler: SamplerConfig::default(),
        };
        let x = Array2::from_elem((5, 4), 0.3);
        assert!(model.predict(x.view()).unwrap().decisions.iter().all(|d| d.is_defer()));
    }

    #[test]
    fn bundles_round_trip_for_every_method() {
        let data = small_data(6);
        let settings = small_settings();
        let x = data.subset(SplitTag::Test).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut models: Vec<DeferralModel> = [Method::Softmax, Method::Ensemble, Method::Swag, Method::McDropout, Method::Bnn]
            .into_iter()
            .map(|m| train_uq(m, &data, &settings, 7).unwrap().with_threshold(0.01))
            .collect();
        let members = match &models[1].artifacts {
            Artifacts::Ensemble(m) => m.clone(),
            _ => unreachable!(),
        };
        models.push(train_one_stage(&data, &settings, 7, 0.8).unwrap());
        models.push(train_two_stage(&data, &members, &settings, 7, 0.5).unwrap());
        for model in &models {
            let path = dir.path().join(model.method().name());
            save_bundle(model, &path).unwrap();
            let back = load_bundle(&path).unwrap();
            assert_eq!(&back, model, "{}", model.method());
            assert_eq!(back.predict(x.features()).unwrap(), model.predict(x.features()).unwrap());
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("svm".parse::<Method>().is_err());
    }
}
