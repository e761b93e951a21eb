//! AdamW pre-training over corrupted batches, with a warmup/decay schedule
//! and checksummed JSON checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, ParamStore};
use crate::corruption::{corrupt_sample, CorruptedSample, CorruptionSpec, MaskBounds};
use crate::data::{CorpusSpec, PairedSample};
use crate::error::{Error, Result};
use crate::model::{param_group, Model, ModelConfig, ParamGroup};
use crate::objectives::{
    batch_objective, similar_pairs, LossBreakdown, LossWeights, NormMode, ObjectiveSettings, PairMode,
    PerceptualExtractor,
};
use crate::rng::{RngStream, ALGORITHM};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: &str = "1";
pub const LOG_HEADER: &str = "step,lr_enc,lr_head,l_img,l_txt,l_dom,l_res,l_total,n_masked_tokens,n_dom_pairs";

/// Mask ratios of the baseline without robust masking.
pub const FIXED_IMAGE_RATIO: f64 = 0.5;
pub const FIXED_TEXT_RATIO: f64 = 0.3;

const MAX_RESAMPLE_TRIES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    pub lr_encoders: f64,
    pub lr_heads: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weights: LossWeights,
    pub norm_mode: NormMode,
    pub pair_mode: PairMode,
    pub robust_masking: bool,
    pub domain_consistency: bool,
    pub modality_resilience: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 500,
            batch_size: 16,
            warmup_ratio: 0.1,
            lr_encoders: 3e-4,
            lr_heads: 1.5e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weights: LossWeights::default(),
            norm_mode: NormMode::L1,
            pair_mode: PairMode::Label,
            robust_masking: true,
            domain_consistency: true,
            modality_resilience: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Argument("total_steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Argument(format!("warmup_ratio {} outside [0, 1)", self.warmup_ratio)));
        }
        for (name, lr) in [("lr_encoders", self.lr_encoders), ("lr_heads", self.lr_heads)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Argument(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Argument("weight_decay must be >= 0".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Argument(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Argument("eps must be positive".into()));
        }
        if let PairMode::Jaccard { threshold } = self.pair_mode {
            if !(0.0..=1.0).contains(&threshold) {
                return Err(Error::Argument(format!("jaccard threshold {threshold} outside [0, 1]")));
            }
        }
        self.weights.validate()
    }

    pub fn base_lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Encoders => self.lr_encoders,
            ParamGroup::Heads => self.lr_heads,
        }
    }

    pub fn lr(&self, step: usize, group: ParamGroup) -> Result<f64> {
        lr_at(step, self.total_steps, self.warmup_ratio, self.base_lr(group))
    }

    /// Loss weights after the component toggles.
    pub fn effective_weights(&self) -> LossWeights {
        LossWeights {
            dom: if self.domain_consistency { self.weights.dom } else { 0.0 },
            res: if self.modality_resilience { self.weights.res } else { 0.0 },
            ..self.weights
        }
    }

    pub fn toggles(&self) -> [bool; 3] {
        [self.robust_masking, self.domain_consistency, self.modality_resilience]
    }

    pub fn with_toggles(&self, [rm, dc, mr]: [bool; 3]) -> Self {
        Self { robust_masking: rm, domain_consistency: dc, modality_resilience: mr, ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionConfig {
    pub spec: CorruptionSpec,
    pub mask_bounds: MaskBounds,
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.mask_bounds.validate()
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainJob {
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corruption: CorruptionConfig,
    pub seed: u64,
}

impl TrainJob {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.corruption.validate()
    }

    pub fn model(&self) -> Result<Model> {
        Model::for_corpus(self.model, &self.corpus)
    }

    /// Corruption actually applied during training.
    pub fn training_corruption(&self) -> CorruptionConfig {
        if self.train.robust_masking {
            self.corruption
        } else {
            CorruptionConfig {
                spec: CorruptionSpec { severity: 0.0, ..self.corruption.spec },
                mask_bounds: MaskBounds::fixed(FIXED_IMAGE_RATIO, FIXED_TEXT_RATIO),
            }
        }
    }

    pub fn objective_settings(&self) -> ObjectiveSettings {
        ObjectiveSettings { weights: self.train.effective_weights(), norm_mode: self.train.norm_mode }
    }

    pub fn root_stream(&self) -> RngStream {
        RngStream::root(self.seed)
    }

    pub fn init_params(&self) -> Result<ParamStore> {
        Ok(self.model()?.init_params(&self.root_stream().fork("init")))
    }
}

/// Linear ramp `0 → base` over `W = round(ratio·total)` steps, then linear
/// decay to `0` at `total`.
pub fn lr_at(step: usize, total_steps: usize, warmup_ratio: f64, base_lr: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Argument(format!("step {step} outside [0, {total_steps}]")));
    }
    let w = (warmup_ratio * total_steps as f64).round() as usize;
    if w > 0 && step <= w {
        return Ok(base_lr * (step as f64 / w as f64));
    }
    Ok(base_lr * ((total_steps - step) as f64 / (total_steps - w) as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        Self { beta1: c.beta1, beta2: c.beta2, eps: c.eps, weight_decay: c.weight_decay }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimState {
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
    /// Learning rate of the last update, by group.
    pub lr: BTreeMap<String, f64>,
}

impl OptimState {
    pub fn new(params: &ParamStore) -> Self {
        Self { step: 0, m: params.zeros_like(), v: params.zeros_like(), lr: BTreeMap::new() }
    }
}

fn group_name(g: ParamGroup) -> &'static str {
    match g {
        ParamGroup::Encoders => "encoders",
        ParamGroup::Heads => "heads",
    }
}

/// One bias-corrected AdamW update with decoupled weight decay. Parameters
/// absent from `grads` are treated as having zero gradient.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    state: &mut OptimState,
    hyper: &AdamHyper,
    lr_of: impl Fn(ParamGroup) -> f64,
) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params.expect(name)?;
        if p.shape() != g.shape() {
            return Err(Error::Contract(format!(
                "gradient for {name} has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let mut lrs = BTreeMap::new();
    for (name, theta) in params.iter_mut() {
        let group = param_group(name);
        let lr = lr_of(group);
        lrs.insert(group_name(group).to_string(), lr);
        let m = state.m.get_mut(name).ok_or_else(|| Error::Contract(format!("no moment for {name}")))?;
        let v = state.v.get_mut(name).ok_or_else(|| Error::Contract(format!("no moment for {name}")))?;
        if m.shape() != theta.shape() || v.shape() != theta.shape() {
            return Err(Error::Contract(format!("moment shapes for {name} do not match the parameter")));
        }
        let g = grads.get(name).map(Tensor::values);
        let (mv, vv) = (m.values_mut(), v.values_mut());
        for (i, th) in theta.values_mut().iter_mut().enumerate() {
            let gi = g.map_or(0.0, |g| g[i]);
            mv[i] = hyper.beta1 * mv[i] + (1.0 - hyper.beta1) * gi;
            vv[i] = hyper.beta2 * vv[i] + (1.0 - hyper.beta2) * gi * gi;
            let m_hat = mv[i] / bc1;
            let v_hat = vv[i] / bc2;
            *th -= lr * (m_hat / (v_hat.sqrt() + hyper.eps) + hyper.weight_decay * *th);
        }
    }
    state.lr = lrs;
    Ok(())
}

/// Epoch-shuffled sampling without replacement; batch `s` covers positions
/// `s·B .. (s+1)·B` of the concatenated epoch permutations.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    n: usize,
    batch_size: usize,
    stream: RngStream,
    cached: Option<(usize, Vec<usize>)>,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, stream: RngStream) -> Self {
        Self { n, batch_size, stream, cached: None }
    }

    fn permutation(&mut self, epoch: usize) -> &[usize] {
        if self.cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.n).collect();
            self.stream.fork(&format!("epoch.{epoch}")).shuffle(&mut perm);
            self.cached = Some((epoch, perm));
        }
        &self.cached.as_ref().unwrap().1
    }

    pub fn batch(&mut self, step: usize) -> Vec<usize> {
        let start = step * self.batch_size;
        (start..start + self.batch_size)
            .map(|p| {
                let n = self.n;
                self.permutation(p / n)[p % n]
            })
            .collect()
    }

    /// Fresh batch for a resample attempt.
    pub fn resample(&self, step: usize, attempt: usize) -> Vec<usize> {
        let mut r = self.stream.fork(&format!("resample.{step}.{attempt}"));
        let k = self.batch_size.min(self.n);
        let mut idx = r.choose_sorted(self.n, k);
        r.shuffle(&mut idx);
        idx
    }
}

/// Batch indices for update `step`, re-sampled when domain consistency is on
/// and the batch holds no similar cross-domain pair.
pub fn select_batch(job: &TrainJob, corpus: &[PairedSample], sampler: &mut BatchSampler, step: usize) -> Vec<usize> {
    let first = sampler.batch(step);
    if !job.train.domain_consistency {
        return first;
    }
    let has_pair = |idx: &[usize]| {
        let refs: Vec<&PairedSample> = idx.iter().map(|&i| &corpus[i]).collect();
        !similar_pairs(&refs, job.train.pair_mode).is_empty()
    };
    if has_pair(&first) {
        return first;
    }
    (0..MAX_RESAMPLE_TRIES)
        .map(|t| sampler.resample(step, t))
        .find(|idx| has_pair(idx))
        .unwrap_or(first)
}

/// Corrupted inputs of one batch; each slot draws from its own stream.
pub fn corrupt_batch(job: &TrainJob, corpus: &[PairedSample], idx: &[usize], step: usize) -> Result<Vec<CorruptedSample>> {
    let cc = job.training_corruption();
    let base = job.root_stream().fork("train").fork("corrupt");
    idx.iter()
        .enumerate()
        .map(|(slot, &i)| {
            let s = &corpus[i];
            let rng = base.fork(&format!("{step}.{slot}"));
            corrupt_sample(&s.image, &s.tokens, &cc.spec, &cc.mask_bounds, &job.corpus, &rng)
        })
        .collect()
}

/// Loss breakdown and parameter gradients of a prepared batch.
pub fn batch_gradients(
    job: &TrainJob,
    model: &Model,
    phi: &PerceptualExtractor,
    params: &ParamStore,
    corpus: &[PairedSample],
    idx: &[usize],
    items: &[CorruptedSample],
) -> Result<(LossBreakdown, ParamStore)> {
    let refs: Vec<&PairedSample> = idx.iter().map(|&i| &corpus[i]).collect();
    let pairs = similar_pairs(&refs, job.train.pair_mode);
    let mut g = Graph::new();
    let (vars, breakdown) = batch_objective(&mut g, model, params, phi, items, &pairs, &job.objective_settings())?;
    let grads = g.backward(vars.total)?;
    Ok((breakdown, grads))
}

/// Checks that every sample fits the model's input geometry.
pub fn check_corpus(spec: &CorpusSpec, corpus: &[PairedSample]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Argument("corpus is empty".into()));
    }
    let n = spec.image_size;
    for s in corpus {
        if s.image.shape() != [n, n] {
            return Err(Error::Compatibility(format!(
                "sample {} has image shape {:?}, config expects [{n}, {n}]",
                s.id,
                s.image.shape()
            )));
        }
        if s.tokens.is_empty() || s.tokens.len() > spec.max_tokens() {
            return Err(Error::Compatibility(format!(
                "sample {} has {} tokens, config allows 1..={}",
                s.id,
                s.tokens.len(),
                spec.max_tokens()
            )));
        }
        if let Some(&t) = s.tokens.iter().find(|&&t| t as usize >= spec.total_vocab()) {
            return Err(Error::Compatibility(format!(
                "sample {} uses token {t} outside vocabulary of {}",
                s.id,
                spec.total_vocab()
            )));
        }
        if s.class_label >= spec.num_classes || s.domain >= spec.num_domains {
            return Err(Error::Compatibility(format!(
                "sample {} has class {} / domain {} outside {} x {}",
                s.id, s.class_label, s.domain, spec.num_classes, spec.num_domains
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr_enc: f64,
    pub lr_head: f64,
    pub loss: LossBreakdown,
}

impl LogRow {
    pub fn csv(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.lr_enc,
            self.lr_head,
            l.l_img,
            l.l_txt,
            l.l_dom,
            l.l_res,
            l.l_total,
            l.n_masked_tokens,
            l.n_dom_pairs
        )
    }
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub algorithm: String,
    pub root_seed: u64,
    /// Draw units consumed per labeled stream family.
    pub counters: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config: TrainJob,
    pub model: Model,
    pub step: usize,
    pub params: ParamStore,
    pub optim: OptimState,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope<'a> {
    format_version: String,
    checksum: String,
    #[serde(borrow)]
    payload: &'a RawValue,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let payload = serde_json::to_string(self)?;
        let raw = RawValue::from_string(payload)?;
        let env = Envelope {
            format_version: CHECKPOINT_VERSION.to_string(),
            checksum: sha256_hex(raw.get().as_bytes()),
            payload: &raw,
        };
        Ok(serde_json::to_string(&env)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let parse = |e: serde_json::Error| Error::Parse { line: e.line(), message: e.to_string() };
        let env: Envelope = serde_json::from_str(text).map_err(parse)?;
        if env.format_version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: env.format_version,
                expected: CHECKPOINT_VERSION.to_string(),
            });
        }
        let actual = sha256_hex(env.payload.get().as_bytes());
        if actual != env.checksum {
            return Err(Error::Integrity(format!("checksum {} does not match payload ({actual})", env.checksum)));
        }
        let ckpt: Checkpoint = serde_json::from_str(env.payload.get()).map_err(parse)?;
        ckpt.check_consistency()?;
        Ok(ckpt)
    }

    fn check_consistency(&self) -> Result<()> {
        let expected = self.config.model()?;
        if expected != self.model {
            return Err(Error::Integrity("model geometry disagrees with the config echo".into()));
        }
        let reference = self.config.init_params()?;
        for store in [&self.params, &self.optim.m, &self.optim.v] {
            let same = store.len() == reference.len()
                && reference.iter().all(|(n, t)| store.get(n).is_some_and(|p| p.shape() == t.shape()));
            if !same {
                return Err(Error::Integrity("parameter names or shapes disagree with the model".into()));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Stateful training loop over a fixed corpus.
pub struct Trainer<'a> {
    job: TrainJob,
    model: Model,
    phi: PerceptualExtractor,
    corpus: &'a [PairedSample],
    params: ParamStore,
    optim: OptimState,
    sampler: BatchSampler,
    step: usize,
    log: Vec<LogRow>,
}

impl<'a> Trainer<'a> {
    pub fn new(job: TrainJob, corpus: &'a [PairedSample]) -> Result<Self> {
        job.validate()?;
        let params = job.init_params()?;
        let optim = OptimState::new(&params);
        Self::assemble(job, corpus, params, optim, 0)
    }

    pub fn from_checkpoint(ckpt: Checkpoint, corpus: &'a [PairedSample]) -> Result<Self> {
        ckpt.config.validate()?;
        ckpt.check_consistency()?;
        Self::assemble(ckpt.config, corpus, ckpt.params, ckpt.optim, ckpt.step)
    }

    fn assemble(job: TrainJob, corpus: &'a [PairedSample], params: ParamStore, optim: OptimState, step: usize) -> Result<Self> {
        check_corpus(&job.corpus, corpus)?;
        if step > job.train.total_steps {
            return Err(Error::Argument(format!("step {step} beyond total_steps {}", job.train.total_steps)));
        }
        let model = job.model()?;
        let phi = PerceptualExtractor::for_model(&model);
        let sampler = BatchSampler::new(corpus.len(), job.train.batch_size, job.root_stream().fork("train").fork("batches"));
        Ok(Self { job, model, phi, corpus, params, optim, sampler, step, log: Vec::new() })
    }

    pub fn job(&self) -> &TrainJob {
        &self.job
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.job.train.total_steps
    }

    /// One optimization update; logged under its 1-based update number.
    pub fn step(&mut self) -> Result<LogRow> {
        if self.is_done() {
            return Err(Error::Argument("training already reached total_steps".into()));
        }
        let s = self.step;
        let idx = select_batch(&self.job, self.corpus, &mut self.sampler, s);
        let items = corrupt_batch(&self.job, self.corpus, &idx, s)?;
        let (loss, grads) = batch_gradients(&self.job, &self.model, &self.phi, &self.params, self.corpus, &idx, &items)?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::NonFinite { step: s + 1, breakdown: loss.to_string() });
        }
        let t = s + 1;
        let lr_enc = self.job.train.lr(t, ParamGroup::Encoders)?;
        let lr_head = self.job.train.lr(t, ParamGroup::Heads)?;
        let hyper = AdamHyper::from(&self.job.train);
        adamw_step(&mut self.params, &grads, &mut self.optim, &hyper, |g| match g {
            ParamGroup::Encoders => lr_enc,
            ParamGroup::Heads => lr_head,
        })?;
        if !self.params.all_finite() {
            return Err(Error::NonFinite { step: t, breakdown: format!("{loss} (parameters diverged)") });
        }
        self.step = t;
        let row = LogRow { step: t, lr_enc, lr_head, loss };
        self.log.push(row);
        Ok(row)
    }

    pub fn run_until(&mut self, step: usize) -> Result<()> {
        let stop = step.min(self.job.train.total_steps);
        while self.step < stop {
            self.step()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.job.train.total_steps)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let consumed = (self.step * self.job.train.batch_size) as u64;
        let counters = BTreeMap::from([
            ("train/batches".to_string(), consumed),
            ("train/corrupt".to_string(), consumed),
        ]);
        Checkpoint {
            config: self.job.clone(),
            model: self.model,
            step: self.step,
            params: self.params.clone(),
            optim: self.optim.clone(),
            rng: RngState { algorithm: ALGORITHM.to_string(), root_seed: self.job.seed, counters },
        }
    }
}

/// Full run from scratch: final checkpoint and the per-step log.
pub fn train_run(job: &TrainJob, corpus: &[PairedSample]) -> Result<(Checkpoint, Vec<LogRow>)> {
    let mut t = Trainer::new(job.clone(), corpus)?;
    t.run()?;
    Ok((t.checkpoint(), t.log().to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_corpus;

    fn scalar_store(v: f64) -> ParamStore {
        [("proj.x".to_string(), Tensor::scalar(v))].into_iter().collect()
    }

    fn hyper(wd: f64) -> AdamHyper {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: wd }
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_at(0, 100_000, 0.1, 1e-5).unwrap(), 0.0);
        assert_eq!(lr_at(10_000, 100_000, 0.1, 1e-5).unwrap(), 1e-5);
        let v = lr_at(55_000, 100_000, 0.1, 1e-5).unwrap();
        assert!((v - 1e-5 * 45_000.0 / 90_000.0).abs() < 1e-20);
        assert_eq!(lr_at(100_000, 100_000, 0.1, 1e-5).unwrap(), 0.0);
        assert!(matches!(lr_at(501, 500, 0.1, 1.0), Err(Error::Argument(_))));
        assert_eq!(lr_at(0, 10, 0.0, 2.0).unwrap(), 2.0);
    }

    #[test]
    fn adamw_fixed_points() {
        let mut p = scalar_store(1.0);
        let mut st = OptimState::new(&p);
        adamw_step(&mut p, &scalar_store(0.0), &mut st, &hyper(0.0), |_| 0.1).unwrap();
        assert_eq!(p.get("proj.x").unwrap().values()[0], 1.0);

        let mut p = scalar_store(1.0);
        let mut st = OptimState::new(&p);
        adamw_step(&mut p, &scalar_store(0.0), &mut st, &hyper(0.01), |_| 0.1).unwrap();
        assert!((p.get("proj.x").unwrap().values()[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn adamw_scalar_oracle() {
        let mut p = scalar_store(1.0);
        let mut st = OptimState::new(&p);
        adamw_step(&mut p, &scalar_store(1.0), &mut st, &hyper(0.01), |_| 0.1).unwrap();
        let (b1, b2) = (0.9f64, 0.999f64);
        let m = (1.0 - b1) * 1.0;
        let v = (1.0 - b2) * 1.0;
        let m_hat = m / (1.0 - b1);
        let v_hat = v / (1.0 - b2);
        let expected = 1.0 - 0.1 * (m_hat / (v_hat.sqrt() + 1e-8) + 0.01 * 1.0);
        assert!((p.get("proj.x").unwrap().values()[0] - expected).abs() < 1e-12);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adamw_rejects_shape_mismatch() {
        let mut p = scalar_store(1.0);
        let mut st = OptimState::new(&p);
        let g: ParamStore = [("proj.x".to_string(), Tensor::zeros(&[2]))].into_iter().collect();
        assert!(matches!(adamw_step(&mut p, &g, &mut st, &hyper(0.0), |_| 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn sampler_covers_each_epoch_once() {
        let mut s = BatchSampler::new(10, 5, RngStream::root(4));
        let mut seen: Vec<usize> = s.batch(0).into_iter().chain(s.batch(1)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let mut again = BatchSampler::new(10, 5, RngStream::root(4));
        assert_eq!(again.batch(3), s.batch(3));
    }

    fn tiny_job() -> TrainJob {
        let corpus = CorpusSpec { samples_per_class_per_domain: 2, image_size: 8, text_len_range: [4, 6], ..Default::default() };
        let mut corpus = corpus;
        corpus.domain_nuisance = Some(corpus.derived_nuisance());
        TrainJob {
            corpus,
            model: ModelConfig { embed_dim: 8, heads: 2, vision_layers: 1, text_layers: 1, recon_layer: 1, decoder_layers: 1 },
            train: TrainConfig { total_steps: 4, batch_size: 4, ..Default::default() },
            corruption: CorruptionConfig::default(),
            seed: 11,
        }
    }

    #[test]
    fn runs_are_deterministic_and_resumable() {
        let job = tiny_job();
        let corpus = generate_corpus(&job.corpus, 1).unwrap();
        let (a, log_a) = train_run(&job, &corpus).unwrap();
        let (b, log_b) = train_run(&job, &corpus).unwrap();
        assert_eq!(log_csv(&log_a), log_csv(&log_b));
        assert_eq!(a, b);
        assert_eq!(log_a.len(), 4);

        let mut t = Trainer::new(job.clone(), &corpus).unwrap();
        t.run_until(2).unwrap();
        let mid = Checkpoint::from_json(&t.checkpoint().to_json().unwrap()).unwrap();
        assert_eq!(mid, t.checkpoint());
        let mut r = Trainer::from_checkpoint(mid, &corpus).unwrap();
        r.run().unwrap();
        assert_eq!(r.checkpoint().params, a.params);
        assert_eq!(r.log(), &log_a[2..]);
    }

    #[test]
    fn checkpoint_rejects_tampering() {
        let job = tiny_job();
        let corpus = generate_corpus(&job.corpus, 1).unwrap();
        let t = Trainer::new(job, &corpus).unwrap();
        let text = t.checkpoint().to_json().unwrap();
        let bumped = text.replacen("\"format_version\":\"1\"", "\"format_version\":\"2\"", 1);
        assert!(matches!(Checkpoint::from_json(&bumped), Err(Error::UnsupportedVersion { .. })));
        assert!(matches!(Checkpoint::from_json(&text[..text.len() / 2]), Err(Error::Parse { .. })));
        let pos = text.find("\"step\":0").unwrap() + 7;
        let mut bytes = text.clone().into_bytes();
        bytes[pos] = b'1';
        let flipped = String::from_utf8(bytes).unwrap();
        assert!(matches!(Checkpoint::from_json(&flipped), Err(Error::Integrity(_))));
    }

    #[test]
    fn toggles_zero_weights_and_fix_masks() {
        let mut job = tiny_job();
        job.train = job.train.with_toggles([false, false, false]);
        let w = job.train.effective_weights();
        assert_eq!((w.dom, w.res), (0.0, 0.0));
        let cc = job.training_corruption();
        assert_eq!(cc.spec.severity, 0.0);
        assert_eq!(cc.mask_bounds, MaskBounds::fixed(0.5, 0.3));
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(Trainer::new(tiny_job(), &[]), Err(Error::Argument(_))));
    }
}
