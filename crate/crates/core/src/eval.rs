//! Linear-probe, domain-transfer, perturbation-sweep, retrieval and ablation
//! evaluation of trained encoders.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore};
use crate::corruption::{perturb_image, perturb_text, CorruptionSpec, MaskIndexMap};
use crate::data::{CorpusSpec, PairedSample};
use crate::error::{Error, Result};
use crate::model::{patchify, Binder, Model};
use crate::rng::RngStream;
use crate::trainer::{check_corpus, train_run, Checkpoint, TrainJob};

pub const PROBE_ITERATIONS: usize = 500;
pub const PROBE_LR: f64 = 0.1;
pub const PROBE_L2: f64 = 1e-4;

/// The four component rows: robust masking, domain consistency, modality resilience.
pub const ABLATION_ROWS: [[bool; 3]; 4] =
    [[false, false, false], [true, false, false], [true, true, false], [true, true, true]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub severities: Vec<f64>,
    /// Fraction of each (class, domain) cell used to train the probe.
    pub train_fraction: f64,
    pub retrieval_ks: Vec<usize>,
    pub retrieval_severity: f64,
    pub ablation_severity: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            severities: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            train_fraction: 0.5,
            retrieval_ks: vec![1, 5, 10],
            retrieval_severity: 0.5,
            ablation_severity: 0.5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.severities.is_empty() {
            return Err(Error::Argument("severities must be non-empty".into()));
        }
        if self.severities.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Argument("severities must be sorted".into()));
        }
        let all = self.severities.iter().chain([&self.retrieval_severity, &self.ablation_severity]);
        for &s in all {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Argument(format!("severity {s} outside [0, 1]")));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Argument(format!("train_fraction {} outside (0, 1)", self.train_fraction)));
        }
        if self.retrieval_ks.is_empty() || self.retrieval_ks.contains(&0) {
            return Err(Error::Argument("retrieval_ks must be non-empty and positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub z: Vec<f64>,
    pub z_v: Vec<f64>,
    pub z_l: Vec<f64>,
}

/// Pooled and fused vectors of every sample after corruption at `severity`,
/// with no masking. Each sample's corruption stream is keyed by its id, so
/// different severities share their random draws.
pub fn embed_corpus(
    model: &Model,
    params: &ParamStore,
    corpus_spec: &CorpusSpec,
    ops: &CorruptionSpec,
    samples: &[PairedSample],
    severity: f64,
    seed: u64,
) -> Result<Vec<Embedding>> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(Error::Argument(format!("severity {severity} outside [0, 1]")));
    }
    check_corpus(corpus_spec, samples)?;
    if model.shape.patch_dim != corpus_spec.patch_dim() || model.shape.vocab != corpus_spec.total_vocab() {
        return Err(Error::Compatibility("model geometry does not match the corpus spec".into()));
    }
    let spec = CorruptionSpec { severity, ..*ops };
    let base = RngStream::root(seed).fork("eval");
    let b = Binder::frozen(params);
    samples
        .iter()
        .map(|s| {
            let rng = base.fork(&s.id);
            let image = perturb_image(&s.image, &spec, &rng.fork("image"));
            let tokens = perturb_text(&s.tokens, &spec, corpus_spec, &rng.fork("text"));
            let patches = patchify(&image, corpus_spec.patch_size)?;
            let map = MaskIndexMap::unmasked(patches.rows());
            let mut g = Graph::new();
            let lat = model.encode(&mut g, b, &patches, &map, &tokens)?;
            Ok(Embedding {
                z: g.value(lat.z).values().to_vec(),
                z_v: g.value(lat.z_v).values().to_vec(),
                z_l: g.value(lat.z_l).values().to_vec(),
            })
        })
        .collect()
}

pub fn embed_checkpoint(ckpt: &Checkpoint, samples: &[PairedSample], severity: f64) -> Result<Vec<Embedding>> {
    let c = &ckpt.config;
    embed_corpus(&ckpt.model, &ckpt.params, &c.corpus, &c.corruption.spec, samples, severity, c.seed)
}

/// Multinomial logistic regression by full-batch gradient descent on
/// train-standardized features, zero-initialized; returns test accuracy.
pub fn linear_probe(features: &[Vec<f64>], labels: &[usize], train_idx: &[usize], test_idx: &[usize]) -> Result<f64> {
    let (train_x, train_y): (Vec<&[f64]>, Vec<usize>) =
        train_idx.iter().map(|&i| (features[i].as_slice(), labels[i])).unzip();
    let (test_x, test_y): (Vec<&[f64]>, Vec<usize>) =
        test_idx.iter().map(|&i| (features[i].as_slice(), labels[i])).unzip();
    probe_accuracy(&train_x, &train_y, &test_x, &test_y)
}

/// As [`linear_probe`] with separate train and test feature sets.
pub fn probe_accuracy(train_x: &[&[f64]], train_y: &[usize], test_x: &[&[f64]], test_y: &[usize]) -> Result<f64> {
    if train_x.is_empty() || test_x.is_empty() {
        return Err(Error::Argument("probe needs non-empty train and test sets".into()));
    }
    let d = train_x[0].len();
    if train_x.iter().chain(test_x).any(|x| x.len() != d) {
        return Err(Error::Dimension("probe features differ in length".into()));
    }
    let classes = train_y.iter().chain(test_y).max().unwrap() + 1;
    for c in 0..classes {
        if !train_y.contains(&c) {
            return Err(Error::Argument(format!("class {c} has no training sample")));
        }
    }
    let n = train_x.len() as f64;
    let mut mean = vec![0.0; d];
    for x in train_x {
        mean.iter_mut().zip(x.iter()).for_each(|(m, v)| *m += v / n);
    }
    let mut std = vec![0.0; d];
    for x in train_x {
        std.iter_mut().zip(x.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m).powi(2) / n);
    }
    std.iter_mut().for_each(|s| *s = if *s > 1e-24 { s.sqrt() } else { 1.0 });
    let standardize = |x: &[f64]| -> Vec<f64> { x.iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect() };
    let xs: Vec<Vec<f64>> = train_x.iter().map(|x| standardize(x)).collect();

    let mut w = vec![0.0; d * classes];
    let mut b = vec![0.0; classes];
    let logits = |w: &[f64], b: &[f64], x: &[f64]| -> Vec<f64> {
        (0..classes).map(|c| b[c] + x.iter().enumerate().map(|(j, v)| v * w[j * classes + c]).sum::<f64>()).collect()
    };
    for _ in 0..PROBE_ITERATIONS {
        let mut gw = vec![0.0; d * classes];
        let mut gb = vec![0.0; classes];
        for (x, &y) in xs.iter().zip(train_y) {
            let mut p = logits(&w, &b, x);
            crate::tensor::softmax_in_place(&mut p);
            p[y] -= 1.0;
            for c in 0..classes {
                gb[c] += p[c] / n;
                for j in 0..d {
                    gw[j * classes + c] += x[j] * p[c] / n;
                }
            }
        }
        for (wi, gi) in w.iter_mut().zip(&gw) {
            *wi -= PROBE_LR * (gi + PROBE_L2 * *wi);
        }
        for (bi, gi) in b.iter_mut().zip(&gb) {
            *bi -= PROBE_LR * gi;
        }
    }
    let correct = test_x
        .iter()
        .zip(test_y)
        .filter(|(x, &y)| {
            let l = logits(&w, &b, &standardize(x));
            argmax(&l) == y
        })
        .count();
    Ok(correct as f64 / test_x.len() as f64)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Absolute percentage-point drop from in-domain to cross-domain accuracy.
pub fn domain_drop(acc_id: f64, acc_cd: f64) -> f64 {
    acc_id - acc_cd
}

/// Per (class, domain) cell in id order, the first `round(fraction·n)`
/// samples go to train and the rest to test.
pub fn split_indices(samples: &[PairedSample], fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        cells.entry((s.class_label, s.domain)).or_default().push(i);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for idx in cells.values_mut() {
        idx.sort_by(|&a, &b| samples[a].id.cmp(&samples[b].id));
        let k = ((fraction * idx.len() as f64).round() as usize).clamp(1.min(idx.len()), idx.len());
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn in_domains(samples: &[PairedSample], idx: &[usize], domains: &[usize]) -> Vec<usize> {
    idx.iter().copied().filter(|&i| domains.contains(&samples[i].domain)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub train_domains: Vec<usize>,
    pub eval_domains: Vec<usize>,
    pub severity: f64,
    pub accuracy: f64,
}

fn probe_between(
    samples: &[PairedSample],
    train_emb: &[Embedding],
    test_emb: &[Embedding],
    train_idx: &[usize],
    test_idx: &[usize],
) -> Result<f64> {
    let tx: Vec<&[f64]> = train_idx.iter().map(|&i| train_emb[i].z.as_slice()).collect();
    let ty: Vec<usize> = train_idx.iter().map(|&i| samples[i].class_label).collect();
    let ex: Vec<&[f64]> = test_idx.iter().map(|&i| test_emb[i].z.as_slice()).collect();
    let ey: Vec<usize> = test_idx.iter().map(|&i| samples[i].class_label).collect();
    probe_accuracy(&tx, &ty, &ex, &ey)
}

/// In-domain (domain 0 → 0) and cross-domain (domain 0 → the rest) probe
/// accuracies on clean inputs.
pub fn domain_transfer(samples: &[PairedSample], emb: &[Embedding], fraction: f64) -> Result<(ProbeRecord, ProbeRecord)> {
    let (train, test) = split_indices(samples, fraction);
    let mut others: Vec<usize> = samples.iter().map(|s| s.domain).filter(|&d| d != 0).collect();
    others.sort_unstable();
    others.dedup();
    if others.is_empty() {
        return Err(Error::Argument("cross-domain evaluation needs at least two domains".into()));
    }
    let tr = in_domains(samples, &train, &[0]);
    let id = probe_between(samples, emb, emb, &tr, &in_domains(samples, &test, &[0]))?;
    let cd = probe_between(samples, emb, emb, &tr, &in_domains(samples, &test, &others))?;
    Ok((
        ProbeRecord { train_domains: vec![0], eval_domains: vec![0], severity: 0.0, accuracy: id },
        ProbeRecord { train_domains: vec![0], eval_domains: others, severity: 0.0, accuracy: cd },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub severity: f64,
    pub accuracy: f64,
    pub seed: u64,
}

/// Probe trained on clean train-split embeddings and tested on test-split
/// embeddings perturbed at each severity.
pub fn perturbation_sweep(ckpt: &Checkpoint, samples: &[PairedSample], severities: &[f64], fraction: f64) -> Result<Vec<SweepPoint>> {
    if severities.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Argument("severities must be sorted".into()));
    }
    let (train, test) = split_indices(samples, fraction);
    let clean = embed_checkpoint(ckpt, samples, 0.0)?;
    severities
        .iter()
        .map(|&s| {
            let pert = if s == 0.0 { clean.clone() } else { embed_checkpoint(ckpt, samples, s)? };
            let accuracy = probe_between(samples, &clean, &pert, &train, &test)?;
            Ok(SweepPoint { severity: s, accuracy, seed: ckpt.config.seed })
        })
        .collect()
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("severity,accuracy,seed\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.severity, p.accuracy, p.seed);
    }
    out
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Rank (from 1) of the true text for every image query. Ties go to the
/// lower index; a zero vector scores −∞, and a true pair involving one is
/// placed at the worst rank `n`.
pub fn retrieval_ranks(images: &[Vec<f64>], texts: &[Vec<f64>]) -> Result<Vec<usize>> {
    if images.len() != texts.len() {
        return Err(Error::Argument(format!("{} images but {} texts", images.len(), texts.len())));
    }
    let n = images.len();
    Ok((0..n)
        .map(|i| {
            let Some(own) = cosine(&images[i], &texts[i]) else { return n };
            let mut rank = 1;
            for j in 0..n {
                if j == i {
                    continue;
                }
                if let Some(s) = cosine(&images[i], &texts[j]) {
                    if s > own || (s == own && j < i) {
                        rank += 1;
                    }
                }
            }
            rank
        })
        .collect())
}

pub fn recall_at(ranks: &[usize], k: usize) -> f64 {
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

pub fn mean_rank(ranks: &[usize]) -> f64 {
    ranks.iter().sum::<usize>() as f64 / ranks.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub recall_at: BTreeMap<usize, f64>,
    pub mean_rank: f64,
    pub recall_at_perturbed: BTreeMap<usize, f64>,
    pub perturbed_mean_rank: f64,
    pub delta_mean_rank: f64,
}

/// Image-to-text retrieval on clean and perturbed embeddings.
pub fn retrieval_eval(
    z_v: &[Vec<f64>],
    z_l: &[Vec<f64>],
    z_v_pert: &[Vec<f64>],
    z_l_pert: &[Vec<f64>],
    ks: &[usize],
) -> Result<RetrievalMetrics> {
    if z_v.is_empty() {
        return Err(Error::Argument("retrieval needs at least one pair".into()));
    }
    if z_v_pert.len() != z_v.len() {
        return Err(Error::Argument("clean and perturbed sets differ in size".into()));
    }
    let clean = retrieval_ranks(z_v, z_l)?;
    let pert = retrieval_ranks(z_v_pert, z_l_pert)?;
    let recall = |r: &[usize]| ks.iter().map(|&k| (k, recall_at(r, k))).collect();
    let (mr, pmr) = (mean_rank(&clean), mean_rank(&pert));
    Ok(RetrievalMetrics {
        recall_at: recall(&clean),
        mean_rank: mr,
        recall_at_perturbed: recall(&pert),
        perturbed_mean_rank: pmr,
        delta_mean_rank: pmr - mr,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub probes: Vec<ProbeRecord>,
    pub id_accuracy_pct: f64,
    pub cd_accuracy_pct: f64,
    pub drop: f64,
    pub retrieval: RetrievalMetrics,
}

pub fn evaluate(ckpt: &Checkpoint, samples: &[PairedSample], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let clean = embed_checkpoint(ckpt, samples, 0.0)?;
    let (id, cd) = domain_transfer(samples, &clean, cfg.train_fraction)?;
    let pert = embed_checkpoint(ckpt, samples, cfg.retrieval_severity)?;
    let pick = |e: &[Embedding], f: fn(&Embedding) -> &Vec<f64>| e.iter().map(|x| f(x).clone()).collect::<Vec<_>>();
    let retrieval = retrieval_eval(
        &pick(&clean, |e| &e.z_v),
        &pick(&clean, |e| &e.z_l),
        &pick(&pert, |e| &e.z_v),
        &pick(&pert, |e| &e.z_l),
        &cfg.retrieval_ks,
    )?;
    let (id_pct, cd_pct) = (100.0 * id.accuracy, 100.0 * cd.accuracy);
    let probes = vec![id, cd];
    Ok(EvalReport {
        seed: ckpt.config.seed,
        probes,
        id_accuracy_pct: id_pct,
        cd_accuracy_pct: cd_pct,
        drop: domain_drop(id_pct, cd_pct),
        retrieval,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub toggles: [bool; 3],
    pub seed: u64,
    pub accuracy: f64,
}

/// Perturbed probe accuracy of a trained checkpoint at one severity.
pub fn perturbed_accuracy(ckpt: &Checkpoint, samples: &[PairedSample], severity: f64, fraction: f64) -> Result<f64> {
    Ok(perturbation_sweep(ckpt, samples, &[severity], fraction)?[0].accuracy)
}

/// One trained model per (toggle row, seed), scored by perturbed probe accuracy.
pub fn ablation_suite(base: &TrainJob, samples: &[PairedSample], seeds: &[u64], cfg: &EvalConfig) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Argument("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for toggles in ABLATION_ROWS {
        for &seed in seeds {
            let job = TrainJob { train: base.train.with_toggles(toggles), seed, ..base.clone() };
            let (ckpt, _) = train_run(&job, samples)?;
            let accuracy = perturbed_accuracy(&ckpt, samples, cfg.ablation_severity, cfg.train_fraction)?;
            rows.push(AblationRow { toggles, seed, accuracy });
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("robust_masking,domain_consistency,modality_resilience,seed,accuracy\n");
    for r in rows {
        let [a, b, c] = r.toggles;
        let _ = writeln!(out, "{a},{b},{c},{},{}", r.seed, r.accuracy);
    }
    out
}

/// Per toggle row: mean, min and max accuracy across seeds, in row order.
pub fn ablation_summary(rows: &[AblationRow]) -> Vec<([bool; 3], f64, f64, f64)> {
    ABLATION_ROWS
        .iter()
        .filter_map(|t| {
            let acc: Vec<f64> = rows.iter().filter(|r| &r.toggles == t).map(|r| r.accuracy).collect();
            if acc.is_empty() {
                return None;
            }
            let mean = acc.iter().sum::<f64>() / acc.len() as f64;
            let lo = acc.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Some((*t, mean, lo, hi))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_corpus;
    use crate::trainer::Trainer;

    #[test]
    fn drop_examples() {
        assert!((domain_drop(83.3, 78.9) - 4.4).abs() < 1e-9);
        assert!((domain_drop(79.1, 72.0) - 7.1).abs() < 1e-9);
        assert_eq!(domain_drop(61.0, 61.0), 0.0);
    }

    fn blobs() -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut r = RngStream::root(5);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..40 {
            let c = i % 2;
            let centre = if c == 0 { -5.0 } else { 5.0 };
            x.push(vec![centre + 0.1 * r.normal(), 0.1 * r.normal()]);
            y.push(c);
        }
        (x, y)
    }

    #[test]
    fn probe_separates_blobs_like_nearest_centroid() {
        let (x, y) = blobs();
        let train: Vec<usize> = (0..20).collect();
        let test: Vec<usize> = (20..40).collect();
        assert_eq!(linear_probe(&x, &y, &train, &test).unwrap(), 1.0);
        let centroid = |c: usize| {
            let pts: Vec<&Vec<f64>> = train.iter().filter(|&&i| y[i] == c).map(|&i| &x[i]).collect();
            let n = pts.len() as f64;
            [pts.iter().map(|p| p[0]).sum::<f64>() / n, pts.iter().map(|p| p[1]).sum::<f64>() / n]
        };
        let (c0, c1) = (centroid(0), centroid(1));
        for &i in &test {
            let d = |c: [f64; 2]| (x[i][0] - c[0]).powi(2) + (x[i][1] - c[1]).powi(2);
            let nearest = if d(c0) <= d(c1) { 0 } else { 1 };
            assert_eq!(nearest, y[i]);
        }
    }

    #[test]
    fn constant_features_predict_majority() {
        let x = vec![vec![1.0, 1.0]; 10];
        let y = vec![0, 0, 0, 1, 1, 0, 0, 0, 1, 0];
        let acc = linear_probe(&x, &y, &[0, 1, 2, 3, 4], &[5, 6, 7, 8, 9]).unwrap();
        assert_eq!(acc, 0.8);
    }

    #[test]
    fn probe_errors() {
        let (x, y) = blobs();
        assert!(matches!(linear_probe(&x, &y, &[0, 2, 4], &[1, 3]), Err(Error::Argument(_))));
        assert!(linear_probe(&x, &y, &[0, 1], &[]).is_err());
    }

    #[test]
    fn identity_alignment_retrieval() {
        let e: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let m = retrieval_eval(&e, &e, &e, &e, &[1]).unwrap();
        assert_eq!(m.recall_at[&1], 1.0);
        assert_eq!(m.mean_rank, 1.0);
        assert_eq!(m.delta_mean_rank, 0.0);
    }

    #[test]
    fn three_by_three_by_hand() {
        let img = vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0]];
        let txt = vec![vec![0.0, 1.0], vec![1.0, 1.0], vec![1.0, 0.0]];
        // Query 0 scores (0, .707, 1): true text last → rank 3.
        // Query 1 scores (.707, 1, .707) → rank 1. Query 2 mirrors query 0.
        assert_eq!(retrieval_ranks(&img, &txt).unwrap(), vec![3, 1, 3]);
        let tie = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        assert_eq!(retrieval_ranks(&tie, &tie).unwrap(), vec![1, 2]);
        let zero = vec![vec![0.0, 0.0], vec![1.0, 0.0]];
        let texts = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert_eq!(retrieval_ranks(&zero, &texts).unwrap(), vec![2, 1]);
    }

    #[test]
    fn split_is_per_cell() {
        let spec = CorpusSpec { samples_per_class_per_domain: 4, ..Default::default() };
        let corpus = generate_corpus(&spec, 2).unwrap();
        let (train, test) = split_indices(&corpus, 0.5);
        assert_eq!((train.len(), test.len()), (8, 8));
        assert!(train.iter().all(|i| !test.contains(i)));
    }

    #[test]
    fn embeddings_are_deterministic_and_sensitive() {
        let mut spec = CorpusSpec { samples_per_class_per_domain: 2, ..Default::default() };
        spec.domain_nuisance = None;
        let corpus = generate_corpus(&spec, 2).unwrap();
        let job = TrainJob { corpus: spec, ..Default::default() };
        let ckpt = Trainer::new(job, &corpus).unwrap().checkpoint();
        let a = embed_checkpoint(&ckpt, &corpus, 0.0).unwrap();
        assert_eq!(a, embed_checkpoint(&ckpt, &corpus, 0.0).unwrap());
        assert!(a.iter().all(|e| e.z.len() == 32 && e.z_v.len() == 32 && e.z_l.len() == 32));
        let b = embed_checkpoint(&ckpt, &corpus, 1.0).unwrap();
        let delta: f64 = a.iter().zip(&b).map(|(x, y)| x.z.iter().zip(&y.z).map(|(p, q)| (p - q).powi(2)).sum::<f64>()).sum();
        assert!(delta > 0.0);
        assert!(embed_checkpoint(&ckpt, &corpus, 1.5).is_err());
    }

    #[test]
    fn ablation_rows_follow_component_order() {
        assert_eq!(ABLATION_ROWS[0], [false, false, false]);
        assert_eq!(ABLATION_ROWS[3], [true, true, true]);
        let rows: Vec<AblationRow> = ABLATION_ROWS
            .iter()
            .map(|&toggles| AblationRow { toggles, seed: 1, accuracy: 0.5 })
            .collect();
        let csv = ablation_csv(&rows);
        assert!(csv.starts_with("robust_masking,domain_consistency,modality_resilience,seed,accuracy\nfalse,false,false,1,0.5"));
        assert_eq!(ablation_summary(&rows).len(), 4);
    }
}
