//! Reconstruction and robustness loss terms, their weighted total, and the
//! frozen perceptual feature extractor used by the image term.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::corruption::CorruptedSample;
use crate::data::{PairedSample, TokenId, NUM_RESERVED};
use crate::error::{Error, Result};
use crate::model::{Binder, InputShape, Model};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Seed of the perceptual extractor; never derived from the run seed.
pub const PERCEPTUAL_SEED: u64 = 0x5EED_F00D;

/// Patch embedding, one pre-norm Transformer block and a mean pool, with
/// fixed random weights. Gradients pass through it but never update it.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptualExtractor {
    params: ParamStore,
    heads: usize,
    patch_count: usize,
    patch_dim: usize,
}

impl PerceptualExtractor {
    pub fn new(shape: &InputShape, embed_dim: usize, heads: usize) -> Self {
        let rng = RngStream::root(PERCEPTUAL_SEED).fork("perceptual");
        let d = embed_dim;
        let mut params = ParamStore::new();
        let mut normal = |name: &str, shape: &[usize], std: f64| {
            let mut r = rng.fork(name);
            let n = shape.iter().product();
            let vals = (0..n).map(|_| std * r.normal()).collect();
            params.insert(name, Tensor::new(shape.to_vec(), vals).expect("shape"));
        };
        let w_std = 1.0 / (d as f64).sqrt();
        normal("phi.embed.w", &[shape.patch_dim, d], 1.0 / (shape.patch_dim as f64).sqrt());
        normal("phi.pos", &[shape.patch_count, d], 0.5);
        for p in ["q", "k", "v", "o"] {
            normal(&format!("phi.block.attn.{p}.w"), &[d, d], w_std);
        }
        normal("phi.block.mlp.fc1.w", &[d, 4 * d], w_std);
        normal("phi.block.mlp.fc2.w", &[4 * d, d], 1.0 / ((4 * d) as f64).sqrt());
        let mut zeros = |name: String, n: usize, v: f64| params.insert(name, Tensor::full(&[n], v));
        zeros("phi.embed.b".into(), d, 0.0);
        for p in ["q", "k", "v", "o"] {
            zeros(format!("phi.block.attn.{p}.b"), d, 0.0);
        }
        zeros("phi.block.mlp.fc1.b".into(), 4 * d, 0.0);
        zeros("phi.block.mlp.fc2.b".into(), d, 0.0);
        for ln in ["ln1", "ln2"] {
            zeros(format!("phi.block.{ln}.gamma"), d, 1.0);
            zeros(format!("phi.block.{ln}.beta"), d, 0.0);
        }
        Self { params, heads, patch_count: shape.patch_count, patch_dim: shape.patch_dim }
    }

    pub fn for_model(model: &Model) -> Self {
        Self::new(&model.shape, model.config.embed_dim, model.config.heads)
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Feature row `[1 × d]` of a full patch grid.
    pub fn features(&self, g: &mut Graph, patches: Var) -> Result<Var> {
        let shape = g.value(patches).shape().to_vec();
        if shape != [self.patch_count, self.patch_dim] {
            return Err(Error::Contract(format!(
                "perceptual extractor expects [{} x {}] patches, got {:?}",
                self.patch_count, self.patch_dim, shape
            )));
        }
        let b = Binder::frozen(&self.params);
        let w = b.get(g, "phi.embed.w")?;
        let bias = b.get(g, "phi.embed.b")?;
        let x = g.linear(patches, w, bias)?;
        let pos = b.get(g, "phi.pos")?;
        let x = g.add(x, pos)?;
        let x = b.block(g, x, None, "phi.block", self.heads)?;
        Ok(g.mean_rows(x))
    }

    pub fn features_of(&self, patches: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = g.constant(patches.clone());
        let f = self.features(&mut g, p)?;
        Ok(g.value(f).clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    #[default]
    L1,
    L2sq,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub img: f64,
    pub txt: f64,
    pub dom: f64,
    pub res: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { img: 1.0, txt: 1.0, dom: 0.1, res: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("img", self.img), ("txt", self.txt), ("dom", self.dom), ("res", self.res)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Argument(format!("loss weight {name} = {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.img, self.txt, self.dom, self.res]
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { img: c * self.img, txt: c * self.txt, dom: c * self.dom, res: c * self.res }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_img: f64,
    pub l_txt: f64,
    pub l_dom: f64,
    pub l_res: f64,
    pub l_total: f64,
    pub n_masked_tokens: usize,
    pub n_dom_pairs: usize,
}

impl LossBreakdown {
    /// Weighted total of `[img, txt, dom, res]`, summed in that order.
    pub fn combine(terms: [f64; 4], weights: &LossWeights, n_masked_tokens: usize, n_dom_pairs: usize) -> Result<Self> {
        weights.validate()?;
        let l_total = terms.iter().zip(weights.as_array()).fold(0.0, |acc, (t, w)| acc + w * t);
        Ok(Self {
            l_img: terms[0],
            l_txt: terms[1],
            l_dom: terms[2],
            l_res: terms[3],
            l_total,
            n_masked_tokens,
            n_dom_pairs,
        })
    }

    pub fn terms(&self) -> [f64; 4] {
        [self.l_img, self.l_txt, self.l_dom, self.l_res]
    }

    pub fn is_finite(&self) -> bool {
        self.terms().iter().chain([&self.l_total]).all(|v| v.is_finite())
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "l_img={} l_txt={} l_dom={} l_res={} l_total={}",
            self.l_img, self.l_txt, self.l_dom, self.l_res, self.l_total
        )
    }
}

/// Sum of `|Δ|` (L1) or `Δ²` (L2sq) between perceptual features of the
/// reconstruction and of the clean grid.
pub fn loss_image(g: &mut Graph, recon: Var, clean: &Tensor, phi: &PerceptualExtractor, mode: NormMode) -> Result<Var> {
    let f_hat = phi.features(g, recon)?;
    let c = g.constant(clean.clone());
    let f = phi.features(g, c)?;
    let delta = g.sub(f_hat, f)?;
    Ok(feature_distance(g, delta, mode))
}

pub fn feature_distance(g: &mut Graph, delta: Var, mode: NormMode) -> Var {
    match mode {
        NormMode::L1 => g.sum_abs(delta),
        NormMode::L2sq => g.sum_squares(delta),
    }
}

/// Mean negative log-likelihood of the targets; zero with no masked tokens.
pub fn loss_text(g: &mut Graph, logits: Var, targets: &[TokenId]) -> Result<Var> {
    let t: Vec<usize> = targets.iter().map(|&x| x as usize).collect();
    g.cross_entropy(logits, &t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
#[derive(Default)]
pub enum PairMode {
    #[default]
    Label,
    Jaccard { threshold: f64 },
}


impl PairMode {
    pub fn parse(mode: &str, threshold: f64) -> Result<Self> {
        match mode {
            "label" => Ok(PairMode::Label),
            "jaccard" => Ok(PairMode::Jaccard { threshold }),
            other => Err(Error::Argument(format!("unknown similarity mode {other:?}"))),
        }
    }
}

pub const DEFAULT_JACCARD_THRESHOLD: f64 = 0.3;

fn content_set(tokens: &[TokenId]) -> BTreeSet<TokenId> {
    tokens.iter().copied().filter(|&t| t as usize >= NUM_RESERVED).collect()
}

pub fn jaccard(a: &[TokenId], b: &[TokenId]) -> f64 {
    let (sa, sb) = (content_set(a), content_set(b));
    let union = sa.union(&sb).count();
    if union == 0 {
        return 0.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

/// Unordered cross-domain pairs judged semantically similar, `i < j`.
pub fn similar_pairs(batch: &[&PairedSample], mode: PairMode) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..batch.len() {
        for j in i + 1..batch.len() {
            let (a, b) = (batch[i], batch[j]);
            if a.domain == b.domain {
                continue;
            }
            let similar = match mode {
                PairMode::Label => a.class_label == b.class_label,
                PairMode::Jaccard { threshold } => jaccard(&a.tokens, &b.tokens) >= threshold,
            };
            if similar {
                out.push((i, j));
            }
        }
    }
    out
}

/// Mean squared distance between fused vectors of each pair; zero with none.
pub fn loss_domain(g: &mut Graph, fused: &[Var], pairs: &[(usize, usize)]) -> Result<Var> {
    let mut terms = Vec::with_capacity(pairs.len());
    for &(i, j) in pairs {
        if i >= fused.len() || j >= fused.len() {
            return Err(Error::Contract(format!("pair ({i}, {j}) outside batch of {}", fused.len())));
        }
        let d = g.sub(fused[i], fused[j])?;
        terms.push(g.sum_squares(d));
    }
    mean_of(g, &terms)
}

/// Batch mean of `‖z − z_v‖² + ‖z − z_l‖²`.
pub fn loss_resilience(g: &mut Graph, z: &[Var], z_v: &[Var], z_l: &[Var]) -> Result<Var> {
    if z.len() != z_v.len() || z.len() != z_l.len() {
        return Err(Error::Contract("resilience inputs differ in batch size".into()));
    }
    let mut terms = Vec::with_capacity(z.len());
    for i in 0..z.len() {
        for other in [z_v[i], z_l[i]] {
            if g.value(z[i]).len() != g.value(other).len() {
                return Err(Error::Contract("resilience vectors differ in length".into()));
            }
        }
        let a = g.sub(z[i], z_v[i])?;
        let a = g.sum_squares(a);
        let b = g.sub(z[i], z_l[i])?;
        let b = g.sum_squares(b);
        terms.push(g.weighted_sum(&[(a, 1.0), (b, 1.0)])?);
    }
    mean_of(g, &terms)
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    if terms.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let w = 1.0 / terms.len() as f64;
    let weighted: Vec<(Var, f64)> = terms.iter().map(|&t| (t, w)).collect();
    g.weighted_sum(&weighted)
}

/// The four term nodes plus the weighted total.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveVars {
    pub img: Var,
    pub txt: Var,
    pub dom: Var,
    pub res: Var,
    /// Image term under the other norm mode, for diagnostics and gradient checks.
    pub img_alt: Var,
    pub total: Var,
}

pub fn loss_total(g: &mut Graph, terms: [Var; 4], weights: &LossWeights) -> Result<Var> {
    weights.validate()?;
    let w = weights.as_array();
    g.weighted_sum(&[(terms[0], w[0]), (terms[1], w[1]), (terms[2], w[2]), (terms[3], w[3])])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSettings {
    pub weights: LossWeights,
    pub norm_mode: NormMode,
}

/// Full forward of a corrupted batch and all loss terms. `pairs` index into
/// `items` and come from [`similar_pairs`] on the clean samples.
pub fn batch_objective(
    g: &mut Graph,
    model: &Model,
    params: &ParamStore,
    phi: &PerceptualExtractor,
    items: &[CorruptedSample],
    pairs: &[(usize, usize)],
    settings: &ObjectiveSettings,
) -> Result<(ObjectiveVars, LossBreakdown)> {
    if items.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let b = Binder::trainable(params);
    let alt_mode = match settings.norm_mode {
        NormMode::L1 => NormMode::L2sq,
        NormMode::L2sq => NormMode::L1,
    };
    let mut img_terms = Vec::new();
    let mut alt_terms = Vec::new();
    let mut txt_terms = Vec::new();
    let (mut zs, mut zvs, mut zls) = (Vec::new(), Vec::new(), Vec::new());
    let n_masked: usize = items.iter().map(|s| s.targets.len()).sum();
    for item in items {
        let lat = model.encode(g, b, &item.visible_patches, &item.index_map, &item.masked_tokens)?;
        let recon = model.decode_image(g, b, lat.z_v_seq, lat.z_l_seq, &item.index_map)?;
        let f_hat = phi.features(g, recon)?;
        let clean = g.constant(item.clean_patches.clone());
        let f = phi.features(g, clean)?;
        let delta = g.sub(f_hat, f)?;
        img_terms.push(feature_distance(g, delta, settings.norm_mode));
        alt_terms.push(feature_distance(g, delta, alt_mode));
        if !item.targets.is_empty() {
            let logits = model.decode_text(g, b, lat.z_l_seq, lat.z_v_seq, &item.masked_positions)?;
            let ce = loss_text(g, logits, &item.targets)?;
            txt_terms.push((ce, item.targets.len() as f64 / n_masked as f64));
        }
        zs.push(lat.z);
        zvs.push(lat.z_v);
        zls.push(lat.z_l);
    }
    let img = mean_of(g, &img_terms)?;
    let img_alt = mean_of(g, &alt_terms)?;
    let txt = if txt_terms.is_empty() { g.constant(Tensor::scalar(0.0)) } else { g.weighted_sum(&txt_terms)? };
    let dom = loss_domain(g, &zs, pairs)?;
    let res = loss_resilience(g, &zs, &zvs, &zls)?;
    let total = loss_total(g, [img, txt, dom, res], &settings.weights)?;
    let terms = [img, txt, dom, res].map(|v| g.value(v).values()[0]);
    let mut breakdown = LossBreakdown::combine(terms, &settings.weights, n_masked, pairs.len())?;
    breakdown.l_total = g.value(total).values()[0];
    Ok((ObjectiveVars { img, txt, dom, res, img_alt, total }, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CorpusSpec;

    fn row(g: &mut Graph, v: &[f64]) -> Var {
        g.constant(Tensor::new(vec![1, v.len()], v.to_vec()).unwrap())
    }

    #[test]
    fn feature_distance_by_hand() {
        let mut g = Graph::new();
        let d = row(&mut g, &[0.5, -0.5]);
        let l1 = feature_distance(&mut g, d, NormMode::L1);
        let l2 = feature_distance(&mut g, d, NormMode::L2sq);
        assert_eq!(g.value(l1).item().unwrap(), 1.0);
        assert_eq!(g.value(l2).item().unwrap(), 0.5);
    }

    #[test]
    fn perceptual_features_are_deterministic_and_sensitive() {
        let spec = CorpusSpec::default();
        let shape = InputShape::from_corpus(&spec);
        let phi = PerceptualExtractor::new(&shape, 32, 4);
        assert_eq!(phi, PerceptualExtractor::new(&shape, 32, 4));
        let mut r = RngStream::root(1);
        let p = Tensor::new(vec![36, 16], (0..576).map(|_| r.uniform()).collect()).unwrap();
        let a = phi.features_of(&p).unwrap();
        assert_eq!(a, phi.features_of(&p).unwrap());
        assert_eq!(a.shape(), &[1, 32]);
        let mut q = p.clone();
        q.values_mut()[5 * 16..6 * 16].iter_mut().for_each(|v| *v = 1.0 - *v);
        let b = phi.features_of(&q).unwrap();
        let l2: f64 = a.values().iter().zip(b.values()).map(|(x, y)| (x - y).powi(2)).sum();
        assert!(l2 > 0.0);
        assert!(phi.features_of(&Tensor::zeros(&[35, 16])).is_err());
    }

    #[test]
    fn identical_reconstruction_has_zero_image_loss() {
        let spec = CorpusSpec::default();
        let phi = PerceptualExtractor::new(&InputShape::from_corpus(&spec), 32, 4);
        let p = Tensor::full(&[36, 16], 0.3);
        for mode in [NormMode::L1, NormMode::L2sq] {
            let mut g = Graph::new();
            let r = g.constant(p.clone());
            let l = loss_image(&mut g, r, &p, &phi, mode).unwrap();
            assert_eq!(g.value(l).item().unwrap(), 0.0);
        }
    }

    #[test]
    fn text_loss_cases() {
        let mut g = Graph::new();
        let uniform = g.constant(Tensor::zeros(&[3, 64]));
        let l = loss_text(&mut g, uniform, &[0, 17, 63]).unwrap();
        assert!((g.value(l).item().unwrap() - 64f64.ln()).abs() < 1e-9);

        let mut sat = Tensor::zeros(&[1, 10]);
        sat.values_mut()[4] = 30.0;
        let s = g.constant(sat);
        let l = loss_text(&mut g, s, &[4]).unwrap();
        assert!(g.value(l).item().unwrap() < 1e-9);

        let two = g.constant(Tensor::from_rows(&[vec![0.0, 3f64.ln()], vec![0.0, 3f64.ln()]]).unwrap());
        let l = loss_text(&mut g, two, &[1, 0]).unwrap();
        // Scalar softmax oracle.
        let p1: f64 = 3.0 / (1.0 + 3.0);
        let p0: f64 = 1.0 / (1.0 + 3.0);
        let expected = (-p1.ln() - p0.ln()) / 2.0;
        assert!((g.value(l).item().unwrap() - expected).abs() < 1e-12);

        let empty = g.constant(Tensor::zeros(&[0, 64]));
        let l = loss_text(&mut g, empty, &[]).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);
        let bad = g.constant(Tensor::zeros(&[1, 8]));
        assert!(loss_text(&mut g, bad, &[8]).is_err());
    }

    fn sample(domain: usize, class: usize, tokens: Vec<TokenId>) -> PairedSample {
        PairedSample { id: format!("{domain}-{class}"), image: Tensor::zeros(&[1, 1]), tokens, class_label: class, domain }
    }

    #[test]
    fn pair_selection() {
        let same_domain = [sample(0, 0, vec![]), sample(0, 0, vec![]), sample(0, 1, vec![])];
        let refs: Vec<&PairedSample> = same_domain.iter().collect();
        assert!(similar_pairs(&refs, PairMode::Label).is_empty());
        let two = [sample(0, 1, vec![]), sample(1, 1, vec![])];
        let refs: Vec<&PairedSample> = two.iter().collect();
        assert_eq!(similar_pairs(&refs, PairMode::Label), vec![(0, 1)]);
        assert!(PairMode::parse("cosine", 0.3).is_err());
        assert_eq!(PairMode::parse("jaccard", 0.4).unwrap(), PairMode::Jaccard { threshold: 0.4 });
    }

    #[test]
    fn domain_loss_cases() {
        let mut g = Graph::new();
        let a = row(&mut g, &[1.0, 0.0]);
        let b = row(&mut g, &[0.0, 1.0]);
        let l = loss_domain(&mut g, &[a, b], &[(0, 1)]).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 2.0);
        let same = loss_domain(&mut g, &[a, a], &[(0, 1)]).unwrap();
        assert_eq!(g.value(same).item().unwrap(), 0.0);
        let none = loss_domain(&mut g, &[a, b], &[]).unwrap();
        assert_eq!(g.value(none).item().unwrap(), 0.0);
        assert!(loss_domain(&mut g, &[a], &[(0, 1)]).is_err());
    }

    #[test]
    fn resilience_cases() {
        let mut g = Graph::new();
        let z = row(&mut g, &[0.0]);
        let zv = row(&mut g, &[1.0]);
        let zl = row(&mut g, &[-1.0]);
        let l = loss_resilience(&mut g, &[z], &[zv], &[zl]).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 2.0);
        let l0 = loss_resilience(&mut g, &[zv], &[zv], &[zv]).unwrap();
        assert_eq!(g.value(l0).item().unwrap(), 0.0);
        let wide = row(&mut g, &[0.0, 1.0]);
        assert!(loss_resilience(&mut g, &[z], &[wide], &[zl]).is_err());
    }

    #[test]
    fn total_cases() {
        let w = LossWeights::default();
        let b = LossBreakdown::combine([2.0, 3.0, 4.0, 5.0], &w, 0, 0).unwrap();
        assert!((b.l_total - 5.9).abs() < 1e-12);
        let recon_only = LossWeights { dom: 0.0, res: 0.0, ..w };
        let b = LossBreakdown::combine([2.0, 3.0, 4.0, 5.0], &recon_only, 0, 0).unwrap();
        assert_eq!(b.l_total, 5.0);
        let neg = LossWeights { dom: -0.1, ..w };
        assert!(matches!(LossBreakdown::combine([1.0; 4], &neg, 0, 0), Err(Error::Argument(_))));
    }
}
