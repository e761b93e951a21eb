//! Robustness perturbations and asymmetric masking of paired samples.
//!
//! Inputs are perturbed first and masked second. Every operator draws from
//! its own labeled fork, so switching one operator off leaves the draws of
//! the others untouched.

use serde::{Deserialize, Serialize};

use crate::data::{CorpusSpec, TokenId, CLS, MASK, NUM_RESERVED};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{round_half_away, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageOps {
    pub intensity_scale: bool,
    pub noise: bool,
    pub contrast: bool,
    pub region_removal: bool,
}

impl Default for ImageOps {
    fn default() -> Self {
        Self { intensity_scale: true, noise: true, contrast: true, region_removal: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextOps {
    pub sentence_dropout: bool,
    pub synonym_replace: bool,
    pub truncate: bool,
}

impl Default for TextOps {
    fn default() -> Self {
        Self { sentence_dropout: true, synonym_replace: true, truncate: true }
    }
}

/// Strength `severity ∈ [0, 1]` scales every enabled operator linearly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionSpec {
    pub severity: f64,
    pub image_ops: ImageOps,
    pub text_ops: TextOps,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self { severity: 0.5, image_ops: ImageOps::default(), text_ops: TextOps::default() }
    }
}

impl CorruptionSpec {
    pub fn at_severity(severity: f64) -> Self {
        Self { severity, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.severity) {
            return Err(Error::Argument(format!("severity {} outside [0, 1]", self.severity)));
        }
        Ok(())
    }

    pub fn noise_sigma(&self) -> f64 {
        0.25 * self.severity
    }

    pub fn gain_range(&self) -> (f64, f64) {
        (1.0 - 0.5 * self.severity, 1.0 + 0.5 * self.severity)
    }

    pub fn contrast_range(&self) -> (f64, f64) {
        (1.0 - 0.5 * self.severity, 1.0 + 0.5 * self.severity)
    }

    pub fn removed_area_fraction(&self) -> f64 {
        0.3 * self.severity
    }

    pub fn dropout_probability(&self) -> f64 {
        0.5 * self.severity
    }

    pub fn replace_probability(&self) -> f64 {
        0.3 * self.severity
    }

    pub fn keep_fraction(&self) -> f64 {
        1.0 - 0.5 * self.severity
    }
}

/// Sampling intervals for the per-modality mask ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskBounds {
    pub image: [f64; 2],
    pub text: [f64; 2],
}

impl Default for MaskBounds {
    fn default() -> Self {
        Self { image: [0.25, 0.75], text: [0.15, 0.50] }
    }
}

impl MaskBounds {
    pub fn fixed(image: f64, text: f64) -> Self {
        Self { image: [image, image], text: [text, text] }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [("image", self.image), ("text", self.text)] {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(Error::Argument(format!(
                    "{name} mask bounds [{lo}, {hi}] are not a sub-interval of [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub image_ratio: f64,
    pub text_ratio: f64,
    pub masked_patch_indices: Vec<usize>,
    /// Token positions, never 0 (the CLS slot).
    pub masked_token_positions: Vec<usize>,
    pub rng_label: String,
}

/// Original positions of visible and masked patches.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskIndexMap {
    pub n_patches: usize,
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

impl MaskIndexMap {
    pub fn unmasked(n_patches: usize) -> Self {
        Self { n_patches, visible: (0..n_patches).collect(), masked: vec![] }
    }

    /// Per grid slot, the row of the visible sequence it reads from.
    pub fn slots(&self) -> Vec<Option<usize>> {
        let mut slots = vec![None; self.n_patches];
        for (row, &i) in self.visible.iter().enumerate() {
            slots[i] = Some(row);
        }
        slots
    }

    /// Places visible rows back on the grid; masked slots take `fill`.
    pub fn scatter(&self, visible: &Tensor, fill: &[f64]) -> Result<Tensor> {
        let d = visible.cols();
        if visible.rows() != self.visible.len() || fill.len() != d {
            return Err(Error::Contract("scatter input does not match index map".into()));
        }
        let mut out = Vec::with_capacity(self.n_patches * d);
        for slot in self.slots() {
            match slot {
                Some(r) => out.extend_from_slice(visible.row(r)),
                None => out.extend_from_slice(fill),
            }
        }
        Tensor::new(vec![self.n_patches, d], out)
    }
}

pub fn perturb_image(image: &Tensor, spec: &CorruptionSpec, rng: &RngStream) -> Tensor {
    let s = spec.severity;
    if s == 0.0 {
        return image.clone();
    }
    let mut out = image.clone();
    let ops = spec.image_ops;
    if ops.intensity_scale {
        let (lo, hi) = spec.gain_range();
        let gain = rng.fork("intensity").uniform_in(lo, hi);
        out.values_mut().iter_mut().for_each(|p| *p = (*p * gain).clamp(0.0, 1.0));
    }
    if ops.contrast {
        let (lo, hi) = spec.contrast_range();
        let gamma = rng.fork("contrast").uniform_in(lo, hi);
        out.values_mut().iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0).powf(gamma));
    }
    if ops.noise {
        let sigma = spec.noise_sigma();
        let mut r = rng.fork("noise");
        out.values_mut().iter_mut().for_each(|p| *p = (*p + sigma * r.normal()).clamp(0.0, 1.0));
    }
    if ops.region_removal {
        let (h, w) = (image.rows(), image.cols());
        let side = round_half_away((spec.removed_area_fraction() * (h * w) as f64).sqrt()) as usize;
        let side = side.min(h).min(w);
        if side > 0 {
            let mut r = rng.fork("region");
            let top = r.below(h - side + 1);
            let left = r.below(w - side + 1);
            let v = out.values_mut();
            for row in top..top + side {
                v[row * w + left..row * w + left + side].iter_mut().for_each(|p| *p = 0.0);
            }
        }
    }
    out.values_mut().iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
    out
}

/// Chunk dropout, in-lexicon synonym swaps, then prefix truncation. CLS is
/// never touched and at least one token follows it.
pub fn perturb_text(tokens: &[TokenId], spec: &CorruptionSpec, corpus: &CorpusSpec, rng: &RngStream) -> Vec<TokenId> {
    let s = spec.severity;
    if s == 0.0 || tokens.len() < 2 {
        return tokens.to_vec();
    }
    let mut out = tokens.to_vec();
    let ops = spec.text_ops;
    if ops.sentence_dropout {
        let mut r = rng.fork("dropout");
        let n = out.len() - 1;
        if r.bernoulli(spec.dropout_probability()) && n > 1 {
            let chunk = n.div_ceil(3).min(n - 1);
            let start = 1 + r.below(n - chunk + 1);
            out.drain(start..start + chunk);
        }
    }
    if ops.synonym_replace {
        let mut r = rng.fork("synonym");
        let q = spec.replace_probability();
        for tok in out.iter_mut().skip(1) {
            if !r.bernoulli(q) {
                continue;
            }
            match corpus.class_of_token(*tok) {
                Some(c) => {
                    let others: Vec<TokenId> = corpus.lexicon(c).into_iter().filter(|t| t != tok).collect();
                    if !others.is_empty() {
                        *tok = others[r.below(others.len())];
                    }
                }
                None => *tok = (NUM_RESERVED + r.below(corpus.vocab_size)) as TokenId,
            }
        }
    }
    if ops.truncate {
        let n = out.len() - 1;
        let keep = 1 + round_half_away(spec.keep_fraction() * n as f64) as usize;
        out.truncate(keep.max(2));
    }
    out
}

pub fn sample_mask_plan(
    n_patches: usize,
    n_maskable_tokens: usize,
    bounds: &MaskBounds,
    rng: &RngStream,
) -> Result<MaskPlan> {
    if n_patches == 0 {
        return Err(Error::Argument("mask plan needs at least one patch".into()));
    }
    bounds.validate()?;
    let mut img = rng.fork("image");
    let mut txt = rng.fork("text");
    let image_ratio = img.uniform_in(bounds.image[0], bounds.image[1]);
    let text_ratio = txt.uniform_in(bounds.text[0], bounds.text[1]);
    let k_img = round_half_away(image_ratio * n_patches as f64) as usize;
    let k_txt = round_half_away(text_ratio * n_maskable_tokens as f64) as usize;
    let masked_patch_indices = img.choose_sorted(n_patches, k_img);
    let masked_token_positions = txt
        .choose_sorted(n_maskable_tokens, k_txt)
        .into_iter()
        .map(|p| p + 1)
        .collect();
    Ok(MaskPlan {
        image_ratio,
        text_ratio,
        masked_patch_indices,
        masked_token_positions,
        rng_label: rng.label().to_string(),
    })
}

pub fn apply_image_mask(patches: &Tensor, plan: &MaskPlan) -> Result<(Tensor, MaskIndexMap)> {
    let n = patches.rows();
    let mut is_masked = vec![false; n];
    for &i in &plan.masked_patch_indices {
        if i >= n {
            return Err(Error::Contract(format!("masked patch {i} out of range for {n} patches")));
        }
        is_masked[i] = true;
    }
    let visible: Vec<usize> = (0..n).filter(|&i| !is_masked[i]).collect();
    let masked: Vec<usize> = (0..n).filter(|&i| is_masked[i]).collect();
    let d = patches.cols();
    let mut vals = Vec::with_capacity(visible.len() * d);
    for &i in &visible {
        vals.extend_from_slice(patches.row(i));
    }
    let vis = Tensor::new(vec![visible.len(), d], vals)?;
    Ok((vis, MaskIndexMap { n_patches: n, visible, masked }))
}

pub fn apply_text_mask(tokens: &[TokenId], plan: &MaskPlan) -> Result<(Vec<TokenId>, Vec<TokenId>)> {
    let mut out = tokens.to_vec();
    let mut targets = Vec::with_capacity(plan.masked_token_positions.len());
    for &p in &plan.masked_token_positions {
        if p == 0 || p >= tokens.len() {
            return Err(Error::Contract(format!(
                "masked token position {p} invalid for a sequence of {}",
                tokens.len()
            )));
        }
        targets.push(tokens[p]);
        out[p] = MASK;
    }
    Ok((out, targets))
}

/// Inverse of [`apply_text_mask`].
pub fn unmask_text(masked: &[TokenId], targets: &[TokenId], positions: &[usize]) -> Vec<TokenId> {
    let mut out = masked.to_vec();
    for (&p, &t) in positions.iter().zip(targets) {
        out[p] = t;
    }
    out
}

/// Everything the model consumes for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedSample {
    pub visible_patches: Tensor,
    pub index_map: MaskIndexMap,
    pub masked_tokens: Vec<TokenId>,
    pub masked_positions: Vec<usize>,
    pub targets: Vec<TokenId>,
    /// Reconstruction target: patches of the clean image.
    pub clean_patches: Tensor,
    pub plan: MaskPlan,
}

/// Perturb, then mask. `rng` is the sample's stream; perturbation and
/// masking use its `corruption` and `masking` forks.
pub fn corrupt_sample(
    image: &Tensor,
    tokens: &[TokenId],
    spec: &CorruptionSpec,
    bounds: &MaskBounds,
    corpus: &CorpusSpec,
    rng: &RngStream,
) -> Result<CorruptedSample> {
    if tokens.first() != Some(&CLS) {
        return Err(Error::Contract("token sequence must start with CLS".into()));
    }
    let p = corpus.patch_size;
    let perturbed = perturb_image(image, spec, &rng.fork("corruption").fork("image"));
    let text = perturb_text(tokens, spec, corpus, &rng.fork("corruption").fork("text"));
    let clean_patches = crate::model::patchify(image, p)?;
    let patches = crate::model::patchify(&perturbed, p)?;
    let plan = sample_mask_plan(patches.rows(), text.len() - 1, bounds, &rng.fork("masking"))?;
    let (visible_patches, index_map) = apply_image_mask(&patches, &plan)?;
    let (masked_tokens, targets) = apply_text_mask(&text, &plan)?;
    Ok(CorruptedSample {
        visible_patches,
        index_map,
        masked_tokens,
        masked_positions: plan.masked_token_positions.clone(),
        targets,
        clean_patches,
        plan,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64) -> Tensor {
        let mut r = RngStream::new(seed, "img");
        Tensor::new(vec![24, 24], (0..576).map(|_| r.uniform()).collect()).unwrap()
    }

    #[test]
    fn zero_severity_is_identity() {
        let img = image(1);
        let spec = CorruptionSpec::at_severity(0.0);
        assert_eq!(perturb_image(&img, &spec, &RngStream::root(3)), img);
        let toks: Vec<TokenId> = vec![CLS, 5, 6, 20, 7, 8];
        assert_eq!(perturb_text(&toks, &spec, &CorpusSpec::default(), &RngStream::root(3)), toks);
    }

    #[test]
    fn perturbation_is_deterministic_and_clamped() {
        let img = image(2);
        let spec = CorruptionSpec::at_severity(1.0);
        let a = perturb_image(&img, &spec, &RngStream::root(8));
        let b = perturb_image(&img, &spec, &RngStream::root(8));
        assert_eq!(a, b);
        assert!(a.values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a, img);
    }

    #[test]
    fn full_truncation_keeps_half_of_eleven() {
        let spec = CorruptionSpec {
            severity: 1.0,
            image_ops: ImageOps::default(),
            text_ops: TextOps { sentence_dropout: false, synonym_replace: false, truncate: true },
        };
        let toks: Vec<TokenId> = std::iter::once(CLS).chain(3..14).collect();
        assert_eq!(toks.len(), 12);
        let out = perturb_text(&toks, &spec, &CorpusSpec::default(), &RngStream::root(1));
        assert_eq!(out.len(), 7);
        assert_eq!(out[..], toks[..7]);
    }

    #[test]
    fn single_token_lexicon_synonym_is_noop() {
        let corpus = CorpusSpec { content_tokens_per_class: 1, ..CorpusSpec::default() };
        let spec = CorruptionSpec {
            severity: 1.0,
            image_ops: ImageOps::default(),
            text_ops: TextOps { sentence_dropout: false, synonym_replace: true, truncate: false },
        };
        let toks: Vec<TokenId> = vec![CLS, 3, 3, 4, 3, 4, 4, 3];
        for seed in 0..20 {
            assert_eq!(perturb_text(&toks, &spec, &corpus, &RngStream::root(seed)), toks);
        }
    }

    #[test]
    fn synonyms_stay_inside_the_lexicon() {
        let corpus = CorpusSpec::default();
        let spec = CorruptionSpec {
            severity: 1.0,
            image_ops: ImageOps::default(),
            text_ops: TextOps { sentence_dropout: false, synonym_replace: true, truncate: false },
        };
        let toks: Vec<TokenId> = std::iter::once(CLS).chain(std::iter::repeat_n(4, 40)).collect();
        let out = perturb_text(&toks, &spec, &corpus, &RngStream::root(2));
        assert_eq!(out[0], CLS);
        assert!(out[1..].iter().all(|t| corpus.lexicon(0).contains(t)));
        assert!(out[1..].iter().any(|&t| t != 4));
    }

    #[test]
    fn text_never_shrinks_below_two() {
        let corpus = CorpusSpec::default();
        let spec = CorruptionSpec::at_severity(1.0);
        for seed in 0..200 {
            let out = perturb_text(&[CLS, 5, 6], &spec, &corpus, &RngStream::root(seed));
            assert!(out.len() >= 2 && out[0] == CLS);
        }
    }

    #[test]
    fn collapsed_bounds_mask_exactly_half() {
        let plan = sample_mask_plan(36, 10, &MaskBounds::fixed(0.5, 0.5), &RngStream::root(1)).unwrap();
        assert_eq!(plan.masked_patch_indices.len(), 18);
        assert_eq!(plan.masked_token_positions.len(), 5);
        assert!(plan.masked_token_positions.iter().all(|&p| (1..=10).contains(&p)));
    }

    #[test]
    fn zero_bounds_mask_nothing() {
        let plan = sample_mask_plan(36, 10, &MaskBounds::fixed(0.0, 0.0), &RngStream::root(1)).unwrap();
        assert!(plan.masked_patch_indices.is_empty() && plan.masked_token_positions.is_empty());
    }

    #[test]
    fn invalid_bounds_rejected() {
        let bad = MaskBounds { image: [0.6, 0.4], text: [0.1, 0.2] };
        assert!(matches!(sample_mask_plan(36, 10, &bad, &RngStream::root(1)), Err(Error::Argument(_))));
        assert!(sample_mask_plan(0, 10, &MaskBounds::default(), &RngStream::root(1)).is_err());
    }

    #[test]
    fn image_mask_gather_scatter_round_trip() {
        let patches = crate::model::patchify(&image(4), 4).unwrap();
        let plan = sample_mask_plan(36, 5, &MaskBounds::default(), &RngStream::root(5)).unwrap();
        let (vis, map) = apply_image_mask(&patches, &plan).unwrap();
        assert_eq!(vis.rows(), 36 - plan.masked_patch_indices.len());
        let back = map.scatter(&vis, &[0.0; 16]).unwrap();
        for &i in &map.visible {
            assert_eq!(back.row(i), patches.row(i));
        }
        for &i in &map.masked {
            assert!(back.row(i).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn empty_and_full_image_masks() {
        let patches = crate::model::patchify(&image(4), 4).unwrap();
        let mut plan = sample_mask_plan(36, 5, &MaskBounds::fixed(0.0, 0.0), &RngStream::root(5)).unwrap();
        let (vis, _) = apply_image_mask(&patches, &plan).unwrap();
        assert_eq!(vis, patches);
        plan.masked_patch_indices = (0..36).collect();
        let (vis, map) = apply_image_mask(&patches, &plan).unwrap();
        assert_eq!(vis.shape(), &[0, 16]);
        assert_eq!(map.slots(), vec![None; 36]);
        plan.masked_patch_indices = vec![36];
        assert!(matches!(apply_image_mask(&patches, &plan), Err(Error::Contract(_))));
    }

    #[test]
    fn text_mask_round_trip_and_boundaries() {
        let toks: Vec<TokenId> = vec![CLS, 9, 10, 11, 12];
        let mut plan = sample_mask_plan(4, 4, &MaskBounds::fixed(0.0, 0.0), &RngStream::root(1)).unwrap();
        let (m, t) = apply_text_mask(&toks, &plan).unwrap();
        assert_eq!(m, toks);
        assert!(t.is_empty());
        plan.masked_token_positions = vec![1, 2, 3, 4];
        let (m, t) = apply_text_mask(&toks, &plan).unwrap();
        assert_eq!(m, vec![CLS, MASK, MASK, MASK, MASK]);
        assert_eq!(unmask_text(&m, &t, &plan.masked_token_positions), toks);
        plan.masked_token_positions = vec![0];
        assert!(apply_text_mask(&toks, &plan).is_err());
    }
}
