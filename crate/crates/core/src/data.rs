//! Synthetic multi-domain paired image/text corpus.
//!
//! Each sample carries a semantic class (a rectangle whose placement and a
//! token lexicon both depend on the class) and a domain (intensity gain,
//! offset, sensor noise and a pool of style tokens). The two factors are
//! independent by construction, so domain invariance is measurable.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const MASK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const NUM_RESERVED: usize = 3;

const BACKGROUND: f64 = 0.2;
const FOREGROUND: f64 = 0.8;
const DEFAULT_STYLE_TOKENS: usize = 6;

/// Acquisition and reporting nuisance for one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainNuisance {
    pub gain: f64,
    pub offset: f64,
    pub noise_sigma: f64,
    pub style_tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub num_classes: usize,
    pub num_domains: usize,
    pub samples_per_class_per_domain: usize,
    pub image_size: usize,
    pub patch_size: usize,
    /// Non-reserved vocabulary size; token ids span `0..vocab_size + 3`.
    pub vocab_size: usize,
    pub content_tokens_per_class: usize,
    /// Inclusive bounds on the number of tokens after the leading CLS.
    pub text_len_range: [usize; 2],
    /// Explicit per-domain nuisance; derived from the domain index when absent.
    #[serde(default)]
    pub domain_nuisance: Option<Vec<DomainNuisance>>,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        let mut spec = Self {
            num_classes: 2,
            num_domains: 2,
            samples_per_class_per_domain: 32,
            image_size: 24,
            patch_size: 4,
            vocab_size: 64,
            content_tokens_per_class: 6,
            text_len_range: [8, 24],
            domain_nuisance: None,
        };
        spec.domain_nuisance = Some(spec.derived_nuisance());
        spec
    }
}

impl CorpusSpec {
    pub fn total_vocab(&self) -> usize {
        self.vocab_size + NUM_RESERVED
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn max_tokens(&self) -> usize {
        self.text_len_range[1] + 1
    }

    /// Token ids of class `c`'s content lexicon.
    pub fn lexicon(&self, class: usize) -> Vec<TokenId> {
        let start = NUM_RESERVED + class * self.content_tokens_per_class;
        (start..start + self.content_tokens_per_class).map(|t| t as TokenId).collect()
    }

    /// Class whose lexicon contains `token`, if any.
    pub fn class_of_token(&self, token: TokenId) -> Option<usize> {
        let t = token as usize;
        if t < NUM_RESERVED || self.content_tokens_per_class == 0 {
            return None;
        }
        let c = (t - NUM_RESERVED) / self.content_tokens_per_class;
        (c < self.num_classes).then_some(c)
    }

    /// Default nuisance ladder: later domains are darker-gained, brighter,
    /// noisier, and each owns a disjoint block of style tokens.
    pub fn derived_nuisance(&self) -> Vec<DomainNuisance> {
        let first_style = NUM_RESERVED + self.num_classes * self.content_tokens_per_class;
        (0..self.num_domains)
            .map(|d| {
                let t = if self.num_domains > 1 { d as f64 / (self.num_domains - 1) as f64 } else { 0.0 };
                let start = first_style + d * DEFAULT_STYLE_TOKENS;
                DomainNuisance {
                    gain: 1.0 - 0.3 * t,
                    offset: 0.2 * t,
                    noise_sigma: 0.05 + 0.1 * t,
                    style_tokens: (start..start + DEFAULT_STYLE_TOKENS)
                        .map(|x| x as TokenId)
                        .collect(),
                }
            })
            .collect()
    }

    pub fn nuisance(&self) -> Vec<DomainNuisance> {
        self.domain_nuisance.clone().unwrap_or_else(|| self.derived_nuisance())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.num_classes < 2 {
            return fail(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.num_domains < 2 {
            return fail(format!("num_domains must be >= 2, got {}", self.num_domains));
        }
        if self.samples_per_class_per_domain < 1 {
            return fail("samples_per_class_per_domain must be >= 1".into());
        }
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "patch_size {} must divide image_size {}",
                self.patch_size, self.image_size
            ));
        }
        if self.content_tokens_per_class < 1 {
            return fail("content_tokens_per_class must be >= 1".into());
        }
        let [lo, hi] = self.text_len_range;
        if lo < 3 || lo > hi {
            return fail(format!("text_len_range [{lo}, {hi}] must satisfy 3 <= min <= max"));
        }
        let lexicon_end = NUM_RESERVED + self.num_classes * self.content_tokens_per_class;
        if lexicon_end > self.total_vocab() {
            return fail(format!(
                "class lexicons need {} ids but vocab_size is {}",
                lexicon_end - NUM_RESERVED,
                self.vocab_size
            ));
        }
        let nuisance = self.nuisance();
        if nuisance.len() != self.num_domains {
            return fail(format!(
                "domain_nuisance has {} entries for {} domains",
                nuisance.len(),
                self.num_domains
            ));
        }
        for (d, n) in nuisance.iter().enumerate() {
            if !(n.gain.is_finite() && n.offset.is_finite() && n.noise_sigma >= 0.0) {
                return fail(format!("domain {d} nuisance must be finite with noise_sigma >= 0"));
            }
            for &t in &n.style_tokens {
                if (t as usize) < lexicon_end || t as usize >= self.total_vocab() {
                    return fail(format!(
                        "domain {d} style token {t} must lie in {lexicon_end}..{}",
                        self.total_vocab()
                    ));
                }
            }
        }
        Ok(())
    }

    fn check_labels(&self, class: usize, domain: usize) -> Result<()> {
        if class >= self.num_classes || domain >= self.num_domains {
            return Err(Error::Argument(format!(
                "class {class} / domain {domain} outside {} classes / {} domains",
                self.num_classes, self.num_domains
            )));
        }
        Ok(())
    }

    /// Top-left corner and side of class `c`'s rectangle before jitter.
    fn rectangle_anchor(&self, class: usize) -> (usize, usize, usize) {
        let size = (self.image_size / 3).max(1);
        let grid = (self.num_classes as f64).sqrt().ceil() as usize;
        let span = self.image_size - size;
        let step = |i: usize| if grid > 1 { i * span / (grid - 1) } else { span / 2 };
        (step(class / grid), step(class % grid), size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub image: Tensor,
    pub tokens: Vec<TokenId>,
    pub class_label: usize,
    pub domain: usize,
}

/// Class rectangle on a flat background, then the domain's intensity nuisance.
pub fn render_image(class: usize, domain: usize, spec: &CorpusSpec, rng: &mut RngStream) -> Result<Tensor> {
    spec.check_labels(class, domain)?;
    let n = spec.image_size;
    let (top, left, size) = spec.rectangle_anchor(class);
    let jitter = (n / 12).max(1) as i64;
    let mut shift = |base: usize| {
        let j = rng.below((2 * jitter + 1) as usize) as i64 - jitter;
        (base as i64 + j).clamp(0, (n - size) as i64) as usize
    };
    let top = shift(top);
    let left = shift(left);
    let nuisance = &spec.nuisance()[domain];
    let mut pixels = vec![BACKGROUND; n * n];
    for r in top..top + size {
        for c in left..left + size {
            pixels[r * n + c] = FOREGROUND;
        }
    }
    for p in pixels.iter_mut() {
        let noise = if nuisance.noise_sigma > 0.0 { nuisance.noise_sigma * rng.normal() } else { 0.0 };
        *p = (nuisance.gain * *p + nuisance.offset + noise).clamp(0.0, 1.0);
    }
    Tensor::new(vec![n, n], pixels)
}

/// CLS followed by class-lexicon tokens interleaved with domain style tokens.
pub fn render_text(class: usize, domain: usize, spec: &CorpusSpec, rng: &mut RngStream) -> Result<Vec<TokenId>> {
    spec.check_labels(class, domain)?;
    let [lo, hi] = spec.text_len_range;
    let len = lo + rng.below(hi - lo + 1);
    let lexicon = spec.lexicon(class);
    let style = &spec.nuisance()[domain].style_tokens;
    let n_style = if style.is_empty() { 0 } else { len - (len.div_ceil(2)).max(3) };
    let style_slots = rng.choose_sorted(len, n_style);
    let mut tokens = Vec::with_capacity(len + 1);
    tokens.push(CLS);
    let mut next_style = style_slots.iter().peekable();
    for pos in 0..len {
        if next_style.peek() == Some(&&pos) {
            next_style.next();
            tokens.push(style[rng.below(style.len())]);
        } else {
            tokens.push(lexicon[rng.below(lexicon.len())]);
        }
    }
    Ok(tokens)
}

pub fn sample_id(class: usize, domain: usize, index: usize) -> String {
    format!("c{class:03}-d{domain:03}-{index:06}")
}

/// Renders one sample from its own stream, keyed by id.
pub fn generate_sample(spec: &CorpusSpec, seed: u64, class: usize, domain: usize, index: usize) -> Result<PairedSample> {
    let id = sample_id(class, domain, index);
    let stream = RngStream::root(seed).fork("data").fork(&id);
    let image = render_image(class, domain, spec, &mut stream.fork("image"))?;
    let tokens = render_text(class, domain, spec, &mut stream.fork("text"))?;
    Ok(PairedSample { id, image, tokens, class_label: class, domain })
}

/// Balanced corpus over every (class, domain) cell, sorted by id.
pub fn generate_corpus(spec: &CorpusSpec, seed: u64) -> Result<Vec<PairedSample>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.num_classes * spec.num_domains * spec.samples_per_class_per_domain);
    for class in 0..spec.num_classes {
        for domain in 0..spec.num_domains {
            for k in 0..spec.samples_per_class_per_domain {
                out.push(generate_sample(spec, seed, class, domain, k)?);
            }
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageRecord {
    h: usize,
    w: usize,
    pixels: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: String,
    domain: usize,
    class: usize,
    tokens: Vec<TokenId>,
    image: ImageRecord,
}

pub fn encode_sample(sample: &PairedSample) -> Result<String> {
    let rec = SampleRecord {
        id: sample.id.clone(),
        domain: sample.domain,
        class: sample.class_label,
        tokens: sample.tokens.clone(),
        image: ImageRecord {
            h: sample.image.shape()[0],
            w: sample.image.cols(),
            pixels: sample.image.values().to_vec(),
        },
    };
    Ok(serde_json::to_string(&rec)?)
}

pub fn decode_sample(line: &str, line_no: usize) -> Result<PairedSample> {
    let rec: SampleRecord =
        serde_json::from_str(line).map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
    if rec.image.h * rec.image.w != rec.image.pixels.len() {
        return Err(Error::Format {
            line: line_no,
            message: format!(
                "image {}x{} needs {} pixels, found {}",
                rec.image.h,
                rec.image.w,
                rec.image.h * rec.image.w,
                rec.image.pixels.len()
            ),
        });
    }
    Ok(PairedSample {
        id: rec.id,
        image: Tensor::new(vec![rec.image.h, rec.image.w], rec.image.pixels)?,
        tokens: rec.tokens,
        class_label: rec.class,
        domain: rec.domain,
    })
}

/// One JSON object per line, LF-terminated.
pub fn write_corpus(corpus: &[PairedSample], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in corpus {
        w.write_all(encode_sample(s)?.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<PairedSample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(decode_sample(&line, i + 1)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_nuisance(spec: &CorpusSpec) -> CorpusSpec {
        let mut s = spec.clone();
        s.domain_nuisance = Some(
            (0..s.num_domains)
                .map(|_| DomainNuisance { gain: 1.0, offset: 0.0, noise_sigma: 0.0, style_tokens: vec![] })
                .collect(),
        );
        s
    }

    #[test]
    fn default_spec_is_valid() {
        CorpusSpec::default().validate().unwrap();
        assert_eq!(CorpusSpec::default().num_patches(), 36);
    }

    #[test]
    fn nuisance_free_domains_render_identically() {
        let spec = identity_nuisance(&CorpusSpec::default());
        let a = render_image(1, 0, &spec, &mut RngStream::new(5, "img")).unwrap();
        let b = render_image(1, 1, &spec, &mut RngStream::new(5, "img")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noiseless_render_is_deterministic() {
        let mut spec = CorpusSpec::default();
        let mut n = spec.nuisance();
        n.iter_mut().for_each(|d| d.noise_sigma = 0.0);
        spec.domain_nuisance = Some(n);
        let a = render_image(0, 1, &spec, &mut RngStream::new(9, "x")).unwrap();
        let b = render_image(0, 1, &spec, &mut RngStream::new(9, "x")).unwrap();
        assert_eq!(a, b);
        assert!(a.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn offset_shifts_mean_intensity() {
        let mut spec = identity_nuisance(&CorpusSpec::default());
        spec.domain_nuisance.as_mut().unwrap()[1].offset = 0.2;
        let mut diff = 0.0;
        for i in 0..200 {
            let mut r0 = RngStream::new(i, "a");
            let mut r1 = RngStream::new(i + 10_000, "a");
            let a = render_image(i as usize % 2, 0, &spec, &mut r0).unwrap();
            let b = render_image(i as usize % 2, 1, &spec, &mut r1).unwrap();
            diff += b.values().iter().sum::<f64>() / 576.0 - a.values().iter().sum::<f64>() / 576.0;
        }
        let diff = diff / 200.0;
        assert!((diff - 0.2).abs() < 0.02, "mean shift {diff}");
    }

    #[test]
    fn out_of_range_labels_rejected() {
        let spec = CorpusSpec::default();
        let mut r = RngStream::root(1);
        assert!(matches!(render_image(2, 0, &spec, &mut r), Err(Error::Argument(_))));
        assert!(matches!(render_text(0, 5, &spec, &mut r), Err(Error::Argument(_))));
    }

    #[test]
    fn empty_style_pools_give_pure_lexicon_text() {
        let spec = identity_nuisance(&CorpusSpec::default());
        for i in 0..20 {
            let t = render_text(1, i % 2, &spec, &mut RngStream::new(i as u64, "t")).unwrap();
            assert_eq!(t[0], CLS);
            assert!(t[1..].iter().all(|tok| spec.lexicon(1).contains(tok)));
        }
    }

    #[test]
    fn text_shape_and_content() {
        let spec = CorpusSpec::default();
        for i in 0..100 {
            let class = i % 2;
            let t = render_text(class, (i / 2) % 2, &spec, &mut RngStream::new(i as u64, "t")).unwrap();
            assert_eq!(t[0], CLS);
            assert!((9..=25).contains(&t.len()));
            let content = t.iter().filter(|x| spec.lexicon(class).contains(x)).count();
            assert!(content >= 3);
            assert!(t[1..].iter().all(|&x| x as usize >= NUM_RESERVED));
        }
    }

    #[test]
    fn corpus_is_balanced_and_sorted() {
        let spec = CorpusSpec { samples_per_class_per_domain: 3, ..CorpusSpec::default() };
        let c = generate_corpus(&spec, 11).unwrap();
        assert_eq!(c.len(), 12);
        for class in 0..2 {
            for domain in 0..2 {
                assert_eq!(c.iter().filter(|s| s.class_label == class && s.domain == domain).count(), 3);
            }
        }
        assert!(c.windows(2).all(|w| w[0].id < w[1].id));
    }

    #[test]
    fn invalid_spec_names_constraint() {
        let spec = CorpusSpec { patch_size: 5, ..CorpusSpec::default() };
        let err = generate_corpus(&spec, 1).unwrap_err().to_string();
        assert!(err.contains("patch_size"), "{err}");
        let spec = CorpusSpec { num_classes: 1, ..CorpusSpec::default() };
        assert!(generate_corpus(&spec, 1).unwrap_err().to_string().contains("num_classes"));
    }

    #[test]
    fn malformed_pixel_count_reports_line_one() {
        let line = r#"{"id":"x","domain":0,"class":0,"tokens":[2,3],"image":{"h":2,"w":2,"pixels":[0.1,0.2,0.3]}}"#;
        match decode_sample(line, 1) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected format error, got {other:?}"),
        }
        match decode_sample("{not json", 7) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
