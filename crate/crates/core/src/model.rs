//! Dual Transformer encoders, shared-space projections, fusion and the two
//! cross-conditioned reconstruction decoders.
//!
//! Every forward function records onto a caller-supplied [`Graph`] so the
//! same code serves training (with backward) and evaluation (values only).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::corruption::MaskIndexMap;
use crate::data::{CorpusSpec, TokenId};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Tensor, LAYER_NORM_EPS};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub vision_layers: usize,
    pub text_layers: usize,
    /// 1-based vision layer whose output feeds the projection and decoder.
    pub recon_layer: usize,
    pub decoder_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { embed_dim: 32, heads: 4, vision_layers: 2, text_layers: 2, recon_layer: 1, decoder_layers: 1 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Argument(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.vision_layers == 0 || self.text_layers == 0 {
            return Err(Error::Argument("encoders need at least one layer".into()));
        }
        if self.recon_layer < 1 || self.recon_layer > self.vision_layers {
            return Err(Error::Argument(format!(
                "recon_layer {} must lie in 1..={}",
                self.recon_layer, self.vision_layers
            )));
        }
        Ok(())
    }

    fn ffn_hidden(&self) -> usize {
        4 * self.embed_dim
    }

    fn text_head_hidden(&self) -> usize {
        2 * self.embed_dim
    }
}

/// Input geometry fixed by the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputShape {
    /// Token ids span `0..vocab`, reserved ids included.
    pub vocab: usize,
    pub max_text_len: usize,
    pub patch_count: usize,
    pub patch_dim: usize,
    pub patch_size: usize,
}

impl InputShape {
    pub fn from_corpus(spec: &CorpusSpec) -> Self {
        Self {
            vocab: spec.total_vocab(),
            max_text_len: spec.max_tokens(),
            patch_count: spec.num_patches(),
            patch_dim: spec.patch_dim(),
            patch_size: spec.patch_size,
        }
    }
}

/// Non-overlapping row-major `p × p` patches, each flattened row-major.
pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor> {
    let (h, w) = (image.rows(), image.cols());
    if image.shape().len() != 2 || p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Argument(format!(
            "patch size {p} does not tile an image of shape {:?}",
            image.shape()
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let v = image.values();
    let mut out = Vec::with_capacity(h * w);
    for pr in 0..gh {
        for pc in 0..gw {
            for r in 0..p {
                let start = (pr * p + r) * w + pc * p;
                out.extend_from_slice(&v[start..start + p]);
            }
        }
    }
    Tensor::new(vec![gh * gw, p * p], out)
}

pub fn unpatchify(patches: &Tensor, p: usize, h: usize, w: usize) -> Result<Tensor> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) || patches.rows() != (h / p) * (w / p) || patches.cols() != p * p {
        return Err(Error::Argument(format!(
            "patches {:?} do not tile a {h}x{w} image with patch {p}",
            patches.shape()
        )));
    }
    let gw = w / p;
    let mut out = vec![0.0; h * w];
    for (idx, patch) in patches.values().chunks(p * p).enumerate() {
        let (pr, pc) = (idx / gw, idx % gw);
        for r in 0..p {
            let start = (pr * p + r) * w + pc * p;
            out[start..start + p].copy_from_slice(&patch[r * p..(r + 1) * p]);
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Reads parameters from a store as trainable leaves or as frozen constants.
#[derive(Clone, Copy)]
pub struct Binder<'a> {
    pub store: &'a ParamStore,
    pub trainable: bool,
}

impl<'a> Binder<'a> {
    pub fn trainable(store: &'a ParamStore) -> Self {
        Self { store, trainable: true }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self { store, trainable: false }
    }

    pub fn get(&self, g: &mut Graph, name: &str) -> Result<Var> {
        if self.trainable {
            g.param(self.store, name)
        } else {
            g.frozen(self.store, name)
        }
    }

    fn linear(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let w = self.get(g, &format!("{prefix}.w"))?;
        let b = self.get(g, &format!("{prefix}.b"))?;
        g.linear(x, w, b)
    }

    fn layer_norm(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.get(g, &format!("{prefix}.gamma"))?;
        let beta = self.get(g, &format!("{prefix}.beta"))?;
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }

    /// Projects queries from `xq` and keys/values from `xkv`, attends, projects out.
    fn attention(&self, g: &mut Graph, xq: Var, xkv: Var, prefix: &str, heads: usize) -> Result<Var> {
        let q = self.linear(g, xq, &format!("{prefix}.q"))?;
        let k = self.linear(g, xkv, &format!("{prefix}.k"))?;
        let v = self.linear(g, xkv, &format!("{prefix}.v"))?;
        let o = g.attention(q, k, v, heads)?;
        self.linear(g, o, &format!("{prefix}.o"))
    }

    fn mlp(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(g, x, &format!("{prefix}.fc1"))?;
        let h = g.gelu(h);
        self.linear(g, h, &format!("{prefix}.fc2"))
    }

    /// Pre-norm block; with `context`, a cross-attention sublayer sits
    /// between self-attention and the feed-forward.
    pub fn block(&self, g: &mut Graph, x: Var, context: Option<Var>, prefix: &str, heads: usize) -> Result<Var> {
        let h = self.layer_norm(g, x, &format!("{prefix}.ln1"))?;
        let a = self.attention(g, h, h, &format!("{prefix}.attn"), heads)?;
        let mut x = g.add(x, a)?;
        if let Some(ctx) = context {
            let h = self.layer_norm(g, x, &format!("{prefix}.ln_cross"))?;
            let a = self.attention(g, h, ctx, &format!("{prefix}.cross"), heads)?;
            x = g.add(x, a)?;
        }
        let h = self.layer_norm(g, x, &format!("{prefix}.ln2"))?;
        let m = self.mlp(g, h, &format!("{prefix}.mlp"))?;
        g.add(x, m)
    }
}

struct Init<'a> {
    store: ParamStore,
    rng: &'a RngStream,
}

impl Init<'_> {
    fn normal(&mut self, name: &str, shape: &[usize], std: f64) {
        let mut r = self.rng.fork(name);
        let n = shape.iter().product();
        let vals = (0..n).map(|_| std * r.normal()).collect();
        self.store.insert(name, Tensor::new(shape.to_vec(), vals).expect("shape"));
    }

    fn constant(&mut self, name: &str, shape: &[usize], v: f64) {
        self.store.insert(name, Tensor::full(shape, v));
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, std: f64) {
        self.normal(&format!("{prefix}.w"), &[fan_in, fan_out], std);
        self.constant(&format!("{prefix}.b"), &[fan_out], 0.0);
    }

    fn layer_norm(&mut self, prefix: &str, d: usize) {
        self.constant(&format!("{prefix}.gamma"), &[d], 1.0);
        self.constant(&format!("{prefix}.beta"), &[d], 0.0);
    }

    fn attention(&mut self, prefix: &str, d: usize, std: f64) {
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{prefix}.{p}"), d, d, std);
        }
    }

    fn block(&mut self, prefix: &str, d: usize, hidden: usize, cross: bool, std: f64) {
        self.layer_norm(&format!("{prefix}.ln1"), d);
        self.attention(&format!("{prefix}.attn"), d, std);
        if cross {
            self.layer_norm(&format!("{prefix}.ln_cross"), d);
            self.attention(&format!("{prefix}.cross"), d, std);
        }
        self.layer_norm(&format!("{prefix}.ln2"), d);
        self.linear(&format!("{prefix}.mlp.fc1"), d, hidden, std);
        self.linear(&format!("{prefix}.mlp.fc2"), hidden, d, std);
    }
}

/// Parameter groups with separate learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoders,
    Heads,
}

pub fn param_group(name: &str) -> ParamGroup {
    if name.starts_with("vision.") || name.starts_with("text.") {
        ParamGroup::Encoders
    } else {
        ParamGroup::Heads
    }
}

/// Architecture plus input geometry; owns no weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub shape: InputShape,
}

/// Per-sample forward outputs.
#[derive(Debug, Clone)]
pub struct Latents {
    pub vision_layers: Vec<Var>,
    pub text_layers: Vec<Var>,
    pub z_v_seq: Var,
    pub z_l_seq: Var,
    pub z_v: Var,
    pub z_l: Var,
    pub z: Var,
}

impl Model {
    pub fn new(config: ModelConfig, shape: InputShape) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, shape })
    }

    pub fn for_corpus(config: ModelConfig, spec: &CorpusSpec) -> Result<Self> {
        Self::new(config, InputShape::from_corpus(spec))
    }

    /// Gaussian(0, 0.02) weights, zero biases and mask embedding, unit LayerNorm gains.
    pub fn init_params(&self, rng: &RngStream) -> ParamStore {
        let c = &self.config;
        let s = &self.shape;
        let d = c.embed_dim;
        let std = INIT_STD;
        let mut init = Init { store: ParamStore::new(), rng };
        init.linear("vision.patch_embed", s.patch_dim, d, std);
        init.normal("vision.pos", &[s.patch_count, d], std);
        for i in 0..c.vision_layers {
            init.block(&format!("vision.layers.{i}"), d, c.ffn_hidden(), false, std);
        }
        init.normal("text.tok", &[s.vocab, d], std);
        init.normal("text.pos", &[s.max_text_len, d], std);
        for i in 0..c.text_layers {
            init.block(&format!("text.layers.{i}"), d, c.ffn_hidden(), false, std);
        }
        init.linear("proj.vision", d, d, std);
        init.linear("proj.text", d, d, std);
        init.constant("dec_v.mask", &[d], 0.0);
        init.normal("dec_v.pos", &[s.patch_count, d], std);
        for i in 0..c.decoder_layers {
            init.block(&format!("dec_v.layers.{i}"), d, c.ffn_hidden(), true, std);
        }
        init.layer_norm("dec_v.ln_f", d);
        init.linear("dec_v.head", d, s.patch_dim, std);
        for p in ["q", "k", "v"] {
            init.linear(&format!("dec_l.pool.{p}"), d, d, std);
        }
        init.linear("dec_l.fc1", 2 * d, c.text_head_hidden(), std);
        init.linear("dec_l.fc2", c.text_head_hidden(), s.vocab, std);
        init.store
    }

    /// All vision layer outputs over the visible patches only.
    pub fn encode_image(&self, g: &mut Graph, b: Binder, visible: &Tensor, map: &MaskIndexMap) -> Result<Vec<Var>> {
        if visible.cols() != self.shape.patch_dim || visible.rows() != map.visible.len() {
            return Err(Error::Contract(format!(
                "visible patches {:?} do not match patch_dim {} and {} visible slots",
                visible.shape(),
                self.shape.patch_dim,
                map.visible.len()
            )));
        }
        if map.n_patches != self.shape.patch_count {
            return Err(Error::Contract(format!(
                "index map covers {} patches, model expects {}",
                map.n_patches, self.shape.patch_count
            )));
        }
        let x = g.constant(visible.clone());
        let x = b.linear(g, x, "vision.patch_embed")?;
        let pos = b.get(g, "vision.pos")?;
        let pos = g.gather_rows(pos, &map.visible)?;
        let mut x = g.add(x, pos)?;
        let mut outs = Vec::with_capacity(self.config.vision_layers);
        for i in 0..self.config.vision_layers {
            x = b.block(g, x, None, &format!("vision.layers.{i}"), self.config.heads)?;
            outs.push(x);
        }
        Ok(outs)
    }

    /// All text layer outputs; MASK positions are encoded like any token.
    pub fn encode_text(&self, g: &mut Graph, b: Binder, tokens: &[TokenId]) -> Result<Vec<Var>> {
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.shape.vocab) {
            return Err(Error::Contract(format!("token id {t} outside vocabulary of {}", self.shape.vocab)));
        }
        if tokens.is_empty() || tokens.len() > self.shape.max_text_len {
            return Err(Error::Contract(format!(
                "text length {} outside 1..={}",
                tokens.len(),
                self.shape.max_text_len
            )));
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let tok = b.get(g, "text.tok")?;
        let x = g.gather_rows(tok, &ids)?;
        let pos = b.get(g, "text.pos")?;
        let pos = g.gather_rows(pos, &positions)?;
        let mut x = g.add(x, pos)?;
        let mut outs = Vec::with_capacity(self.config.text_layers);
        for i in 0..self.config.text_layers {
            x = b.block(g, x, None, &format!("text.layers.{i}"), self.config.heads)?;
            outs.push(x);
        }
        Ok(outs)
    }

    /// `(Z_v_seq, Z_l_seq, z_v, z_l)`: vision projects its reconstruction
    /// layer, text its final layer; vision mean-pools (zero when empty),
    /// text takes the CLS row.
    pub fn project_and_pool(
        &self,
        g: &mut Graph,
        b: Binder,
        vision_layers: &[Var],
        text_layers: &[Var],
    ) -> Result<(Var, Var, Var, Var)> {
        let hv = *vision_layers
            .get(self.config.recon_layer - 1)
            .ok_or_else(|| Error::Contract("missing vision layer outputs".into()))?;
        let hl = *text_layers.last().ok_or_else(|| Error::Contract("missing text layer outputs".into()))?;
        let z_v_seq = b.linear(g, hv, "proj.vision")?;
        let z_l_seq = b.linear(g, hl, "proj.text")?;
        let z_v = g.mean_rows(z_v_seq);
        let z_l = g.gather_rows(z_l_seq, &[0])?;
        Ok((z_v_seq, z_l_seq, z_v, z_l))
    }

    /// Full patch grid from the visible sequence plus mask embeddings,
    /// refined by decoder blocks that cross-attend onto the text sequence.
    pub fn decode_image(&self, g: &mut Graph, b: Binder, z_v_seq: Var, z_l_seq: Var, map: &MaskIndexMap) -> Result<Var> {
        if g.value(z_v_seq).rows() != map.visible.len() || map.n_patches != self.shape.patch_count {
            return Err(Error::Contract(format!(
                "visible sequence of {} rows inconsistent with index map ({} visible of {})",
                g.value(z_v_seq).rows(),
                map.visible.len(),
                map.n_patches
            )));
        }
        let fill = b.get(g, "dec_v.mask")?;
        let grid = g.assemble(z_v_seq, fill, &map.slots())?;
        let pos = b.get(g, "dec_v.pos")?;
        let mut x = g.add(grid, pos)?;
        let context = (g.value(z_l_seq).rows() > 0).then_some(z_l_seq);
        for i in 0..self.config.decoder_layers {
            x = b.block(g, x, context, &format!("dec_v.layers.{i}"), self.config.heads)?;
        }
        let x = b.layer_norm(g, x, "dec_v.ln_f")?;
        b.linear(g, x, "dec_v.head")
    }

    /// Vocabulary logits for each masked position from the text token and an
    /// attention-pooled summary of the visual sequence queried by it.
    pub fn decode_text(&self, g: &mut Graph, b: Binder, z_l_seq: Var, z_v_seq: Var, positions: &[usize]) -> Result<Var> {
        let len = g.value(z_l_seq).rows();
        if let Some(&p) = positions.iter().find(|&&p| p >= len) {
            return Err(Error::Contract(format!("masked position {p} outside sequence of {len}")));
        }
        let t = g.gather_rows(z_l_seq, positions)?;
        let q = b.linear(g, t, "dec_l.pool.q")?;
        let k = b.linear(g, z_v_seq, "dec_l.pool.k")?;
        let v = b.linear(g, z_v_seq, "dec_l.pool.v")?;
        let pooled = g.attention(q, k, v, 1)?;
        let cat = g.concat_cols(t, pooled)?;
        let h = b.linear(g, cat, "dec_l.fc1")?;
        let h = g.gelu(h);
        b.linear(g, h, "dec_l.fc2")
    }

    /// Encoders, projections, pooling and fusion for one sample.
    pub fn encode(&self, g: &mut Graph, b: Binder, visible: &Tensor, map: &MaskIndexMap, tokens: &[TokenId]) -> Result<Latents> {
        let vision_layers = self.encode_image(g, b, visible, map)?;
        let text_layers = self.encode_text(g, b, tokens)?;
        let (z_v_seq, z_l_seq, z_v, z_l) = self.project_and_pool(g, b, &vision_layers, &text_layers)?;
        let z = fuse(g, z_v, z_l)?;
        Ok(Latents { vision_layers, text_layers, z_v_seq, z_l_seq, z_v, z_l, z })
    }
}

/// `z = (z_v + z_l) / 2`.
pub fn fuse(g: &mut Graph, z_v: Var, z_l: Var) -> Result<Var> {
    if g.value(z_v).len() != g.value(z_l).len() {
        return Err(Error::Contract(format!(
            "cannot fuse vectors of length {} and {}",
            g.value(z_v).len(),
            g.value(z_l).len()
        )));
    }
    let s = g.add(z_v, z_l)?;
    Ok(g.scale(s, 0.5))
}
