//! Encoder-decoder model assembled from MAN sublayers.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{mask_attention, residual_norm, xavier, ManLayerConfig, ManWeightVars};
use crate::error::{Error, Result};
use crate::mask::{BandWidth, DynamicMaskVars, MaskContext, MaskKind};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

/// Start-of-sequence token fed as the first decoder input.
pub const BOS: usize = 0;
/// End-of-sequence token.
pub const EOS: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SublayerKind {
    Dman,
    San,
    Ffn,
    Sman(BandWidth),
}

impl SublayerKind {
    /// Short name used in parameter names and reports.
    pub fn label(self) -> &'static str {
        match self {
            SublayerKind::Dman => "DMAN",
            SublayerKind::San => "SAN",
            SublayerKind::Ffn => "FFN",
            SublayerKind::Sman(_) => "SMAN",
        }
    }
}

impl fmt::Display for SublayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SublayerKind::Sman(b) => write!(f, "SMAN({b})"),
            k => f.write_str(k.label()),
        }
    }
}

impl FromStr for SublayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let upper = s.to_ascii_uppercase();
        match upper.as_str() {
            "DMAN" => return Ok(SublayerKind::Dman),
            "SAN" => return Ok(SublayerKind::San),
            "FFN" => return Ok(SublayerKind::Ffn),
            "SMAN" => return Ok(SublayerKind::Sman(BandWidth::Fixed(4))),
            _ => {}
        }
        if let Some(inner) = upper.strip_prefix("SMAN(").and_then(|r| r.strip_suffix(')')) {
            return Ok(SublayerKind::Sman(inner.parse()?));
        }
        Err(Error::Config(format!("unknown sublayer kind `{s}`")))
    }
}

/// Ordered sublayer kinds of one block.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BlockOrdering(Vec<SublayerKind>);

/// Named orderings: the five collaboration variants, the two static-mask
/// variants and the two-sublayer baseline.
pub const PRESETS: &[(&str, &str)] = &[
    ("C1", "FFN>SAN>FFN"),
    ("C2", "SAN>SAN>FFN"),
    ("C3", "DMAN>DMAN>FFN"),
    ("C4", "SAN>DMAN>FFN"),
    ("C5", "DMAN>SAN>FFN"),
    ("SMAN1", "SMAN(sqrt)>SAN>FFN"),
    ("SMAN2", "SMAN(4)>SAN>FFN"),
    ("BASE", "SAN>FFN"),
];

impl BlockOrdering {
    pub fn new(kinds: Vec<SublayerKind>) -> Result<Self> {
        if kinds.is_empty() {
            return Err(Error::Config("block ordering must be non-empty".into()));
        }
        Ok(BlockOrdering(kinds))
    }

    pub fn preset(name: &str) -> Result<Self> {
        PRESETS
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name.trim()))
            .map(|(_, spec)| Self::parse_chain(spec))
            .unwrap_or_else(|| {
                let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
                Err(Error::Config(format!(
                    "unknown ordering `{name}`; valid presets: {}",
                    names.join(", ")
                )))
            })
    }

    fn parse_chain(s: &str) -> Result<Self> {
        let kinds = s
            .split('>')
            .map(|p| p.trim().trim_end_matches('-').trim())
            .map(str::parse)
            .collect::<Result<Vec<_>>>()?;
        Self::new(kinds)
    }

    pub fn kinds(&self) -> &[SublayerKind] {
        &self.0
    }

    /// Preset name if this ordering equals one.
    pub fn preset_name(&self) -> Option<&'static str> {
        PRESETS
            .iter()
            .find(|(_, spec)| Self::parse_chain(spec).ok().as_ref() == Some(self))
            .map(|(n, _)| *n)
    }
}

impl fmt::Display for BlockOrdering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join(">"))
    }
}

impl FromStr for BlockOrdering {
    type Err = Error;

    /// A preset name (`C5`) or an explicit chain (`DMAN>SAN>FFN`, `->` also
    /// accepted).
    fn from_str(s: &str) -> Result<Self> {
        if s.contains('>') {
            Self::parse_chain(s)
        } else if let Ok(kind) = s.parse::<SublayerKind>() {
            Self::new(vec![kind])
        } else {
            Self::preset(s)
        }
    }
}

impl TryFrom<String> for BlockOrdering {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BlockOrdering> for String {
    fn from(o: BlockOrdering) -> String {
        o.preset_name().map(str::to_string).unwrap_or_else(|| o.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    #[serde(default = "defaults::d_model")]
    pub d_model: usize,
    #[serde(default = "defaults::heads")]
    pub heads: usize,
    #[serde(default = "defaults::layers")]
    pub enc_layers: usize,
    #[serde(default = "defaults::layers")]
    pub dec_layers: usize,
    #[serde(default = "defaults::ordering")]
    pub ordering: BlockOrdering,
    /// Relative-offset clipping radius of dynamic masks.
    #[serde(default = "defaults::radius")]
    pub radius: usize,
    #[serde(default = "defaults::dropout")]
    pub dropout: f64,
    #[serde(default = "defaults::max_len")]
    pub max_len: usize,
    /// Feed-forward inner width; `2·d_model` when absent.
    #[serde(default)]
    pub ffn_inner: Option<usize>,
    #[serde(default)]
    pub tie_embeddings: bool,
}

mod defaults {
    use super::BlockOrdering;
    pub fn d_model() -> usize {
        64
    }
    pub fn heads() -> usize {
        4
    }
    pub fn layers() -> usize {
        2
    }
    pub fn ordering() -> BlockOrdering {
        BlockOrdering::preset("C5").unwrap()
    }
    pub fn radius() -> usize {
        32
    }
    pub fn dropout() -> f64 {
        0.1
    }
    pub fn max_len() -> usize {
        32
    }
}

impl ModelConfig {
    pub fn new(vocab: usize) -> Self {
        ModelConfig {
            vocab,
            d_model: defaults::d_model(),
            heads: defaults::heads(),
            enc_layers: defaults::layers(),
            dec_layers: defaults::layers(),
            ordering: defaults::ordering(),
            radius: defaults::radius(),
            dropout: defaults::dropout(),
            max_len: defaults::max_len(),
            ffn_inner: None,
            tie_embeddings: false,
        }
    }

    pub fn ffn_inner(&self) -> usize {
        self.ffn_inner.unwrap_or(2 * self.d_model)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab", self.vocab),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("max_len", self.max_len),
            ("ffn_inner", self.ffn_inner()),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab < 2 {
            return Err(Error::Config("vocab must hold at least BOS and EOS".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model ({}) must be divisible by heads ({})",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Role of a sublayer inside a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SublayerRole {
    SelfAttn(SublayerKind),
    /// Encoder-decoder attention (decoder blocks only).
    Cross,
}

#[derive(Clone, Debug)]
struct Sublayer {
    role: SublayerRole,
    cfg: ManLayerConfig,
    w_q: Vec<ParamId>,
    w_k: Vec<ParamId>,
    w_v: Vec<ParamId>,
    w_h: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
    // (w, table, head_bias)
    dynamic: Option<[ParamId; 3]>,
}

impl Sublayer {
    fn vars(&self, bound: &[Var]) -> ManWeightVars {
        let m = |ids: &[ParamId]| ids.iter().map(|id| bound[id.0]).collect();
        ManWeightVars {
            w_q: m(&self.w_q),
            w_k: m(&self.w_k),
            w_v: m(&self.w_v),
            w_h: bound[self.w_h.0],
            ln_gain: bound[self.ln_gain.0],
            ln_bias: bound[self.ln_bias.0],
        }
    }
}

/// Head-level scores of one encoder self-attention sublayer, recorded during
/// a forward pass.
#[derive(Clone, Debug)]
pub struct CapturedSublayer<S> {
    /// Zero-based block index.
    pub layer: usize,
    /// Zero-based position inside the block.
    pub position: usize,
    pub kind: SublayerKind,
    pub heads: Vec<Tensor<S>>,
}

/// Optional behaviour of a forward pass.
pub struct ForwardOptions<'a, S, R: ?Sized> {
    /// Dropout randomness; `None` disables dropout.
    pub dropout: Option<&'a mut R>,
    /// Receives encoder attention scores when present.
    pub capture: Option<&'a mut Vec<CapturedSublayer<S>>>,
}

impl<S, R: ?Sized> Default for ForwardOptions<'_, S, R> {
    fn default() -> Self {
        ForwardOptions {
            dropout: None,
            capture: None,
        }
    }
}

/// Encoder-decoder sequence model whose blocks are MAN sublayers.
#[derive(Clone, Debug)]
pub struct Seq2SeqModel<S> {
    config: ModelConfig,
    params: ParamStore<S>,
    encoder: Vec<Vec<Sublayer>>,
    decoder: Vec<Vec<Sublayer>>,
    embed: ParamId,
    out_w: Option<ParamId>,
    out_b: ParamId,
    positions: Tensor<S>,
}

/// Sinusoidal absolute position encoding, `len×d`.
pub fn sinusoidal_positions<S: Scalar>(len: usize, d: usize) -> Tensor<S> {
    let mut data = vec![S::zero(); len * d];
    for pos in 0..len {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            data[pos * d + i] = S::from_f64_lossy(v);
        }
    }
    Tensor::new(vec![len, d], data).expect("position table")
}

/// Sublayer sequence of a decoder block: the self-attention sublayers of
/// `ordering`, with encoder-decoder attention inserted before a trailing FFN
/// (or appended when the block does not end in one).
pub fn decoder_roles(ordering: &BlockOrdering) -> Vec<SublayerRole> {
    let mut roles: Vec<SublayerRole> = ordering.kinds().iter().map(|&k| SublayerRole::SelfAttn(k)).collect();
    let at = match ordering.kinds().last() {
        Some(SublayerKind::Ffn) => roles.len() - 1,
        _ => roles.len(),
    };
    roles.insert(at, SublayerRole::Cross);
    roles
}

impl<S: Scalar> Seq2SeqModel<S> {
    /// Builds and randomly initialises a model.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        Self::build(config, Some(rng))
    }

    /// Builds a model with every parameter zero (layer-norm gains one).
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        Self::build::<rand_chacha::ChaCha8Rng>(config, None)
    }

    fn build<R: Rng + ?Sized>(config: ModelConfig, mut rng: Option<&mut R>) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut params = ParamStore::new();
        let init = |rng: &mut Option<&mut R>, fan_in: usize, fan_out: usize| match rng {
            Some(r) => xavier(&mut **r, fan_in, fan_out),
            None => Tensor::zeros(&[fan_in, fan_out]),
        };

        let embed_init = match rng.as_deref_mut() {
            Some(r) => {
                let a = 1.0 / (d as f64).sqrt();
                let data = (0..config.vocab * d).map(|_| S::from_f64_lossy(r.gen_range(-a..a))).collect();
                Tensor::new(vec![config.vocab, d], data)?
            }
            None => Tensor::zeros(&[config.vocab, d]),
        };
        let embed = params.insert("embed", embed_init)?;

        let mut stack = |prefix: &str, layers: usize, roles: &[SublayerRole], params: &mut ParamStore<S>| -> Result<Vec<Vec<Sublayer>>> {
            let mut blocks = Vec::with_capacity(layers);
            for b in 0..layers {
                let mut subs = Vec::with_capacity(roles.len());
                for (p, &role) in roles.iter().enumerate() {
                    let cfg = match role {
                        SublayerRole::SelfAttn(SublayerKind::San) | SublayerRole::Cross => ManLayerConfig::san(d, config.heads),
                        SublayerRole::SelfAttn(SublayerKind::Dman) => ManLayerConfig::dman(d, config.heads),
                        SublayerRole::SelfAttn(SublayerKind::Sman(band)) => ManLayerConfig::sman(d, config.heads, band),
                        SublayerRole::SelfAttn(SublayerKind::Ffn) => ManLayerConfig::ffn(d, config.ffn_inner()),
                    };
                    cfg.validate()?;
                    let tag = match role {
                        SublayerRole::SelfAttn(k) => k.label().to_ascii_lowercase(),
                        SublayerRole::Cross => "cross".to_string(),
                    };
                    let base = format!("{prefix}.{b}.{p}.{tag}");
                    let qk = if cfg.query_key { cfg.heads } else { 0 };
                    let mut w_q = Vec::new();
                    let mut w_k = Vec::new();
                    let mut w_v = Vec::new();
                    for i in 0..qk {
                        w_q.push(params.insert(format!("{base}.wq{i}"), init(&mut rng, d, cfg.d_k))?);
                        w_k.push(params.insert(format!("{base}.wk{i}"), init(&mut rng, d, cfg.d_k))?);
                    }
                    for i in 0..cfg.heads {
                        w_v.push(params.insert(format!("{base}.wv{i}"), init(&mut rng, d, cfg.d_v))?);
                    }
                    let w_h = params.insert(format!("{base}.wh"), init(&mut rng, cfg.heads * cfg.d_v, d))?;
                    let ln_gain = params.insert(format!("{base}.ln.gain"), Tensor::full(&[d], S::one()))?;
                    let ln_bias = params.insert(format!("{base}.ln.bias"), Tensor::zeros(&[d]))?;
                    let dynamic = if cfg.mask.is_dynamic() {
                        Some([
                            params.insert(format!("{base}.mask.w"), Tensor::zeros(&[d, 1]))?,
                            params.insert(format!("{base}.mask.table"), Tensor::zeros(&[2 * config.radius + 1]))?,
                            params.insert(format!("{base}.mask.head"), Tensor::zeros(&[config.heads]))?,
                        ])
                    } else {
                        None
                    };
                    subs.push(Sublayer {
                        role,
                        cfg,
                        w_q,
                        w_k,
                        w_v,
                        w_h,
                        ln_gain,
                        ln_bias,
                        dynamic,
                    });
                }
                blocks.push(subs);
            }
            Ok(blocks)
        };

        let enc_roles: Vec<SublayerRole> = config.ordering.kinds().iter().map(|&k| SublayerRole::SelfAttn(k)).collect();
        let encoder = stack("enc", config.enc_layers, &enc_roles, &mut params)?;
        let decoder = stack("dec", config.dec_layers, &decoder_roles(&config.ordering), &mut params)?;

        let out_w = if config.tie_embeddings {
            None
        } else {
            Some(params.insert("out.w", init(&mut rng, d, config.vocab))?)
        };
        let out_b = params.insert("out.b", Tensor::zeros(&[config.vocab]))?;
        let positions = sinusoidal_positions(config.max_len, d);
        Ok(Seq2SeqModel {
            config,
            params,
            encoder,
            decoder,
            embed,
            out_w,
            out_b,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Number of parameters belonging to dynamic masks.
    pub fn num_dynamic_mask_params(&self) -> usize {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flatten()
            .filter_map(|s| s.dynamic)
            .flat_map(|ids| ids.into_iter())
            .map(|id| self.params.get(id).numel())
            .sum()
    }

    /// `(layer, position, kind)` of every encoder self-attention sublayer.
    pub fn encoder_layout(&self) -> Vec<(usize, usize, SublayerKind)> {
        let mut out = Vec::new();
        for (l, block) in self.encoder.iter().enumerate() {
            for (p, s) in block.iter().enumerate() {
                if let SublayerRole::SelfAttn(k) = s.role {
                    out.push((l, p, k));
                }
            }
        }
        out
    }

    fn check_tokens(&self, tokens: &[usize], what: &'static str) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Contract(format!("{what} must be non-empty")));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::Contract(format!(
                "{what} length {} exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::Index {
                what: "token id",
                index: t,
                bound: self.config.vocab,
            });
        }
        Ok(())
    }

    fn embed(&self, tape: &mut GradTape<S>, bound: &[Var], tokens: &[usize]) -> Result<Var> {
        let e = tape.gather_rows(bound[self.embed.0], tokens)?;
        let scaled = tape.scale(e, S::from_usize(self.config.d_model).unwrap().sqrt());
        let n = tokens.len();
        let d = self.config.d_model;
        let pe = Tensor::new(vec![n, d], self.positions.data()[..n * d].to_vec())?;
        let pe = tape.constant(pe);
        tape.add(scaled, pe)
    }

    fn dropout<R: Rng + ?Sized>(&self, tape: &mut GradTape<S>, x: Var, rng: Option<&mut R>) -> Result<Var> {
        let p = self.config.dropout;
        let Some(rng) = rng else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = S::from_f64_lossy(1.0 / (1.0 - p));
        let shape = tape.value(x).shape().to_vec();
        let n = tape.value(x).numel();
        let data = (0..n)
            .map(|_| if rng.gen::<f64>() < p { S::zero() } else { keep })
            .collect();
        let m = tape.constant(Tensor::new(shape, data)?);
        tape.mul(x, m)
    }

    fn run_sublayer<R: Rng + ?Sized>(
        &self,
        tape: &mut GradTape<S>,
        bound: &[Var],
        sub: &Sublayer,
        x: Var,
        memory: Option<Var>,
        causal: bool,
        opts: &mut ForwardOptions<'_, S, R>,
    ) -> Result<(Var, Vec<Var>)> {
        let w = sub.vars(bound);
        let tq = tape.value(x).rows();
        let (kv, masks) = match sub.role {
            SublayerRole::Cross => {
                let mem = memory.ok_or_else(|| Error::Contract("cross-attention without encoder output".into()))?;
                let tk = tape.value(mem).rows();
                let ones = Tensor::full(&[tq, tk], S::one());
                let masks = (0..sub.cfg.heads).map(|_| tape.constant(ones.clone())).collect();
                (mem, masks)
            }
            SublayerRole::SelfAttn(_) => {
                let kind = if causal {
                    MaskKind::Composite(vec![MaskKind::Causal, sub.cfg.mask.clone()])
                } else {
                    sub.cfg.mask.clone()
                };
                let dyn_vars = sub.dynamic.map(|[w, table, head]| DynamicMaskVars {
                    w: bound[w.0],
                    table: bound[table.0],
                    head_bias: bound[head.0],
                    radius: self.config.radius,
                });
                let mut ctx = MaskContext::new(tq, Some(x), dyn_vars.as_ref());
                let masks = (0..sub.cfg.heads)
                    .map(|h| kind.build_on(tape, &mut ctx, h))
                    .collect::<Result<Vec<_>>>()?;
                (x, masks)
            }
        };
        let attn = mask_attention(tape, x, kv, &sub.cfg, &w, &masks)?;
        let y = self.dropout(tape, attn.out, opts.dropout.as_deref_mut())?;
        Ok((residual_norm(tape, x, y, &w)?, attn.scores))
    }

    /// Records the encoder on `tape`; `bound` comes from
    /// [`ParamStore::bind`] on this model's parameters.
    pub fn encode_on<R: Rng + ?Sized>(
        &self,
        tape: &mut GradTape<S>,
        bound: &[Var],
        src: &[usize],
        opts: &mut ForwardOptions<'_, S, R>,
    ) -> Result<Var> {
        self.check_tokens(src, "source")?;
        let mut x = self.embed(tape, bound, src)?;
        for (l, block) in self.encoder.iter().enumerate() {
            for (p, sub) in block.iter().enumerate() {
                let (y, scores) = self.run_sublayer(tape, bound, sub, x, None, false, opts)?;
                if let (Some(cap), SublayerRole::SelfAttn(kind)) = (opts.capture.as_deref_mut(), sub.role) {
                    cap.push(CapturedSublayer {
                        layer: l,
                        position: p,
                        kind,
                        heads: scores.iter().map(|&s| tape.value(s).clone()).collect(),
                    });
                }
                x = y;
            }
        }
        Ok(x)
    }

    /// Records the decoder and output projection; returns `T×V` logits.
    pub fn decode_on<R: Rng + ?Sized>(
        &self,
        tape: &mut GradTape<S>,
        bound: &[Var],
        memory: Var,
        tgt_in: &[usize],
        opts: &mut ForwardOptions<'_, S, R>,
    ) -> Result<Var> {
        self.check_tokens(tgt_in, "target prefix")?;
        let mut x = self.embed(tape, bound, tgt_in)?;
        for block in &self.decoder {
            for sub in block {
                x = self.run_sublayer(tape, bound, sub, x, Some(memory), true, opts)?.0;
            }
        }
        let logits = match self.out_w {
            Some(w) => tape.matmul(x, bound[w.0])?,
            None => tape.matmul_nt(x, bound[self.embed.0])?,
        };
        tape.add_row(logits, bound[self.out_b.0])
    }

    /// Logits for the next token at every position of `tgt_prefix`.
    pub fn forward(&self, src: &[usize], tgt_prefix: &[usize]) -> Result<Tensor<S>> {
        let mut tape = GradTape::new();
        let bound = self.params.bind(&mut tape, false);
        let mut opts = ForwardOptions::<S, rand_chacha::ChaCha8Rng>::default();
        let mem = self.encode_on(&mut tape, &bound, src, &mut opts)?;
        let logits = self.decode_on(&mut tape, &bound, mem, tgt_prefix, &mut opts)?;
        Ok(tape.value(logits).clone())
    }

    /// Encoder attention scores for `src`, one entry per self-attention
    /// sublayer.
    pub fn encoder_attention(&self, src: &[usize]) -> Result<Vec<CapturedSublayer<S>>> {
        let mut tape = GradTape::new();
        let bound = self.params.bind(&mut tape, false);
        let mut captured = Vec::new();
        let mut opts = ForwardOptions::<S, rand_chacha::ChaCha8Rng> {
            dropout: None,
            capture: Some(&mut captured),
        };
        self.encode_on(&mut tape, &bound, src, &mut opts)?;
        Ok(captured)
    }

    /// Appends the argmax token until [`EOS`] or `max_len` tokens; ties go
    /// to the lowest token id. The returned sequence excludes `EOS`.
    pub fn greedy_decode(&self, src: &[usize], max_len: usize) -> Result<Vec<usize>> {
        let mut tape = GradTape::new();
        let bound = self.params.bind(&mut tape, false);
        self.greedy_decode_on(&mut tape, &bound, src, max_len)
    }

    /// [`greedy_decode`](Self::greedy_decode) reusing parameters already
    /// bound on `tape`. The tape is restored to its original length.
    pub fn greedy_decode_on(
        &self,
        tape: &mut GradTape<S>,
        bound: &[Var],
        src: &[usize],
        max_len: usize,
    ) -> Result<Vec<usize>> {
        // The decoder input is BOS plus everything generated so far.
        let limit = self.config.max_len;
        let start = tape.len();
        let mut opts = ForwardOptions::<S, rand_chacha::ChaCha8Rng>::default();
        let result = (|| {
            let mem = self.encode_on(tape, bound, src, &mut opts)?;
            let after_encode = tape.len();
            let mut out: Vec<usize> = Vec::new();
            while out.len() < max_len {
                let mut tgt = Vec::with_capacity(out.len() + 1);
                tgt.push(BOS);
                tgt.extend_from_slice(&out);
                if tgt.len() > limit {
                    break;
                }
                let logits = self.decode_on(tape, bound, mem, &tgt, &mut opts)?;
                let last = tape.value(logits).row(tgt.len() - 1);
                let next = argmax(last);
                tape.truncate(after_encode);
                if next == EOS {
                    break;
                }
                out.push(next);
            }
            Ok(out)
        })();
        tape.truncate(start);
        result
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<S: Scalar>(values: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(ordering: &str) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            heads: 2,
            enc_layers: 2,
            dec_layers: 1,
            max_len: 12,
            dropout: 0.0,
            ordering: ordering.parse().unwrap(),
            ..ModelConfig::new(10)
        }
    }

    #[test]
    fn presets_resolve_to_expected_chains() {
        let get = |n: &str| BlockOrdering::preset(n).unwrap().to_string();
        assert_eq!(get("C1"), "FFN>SAN>FFN");
        assert_eq!(get("C2"), "SAN>SAN>FFN");
        assert_eq!(get("C3"), "DMAN>DMAN>FFN");
        assert_eq!(get("C4"), "SAN>DMAN>FFN");
        assert_eq!(get("c5"), "DMAN>SAN>FFN");
        assert_eq!(get("SMAN1"), "SMAN(sqrt)>SAN>FFN");
        assert_eq!(get("SMAN2"), "SMAN(4)>SAN>FFN");
    }

    #[test]
    fn unknown_preset_lists_valid_names() {
        let err = "C9".parse::<BlockOrdering>().unwrap_err().to_string();
        assert!(err.contains("C1") && err.contains("C5"), "{err}");
        assert!(BlockOrdering::new(vec![]).is_err());
        assert_eq!("DMAN -> SAN -> FFN".parse::<BlockOrdering>().unwrap(), BlockOrdering::preset("C5").unwrap());
    }

    #[test]
    fn ordering_serialises_as_preset_name() {
        let cfg = small("C5");
        let text = cfg.to_toml();
        assert!(text.contains("ordering = \"C5\""), "{text}");
        assert_eq!(ModelConfig::from_toml(&text).unwrap(), cfg);
        let cfg = small("DMAN>FFN");
        assert_eq!(ModelConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        assert!(ModelConfig::from_toml("vocab = 8\nbogus = 1\n").is_err());
        assert!(ModelConfig::from_toml("vocab = 8\nheads = 3\n").is_err());
        assert!(ModelConfig::from_toml("vocab = 8\ndropout = 1.0\n").is_err());
        assert!(ModelConfig::from_toml("vocab = 8\n").is_ok());
    }

    #[test]
    fn decoder_inserts_cross_attention_before_trailing_ffn() {
        let roles = decoder_roles(&"C5".parse().unwrap());
        assert_eq!(
            roles,
            vec![
                SublayerRole::SelfAttn(SublayerKind::Dman),
                SublayerRole::SelfAttn(SublayerKind::San),
                SublayerRole::Cross,
                SublayerRole::SelfAttn(SublayerKind::Ffn),
            ]
        );
        let roles = decoder_roles(&"SAN>DMAN".parse().unwrap());
        assert_eq!(roles.last(), Some(&SublayerRole::Cross));
    }

    #[test]
    fn out_of_vocab_token_is_index_error() {
        let m = Seq2SeqModel::<f64>::new(small("C5"), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(m.forward(&[2, 10], &[0]), Err(Error::Index { index: 10, .. })));
        assert!(matches!(m.forward(&[2; 13], &[0]), Err(Error::Contract(_))));
    }

    #[test]
    fn causal_prefix_logits_are_unchanged_by_later_tokens() {
        let m = Seq2SeqModel::<f64>::new(small("C5"), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let src = [3, 4, 5, 6, 7];
        let a = m.forward(&src, &[0, 2, 3, 4, 5]).unwrap();
        let b = m.forward(&src, &[0, 2, 3, 9, 8]).unwrap();
        let v = m.config().vocab;
        assert_eq!(&a.data()[..3 * v], &b.data()[..3 * v]);
        assert_ne!(&a.data()[3 * v..4 * v], &b.data()[3 * v..4 * v]);
    }

    #[test]
    fn zero_weights_decode_lowest_token_until_cutoff() {
        let mut cfg = small("C5");
        cfg.tie_embeddings = true;
        let m = Seq2SeqModel::<f64>::zeroed(cfg).unwrap();
        assert_eq!(m.greedy_decode(&[2, 3, 4], 5).unwrap(), vec![0; 5]);
        assert_eq!(m.greedy_decode(&[2, 3, 4], 0).unwrap(), Vec::<usize>::new());
        // Cut off by the position table as well.
        assert_eq!(m.greedy_decode(&[2], 100).unwrap().len(), 12);
    }

    #[test]
    fn c5_differs_from_c2_only_in_first_sublayer_kind_and_mask_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c5 = Seq2SeqModel::<f64>::new(small("C5"), &mut rng).unwrap();
        let c2 = Seq2SeqModel::<f64>::new(small("C2"), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let c5_names: Vec<(String, Vec<usize>)> = c5
            .params()
            .iter()
            .filter(|(n, _)| !n.contains(".mask."))
            .map(|(n, t)| (n.replace(".dman.", ".san."), t.shape().to_vec()))
            .collect();
        let c2_names: Vec<(String, Vec<usize>)> =
            c2.params().iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
        assert_eq!(c5_names, c2_names);
        assert_eq!(c5.num_params() - c2.num_params(), c5.num_dynamic_mask_params());
        // Identical seeds ⇒ identical non-mask weights.
        for (n, t) in c2.params().iter() {
            let name5 = c5.params().iter().map(|(a, _)| a.to_string()).find(|a| a.replace(".dman.", ".san.") == n).unwrap();
            assert_eq!(c5.params().by_name(&name5).unwrap(), t, "{n}");
        }
        let per_layer = 16 + (2 * 32 + 1) + 2;
        assert_eq!(c5.num_dynamic_mask_params(), 3 * per_layer);
    }

    #[test]
    fn forward_is_deterministic() {
        let m = Seq2SeqModel::<f64>::new(small("C3"), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let a = m.forward(&[2, 3, 4], &[0, 5]).unwrap();
        let b = m.forward(&[2, 3, 4], &[0, 5]).unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite());
    }
}
