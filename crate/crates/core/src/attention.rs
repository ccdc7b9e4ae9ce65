//! The mask attention network (MAN) layer.
//!
//! One layer computes, per head `i`,
//! `A_i = S_M(H W_Q^i, H W_K^i) · H W_V^i` with `S_M` the masked softmax, then
//! `F([A_1, …, A_I]) W_H` with `F` the activation. Self-attention, the
//! feed-forward network and the dynamic/static local masks are all
//! configurations of this one function.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::MaskKind;
use crate::scalar::Scalar;
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManLayerConfig {
    pub d_model: usize,
    /// Per-head query/key width.
    pub d_k: usize,
    /// Per-head value width.
    pub d_v: usize,
    pub heads: usize,
    pub activation: Activation,
    pub mask: MaskKind,
    /// When false no query/key projections exist and the scores are zero;
    /// only meaningful together with an identity mask.
    pub query_key: bool,
}

impl ManLayerConfig {
    fn attention(d_model: usize, heads: usize, mask: MaskKind) -> Self {
        let d_k = d_model.checked_div(heads).unwrap_or(0);
        ManLayerConfig {
            d_model,
            d_k,
            d_v: d_k,
            heads,
            activation: Activation::Identity,
            mask,
            query_key: true,
        }
    }

    /// Ordinary multi-head self-attention: all-ones mask, identity activation.
    pub fn san(d_model: usize, heads: usize) -> Self {
        Self::attention(d_model, heads, MaskKind::AllOnes)
    }

    pub fn dman(d_model: usize, heads: usize) -> Self {
        Self::attention(d_model, heads, MaskKind::Dynamic)
    }

    pub fn sman(d_model: usize, heads: usize, band: crate::mask::BandWidth) -> Self {
        Self::attention(d_model, heads, MaskKind::Banded(band))
    }

    /// The position-wise feed-forward network as a single-head MAN with an
    /// identity mask and ReLU activation.
    pub fn ffn(d_model: usize, inner: usize) -> Self {
        ManLayerConfig {
            d_model,
            d_k: 0,
            d_v: inner,
            heads: 1,
            activation: Activation::Relu,
            mask: MaskKind::Identity,
            query_key: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_v == 0 {
            return Err(Error::Config(format!("degenerate layer dimensions: {self:?}")));
        }
        if self.query_key {
            if self.d_k == 0 || self.heads * self.d_k != self.d_model {
                return Err(Error::Config(format!(
                    "heads ({}) × d_k ({}) must equal d_model ({})",
                    self.heads, self.d_k, self.d_model
                )));
            }
        } else {
            if self.heads != 1 {
                return Err(Error::Config("a layer without query/key projections must have one head".into()));
            }
            if self.mask != MaskKind::Identity {
                return Err(Error::Config("a layer without query/key projections needs the identity mask".into()));
            }
        }
        Ok(())
    }
}

/// Owned weights of one MAN sublayer.
#[derive(Clone, Debug, PartialEq)]
pub struct ManWeights<S> {
    pub w_q: Vec<Tensor<S>>,
    pub w_k: Vec<Tensor<S>>,
    pub w_v: Vec<Tensor<S>>,
    pub w_h: Tensor<S>,
    pub ln_gain: Tensor<S>,
    pub ln_bias: Tensor<S>,
}

/// Uniform Glorot initialisation of a `fan_in×fan_out` matrix.
pub fn xavier<S: Scalar, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<S> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| S::from_f64_lossy(rng.gen_range(-a..a)))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("matrix shape")
}

impl<S: Scalar> ManWeights<S> {
    pub fn init<R: Rng + ?Sized>(cfg: &ManLayerConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let qk = if cfg.query_key { cfg.heads } else { 0 };
        ManWeights {
            w_q: (0..qk).map(|_| xavier(rng, d, cfg.d_k)).collect(),
            w_k: (0..qk).map(|_| xavier(rng, d, cfg.d_k)).collect(),
            w_v: (0..cfg.heads).map(|_| xavier(rng, d, cfg.d_v)).collect(),
            w_h: xavier(rng, cfg.heads * cfg.d_v, d),
            ln_gain: Tensor::full(&[d], S::one()),
            ln_bias: Tensor::zeros(&[d]),
        }
    }

    pub fn bind(&self, tape: &mut GradTape<S>, requires_grad: bool) -> ManWeightVars {
        let mut leaf = |t: &Tensor<S>| {
            let mut t = t.clone();
            t.requires_grad = requires_grad;
            tape.leaf(t)
        };
        ManWeightVars {
            w_q: self.w_q.iter().map(&mut leaf).collect(),
            w_k: self.w_k.iter().map(&mut leaf).collect(),
            w_v: self.w_v.iter().map(&mut leaf).collect(),
            w_h: leaf(&self.w_h),
            ln_gain: leaf(&self.ln_gain),
            ln_bias: leaf(&self.ln_bias),
        }
    }
}

/// Tape handles for [`ManWeights`].
#[derive(Clone, Debug)]
pub struct ManWeightVars {
    pub w_q: Vec<Var>,
    pub w_k: Vec<Var>,
    pub w_v: Vec<Var>,
    pub w_h: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

#[derive(Clone, Debug)]
pub struct AttnOutput {
    /// `F([A_1, …, A_I]) W_H`, before any residual connection.
    pub out: Var,
    /// Row-normalised score matrix of each head.
    pub scores: Vec<Var>,
}

/// Records the MAN function on `tape`. Queries come from `x_q`, keys and
/// values from `x_kv`; pass the same handle twice for self-attention.
pub fn mask_attention<S: Scalar>(
    tape: &mut GradTape<S>,
    x_q: Var,
    x_kv: Var,
    cfg: &ManLayerConfig,
    w: &ManWeightVars,
    masks: &[Var],
) -> Result<AttnOutput> {
    if masks.len() != cfg.heads {
        return Err(Error::shape("mask_attention heads", &[cfg.heads], &[masks.len()]));
    }
    if w.w_v.len() != cfg.heads || (cfg.query_key && (w.w_q.len() != cfg.heads || w.w_k.len() != cfg.heads)) {
        return Err(Error::Config("weight count does not match head count".into()));
    }
    let tq = tape.value(x_q).rows();
    let tk = tape.value(x_kv).rows();
    let inv_sqrt_dk = if cfg.query_key {
        S::one() / S::from_usize(cfg.d_k).unwrap().sqrt()
    } else {
        S::zero()
    };
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut scores = Vec::with_capacity(cfg.heads);
    for i in 0..cfg.heads {
        let logits = if cfg.query_key {
            let q = tape.matmul(x_q, w.w_q[i])?;
            let k = tape.matmul(x_kv, w.w_k[i])?;
            let qk = tape.matmul_nt(q, k)?;
            tape.scale(qk, inv_sqrt_dk)
        } else {
            tape.constant(Tensor::zeros(&[tq, tk]))
        };
        let s = tape.masked_softmax(logits, masks[i])?;
        let v = tape.matmul(x_kv, w.w_v[i])?;
        heads.push(tape.matmul(s, v)?);
        scores.push(s);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    let act = match cfg.activation {
        Activation::Identity => cat,
        Activation::Relu => tape.relu(cat),
    };
    let out = tape.matmul(act, w.w_h)?;
    Ok(AttnOutput { out, scores })
}

/// `LayerNorm(x + y)` with the sublayer's gain and bias.
pub fn residual_norm<S: Scalar>(tape: &mut GradTape<S>, x: Var, y: Var, w: &ManWeightVars) -> Result<Var> {
    let sum = tape.add(x, y)?;
    tape.layer_norm(sum, w.ln_gain, w.ln_bias, S::from_f64_lossy(LAYER_NORM_EPS))
}

fn check_input<S: Scalar>(h: &Tensor<S>, cfg: &ManLayerConfig) -> Result<()> {
    cfg.validate()?;
    let (_, d) = h.expect_matrix("man layer input")?;
    if d != cfg.d_model {
        return Err(Error::shape("man layer input", h.shape(), &[h.rows(), cfg.d_model]));
    }
    Ok(())
}

/// The MAN function alone: `F([A_1, …, A_I]) W_H`.
pub fn man_core_forward<S: Scalar>(
    h: &Tensor<S>,
    cfg: &ManLayerConfig,
    w: &ManWeights<S>,
    masks: &[Tensor<S>],
) -> Result<Tensor<S>> {
    check_input(h, cfg)?;
    let mut tape = GradTape::new();
    let x = tape.constant(h.clone());
    let vars = w.bind(&mut tape, false);
    let m: Vec<Var> = masks.iter().map(|m| tape.constant(m.clone())).collect();
    let out = mask_attention(&mut tape, x, x, cfg, &vars, &m)?;
    Ok(tape.value(out.out).clone())
}

/// One full sublayer: the MAN function followed by the residual connection
/// and post layer normalisation.
pub fn man_layer_forward<S: Scalar>(
    h: &Tensor<S>,
    cfg: &ManLayerConfig,
    w: &ManWeights<S>,
    masks: &[Tensor<S>],
) -> Result<Tensor<S>> {
    check_input(h, cfg)?;
    let mut tape = GradTape::new();
    let x = tape.constant(h.clone());
    let vars = w.bind(&mut tape, false);
    let m: Vec<Var> = masks.iter().map(|m| tape.constant(m.clone())).collect();
    let out = mask_attention(&mut tape, x, x, cfg, &vars, &m)?;
    let y = residual_norm(&mut tape, x, out.out, &vars)?;
    Ok(tape.value(y).clone())
}

/// Encoder-decoder attention with an all-ones mask (before the residual).
pub fn cross_attention_forward<S: Scalar>(
    h_dec: &Tensor<S>,
    h_enc: &Tensor<S>,
    cfg: &ManLayerConfig,
    w: &ManWeights<S>,
) -> Result<Tensor<S>> {
    check_input(h_dec, cfg)?;
    check_input(h_enc, cfg)?;
    if !h_enc.is_finite() {
        return Err(Error::Contract("encoder output contains non-finite values".into()));
    }
    let mut tape = GradTape::new();
    let q = tape.constant(h_dec.clone());
    let kv = tape.constant(h_enc.clone());
    let vars = w.bind(&mut tape, false);
    let ones = Tensor::full(&[h_dec.rows(), h_enc.rows()], S::one());
    let m: Vec<Var> = (0..cfg.heads).map(|_| tape.constant(ones.clone())).collect();
    let out = mask_attention(&mut tape, q, kv, cfg, &vars, &m)?;
    Ok(tape.value(out.out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{build_mask, BandWidth};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        let data = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![r, c], data).unwrap()
    }

    fn matvec(x: &[f64], w: &Tensor<f64>) -> Vec<f64> {
        (0..w.cols())
            .map(|j| x.iter().enumerate().map(|(p, &v)| v * w.at(p, j)).sum())
            .collect()
    }

    #[test]
    fn config_validation() {
        assert!(ManLayerConfig::san(64, 4).validate().is_ok());
        assert!(ManLayerConfig::ffn(64, 128).validate().is_ok());
        let mut bad = ManLayerConfig::san(64, 4);
        bad.d_k = 10;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut bad = ManLayerConfig::ffn(64, 128);
        bad.heads = 2;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn banded_zero_matches_identity_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = ManLayerConfig::san(8, 2);
        let w = ManWeights::init(&cfg, &mut rng);
        let h = random(&mut rng, 6, 8);
        let band = build_mask::<f64>(&MaskKind::Banded(BandWidth::Fixed(0)), 6, 0, None, None).unwrap();
        let ident = Tensor::identity(6);
        let a = man_layer_forward(&h, &cfg, &w, &[band.clone(), band]).unwrap();
        let b = man_layer_forward(&h, &cfg, &w, &[ident.clone(), ident]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cross_attention_single_key_returns_projected_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = ManLayerConfig::san(4, 2);
        let w = ManWeights::init(&cfg, &mut rng);
        let dec = random(&mut rng, 3, 4);
        let enc = random(&mut rng, 1, 4);
        let out = cross_attention_forward(&dec, &enc, &cfg, &w).unwrap();
        let mut cat = Vec::new();
        for wv in &w.w_v {
            cat.extend(matvec(enc.row(0), wv));
        }
        let want = matvec(&cat, &w.w_h);
        for r in 0..3 {
            for (a, b) in out.row(r).iter().zip(&want) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn cross_attention_uniform_scores_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cfg = ManLayerConfig::san(4, 1);
        let mut w = ManWeights::init(&cfg, &mut rng);
        // Zero query projection ⇒ every logit is 0.
        w.w_q[0] = Tensor::zeros(&[4, 4]);
        let dec = random(&mut rng, 2, 4);
        let enc = random(&mut rng, 5, 4);
        let out = cross_attention_forward(&dec, &enc, &cfg, &w).unwrap();
        let mean: Vec<f64> = (0..4)
            .map(|j| (0..5).map(|r| enc.at(r, j)).sum::<f64>() / 5.0)
            .collect();
        let want = matvec(&matvec(&mean, &w.w_v[0]), &w.w_h);
        for r in 0..2 {
            for (a, b) in out.row(r).iter().zip(&want) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn mask_count_must_match_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = ManLayerConfig::san(4, 2);
        let w = ManWeights::init(&cfg, &mut rng);
        let h = random(&mut rng, 3, 4);
        let err = man_core_forward(&h, &cfg, &w, &[Tensor::full(&[3, 3], 1.0)]).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn degenerate_mask_propagates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = ManLayerConfig::san(4, 1);
        let w = ManWeights::init(&cfg, &mut rng);
        let h = random(&mut rng, 3, 4);
        let mut m = Tensor::identity(3);
        m.data_mut()[8] = 0.0;
        let err = man_core_forward(&h, &cfg, &w, &[m]).unwrap_err();
        assert!(matches!(err, Error::DegenerateRow { row: 2, .. }));
    }
}
