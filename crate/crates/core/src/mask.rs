//! Mask providers for mask attention.
//!
//! A mask `M ∈ [0,1]^{T×T}` gates the exponentiated key-query scores of one
//! head before row normalisation. All-ones recovers ordinary self-attention,
//! the identity recovers a position-wise feed-forward map, and the banded and
//! dynamic masks sit in between.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

/// Half-width of a banded static mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BandWidth {
    Fixed(usize),
    /// `b = floor(sqrt(T) / 2)` for a sequence of length `T`.
    SqrtLen,
}

impl BandWidth {
    pub fn fixed(b: i64) -> Result<Self> {
        usize::try_from(b)
            .map(BandWidth::Fixed)
            .map_err(|_| Error::Config(format!("band width must be >= 0, got {b}")))
    }

    pub fn resolve(self, len: usize) -> usize {
        match self {
            BandWidth::Fixed(b) => b,
            BandWidth::SqrtLen => ((len as f64).sqrt() / 2.0).floor() as usize,
        }
    }
}

impl fmt::Display for BandWidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BandWidth::Fixed(b) => write!(f, "{b}"),
            BandWidth::SqrtLen => f.write_str("sqrt"),
        }
    }
}

impl FromStr for BandWidth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("sqrt") {
            return Ok(BandWidth::SqrtLen);
        }
        let b: i64 = s
            .parse()
            .map_err(|_| Error::Config(format!("band width `{s}` is neither an integer nor `sqrt`")))?;
        BandWidth::fixed(b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MaskKind {
    AllOnes,
    Identity,
    Banded(BandWidth),
    /// Learned soft mask `σ(h_t·W + P[clip(t−s)] + U[head])`.
    Dynamic,
    /// `1` where key position `s <= t`.
    Causal,
    /// `1` on the first `valid` key positions.
    Padding { valid: usize },
    /// Element-wise product of the constituents.
    Composite(Vec<MaskKind>),
}

impl MaskKind {
    pub fn is_dynamic(&self) -> bool {
        match self {
            MaskKind::Dynamic => true,
            MaskKind::Composite(parts) => parts.iter().any(MaskKind::is_dynamic),
            _ => false,
        }
    }

    /// Value of a static mask entry; `None` for dynamic masks.
    fn static_entry(&self, len: usize, t: usize, s: usize) -> Option<f64> {
        let on = |b: bool| if b { 1.0 } else { 0.0 };
        Some(match self {
            MaskKind::AllOnes => 1.0,
            MaskKind::Identity => on(t == s),
            MaskKind::Banded(b) => on(t.abs_diff(s) <= b.resolve(len)),
            MaskKind::Causal => on(s <= t),
            MaskKind::Padding { valid } => on(s < *valid),
            MaskKind::Composite(parts) => {
                let mut v = 1.0;
                for p in parts {
                    v *= p.static_entry(len, t, s)?;
                }
                v
            }
            MaskKind::Dynamic => return None,
        })
    }

    fn static_tensor<S: Scalar>(&self, len: usize) -> Option<Tensor<S>> {
        let mut data = Vec::with_capacity(len * len);
        for t in 0..len {
            for s in 0..len {
                data.push(S::from_f64_lossy(self.static_entry(len, t, s)?));
            }
        }
        Some(Tensor::new(vec![len, len], data).expect("square mask"))
    }

    /// Records this mask for one head on `tape`.
    ///
    /// Static masks become constants. The dynamic mask is differentiable in
    /// both the hidden states and the parameters in `ctx`.
    pub fn build_on<S: Scalar>(
        &self,
        tape: &mut GradTape<S>,
        ctx: &mut MaskContext<'_>,
        head: usize,
    ) -> Result<Var> {
        if let Some(t) = self.static_tensor(ctx.len) {
            return Ok(tape.constant(t));
        }
        match self {
            MaskKind::Dynamic => {
                let params = ctx.dynamic.ok_or_else(|| {
                    Error::Config("dynamic mask requires DynamicMaskParams".into())
                })?;
                let query = match ctx.query_score {
                    Some(q) => q,
                    None => {
                        let hidden = ctx.hidden.ok_or_else(|| {
                            Error::Config("dynamic mask requires hidden states".into())
                        })?;
                        let q = tape.matmul(hidden, params.w)?;
                        ctx.query_score = Some(q);
                        q
                    }
                };
                if tape.value(query).numel() != ctx.len {
                    return Err(Error::shape(
                        "dynamic mask",
                        &[ctx.len],
                        tape.value(query).shape(),
                    ));
                }
                let logits =
                    tape.relative_logits(query, params.table, params.head_bias, head, params.radius)?;
                Ok(tape.sigmoid(logits))
            }
            MaskKind::Composite(parts) => {
                let mut acc: Option<Var> = None;
                let statics: Vec<MaskKind> =
                    parts.iter().filter(|p| !p.is_dynamic()).cloned().collect();
                if !statics.is_empty() {
                    acc = Some(MaskKind::Composite(statics).build_on(tape, ctx, head)?);
                }
                for p in parts.iter().filter(|p| p.is_dynamic()) {
                    let m = p.build_on(tape, ctx, head)?;
                    acc = Some(match acc {
                        Some(a) => tape.mul(a, m)?,
                        None => m,
                    });
                }
                Ok(acc.expect("dynamic composite has at least one part"))
            }
            _ => unreachable!("static kinds handled above"),
        }
    }
}

/// Tape handles for the parameters of one dynamic mask layer.
#[derive(Clone, Copy, Debug)]
pub struct DynamicMaskVars {
    /// `d×1` projection of a hidden state onto a scalar.
    pub w: Var,
    /// `2R+1` relative-offset scalars.
    pub table: Var,
    /// One scalar per head.
    pub head_bias: Var,
    pub radius: usize,
}

/// Per-call inputs to [`MaskKind::build_on`].
#[derive(Debug)]
pub struct MaskContext<'a> {
    pub len: usize,
    pub hidden: Option<Var>,
    pub dynamic: Option<&'a DynamicMaskVars>,
    // h·W, shared by all heads of the layer
    query_score: Option<Var>,
}

impl<'a> MaskContext<'a> {
    pub fn new(len: usize, hidden: Option<Var>, dynamic: Option<&'a DynamicMaskVars>) -> Self {
        MaskContext {
            len,
            hidden,
            dynamic,
            query_score: None,
        }
    }
}

/// Trainable parameters of one dynamic mask layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicMaskParams<S> {
    pub w: Tensor<S>,
    pub table: Tensor<S>,
    pub head_bias: Tensor<S>,
    pub radius: usize,
}

impl<S: Scalar> DynamicMaskParams<S> {
    /// All-zero parameters: every mask entry starts at `σ(0) = 0.5`.
    pub fn zeros(d_model: usize, heads: usize, radius: usize) -> Self {
        DynamicMaskParams {
            w: Tensor::zeros(&[d_model, 1]),
            table: Tensor::zeros(&[2 * radius + 1]),
            head_bias: Tensor::zeros(&[heads]),
            radius,
        }
    }

    pub fn numel(&self) -> usize {
        self.w.numel() + self.table.numel() + self.head_bias.numel()
    }

    /// Table entry for relative offset `t - s`, after clipping.
    pub fn offset_mut(&mut self, offset: isize) -> &mut S {
        let i = crate::tape::relative_index(offset, self.radius);
        &mut self.table.data_mut()[i]
    }

    pub fn bind(&self, tape: &mut GradTape<S>, requires_grad: bool) -> DynamicMaskVars {
        let mut leaf = |t: &Tensor<S>| {
            let mut t = t.clone();
            t.requires_grad = requires_grad;
            tape.leaf(t)
        };
        DynamicMaskVars {
            w: leaf(&self.w),
            table: leaf(&self.table),
            head_bias: leaf(&self.head_bias),
            radius: self.radius,
        }
    }
}

/// Materialises the mask of `kind` for one head of a length-`len` sequence.
///
/// `hidden` (`len×d`) and `params` are only consulted by dynamic masks.
pub fn build_mask<S: Scalar>(
    kind: &MaskKind,
    len: usize,
    head: usize,
    hidden: Option<&Tensor<S>>,
    params: Option<&DynamicMaskParams<S>>,
) -> Result<Tensor<S>> {
    let mut tape = GradTape::new();
    let hidden = hidden.map(|h| tape.constant(h.clone()));
    let vars = params.map(|p| p.bind(&mut tape, false));
    let mut ctx = MaskContext::new(len, hidden, vars.as_ref());
    let m = kind.build_on(&mut tape, &mut ctx, head)?;
    Ok(tape.value(m).clone())
}

/// Row-major CSV, one matrix row per line.
pub fn matrix_to_csv(rows: usize, cols: usize, data: &[f64]) -> String {
    let mut out = String::new();
    for r in 0..rows {
        let line: Vec<String> = data[r * cols..(r + 1) * cols]
            .iter()
            .map(|v| v.to_string())
            .collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    /// Row-major values.
    pub data: Vec<f64>,
}

pub fn mask_to_csv<S: Scalar>(mask: &Tensor<S>) -> String {
    matrix_to_csv(mask.rows(), mask.cols(), &mask.to_f64())
}

pub fn mask_to_json<S: Scalar>(mask: &Tensor<S>) -> Result<String> {
    Ok(serde_json::to_string(&MatrixJson {
        rows: mask.rows(),
        cols: mask.cols(),
        data: mask.to_f64(),
    })?)
}
