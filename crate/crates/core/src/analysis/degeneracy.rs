//! Checks that the MAN function reduces exactly to multi-head self-attention
//! under an all-ones mask and to a ReLU feed-forward network under the
//! identity mask, against brute-force reference implementations.

use rand::Rng;
use serde::Serialize;

use crate::attention::{man_core_forward, ManLayerConfig, ManWeights};
use crate::error::Result;
use crate::mask::{build_mask, MaskKind};
use crate::rng::{stream, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const F64_TOLERANCE: f64 = 1e-10;
pub const F32_TOLERANCE: f64 = 1e-4;
/// Value written into one mask entry by the negative control.
pub const PERTURBED_ENTRY: f64 = 0.999;

/// Default deviation bound for `S`.
pub fn default_tolerance<S: Scalar>() -> f64 {
    if S::BYTES == 8 {
        F64_TOLERANCE
    } else {
        F32_TOLERANCE
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegeneracyCheck {
    pub draws: usize,
    pub tolerance: f64,
    /// Replace mask entry `(0, 1)` with [`PERTURBED_ENTRY`]; every draw
    /// should then fail.
    pub perturb: bool,
}

impl DegeneracyCheck {
    pub fn new<S: Scalar>(draws: usize) -> Self {
        DegeneracyCheck {
            draws,
            tolerance: default_tolerance::<S>(),
            perturb: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Identity {
    San,
    Ffn,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DegeneracyFailure {
    pub draw: usize,
    pub identity: Identity,
    pub deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DegeneracyReport {
    pub draws: usize,
    pub tolerance: f64,
    pub san_max_deviation: f64,
    pub ffn_max_deviation: f64,
    pub failures: Vec<DegeneracyFailure>,
}

impl DegeneracyReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(vec![rows, cols], data).expect("matrix shape")
}

fn matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a.at(i, p) * b.at(p, j)).sum();
        }
    }
    Tensor::new(vec![m, n], out).expect("matrix shape")
}

/// Scaled dot-product multi-head attention followed by the output projection.
pub fn reference_self_attention(h: &Tensor<f64>, w: &ManWeights<f64>) -> Tensor<f64> {
    let t = h.rows();
    let mut concat: Vec<Vec<f64>> = vec![Vec::new(); t];
    for ((wq, wk), wv) in w.w_q.iter().zip(&w.w_k).zip(&w.w_v) {
        let (q, k, v) = (matmul(h, wq), matmul(h, wk), matmul(h, wv));
        let scale = (wq.cols() as f64).sqrt();
        for (i, out_row) in concat.iter_mut().enumerate() {
            let logits: Vec<f64> = (0..t)
                .map(|j| (0..q.cols()).map(|c| q.at(i, c) * k.at(j, c)).sum::<f64>() / scale)
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..v.cols() {
                out_row.push((0..t).map(|j| e[j] / z * v.at(j, c)).sum());
            }
        }
    }
    let width = concat[0].len();
    let heads = Tensor::new(vec![t, width], concat.concat()).expect("matrix shape");
    matmul(&heads, &w.w_h)
}

/// `relu(h · W₁) · W₂` with `W₁` the single value projection.
pub fn reference_ffn(h: &Tensor<f64>, w: &ManWeights<f64>) -> Tensor<f64> {
    let mut inner = matmul(h, &w.w_v[0]);
    inner.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    matmul(&inner, &w.w_h)
}

fn deviation<S: Scalar>(got: &Tensor<S>, want: &Tensor<f64>) -> f64 {
    got.data()
        .iter()
        .zip(want.data())
        .map(|(&g, &w)| (g.as_f64() - w).abs())
        .fold(0.0, f64::max)
}

fn masks<S: Scalar>(kind: &MaskKind, len: usize, heads: usize, perturb: bool) -> Result<Vec<Tensor<S>>> {
    (0..heads)
        .map(|h| {
            let mut m = build_mask::<S>(kind, len, h, None, None)?;
            if perturb {
                let cols = m.cols();
                m.data_mut()[1.min(cols - 1)] = S::from_f64_lossy(PERTURBED_ENTRY);
            }
            Ok(m)
        })
        .collect()
}

/// Runs both identities over `check.draws` random configurations drawn
/// from the `Check` stream of `seed`. Weights are drawn in `f64` and cast
/// to `S`; the references always run in `f64`.
pub fn verify_degeneracy<S: Scalar>(seed: u64, check: &DegeneracyCheck) -> Result<DegeneracyReport> {
    let mut rng = stream(seed, Stream::Check);
    let mut report = DegeneracyReport {
        draws: check.draws,
        tolerance: check.tolerance,
        san_max_deviation: 0.0,
        ffn_max_deviation: 0.0,
        failures: Vec::new(),
    };
    for draw in 0..check.draws {
        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let d = heads * rng.gen_range(1..=4);
        // At least two positions so a perturbed entry is visible.
        let len = rng.gen_range(2..=9);
        let h = uniform(&mut rng, len, d, 1.0);
        let h_s = h.cast::<S>();

        let san_cfg = ManLayerConfig::san(d, heads);
        let san_w = ManWeights::<f64> {
            w_q: (0..heads).map(|_| uniform(&mut rng, d, d / heads, 1.0)).collect(),
            w_k: (0..heads).map(|_| uniform(&mut rng, d, d / heads, 1.0)).collect(),
            w_v: (0..heads).map(|_| uniform(&mut rng, d, san_cfg.d_v, 1.0)).collect(),
            w_h: uniform(&mut rng, heads * san_cfg.d_v, d, 1.0),
            ln_gain: Tensor::full(&[d], 1.0),
            ln_bias: Tensor::zeros(&[d]),
        };
        let want = reference_self_attention(&h, &san_w);
        let m = masks::<S>(&MaskKind::AllOnes, len, heads, check.perturb)?;
        let got = man_core_forward(&h_s, &san_cfg, &cast_weights(&san_w), &m)?;
        let dev = deviation(&got, &want);
        report.san_max_deviation = report.san_max_deviation.max(dev);
        if !(dev < check.tolerance) {
            report.failures.push(DegeneracyFailure {
                draw,
                identity: Identity::San,
                deviation: dev,
            });
        }

        let inner = 2 * d;
        let ffn_cfg = ManLayerConfig::ffn(d, inner);
        let ffn_w = ManWeights::<f64> {
            w_q: Vec::new(),
            w_k: Vec::new(),
            w_v: vec![uniform(&mut rng, d, inner, 1.0)],
            w_h: uniform(&mut rng, inner, d, 1.0),
            ln_gain: Tensor::full(&[d], 1.0),
            ln_bias: Tensor::zeros(&[d]),
        };
        let want = reference_ffn(&h, &ffn_w);
        let m = masks::<S>(&MaskKind::Identity, len, 1, check.perturb)?;
        let got = man_core_forward(&h_s, &ffn_cfg, &cast_weights(&ffn_w), &m)?;
        let dev = deviation(&got, &want);
        report.ffn_max_deviation = report.ffn_max_deviation.max(dev);
        if !(dev < check.tolerance) {
            report.failures.push(DegeneracyFailure {
                draw,
                identity: Identity::Ffn,
                deviation: dev,
            });
        }
    }
    Ok(report)
}

fn cast_weights<S: Scalar>(w: &ManWeights<f64>) -> ManWeights<S> {
    let c = |ts: &[Tensor<f64>]| ts.iter().map(Tensor::cast).collect();
    ManWeights {
        w_q: c(&w.w_q),
        w_k: c(&w.w_k),
        w_v: c(&w.w_v),
        w_h: w.w_h.cast(),
        ln_gain: w.ln_gain.cast(),
        ln_bias: w.ln_bias.cast(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identities_hold_in_f64() {
        let r = verify_degeneracy::<f64>(3, &DegeneracyCheck::new::<f64>(20)).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.san_max_deviation < F64_TOLERANCE);
    }

    #[test]
    fn perturbed_mask_fails_every_draw() {
        let check = DegeneracyCheck {
            perturb: true,
            ..DegeneracyCheck::new::<f64>(10)
        };
        let r = verify_degeneracy::<f64>(3, &check).unwrap();
        assert_eq!(r.failures.len(), 20);
    }

    #[test]
    fn f32_uses_the_looser_bound() {
        let check = DegeneracyCheck::new::<f32>(20);
        assert_eq!(check.tolerance, F32_TOLERANCE);
        assert!(verify_degeneracy::<f32>(4, &check).unwrap().passed());
    }

    #[test]
    fn references_agree_on_a_hand_case() {
        // One head, d = 1: uniform attention over equal keys averages values.
        let h = Tensor::from_rows(&[[1.0], [3.0]]).unwrap();
        let w = ManWeights {
            w_q: vec![Tensor::from_rows(&[[0.0]]).unwrap()],
            w_k: vec![Tensor::from_rows(&[[1.0]]).unwrap()],
            w_v: vec![Tensor::from_rows(&[[1.0]]).unwrap()],
            w_h: Tensor::from_rows(&[[2.0]]).unwrap(),
            ln_gain: Tensor::full(&[1], 1.0),
            ln_bias: Tensor::zeros(&[1]),
        };
        assert_eq!(reference_self_attention(&h, &w).data(), &[4.0, 4.0]);
        let f = ManWeights {
            w_v: vec![Tensor::from_rows(&[[-1.0, 1.0]]).unwrap()],
            w_h: Tensor::from_rows(&[[1.0], [1.0]]).unwrap(),
            ..w
        };
        assert_eq!(reference_ffn(&h, &f).data(), &[1.0, 3.0]);
    }
}
