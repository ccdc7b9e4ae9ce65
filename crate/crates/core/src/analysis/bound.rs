//! Triangle-style bound on query/key distances.
//!
//! With `x = aW_Q − bW_K`, `y = bW_K − bW_Q` and `z = bW_Q − cW_K`, the
//! sum `x + y + z = aW_Q − cW_K`, so `‖x + y + z‖² ≤ 3(‖x‖² + ‖y‖² + ‖z‖²)`
//! bounds the distance between `a`'s query and `c`'s key through `b`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Relative slack granted to `lhs ≤ rhs` for rounding in the two sides.
pub const BOUND_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

fn project<S: Scalar>(v: &Tensor<S>, w: &Tensor<S>) -> Result<Vec<f64>> {
    let (d, dk) = w.expect_matrix("distance_bound_check")?;
    if v.numel() != d {
        return Err(Error::shape("distance_bound_check", v.shape(), w.shape()));
    }
    Ok((0..dk)
        .map(|j| (0..d).map(|i| v.data()[i].as_f64() * w.at(i, j).as_f64()).sum())
        .collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `a`, `b`, `c` are token vectors of length `d`; `w_q`, `w_k` are `d×d_k`.
pub fn distance_bound_check<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    c: &Tensor<S>,
    w_q: &Tensor<S>,
    w_k: &Tensor<S>,
) -> Result<BoundCheck> {
    if w_q.shape() != w_k.shape() {
        return Err(Error::shape("distance_bound_check", w_q.shape(), w_k.shape()));
    }
    let (aq, bq, bk, ck) = (project(a, w_q)?, project(b, w_q)?, project(b, w_k)?, project(c, w_k)?);
    let lhs = sq_dist(&aq, &ck);
    let rhs = 3.0 * (sq_dist(&aq, &bk) + sq_dist(&bk, &bq) + sq_dist(&bq, &ck));
    Ok(BoundCheck {
        lhs,
        rhs,
        holds: lhs <= rhs * (1.0 + BOUND_SLACK),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[xs.len()], xs).unwrap()
    }

    #[test]
    fn coincident_inputs_give_zero() {
        let a = v(&[0.3, -1.0]);
        let w = Tensor::from_rows(&[[1.0, 2.0], [0.5, -1.0]]).unwrap();
        let r = distance_bound_check(&a, &a, &a, &w, &w).unwrap();
        assert_eq!((r.lhs, r.rhs, r.holds), (0.0, 0.0, true));
    }

    #[test]
    fn colinear_witness_is_tight() {
        // W_Q = 2I, W_K = I, a = 0, c = 3b makes all three differences −b.
        let b = v(&[1.0, -2.0, 3.0]);
        let c = v(&[3.0, -6.0, 9.0]);
        let a = v(&[0.0, 0.0, 0.0]);
        let mut wq = Tensor::identity(3);
        wq.data_mut().iter_mut().for_each(|x| *x *= 2.0);
        let r = distance_bound_check(&a, &b, &c, &wq, &Tensor::identity(3)).unwrap();
        assert_eq!(r.lhs, 9.0 * 14.0);
        assert_eq!(r.lhs, r.rhs);
        assert!(r.holds);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let w = Tensor::<f64>::identity(2);
        assert!(distance_bound_check(&v(&[1.0]), &v(&[1.0, 2.0]), &v(&[1.0, 2.0]), &w, &w).is_err());
    }
}
