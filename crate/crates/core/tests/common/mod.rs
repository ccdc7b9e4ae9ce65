//! Helpers shared by the integration suites.

#![allow(dead_code)]

use man_core::{GradTape64, Result, Tensor64, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Denominator floor so that gradients near zero are compared absolutely.
pub const FD_FLOOR: f64 = 1e-7;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(FD_FLOOR)
}

/// Worst relative error between tape gradients and central differences of
/// the scalar built by `f` from leaves holding `inputs`.
pub fn grad_check<F>(inputs: &[Tensor64], f: F) -> f64
where
    F: Fn(&mut GradTape64, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor64]| -> (f64, Vec<Vec<f64>>) {
        let mut tape = GradTape64::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone().with_grad())).collect();
        let out = f(&mut tape, &vars).expect("forward");
        tape.backward(out).expect("backward");
        let grads = vars
            .iter()
            .zip(xs)
            .map(|(&v, x)| tape.grad(v).map_or_else(|| vec![0.0; x.numel()], <[f64]>::to_vec))
            .collect();
        (tape.value(out).item(), grads)
    };
    let (_, analytic) = eval(inputs);
    let mut xs = inputs.to_vec();
    let mut worst = 0.0f64;
    for k in 0..xs.len() {
        for j in 0..xs[k].numel() {
            let orig = xs[k].data()[j];
            xs[k].data_mut()[j] = orig + FD_STEP;
            let up = eval(&xs).0;
            xs[k].data_mut()[j] = orig - FD_STEP;
            let down = eval(&xs).0;
            xs[k].data_mut()[j] = orig;
            worst = worst.max(rel_err(analytic[k][j], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

/// Deterministic pseudo-random matrix with entries in `(-scale, scale)`.
pub fn fill(rows: usize, cols: usize, salt: f64, scale: f64) -> Tensor64 {
    let data: Vec<f64> = (0..rows * cols)
        .map(|i| scale * ((i as f64 + 1.0) * 0.754_877 + salt).sin())
        .collect();
    Tensor64::new(vec![rows, cols], data).unwrap()
}

/// `Σ c_ij x_ij` with fixed irregular weights, so that every output entry
/// reaches the loss with a distinct coefficient.
pub fn probe(tape: &mut GradTape64, x: Var) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let c: Vec<f64> = (0..n).map(|i| ((i as f64) * 1.618 + 0.3).cos()).collect();
    let c = tape.constant(Tensor64::new(shape, c)?);
    let p = tape.mul(x, c)?;
    Ok(tape.sum(p))
}

/// Small C5 model with non-zero mask parameters, so gradients into the
/// dynamic mask are not evaluated at a symmetric point.
pub fn small_model(ordering: &str) -> man_core::Model64 {
    use man_core::{BlockOrdering, ModelConfig};
    let cfg = ModelConfig {
        d_model: 8,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        max_len: 8,
        radius: 2,
        dropout: 0.0,
        ordering: BlockOrdering::preset(ordering).unwrap(),
        ..ModelConfig::new(6)
    };
    let mut m = man_core::train::init_model::<f64>(cfg, 3).unwrap();
    for (name, t) in m.params_mut().iter_mut() {
        if name.contains(".mask.") {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = 0.5 * (i as f64 * 0.7 + 0.2).sin();
            }
        }
    }
    m
}

/// Worst relative error over every parameter of `model` for a label
/// smoothed loss on one fixed pair.
pub fn model_grad_check(model: &man_core::Model64) -> f64 {
    use man_core::model::ForwardOptions;
    let params: Vec<Tensor64> = model.params().iter().map(|(_, t)| t.clone()).collect();
    grad_check(&params, |tape, vars| {
        let mut opts = ForwardOptions::<f64, rand_chacha::ChaCha8Rng>::default();
        let mem = model.encode_on(tape, vars, &[2, 3, 4, 2, 5], &mut opts)?;
        let logits = model.decode_on(tape, vars, mem, &[0, 2, 3], &mut opts)?;
        tape.cross_entropy(logits, &[2, 3, 1], 0.1)
    })
}

/// Worst finite-difference error of every differentiable tape operation,
/// each on a small fixed input.
pub fn op_gradient_errors() -> Vec<(&'static str, f64)> {
    use man_core::mask::{DynamicMaskVars, MaskContext};
    use man_core::MaskKind;
    let mut out = Vec::new();
    let (a, b) = (fill(3, 4, 0.1, 1.0), fill(4, 2, 0.7, 1.0));
    out.push(("matmul", grad_check(&[a.clone(), b], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        probe(t, y)
    })));
    let c = fill(5, 4, 1.3, 1.0);
    out.push(("matmul_nt", grad_check(&[a, c], |t, v| {
        let y = t.matmul_nt(v[0], v[1])?;
        probe(t, y)
    })));

    let (a, b) = (fill(3, 4, 0.2, 2.0), fill(3, 4, 0.9, 2.0));
    let bias = fill(1, 4, 0.4, 1.0);
    out.push(("add", grad_check(&[a.clone(), b.clone()], |t, v| {
        let y = t.add(v[0], v[1])?;
        probe(t, y)
    })));
    out.push(("add_row", grad_check(&[a.clone(), bias], |t, v| {
        let y = t.add_row(v[0], v[1])?;
        probe(t, y)
    })));
    out.push(("mul", grad_check(&[a.clone(), b], |t, v| {
        let y = t.mul(v[0], v[1])?;
        probe(t, y)
    })));
    out.push(("scale", grad_check(std::slice::from_ref(&a), |t, v| {
        let y = t.scale(v[0], -1.7);
        probe(t, y)
    })));
    out.push(("sigmoid", grad_check(std::slice::from_ref(&a), |t, v| {
        let y = t.sigmoid(v[0]);
        probe(t, y)
    })));
    // relu has a kink at zero; this fill keeps every entry away from it
    assert!(a.data().iter().all(|x| x.abs() > 1e-3));
    out.push(("relu", grad_check(&[a], |t, v| {
        let y = t.relu(v[0]);
        probe(t, y)
    })));

    let logits = fill(4, 4, 0.3, 3.0);
    let mut mask = fill(4, 4, 2.1, 0.45);
    mask.data_mut().iter_mut().for_each(|m| *m += 0.5);
    out.push(("masked_softmax", grad_check(&[logits.clone(), mask], |t, v| {
        let y = t.masked_softmax(v[0], v[1])?;
        probe(t, y)
    })));
    let hard = Tensor64::from_rows(&[[1.0, 0.0, 1.0, 0.0], [0.0, 1.0, 0.0, 0.0], [1.0; 4], [0.0, 0.0, 0.3, 1.0]]).unwrap();
    out.push(("masked_softmax with zeros", grad_check(&[logits], |t, v| {
        let m = t.constant(hard.clone());
        let y = t.masked_softmax(v[0], m)?;
        probe(t, y)
    })));

    let x = fill(3, 5, 0.6, 2.0);
    let (g, b) = (fill(1, 5, 1.1, 1.0), fill(1, 5, 2.3, 1.0));
    out.push(("layer_norm", grad_check(&[x, g, b], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        probe(t, y)
    })));

    let logits = fill(3, 6, 0.8, 2.0);
    out.push(("cross_entropy", grad_check(std::slice::from_ref(&logits), |t, v| t.cross_entropy(v[0], &[2, 0, 5], 0.0))));
    out.push(("cross_entropy smoothed", grad_check(&[logits], |t, v| t.cross_entropy(v[0], &[2, 0, 5], 0.1))));

    let (a, b) = (fill(3, 2, 0.5, 1.0), fill(3, 3, 1.5, 1.0));
    out.push(("concat_cols", grad_check(&[a, b], |t, v| {
        let y = t.concat_cols(&[v[0], v[1]])?;
        probe(t, y)
    })));
    out.push(("gather_rows", grad_check(&[fill(5, 3, 0.25, 1.0)], |t, v| {
        // repeated ids accumulate
        let y = t.gather_rows(v[0], &[4, 1, 4, 0])?;
        probe(t, y)
    })));

    let (q, table, u) = (fill(6, 1, 0.4, 1.0), fill(5, 1, 1.9, 1.0), fill(3, 1, 0.1, 1.0));
    out.push(("relative_logits", grad_check(&[q, table, u], |t, v| {
        // radius 2 with T = 6 exercises clipping
        let y = t.relative_logits(v[0], v[1], v[2], 1, 2)?;
        probe(t, y)
    })));

    let h = fill(5, 4, 0.35, 1.0);
    let (w, p, u) = (fill(4, 1, 1.2, 0.8), fill(5, 1, 2.7, 0.8), fill(2, 1, 0.6, 0.8));
    out.push(("dynamic mask W, P, U and h", grad_check(&[h, w, p, u], |t, v| {
        let vars = DynamicMaskVars {
            w: v[1],
            table: v[2],
            head_bias: v[3],
            radius: 2,
        };
        let mut ctx = MaskContext::new(5, Some(v[0]), Some(&vars));
        let m0 = MaskKind::Dynamic.build_on(t, &mut ctx, 0)?;
        let m1 = MaskKind::Composite(vec![MaskKind::Causal, MaskKind::Dynamic]).build_on(t, &mut ctx, 1)?;
        let (a, b) = (probe(t, m0)?, probe(t, m1)?);
        t.add(a, b)
    })));
    out
}
