use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central finite differences of `f` at `theta` with step `h`.
fn finite_diff(f: &dyn Fn(&[f64]) -> f64, theta: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(theta.len());
    let mut t = theta.to_vec();
    for i in 0..theta.len() {
        t[i] = theta[i] + h;
        let up = f(&t);
        t[i] = theta[i] - h;
        let dn = f(&t);
        t[i] = theta[i];
        out.push((up - dn) / (2.0 * h));
    }
    out
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    let denom = a.abs().max(b.abs()).max(1e-8);
    (a - b).abs() / denom <= tol
}

/// Magnitudes in [1e-3, 1e1], random sign unless `positive`.
fn sample_value(rng: &mut ChaCha8Rng, positive: bool) -> f64 {
    let mag = (rng.random::<f64>() * (10.0f64.ln() - 1e-3f64.ln()) + 1e-3f64.ln()).exp();
    if positive || rng.random::<bool>() {
        mag
    } else {
        -mag
    }
}

#[test]
fn elu_matches_its_definition() {
    assert_eq!(elu(0.0), 0.0);
    assert_eq!(elu(1.0), 1.0);
    assert!((elu(-50.0) - (-1.0)).abs() < 1e-9);
}

#[test]
fn backward_of_parameter_sum_is_ones() {
    let mut t = Tape::new();
    let p = t.leaf(Tensor::matrix(2, 3, vec![0.3; 6]), true);
    let s = t.sum(p);
    t.backward(s).unwrap();
    assert_eq!(t.grad(p).data(), &[1.0; 6]);
}

#[test]
fn backward_of_x_times_x_at_three_is_six() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(3.0), true);
    let y = t.mul(x, x);
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).item(), 6.0);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::matrix(2, 2, vec![1.0; 4]), true);
    let y = t.square(x);
    let err = t.backward(y).unwrap_err();
    assert!(err.to_string().contains("scalar"));
}

#[test]
fn reused_node_accumulates_once_per_use() {
    // y = x + x + x must match the duplicated-subgraph construction
    // y' = x1 + x2 + x3 with equal leaf values.
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(1.7), true);
    let a = t.add(x, x);
    let y = t.add(a, x);
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).item(), 3.0);

    let mut t2 = Tape::new();
    let xs: Vec<NodeId> = (0..3).map(|_| t2.leaf(Tensor::scalar(1.7), true)).collect();
    let a2 = t2.add(xs[0], xs[1]);
    let y2 = t2.add(a2, xs[2]);
    t2.backward(y2).unwrap();
    let dup_total: f64 = xs.iter().map(|&x| t2.grad(x).item()).sum();
    assert_eq!(dup_total, 3.0);
    assert_eq!(t.value(y).item(), t2.value(y2).item());
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let result = std::panic::catch_unwind(|| {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::matrix(2, 3, vec![0.0; 6]), false);
        let b = t.leaf(Tensor::matrix(3, 2, vec![0.0; 6]), false);
        t.add(a, b);
    });
    let msg = *result.unwrap_err().downcast::<String>().unwrap();
    assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
}

/// Builds a scalar graph exercising `op`, reading leaf values from `theta`.
/// Returns (scalar value, analytic gradient) when `grad` is set.
fn op_case(
    op: &str,
    theta: &[f64],
    rows: usize,
    cols: usize,
    mix: &[f64],
) -> (f64, Option<Vec<f64>>, Tape, NodeId) {
    let n = rows * cols;
    let mut t = Tape::new();
    let a = t.leaf(Tensor::matrix(rows, cols, theta[..n].to_vec()), true);
    let out = match op {
        "add" => {
            let b = t.constant(Tensor::matrix(rows, cols, theta[n..2 * n].to_vec()));
            t.add(a, b)
        }
        "add_row" => {
            let b = t.leaf(Tensor::matrix(1, cols, theta[n..n + cols].to_vec()), true);
            t.add(a, b)
        }
        "sub" => {
            let b = t.constant(Tensor::matrix(rows, cols, theta[n..2 * n].to_vec()));
            t.sub(a, b)
        }
        "mul" => {
            let b = t.constant(Tensor::matrix(rows, cols, theta[n..2 * n].to_vec()));
            t.mul(a, b)
        }
        "mul_row" => {
            let b = t.leaf(Tensor::matrix(1, cols, theta[n..n + cols].to_vec()), true);
            t.mul(a, b)
        }
        "matmul" => {
            let b = t.leaf(Tensor::matrix(cols, 2, theta[n..n + cols * 2].to_vec()), true);
            t.matmul(a, b)
        }
        "matmul_tt" => {
            let b = t.leaf(Tensor::matrix(2, rows, theta[n..n + rows * 2].to_vec()), true);
            t.matmul_t(a, b, true, true)
        }
        "mean" => t.mean(a),
        "sum" => t.sum(a),
        "row_sum" => t.row_sum(a),
        "col_sum" => t.col_sum(a),
        "abs" => t.abs(a),
        "square" => t.square(a),
        "sqrt" => t.sqrt(a),
        "elu" => t.elu(a),
        "elu_grad" => t.elu_grad(a),
        "sigmoid" => t.sigmoid(a),
        "scale" => t.scale(a, -1.75),
        "add_scalar" => t.add_scalar(a, 0.6),
        "concat" => {
            let b = t.constant(Tensor::matrix(2, cols, theta[n..n + 2 * cols].to_vec()));
            t.concat(&[a, b])
        }
        "slice_rows" => t.slice_rows(a, 0, rows.max(2) - 1),
        "slice_cols" => t.slice_cols(a, 1, cols),
        "pad_cols" => t.pad_cols(a, cols + 3, 1),
        "pad_rows" => t.pad_rows(a, rows + 2, 1),
        other => panic!("unknown case {other}"),
    };
    // Mix output entries with fixed coefficients so every entry matters.
    let numel = t.value(out).numel();
    let mixed = {
        let shape = t.value(out).shape().to_vec();
        let coef = t.constant(Tensor::new(shape, mix[..numel].to_vec()));
        let prod = t.mul(out, coef);
        t.sum(prod)
    };
    (t.value(mixed).item(), None, t, mixed)
}

#[test]
fn every_op_matches_central_finite_differences() {
    let ops = [
        "add", "add_row", "sub", "mul", "mul_row", "matmul", "matmul_tt", "mean", "sum",
        "row_sum", "col_sum", "abs", "square", "sqrt", "elu", "elu_grad", "sigmoid", "scale",
        "add_scalar", "concat", "slice_rows", "slice_cols", "pad_cols", "pad_rows",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(991);
    let mut instances = 0;
    for &op in &ops {
        for _ in 0..5 {
            let (rows, cols) = (3, 4);
            let positive = op == "sqrt";
            let theta: Vec<f64> = (0..rows * cols * 3)
                .map(|_| sample_value(&mut rng, positive))
                .collect();
            let mix: Vec<f64> = (0..64).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();

            let f = |params: &[f64]| op_case(op, params, rows, cols, &mix).0;
            let fd = finite_diff(&f, &theta, 1e-5);

            let (_, _, mut tape, root) = op_case(op, &theta, rows, cols, &mix);
            tape.backward(root).unwrap();
            // Leaf 0 is always the tensor built from theta[..rows*cols].
            let analytic = tape.grad(NodeId::from_raw(0));
            for (k, &g) in analytic.data().iter().enumerate() {
                assert!(
                    rel_close(g, fd[k], 1e-4),
                    "{op}: grad[{k}] analytic {g} vs fd {}",
                    fd[k]
                );
            }
            instances += 1;
        }
    }
    assert!(instances >= 100, "only {instances} instances checked");
}

/// Two-layer ELU MLP built directly from a flat parameter vector.
/// Layout: w1 (in x h), b1 (h), w2 (h x 1), b2 (1).
fn tiny_mlp(t: &mut Tape, theta: &[f64], input: NodeId, d_in: usize, h: usize) -> NodeId {
    let mut off = 0;
    let w1 = t.leaf(
        Tensor::matrix(d_in, h, theta[off..off + d_in * h].to_vec()),
        true,
    );
    off += d_in * h;
    let b1 = t.leaf(Tensor::matrix(1, h, theta[off..off + h].to_vec()), true);
    off += h;
    let w2 = t.leaf(Tensor::matrix(h, 1, theta[off..off + h].to_vec()), true);
    off += h;
    let b2 = t.leaf(Tensor::matrix(1, 1, theta[off..off + 1].to_vec()), true);
    let z1 = t.matmul(input, w1);
    let z1 = t.add(z1, b1);
    let a1 = t.elu(z1);
    let z2 = t.matmul(a1, w2);
    t.add(z2, b2)
}

fn mlp_param_len(d_in: usize, h: usize) -> usize {
    d_in * h + h + h + 1
}

#[test]
fn random_mlp_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (d_in, h, batch) = (3, 5, 4);
    for _ in 0..10 {
        let theta: Vec<f64> = (0..mlp_param_len(d_in, h))
            .map(|_| rng.random::<f64>() - 0.5)
            .collect();
        let x: Vec<f64> = (0..batch * d_in).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let y: Vec<f64> = (0..batch).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();

        let loss = |params: &[f64]| -> f64 {
            let mut t = Tape::new();
            let xn = t.constant(Tensor::matrix(batch, d_in, x.clone()));
            let pred = tiny_mlp(&mut t, params, xn, d_in, h);
            let target = t.constant(Tensor::matrix(batch, 1, y.clone()));
            let resid = t.sub(pred, target);
            let sq = t.square(resid);
            let l = t.mean(sq);
            t.value(l).item()
        };
        let fd = finite_diff(&loss, &theta, 1e-5);

        let mut t = Tape::new();
        let xn = t.constant(Tensor::matrix(batch, d_in, x.clone()));
        let pred = tiny_mlp(&mut t, &theta, xn, d_in, h);
        let target = t.constant(Tensor::matrix(batch, 1, y.clone()));
        let resid = t.sub(pred, target);
        let sq = t.square(resid);
        let l = t.mean(sq);
        t.backward(l).unwrap();

        let mut analytic = Vec::new();
        for leaf in [1usize, 2, 3, 4] {
            analytic.extend_from_slice(t.grad(NodeId::from_raw(leaf)).data());
        }
        for (k, (&a, &b)) in analytic.iter().zip(&fd).enumerate() {
            assert!(rel_close(a, b, 1e-4), "param {k}: {a} vs {b}");
        }
    }
}

#[test]
fn input_gradient_of_linear_net_is_the_weight_vector() {
    for x0 in [-2.0, 0.3, 5.0] {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(1, 3, vec![x0, 1.0, -1.0]), false);
        let w = t.leaf(Tensor::matrix(3, 1, vec![0.5, -2.0, 3.25]), true);
        let y = t.matmul(x, w);
        let g = t.input_gradient(y, x).unwrap();
        assert_eq!(t.value(g).data(), &[0.5, -2.0, 3.25]);
    }
}

#[test]
fn input_gradient_of_square_at_two_is_four() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::matrix(1, 1, vec![2.0]), false);
    let y = t.square(x);
    let g = t.input_gradient(y, x).unwrap();
    assert_eq!(t.value(g).item(), 4.0);
}

#[test]
fn input_gradient_of_elu_net_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (d_in, h) = (4, 6);
    let theta: Vec<f64> = (0..mlp_param_len(d_in, h))
        .map(|_| rng.random::<f64>() - 0.5)
        .collect();
    let x0: Vec<f64> = (0..d_in).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();

    let eval = |x: &[f64]| -> f64 {
        let mut t = Tape::new();
        let xn = t.constant(Tensor::matrix(1, d_in, x.to_vec()));
        let out = tiny_mlp(&mut t, &theta, xn, d_in, h);
        t.value(out).item()
    };
    let fd = finite_diff(&eval, &x0, 1e-5);

    let mut t = Tape::new();
    let xn = t.leaf(Tensor::matrix(1, d_in, x0.clone()), false);
    let out = tiny_mlp(&mut t, &theta, xn, d_in, h);
    let g = t.input_gradient(out, xn).unwrap();
    for (k, (&a, &b)) in t.value(g).data().iter().zip(&fd).enumerate() {
        assert!(rel_close(a, b, 1e-4), "coord {k}: {a} vs {b}");
    }
}

/// Gradient-penalty value for a tiny one-head critic: mean((|dout/dz| - 1)^2).
fn gp_value(theta: &[f64], z: &[f64], batch: usize, d_in: usize, h: usize) -> f64 {
    let mut t = Tape::new();
    let zn = t.leaf(Tensor::matrix(batch, d_in, z.to_vec()), false);
    let out = tiny_mlp(&mut t, theta, zn, d_in, h);
    let g = t.input_gradient(out, zn).unwrap();
    let sq = t.square(g);
    let rs = t.row_sum(sq);
    let norm = t.sqrt(rs);
    let ones = t.constant(Tensor::matrix(batch, 1, vec![1.0; batch]));
    let d = t.sub(norm, ones);
    let p = t.square(d);
    let gp = t.mean(p);
    t.value(gp).item()
}

#[test]
fn gradient_penalty_parameter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (batch, d_in, h) = (5, 3, 4);
    let theta: Vec<f64> = (0..mlp_param_len(d_in, h))
        .map(|_| rng.random::<f64>() - 0.5)
        .collect();
    let z: Vec<f64> = (0..batch * d_in).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();

    let f = |params: &[f64]| gp_value(params, &z, batch, d_in, h);
    let fd = finite_diff(&f, &theta, 1e-5);

    let mut t = Tape::new();
    let zn = t.leaf(Tensor::matrix(batch, d_in, z.clone()), false);
    let out = tiny_mlp(&mut t, &theta, zn, d_in, h);
    let g = t.input_gradient(out, zn).unwrap();
    let sq = t.square(g);
    let rs = t.row_sum(sq);
    let norm = t.sqrt(rs);
    let ones = t.constant(Tensor::matrix(batch, 1, vec![1.0; batch]));
    let d = t.sub(norm, ones);
    let p = t.square(d);
    let gp = t.mean(p);
    t.backward(gp).unwrap();

    let mut analytic = Vec::new();
    for leaf in [1usize, 2, 3, 4] {
        analytic.extend_from_slice(t.grad(NodeId::from_raw(leaf)).data());
    }
    for (k, (&a, &b)) in analytic.iter().zip(&fd).enumerate() {
        assert!(rel_close(a, b, 1e-3), "param {k}: analytic {a} vs fd {b}");
    }
}

#[test]
fn input_gradient_reports_unsupported_ops_by_name() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]), false);
    let y = t.sigmoid(x);
    let err = t.input_gradient(y, x).unwrap_err();
    assert!(err.to_string().contains("sigmoid"), "{err}");
}
