//! Finite-difference verification of every tape operation's backward pass.

use fet_core::gradcheck::{self, Probe};
use fet_core::mat::Mat;
use fet_core::rng;
use fet_core::tape::{Tape, Var};

const TOL: f64 = 1e-6;
const H: f64 = 1e-5;

/// Checks d(loss)/d(inputs) for `build`, where the loss is a fixed random
/// weighting of the built node's entries (so every output entry matters).
fn fd_check(name: &str, inputs: &[Mat], build: impl Fn(&mut Tape, &[Var]) -> Var, seed: u64) {
    let mut inputs: Vec<Mat> = inputs.to_vec();
    let weights = {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| t.param(m.clone())).collect();
        let out = build(&mut t, &vars);
        let (r, c) = t.value(out).shape();
        rng::normal_mat(&mut rng::stream(rng::derive_seed(seed, &[77])), r, c)
    };
    let eval = |mats: &[Mat]| -> (f64, Option<Vec<Mat>>, Vec<(usize, usize)>) {
        let mut t = Tape::new();
        let vars: Vec<Var> = mats.iter().map(|m| t.param(m.clone())).collect();
        let out = build(&mut t, &vars);
        let w = t.leaf(weights.clone());
        let prod = t.mul(out, w);
        let loss = t.sum_all(prod);
        let shapes: Vec<(usize, usize)> = mats.iter().map(|m| m.shape()).collect();
        let value = t.scalar(loss);
        let grads = t.backward(loss);
        let collected: Vec<Mat> = vars
            .iter()
            .zip(mats)
            .map(|(&v, m)| grads.get(v).cloned().unwrap_or_else(|| Mat::zeros(m.rows(), m.cols())))
            .collect();
        (value, Some(collected), shapes)
    };
    let (_, analytic, shapes) = eval(&inputs);
    let analytic = analytic.unwrap();
    let report = gradcheck::check(&shapes, &analytic, 10, H, seed, |probe| match probe {
        Probe::Nudge { tensor, elem, delta } => {
            inputs[tensor].data_mut()[elem] += delta;
            0.0
        }
        Probe::Loss => eval(&inputs).0,
    });
    assert!(
        report.passes(TOL),
        "{name}: max rel err {} over {} probes",
        report.max_rel_err,
        report.probes
    );
}

fn randn(seed: u64, r: usize, c: usize) -> Mat {
    rng::normal_mat(&mut rng::stream(seed), r, c)
}

fn positive(seed: u64, r: usize, c: usize) -> Mat {
    randn(seed, r, c).map(|v| v.abs() + 0.5)
}

#[test]
fn binary_and_scalar_ops() {
    let a = randn(1, 3, 4);
    let b = randn(2, 3, 4);
    fd_check("add", &[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]), 10);
    fd_check("sub", &[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]), 11);
    fd_check("mul", &[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]), 12);
    fd_check("mul_self", &[a.clone()], |t, v| t.mul(v[0], v[0]), 13);
    fd_check("div", &[a.clone(), positive(3, 3, 4)], |t, v| t.div(v[0], v[1]), 14);
    fd_check("scale", &[a.clone()], |t, v| t.scale(v[0], -1.7), 15);
    let s = randn(4, 1, 1);
    fd_check("mul_scalar", &[a, s], |t, v| t.mul_scalar(v[0], v[1]), 16);
}

#[test]
fn matmul_and_structure_ops() {
    let a = randn(21, 3, 4);
    let b = randn(22, 4, 5);
    fd_check("matmul", &[a.clone(), b], |t, v| t.matmul(v[0], v[1]), 20);
    fd_check("transpose", &[a.clone()], |t, v| t.transpose(v[0]), 21);
    fd_check("reshape", &[a.clone()], |t, v| t.reshape(v[0], 4, 3), 22);
    fd_check("hcat", &[a.clone(), randn(23, 3, 2)], |t, v| t.hcat(v[0], v[1]), 23);
    fd_check(
        "vcat_blocked",
        &[randn(24, 4, 3), randn(25, 6, 3)],
        |t, v| t.vcat_blocked(v[0], v[1], 2, 3),
        24,
    );
    fd_check("slice_rows", &[a.clone()], |t, v| t.slice_rows(v[0], 1, 2), 25);
    fd_check("slice_cols", &[a.clone()], |t, v| t.slice_cols(v[0], 1, 3), 26);
    fd_check("tile_rows", &[randn(26, 2, 3)], |t, v| t.tile_rows(v[0], 3), 27);
    let x = randn(27, 4, 3);
    let row = randn(28, 1, 3);
    fd_check("add_row", &[x.clone(), row], |t, v| t.add_row(v[0], v[1]), 28);
    let col = randn(29, 4, 1);
    fd_check("mul_col", &[x, col], |t, v| t.mul_col(v[0], v[1]), 29);
}

#[test]
fn elementwise_nonlinearities() {
    let a = randn(31, 3, 5);
    fd_check("gelu", &[a.clone()], |t, v| t.gelu(v[0]), 30);
    fd_check("exp", &[a.clone()], |t, v| t.exp(v[0]), 31);
    fd_check("sin", &[a.clone()], |t, v| t.sin(v[0]), 32);
    fd_check("cos", &[a.clone()], |t, v| t.cos(v[0]), 33);
    fd_check("ln", &[positive(34, 3, 5)], |t, v| t.ln(v[0]), 34);
    fd_check("sqrt", &[positive(35, 3, 5)], |t, v| t.sqrt(v[0]), 35);
    fd_check("pow2.4", &[positive(36, 3, 5)], |t, v| t.pow_const(v[0], 2.4), 36);
    fd_check("pow0", &[positive(37, 3, 5)], |t, v| t.pow_const(v[0], 0.0), 37);
}

#[test]
fn reductions_and_normalizers() {
    let a = randn(41, 4, 6);
    fd_check("sum_all", &[a.clone()], |t, v| t.sum_all(v[0]), 40);
    fd_check("mean_all", &[a.clone()], |t, v| t.mean_all(v[0]), 41);
    fd_check("row_sums", &[a.clone()], |t, v| t.row_sums(v[0]), 42);
    fd_check("softmax_rows", &[a.clone()], |t, v| t.softmax_rows(v[0]), 43);
    fd_check("mse", &[a.clone(), randn(44, 4, 6)], |t, v| t.mse(v[0], v[1]), 44);
    let gamma = positive(45, 1, 6);
    let beta = randn(46, 1, 6);
    fd_check(
        "layer_norm",
        &[a, gamma, beta],
        |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
        45,
    );
}

#[test]
fn block_attention() {
    // 2 blocks, queries of 2 rows, keys/values of 3 rows, width 8, 2 heads.
    let q = randn(51, 4, 8);
    let k = randn(52, 6, 8);
    let v = randn(53, 6, 8);
    fd_check(
        "block_mha",
        &[q, k, v],
        |t, vars| t.block_mha(vars[0], vars[1], vars[2], 2, 2, 3),
        50,
    );
    // Self-attention shape (mq == mk) with a single head.
    let q = randn(54, 6, 4);
    let k = randn(55, 6, 4);
    let v = randn(56, 6, 4);
    fd_check(
        "block_mha_self",
        &[q, k, v],
        |t, vars| t.block_mha(vars[0], vars[1], vars[2], 1, 3, 3),
        51,
    );
    // Shared q=k=v through one node.
    let x = randn(57, 4, 6);
    fd_check(
        "block_mha_shared",
        &[x],
        |t, vars| t.block_mha(vars[0], vars[0], vars[0], 3, 2, 2),
        52,
    );
}
