// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tape gradients against central finite differences.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use somnus_ad::{check_gradients, AdError, GradCheckConfig, Graph, Tensor, Var};

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// Reduces `v` to a scalar through fixed random weights so every entry gets a
/// distinct cotangent.
fn weighted_sum(g: &mut Graph, v: Var, weights: &Tensor) -> Result<Var, AdError> {
    let w = g.leaf(weights.clone());
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

#[derive(Clone, Copy, Debug)]
enum Prim {
    MatMul,
    Add,
    AddRow,
    Sub,
    Mul,
    MulScalar,
    Concat,
    Slice,
    Mean,
    Square,
    Tanh,
    Sigmoid,
    Elu,
    Softplus,
    Scale,
    Offset,
    Lstm,
}

const ALL: [Prim; 17] = [
    Prim::MatMul,
    Prim::Add,
    Prim::AddRow,
    Prim::Sub,
    Prim::Mul,
    Prim::MulScalar,
    Prim::Concat,
    Prim::Slice,
    Prim::Mean,
    Prim::Square,
    Prim::Tanh,
    Prim::Sigmoid,
    Prim::Elu,
    Prim::Softplus,
    Prim::Scale,
    Prim::Offset,
    Prim::Lstm,
];

fn check_primitive(prim: Prim, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rng.random_range(1..4);
    let c = rng.random_range(1..4);
    let k = rng.random_range(1..4);
    let (inputs, out_shape): (Vec<Tensor>, (usize, usize)) = match prim {
        Prim::MatMul => (
            vec![
                random_tensor(&mut rng, r, k, 2.0),
                random_tensor(&mut rng, k, c, 2.0),
            ],
            (r, c),
        ),
        Prim::AddRow => (
            vec![
                random_tensor(&mut rng, r, c, 2.0),
                random_tensor(&mut rng, 1, c, 2.0),
            ],
            (r, c),
        ),
        Prim::MulScalar => (
            vec![
                random_tensor(&mut rng, r, c, 2.0),
                random_tensor(&mut rng, 1, 1, 2.0),
            ],
            (r, c),
        ),
        Prim::Add | Prim::Sub | Prim::Mul => (
            vec![
                random_tensor(&mut rng, r, c, 2.0),
                random_tensor(&mut rng, r, c, 2.0),
            ],
            (r, c),
        ),
        Prim::Concat => (
            vec![
                random_tensor(&mut rng, r, c, 2.0),
                random_tensor(&mut rng, r, k, 2.0),
            ],
            (r, c + k),
        ),
        Prim::Slice => (vec![random_tensor(&mut rng, r, c + k, 2.0)], (r, k)),
        Prim::Mean => (vec![random_tensor(&mut rng, r, c, 2.0)], (1, 1)),
        Prim::Lstm => {
            let (i, h) = (k, c);
            (
                vec![
                    random_tensor(&mut rng, r, i, 1.0),
                    random_tensor(&mut rng, r, h, 1.0),
                    random_tensor(&mut rng, r, h, 1.0),
                    random_tensor(&mut rng, i, 4 * h, 1.0),
                    random_tensor(&mut rng, h, 4 * h, 1.0),
                    random_tensor(&mut rng, 1, 4 * h, 1.0),
                ],
                (r, 2 * h),
            )
        }
        _ => (vec![random_tensor(&mut rng, r, c, 2.0)], (r, c)),
    };
    let weights = random_tensor(&mut rng, out_shape.0, out_shape.1, 1.0);
    let report = check_gradients(
        |g, v| {
            let out = match prim {
                Prim::MatMul => g.matmul(v[0], v[1])?,
                Prim::Add | Prim::AddRow => g.add(v[0], v[1])?,
                Prim::Sub => g.sub(v[0], v[1])?,
                Prim::Mul | Prim::MulScalar => g.mul(v[0], v[1])?,
                Prim::Concat => g.concat_cols(&[v[0], v[1]])?,
                Prim::Slice => g.slice_cols(v[0], c, c + k)?,
                Prim::Mean => g.mean(v[0]),
                Prim::Square => g.square(v[0]),
                Prim::Tanh => g.tanh(v[0]),
                Prim::Sigmoid => g.sigmoid(v[0]),
                Prim::Elu => g.elu(v[0]),
                Prim::Softplus => g.softplus(v[0]),
                Prim::Scale => g.scale(v[0], -1.7),
                Prim::Offset => g.offset(v[0], 0.3),
                Prim::Lstm => g.lstm_cell(v[0], v[1], v[2], v[3], v[4], v[5])?,
            };
            weighted_sum(g, out, &weights)
        },
        &inputs,
        GradCheckConfig::default(),
    )
    .unwrap();
    report.max_rel_error
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn every_primitive_matches_finite_differences(seed in any::<u64>()) {
        for prim in ALL {
            let err = check_primitive(prim, seed);
            prop_assert!(err < 1e-4, "{prim:?} seed {seed}: rel error {err}");
        }
    }
}

#[test]
fn two_layer_tanh_net_with_twenty_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let x = random_tensor(&mut rng, 1, 20, 1.0);
    let w1 = random_tensor(&mut rng, 20, 8, 0.5);
    let b1 = random_tensor(&mut rng, 1, 8, 0.5);
    let w2 = random_tensor(&mut rng, 8, 1, 0.5);
    let report = check_gradients(
        |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add(h, v[2])?;
            let h = g.tanh(h);
            let o = g.matmul(h, v[3])?;
            let o = g.tanh(o);
            Ok(g.sum(o))
        },
        &[x, w1, b1, w2],
        GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.max_rel_error_for(0) < 1e-4);
    assert!(
        report.passes(1e-4),
        "max rel error {}",
        report.max_rel_error
    );
    assert_eq!(report.entries.len(), 20 + 160 + 8 + 8);
}

#[test]
fn lstm_cell_weight_blocks_individually() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (batch, input, hidden) = (3, 5, 4);
    let inputs = vec![
        random_tensor(&mut rng, batch, input, 1.0),
        random_tensor(&mut rng, batch, hidden, 1.0),
        random_tensor(&mut rng, batch, hidden, 1.0),
        random_tensor(&mut rng, input, 4 * hidden, 0.8),
        random_tensor(&mut rng, hidden, 4 * hidden, 0.8),
        random_tensor(&mut rng, 1, 4 * hidden, 0.8),
    ];
    let weights = random_tensor(&mut rng, batch, 2 * hidden, 1.0);
    let report = check_gradients(
        |g, v| {
            let out = g.lstm_cell(v[0], v[1], v[2], v[3], v[4], v[5])?;
            weighted_sum(g, out, &weights)
        },
        &inputs,
        GradCheckConfig::default(),
    )
    .unwrap();
    // input-side (W) and recurrent (U) blocks for the four gates
    for input_idx in [3, 4] {
        for gate in 0..4 {
            let err = report.max_rel_error_in_cols(
                input_idx,
                4 * hidden,
                gate * hidden,
                (gate + 1) * hidden,
            );
            assert!(err < 1e-4, "input {input_idx} gate {gate}: {err}");
        }
    }
    assert!(report.passes(1e-4), "{}", report.max_rel_error);
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn fused_lstm_cell_equals_unfused_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..20 {
        let (batch, input, hidden) = (
            rng.random_range(1..5),
            rng.random_range(1..6),
            rng.random_range(1..6),
        );
        let x = random_tensor(&mut rng, batch, input, 2.0);
        let h = random_tensor(&mut rng, batch, hidden, 1.0);
        let c = random_tensor(&mut rng, batch, hidden, 1.0);
        let w = random_tensor(&mut rng, input, 4 * hidden, 1.0);
        let u = random_tensor(&mut rng, hidden, 4 * hidden, 1.0);
        let b = random_tensor(&mut rng, 1, 4 * hidden, 1.0);

        let mut g = Graph::new();
        let vars: Vec<Var> = [&x, &h, &c, &w, &u, &b]
            .iter()
            .map(|t| g.leaf((*t).clone()))
            .collect();
        let out = g
            .lstm_cell(vars[0], vars[1], vars[2], vars[3], vars[4], vars[5])
            .unwrap();
        let fused = g.value(out).clone();

        for r in 0..batch {
            for j in 0..hidden {
                let pre = |gate: usize| {
                    let col = gate * hidden + j;
                    let mut s = b.get(0, col);
                    for p in 0..input {
                        s += x.get(r, p) * w.get(p, col);
                    }
                    for p in 0..hidden {
                        s += h.get(r, p) * u.get(p, col);
                    }
                    s
                };
                let (i_g, f_g, g_g, o_g) = (
                    sigmoid(pre(0)),
                    sigmoid(pre(1)),
                    pre(2).tanh(),
                    sigmoid(pre(3)),
                );
                let c_new = f_g * c.get(r, j) + i_g * g_g;
                let h_new = o_g * c_new.tanh();
                assert!((fused.get(r, j) - h_new).abs() < 1e-10);
                assert!((fused.get(r, hidden + j) - c_new).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn backward_is_pure() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let x = g.leaf(random_tensor(&mut rng, 4, 3, 1.0));
    let w = g.leaf(random_tensor(&mut rng, 3, 2, 1.0));
    let y = g.matmul(x, w).unwrap();
    let y = g.elu(y);
    let y = g.square(y);
    let y = g.mean(y);
    let first = g.backward(y).unwrap();
    let second = g.backward(y).unwrap();
    assert_eq!(first.get(x), second.get(x));
    assert_eq!(first.get(w), second.get(w));
}
