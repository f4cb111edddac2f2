use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces any tensor to a scalar through a fixed random projection.
fn project(tape: &mut Tape<'_>, x: Var, seed: u64) -> Result<Var, Error> {
    let n = tape.value(x).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = tape.input(rand_tensor(&mut rng, &[n]));
    let flat = tape.reshape(x, &[n])?;
    tape.dot(flat, r)
}

fn check_all(store: &ParameterStore, f: impl FnMut(&mut Tape<'_>) -> Result<Var, Error>) -> f64 {
    let opts = GradCheckOptions {
        coords_per_param: None,
        ..GradCheckOptions::default()
    };
    finite_difference_check(store, &opts, f).unwrap().max_rel_error
}

fn loop_conv1d(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (len, cin) = (x.shape()[0], x.shape()[1]);
    let (width, cout) = (w.shape()[0], w.shape()[2]);
    let left = (width - 1) as isize / 2;
    let mut out = vec![0.0; len * cout];
    for t in 0..len as isize {
        for o in 0..cout {
            let mut acc = b.data()[o];
            for k in 0..width as isize {
                let s = t + k - left;
                if s < 0 || s >= len as isize {
                    continue;
                }
                for c in 0..cin {
                    acc += w.data()[(k as usize * cin + c) * cout + o] * x.data()[s as usize * cin + c];
                }
            }
            out[t as usize * cout + o] = acc;
        }
    }
    out
}

fn loop_conv2d(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (rows, cols, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, cout) = (w.shape()[0], w.shape()[1], w.shape()[3]);
    let (ph, pw) = ((kh as isize - 1) / 2, (kw as isize - 1) / 2);
    let mut out = vec![0.0; rows * cols * cout];
    for r in 0..rows as isize {
        for c in 0..cols as isize {
            for o in 0..cout {
                let mut acc = b.data()[o];
                for i in 0..kh as isize {
                    for j in 0..kw as isize {
                        let (sr, sc) = (r + i - ph, c + j - pw);
                        if sr < 0 || sc < 0 || sr >= rows as isize || sc >= cols as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            let wi = ((i as usize * kw + j as usize) * cin + ci) * cout + o;
                            let xi = (sr as usize * cols + sc as usize) * cin + ci;
                            acc += w.data()[wi] * x.data()[xi];
                        }
                    }
                }
                out[(r as usize * cols + c as usize) * cout + o] = acc;
            }
        }
    }
    out
}

#[test]
fn softmax_uniform_and_masked() {
    let store = ParameterStore::new();
    let mut tape = Tape::new(&store);
    let x = tape.input(Tensor::vector(vec![0.0, 0.0, 0.0]));
    let y = tape.masked_softmax(x, &[true, true, true]).unwrap();
    for v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = tape.input(Tensor::vector(vec![1.3, 50.0, 1.3]));
    let y = tape.masked_softmax(x, &[true, false, true]).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.0, 0.5]);

    let x = tape.input(Tensor::vector(vec![1.0, 2.0]));
    let y = tape.masked_softmax(x, &[false, false]).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
}

#[test]
fn conv1d_width_two_averaging() {
    let store = ParameterStore::new();
    let mut tape = Tape::new(&store);
    let x = tape.input(Tensor::matrix(4, 1, vec![1.0, 3.0, 5.0, 9.0]).unwrap());
    let w = tape.input(Tensor::new(vec![2, 1, 1], vec![0.5, 0.5]).unwrap());
    let b = tape.input(Tensor::vector(vec![0.0]));
    let y = tape.conv1d(x, w, b).unwrap();
    // Right edge reads one zero of same-padding.
    assert_eq!(tape.value(y).data(), &[2.0, 4.0, 7.0, 4.5]);
    let expected = loop_conv1d(tape.value(x), tape.value(w), tape.value(b));
    assert_eq!(tape.value(y).data(), expected.as_slice());
}

#[test]
fn conv_matches_loop_reference_on_random_inputs() {
    let store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..100 {
        let mut tape = Tape::new(&store);
        let len = rng.gen_range(1..7);
        let cin = rng.gen_range(1..4);
        let cout = rng.gen_range(1..4);
        let width = rng.gen_range(1..5);
        let x = tape.input(rand_tensor(&mut rng, &[len, cin]));
        let w = tape.input(rand_tensor(&mut rng, &[width, cin, cout]));
        let b = tape.input(rand_tensor(&mut rng, &[cout]));
        let y = tape.conv1d(x, w, b).unwrap();
        let reference = loop_conv1d(tape.value(x), tape.value(w), tape.value(b));
        let diff = tape
            .value(y)
            .data()
            .iter()
            .zip(&reference)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-12, "conv1d case {case}: {diff}");

        let (rows, cols) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let (kh, kw) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let x = tape.input(rand_tensor(&mut rng, &[rows, cols, cin]));
        let w = tape.input(rand_tensor(&mut rng, &[kh, kw, cin, cout]));
        let b = tape.input(rand_tensor(&mut rng, &[cout]));
        let y = tape.conv2d(x, w, b).unwrap();
        let reference = loop_conv2d(tape.value(x), tape.value(w), tape.value(b));
        let diff = tape
            .value(y)
            .data()
            .iter()
            .zip(&reference)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-12, "conv2d case {case}: {diff}");
    }
}

#[test]
fn linear_map_gradient_is_outer_product() {
    let mut store = ParameterStore::new();
    let w = store.add("w", Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0]).unwrap());
    let mut tape = Tape::new(&store);
    let x = tape.input(Tensor::vector(vec![0.3, -1.0, 2.0]));
    let wv = tape.param(w);
    let y = tape.matvec(wv, x).unwrap();
    let ones = tape.input(Tensor::vector(vec![1.0, 1.0]));
    let loss = tape.dot(y, ones).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[0.3, -1.0, 2.0, 0.3, -1.0, 2.0]);
}

#[test]
fn sigmoid_at_zero_has_quarter_gradient() {
    let mut store = ParameterStore::new();
    let p = store.add("p", Tensor::scalar(0.0));
    let mut tape = Tape::new(&store);
    let v = tape.param(p);
    let s = tape.sigmoid(v);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(p).unwrap().item(), 0.25);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut store = ParameterStore::new();
    let p = store.add("p", Tensor::vector(vec![1.0, 2.0]));
    let mut tape = Tape::new(&store);
    let v = tape.param(p);
    assert!(matches!(tape.backward(v), Err(Error::NotScalar(_))));
}

#[test]
fn shape_error_names_op_and_shapes() {
    let store = ParameterStore::new();
    let mut tape = Tape::new(&store);
    let a = tape.input(Tensor::zeros(&[2, 3]));
    let b = tape.input(Tensor::zeros(&[2, 3]));
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn relu_and_max_subgradients() {
    let mut store = ParameterStore::new();
    let p = store.add("p", Tensor::matrix(3, 1, vec![0.0, 2.0, 2.0]).unwrap());
    let mut tape = Tape::new(&store);
    let v = tape.param(p);
    let r = tape.relu(v);
    let m = tape.masked_max(r, &[true, true, true]).unwrap();
    let ones = tape.input(Tensor::vector(vec![1.0]));
    let l = tape.dot(m, ones).unwrap();
    let g = tape.backward(l).unwrap();
    // First maximal cell wins the tie.
    assert_eq!(g.get(p).unwrap().data(), &[0.0, 1.0, 0.0]);

    let mut tape = Tape::new(&store);
    let v = tape.param(p);
    let r = tape.relu(v);
    let l = project(&mut tape, r, 1).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(p).unwrap().data()[0], 0.0);
}

#[test]
fn masked_pools_with_no_valid_cells_are_zero() {
    let store = ParameterStore::new();
    let mut tape = Tape::new(&store);
    let x = tape.input(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let mean = tape.masked_mean(x, &[false, false]).unwrap();
    let max = tape.masked_max(x, &[false, false]).unwrap();
    assert_eq!(tape.value(mean).data(), &[0.0, 0.0]);
    assert_eq!(tape.value(max).data(), &[0.0, 0.0]);
    let mean = tape.masked_mean(x, &[false, true]).unwrap();
    assert_eq!(tape.value(mean).data(), &[3.0, 4.0]);
}

#[test]
fn identity_loss_has_zero_fd_error() {
    let mut store = ParameterStore::new();
    let p = store.add("p", Tensor::scalar(0.0));
    let err = check_all(&store, |t| Ok(t.param(p)));
    assert_eq!(err, 0.0);
}

#[test]
fn quadratic_loss_fd_error_is_tiny() {
    let mut store = ParameterStore::new();
    let p = store.add("p", Tensor::vector(vec![0.3, -1.2, 2.5]));
    let err = check_all(&store, |t| {
        let v = t.param(p);
        t.dot(v, v)
    });
    assert!(err < 1e-8, "{err}");
    // Analytic gradient is exactly 2θ.
    let mut tape = Tape::new(&store);
    let v = tape.param(p);
    let l = tape.dot(v, v).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(p).unwrap().data(), &[0.6, -2.4, 5.0]);
}

#[test]
fn every_op_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..8u64 {
        let (n, k, m) = (rng.gen_range(1..4), rng.gen_range(2..5), rng.gen_range(1..4));
        let mut store = ParameterStore::new();
        let a = store.add("a", rand_tensor(&mut rng, &[n, k]));
        let b = store.add("b", rand_tensor(&mut rng, &[k, m]));
        let c = store.add("c", rand_tensor(&mut rng, &[m, k]));
        let v = store.add("v", rand_tensor(&mut rng, &[k]));
        let bias = store.add("bias", rand_tensor(&mut rng, &[m]));
        let emb = store.add_padded_table("emb", 5, k, &mut rng);
        let kw = store.add("kw", rand_tensor(&mut rng, &[3, k, m]));
        let k2 = store.add("k2", rand_tensor(&mut rng, &[2, 3, k, m]));
        let mask: Vec<bool> = (0..n).map(|i| i == 0 || rng.gen_bool(0.6)).collect();
        let col_mask: Vec<bool> = (0..m).map(|i| i == 0 || rng.gen_bool(0.6)).collect();

        let err = check_all(&store, |t| {
            let (av, bv, cv, vv, biasv) = (t.param(a), t.param(b), t.param(c), t.param(v), t.param(bias));
            let ab = t.matmul(av, bv)?; // n x m
            let ac = t.matmul_nt(av, cv)?; // n x m
            let s = t.add(ab, ac)?;
            let d = t.sub(s, ab)?;
            let e = t.mul(d, s)?;
            let sm = t.masked_softmax(e, &col_mask)?;
            let th = t.tanh(sm);
            let sg = t.sigmoid(e);
            let mix = t.add_n(&[th, sg, e])?;
            let lin = t.linear(av, cv, Some(biasv))?; // n x m
            let r = t.relu(lin);
            let cat = t.concat(&[mix, r])?; // n x 2m
            let tr = t.transpose(cat)?;
            let tr2 = t.transpose(tr)?;
            let masked = t.cell_mask(tr2, &mask)?;
            let mean = t.masked_mean(masked, &mask)?;
            let max = t.masked_max(tr2, &mask)?;
            let mv = t.matvec(av, vv)?;
            let row = t.row(av, 0)?;
            let st = t.stack(&[row, vv])?;
            let g = t.gather(emb, &[0, 3, 1, 3])?;
            let kwv = t.param(kw);
            let conv = t.conv1d(g, kwv, biasv)?;
            let grid = t.reshape(g, &[2, 2, k])?;
            let k2v = t.param(k2);
            let c2 = t.conv2d(grid, k2v, biasv)?;
            let scaled = t.scale(mean, 0.7);
            let parts = [
                project(t, scaled, seed)?,
                project(t, max, seed + 1)?,
                project(t, mv, seed + 2)?,
                project(t, st, seed + 3)?,
                project(t, conv, seed + 4)?,
                project(t, c2, seed + 5)?,
            ];
            let total = t.add_n(&parts)?;
            let logit = t.scale(total, 0.3);
            t.bce_with_logit(logit, (seed % 2) as f64)
        });
        assert!(err < 1e-6, "seed {seed}: {err}");
    }
}

#[test]
fn gather_never_updates_padding_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParameterStore::new();
    let emb = store.add_padded_table("emb", 4, 2, &mut rng);
    let mut tape = Tape::new(&store);
    let g = tape.gather(emb, &[0, 2, 0]).unwrap();
    let l = project(&mut tape, g, 0).unwrap();
    let grads = tape.backward(l).unwrap();
    assert_eq!(&grads.get(emb).unwrap().data()[..2], &[0.0, 0.0]);
    assert!(tape.gather(emb, &[4]).is_err());
}

#[test]
fn bce_clamps_and_matches_closed_form() {
    let store = ParameterStore::new();
    let mut tape = Tape::new(&store);
    let z = tape.input(Tensor::scalar(0.0));
    let l = tape.bce_with_logit(z, 1.0).unwrap();
    assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    let z = tape.input(Tensor::scalar(-1e4));
    let l = tape.bce_with_logit(z, 1.0).unwrap();
    assert!((tape.value(l).item() + BCE_EPS.ln()).abs() < 1e-9);
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParameterStore::new();
        let w = store.add_glorot("w", &[4, 3], &mut rng);
        let mut tape = Tape::new(&store);
        let x = tape.input(rand_tensor(&mut rng, &[5, 3]));
        let wv = tape.param(w);
        let y = tape.linear(x, wv, None).unwrap();
        let y = tape.dropout(y, 0.5, &mut rng);
        let l = project(&mut tape, y, 2).unwrap();
        let g = tape.backward(l).unwrap();
        (tape.value(l).item().to_bits(), g.get(w).unwrap().clone())
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(
        values in prop::collection::vec(-30.0f64..30.0, 1..12),
        mask_bits in prop::collection::vec(any::<bool>(), 12),
    ) {
        let n = values.len();
        let mut mask: Vec<bool> = mask_bits[..n].to_vec();
        mask[0] = true;
        let store = ParameterStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::vector(values));
        let y = tape.masked_softmax(x, &mask).unwrap();
        let out = tape.value(y).data();
        prop_assert!(out.iter().all(|&p| p >= 0.0));
        prop_assert!((out.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        for (p, m) in out.iter().zip(&mask) {
            if !m { prop_assert_eq!(*p, 0.0); }
        }
    }
}
