//! User-specific temporal representation: target attention of the
//! candidate's interval over the user's own repeat intervals for the item.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParameterStore, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UtrmParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

impl UtrmParams {
    pub fn register<R: Rng>(store: &mut ParameterStore, d: usize, rng: &mut R) -> Self {
        Self {
            wq: store.add_glorot("utrm.wq", &[d, d], rng),
            wk: store.add_glorot("utrm.wk", &[d, d], rng),
            wv: store.add_glorot("utrm.wv", &[d, d], rng),
        }
    }

    pub fn lookup(store: &ParameterStore) -> Result<Self> {
        Ok(Self {
            wq: store.id("utrm.wq")?,
            wk: store.id("utrm.wk")?,
            wv: store.id("utrm.wv")?,
        })
    }
}

/// `target: [d]`, `history: [n, d]`, `mask: [n]`.
///
/// Weights are a masked softmax of `(Wq·target)·(Wk·h_k)/sqrt(d)` and the
/// output is the weighted sum of `Wv·h_k`. With `attend_target` the target
/// interval is appended to the attended set as an extra key and value.
/// Returns the zero vector when no history position is valid.
pub fn utrm_forward(
    tape: &mut Tape<'_>,
    target: Var,
    history: Var,
    mask: &[bool],
    params: &UtrmParams,
    attend_target: bool,
) -> Result<Var> {
    let d = tape.value(target).len();
    let hs = tape.value(history).shape().to_vec();
    if hs.len() != 2 || hs[1] != d || hs[0] != mask.len() || tape.value(target).ndim() != 1 {
        return Err(Error::shape("utrm", &[d], &hs));
    }
    if !mask.iter().any(|&m| m) {
        return Ok(tape.zeros(&[d]));
    }
    let (keys_in, mask) = if attend_target {
        let t = tape.reshape(target, &[1, d])?;
        let hist_t = tape.transpose(history)?;
        let t_t = tape.transpose(t)?;
        let joined = tape.concat(&[hist_t, t_t])?;
        let rows = tape.transpose(joined)?;
        let mut m = mask.to_vec();
        m.push(true);
        (rows, m)
    } else {
        (history, mask.to_vec())
    };
    let (wq, wk, wv) = (tape.param(params.wq), tape.param(params.wk), tape.param(params.wv));
    let q = tape.linear(target, wq, None)?;
    let k = tape.linear(keys_in, wk, None)?;
    let v = tape.linear(keys_in, wv, None)?;
    let sim = tape.matvec(k, q)?;
    let sim = tape.scale(sim, 1.0 / (d as f64).sqrt());
    let att = tape.masked_softmax(sim, &mask)?;
    let vt = tape.transpose(v)?;
    tape.matvec(vt, att)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_check, GradCheckOptions, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d: usize, seed: u64) -> (ParameterStore, UtrmParams) {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = UtrmParams::register(&mut store, d, &mut rng);
        (store, p)
    }

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn run(store: &ParameterStore, p: &UtrmParams, t: &Tensor, h: &Tensor, mask: &[bool], at: bool) -> Vec<f64> {
        let mut tape = Tape::new(store);
        let tv = tape.input(t.clone());
        let hv = tape.input(h.clone());
        let o = utrm_forward(&mut tape, tv, hv, mask, p, at).unwrap();
        tape.value(o).data().to_vec()
    }

    fn set_identity(store: &mut ParameterStore, p: &UtrmParams, d: usize) {
        for id in [p.wq, p.wk, p.wv] {
            *store.value_mut(id) = Tensor::eye(d);
        }
    }

    #[test]
    fn single_valid_position_returns_it() {
        let (mut store, p) = setup(3, 0);
        set_identity(&mut store, &p, 3);
        let t = Tensor::vector(vec![0.3, -1.0, 2.0]);
        let h = Tensor::matrix(2, 3, vec![9.0, 9.0, 9.0, 0.5, 0.25, -0.75]).unwrap();
        assert_eq!(run(&store, &p, &t, &h, &[false, true], false), vec![0.5, 0.25, -0.75]);
    }

    #[test]
    fn identical_history_ignores_target() {
        let (store, p) = setup(4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let row = rand_tensor(&[4], &mut rng).into_data();
        let h = Tensor::matrix(3, 4, [row.clone(), row.clone(), row.clone()].concat()).unwrap();
        let wv = store.value(p.wv);
        let expected: Vec<f64> = (0..4).map(|r| (0..4).map(|c| wv.at2(r, c) * row[c]).sum()).collect();
        for _ in 0..3 {
            let t = rand_tensor(&[4], &mut rng);
            let got = run(&store, &p, &t, &h, &[true; 3], false);
            for (g, e) in got.iter().zip(&expected) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }

    /// Explicit loop over the attention formulas.
    fn reference(store: &ParameterStore, p: &UtrmParams, t: &[f64], h: &[Vec<f64>], mask: &[bool]) -> Vec<f64> {
        let d = t.len();
        let mv = |w: &Tensor, x: &[f64]| -> Vec<f64> {
            (0..d).map(|r| (0..d).map(|c| w.at2(r, c) * x[c]).sum()).collect()
        };
        let q = mv(store.value(p.wq), t);
        let mut sims = vec![];
        for (k, hk) in h.iter().enumerate() {
            if mask[k] {
                let key = mv(store.value(p.wk), hk);
                let s: f64 = q.iter().zip(&key).map(|(a, b)| a * b).sum();
                sims.push((k, s / (d as f64).sqrt()));
            }
        }
        if sims.is_empty() {
            return vec![0.0; d];
        }
        let mx = sims.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = sims.iter().map(|s| (s.1 - mx).exp()).sum();
        let mut out = vec![0.0; d];
        for (k, s) in sims {
            let w = (s - mx).exp() / z;
            let val = mv(store.value(p.wv), &h[k]);
            for c in 0..d {
                out[c] += w * val[c];
            }
        }
        out
    }

    #[test]
    fn matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..100 {
            let (store, p) = setup(4, seed);
            let t = rand_tensor(&[4], &mut rng);
            let h = rand_tensor(&[3, 4], &mut rng);
            let mask: Vec<bool> = (0..3).map(|_| rng.gen_bool(0.7)).collect();
            let rows: Vec<Vec<f64>> = (0..3).map(|r| h.row(r).to_vec()).collect();
            let want = reference(&store, &p, t.data(), &rows, &mask);
            let got = run(&store, &p, &t, &h, &mask, false);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn target_in_keys_matches_reference_with_appended_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (store, p) = setup(4, 3);
        let t = rand_tensor(&[4], &mut rng);
        let h = rand_tensor(&[2, 4], &mut rng);
        let rows = vec![h.row(0).to_vec(), h.row(1).to_vec(), t.data().to_vec()];
        let want = reference(&store, &p, t.data(), &rows, &[false, true, true]);
        let got = run(&store, &p, &t, &h, &[false, true], true);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
        // Still zero for targets without history.
        assert_eq!(run(&store, &p, &t, &h, &[false, false], true), vec![0.0; 4]);
    }

    #[test]
    fn masked_positions_and_order_do_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (store, p) = setup(4, 4);
        let t = rand_tensor(&[4], &mut rng);
        let h = rand_tensor(&[4, 4], &mut rng);
        let mask = [false, true, true, true];
        let base = run(&store, &p, &t, &h, &mask, false);
        // Scramble the masked row.
        let mut h2 = h.clone();
        h2.data_mut()[..4].copy_from_slice(&[50.0, -3.0, 8.0, 1.0]);
        let moved = run(&store, &p, &t, &h2, &mask, false);
        // Reverse the rows and mask.
        let mut rev = Vec::new();
        for r in (0..4).rev() {
            rev.extend_from_slice(h.row(r));
        }
        let h3 = Tensor::matrix(4, 4, rev).unwrap();
        let perm = run(&store, &p, &t, &h3, &[true, true, true, false], false);
        for k in 0..4 {
            assert!((base[k] - moved[k]).abs() < 1e-12);
            assert!((base[k] - perm[k]).abs() < 1e-12);
        }
        // Left padding: more masked rows change nothing.
        let mut padded = vec![0.0; 8];
        padded.extend_from_slice(h.data());
        let h4 = Tensor::matrix(6, 4, padded).unwrap();
        let pad = run(&store, &p, &t, &h4, &[false, false, false, true, true, true], false);
        for k in 0..4 {
            assert!((base[k] - pad[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn small_query_scale_gives_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (mut store, p) = setup(3, 5);
        let t = rand_tensor(&[3], &mut rng);
        let h = rand_tensor(&[3, 3], &mut rng);
        store.value_mut(p.wq).data_mut().iter_mut().for_each(|w| *w *= 1e-9);
        let got = run(&store, &p, &t, &h, &[true; 3], false);
        let wv = store.value(p.wv);
        for r in 0..3 {
            let mean: f64 = (0..3).map(|k| (0..3).map(|c| wv.at2(r, c) * h.at2(k, c)).sum::<f64>()).sum::<f64>() / 3.0;
            assert!((got[r] - mean).abs() < 1e-8);
        }
    }

    #[test]
    fn empty_history_is_zero() {
        let (store, p) = setup(2, 0);
        let t = Tensor::vector(vec![1.0, 2.0]);
        let h = Tensor::zeros(&[3, 2]);
        assert_eq!(run(&store, &p, &t, &h, &[false; 3], false), vec![0.0, 0.0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for at in [false, true] {
            let mut store = ParameterStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let p = UtrmParams::register(&mut store, 4, &mut rng);
            let table = store.add_glorot("emb", &[6, 4], &mut rng);
            let opts = GradCheckOptions {
                coords_per_param: None,
                ..Default::default()
            };
            let report = finite_difference_check(&store, &opts, |tape| {
                let t = tape.gather(table, &[5])?;
                let t = tape.reshape(t, &[4])?;
                let h = tape.gather(table, &[0, 1, 2, 3])?;
                let o = utrm_forward(tape, t, h, &[false, true, true, true], &p, at)?;
                let w = tape.input(Tensor::vector(vec![0.3, -0.7, 1.1, 0.2]));
                tape.dot(o, w)
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "{report:?}");
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let (store, p) = setup(3, 0);
        let mut tape = Tape::new(&store);
        let t = tape.input(Tensor::vector(vec![0.0; 3]));
        let h = tape.input(Tensor::zeros(&[2, 4]));
        assert!(utrm_forward(&mut tape, t, h, &[true, true], &p, false).is_err());
    }
}
