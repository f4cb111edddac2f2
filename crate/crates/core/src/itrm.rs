//! Item-specific temporal representation: multi-scale 2-D convolutions over
//! the embedded repeat interval matrix, mean and max pooling, and an MLP.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{Dropout, Mlp};
use crate::numerics::{ParamId, ParameterStore, Tape, Var};

/// Kernel shapes of the three scales.
pub const KERNELS: [(usize, usize); 3] = [(1, 1), (1, 3), (3, 1)];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItrmParams {
    pub convs: Vec<(ParamId, ParamId)>,
    pub mlp: Mlp,
    pub channels: usize,
}

impl ItrmParams {
    pub fn register<R: Rng>(store: &mut ParameterStore, d: usize, channels: usize, rng: &mut R) -> Self {
        let convs = KERNELS
            .iter()
            .enumerate()
            .map(|(k, &(kh, kw))| {
                let w = store.add_glorot(&format!("itrm.conv{k}.w"), &[kh, kw, d, channels], rng);
                let b = store.add_zeros(&format!("itrm.conv{k}.b"), &[channels]);
                (w, b)
            })
            .collect();
        let mlp = Mlp::register(store, "itrm.mlp", &[KERNELS.len() * 2 * channels, d, d], rng);
        Self { convs, mlp, channels }
    }

    pub fn lookup(store: &ParameterStore) -> Result<Self> {
        let convs: Vec<(ParamId, ParamId)> = (0..KERNELS.len())
            .map(|k| Ok((store.id(&format!("itrm.conv{k}.w"))?, store.id(&format!("itrm.conv{k}.b"))?)))
            .collect::<Result<_>>()?;
        let channels = store.value(convs[0].1).len();
        Ok(Self {
            convs,
            mlp: Mlp::lookup(store, "itrm.mlp", 2)?,
            channels,
        })
    }
}

/// Pooled per-scale features `[mean_0; max_0; mean_1; max_1; ...]`.
///
/// `cells: [rows, cols, d]` with `mask` over the `rows * cols` cells.
/// Masked cells are zeroed before convolution and excluded from pooling.
pub fn itrm_pooled(tape: &mut Tape<'_>, cells: Var, mask: &[bool], params: &ItrmParams) -> Result<Var> {
    let shape = tape.value(cells).shape().to_vec();
    if shape.len() != 3 || shape[0] * shape[1] != mask.len() {
        return Err(Error::shape("itrm", &shape, &[mask.len()]));
    }
    if shape[0] == 0 {
        return Ok(tape.zeros(&[KERNELS.len() * 2 * params.channels]));
    }
    let x = tape.cell_mask(cells, mask)?;
    let mut parts = Vec::with_capacity(2 * params.convs.len());
    for &(w, b) in &params.convs {
        let (wv, bv) = (tape.param(w), tape.param(b));
        let y = tape.conv2d(x, wv, bv)?;
        parts.push(tape.masked_mean(y, mask)?);
        parts.push(tape.masked_max(y, mask)?);
    }
    tape.concat(&parts)
}

/// Item representation `[d]`; an empty matrix yields `MLP(0)`.
pub fn itrm_forward(
    tape: &mut Tape<'_>,
    cells: Var,
    mask: &[bool],
    params: &ItrmParams,
    drop: Option<&mut Dropout>,
) -> Result<Var> {
    let pooled = itrm_pooled(tape, cells, mask, params)?;
    params.mlp.forward(tape, pooled, drop)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_check, GradCheckOptions, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d: usize, f: usize, seed: u64) -> (ParameterStore, ItrmParams) {
        let mut store = ParameterStore::new();
        let p = ItrmParams::register(&mut store, d, f, &mut ChaCha8Rng::seed_from_u64(seed));
        (store, p)
    }

    fn rand_cells(r: usize, c: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(vec![r, c, d], (0..r * c * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn run(store: &ParameterStore, p: &ItrmParams, x: &Tensor, mask: &[bool]) -> (Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new(store);
        let xv = tape.input(x.clone());
        let pooled = itrm_pooled(&mut tape, xv, mask, p).unwrap();
        let out = p.mlp.forward(&mut tape, pooled, None).unwrap();
        (tape.value(pooled).data().to_vec(), tape.value(out).data().to_vec())
    }

    fn mlp_of(store: &ParameterStore, p: &ItrmParams, x: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new(store);
        let xv = tape.input(Tensor::vector(x.to_vec()));
        let o = p.mlp.forward(&mut tape, xv, None).unwrap();
        tape.value(o).data().to_vec()
    }

    #[test]
    fn zero_input_gives_mlp_of_zero() {
        let (store, p) = setup(3, 2, 0);
        let (pooled, out) = run(&store, &p, &Tensor::zeros(&[2, 3, 3]), &[true; 6]);
        assert!(pooled.iter().all(|&v| v == 0.0));
        assert_eq!(out, mlp_of(&store, &p, &vec![0.0; 12]));
        let (pooled, out) = run(&store, &p, &Tensor::zeros(&[0, 3, 3]), &[]);
        assert_eq!(pooled.len(), 12);
        assert_eq!(out, mlp_of(&store, &p, &vec![0.0; 12]));
    }

    #[test]
    fn single_cell_mean_equals_max() {
        let (store, p) = setup(2, 3, 1);
        let x = Tensor::new(vec![1, 1, 2], vec![0.4, -0.9]).unwrap();
        let (pooled, _) = run(&store, &p, &x, &[true]);
        let w = store.value(p.convs[0].0);
        for ch in 0..3 {
            let direct = w.data()[ch] * 0.4 + w.data()[3 + ch] * -0.9;
            assert!((pooled[ch] - direct).abs() < 1e-15);
            assert_eq!(pooled[ch], pooled[3 + ch]);
        }
    }

    /// Explicit convolution and pooling for one scale.
    fn loop_scale(x: &Tensor, mask: &[bool], w: &Tensor, b: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let (r, c, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (kh, kw, cout) = (w.shape()[0], w.shape()[1], w.shape()[3]);
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        let xin = |i: isize, j: isize, ch: usize| -> f64 {
            if i < 0 || j < 0 || i >= r as isize || j >= c as isize || !mask[i as usize * c + j as usize] {
                0.0
            } else {
                x.data()[(i as usize * c + j as usize) * cin + ch]
            }
        };
        let mut mean = vec![0.0; cout];
        let mut max = vec![f64::NEG_INFINITY; cout];
        let valid = mask.iter().filter(|&&m| m).count();
        for i in 0..r {
            for j in 0..c {
                if !mask[i * c + j] {
                    continue;
                }
                for o in 0..cout {
                    let mut s = b.data()[o];
                    for a in 0..kh {
                        for e in 0..kw {
                            for ch in 0..cin {
                                let wi = ((a * kw + e) * cin + ch) * cout + o;
                                s += w.data()[wi] * xin(i as isize + a as isize - ph as isize, j as isize + e as isize - pw as isize, ch);
                            }
                        }
                    }
                    mean[o] += s / valid as f64;
                    max[o] = max[o].max(s);
                }
            }
        }
        if valid == 0 {
            max.fill(0.0);
        }
        (mean, max)
    }

    #[test]
    fn matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for seed in 0..100 {
            let (mut store, p) = setup(3, 2, seed);
            for &(_, b) in &p.convs {
                store.value_mut(b).data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
            }
            let (r, c) = (rng.gen_range(1..4), rng.gen_range(1..5));
            let x = rand_cells(r, c, 3, &mut rng);
            let mask: Vec<bool> = (0..r * c).map(|_| rng.gen_bool(0.8)).collect();
            let (pooled, _) = run(&store, &p, &x, &mask);
            for (k, &(w, b)) in p.convs.iter().enumerate() {
                let (mean, max) = loop_scale(&x, &mask, store.value(w), store.value(b));
                for o in 0..2 {
                    assert!((pooled[k * 4 + o] - mean[o]).abs() < 1e-12);
                    assert!((pooled[k * 4 + 2 + o] - max[o]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn masked_cells_never_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (store, p) = setup(3, 2, 4);
        let x = rand_cells(2, 4, 3, &mut rng);
        let mask = [false, false, true, true, false, true, true, true];
        let (_, base) = run(&store, &p, &x, &mask);
        let mut y = x.clone();
        for cell in [0usize, 1, 4] {
            for ch in 0..3 {
                y.data_mut()[cell * 3 + ch] = rng.gen_range(-40.0..40.0);
            }
        }
        let (_, moved) = run(&store, &p, &y, &mask);
        for (a, b) in base.iter().zip(&moved) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_never_exceeds_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..20 {
            let (store, p) = setup(2, 3, seed);
            let x = rand_cells(3, 3, 2, &mut rng);
            let (pooled, _) = run(&store, &p, &x, &[true; 9]);
            for k in 0..3 {
                for ch in 0..3 {
                    assert!(pooled[k * 6 + ch] <= pooled[k * 6 + 3 + ch] + 1e-15);
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = ItrmParams::register(&mut store, 3, 2, &mut rng);
        let table = store.add_glorot("emb", &[5, 3], &mut rng);
        let opts = GradCheckOptions {
            coords_per_param: None,
            ..Default::default()
        };
        let mask = [false, true, true, true, true, true];
        let report = finite_difference_check(&store, &opts, |tape| {
            let e = tape.gather(table, &[0, 1, 2, 3, 4, 1])?;
            let e = tape.reshape(e, &[2, 3, 3])?;
            let o = itrm_forward(tape, e, &mask, &p, None)?;
            let w = tape.input(Tensor::vector(vec![0.5, -1.0, 0.25]));
            tape.dot(o, w)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
