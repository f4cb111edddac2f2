//! Sequential repeat-aware module: Bi-GRU and Conv1D encoders, soft
//! alignment of the behavior and last-repeat sequences, enhancement,
//! pooling, and a gated fusion of the two branches.
//!
//! Sequences are laid out as `[L, d]` matrices with one row per position.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{Dropout, Mlp};
use crate::numerics::{ParamId, ParameterStore, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GruParams {
    pub w_r: ParamId,
    pub w_z: ParamId,
    pub w_h: ParamId,
    pub u_r: ParamId,
    pub u_z: ParamId,
    pub u_h: ParamId,
}

impl GruParams {
    fn names(prefix: &str) -> [String; 6] {
        ["w_r", "w_z", "w_h", "u_r", "u_z", "u_h"].map(|n| format!("{prefix}.{n}"))
    }

    pub fn register<R: Rng>(store: &mut ParameterStore, prefix: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let n = Self::names(prefix);
        Self {
            w_r: store.add_glorot(&n[0], &[hidden, input], rng),
            w_z: store.add_glorot(&n[1], &[hidden, input], rng),
            w_h: store.add_glorot(&n[2], &[hidden, input], rng),
            u_r: store.add_glorot(&n[3], &[hidden, hidden], rng),
            u_z: store.add_glorot(&n[4], &[hidden, hidden], rng),
            u_h: store.add_glorot(&n[5], &[hidden, hidden], rng),
        }
    }

    pub fn lookup(store: &ParameterStore, prefix: &str) -> Result<Self> {
        let n = Self::names(prefix);
        Ok(Self {
            w_r: store.id(&n[0])?,
            w_z: store.id(&n[1])?,
            w_h: store.id(&n[2])?,
            u_r: store.id(&n[3])?,
            u_z: store.id(&n[4])?,
            u_h: store.id(&n[5])?,
        })
    }

    pub fn hidden(&self, store: &ParameterStore) -> usize {
        store.value(self.u_r).shape()[0]
    }
}

/// Enhancement and projection MLPs of one branch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchParams {
    pub enhance: Mlp,
    pub project: Mlp,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SramParams {
    pub fwd: GruParams,
    pub bwd: GruParams,
    /// One `(w, b)` per Conv1D width.
    pub convs: Vec<(ParamId, ParamId)>,
    pub behavior: BranchParams,
    pub last_repeat: BranchParams,
    pub gate_w1: ParamId,
    pub gate_w2: ParamId,
}

/// Output channels of each conv width; they add up to `d`.
pub fn conv_channels(d: usize, widths: usize) -> Vec<usize> {
    (0..widths).map(|k| d / widths + usize::from(k < d % widths)).collect()
}

impl SramParams {
    pub fn register<R: Rng>(store: &mut ParameterStore, d: usize, seq_len: usize, widths: &[usize], rng: &mut R) -> Self {
        assert!(d % 2 == 0, "d must be even");
        let fwd = GruParams::register(store, "sram.gru.fwd", d, d / 2, rng);
        let bwd = GruParams::register(store, "sram.gru.bwd", d, d / 2, rng);
        let convs = widths
            .iter()
            .zip(conv_channels(d, widths.len()))
            .enumerate()
            .map(|(k, (&w, c))| {
                (
                    store.add_glorot(&format!("sram.conv{k}.w"), &[w, d, c], rng),
                    store.add_zeros(&format!("sram.conv{k}.b"), &[c]),
                )
            })
            .collect();
        let mut branch = |name: &str, store: &mut ParameterStore| BranchParams {
            enhance: Mlp::register(store, &format!("sram.mlp.{name}.enhance"), &[4 * d, d, d], rng),
            project: Mlp::register(store, &format!("sram.mlp.{name}.project"), &[2 * d + d * seq_len, d, d], rng),
        };
        let behavior = branch("b", store);
        let last_repeat = branch("l", store);
        Self {
            fwd,
            bwd,
            convs,
            behavior,
            last_repeat,
            gate_w1: store.add_glorot("sram.gate.w1", &[d, d], rng),
            gate_w2: store.add_glorot("sram.gate.w2", &[d, d], rng),
        }
    }

    pub fn lookup(store: &ParameterStore, num_widths: usize) -> Result<Self> {
        let convs = (0..num_widths)
            .map(|k| Ok((store.id(&format!("sram.conv{k}.w"))?, store.id(&format!("sram.conv{k}.b"))?)))
            .collect::<Result<_>>()?;
        let branch = |name: &str| -> Result<BranchParams> {
            Ok(BranchParams {
                enhance: Mlp::lookup(store, &format!("sram.mlp.{name}.enhance"), 2)?,
                project: Mlp::lookup(store, &format!("sram.mlp.{name}.project"), 2)?,
            })
        };
        Ok(Self {
            fwd: GruParams::lookup(store, "sram.gru.fwd")?,
            bwd: GruParams::lookup(store, "sram.gru.bwd")?,
            convs,
            behavior: branch("b")?,
            last_repeat: branch("l")?,
            gate_w1: store.id("sram.gate.w1")?,
            gate_w2: store.id("sram.gate.w2")?,
        })
    }
}

/// One GRU direction over the valid positions in `order`; returns the
/// hidden state for each position (zeros where masked).
fn gru_pass(
    tape: &mut Tape<'_>,
    x: Var,
    mask: &[bool],
    p: &GruParams,
    order: impl Iterator<Item = usize>,
) -> Result<Vec<Var>> {
    let hidden = p.hidden(tape.store());
    let (w_r, w_z, w_h) = (tape.param(p.w_r), tape.param(p.w_z), tape.param(p.w_h));
    let (u_r, u_z, u_h) = (tape.param(p.u_r), tape.param(p.u_z), tape.param(p.u_h));
    let xr = tape.linear(x, w_r, None)?;
    let xz = tape.linear(x, w_z, None)?;
    let xh = tape.linear(x, w_h, None)?;
    let zero = tape.zeros(&[hidden]);
    let mut states = vec![zero; mask.len()];
    let mut h = zero;
    for j in order {
        // Padded steps keep the previous state.
        if !mask[j] {
            continue;
        }
        let (a_r, a_z, a_h) = (tape.row(xr, j)?, tape.row(xz, j)?, tape.row(xh, j)?);
        let ur = tape.matvec(u_r, h)?;
        let pre_r = tape.add(a_r, ur)?;
        let r = tape.sigmoid(pre_r);
        let uz = tape.matvec(u_z, h)?;
        let pre_z = tape.add(a_z, uz)?;
        let z = tape.sigmoid(pre_z);
        let rh = tape.mul(r, h)?;
        let uh = tape.matvec(u_h, rh)?;
        let pre_h = tape.add(a_h, uh)?;
        let cand = tape.tanh(pre_h);
        // h = z*h + (1-z)*cand = cand + z*(h - cand)
        let diff = tape.sub(h, cand)?;
        let keep = tape.mul(z, diff)?;
        h = tape.add(cand, keep)?;
        states[j] = h;
    }
    Ok(states)
}

/// Bi-GRU encoding `[L, d] -> [L, d]`; rows of padded positions are zero.
pub fn encode_bigru(tape: &mut Tape<'_>, x: Var, mask: &[bool], params: &SramParams) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 2 || shape[0] != mask.len() {
        return Err(Error::shape("encode_bigru", &shape, &[mask.len()]));
    }
    let len = mask.len();
    let f = gru_pass(tape, x, mask, &params.fwd, 0..len)?;
    let b = gru_pass(tape, x, mask, &params.bwd, (0..len).rev())?;
    let fm = tape.stack(&f)?;
    let bm = tape.stack(&b)?;
    tape.concat(&[fm, bm])
}

/// Same-padded Conv1D at every width, relu, channel concat, padded rows
/// zeroed, flattened row-major to `[L * d]`.
pub fn encode_conv1d(tape: &mut Tape<'_>, h: Var, mask: &[bool], params: &SramParams) -> Result<Var> {
    let mut maps = Vec::with_capacity(params.convs.len());
    for &(w, b) in &params.convs {
        let (wv, bv) = (tape.param(w), tape.param(b));
        let y = tape.conv1d(h, wv, bv)?;
        maps.push(tape.relu(y));
    }
    let joined = tape.concat(&maps)?;
    let masked = tape.cell_mask(joined, mask)?;
    let n = tape.value(masked).len();
    tape.reshape(masked, &[n])
}

/// Soft alignment. Row `k` of the first output is the attention-weighted
/// mix of `h_l` rows for behavior position `k`; row `j` of the second is the
/// mix of `h_b` rows for last-repeat position `j`. Masked positions get no
/// weight; a side with no valid position yields zero rows.
pub fn align(tape: &mut Tape<'_>, h_l: Var, h_b: Var, mask_l: &[bool], mask_b: &[bool]) -> Result<(Var, Var)> {
    let a = tape.matmul_nt(h_l, h_b)?; // [L_l, L_b]
    let at = tape.transpose(a)?;
    let w_b = tape.masked_softmax(at, mask_l)?;
    let aligned_b = tape.matmul(w_b, h_l)?;
    let w_l = tape.masked_softmax(a, mask_b)?;
    let aligned_l = tape.matmul(w_l, h_b)?;
    Ok((aligned_b, aligned_l))
}

/// `MLP([H; H~; H - H~; H * H~])` applied to each row.
pub fn enhance(tape: &mut Tape<'_>, h: Var, aligned: Var, mlp: &Mlp, drop: Option<&mut Dropout>) -> Result<Var> {
    let diff = tape.sub(h, aligned)?;
    let prod = tape.mul(h, aligned)?;
    let x = tape.concat(&[h, aligned, diff, prod])?;
    mlp.forward(tape, x, drop)
}

/// `MLP([mean(V); flat; max(V)])` with pooling over valid rows.
pub fn pool_project(
    tape: &mut Tape<'_>,
    v: Var,
    mask: &[bool],
    flat: Var,
    mlp: &Mlp,
    drop: Option<&mut Dropout>,
) -> Result<Var> {
    let mean = tape.masked_mean(v, mask)?;
    let max = tape.masked_max(v, mask)?;
    let x = tape.concat(&[mean, flat, max])?;
    mlp.forward(tape, x, drop)
}

/// `g = sigmoid(W1 o_l + W2 o_b)`, output `o_l * g + o_b * (1 - g)`.
pub fn gated_fuse(tape: &mut Tape<'_>, o_l: Var, o_b: Var, params: &SramParams) -> Result<Var> {
    let (w1, w2) = (tape.param(params.gate_w1), tape.param(params.gate_w2));
    let a = tape.linear(o_l, w1, None)?;
    let b = tape.linear(o_b, w2, None)?;
    let pre = tape.add(a, b)?;
    let g = tape.sigmoid(pre);
    let diff = tape.sub(o_l, o_b)?;
    let part = tape.mul(g, diff)?;
    tape.add(o_b, part)
}

/// Full module: `e_b`, `e_l` are `[L, d]` embedded sequences.
pub fn sram_forward(
    tape: &mut Tape<'_>,
    e_b: Var,
    mask_b: &[bool],
    e_l: Var,
    mask_l: &[bool],
    params: &SramParams,
    mut drop: Option<&mut Dropout>,
) -> Result<Var> {
    let h_b = encode_bigru(tape, e_b, mask_b, params)?;
    let h_l = encode_bigru(tape, e_l, mask_l, params)?;
    let flat_b = encode_conv1d(tape, h_b, mask_b, params)?;
    let flat_l = encode_conv1d(tape, h_l, mask_l, params)?;
    let (al_b, al_l) = align(tape, h_l, h_b, mask_l, mask_b)?;
    let v_b = enhance(tape, h_b, al_b, &params.behavior.enhance, drop.as_deref_mut())?;
    let v_l = enhance(tape, h_l, al_l, &params.last_repeat.enhance, drop.as_deref_mut())?;
    let o_b = pool_project(tape, v_b, mask_b, flat_b, &params.behavior.project, drop.as_deref_mut())?;
    let o_l = pool_project(tape, v_l, mask_l, flat_l, &params.last_repeat.project, drop.as_deref_mut())?;
    gated_fuse(tape, o_l, o_b, params)
}
