use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a parameter inside a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

const MAGIC: &[u8; 4] = b"TSRP";
pub const FORMAT_VERSION: u32 = 1;

/// Named learnable arrays together with their gradient accumulators and
/// Adam moments.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    /// Row 0 is a padding row that must stay exactly zero.
    padding_row: Vec<bool>,
    index: BTreeMap<String, ParamId>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "parameter `{name}` registered twice"
        );
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(value.shape()));
        self.first_moment.push(Tensor::zeros(value.shape()));
        self.second_moment.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.padding_row.push(false);
        self.index.insert(name.to_string(), id);
        id
    }

    /// Registers a parameter initialised uniformly in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn add_glorot<R: Rng>(&mut self, name: &str, shape: &[usize], rng: &mut R) -> ParamId {
        let (fan_in, fan_out) = fans(shape);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape matches data"))
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    /// Embedding table whose row 0 is zero and never updated.
    pub fn add_padded_table<R: Rng>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> ParamId {
        let id = self.add_glorot(name, &[rows, cols], rng);
        self.values[id.0].data_mut()[..cols].fill(0.0);
        self.padding_row[id.0] = true;
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn has_padding_row(&self, id: ParamId) -> bool {
        self.padding_row[id.0]
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        for (acc, g) in self.grads.iter_mut().zip(&grads.grads) {
            if let Some(g) = g {
                acc.add_assign(g);
            }
        }
    }

    pub(crate) fn adam_parts(
        &mut self,
    ) -> (
        &[String],
        &mut [Tensor],
        &mut [Tensor],
        &mut [Tensor],
        &mut [Tensor],
        &[bool],
        &mut u64,
    ) {
        (
            &self.names,
            &mut self.values,
            &mut self.grads,
            &mut self.first_moment,
            &mut self.second_moment,
            &self.padding_row,
            &mut self.step,
        )
    }

    /// Bitwise equality of names, shapes and values (optimizer state ignored).
    pub fn same_values(&self, other: &ParameterStore) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.shape() == b.shape() && bits_equal(a.data(), b.data()))
    }

    /// Writes the versioned flat format: magic `TSRP`, `u32` format version,
    /// `u32` parameter count, then per parameter a `u32` name length, UTF-8
    /// name, `u32` rank, `u64` dims and little-endian `f64` values.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.values.len() as u32).to_le_bytes())?;
        for (name, value) in self.names.iter().zip(&self.values) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(value.ndim() as u32).to_le_bytes())?;
            for &dim in value.shape() {
                w.write_all(&(dim as u64).to_le_bytes())?;
            }
            for v in value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a parameter file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported parameter format version {version}"
            )));
        }
        let count = read_u32(&mut r)? as usize;
        let mut store = ParameterStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            store.add(&name, Tensor::new(shape, data)?);
        }
        Ok(store)
    }

    /// Marks the same rows as padding as in `template`; used after loading a
    /// file, which does not carry optimizer or padding metadata.
    pub fn copy_padding_flags(&mut self, template: &ParameterStore) {
        for (i, name) in self.names.iter().enumerate() {
            if let Some(id) = template.index.get(name) {
                self.padding_row[i] = template.padding_row[id.0];
            }
        }
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (*n, *n),
        [rows, cols] => (*cols, *rows),
        _ => {
            // Convolution kernels: [..spatial, in_channels, out_channels].
            let spatial: usize = shape[..shape.len() - 2].iter().product();
            let cin = shape[shape.len() - 2];
            let cout = shape[shape.len() - 1];
            (spatial * cin, spatial * cout)
        }
    }
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn new(num_params: usize) -> Self {
        Self {
            grads: vec![None; num_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub(crate) fn slot(&mut self, id: ParamId, shape: &[usize]) -> &mut Tensor {
        self.grads[id.0].get_or_insert_with(|| Tensor::zeros(shape))
    }

    /// Adds `other` into `self`; summation order is the caller's.
    pub fn merge(&mut self, other: Gradients) {
        for (a, b) in self.grads.iter_mut().zip(other.grads) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.add_assign(&b),
                (None, Some(b)) => *a = Some(b),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
}
