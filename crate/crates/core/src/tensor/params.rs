use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Identifies one independently optimized set of parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupId(pub u32);

/// One parameter tensor inside a group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub group: GroupId,
    pub index: usize,
}

/// Named, ordered parameter tensors sharing one optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    id: GroupId,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamGroup {
    pub fn new(id: GroupId) -> Self {
        Self {
            id,
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn id(&self) -> GroupId {
        self.id
    }

    /// Copy of this group under a different id (momentum / target copies).
    pub fn with_id(&self, id: GroupId) -> Self {
        Self {
            id,
            names: self.names.clone(),
            tensors: self.tensors.clone(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn param_id(&self, index: usize) -> ParamId {
        ParamId {
            group: self.id,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, index: usize) -> &Tensor {
        &self.tensors[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// All parameter values, concatenated in order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`ParamGroup::flatten`].
    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_scalars() {
            return Err(Error::shape(format!(
                "group has {} scalars, got {}",
                self.num_scalars(),
                values.len()
            )));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Sets every parameter to zero.
    pub fn zero_all(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Copies values from a group with identical layout.
    pub fn copy_from(&mut self, other: &ParamGroup) -> Result<()> {
        self.check_aligned(other)?;
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub(crate) fn check_aligned(&self, other: &ParamGroup) -> Result<()> {
        if self.tensors.len() != other.tensors.len()
            || self
                .tensors
                .iter()
                .zip(&other.tensors)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::shape("parameter groups are not aligned"));
        }
        Ok(())
    }
}

/// Tensor with entries drawn uniformly from `±1/sqrt(fan_in)`.
pub fn init_uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}
