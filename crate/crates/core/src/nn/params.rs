use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::real::Real;

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
    /// He-normal scaled by fan-in, for convolution kernels.
    Kaiming { fan_in: usize },
}

/// Flat, named parameter tensors with matching gradient buffers.
///
/// Values and gradients live in separate vectors so a layer can read its
/// weights while accumulating into its gradients.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    pub(crate) names: Vec<String>,
    pub(crate) shapes: Vec<Vec<usize>>,
    pub(crate) values: Vec<Vec<T>>,
    pub(crate) grads: Vec<Vec<T>>,
}

fn sample_init<R: Rng + ?Sized>(init: Init, n: usize, rng: &mut R) -> Vec<f64> {
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::TruncNormal(std) => {
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            (0..n)
                .map(|_| loop {
                    let z: f64 = normal.sample(rng);
                    if z.abs() <= 2.0 {
                        break z * std;
                    }
                })
                .collect()
        }
        Init::Kaiming { fan_in } => {
            let std = (2.0 / fan_in.max(1) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| normal.sample(rng)).collect()
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), shapes: Vec::new(), values: Vec::new(), grads: Vec::new() }
    }

    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let values = sample_init(init, n, rng).into_iter().map(T::of).collect();
        self.names.push(name.into());
        self.shapes.push(shape.to_vec());
        self.values.push(values);
        self.grads.push(vec![T::zero(); n]);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    /// Number of scalars in tensors whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[T] {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &[T] {
        &self.grads[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|&x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, s: T) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }

    /// Same tensors in another precision, gradients reset.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.iter().map(|x| U::of(x.as_f64())).collect())
                .collect(),
            grads: self.grads.iter().map(|g| vec![U::zero(); g.len()]).collect(),
        }
    }

    /// Overwrites values from `(name, shape, data)` triples; every tensor
    /// must be present with an identical shape.
    pub fn load_tensors(&mut self, tensors: &[(String, Vec<usize>, Vec<f32>)]) -> Result<(), String> {
        if tensors.len() != self.len() {
            return Err(format!(
                "checkpoint has {} tensors, model expects {}",
                tensors.len(),
                self.len()
            ));
        }
        for (name, shape, data) in tensors {
            let id = self.find(name).ok_or_else(|| format!("unexpected tensor `{name}`"))?;
            if self.shape(id) != shape.as_slice() {
                return Err(format!(
                    "tensor `{name}`: checkpoint shape {:?}, model shape {:?}",
                    shape,
                    self.shape(id)
                ));
            }
            for (dst, &src) in self.values[id.0].iter_mut().zip(data) {
                *dst = T::of(src as f64);
            }
        }
        Ok(())
    }

    pub fn export_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        self.names
            .iter()
            .zip(&self.shapes)
            .zip(&self.values)
            .map(|((n, s), v)| (n.clone(), s.clone(), v.iter().map(|x| x.as_f64() as f32).collect()))
            .collect()
    }
}
