//! Named network parameters with deterministic seeded initialization.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::archive::Archive;
use crate::real::{Dual, Real};
use crate::tensor::Tensor;

/// Ordered list of `(name, shape)` pairs.
pub type Layout = Vec<(String, Vec<usize>)>;

pub(crate) fn conv_layout(layout: &mut Layout, name: &str, out: usize, inp: usize, k: usize, bias: bool) {
    layout.push((format!("{name}.w"), vec![out, inp, k, k]));
    if bias {
        layout.push((format!("{name}.b"), vec![out]));
    }
}

pub(crate) fn linear_layout(layout: &mut Layout, name: &str, out: usize, inp: usize, bias: bool) {
    layout.push((format!("{name}.w"), vec![out, inp]));
    if bias {
        layout.push((format!("{name}.b"), vec![out]));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkWeights<T = f64> {
    pub seed: u64,
    names: Vec<String>,
    index: HashMap<String, usize>,
    tensors: Vec<Tensor<T>>,
}

impl NetworkWeights<f64> {
    /// Uniform fan-in initialization: weights in `±1/√fan_in`, biases zero.
    pub fn init(seed: u64, layout: &Layout) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::with_capacity(layout.len());
        for (name, shape) in layout {
            let n: usize = shape.iter().product();
            let t = if name.ends_with(".b") {
                Tensor::zeros(shape)
            } else {
                let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
                let bound = 1.0 / (fan_in as f64).sqrt();
                Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect())
            };
            tensors.push(t);
        }
        Self::from_parts(seed, layout, tensors)
    }

    /// Copy with every parameter a constant dual number except one, whose
    /// tangent is seeded with 1.
    pub fn seeded_dual(&self, name: &str, element: usize) -> Result<NetworkWeights<Dual>> {
        let target = *self
            .index
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if element >= self.tensors[target].len() {
            return Err(Error::InvalidArgument(format!("{name} has no element {element}")));
        }
        let tensors = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut d = t.map(Dual::constant);
                if i == target {
                    d.data[element].d = 1.0;
                }
                d
            })
            .collect();
        Ok(NetworkWeights {
            seed: self.seed,
            names: self.names.clone(),
            index: self.index.clone(),
            tensors,
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new("weights");
        a.set_meta("seed", self.seed);
        for (name, t) in self.names.iter().zip(&self.tensors) {
            a.push(name, &t.shape, t.data.iter().map(|&v| v as f32));
        }
        a
    }

    /// Load from an archive, checking it against the expected layout.
    pub fn from_archive(archive: &Archive, layout: &Layout) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: Default::default(),
            reason,
        };
        if archive.kind != "weights" {
            return Err(bad(format!("expected a weights archive, found '{}'", archive.kind)));
        }
        let seed = archive
            .meta("seed")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("missing seed".into()))?;
        let mut tensors = Vec::with_capacity(layout.len());
        for (name, shape) in layout {
            let e = archive
                .entry(name)
                .ok_or_else(|| bad(format!("missing tensor {name}")))?;
            if &e.shape != shape {
                return Err(bad(format!("tensor {name} has shape {:?}, expected {shape:?}", e.shape)));
            }
            tensors.push(Tensor::from_vec(shape, e.data.iter().map(|&v| v as f64).collect()));
        }
        Ok(Self::from_parts(seed, layout, tensors))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path, layout: &Layout) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?, layout)
    }
}

impl<T: Real> NetworkWeights<T> {
    fn from_parts(seed: u64, layout: &Layout, tensors: Vec<Tensor<T>>) -> Self {
        let names: Vec<String> = layout.iter().map(|(n, _)| n.clone()).collect();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        NetworkWeights {
            seed,
            names,
            index,
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        match self.index.get(name) {
            Some(&i) => &self.tensors[i],
            None => panic!("parameter {name} missing from weight layout"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.tensors)
    }

    /// Zero every parameter whose name satisfies `pred`.
    pub fn zero_where(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            if pred(name) {
                t.data.fill(T::zero());
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Shorthand for `w.get(&format!("{prefix}.{leaf}"))`.
pub(crate) fn param<'a, T: Real>(w: &'a NetworkWeights<T>, prefix: &str, leaf: &str) -> &'a Tensor<T> {
    w.get(&format!("{prefix}.{leaf}"))
}

pub(crate) fn try_param<'a, T: Real>(w: &'a NetworkWeights<T>, prefix: &str, leaf: &str) -> Option<&'a Tensor<T>> {
    w.try_get(&format!("{prefix}.{leaf}"))
}
