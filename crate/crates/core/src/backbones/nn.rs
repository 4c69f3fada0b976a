//! Parameter storage and the handful of layers the networks are built from.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::ops;
use crate::error::{Error, Result};

/// Named variables of one network, ordered by name.
#[derive(Debug, Clone)]
pub struct VarStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
}

impl VarStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub(crate) fn insert(&mut self, name: String, var: Var) {
        self.vars.insert(name, var);
    }

    /// Flat copy of every parameter, used for freeze and round-trip checks.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f32>>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let data = v
                    .as_tensor()
                    .to_dtype(DType::F32)?
                    .flatten_all()?
                    .to_vec1::<f32>()?;
                Ok((k.clone(), data))
            })
            .collect()
    }

    /// Copies parameter values from `other`; names and shapes must agree.
    pub fn copy_from(&self, other: &VarStore) -> Result<()> {
        if self.vars.len() != other.vars.len() {
            return Err(Error::Checkpoint("parameter sets differ".into()));
        }
        for (name, var) in &self.vars {
            let src = other
                .vars
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            var.set(&src.as_tensor().to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// Hands out parameter tensors under a name prefix. Missing parameters are
/// created with a seeded He-normal initialization; existing ones are reused,
/// so the same builder code both initializes and reloads a network.
pub struct Builder<'a> {
    store: &'a mut VarStore,
    rng: ChaCha8Rng,
    prefix: String,
    trainable: bool,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut VarStore, seed: u64, trainable: bool) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: String::new(),
            trainable,
        }
    }

    pub fn push(&mut self, name: &str) {
        if !self.prefix.is_empty() {
            self.prefix.push('.');
        }
        self.prefix.push_str(name);
    }

    pub fn pop(&mut self) {
        match self.prefix.rfind('.') {
            Some(i) => self.prefix.truncate(i),
            None => self.prefix.clear(),
        }
    }

    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        self.push(name);
        let out = f(self);
        self.pop();
        out
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Fetches or creates a parameter; `std == 0` gives a constant `fill`.
    pub fn param(&mut self, name: &str, dims: &[usize], std: f64, fill: f64) -> Result<Tensor> {
        let full = self.full_name(name);
        let n: usize = dims.iter().product();
        // Draw unconditionally so later parameters do not depend on which
        // ones already existed.
        let values: Vec<f32> = (0..n)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut self.rng);
                (fill + std * g) as f32
            })
            .collect();
        let var = match self.store.vars.get(&full) {
            Some(v) => {
                if v.dims() != dims {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{full}` has shape {:?}, architecture expects {dims:?}",
                        v.dims()
                    )));
                }
                v.clone()
            }
            None => {
                let t = Tensor::from_vec(values, dims, &Device::Cpu)?.to_dtype(self.store.dtype)?;
                let v = Var::from_tensor(&t)?;
                self.store.vars.insert(full, v.clone());
                v
            }
        };
        Ok(if self.trainable {
            var.as_tensor().clone()
        } else {
            var.as_tensor().detach()
        })
    }
}

/// Fully connected layer on the last dim. `gain` scales the He init.
#[derive(Debug, Clone)]
pub struct Dense {
    w: Tensor,
    b: Tensor,
}

impl Dense {
    pub fn new(b: &mut Builder, name: &str, din: usize, dout: usize, gain: f64) -> Result<Self> {
        b.scoped(name, |b| {
            let std = gain * (2.0 / din as f64).sqrt();
            Ok(Self {
                w: b.param("w", &[din, dout], std, 0.0)?,
                b: b.param("b", &[dout], 0.0, 0.0)?,
            })
        })
    }

    pub fn with_bias(b: &mut Builder, name: &str, din: usize, dout: usize, gain: f64, bias: f64) -> Result<Self> {
        b.scoped(name, |b| {
            let std = gain * (2.0 / din as f64).sqrt();
            Ok(Self {
                w: b.param("w", &[din, dout], std, 0.0)?,
                b: b.param("b", &[dout], 0.0, bias)?,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let din = *dims.last().ok_or_else(|| Error::shape("dense input is a scalar"))?;
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = ops::add_bias(&x.reshape((rows, din))?.matmul(&self.w)?, &self.b)?;
        let mut out = dims;
        *out.last_mut().unwrap() = self.b.dims()[0];
        Ok(y.reshape(out)?)
    }
}

/// 3×3, stride 1, zero-padded convolution on NHWC tensors.
#[derive(Debug, Clone)]
pub struct Conv3 {
    w: Tensor,
    b: Tensor,
}

impl Conv3 {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, gain: f64) -> Result<Self> {
        b.scoped(name, |b| {
            let std = gain * (2.0 / (9 * cin) as f64).sqrt();
            Ok(Self {
                w: b.param("w", &[9 * cin, cout], std, 0.0)?,
                b: b.param("b", &[cout], 0.0, 0.0)?,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv3x3(x, &self.w, &self.b)
    }
}

/// Pointwise convolution, i.e. a dense layer applied per pixel.
#[derive(Debug, Clone)]
pub struct Conv1(Dense);

impl Conv1 {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, gain: f64) -> Result<Self> {
        Ok(Self(Dense::new(b, name, cin, cout, gain)?))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.0.forward(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_reuses_existing_parameters() {
        let mut store = VarStore::new(DType::F32);
        let d1 = Dense::new(&mut Builder::new(&mut store, 1, true), "fc", 4, 3, 1.0).unwrap();
        let d2 = Dense::new(&mut Builder::new(&mut store, 99, false), "fc", 4, 3, 1.0).unwrap();
        let a: Vec<f32> = d1.w.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = d2.w.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
        assert_eq!(store.len(), 2);
        assert!(Dense::new(&mut Builder::new(&mut store, 1, true), "fc", 5, 3, 1.0).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let mut s1 = VarStore::new(DType::F32);
        let mut s2 = VarStore::new(DType::F32);
        Conv3::new(&mut Builder::new(&mut s1, 5, true), "c", 2, 3, 1.0).unwrap();
        Conv3::new(&mut Builder::new(&mut s2, 5, true), "c", 2, 3, 1.0).unwrap();
        assert_eq!(s1.snapshot().unwrap(), s2.snapshot().unwrap());
    }

    #[test]
    fn dense_handles_leading_dims() {
        let mut store = VarStore::new(DType::F32);
        let d = Dense::new(&mut Builder::new(&mut store, 1, true), "fc", 4, 2, 1.0).unwrap();
        let x = Tensor::ones((2, 3, 4), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(d.forward(&x).unwrap().dims(), &[2, 3, 2]);
    }
}
