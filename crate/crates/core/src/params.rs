//! Named parameter storage, initialization and the checkpoint file format.
//!
//! A checkpoint is a plain-text key→array map:
//!
//! ```text
//! bicon-ckpt-1
//! <name> <ndim> <dim_0> .. <dim_n>
//! <value> <value> ..
//! ```
//!
//! Values are written in Rust's shortest round-trip form, so save→load is
//! bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: &str = "bicon-ckpt-1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.params.insert(name.into(), t.param());
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<f32>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Registers every parameter as a trainable leaf of `g`.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>) -> ParamVars {
        ParamVars {
            vars: self.params.iter().map(|(k, t)| (k.clone(), g.param(t))).collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_arrays(path, self.iter())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut store = ParamStore::new();
        for (k, t) in load_arrays(path)? {
            store.insert(k, t);
        }
        Ok(store)
    }

    /// Copies values from `other` for every name both stores share; shapes
    /// must agree.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<()> {
        for (k, t) in self.params.iter_mut() {
            let src = other.get(k)?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape of {k} is {:?} in checkpoint, {:?} in model",
                    src.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: IndexMap<String, Var>,
}

impl ParamVars {
    /// Names pre-existing graph leaves, e.g. the inputs of a grad check.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        ParamVars { vars: pairs.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("parameter {name} not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Glorot-uniform initializer.
pub fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<f32> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, shape, limit)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], limit: f64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("initializer shape")
}

pub fn save_arrays<'a>(
    path: impl AsRef<Path>,
    arrays: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
) -> Result<()> {
    let mut out = String::new();
    out.push_str(CHECKPOINT_VERSION);
    out.push('\n');
    for (name, t) in arrays {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Checkpoint(format!("invalid array name {name:?}")));
        }
        write!(out, "{name} {}", t.shape().len()).unwrap();
        for d in t.shape() {
            write!(out, " {d}").unwrap();
        }
        out.push('\n');
        let mut first = true;
        for v in t.data() {
            if !first {
                out.push(' ');
            }
            first = false;
            write!(out, "{v}").unwrap();
        }
        out.push('\n');
    }
    let path = path.as_ref();
    fs::write(path, out).map_err(|e| Error::file(path, e))
}

pub fn load_arrays(path: impl AsRef<Path>) -> Result<IndexMap<String, Tensor<f32>>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_arrays(&text)
}

fn parse_arrays(text: &str) -> Result<IndexMap<String, Tensor<f32>>> {
    let bad = |msg: String| Error::Checkpoint(msg);
    let mut lines = text.lines();
    match lines.next() {
        Some(v) if v.trim() == CHECKPOINT_VERSION => {}
        other => return Err(bad(format!("expected version tag {CHECKPOINT_VERSION}, found {other:?}"))),
    }
    let mut out = IndexMap::new();
    while let Some(header) = lines.next() {
        if header.trim().is_empty() {
            continue;
        }
        let mut fields = header.split_whitespace();
        let name = fields.next().unwrap().to_string();
        let ndim: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| bad(format!("bad header for {name}")))?;
        let shape: Vec<usize> = fields
            .map(|f| f.parse().map_err(|_| bad(format!("bad dim in header for {name}"))))
            .collect::<Result<_>>()?;
        if shape.len() != ndim {
            return Err(bad(format!("{name}: expected {ndim} dims, got {}", shape.len())));
        }
        let values = lines.next().ok_or_else(|| bad(format!("{name}: missing values")))?;
        let data: Vec<f32> = values
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| bad(format!("{name}: bad value {v:?}"))))
            .collect::<Result<_>>()?;
        let t = Tensor::new(shape, data).map_err(|e| bad(format!("{name}: {e}")))?;
        out.insert(name, t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_wrong_version() {
        assert!(matches!(parse_arrays("bicon-ckpt-0\n"), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn rejects_shape_value_mismatch() {
        let text = format!("{CHECKPOINT_VERSION}\nw 2 2 2\n1 2 3\n");
        assert!(parse_arrays(&text).is_err());
    }

    proptest! {
        #[test]
        fn save_load_is_bit_exact(values in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.ckpt");
            let mut store = ParamStore::new();
            store.insert("a.weight", Tensor::new(vec![values.len()], values.clone()).unwrap());
            store.insert("b", Tensor::new(vec![1, 1], vec![-0.0]).unwrap());
            store.save(&path).unwrap();
            let back = ParamStore::load(&path).unwrap();
            let got: Vec<u32> = back.get("a.weight").unwrap().data().iter().map(|v| v.to_bits()).collect();
            let want: Vec<u32> = values.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, want);
            prop_assert_eq!(back.get("b").unwrap().data()[0].to_bits(), (-0.0f32).to_bits());
        }
    }
}
