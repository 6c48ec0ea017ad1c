//! Named parameter storage shared by every network in the crate.
//!
//! Networks hold [`ParamId`] handles into a [`ParamStore`]; a forward pass
//! binds the arrays it needs into a [`crate::autodiff::Graph`]. Names are
//! dotted paths (`agent.gru.w_input`) and never mention team sizes, so a
//! store built for 3v3 loads unchanged into a 6v6 run.

use crate::array::Array;
use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Fan-in uniform init, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        self.add(name, Array::matrix(rows, cols, data).expect("sized"))
    }

    pub fn add_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        self.add(name, Array::matrix(rows, cols, data).expect("sized"))
    }

    pub fn add_filled(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        value: f64,
    ) -> ParamId {
        self.add(name, Array::filled(rows, cols, value))
    }

    pub fn get(&self, id: ParamId) -> &Array {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }

    /// `(name, shape)` pairs in registration order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.iter()
            .map(|(n, a)| (n.to_string(), a.shape().to_vec()))
            .collect()
    }

    /// Copy values from `other` after checking that names and shapes agree.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        check_manifest(&self.manifest(), &other.manifest())?;
        for (name, dst) in self.names.iter().zip(self.values.iter_mut()) {
            let src = other.id_of(name).expect("manifest checked");
            dst.data_mut().copy_from_slice(other.values[src.0].data());
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian payload.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, a) in self.iter() {
            h.update(name.as_bytes());
            for d in a.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in a.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Compare two manifests and report every difference.
pub fn check_manifest(
    expected: &[(String, Vec<usize>)],
    found: &[(String, Vec<usize>)],
) -> Result<()> {
    let missing: Vec<String> = expected
        .iter()
        .filter(|(n, _)| !found.iter().any(|(m, _)| m == n))
        .map(|(n, _)| n.clone())
        .collect();
    let extra: Vec<String> = found
        .iter()
        .filter(|(n, _)| !expected.iter().any(|(m, _)| m == n))
        .map(|(n, _)| n.clone())
        .collect();
    let reshaped: Vec<String> = expected
        .iter()
        .filter(|(n, s)| found.iter().any(|(m, t)| m == n && t != s))
        .map(|(n, _)| n.clone())
        .collect();
    if missing.is_empty() && extra.is_empty() && reshaped.is_empty() {
        Ok(())
    } else {
        Err(Error::ManifestMismatch {
            missing,
            extra,
            reshaped,
        })
    }
}
