use std::collections::BTreeMap;

use rand::Rng;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numcore::{Array, Scalar};

/// Named parameter arrays, iterated in name order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    arrays: BTreeMap<String, Array<T>>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            arrays: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array<T>) {
        self.arrays.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array<T>> {
        self.arrays.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array<T>> {
        self.arrays.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<T>)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array<T>)> {
        self.arrays.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.arrays.values().map(Array::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arrays: self
                .arrays
                .iter()
                .map(|(k, v)| (k.clone(), v.zeros_like()))
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            arrays: self.arrays.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.values().all(Array::all_finite)
    }

    /// Errors unless both stores hold the same names with the same shapes.
    pub fn check_layout<U: Scalar>(&self, other: &ParamStore<U>) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::format(
                "parameters",
                format!("expected {} arrays, found {}", self.len(), other.len()),
            ));
        }
        for ((na, a), (nb, b)) in self.iter().zip(other.iter()) {
            if na != nb || a.shape() != b.shape() {
                return Err(Error::format(
                    "parameters",
                    format!("expected {na} {:?}, found {nb} {:?}", a.shape(), b.shape()),
                ));
            }
        }
        Ok(())
    }
}

fn xavier<T: Scalar, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Array<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::of(rng.random_range(-bound..bound)))
        .collect();
    Array::from_parts(vec![fan_in, fan_out], data)
}

struct Init<'a, T, R> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
}

impl<T: Scalar, R: Rng> Init<'_, T, R> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let w = xavier(self.rng, fan_in, fan_out);
        self.store.insert(format!("{name}.w"), w);
        self.store
            .insert(format!("{name}.b"), Array::from_parts(vec![fan_out], vec![T::zero(); fan_out]));
    }

    fn norm(&mut self, name: &str, dim: usize) {
        self.store
            .insert(format!("{name}.g"), Array::from_parts(vec![dim], vec![T::one(); dim]));
        self.store
            .insert(format!("{name}.b"), Array::from_parts(vec![dim], vec![T::zero(); dim]));
    }

    fn block(&mut self, name: &str, cfg: &ModelConfig) {
        let (d, dh) = (cfg.model_dim, cfg.head_dim());
        self.norm(&format!("{name}.ln1"), d);
        for h in 0..cfg.heads {
            self.linear(&format!("{name}.attn.q{h}"), d, dh);
            // a key bias shifts every score of a query equally, so it is omitted
            let w = xavier(self.rng, d, dh);
            self.store.insert(format!("{name}.attn.k{h}.w"), w);
            self.linear(&format!("{name}.attn.v{h}"), d, dh);
        }
        self.linear(&format!("{name}.attn.o"), d, d);
        self.norm(&format!("{name}.ln2"), d);
        self.linear(&format!("{name}.ff1"), d, cfg.ff_dim);
        self.linear(&format!("{name}.ff2"), cfg.ff_dim, d);
    }

    fn conditioning(&mut self, name: &str, cfg: &ModelConfig) {
        self.linear(&format!("{name}.out"), cfg.model_dim, cfg.classes());
        self.linear(&format!("{name}.in"), cfg.classes(), cfg.model_dim);
    }
}

/// Deterministic initialization from `cfg.seed`.
pub(crate) fn init_params<T: Scalar, R: Rng>(cfg: &ModelConfig, rng: &mut R) -> ParamStore<T> {
    let mut store = ParamStore::new();
    let mut init = Init {
        store: &mut store,
        rng,
    };
    let d = cfg.model_dim;
    init.linear("enc.sub", cfg.input_dim * cfg.subsample, d);
    for j in 1..=cfg.encoder_blocks {
        init.block(&format!("enc.{j}"), cfg);
    }
    for &j in &cfg.encoder_condition {
        init.conditioning(&format!("enc.cond{j}"), cfg);
    }
    init.norm("enc.norm", d);
    init.linear("uma", d, 1);
    init.linear("dec.in", d, d);
    for j in 1..=cfg.decoder_blocks {
        init.block(&format!("dec.{j}"), cfg);
    }
    for &j in &cfg.decoder_condition {
        init.conditioning(&format!("dec.cond{j}"), cfg);
    }
    init.norm("dec.norm", d);
    init.linear("dec.out", d, cfg.classes());
    store
}
