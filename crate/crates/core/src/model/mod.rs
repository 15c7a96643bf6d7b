//! Encoder → weight head → unimodal aggregation → decoder → output head.
//!
//! The encoder stacks `subsample` input frames per step, projects them, adds
//! sinusoidal positions (after scaling the features by `sqrt(D_model)`) and runs pre-norm self-attention blocks. A
//! Linear-Sigmoid head predicts one aggregation weight per step; the
//! aggregated sequence gets fresh positions, a linear projection and the
//! decoder blocks, then a linear head over the tokens plus blank.
//! Self-conditioning heads can sit after any encoder or decoder block.

pub mod checkpoint;
mod config;
mod params;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::ModelConfig;
pub use params::ParamStore;

use crate::error::{Error, Result};
use crate::numcore::{Array, Graph, Scalar, VarId};
use crate::uma::{self, AggregationWeights, Segmentation};

const LN_EPS: f64 = 1e-5;

/// Where an intermediate prediction was taken (1-based block index).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerId {
    Encoder(usize),
    Decoder(usize),
}

impl std::fmt::Display for LayerId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LayerId::Encoder(j) => write!(f, "enc{j}"),
            LayerId::Decoder(j) => write!(f, "dec{j}"),
        }
    }
}

/// Dropout state for one forward pass.
pub enum Dropout {
    Off,
    On { rate: f64, rng: ChaCha8Rng },
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        if rate > 0.0 {
            Dropout::On {
                rate,
                rng: ChaCha8Rng::seed_from_u64(seed),
            }
        } else {
            Dropout::Off
        }
    }
}

/// Parameter name → graph handle for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    ids: HashMap<String, VarId>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<VarId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, VarId)> {
        self.ids.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Graph handles produced by [`Model::forward_on`].
#[derive(Clone, Debug)]
pub struct TracedForward {
    pub h: VarId,
    pub alpha: VarId,
    pub segmentation: Segmentation,
    pub c: VarId,
    pub o: VarId,
    pub logits: VarId,
    pub intermediates: Vec<(LayerId, VarId)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntermediateLogits<T> {
    pub layer: LayerId,
    pub logits: Array<T>,
}

/// All values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<T> {
    /// Encoder output, `T' × D_model`.
    pub h: Array<T>,
    pub alpha: AggregationWeights<T>,
    pub segmentation: Segmentation,
    /// Aggregated features, `I × D_model`.
    pub c: Array<T>,
    /// Decoder output, `I × D_model`.
    pub o: Array<T>,
    /// `I × (K+1)`.
    pub logits: Array<T>,
    pub intermediates: Vec<IntermediateLogits<T>>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn encoder_len(&self) -> usize {
        self.h.rows()
    }

    pub fn integrated_len(&self) -> usize {
        self.segmentation.len()
    }

    fn from_graph(g: &Graph<T>, tr: &TracedForward) -> Result<Self> {
        Ok(Self {
            h: g.value(tr.h).clone(),
            alpha: AggregationWeights::new(g.value(tr.alpha).data().to_vec())?,
            segmentation: tr.segmentation.clone(),
            c: g.value(tr.c).clone(),
            o: g.value(tr.o).clone(),
            logits: g.value(tr.logits).clone(),
            intermediates: tr
                .intermediates
                .iter()
                .map(|&(layer, id)| IntermediateLogits {
                    layer,
                    logits: g.value(id).clone(),
                })
                .collect(),
        })
    }
}

/// Sinusoidal positions for steps `1..=n`.
pub fn sinusoidal_positions<T: Scalar>(n: usize, dim: usize) -> Array<T> {
    let mut data = vec![T::zero(); n * dim];
    for pos in 0..n {
        let p = (pos + 1) as f64;
        for i in 0..dim {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let v = if i % 2 == 0 { (p / rate).sin() } else { (p / rate).cos() };
            data[pos * dim + i] = T::of(v);
        }
    }
    Array::from_parts(vec![n, dim], data)
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = params::init_params(&config, &mut rng);
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking they match the config's layout.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let reference = Self::new(config.clone())?;
        reference.params.check_layout(&params)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    /// Parameters as graph leaves (`trainable`) or constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let ids = self
            .params
            .iter()
            .map(|(name, a)| {
                let id = if trainable {
                    g.leaf(a.clone())
                } else {
                    g.constant(a.clone())
                };
                (name.to_string(), id)
            })
            .collect();
        Bound { ids }
    }

    /// Binds already recorded handles, given in parameter-name order.
    pub fn bind_ids(&self, ids: &[VarId]) -> Result<Bound> {
        if ids.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} handles for {} parameters",
                ids.len(),
                self.params.len()
            )));
        }
        Ok(Bound {
            ids: self.params.names().map(str::to_string).zip(ids.iter().copied()).collect(),
        })
    }

    /// Parameter arrays in the order [`Model::bind_ids`] expects.
    pub fn param_arrays(&self) -> Vec<Array<T>> {
        self.params.iter().map(|(_, a)| a.clone()).collect()
    }

    /// Number of encoder steps for `frames` input frames.
    pub fn encoder_len(&self, frames: usize) -> usize {
        frames / self.config.subsample
    }

    fn linear(&self, g: &mut Graph<T>, p: &Bound, x: VarId, name: &str) -> Result<VarId> {
        let y = g.matmul(x, p.get(&format!("{name}.w"))?)?;
        g.add_row(y, p.get(&format!("{name}.b"))?)
    }

    fn norm(&self, g: &mut Graph<T>, p: &Bound, x: VarId, name: &str) -> Result<VarId> {
        g.layer_norm(
            x,
            p.get(&format!("{name}.g"))?,
            p.get(&format!("{name}.b"))?,
            T::of(LN_EPS),
        )
    }

    fn dropout(&self, g: &mut Graph<T>, x: VarId, dropout: &mut Dropout) -> Result<VarId> {
        match dropout {
            Dropout::Off => Ok(x),
            Dropout::On { rate, rng } => {
                let keep = T::of(1.0 / (1.0 - *rate));
                let v = g.value(x);
                let mask: Vec<T> = (0..v.len())
                    .map(|_| if rng.random::<f64>() < *rate { T::zero() } else { keep })
                    .collect();
                let m = g.constant(Array::new(v.shape(), mask)?);
                g.mul(x, m)
            }
        }
    }

    fn attention(&self, g: &mut Graph<T>, p: &Bound, x: VarId, name: &str) -> Result<VarId> {
        let scale = T::of(1.0 / (self.config.head_dim() as f64).sqrt());
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let q = self.linear(g, p, x, &format!("{name}.q{h}"))?;
            let k = g.matmul(x, p.get(&format!("{name}.k{h}.w"))?)?;
            let v = self.linear(g, p, x, &format!("{name}.v{h}"))?;
            let scores = g.matmul_transposed(q, k)?;
            let scores = g.scale(scores, scale);
            let weights = g.softmax(scores);
            heads.push(g.matmul(weights, v)?);
        }
        let joined = g.concat(&heads, 1)?;
        self.linear(g, p, joined, &format!("{name}.o"))
    }

    /// Pre-norm block: `x + Attn(LN(x))`, then `+ FF(LN(·))`.
    fn block(&self, g: &mut Graph<T>, p: &Bound, x: VarId, name: &str, dropout: &mut Dropout) -> Result<VarId> {
        let n1 = self.norm(g, p, x, &format!("{name}.ln1"))?;
        let a = self.attention(g, p, n1, &format!("{name}.attn"))?;
        let a = self.dropout(g, a, dropout)?;
        let x = g.add(x, a)?;
        let n2 = self.norm(g, p, x, &format!("{name}.ln2"))?;
        let f = self.linear(g, p, n2, &format!("{name}.ff1"))?;
        let f = g.gelu(f);
        let f = self.linear(g, p, f, &format!("{name}.ff2"))?;
        let f = self.dropout(g, f, dropout)?;
        g.add(x, f)
    }

    /// `logits = Linear_out(z)`, `z' = z + Linear_in(softmax(logits))`.
    pub fn self_condition(&self, g: &mut Graph<T>, p: &Bound, z: VarId, name: &str) -> Result<(VarId, VarId)> {
        let logits = self.linear(g, p, z, &format!("{name}.out"))?;
        let probs = g.softmax(logits);
        let back = self.linear(g, p, probs, &format!("{name}.in"))?;
        Ok((g.add(z, back)?, logits))
    }

    /// Stacks `s` consecutive frames (dropping the tail remainder), then
    /// Linear + GELU to `D_model`.
    pub fn subsample(&self, g: &mut Graph<T>, p: &Bound, x: VarId) -> Result<VarId> {
        let s = self.config.subsample;
        let xv = g.value(x);
        if xv.ndim() != 2 || xv.cols() != self.config.input_dim {
            return Err(Error::shape(
                "subsample",
                format!("expected T×{}, got {:?}", self.config.input_dim, xv.shape()),
            ));
        }
        let frames = xv.rows();
        if frames < s {
            return Err(Error::InvalidArgument(format!(
                "{frames} input frames is fewer than the subsampling factor {s}"
            )));
        }
        let steps = frames / s;
        let mut parts = Vec::with_capacity(s);
        for j in 0..s {
            let idx: Vec<usize> = (0..steps).map(|t| t * s + j).collect();
            parts.push(g.gather_rows(x, &idx)?);
        }
        let stacked = g.concat(&parts, 1)?;
        let y = self.linear(g, p, stacked, "enc.sub")?;
        Ok(g.gelu(y))
    }

    /// Subsampling, positions, encoder blocks (with conditioning) and the final norm.
    pub fn encoder_on(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: VarId,
        dropout: &mut Dropout,
        intermediates: &mut Vec<(LayerId, VarId)>,
    ) -> Result<VarId> {
        let mut z = self.subsample(g, p, x)?;
        if self.config.encoder_positional {
            let n = g.value(z).rows();
            // features scaled by sqrt(D) so the positions do not swamp them
            z = g.scale(z, T::of((self.config.model_dim as f64).sqrt()));
            let pe = g.constant(sinusoidal_positions(n, self.config.model_dim));
            z = g.add(z, pe)?;
        }
        for j in 1..=self.config.encoder_blocks {
            z = self.block(g, p, z, &format!("enc.{j}"), dropout)?;
            if self.config.encoder_condition.contains(&j) {
                let (z2, logits) = self.self_condition(g, p, z, &format!("enc.cond{j}"))?;
                intermediates.push((LayerId::Encoder(j), logits));
                z = z2;
            }
        }
        self.norm(g, p, z, "enc.norm")
    }

    /// `α_t = sigmoid(Linear(h_t))`, shaped `T' × 1`.
    pub fn weight_head_on(&self, g: &mut Graph<T>, p: &Bound, h: VarId) -> Result<VarId> {
        let s = self.linear(g, p, h, "uma")?;
        Ok(g.sigmoid(s))
    }

    /// Fresh positions, input projection, decoder blocks, norm and output head.
    /// Returns `(o, logits)`.
    pub fn decoder_on(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        c: VarId,
        dropout: &mut Dropout,
        intermediates: &mut Vec<(LayerId, VarId)>,
    ) -> Result<(VarId, VarId)> {
        let n = g.value(c).rows();
        let pe = g.constant(sinusoidal_positions(n, self.config.model_dim));
        let z = g.add(c, pe)?;
        let mut z = self.linear(g, p, z, "dec.in")?;
        for j in 1..=self.config.decoder_blocks {
            z = self.block(g, p, z, &format!("dec.{j}"), dropout)?;
            if self.config.decoder_condition.contains(&j) {
                let (z2, logits) = self.self_condition(g, p, z, &format!("dec.cond{j}"))?;
                intermediates.push((LayerId::Decoder(j), logits));
                z = z2;
            }
        }
        let o = self.norm(g, p, z, "dec.norm")?;
        let logits = self.linear(g, p, o, "dec.out")?;
        Ok((o, logits))
    }

    /// Full forward pass recorded on `g`.
    pub fn forward_on(&self, g: &mut Graph<T>, p: &Bound, x: &Array<T>, dropout: &mut Dropout) -> Result<TracedForward> {
        self.forward_with(g, p, x, dropout, None)
    }

    /// Like [`Model::forward_on`], optionally forcing the segmentation.
    pub fn forward_with(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: &Array<T>,
        dropout: &mut Dropout,
        segmentation: Option<&Segmentation>,
    ) -> Result<TracedForward> {
        let xv = g.constant(x.clone());
        let mut intermediates = Vec::new();
        let h = self.encoder_on(g, p, xv, dropout, &mut intermediates)?;
        let alpha = self.weight_head_on(g, p, h)?;
        let seg = match segmentation {
            Some(s) => s.clone(),
            None => uma::detect_valleys(&AggregationWeights::new(g.value(alpha).data().to_vec())?),
        };
        let c = uma::aggregate_var(g, h, alpha, &seg)?;
        let (o, logits) = self.decoder_on(g, p, c, dropout, &mut intermediates)?;
        Ok(TracedForward {
            h,
            alpha,
            segmentation: seg,
            c,
            o,
            logits,
            intermediates,
        })
    }

    /// Inference forward pass (no taping, no dropout).
    pub fn forward(&self, x: &Array<T>) -> Result<ForwardTrace<T>> {
        let mut g = Graph::untaped();
        let p = self.bind(&mut g, false);
        let tr = self.forward_on(&mut g, &p, x, &mut Dropout::Off)?;
        ForwardTrace::from_graph(&g, &tr)
    }

    pub fn encoder_forward(&self, x: &Array<T>) -> Result<Array<T>> {
        let mut g = Graph::untaped();
        let p = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let h = self.encoder_on(&mut g, &p, xv, &mut Dropout::Off, &mut Vec::new())?;
        Ok(g.value(h).clone())
    }

    pub fn weight_head(&self, h: &Array<T>) -> Result<AggregationWeights<T>> {
        let mut g = Graph::untaped();
        let p = self.bind(&mut g, false);
        let hv = g.constant(h.clone());
        let a = self.weight_head_on(&mut g, &p, hv)?;
        AggregationWeights::new(g.value(a).data().to_vec())
    }

    /// Decoder on any `n × D_model` sequence; returns `(o, logits)`.
    pub fn decoder_forward(&self, c: &Array<T>) -> Result<(Array<T>, Array<T>)> {
        let mut g = Graph::untaped();
        let p = self.bind(&mut g, false);
        let cv = g.constant(c.clone());
        let (o, l) = self.decoder_on(&mut g, &p, cv, &mut Dropout::Off, &mut Vec::new())?;
        Ok((g.value(o).clone(), g.value(l).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            input_dim: 3,
            model_dim: 8,
            heads: 2,
            encoder_blocks: 2,
            decoder_blocks: 2,
            ff_dim: 12,
            subsample: 4,
            vocab_size: 4,
            encoder_condition: vec![1],
            decoder_condition: vec![2],
            ..Default::default()
        }
    }

    fn input(frames: usize, dim: usize) -> Array<f64> {
        let data = (0..frames * dim).map(|i| ((i * 37 % 11) as f64 * 0.3).sin()).collect();
        Array::new(&[frames, dim], data).unwrap()
    }

    #[test]
    fn subsample_lengths() {
        let m = Model::<f64>::new(small()).unwrap();
        let mut g = Graph::untaped();
        let p = m.bind(&mut g, false);
        let x = g.constant(input(17, 3));
        let y = m.subsample(&mut g, &p, x).unwrap();
        assert_eq!(g.value(y).shape(), &[4, 8]);
        let x = g.constant(input(3, 3));
        assert!(m.subsample(&mut g, &p, x).is_err());
    }

    #[test]
    fn subsample_of_zero_input_is_bias_rows() {
        let mut m = Model::<f64>::new(ModelConfig { subsample: 1, ..small() }).unwrap();
        let bias: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
        m.params_mut().get_mut("enc.sub.b").unwrap().data_mut().copy_from_slice(&bias);
        let mut g = Graph::untaped();
        let p = m.bind(&mut g, false);
        let x = g.constant(Array::zeros(&[5, 3]).unwrap());
        let y = m.subsample(&mut g, &p, x).unwrap();
        let y = g.value(y);
        assert_eq!(y.rows(), 5);
        for r in 0..5 {
            for (j, &b) in bias.iter().enumerate() {
                assert_eq!(y.at(r, j), crate::numcore::kernels::gelu(b));
            }
        }
    }

    #[test]
    fn zero_weight_head_gives_half() {
        let mut m = Model::<f64>::new(small()).unwrap();
        for (_, a) in m.params_mut().iter_mut().filter(|(n, _)| n.starts_with("uma.")) {
            a.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let h = input(6, 8);
        let alpha = m.weight_head(&h).unwrap();
        assert!(alpha.as_slice().iter().all(|&a| a == 0.5));
    }

    #[test]
    fn hand_set_weight_head_valleys() {
        // h carries the desired logit in its first column
        let mut m = Model::<f64>::new(small()).unwrap();
        let w = m.params_mut().get_mut("uma.w").unwrap();
        w.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = if i == 0 { 1.0 } else { 0.0 });
        m.params_mut().get_mut("uma.b").unwrap().data_mut()[0] = 0.0;
        let logit = |a: f64| (a / (1.0 - a)).ln();
        let mut h = Array::zeros(&[3, 8]).unwrap();
        for (t, a) in [0.9, 0.2, 0.8].into_iter().enumerate() {
            h.row_mut(t)[0] = logit(a);
        }
        let alpha = m.weight_head(&h).unwrap();
        for (got, want) in alpha.as_slice().iter().zip([0.9, 0.2, 0.8]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(uma::detect_valleys(&alpha).len(), 2);
    }

    #[test]
    fn trace_shapes_and_consistency() {
        let m = Model::<f64>::new(small()).unwrap();
        let tr = m.forward(&input(40, 3)).unwrap();
        assert_eq!(tr.h.shape(), &[10, 8]);
        assert_eq!(tr.alpha.len(), 10);
        let seg = uma::detect_valleys(&tr.alpha);
        assert_eq!(seg, tr.segmentation);
        let i = tr.integrated_len();
        assert_eq!(tr.c.shape(), &[i, 8]);
        assert_eq!(tr.o.shape(), &[i, 8]);
        assert_eq!(tr.logits.shape(), &[i, 5]);
        assert_eq!(tr.intermediates.len(), 2);
        assert_eq!(tr.intermediates[0].layer, LayerId::Encoder(1));
        assert_eq!(tr.intermediates[0].logits.rows(), 10);
        assert_eq!(tr.intermediates[1].layer, LayerId::Decoder(2));
        assert_eq!(tr.intermediates[1].logits.rows(), i);
    }

    #[test]
    fn no_conditioning_means_no_intermediates() {
        let cfg = ModelConfig {
            encoder_condition: vec![],
            decoder_condition: vec![],
            ..small()
        };
        let m = Model::<f64>::new(cfg).unwrap();
        assert!(!m.params().names().any(|n| n.contains("cond")));
        let tr = m.forward(&input(24, 3)).unwrap();
        assert!(tr.intermediates.is_empty());
    }

    #[test]
    fn deterministic_forward() {
        let a = Model::<f64>::new(small()).unwrap().forward(&input(33, 3)).unwrap();
        let b = Model::<f64>::new(small()).unwrap().forward(&input(33, 3)).unwrap();
        let bits = |x: &Array<f64>| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.logits), bits(&b.logits));
        assert_eq!(bits(&a.h), bits(&b.h));
        assert_eq!(a, b);
    }

    #[test]
    fn decoder_accepts_single_step() {
        let m = Model::<f64>::new(small()).unwrap();
        let (o, logits) = m.decoder_forward(&input(1, 8)).unwrap();
        assert_eq!(o.shape(), &[1, 8]);
        assert_eq!(logits.shape(), &[1, 5]);
    }

    #[test]
    fn encoder_without_positions_is_permutation_equivariant() {
        let cfg = ModelConfig {
            encoder_positional: false,
            subsample: 1,
            encoder_condition: vec![],
            ..small()
        };
        let m = Model::<f64>::new(cfg).unwrap();
        let x = input(6, 3);
        let perm = [3, 0, 5, 1, 4, 2];
        let mut xp = Array::zeros(&[6, 3]).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            xp.row_mut(i).copy_from_slice(x.row(src));
        }
        let h = m.encoder_forward(&x).unwrap();
        let hp = m.encoder_forward(&xp).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            for (a, b) in hp.row(i).iter().zip(h.row(src)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_conditioning_input_is_identity() {
        let m0 = Model::<f64>::new(small()).unwrap();
        let mut m = m0.clone();
        for (_, a) in m.params_mut().iter_mut().filter(|(n, _)| n.starts_with("enc.cond1.in")) {
            a.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::untaped();
        let p = m.bind(&mut g, false);
        let z = g.constant(input(5, 8));
        let (z2, logits) = m.self_condition(&mut g, &p, z, "enc.cond1").unwrap();
        assert_eq!(g.value(z2), g.value(z));
        assert_eq!(g.value(logits).shape(), &[5, 5]);
    }

    #[test]
    fn positions_are_sinusoidal() {
        let pe = sinusoidal_positions::<f64>(3, 4);
        assert!((pe.at(0, 0) - 1f64.sin()).abs() < 1e-15);
        assert!((pe.at(0, 1) - 1f64.cos()).abs() < 1e-15);
        assert!((pe.at(2, 2) - (3.0 / 100.0f64).sin()).abs() < 1e-15);
    }
}
