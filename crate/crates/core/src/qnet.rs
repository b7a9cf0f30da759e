//! Dueling Q-network with a weight-shared neighbor encoder, exact
//! backpropagation and an Adam optimizer.
//!
//! Input layout is `[ego block, slot 0, slot 1, ...]`, matching
//! [`Observation::features`](crate::traffic::Observation::features). Each
//! neighbor slot goes through the same two dense layers; the results are
//! max-pooled over slots, concatenated with the ego branch and fed to a dense
//! trunk that splits into a value head and an advantage head.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::fnv1a64;
use crate::traffic::{ACTION_COUNT, EGO_FEATURES, NEIGHBOR_SLOTS, SLOT_FEATURES};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"LKQN";
pub const WEIGHTS_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 1 + 1;

#[derive(Debug, Error)]
pub enum QnetError {
    #[error("parameter vector has {got} entries, config needs {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("non-finite parameter at index {0}")]
    NonFiniteWeight(usize),
    #[error("non-finite target or weight in sample {0}")]
    NonFiniteTarget(usize),
    #[error("action {action} out of range for {actions} outputs")]
    BadAction { action: usize, actions: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("not a weights file (bad magic)")]
    BadMagic,
    #[error("unsupported weights format version {0}")]
    Version(u32),
    #[error("network fingerprint {found:#018x} does not match expected {expected:#018x}")]
    Fingerprint { expected: u64, found: u64 },
    #[error("weights file truncated or oversized: {0} bytes")]
    Length(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub slots: usize,
    pub slot_features: usize,
    pub ego_features: usize,
    pub encoder_hidden: usize,
    pub encoder_out: usize,
    pub ego_hidden: usize,
    pub trunk: usize,
    pub actions: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            slots: NEIGHBOR_SLOTS,
            slot_features: SLOT_FEATURES,
            ego_features: EGO_FEATURES,
            encoder_hidden: 32,
            encoder_out: 64,
            ego_hidden: 32,
            trunk: 64,
            actions: ACTION_COUNT,
        }
    }
}

/// Layer order inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layer {
    Enc1 = 0,
    Enc2,
    Ego,
    Trunk,
    Value,
    Advantage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Span {
    w: usize,
    b: usize,
    out: usize,
    inp: usize,
}

impl NetworkConfig {
    pub fn input_dim(&self) -> usize {
        self.ego_features + self.slots * self.slot_features
    }

    /// `(out, in)` of every dense layer in declaration order.
    pub fn layer_dims(&self) -> [(usize, usize); 6] {
        [
            (self.encoder_hidden, self.slot_features),
            (self.encoder_out, self.encoder_hidden),
            (self.ego_hidden, self.ego_features),
            (self.trunk, self.encoder_out + self.ego_hidden),
            (1, self.trunk),
            (self.actions, self.trunk),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(o, i)| o * i + o).sum()
    }

    /// Stable 64-bit hash of the slot count and all layer dimensions.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::with_capacity(8 * 14);
        bytes.extend_from_slice(&(self.slots as u64).to_le_bytes());
        for (o, i) in self.layer_dims() {
            bytes.extend_from_slice(&(o as u64).to_le_bytes());
            bytes.extend_from_slice(&(i as u64).to_le_bytes());
        }
        fnv1a64(&bytes)
    }

    fn spans(&self) -> [Span; 6] {
        let mut at = 0;
        self.layer_dims().map(|(out, inp)| {
            let s = Span {
                w: at,
                b: at + out * inp,
                out,
                inp,
            };
            at += out * inp + out;
            s
        })
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let k = 4 * c;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut tail = 0.0;
    for k in 4 * chunks..n {
        tail += a[k] * b[k];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `y = W x + b`, optionally rectified.
#[inline]
fn dense(params: &[f64], s: Span, x: &[f64], y: &mut [f64], relu: bool) {
    let w = &params[s.w..s.b];
    let b = &params[s.b..s.b + s.out];
    for o in 0..s.out {
        let v = b[o] + dot(&w[o * s.inp..(o + 1) * s.inp], x);
        y[o] = if relu { v.max(0.0) } else { v };
    }
}

/// Backward through a dense layer: accumulates `dW += d x^T`, `db += d`
/// and, when `dx` is given, `dx += W^T d`.
#[inline]
fn dense_back(params: &[f64], grad: &mut [f64], s: Span, x: &[f64], d: &[f64], dx: Option<&mut [f64]>) {
    for o in 0..s.out {
        if d[o] == 0.0 {
            continue;
        }
        axpy(d[o], x, &mut grad[s.w + o * s.inp..s.w + (o + 1) * s.inp]);
        grad[s.b + o] += d[o];
    }
    if let Some(dx) = dx {
        let w = &params[s.w..s.b];
        for o in 0..s.out {
            if d[o] != 0.0 {
                axpy(d[o], &w[o * s.inp..(o + 1) * s.inp], dx);
            }
        }
    }
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
struct Activations {
    h1: Vec<f64>,
    h2: Vec<f64>,
    winner: Vec<usize>,
    z: Vec<f64>,
    t: Vec<f64>,
    value: f64,
    adv: Vec<f64>,
    q: Vec<f64>,
}

impl Activations {
    fn new(c: &NetworkConfig) -> Self {
        Self {
            h1: vec![0.0; c.slots * c.encoder_hidden],
            h2: vec![0.0; c.slots * c.encoder_out],
            winner: vec![0; c.encoder_out],
            z: vec![0.0; c.encoder_out + c.ego_hidden],
            t: vec![0.0; c.trunk],
            value: 0.0,
            adv: vec![0.0; c.actions],
            q: vec![0.0; c.actions],
        }
    }
}

/// One training sample for [`QNetwork::gradient`].
#[derive(Debug, Clone, Copy)]
pub struct GradSample<'a> {
    pub input: &'a [f64],
    pub action: usize,
    pub target: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// `y - Q(s, a)` per sample.
    pub td_errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    config: NetworkConfig,
    spans: [Span; 6],
    params: Vec<f64>,
}

impl QNetwork {
    /// Uniform initialization in `±1/sqrt(fan_in)` for weights and biases.
    pub fn new_random<R: rand::Rng + ?Sized>(config: NetworkConfig, rng: &mut R) -> Self {
        let mut params = Vec::with_capacity(config.param_count());
        for (out, inp) in config.layer_dims() {
            let bound = 1.0 / (inp as f64).sqrt();
            for _ in 0..out * inp + out {
                params.push(rng.gen_range(-bound..bound));
            }
        }
        Self {
            config,
            spans: config.spans(),
            params,
        }
    }

    pub fn from_params(config: NetworkConfig, params: Vec<f64>) -> Result<Self, QnetError> {
        if params.len() != config.param_count() {
            return Err(QnetError::ShapeMismatch {
                expected: config.param_count(),
                got: params.len(),
            });
        }
        let net = Self {
            config,
            spans: config.spans(),
            params,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Rejects non-finite parameters.
    pub fn validate(&self) -> Result<(), QnetError> {
        match self.params.iter().position(|p| !p.is_finite()) {
            Some(i) => Err(QnetError::NonFiniteWeight(i)),
            None => Ok(()),
        }
    }

    fn forward_into(&self, x: &[f64], act: &mut Activations) {
        let c = &self.config;
        let sp = &self.spans;
        let p = &self.params;
        let (eh, eo) = (c.encoder_hidden, c.encoder_out);
        let base = c.ego_features;
        for k in 0..c.slots {
            let slot = &x[base + k * c.slot_features..base + (k + 1) * c.slot_features];
            let h1 = &mut act.h1[k * eh..(k + 1) * eh];
            dense(p, sp[Layer::Enc1 as usize], slot, h1, true);
            dense(p, sp[Layer::Enc2 as usize], h1, &mut act.h2[k * eo..(k + 1) * eo], true);
        }
        for j in 0..eo {
            let mut best = 0;
            for k in 1..c.slots {
                if act.h2[k * eo + j] > act.h2[best * eo + j] {
                    best = k;
                }
            }
            act.winner[j] = best;
            act.z[j] = act.h2[best * eo + j];
        }
        dense(p, sp[Layer::Ego as usize], &x[..c.ego_features], &mut act.z[eo..], true);
        dense(p, sp[Layer::Trunk as usize], &act.z, &mut act.t, true);
        let mut v = [0.0];
        dense(p, sp[Layer::Value as usize], &act.t, &mut v, false);
        act.value = v[0];
        dense(p, sp[Layer::Advantage as usize], &act.t, &mut act.adv, false);
        let mean = act.adv.iter().sum::<f64>() / c.actions as f64;
        for (q, a) in act.q.iter_mut().zip(&act.adv) {
            *q = act.value + a - mean;
        }
    }

    /// Q-values for every action.
    pub fn q_values(&self, x: &[f64]) -> Vec<f64> {
        let mut act = Activations::new(&self.config);
        self.forward_into(x, &mut act);
        act.q
    }

    /// The state value and raw advantages before aggregation.
    pub fn value_advantage(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let mut act = Activations::new(&self.config);
        self.forward_into(x, &mut act);
        (act.value, act.adv)
    }

    /// Lowest-index action with the largest Q-value.
    pub fn greedy_action(&self, x: &[f64]) -> usize {
        argmax(&self.q_values(x))
    }

    /// Importance-weighted mean squared TD error on the taken actions and
    /// its exact gradient.
    pub fn gradient(&self, batch: &[GradSample<'_>]) -> Result<Gradient, QnetError> {
        if batch.is_empty() {
            return Err(QnetError::EmptyBatch);
        }
        let c = &self.config;
        let sp = &self.spans;
        let p = &self.params;
        let n = batch.len() as f64;
        let (eh, eo) = (c.encoder_hidden, c.encoder_out);
        let mut grad = vec![0.0; p.len()];
        let mut td_errors = Vec::with_capacity(batch.len());
        let mut loss = 0.0;

        let mut act = Activations::new(c);
        let mut dadv = vec![0.0; c.actions];
        let mut dt = vec![0.0; c.trunk];
        let mut dz = vec![0.0; eo + c.ego_hidden];
        let mut dh2 = vec![0.0; c.slots * eo];
        let mut dh1 = vec![0.0; eh];
        let mut touched = vec![false; c.slots];

        for (i, s) in batch.iter().enumerate() {
            if !s.target.is_finite() || !s.weight.is_finite() {
                return Err(QnetError::NonFiniteTarget(i));
            }
            if s.action >= c.actions {
                return Err(QnetError::BadAction {
                    action: s.action,
                    actions: c.actions,
                });
            }
            self.forward_into(s.input, &mut act);
            let td = s.target - act.q[s.action];
            td_errors.push(td);
            loss += s.weight * td * td;

            let g = -2.0 * s.weight * td / n;
            if g == 0.0 {
                continue;
            }
            let inv = 1.0 / c.actions as f64;
            for (j, d) in dadv.iter_mut().enumerate() {
                *d = if j == s.action { g * (1.0 - inv) } else { -g * inv };
            }
            dt.iter_mut().for_each(|v| *v = 0.0);
            dense_back(p, &mut grad, sp[Layer::Value as usize], &act.t, &[g], Some(&mut dt));
            dense_back(p, &mut grad, sp[Layer::Advantage as usize], &act.t, &dadv, Some(&mut dt));
            for (d, t) in dt.iter_mut().zip(&act.t) {
                if *t <= 0.0 {
                    *d = 0.0;
                }
            }
            dz.iter_mut().for_each(|v| *v = 0.0);
            dense_back(p, &mut grad, sp[Layer::Trunk as usize], &act.z, &dt, Some(&mut dz));

            let (dpool, dego) = dz.split_at_mut(eo);
            for (d, e) in dego.iter_mut().zip(&act.z[eo..]) {
                if *e <= 0.0 {
                    *d = 0.0;
                }
            }
            dense_back(p, &mut grad, sp[Layer::Ego as usize], &s.input[..c.ego_features], dego, None);

            touched.iter_mut().for_each(|t| *t = false);
            for j in 0..eo {
                let k = act.winner[j];
                if act.z[j] > 0.0 && dpool[j] != 0.0 {
                    if !touched[k] {
                        touched[k] = true;
                        dh2[k * eo..(k + 1) * eo].iter_mut().for_each(|v| *v = 0.0);
                    }
                    dh2[k * eo + j] = dpool[j];
                }
            }
            let base = c.ego_features;
            for k in 0..c.slots {
                if !touched[k] {
                    continue;
                }
                let h1 = &act.h1[k * eh..(k + 1) * eh];
                dh1.iter_mut().for_each(|v| *v = 0.0);
                dense_back(p, &mut grad, sp[Layer::Enc2 as usize], h1, &dh2[k * eo..(k + 1) * eo], Some(&mut dh1));
                for (d, h) in dh1.iter_mut().zip(h1) {
                    if *h <= 0.0 {
                        *d = 0.0;
                    }
                }
                let slot = &s.input[base + k * c.slot_features..base + (k + 1) * c.slot_features];
                dense_back(p, &mut grad, sp[Layer::Enc1 as usize], slot, &dh1, None);
            }
        }
        Ok(Gradient {
            loss: loss / n,
            grad,
            td_errors,
        })
    }

    /// Copies parameters from another network with the same config.
    pub fn copy_from(&mut self, other: &QNetwork) {
        debug_assert_eq!(self.config, other.config);
        self.params.copy_from_slice(&other.params);
    }

    /// Serializes to the weights file format.
    pub fn to_bytes(&self, task_tag: u8, level: u8) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.params.len());
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config.fingerprint().to_le_bytes());
        out.push(task_tag);
        out.push(level);
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    /// Parses a weights file, returning the network, task tag and level.
    pub fn from_bytes(bytes: &[u8], config: NetworkConfig) -> Result<(Self, u8, u8), QnetError> {
        if bytes.len() < HEADER_LEN {
            return Err(QnetError::Length(bytes.len()));
        }
        if &bytes[..4] != WEIGHTS_MAGIC {
            return Err(QnetError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != WEIGHTS_VERSION {
            return Err(QnetError::Version(version));
        }
        let found = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        if found != config.fingerprint() {
            return Err(QnetError::Fingerprint {
                expected: config.fingerprint(),
                found,
            });
        }
        let (task, level) = (bytes[16], bytes[17]);
        let body = &bytes[HEADER_LEN..];
        if body.len() != 8 * config.param_count() {
            return Err(QnetError::Length(bytes.len()));
        }
        let params = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((Self::from_params(config, params)?, task, level))
    }

    pub fn save(&self, path: &Path, task_tag: u8, level: u8) -> Result<(), QnetError> {
        fs::write(path, self.to_bytes(task_tag, level))?;
        Ok(())
    }

    pub fn load(path: &Path, config: NetworkConfig) -> Result<(Self, u8, u8), QnetError> {
        Self::from_bytes(&fs::read(path)?, config)
    }
}

pub fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in q.iter().enumerate().skip(1) {
        if *v > q[best] {
            best = i;
        }
    }
    best
}

/// Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(param_count: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    /// One bias-corrected Adam update of `params` along `grad`.
    pub fn apply(&mut self, params: &mut [f64], grad: &[f64]) -> Result<(), QnetError> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(QnetError::ShapeMismatch {
                expected: self.m.len(),
                got: params.len().min(grad.len()),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }

    pub fn step_network(&mut self, net: &mut QNetwork, grad: &[f64]) -> Result<(), QnetError> {
        self.apply(&mut net.params, grad)?;
        net.validate()
    }
}
