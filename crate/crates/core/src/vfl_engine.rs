//! Vertically partitioned training: per-device embedding nets feeding a server
//! fusion net, trained by parallel block coordinate descent.
//!
//! Within a round every block sees the round-start values of all other blocks;
//! fresh embeddings only become visible to the others at [`TrainingState::synchronize`].

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network_dynamics::DeviceSpec;
use crate::seeding::{self, Stream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VflError {
    #[error("shape mismatch: expected {expected} columns, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("no embedding cached for device {0}")]
    MissingEmbedding(usize),
    #[error("device {0} is not trainable")]
    InactiveDevice(usize),
    #[error("unknown device {0}")]
    UnknownDevice(usize),
    #[error("device {0} already exists")]
    DuplicateDevice(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    pub act: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    pub layers: Vec<Layer>,
}

struct Trace {
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
}

impl DenseNet {
    /// Relu hidden layers and an identity output layer, weights and biases
    /// drawn from `U[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (dims[i], dims[i + 1]);
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let w = DMatrix::from_fn(fan_out, fan_in, |_, _| rng.gen_range(-bound..=bound));
                let b = DVector::from_fn(fan_out, |_, _| rng.gen_range(-bound..=bound));
                let act = if i + 1 == n { Activation::Identity } else { Activation::Relu };
                Layer { w, b, act }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| Layer {
                w: DMatrix::zeros(dims[i + 1], dims[i]),
                b: DVector::zeros(dims[i + 1]),
                act: if i + 1 == n { Activation::Identity } else { Activation::Relu },
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.w.nrows()).unwrap_or(0)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(l.w.as_slice());
            out.extend_from_slice(l.b.as_slice());
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.as_mut_slice().copy_from_slice(&p[at..at + nw]);
            at += nw;
            let nb = l.b.len();
            l.b.as_mut_slice().copy_from_slice(&p[at..at + nb]);
            at += nb;
        }
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, VflError> {
        Ok(self.trace(x)?.0)
    }

    fn trace(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, Trace), VflError> {
        if x.ncols() != self.input_dim() {
            return Err(VflError::ShapeMismatch {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for l in &self.layers {
            let mut z = &h * l.w.transpose();
            for mut row in z.row_iter_mut() {
                row += l.b.transpose();
            }
            let a = match l.act {
                Activation::Relu => z.map(|v| v.max(0.0)),
                Activation::Identity => z.clone(),
            };
            inputs.push(h);
            pre.push(z);
            h = a;
        }
        Ok((h, Trace { inputs, pre }))
    }

    /// Returns (parameter gradient in `params()` order, gradient w.r.t. input).
    fn backward(&self, trace: &Trace, grad_out: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
        let mut grads: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::with_capacity(self.layers.len());
        let mut g = grad_out;
        for (i, l) in self.layers.iter().enumerate().rev() {
            if l.act == Activation::Relu {
                g.zip_apply(&trace.pre[i], |gv, z| {
                    if z <= 0.0 {
                        *gv = 0.0;
                    }
                });
            }
            let dw = g.transpose() * &trace.inputs[i];
            let db = DVector::from_iterator(g.ncols(), g.column_iter().map(|c| c.sum()));
            let next = &g * &l.w;
            grads.push((dw, db));
            g = next;
        }
        grads.reverse();
        let mut flat = Vec::with_capacity(self.n_params());
        for (dw, db) in &grads {
            flat.extend_from_slice(dw.as_slice());
            flat.extend_from_slice(db.as_slice());
        }
        (flat, g)
    }
}

/// Embedding of a feature block.
pub fn forward_embed(net: &DenseNet, block: &DMatrix<f64>) -> Result<DMatrix<f64>, VflError> {
    net.forward(block)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes { labels: Vec<usize>, n_classes: usize },
    Values(DMatrix<f64>),
}

impl Targets {
    pub fn output_dim(&self) -> usize {
        match self {
            Targets::Classes { n_classes, .. } => *n_classes,
            Targets::Values(v) => v.ncols(),
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, Targets::Classes { .. })
    }
}

/// Mean loss over `rows` and its gradient w.r.t. `out` (one output row per entry of `rows`).
pub fn loss_and_grad(out: &DMatrix<f64>, targets: &Targets, rows: &[usize]) -> (f64, DMatrix<f64>) {
    let n = rows.len() as f64;
    let mut grad = DMatrix::zeros(out.nrows(), out.ncols());
    let mut loss = 0.0;
    match targets {
        Targets::Classes { labels, .. } => {
            for (i, &r) in rows.iter().enumerate() {
                let row = out.row(i);
                let m = row.max();
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                let y = labels[r];
                loss += lse - row[y];
                for j in 0..out.ncols() {
                    let p = (row[j] - lse).exp();
                    grad[(i, j)] = (p - if j == y { 1.0 } else { 0.0 }) / n;
                }
            }
        }
        Targets::Values(v) => {
            let k = out.ncols() as f64;
            for (i, &r) in rows.iter().enumerate() {
                for j in 0..out.ncols() {
                    let d = out[(i, j)] - v[(r, j)];
                    loss += d * d / k;
                    grad[(i, j)] = 2.0 * d / (k * n);
                }
            }
        }
    }
    (loss / n, grad)
}

/// Accuracy (classification) or mean squared error (regression).
pub fn performance(out: &DMatrix<f64>, targets: &Targets, rows: &[usize]) -> f64 {
    match targets {
        Targets::Classes { labels, .. } => {
            let hits = rows
                .iter()
                .enumerate()
                .filter(|(i, &r)| out.row(*i).transpose().argmax().0 == labels[r])
                .count();
            hits as f64 / rows.len().max(1) as f64
        }
        Targets::Values(_) => loss_and_grad(out, targets, rows).0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerticalDataset {
    pub features: DMatrix<f64>,
    pub targets: Targets,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl VerticalDataset {
    pub fn n_rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn block(&self, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| self.features[(rows[i], cols[j])])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerVariant {
    Standard,
    Momentum,
    Proximal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub variant: OptimizerVariant,
    pub learning_rate: f64,
    #[serde(default)]
    pub rho: f64,
    #[serde(default)]
    pub mu: f64,
}

impl OptimizerSpec {
    pub fn standard(lr: f64) -> Self {
        Self {
            variant: OptimizerVariant::Standard,
            learning_rate: lr,
            rho: 0.0,
            mu: 0.0,
        }
    }

    pub fn momentum(lr: f64, rho: f64) -> Self {
        Self {
            variant: OptimizerVariant::Momentum,
            rho,
            ..Self::standard(lr)
        }
    }

    pub fn proximal(lr: f64, mu: f64) -> Self {
        Self {
            variant: OptimizerVariant::Proximal,
            mu,
            ..Self::standard(lr)
        }
    }
}

/// Weight `w^(q)` of the q-th gradient in the unrolled update
/// `θ_τ = θ_0 − η Σ_q w^(q) g^(q)`.
pub fn sgd_scale_coeff(spec: &OptimizerSpec, tau: usize, q: usize) -> f64 {
    debug_assert!(q < tau);
    match spec.variant {
        OptimizerVariant::Standard => 1.0,
        OptimizerVariant::Proximal => {
            (1.0 - spec.learning_rate * spec.mu).powi((tau - 1 - q) as i32)
        }
        OptimizerVariant::Momentum => {
            (1.0 - spec.rho.powi((tau - q) as i32)) / (1.0 - spec.rho)
        }
    }
}

/// Runs the optimizer's own recursion for `tau` steps starting at `theta0`.
/// `grad(θ, q)` supplies the stochastic gradient at step `q`.
pub fn local_round<G>(theta0: &[f64], tau: usize, spec: &OptimizerSpec, mut grad: G) -> Vec<f64>
where
    G: FnMut(&[f64], usize) -> Vec<f64>,
{
    let eta = spec.learning_rate;
    let mut theta = theta0.to_vec();
    let mut buf = vec![0.0; theta.len()];
    for q in 0..tau {
        let g = grad(&theta, q);
        match spec.variant {
            OptimizerVariant::Standard => {
                for (t, gi) in theta.iter_mut().zip(&g) {
                    *t -= eta * gi;
                }
            }
            OptimizerVariant::Momentum => {
                for ((t, u), gi) in theta.iter_mut().zip(buf.iter_mut()).zip(&g) {
                    *u = spec.rho * *u + gi;
                    *t -= eta * *u;
                }
            }
            OptimizerVariant::Proximal => {
                for ((t, t0), gi) in theta.iter_mut().zip(theta0).zip(&g) {
                    *t -= eta * (gi + spec.mu * (*t - t0));
                }
            }
        }
    }
    theta
}

/// Continuous iteration counts are executed rounded to nearest, ties up.
pub fn round_tau(tau: f64) -> usize {
    if tau <= 0.0 {
        0
    } else {
        (tau + 0.5).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceModel {
    pub net: DenseNet,
    pub features: Vec<usize>,
    pub optimizer: OptimizerSpec,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Block {
    Server,
    Device(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub data: VerticalDataset,
    pub emb_dim: usize,
    pub models: BTreeMap<usize, DeviceModel>,
    /// Latest synchronized embedding per device over all dataset rows.
    pub embeddings: BTreeMap<usize, DMatrix<f64>>,
    pub frozen: BTreeSet<usize>,
    pub fusion: DenseNet,
    /// Device order of the embedding blocks in the fusion input.
    pub fusion_order: Vec<usize>,
    pub fusion_hidden: Vec<usize>,
    pub server_opt: OptimizerSpec,
    pub server_batch: usize,
    pub initial_loss: f64,
    pub seed: u64,
}

/// Per-device instructions for one round of local training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DevicePlan {
    pub tau: usize,
    /// Whether the fresh embedding reaches the server (active and link succeeded).
    pub upload: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundPlan {
    pub devices: BTreeMap<usize, DevicePlan>,
    pub server_tau: usize,
}

impl TrainingState {
    pub fn new(
        data: VerticalDataset,
        devices: &[DeviceSpec],
        emb_dim: usize,
        fusion_hidden: Vec<usize>,
        server_opt: OptimizerSpec,
        server_batch: usize,
        seed: u64,
    ) -> Result<Self, VflError> {
        let mut fdims = vec![emb_dim * devices.len()];
        fdims.extend_from_slice(&fusion_hidden);
        fdims.push(data.targets.output_dim());
        let fusion = DenseNet::random(&fdims, &mut seeding::rng(seed, Stream::Init, u64::MAX, 0));
        let mut st = Self {
            data,
            emb_dim,
            models: BTreeMap::new(),
            embeddings: BTreeMap::new(),
            frozen: BTreeSet::new(),
            fusion,
            fusion_order: Vec::new(),
            fusion_hidden,
            server_opt,
            server_batch,
            initial_loss: 0.0,
            seed,
        };
        for d in devices {
            let model = st.make_model(d);
            let emb = st.embed_all(&model)?;
            st.models.insert(d.id, model);
            st.embeddings.insert(d.id, emb);
            st.fusion_order.push(d.id);
        }
        st.initial_loss = st.global_loss()?;
        Ok(st)
    }

    fn make_model(&self, d: &DeviceSpec) -> DeviceModel {
        let mut dims = vec![d.features.len()];
        dims.extend_from_slice(&d.hidden);
        dims.push(self.emb_dim);
        let net = DenseNet::random(&dims, &mut seeding::rng(self.seed, Stream::Init, d.id as u64, 0));
        DeviceModel {
            net,
            features: d.features.clone(),
            optimizer: d.optimizer,
            batch_size: d.batch_size,
        }
    }

    fn embed_all(&self, model: &DeviceModel) -> Result<DMatrix<f64>, VflError> {
        let rows: Vec<usize> = (0..self.data.n_rows()).collect();
        forward_embed(&model.net, &self.data.block(&rows, &model.features))
    }

    pub fn is_classification(&self) -> bool {
        self.data.targets.is_classification()
    }

    /// Fusion input for `rows`, with optional replacement of one device block
    /// and optional zeroing of another.
    fn fusion_input(
        &self,
        embeddings: &BTreeMap<usize, DMatrix<f64>>,
        rows: &[usize],
        replace: Option<(usize, &DMatrix<f64>)>,
        zero: Option<usize>,
    ) -> Result<DMatrix<f64>, VflError> {
        let e = self.emb_dim;
        let mut x = DMatrix::zeros(rows.len(), e * self.fusion_order.len());
        for (k, &id) in self.fusion_order.iter().enumerate() {
            if zero == Some(id) {
                continue;
            }
            match replace {
                Some((rid, m)) if rid == id => {
                    x.columns_mut(k * e, e).copy_from(m);
                }
                _ => {
                    let emb = embeddings.get(&id).ok_or(VflError::MissingEmbedding(id))?;
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..e {
                            x[(i, k * e + j)] = emb[(r, j)];
                        }
                    }
                }
            }
        }
        Ok(x)
    }

    /// Mean training loss of the fusion output under a given embedding set.
    pub fn loss_with(&self, embeddings: &BTreeMap<usize, DMatrix<f64>>) -> Result<f64, VflError> {
        let x = self.fusion_input(embeddings, &self.data.train, None, None)?;
        let out = self.fusion.forward(&x)?;
        Ok(loss_and_grad(&out, &self.data.targets, &self.data.train).0)
    }

    pub fn global_loss(&self) -> Result<f64, VflError> {
        self.loss_with(&self.embeddings)
    }

    /// Training loss with one device's embedding block zeroed.
    pub fn loss_excluding(&self, id: usize) -> Result<f64, VflError> {
        let x = self.fusion_input(&self.embeddings, &self.data.train, None, Some(id))?;
        let out = self.fusion.forward(&x)?;
        Ok(loss_and_grad(&out, &self.data.targets, &self.data.train).0)
    }

    /// Held-out accuracy or MSE.
    pub fn performance(&self) -> Result<f64, VflError> {
        let rows = if self.data.test.is_empty() {
            &self.data.train
        } else {
            &self.data.test
        };
        let x = self.fusion_input(&self.embeddings, rows, None, None)?;
        let out = self.fusion.forward(&x)?;
        Ok(performance(&out, &self.data.targets, rows))
    }

    /// Gradient of the minibatch loss w.r.t. one device's parameters, with the
    /// device net set to `net` and every other block held at its cached value.
    pub fn device_grad(&self, id: usize, net: &DenseNet, rows: &[usize]) -> Result<Vec<f64>, VflError> {
        let model = self.models.get(&id).ok_or(VflError::UnknownDevice(id))?;
        if self.frozen.contains(&id) {
            return Err(VflError::InactiveDevice(id));
        }
        let k = self
            .fusion_order
            .iter()
            .position(|&d| d == id)
            .ok_or(VflError::InactiveDevice(id))?;
        let xb = self.data.block(rows, &model.features);
        let (emb, dtrace) = net.trace(&xb)?;
        let fin = self.fusion_input(&self.embeddings, rows, Some((id, &emb)), None)?;
        let (out, ftrace) = self.fusion.trace(&fin)?;
        let (_, gout) = loss_and_grad(&out, &self.data.targets, rows);
        let (_, gin) = self.fusion.backward(&ftrace, gout);
        let gemb = gin.columns(k * self.emb_dim, self.emb_dim).into_owned();
        Ok(net.backward(&dtrace, gemb).0)
    }

    /// Gradient of the minibatch loss w.r.t. fusion parameters set to `net`.
    pub fn server_grad(&self, net: &DenseNet, rows: &[usize]) -> Result<Vec<f64>, VflError> {
        let fin = self.fusion_input(&self.embeddings, rows, None, None)?;
        let (out, trace) = net.trace(&fin)?;
        let (_, gout) = loss_and_grad(&out, &self.data.targets, rows);
        Ok(net.backward(&trace, gout).0)
    }

    /// Stochastic gradient of any block at its current parameters.
    pub fn partial_grad(&self, block: Block, rows: &[usize]) -> Result<Vec<f64>, VflError> {
        match block {
            Block::Server => self.server_grad(&self.fusion, rows),
            Block::Device(id) => {
                let m = self.models.get(&id).ok_or(VflError::UnknownDevice(id))?;
                self.device_grad(id, &m.net, rows)
            }
        }
    }

    /// Minibatch loss of a block with its parameters replaced (used by gradient checks).
    pub fn block_loss(&self, block: Block, params: &[f64], rows: &[usize]) -> Result<f64, VflError> {
        match block {
            Block::Server => {
                let mut net = self.fusion.clone();
                net.set_params(params);
                let fin = self.fusion_input(&self.embeddings, rows, None, None)?;
                let out = net.forward(&fin)?;
                Ok(loss_and_grad(&out, &self.data.targets, rows).0)
            }
            Block::Device(id) => {
                let m = self.models.get(&id).ok_or(VflError::UnknownDevice(id))?;
                let mut net = m.net.clone();
                net.set_params(params);
                let emb = net.forward(&self.data.block(rows, &m.features))?;
                let fin = self.fusion_input(&self.embeddings, rows, Some((id, &emb)), None)?;
                let out = self.fusion.forward(&fin)?;
                Ok(loss_and_grad(&out, &self.data.targets, rows).0)
            }
        }
    }

    pub fn sample_batch(&self, batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let n = self.data.train.len();
        let b = batch.clamp(1, n);
        if b == n {
            return self.data.train.clone();
        }
        let mut idx: Vec<usize> = sample(rng, n, b).into_iter().map(|i| self.data.train[i]).collect();
        idx.sort_unstable();
        idx
    }

    /// Local training of one device from the round-start state; returns the
    /// updated net without publishing it.
    pub fn train_device(&self, id: usize, tau: usize, round: usize) -> Result<DenseNet, VflError> {
        let model = self.models.get(&id).ok_or(VflError::UnknownDevice(id))?;
        if self.frozen.contains(&id) {
            return Err(VflError::InactiveDevice(id));
        }
        let mut rng = seeding::rng(self.seed, Stream::Minibatch, round as u64, id as u64);
        let mut net = model.net.clone();
        let mut err = None;
        let theta = local_round(&model.net.params(), tau, &model.optimizer, |p, _| {
            net.set_params(p);
            let rows = self.sample_batch(model.batch_size, &mut rng);
            match self.device_grad(id, &net, &rows) {
                Ok(g) => g,
                Err(e) => {
                    err = Some(e);
                    vec![0.0; p.len()]
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        net.set_params(&theta);
        Ok(net)
    }

    pub fn train_server(&self, tau: usize, round: usize) -> Result<DenseNet, VflError> {
        let mut rng = seeding::rng(self.seed, Stream::Minibatch, round as u64, u64::MAX);
        let mut net = self.fusion.clone();
        let mut err = None;
        let theta = local_round(&self.fusion.params(), tau, &self.server_opt, |p, _| {
            net.set_params(p);
            let rows = self.sample_batch(self.server_batch, &mut rng);
            match self.server_grad(&net, &rows) {
                Ok(g) => g,
                Err(e) => {
                    err = Some(e);
                    vec![0.0; p.len()]
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        net.set_params(&theta);
        Ok(net)
    }

    /// One round of parallel block coordinate descent followed by synchronization.
    pub fn train_round(&mut self, plan: &RoundPlan, round: usize) -> Result<(), VflError> {
        let mut updated = BTreeMap::new();
        for (&id, p) in &plan.devices {
            if p.tau > 0 && p.upload {
                updated.insert(id, self.train_device(id, p.tau, round)?);
            }
        }
        let server = if plan.server_tau > 0 {
            Some(self.train_server(plan.server_tau, round)?)
        } else {
            None
        };
        self.synchronize(updated, server)
    }

    /// Publishes new device nets and their embeddings, and the new fusion net.
    /// Devices not listed keep their previous parameters and embeddings.
    pub fn synchronize(
        &mut self,
        updated: BTreeMap<usize, DenseNet>,
        server: Option<DenseNet>,
    ) -> Result<(), VflError> {
        for (id, net) in updated {
            let model = self.models.get_mut(&id).ok_or(VflError::UnknownDevice(id))?;
            model.net = net;
            let model = model.clone();
            let emb = self.embed_all(&model)?;
            self.embeddings.insert(id, emb);
        }
        if let Some(f) = server {
            self.fusion = f;
        }
        Ok(())
    }

    /// Freezes the device's last synchronized embedding for all later rounds.
    pub fn on_exit(&mut self, id: usize) -> Result<(), VflError> {
        if !self.models.contains_key(&id) {
            return Err(VflError::UnknownDevice(id));
        }
        if !self.frozen.insert(id) {
            return Err(VflError::InactiveDevice(id));
        }
        Ok(())
    }

    /// Adds a device and widens the fusion input with zero-initialized columns.
    pub fn on_entry(&mut self, spec: &DeviceSpec) -> Result<(), VflError> {
        if self.models.contains_key(&spec.id) || self.fusion_order.contains(&spec.id) {
            return Err(VflError::DuplicateDevice(spec.id));
        }
        let model = self.make_model(spec);
        let emb = self.embed_all(&model)?;
        self.models.insert(spec.id, model);
        self.embeddings.insert(spec.id, emb);
        self.fusion_order.push(spec.id);
        let first = &mut self.fusion.layers[0];
        let cols = first.w.ncols();
        let w = std::mem::replace(&mut first.w, DMatrix::zeros(0, 0));
        first.w = w.insert_columns(cols, self.emb_dim, 0.0);
        Ok(())
    }

    /// Zero-out-condense handling of an exit: drop the device's embedding and
    /// the matching fusion input columns.
    pub fn remove_device(&mut self, id: usize) -> Result<(), VflError> {
        let k = self
            .fusion_order
            .iter()
            .position(|&d| d == id)
            .ok_or(VflError::UnknownDevice(id))?;
        self.fusion_order.remove(k);
        self.embeddings.remove(&id);
        self.models.remove(&id);
        self.frozen.remove(&id);
        let first = &mut self.fusion.layers[0];
        let w = std::mem::replace(&mut first.w, DMatrix::zeros(0, 0));
        first.w = w.remove_columns(k * self.emb_dim, self.emb_dim);
        Ok(())
    }
}
