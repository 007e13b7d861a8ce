//! Domain-agnostic classifier: two rectified subspaces of the input
//! embedding, bidirectional gated cross-attention between them, four
//! decoders, and a two-step adversarial optimizer.

pub mod checkpoint;
pub mod net;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, CheckpointError};
pub use net::{LossBreakdown, Network, Shape, DOMAIN_CLASSIFIER};

use crate::eval::Confusion;
use crate::util::derive_rng;
use crate::Label;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    /// Hidden width of the two-layer decoders; `None` means `d`.
    pub hidden: Option<usize>,
    /// Weights of recon, specific, shared, ortho and contrast.
    pub lambdas: [f64; 5],
    pub lr_generator: f64,
    pub lr_domain_classifier: f64,
    pub epochs: usize,
    pub batch: usize,
    pub tau: f64,
    pub val_frac: f64,
    /// Cross-attention on; off gives the no-attention ablation.
    pub attention: bool,
    /// Split each subspace vector into `heads` attention tokens.
    pub token_split: bool,
    /// Train the specific-subspace decoder and its loss.
    pub use_specific: bool,
    /// Train the adversarial domain classifier and its loss.
    pub use_shared: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 512,
            heads: 4,
            hidden: None,
            lambdas: [1.0, 1.0, 0.5, 0.1, 0.1],
            lr_generator: 1e-4,
            lr_domain_classifier: 1e-5,
            epochs: 300,
            batch: 128,
            tau: 0.5,
            val_frac: 0.1,
            attention: true,
            token_split: false,
            use_specific: true,
            use_shared: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad("d must be a positive multiple of heads");
        }
        if self.hidden == Some(0) {
            return bad("hidden must be positive");
        }
        if self.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return bad("lambdas must be finite and non-negative");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if !(self.lr_generator >= 0.0 && self.lr_domain_classifier >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        if !(0.0..1.0).contains(&self.val_frac) {
            return bad("val_frac must lie in [0, 1)");
        }
        Ok(())
    }

    /// Per-term weights of the generator objective, in
    /// [`LossBreakdown::terms`] order. The shared term is negated: the
    /// generator is rewarded for fooling the domain classifier.
    pub fn generator_weights(&self) -> [f64; 6] {
        let [l1, l2, l3, l4, l5] = self.lambdas;
        [
            1.0,
            l1,
            if self.use_specific { l2 } else { 0.0 },
            if self.use_shared { -l3 } else { 0.0 },
            l4,
            l5,
        ]
    }

    pub fn shape(&self, input: usize, domains: usize) -> Shape {
        Shape {
            input,
            d: self.d,
            hidden: self.hidden.unwrap_or(self.d),
            domains,
            tokens: if self.token_split { self.heads } else { 1 },
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("batch of {got} exceeds configured batch size {max}")]
    BatchTooLarge { got: usize, max: usize },
    #[error("non-finite loss: {0:?}")]
    NonFiniteLoss(LossBreakdown),
    #[error("training set needs at least 2 samples of each class (real: {real}, fake: {fake})")]
    TooFewPerClass { real: usize, fake: usize },
}

/// Network parameters with Adam moments and counters.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierState {
    pub config: ModelConfig,
    pub net: Network,
    pub adam_m: Network,
    pub adam_v: Network,
    pub t_generator: u64,
    pub t_domain: u64,
    pub epoch: u64,
    pub round: u64,
}

fn adam_update(
    net: &mut Network,
    grad: &Network,
    m: &mut Network,
    v: &mut Network,
    t: u64,
    lr: f64,
    domain_classifier: bool,
) {
    let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
    let grads = grad.tensors();
    for (((name, p), (_, mm)), ((_, vv), (_, g))) in net
        .tensors_mut()
        .into_iter()
        .zip(m.tensors_mut())
        .zip(v.tensors_mut().into_iter().zip(grads))
    {
        if name.starts_with(DOMAIN_CLASSIFIER) != domain_classifier {
            continue;
        }
        for i in 0..p.len() {
            mm[i] = ADAM_BETA1 * mm[i] + (1.0 - ADAM_BETA1) * g[i];
            vv[i] = ADAM_BETA2 * vv[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let mhat = mm[i] / c1;
            let vhat = vv[i] / c2;
            p[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
}

impl ClassifierState {
    pub fn new(config: ModelConfig, input: usize, domains: usize, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if input == 0 || domains == 0 {
            return Err(ModelError::DimensionMismatch("input and domain dims must be positive".into()));
        }
        let net = Network::init(config.shape(input, domains), &mut derive_rng(seed, "model/init", 0));
        let zeros = net.zeros_like();
        Ok(ClassifierState {
            config,
            adam_m: zeros.clone(),
            adam_v: zeros,
            net,
            t_generator: 0,
            t_domain: 0,
            epoch: 0,
            round: 0,
        })
    }

    pub fn shape(&self) -> Shape {
        self.net.shape()
    }

    fn check_dims(&self, x: &Array2<f64>, rows: usize, dom: Option<&Array2<f64>>) -> Result<(), ModelError> {
        let shape = self.shape();
        if x.ncols() != shape.input {
            return Err(ModelError::DimensionMismatch(format!(
                "input has {} columns, model expects {}",
                x.ncols(),
                shape.input
            )));
        }
        if x.nrows() != rows {
            return Err(ModelError::DimensionMismatch("row counts differ".into()));
        }
        if let Some(dom) = dom {
            if dom.ncols() != shape.domains || dom.nrows() != rows {
                return Err(ModelError::DimensionMismatch(format!(
                    "domain targets are {}x{}, expected {}x{}",
                    dom.nrows(),
                    dom.ncols(),
                    rows,
                    shape.domains
                )));
            }
        }
        Ok(())
    }

    pub fn losses(&self, x: &Array2<f64>, y: &Array1<f64>, dom: &Array2<f64>) -> Result<LossBreakdown, ModelError> {
        self.check_dims(x, y.len(), Some(dom))?;
        let fw = self.net.forward(x, self.config.attention);
        Ok(net::losses(&fw, y, dom, &self.config.generator_weights(), self.config.tau))
    }

    /// One two-step update: the generator side descends the weighted
    /// objective, then the domain classifier descends its own loss on the
    /// updated features. Returns the losses before the update.
    pub fn train_step(&mut self, x: &Array2<f64>, y: &Array1<f64>, dom: &Array2<f64>) -> Result<LossBreakdown, ModelError> {
        self.check_dims(x, y.len(), Some(dom))?;
        if x.nrows() > self.config.batch {
            return Err(ModelError::BatchTooLarge {
                got: x.nrows(),
                max: self.config.batch,
            });
        }
        let weights = self.config.generator_weights();
        let fw = self.net.forward(x, self.config.attention);
        let breakdown = net::losses(&fw, y, dom, &weights, self.config.tau);
        if !breakdown.is_finite() {
            return Err(ModelError::NonFiniteLoss(breakdown));
        }
        let grad = self.net.backward(&fw, y, dom, &weights, self.config.tau);
        self.t_generator += 1;
        adam_update(
            &mut self.net,
            &grad,
            &mut self.adam_m,
            &mut self.adam_v,
            self.t_generator,
            self.config.lr_generator,
            false,
        );
        if self.config.use_shared {
            self.step_domain_classifier(x, dom);
        }
        Ok(breakdown)
    }

    /// Step B alone: one Adam step of the domain classifier. Returns its
    /// loss before the step.
    pub fn step_domain_classifier(&mut self, x: &Array2<f64>, dom: &Array2<f64>) -> f64 {
        let (loss, grad) = self.net.shared_head_step(x, dom);
        self.t_domain += 1;
        adam_update(
            &mut self.net,
            &grad,
            &mut self.adam_m,
            &mut self.adam_v,
            self.t_domain,
            self.config.lr_domain_classifier,
            true,
        );
        loss
    }

    /// p(fake) for each row.
    pub fn predict(&self, x: &Array2<f64>) -> Result<Array1<f64>, ModelError> {
        self.check_dims(x, x.nrows(), None)?;
        Ok(self.net.forward(x, self.config.attention).probs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub val_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_f1: Option<f64>,
    pub train_size: usize,
    pub val_size: usize,
    /// Row indices of the held-out validation slice, ascending.
    pub val_indices: Vec<usize>,
}

fn rows(m: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    m.select(Axis(0), idx)
}

fn f1_at_half(probs: &Array1<f64>, y: &[f64]) -> f64 {
    let mut c = Confusion::default();
    for (p, t) in probs.iter().zip(y) {
        c.add(Label::from_bool(*t >= 0.5), Label::from_bool(*p >= 0.5));
    }
    c.f1()
}

/// Trains from scratch. A stratified `val_frac` slice is held out and the
/// state with the best validation F1 (latest on ties) is returned.
pub fn fit(
    config: &ModelConfig,
    x: &Array2<f64>,
    labels: &[Label],
    dom: &Array2<f64>,
    seed: u64,
) -> Result<(ClassifierState, FitReport), ModelError> {
    config.validate()?;
    if x.nrows() != labels.len() || dom.nrows() != labels.len() {
        return Err(ModelError::DimensionMismatch("row counts differ".into()));
    }
    let fake = labels.iter().filter(|l| **l == Label::Fake).count();
    let real = labels.len() - fake;
    if fake < 2 || real < 2 {
        return Err(ModelError::TooFewPerClass { real, fake });
    }
    let mut state = ClassifierState::new(config.clone(), x.ncols(), dom.ncols(), seed)?;
    let y_all: Vec<f64> = labels.iter().map(|l| l.index() as f64).collect();

    let mut split_rng = derive_rng(seed, "model/split", 0);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in [Label::Real, Label::Fake] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut split_rng);
        let n_val = if config.val_frac > 0.0 {
            ((config.val_frac * idx.len() as f64).ceil() as usize).min(idx.len() - 1)
        } else {
            0
        };
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    let x_val = rows(x, &val);
    let y_val: Vec<f64> = val.iter().map(|&i| y_all[i]).collect();

    let mut best = state.clone();
    let mut best_epoch = 0;
    let mut best_f1: Option<f64> = None;
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order = train.clone();
        order.shuffle(&mut derive_rng(seed, "model/epoch", epoch as u64));
        let mut sum = LossBreakdown::default();
        let mut batches = 0.0;
        for chunk in order.chunks(config.batch) {
            let xb = rows(x, chunk);
            let yb = Array1::from_iter(chunk.iter().map(|&i| y_all[i]));
            let db = rows(dom, chunk);
            let l = state.train_step(&xb, &yb, &db)?;
            sum.pred += l.pred;
            sum.recon += l.recon;
            sum.specific += l.specific;
            sum.shared += l.shared;
            sum.ortho += l.ortho;
            sum.contrast += l.contrast;
            sum.total += l.total;
            batches += 1.0;
        }
        for v in [
            &mut sum.pred,
            &mut sum.recon,
            &mut sum.specific,
            &mut sum.shared,
            &mut sum.ortho,
            &mut sum.contrast,
            &mut sum.total,
        ] {
            *v /= batches;
        }
        state.epoch = epoch as u64 + 1;
        let val_f1 = if val.is_empty() {
            None
        } else {
            Some(f1_at_half(&state.predict(&x_val)?, &y_val))
        };
        let improved = match (val_f1, best_f1) {
            (None, _) => true,
            (Some(f), None) => f.is_finite(),
            (Some(f), Some(b)) => f >= b,
        };
        if improved {
            best = state.clone();
            best_epoch = epoch + 1;
            best_f1 = val_f1;
        }
        history.push(EpochLog {
            epoch: epoch + 1,
            loss: sum,
            val_f1,
        });
    }
    let report = FitReport {
        history,
        best_epoch,
        best_val_f1: best_f1,
        train_size: train.len(),
        val_size: val.len(),
        val_indices: val,
    };
    Ok((best, report))
}

/// Largest relative error between the analytic gradient of the weighted
/// objective and central finite differences (step `1e-4`) over every
/// parameter, for a given network and batch.
///
/// The central difference is Richardson-extrapolated with a half step so
/// the `h^2` truncation term cancels; otherwise parameters with gradients
/// near `1e-6` (such as output biases feeding a layer norm) are dominated by
/// truncation error rather than by any mistake in the analytic gradient.
pub fn gradient_check_with(
    net: &Network,
    x: &Array2<f64>,
    y: &Array1<f64>,
    dom: &Array2<f64>,
    weights: &[f64; 6],
    tau: f64,
    attention: bool,
) -> f64 {
    const H: f64 = 1e-4;
    let objective = |n: &Network| net::losses(&n.forward(x, attention), y, dom, weights, tau).total;
    let analytic = net.backward(&net.forward(x, attention), y, dom, weights, tau);
    let analytic: Vec<Vec<f64>> = analytic.tensors().into_iter().map(|(_, t)| t.to_vec()).collect();
    let mut probe = net.clone();
    let mut central = |ti: usize, j: usize, orig: f64, h: f64| {
        probe.tensors_mut()[ti].1[j] = orig + h;
        let up = objective(&probe);
        probe.tensors_mut()[ti].1[j] = orig - h;
        let down = objective(&probe);
        probe.tensors_mut()[ti].1[j] = orig;
        (up - down) / (2.0 * h)
    };
    let originals: Vec<Vec<f64>> = net.tensors().into_iter().map(|(_, t)| t.to_vec()).collect();
    let mut worst = 0.0f64;
    for (ti, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = originals[ti][j];
            let coarse = central(ti, j, orig, H);
            let fine = central(ti, j, orig, H / 2.0);
            let numeric = (4.0 * fine - coarse) / 3.0;
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

/// Gradient check on a seeded `d = 8`, batch-4 instance of `config`
/// (other settings such as lambdas and ablation flags are kept).
pub fn gradient_check(config: &ModelConfig, weights: Option<[f64; 6]>, seed: u64) -> Result<f64, ModelError> {
    let mut cfg = config.clone();
    cfg.d = 8;
    cfg.hidden = Some(6);
    cfg.batch = 4;
    if cfg.token_split && 8 % cfg.heads != 0 {
        cfg.heads = 4;
    }
    let (input, domains) = (6, 3);
    let state = ClassifierState::new(cfg.clone(), input, domains, seed)?;
    let mut rng = derive_rng(seed, "model/gradcheck", 0);
    use rand::Rng;
    let x = Array2::from_shape_fn((4, input), |_| rng.random_range(-1.0..1.0));
    let y = Array1::from_shape_fn(4, |i| (i % 2) as f64);
    let mut dom = Array2::from_shape_fn((4, domains), |_| rng.random_range(0.1..1.0));
    for mut r in dom.rows_mut() {
        let s = r.sum();
        r /= s;
    }
    let w = weights.unwrap_or_else(|| cfg.generator_weights());
    Ok(gradient_check_with(&state.net, &x, &y, &dom, &w, cfg.tau, cfg.attention))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(d: usize) -> ModelConfig {
        ModelConfig {
            d,
            heads: 4,
            hidden: Some(d),
            epochs: 50,
            batch: 64,
            lr_generator: 1e-2,
            lr_domain_classifier: 1e-3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        let bad = ModelConfig {
            d: 10,
            heads: 4,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn generator_weights_negate_shared() {
        let w = ModelConfig::default().generator_weights();
        assert_eq!(w, [1.0, 1.0, 1.0, -0.5, 0.1, 0.1]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = ModelConfig::default();
        let full = gradient_check(&cfg, None, 7).unwrap();
        assert!(full < 1e-4, "full objective rel err {full}");
        for term in 0..6 {
            let mut w = [0.0; 6];
            w[term] = 1.0;
            let e = gradient_check(&cfg, Some(w), 7).unwrap();
            assert!(e < 1e-4, "term {term}: rel err {e}");
        }
        let split = ModelConfig {
            token_split: true,
            ..ModelConfig::default()
        };
        // Seed 7 puts a decoder pre-activation within one step of its kink.
        let e = gradient_check(&split, None, 5).unwrap();
        assert!(e < 1e-4, "token split rel err {e}");
    }

    #[test]
    fn train_step_rejects_oversized_batch() {
        let mut s = ClassifierState::new(small(8), 3, 2, 0).unwrap();
        s.config.batch = 2;
        let x = Array2::zeros((3, 3));
        let y = Array1::zeros(3);
        let dom = Array2::from_elem((3, 2), 0.5);
        assert!(matches!(
            s.train_step(&x, &y, &dom),
            Err(ModelError::BatchTooLarge { got: 3, max: 2 })
        ));
    }
}
