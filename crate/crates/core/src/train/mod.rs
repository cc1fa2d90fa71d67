//! Adapter-only training: loss, gradients, finite-difference checks and a
//! small fine-tuning loop on synthetic tasks.

mod backward;
mod gradcheck;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{build_fused_model, init_adapters, AdapterConfig, AdapterWeights, FusedModel};
use crate::error::{config_err, Error, Result};
use crate::model::BaseWeights;
use crate::scalar::Scalar;
use crate::tensor::{MatmulPolicy, Tensor};

pub use backward::adapter_backward;
pub use gradcheck::{finite_diff_grad, grad_check, CoordCheck, GradCheckConfig, GradCheckReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Predict the current token.
    Copy,
    /// Read a random half, then emit it reversed.
    Reverse,
    /// Triples `a b (a+b) mod V`; only the sum is scored.
    ModularAdd,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "modular-add" => Ok(TaskKind::ModularAdd),
            _ => config_err(format!("unknown task {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyTask {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub dataset_size: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    /// Positions that contribute to the loss.
    pub mask: Vec<bool>,
}

impl ToyTask {
    pub fn copy(vocab_size: usize, seq_len: usize, dataset_size: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::Copy,
            vocab_size,
            seq_len,
            dataset_size,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.seq_len < 2 || self.dataset_size == 0 {
            return config_err("toy task needs vocab ≥ 2, length ≥ 2 and at least one example");
        }
        if self.kind == TaskKind::ModularAdd && self.seq_len < 3 {
            return config_err("modular-add needs length ≥ 3");
        }
        Ok(())
    }

    pub fn example(&self, rng: &mut impl Rng) -> Example {
        let (n, v) = (self.seq_len, self.vocab_size);
        match self.kind {
            TaskKind::Copy => {
                let tokens: Vec<usize> = (0..n).map(|_| rng.random_range(0..v)).collect();
                Example {
                    targets: tokens.clone(),
                    mask: vec![true; n],
                    tokens,
                }
            }
            TaskKind::Reverse => {
                let h = n / 2;
                let head: Vec<usize> = (0..h).map(|_| rng.random_range(0..v)).collect();
                let mut tokens = head.clone();
                tokens.extend(head.iter().rev());
                tokens.resize(n, 0);
                let mut targets: Vec<usize> = tokens[1..].to_vec();
                targets.push(0);
                let mask = (0..n).map(|t| t + 1 >= h && t + 1 < 2 * h).collect();
                Example { tokens, targets, mask }
            }
            TaskKind::ModularAdd => {
                let mut tokens = Vec::with_capacity(n);
                let mut targets = vec![0; n];
                let mut mask = vec![false; n];
                while tokens.len() < n {
                    let (a, b) = (rng.random_range(0..v), rng.random_range(0..v));
                    for (k, t) in [a, b, (a + b) % v].into_iter().enumerate() {
                        if tokens.len() < n {
                            if k == 1 && tokens.len() + 1 < n {
                                targets[tokens.len()] = (a + b) % v;
                                mask[tokens.len()] = true;
                            }
                            tokens.push(t);
                        }
                    }
                }
                Example { tokens, targets, mask }
            }
        }
    }

    /// The dataset, regenerable from the seed.
    pub fn dataset(&self) -> Result<Vec<Example>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok((0..self.dataset_size).map(|_| self.example(&mut rng)).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
    /// Global gradient-norm clip; 0 disables clipping.
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_clip() -> f64 {
    1.0
}

fn default_batch() -> usize {
    32
}

impl TrainConfig {
    pub fn adam(steps: usize, lr: f64) -> Self {
        Self {
            steps,
            lr,
            optimizer: Optimizer::default(),
            grad_clip: default_clip(),
            batch_size: default_batch(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return config_err("learning rate must be positive");
        }
        if self.steps == 0 {
            return config_err("steps must be at least 1");
        }
        if self.batch_size == 0 {
            return config_err("batch size must be at least 1");
        }
        if self.grad_clip < 0.0 {
            return config_err("grad clip must be non-negative");
        }
        Ok(())
    }
}

/// Masked mean token cross-entropy (stable log-softmax) and its gradient on
/// the logits, scaled by `weight / count` per scored position.
pub fn loss_and_grad<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    mask: &[bool],
    weight: f64,
) -> Result<(f64, Tensor<T>)> {
    let (l, v) = (logits.rows(), logits.cols());
    if targets.len() != l || mask.len() != l {
        return Err(Error::Dimension(format!(
            "loss: {l} logit rows, {} targets, {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Input("loss mask selects no positions".into()));
    }
    let mut grad = Tensor::zeros(&[l, v]);
    let mut total = 0.0;
    for t in (0..l).filter(|&t| mask[t]) {
        let row = logits.row(t);
        if targets[t] >= v {
            return Err(Error::Input(format!(
                "target {} out of range for vocab {v}",
                targets[t]
            )));
        }
        let m = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x.as_f64() - m).exp()).sum();
        let lse = m + z.ln();
        total += lse - row[targets[t]].as_f64();
        let g = grad.row_mut(t);
        let w = weight / count as f64;
        for (j, x) in row.iter().enumerate() {
            let p = (x.as_f64() - lse).exp();
            g[j] = T::lit(w * (p - if j == targets[t] { 1.0 } else { 0.0 }));
        }
    }
    Ok((total / count as f64, grad))
}

/// Mean token cross-entropy over every position.
pub fn loss_forward<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<f64> {
    Ok(loss_and_grad(logits, targets, &vec![true; targets.len()], 1.0)?.0)
}

/// Masked loss of one example under a fused model.
pub fn example_loss<T: Scalar>(model: &FusedModel<T>, ex: &Example, policy: MatmulPolicy) -> Result<f64> {
    let logits = model.logits(&ex.tokens, policy)?;
    Ok(loss_and_grad(&logits, &ex.targets, &ex.mask, 1.0)?.0)
}

/// Loss and adapter gradients of one example; `weight` scales the loss.
pub fn example_grad<T: Scalar>(
    model: &FusedModel<T>,
    ex: &Example,
    weight: f64,
    policy: MatmulPolicy,
) -> Result<(f64, AdapterWeights<T>)> {
    let (logits, rec) = model.forward_recorded(&ex.tokens, policy)?;
    let (loss, dlogits) = loss_and_grad(&logits, &ex.targets, &ex.mask, weight)?;
    Ok((loss, adapter_backward(model, &rec, &dlogits, policy)?))
}

/// Mean loss over a set of examples.
pub fn evaluate<T: Scalar>(model: &FusedModel<T>, data: &[Example], policy: MatmulPolicy) -> Result<f64> {
    let mut total = 0.0;
    for ex in data {
        total += example_loss(model, ex, policy)?;
    }
    Ok(total / data.len() as f64)
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    /// Minibatch loss before each update.
    pub losses: Vec<f64>,
    /// Full-dataset loss before the first and after the last update.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub adapters: AdapterWeights<f32>,
}

impl TrainResult {
    /// Mean of the last `n` minibatch losses.
    pub fn trailing_mean(&self, n: usize) -> f64 {
        let tail = &self.losses[self.losses.len().saturating_sub(n)..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }

    pub fn curve_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{i},{l}\n"));
        }
        s
    }
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Fine-tune freshly initialised adapters on a frozen base.
pub fn train_adapters(
    base: &BaseWeights<f32>,
    adapter: &AdapterConfig,
    task: &ToyTask,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    let weights = init_adapters(&base.config, adapter)?;
    train_from(base, weights, task, cfg)
}

/// Fine-tune from given adapter weights.
pub fn train_from(
    base: &BaseWeights<f32>,
    mut weights: AdapterWeights<f32>,
    task: &ToyTask,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    cfg.validate()?;
    if base.config.vocab_size < task.vocab_size {
        return config_err(format!(
            "task vocab {} exceeds model vocab {}",
            task.vocab_size, base.config.vocab_size
        ));
    }
    let data = task.dataset()?;
    let policy = MatmulPolicy::serial();
    let initial_loss = evaluate(&build_fused_model(base, &weights)?, &data, policy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_params = weights.trainable_count() as usize;
    let mut adam = AdamState {
        m: vec![0.0; n_params],
        v: vec![0.0; n_params],
        t: 0,
    };
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let fused = build_fused_model(base, &weights)?;
        let batch: Vec<&Example> = (0..cfg.batch_size)
            .map(|_| &data[rng.random_range(0..data.len())])
            .collect();
        let w = 1.0 / batch.len() as f64;
        let mut grad = vec![0.0f64; n_params];
        let mut loss = 0.0;
        for ex in batch {
            let (l, g) = example_grad(&fused, ex, w, policy)?;
            loss += l * w;
            for (acc, v) in grad.iter_mut().zip(g.flatten()) {
                *acc += v as f64;
            }
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        losses.push(loss);
        clip(&mut grad, cfg.grad_clip);
        apply_update(&mut weights, &grad, cfg, &mut adam);
    }
    let final_loss = evaluate(&build_fused_model(base, &weights)?, &data, policy)?;
    if !final_loss.is_finite() {
        return Err(Error::Diverged {
            step: cfg.steps,
            loss: final_loss,
        });
    }
    Ok(TrainResult {
        losses,
        initial_loss,
        final_loss,
        adapters: weights,
    })
}

fn clip(grad: &mut [f64], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

fn apply_update(weights: &mut AdapterWeights<f32>, grad: &[f64], cfg: &TrainConfig, st: &mut AdamState) {
    st.t += 1;
    let mut off = 0;
    weights.visit_mut(|_, slice| {
        for (k, p) in slice.iter_mut().enumerate() {
            let g = grad[off + k];
            let step = match cfg.optimizer {
                Optimizer::Sgd => cfg.lr * g,
                Optimizer::Adam { beta1, beta2, eps } => {
                    let (m, v) = (&mut st.m[off + k], &mut st.v[off + k]);
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mh = *m / (1.0 - beta1.powi(st.t));
                    let vh = *v / (1.0 - beta2.powi(st.t));
                    cfg.lr * mh / (vh.sqrt() + eps)
                }
            };
            *p = (*p as f64 - step) as f32;
        }
        off += slice.len();
    });
}

/// Lowest mean cross-entropy reachable by any hidden state when the final
/// norm and LM head are frozen, averaged over targets `0..vocab`.
///
/// The head sees `w ⊙ u` with `‖u‖² < d` (an RMS-normalised vector), so
/// each target's minimum is a convex problem over that ball; it is solved
/// by projected gradient descent from the target's own head row.
pub fn frozen_head_floor(base: &BaseWeights<f32>, vocab: usize, iters: usize) -> f64 {
    let d = base.config.d_model;
    let vocab = vocab.min(base.config.vocab_size);
    let m: Vec<Vec<f64>> = (0..base.config.vocab_size)
        .map(|j| {
            (0..d)
                .map(|k| base.lm_head.at(j, k) as f64 * base.final_norm[k] as f64)
                .collect()
        })
        .collect();
    let frob: f64 = m.iter().flatten().map(|v| v * v).sum();
    let step = 2.0 / frob;
    let radius = (d as f64).sqrt();
    let eval = |u: &[f64], y: usize| -> (f64, Vec<f64>) {
        let z: Vec<f64> = m
            .iter()
            .map(|row| row.iter().zip(u).map(|(a, b)| a * b).sum())
            .collect();
        let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        let mut g = vec![0.0; d];
        for (j, row) in m.iter().enumerate() {
            let c = (z[j] - lse).exp() - if j == y { 1.0 } else { 0.0 };
            for (gk, &mk) in g.iter_mut().zip(row) {
                *gk += c * mk;
            }
        }
        (lse - z[y], g)
    };
    let mut total = 0.0;
    for y in 0..vocab {
        let norm = m[y].iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let mut u: Vec<f64> = m[y].iter().map(|v| v * radius / norm).collect();
        let mut best = f64::INFINITY;
        for _ in 0..iters {
            let (f, g) = eval(&u, y);
            best = best.min(f);
            u.iter_mut().zip(&g).for_each(|(a, b)| *a -= step * b);
            let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > radius {
                u.iter_mut().for_each(|v| *v *= radius / n);
            }
        }
        total += best.min(eval(&u, y).0);
    }
    total / vocab as f64
}
