use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{example_grad, example_loss, Example};
use crate::adapters::{build_fused_model, AdapterWeights, ParamId, Variant};
use crate::error::{config_err, Result};
use crate::model::BaseWeights;
use crate::tensor::MatmulPolicy;

/// Central difference `(f(θ+ε) − f(θ−ε)) / 2ε`.
pub fn finite_diff_grad(mut loss: impl FnMut(f64) -> Result<f64>, theta: f64, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return config_err("finite-difference step must be positive");
    }
    Ok((loss(theta + eps)? - loss(theta - eps)?) / (2.0 * eps))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckConfig {
    pub coords: usize,
    pub eps: f64,
    pub tol: f64,
    /// Relative errors use `max(|analytic|, |numeric|, floor)` as the
    /// denominator so coordinates with vanishing gradient do not divide by 0.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            coords: 100,
            eps: 1e-3,
            tol: 1e-3,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub variant: Variant,
    pub coords: Vec<CoordCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Compare analytic gradients with central differences on random
/// coordinates drawn uniformly over all trainable entries.
pub fn grad_check(
    base: &BaseWeights<f64>,
    adapters: &AdapterWeights<f64>,
    ex: &Example,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let policy = MatmulPolicy::serial();
    let fused = build_fused_model(base, adapters)?;
    let (_, grads) = example_grad(&fused, ex, 1.0, policy)?;
    let mut index: Vec<(ParamId, usize)> = Vec::new();
    adapters.visit(|id, s| index.push((id, s.len())));
    let total: usize = index.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return config_err("no trainable adapter parameters to check");
    }
    let flat_grad = grads.flatten();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut coords = Vec::with_capacity(cfg.coords);
    for _ in 0..cfg.coords {
        let flat = rng.random_range(0..total);
        let (mut id, mut k) = (index[0].0, flat);
        for &(pid, n) in &index {
            if k < n {
                id = pid;
                break;
            }
            k -= n;
        }
        let mut probe = adapters.clone();
        let theta = probe.param_mut(id).expect("visited parameter")[k];
        let numeric = finite_diff_grad(
            |value| {
                probe.param_mut(id).expect("visited parameter")[k] = value;
                example_loss(&build_fused_model(base, &probe)?, ex, policy)
            },
            theta,
            cfg.eps,
        )?;
        let analytic = flat_grad[flat];
        let denom = analytic.abs().max(numeric.abs()).max(cfg.floor);
        coords.push(CoordCheck {
            param: id.to_string(),
            index: k,
            analytic,
            numeric,
            rel_err: (analytic - numeric).abs() / denom,
        });
    }
    let max_rel_err = coords.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        variant: adapters.config.variant,
        coords,
        max_rel_err,
        tol: cfg.tol,
        pass: max_rel_err <= cfg.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{init_adapters, AdapterConfig, InitScheme};
    use crate::model::{gen_model, ModelConfig};
    use crate::train::ToyTask;

    #[test]
    fn quadratic_probe() {
        let g = finite_diff_grad(|t| Ok(t * t), 3.0, 1e-3).unwrap();
        assert!((g - 6.0).abs() < 1e-8);
        assert!(finite_diff_grad(Ok, 0.0, 0.0).is_err());
    }

    #[test]
    fn every_variant_passes_a_short_check() {
        let m = ModelConfig::preset("tiny").unwrap();
        let base = gen_model(&m, 1).unwrap().cast::<f64>();
        let ex = ToyTask::copy(64, 6, 1, 5).dataset().unwrap().remove(0);
        let cfg = GradCheckConfig {
            coords: 12,
            ..GradCheckConfig::default()
        };
        for v in Variant::ALL.into_iter().skip(1) {
            let c = AdapterConfig::new(v, 8).with_seed(2).with_init(InitScheme::BothRandom);
            let ad = init_adapters(&m, &c).unwrap().cast::<f64>();
            let rep = grad_check(&base, &ad, &ex, &cfg).unwrap();
            assert!(
                rep.pass,
                "{v}: {:?}",
                rep.coords.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
            );
        }
    }
}
