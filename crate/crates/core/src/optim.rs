//! Losses, Adam with decoupled weight decay, the warm-restart cosine
//! schedule and early stopping.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::str::FromStr;

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::nn::Param;
use crate::tensor::{Array, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F16,
}

impl FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "32" | "f32" => Ok(Precision::F32),
            "16" | "f16" => Ok(Precision::F16),
            _ => Err(Error::config(format!("unknown precision `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// First cycle length, in epochs.
    pub t0: f64,
    pub t_mult: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub precision: Precision,
    pub weighted_sampling: bool,
    pub augment: AugmentConfig,
    /// Stop as soon as the epoch's training loss falls below this value.
    pub train_loss_target: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 1e-4,
            lr_min: 0.0,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            t0: 10.0,
            t_mult: 2.0,
            patience: 15,
            max_epochs: 100,
            seed: 0,
            precision: Precision::F32,
            weighted_sampling: true,
            augment: AugmentConfig::default(),
            train_loss_target: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max > self.lr_min && self.lr_min >= 0.0) {
            return Err(Error::config(format!(
                "need lr_max > lr_min >= 0 (got {} / {})",
                self.lr_max, self.lr_min
            )));
        }
        if !(self.t0 >= 1.0 && self.t_mult >= 1.0) {
            return Err(Error::config("need t0 >= 1 and t_mult >= 1"));
        }
        if self.patience == 0 || self.batch_size == 0 {
            return Err(Error::config("patience and batch_size must be at least 1"));
        }
        if self.precision == Precision::F16 {
            return Err(Error::config(
                "16-bit compute is not available; use precision=32",
            ));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let a = &self.augment;
        vec![
            ("lr_max".into(), self.lr_max.to_string()),
            ("lr_min".into(), self.lr_min.to_string()),
            ("weight_decay".into(), self.weight_decay.to_string()),
            ("beta1".into(), self.beta1.to_string()),
            ("beta2".into(), self.beta2.to_string()),
            ("eps".into(), self.eps.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("t0".into(), self.t0.to_string()),
            ("t_mult".into(), self.t_mult.to_string()),
            ("patience".into(), self.patience.to_string()),
            ("max_epochs".into(), self.max_epochs.to_string()),
            ("train_seed".into(), self.seed.to_string()),
            (
                "precision".into(),
                match self.precision {
                    Precision::F32 => "32".into(),
                    Precision::F16 => "16".into(),
                },
            ),
            ("weighted_sampling".into(), self.weighted_sampling.to_string()),
            ("p_hflip".into(), a.p_hflip.to_string()),
            ("p_vflip".into(), a.p_vflip.to_string()),
            ("p_erase".into(), a.p_erase.to_string()),
            (
                "train_loss_target".into(),
                self.train_loss_target
                    .map_or_else(|| "none".into(), |v| v.to_string()),
            ),
        ]
    }

    /// Applies one `key=value` setting; `Ok(false)` for foreign keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(format!("bad value `{v}` for `{key}`")))
        }
        match key {
            "lr_max" => self.lr_max = p(key, value)?,
            "lr_min" => self.lr_min = p(key, value)?,
            "weight_decay" => self.weight_decay = p(key, value)?,
            "beta1" => self.beta1 = p(key, value)?,
            "beta2" => self.beta2 = p(key, value)?,
            "eps" => self.eps = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "t0" => self.t0 = p(key, value)?,
            "t_mult" => self.t_mult = p(key, value)?,
            "patience" => self.patience = p(key, value)?,
            "max_epochs" => self.max_epochs = p(key, value)?,
            "train_seed" => self.seed = p(key, value)?,
            "precision" => self.precision = value.parse()?,
            "weighted_sampling" => self.weighted_sampling = p(key, value)?,
            "p_hflip" => self.augment.p_hflip = p(key, value)?,
            "p_vflip" => self.augment.p_vflip = p(key, value)?,
            "p_erase" => self.augment.p_erase = p(key, value)?,
            "train_loss_target" => {
                self.train_loss_target = if value == "none" {
                    None
                } else {
                    Some(p(key, value)?)
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Mean absolute error over land pixels (`mask == 0`) of one map.
pub fn masked_mae_loss(pred: &[f32], target: &[f32], mask: &[f32]) -> Result<f64> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(Error::shape(format!(
            "pred/target/mask lengths {}/{}/{} differ",
            pred.len(),
            target.len(),
            mask.len()
        )));
    }
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for ((&p, &t), &m) in pred.iter().zip(target).zip(mask) {
        if m == 0.0 {
            sum += (p as f64 - t as f64).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::ExcludedSample);
    }
    Ok(sum / n as f64)
}

/// Batch loss and its gradient.
#[derive(Clone, Debug)]
pub struct BatchLoss<T> {
    /// Mean of per-sample masked MAE over samples with land pixels.
    pub loss: f64,
    pub grad: Array<T>,
    pub used_samples: usize,
}

/// Masked MAE over a batch of logits `[n, h, w, 1]` against targets and
/// masks `[n, h, w]`. Samples without land are skipped and get zero
/// gradient; water pixels always get zero gradient.
pub fn masked_mae_batch<T: Scalar>(
    logits: &Array<T>,
    target: &Array<T>,
    mask: &Array<T>,
) -> Result<BatchLoss<T>> {
    let n = logits.shape()[0];
    let px = logits.len() / n.max(1);
    if target.len() != logits.len() || mask.len() != logits.len() {
        return Err(Error::shape(format!(
            "logits {:?} vs target {:?} / mask {:?}",
            logits.shape(),
            target.shape(),
            mask.shape()
        )));
    }
    let land: Vec<usize> = mask
        .data()
        .chunks_exact(px)
        .map(|m| m.iter().filter(|&&v| v == T::zero()).count())
        .collect();
    let used = land.iter().filter(|&&c| c > 0).count();
    if used == 0 {
        return Err(Error::ExcludedSample);
    }
    let mut grad = vec![T::zero(); logits.len()];
    let mut total = 0.0f64;
    for b in 0..n {
        if land[b] == 0 {
            log::warn!("skipping all-water sample in batch position {b}");
            continue;
        }
        let scale = 1.0 / (land[b] as f64 * used as f64);
        let mut sum = 0.0f64;
        for i in b * px..(b + 1) * px {
            if mask.data()[i] != T::zero() {
                continue;
            }
            let d = logits.data()[i] - target.data()[i];
            sum += d.abs().as_f64();
            grad[i] = T::from_f64(scale) * sign(d);
        }
        total += sum / land[b] as f64;
    }
    Ok(BatchLoss {
        loss: total / used as f64,
        grad: Array::raw(logits.shape().to_vec(), grad),
        used_samples: used,
    })
}

#[inline]
fn sign<T: Scalar>(d: T) -> T {
    if d > T::zero() {
        T::one()
    } else if d < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Mean squared error over all elements.
pub fn reconstruction_loss<T: Scalar>(recon: &Array<T>, tile: &Array<T>) -> Result<f64> {
    Ok(reconstruction_loss_with_grad(recon, tile)?.0)
}

pub fn reconstruction_loss_with_grad<T: Scalar>(
    recon: &Array<T>,
    tile: &Array<T>,
) -> Result<(f64, Array<T>)> {
    if recon.shape() != tile.shape() {
        return Err(Error::shape(format!(
            "reconstruction {:?} vs tile {:?}",
            recon.shape(),
            tile.shape()
        )));
    }
    let n = recon.len().max(1) as f64;
    let mut sum = 0.0f64;
    let scale = T::from_f64(2.0 / n);
    let grad = recon
        .data()
        .iter()
        .zip(tile.data())
        .map(|(&r, &t)| {
            let d = r - t;
            sum += (d * d).as_f64();
            scale * d
        })
        .collect();
    Ok((sum / n, Array::raw(recon.shape().to_vec(), grad)))
}

/// Learning rate at a (possibly fractional) epoch under cosine annealing
/// with warm restarts. Cycle `i` has length `t0 * t_mult^i`.
pub fn lr_at(epoch: f64, cfg: &TrainConfig) -> Result<f64> {
    if !(epoch.is_finite() && epoch >= 0.0) {
        return Err(Error::config(format!("epoch {epoch} must be non-negative")));
    }
    let mut start = 0.0;
    let mut len = cfg.t0;
    while epoch >= start + len {
        start += len;
        len *= cfg.t_mult;
    }
    let phase = (epoch - start) / len;
    Ok(cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (PI * phase).cos()))
}

/// Adam with decoupled weight decay; moments are kept per parameter name.
#[derive(Clone, Debug, Default)]
pub struct Adam<T> {
    pub step: u64,
    moments: HashMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new() -> Self {
        Adam {
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// Fails if any gradient is non-finite, naming the first offender.
    pub fn check_grads<'a>(params: impl IntoIterator<Item = &'a Param<T>>) -> Result<()> {
        for p in params {
            if p.trainable && p.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    param: p.name.clone(),
                });
            }
        }
        Ok(())
    }

    /// Advances the step counter; call once before updating a set of
    /// parameters.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// `p <- p - lr*wd*p`, then the bias-corrected Adam update.
    pub fn update(&mut self, p: &mut Param<T>, lr: f64, cfg: &TrainConfig) {
        if !p.trainable {
            return;
        }
        debug_assert!(self.step > 0, "begin_step must precede update");
        let (m, v) = self
            .moments
            .entry(p.name.clone())
            .or_insert_with(|| (vec![T::zero(); p.value.len()], vec![T::zero(); p.value.len()]));
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));
        let decay = T::from_f64(lr * cfg.weight_decay);
        let step = T::from_f64(lr / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(cfg.eps);
        for i in 0..p.value.len() {
            let g = p.grad[i];
            if cfg.weight_decay != 0.0 {
                let v0 = p.value[i];
                p.value[i] = v0 - decay * v0;
            }
            m[i] = b1 * m[i] + one_b1 * g;
            v[i] = b2 * v[i] + one_b2 * g * g;
            p.value[i] -= step * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop { best_epoch: usize },
}

/// Index of the lowest loss (earliest on ties).
pub fn best_epoch(history: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in history.iter().enumerate() {
        if best.is_none_or(|b| v < history[b]) {
            best = Some(i);
        }
    }
    best
}

/// Stops once `patience` epochs have passed without a strict improvement
/// over the best validation loss.
pub fn early_stop(history: &[f64], patience: usize) -> StopDecision {
    match best_epoch(history) {
        Some(b) if history.len() - 1 - b >= patience => StopDecision::Stop { best_epoch: b },
        _ => StopDecision::Continue,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_param(v: f64, g: f64) -> Param<f64> {
        Param {
            name: "p".into(),
            shape: vec![1],
            value: vec![v],
            grad: vec![g],
            trainable: true,
        }
    }

    #[test]
    fn masked_mae_examples() {
        let t = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(masked_mae_loss(&t, &t, &[0.0; 4]).unwrap(), 0.0);
        let p = [0.3, 0.4, 0.5, 9.0];
        let m = [0.0, 0.0, 0.0, 1.0];
        assert!((masked_mae_loss(&p, &t, &m).unwrap() - 0.2).abs() < 1e-7);
        let p2 = [0.3, 0.4, 0.5, -3.0];
        assert_eq!(
            masked_mae_loss(&p, &t, &m).unwrap().to_bits(),
            masked_mae_loss(&p2, &t, &m).unwrap().to_bits()
        );
        assert!(matches!(
            masked_mae_loss(&p, &t, &[1.0; 4]),
            Err(Error::ExcludedSample)
        ));
    }

    #[test]
    fn batch_gradient_is_zero_on_water_and_skips_all_water() {
        let logits = Array::raw(vec![2, 1, 2, 1], vec![0.5, 0.1, 0.9, 0.9]);
        let target = Array::raw(vec![2, 1, 2], vec![0.2, 0.3, 0.0, 0.0]);
        let mask = Array::raw(vec![2, 1, 2], vec![0.0, 1.0, 1.0, 1.0]);
        let out = masked_mae_batch::<f64>(&logits, &target, &mask).unwrap();
        assert_eq!(out.used_samples, 1);
        assert!((out.loss - 0.3).abs() < 1e-12);
        assert_eq!(out.grad.data(), &[1.0, 0.0, 0.0, 0.0]);
        let all_water = Array::filled(&[2, 1, 2], 1.0);
        assert!(matches!(
            masked_mae_batch::<f64>(&logits, &target, &all_water),
            Err(Error::ExcludedSample)
        ));
    }

    #[test]
    fn reconstruction_examples() {
        let a = Array::raw(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]);
        let b = a.map(|v: f64| v + 0.1);
        assert_eq!(reconstruction_loss(&a, &a).unwrap(), 0.0);
        assert!((reconstruction_loss(&a, &b).unwrap() - 0.01).abs() < 1e-12);
        assert_eq!(
            reconstruction_loss(&a, &b).unwrap(),
            reconstruction_loss(&b, &a).unwrap()
        );
        assert!(reconstruction_loss(&a, &Array::zeros(&[4])).is_err());
    }

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0.0, &cfg).unwrap(), 1e-4);
        assert_eq!(lr_at(10.0, &cfg).unwrap(), 1e-4);
        assert!((lr_at(5.0, &cfg).unwrap() - 5e-5).abs() < 1e-18);
        assert!(lr_at(-1.0, &cfg).is_err());
    }

    #[test]
    fn adam_zero_grad_is_identity() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = scalar_param(0.7, 0.0);
        let mut opt = Adam::new();
        for _ in 0..3 {
            opt.begin_step();
            opt.update(&mut p, 1e-3, &cfg);
        }
        assert_eq!(p.value[0], 0.7);
    }

    #[test]
    fn adam_first_step_by_hand() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = scalar_param(1.0, 1.0);
        let mut opt = Adam::new();
        opt.begin_step();
        opt.update(&mut p, 1e-4, &cfg);
        // m = 0.1, v = 0.001; bias corrected m_hat = 1, v_hat = 1
        let m_hat = 0.1 / (1.0 - 0.9);
        let v_hat: f64 = 0.001 / (1.0 - 0.999);
        let expect = 1.0 - 1e-4 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p.value[0] - expect).abs() < 1e-15);
        assert!(((1.0 - p.value[0]) - 1e-4).abs() < 1e-11);
    }

    #[test]
    fn decoupled_decay_by_hand() {
        let cfg = TrainConfig::default();
        let mut p = scalar_param(1.0, 0.0);
        let mut opt = Adam::new();
        opt.begin_step();
        opt.update(&mut p, 1e-4, &cfg);
        assert!((p.value[0] - (1.0 - 1e-7)).abs() < 1e-16);
    }

    #[test]
    fn non_finite_grad_names_parameter() {
        let mut p = scalar_param(1.0, f64::NAN);
        p.name = "unet_dec.head.weight".into();
        let err = Adam::check_grads([&p]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref param } if param == "unet_dec.head.weight"));
    }

    #[test]
    fn early_stop_examples() {
        let dec: Vec<f64> = (0..40).map(|i| 1.0 / (i + 1) as f64).collect();
        for k in 1..=dec.len() {
            assert_eq!(early_stop(&dec[..k], 15), StopDecision::Continue);
        }
        let mut h = vec![1.0, 0.9, 0.8, 0.5];
        while h.len() < 18 {
            h.push(0.5);
            assert_eq!(early_stop(&h, 15), StopDecision::Continue);
        }
        h.push(0.5);
        assert_eq!(h.len() - 1, 18);
        assert_eq!(early_stop(&h, 15), StopDecision::Stop { best_epoch: 3 });
        assert_eq!(early_stop(&[0.3], 15), StopDecision::Continue);
    }

    #[test]
    fn f16_precision_is_rejected() {
        let cfg = TrainConfig {
            precision: Precision::F16,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #[test]
        fn restarts_hit_lr_max(i in 0usize..6) {
            let cfg = TrainConfig::default();
            let start: f64 = (0..i).map(|k| 10.0 * 2f64.powi(k as i32)).sum();
            prop_assert_eq!(lr_at(start, &cfg).unwrap(), cfg.lr_max);
        }

        #[test]
        fn schedule_is_bounded(e in 0.0f64..500.0) {
            let cfg = TrainConfig::default();
            let lr = lr_at(e, &cfg).unwrap();
            prop_assert!(lr >= cfg.lr_min && lr <= cfg.lr_max);
        }

        #[test]
        fn best_epoch_never_after_stop(h in proptest::collection::vec(0.0f64..1.0, 1..60)) {
            if let StopDecision::Stop { best_epoch } = early_stop(&h, 5) {
                prop_assert!(best_epoch < h.len());
                prop_assert!(h.len() - 1 - best_epoch >= 5);
            }
        }
    }
}
