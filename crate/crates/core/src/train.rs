//! Two-stage training: context autoencoder first, then the regression
//! model with the autoencoder's encoder frozen.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{sample_weights, Augmentation, AugmentConfig, Sample, WeightedSampler};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{stack, ArchConfig, Component, ModelBundle, Variant};
use crate::nn::Pass;
use crate::optim::{
    early_stop, lr_at, masked_mae_batch, reconstruction_loss_with_grad, Adam, StopDecision,
    TrainConfig,
};
use crate::tensor::{Array, TensorArray};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    /// Loss driving early stopping; the training loss when there is no
    /// validation split.
    pub val_loss: f64,
    pub lr: f64,
    pub val_mae: Option<f64>,
    pub val_mse: Option<f64>,
    pub val_mssim: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
    TrainLossTarget,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::MaxEpochs => "max_epochs",
            StopReason::EarlyStop => "early_stop",
            StopReason::TrainLossTarget => "train_loss_target",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub stage: String,
    pub rows: Vec<EpochRow>,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainReport {
    pub fn best_val_loss(&self) -> f64 {
        self.rows[self.best_epoch].val_loss
    }

    pub fn final_train_loss(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.train_loss)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,lr,val_mae,val_mse,val_mssim\n");
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |v| v.to_string());
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.epoch,
                r.train_loss,
                r.val_loss,
                r.lr,
                opt(r.val_mae),
                opt(r.val_mse),
                opt(r.val_mssim)
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "stage={}\nepochs={}\nbest_epoch={}\nbest_val_loss={}\nfinal_train_loss={}\nstop_reason={}\n",
            self.stage,
            self.rows.len(),
            self.best_epoch,
            self.best_val_loss(),
            self.final_train_loss(),
            self.stop_reason
        )
    }

    /// Writes `report.csv` and `summary.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("report.csv");
        std::fs::write(&p, self.to_table()).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("summary.txt");
        std::fs::write(&p, self.summary()).map_err(|e| Error::io(&p, e))
    }
}

/// Stacks batch-of-one arrays along the batch axis.
fn concat_batch(items: &[&Array<f32>]) -> Array<f32> {
    let mut shape = items[0].shape().to_vec();
    shape[0] = items.iter().map(|a| a.shape()[0]).sum();
    let mut data = Vec::with_capacity(items.iter().map(|a| a.len()).sum());
    for a in items {
        data.extend_from_slice(a.data());
    }
    Array::raw(shape, data)
}

fn stack_maps(items: &[&TensorArray]) -> Array<f32> {
    stack::<f32>(items)
}

fn update_components(
    bundle: &mut ModelBundle<f32>,
    adam: &mut Adam<f32>,
    components: &[Component],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let mut grads_ok = Ok(());
    for &c in components {
        bundle.visit_component(c, &mut |p| {
            if grads_ok.is_ok() {
                grads_ok = Adam::check_grads([p]);
            }
        });
    }
    grads_ok?;
    adam.begin_step();
    for &c in components {
        bundle.visit_component_mut(c, &mut |p| adam.update(p, lr, cfg));
    }
    Ok(())
}

fn check_finite_loss(loss: f64, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            param: what.to_string(),
        })
    }
}

/// Epoch order: weighted draws with replacement or a plain shuffle.
fn epoch_order(rng: &mut ChaCha8Rng, n: usize, sampler: Option<&WeightedSampler>) -> Vec<usize> {
    match sampler {
        Some(s) => (0..n).map(|_| s.draw(rng)).collect(),
        None => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            idx
        }
    }
}

fn training_rng(cfg: &TrainConfig, stage: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(100 + stage);
    rng
}

struct Progress {
    rows: Vec<EpochRow>,
    history: Vec<f64>,
    best: Option<(usize, f64)>,
}

impl Progress {
    fn new() -> Self {
        Progress {
            rows: Vec::new(),
            history: Vec::new(),
            best: None,
        }
    }

    /// Records a row; returns true when it is a strict improvement.
    fn push(&mut self, row: EpochRow) -> bool {
        let improved = self.best.is_none_or(|(_, b)| row.val_loss < b);
        if improved {
            self.best = Some((row.epoch, row.val_loss));
        }
        self.history.push(row.val_loss);
        self.rows.push(row);
        improved
    }
}

fn flip_only(aug: &AugmentConfig) -> AugmentConfig {
    AugmentConfig {
        p_erase: 0.0,
        ..aug.clone()
    }
}

/// Stage 1: fits `ae_enc` + `ae_dec` to reconstruct context tiles under
/// MSE, with flip augmentation.
pub fn train_autoencoder(
    train: &[Sample],
    val: &[Sample],
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<(ModelBundle<f32>, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::config("autoencoder training needs at least one sample"));
    }
    let mut bundle = ModelBundle::<f32>::init(arch, Variant::Proposed, cfg.seed)?;
    let components = [Component::AeEnc, Component::AeDec];
    let mut adam = Adam::new();
    let mut rng = training_rng(cfg, 1);
    let aug_cfg = flip_only(&cfg.augment);
    let val_tiles: Vec<Array<f32>> = val
        .chunks(cfg.batch_size)
        .map(|c| stack::<f32>(&c.iter().map(|s| &s.context).collect::<Vec<_>>()))
        .collect();
    let mut progress = Progress::new();
    let mut snapshot = None;
    let mut stop = StopReason::MaxEpochs;

    for epoch in 0..cfg.max_epochs {
        let lr = lr_at(epoch as f64, cfg)?;
        let order = epoch_order(&mut rng, train.len(), None);
        let mut sum = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let tiles: Vec<TensorArray> = chunk
                .iter()
                .map(|&i| {
                    let ctx = &train[i].context;
                    let (h, w) = (ctx.shape()[0], ctx.shape()[1]);
                    Augmentation::draw(&mut rng, &aug_cfg, h, w).flip(ctx)
                })
                .collect();
            let x = stack::<f32>(&tiles.iter().collect::<Vec<_>>());
            let recon = bundle.reconstruct(&x, Pass::TRAIN)?;
            let (loss, grad) = reconstruction_loss_with_grad(&recon, &x)?;
            check_finite_loss(loss, "reconstruction loss")?;
            bundle.zero_grad();
            bundle.reconstruct_backward(&grad);
            update_components(&mut bundle, &mut adam, &components, lr, cfg)?;
            sum += loss * chunk.len() as f64;
            count += chunk.len();
        }
        let train_loss = sum / count as f64;
        let val_loss = if val_tiles.is_empty() {
            train_loss
        } else {
            let mut s = 0.0;
            for x in &val_tiles {
                let recon = bundle.reconstruct(x, Pass::EVAL)?;
                s += reconstruction_loss_with_grad(&recon, x)?.0 * x.shape()[0] as f64;
            }
            s / val.len() as f64
        };
        check_finite_loss(val_loss, "validation loss")?;
        log::info!("ae epoch {epoch}: train {train_loss:.6} val {val_loss:.6} lr {lr:.3e}");
        if progress.push(EpochRow {
            epoch,
            train_loss,
            val_loss,
            lr,
            val_mae: None,
            val_mse: None,
            val_mssim: None,
        }) {
            snapshot = Some(bundle.clone());
        }
        if cfg.train_loss_target.is_some_and(|t| train_loss < t) {
            stop = StopReason::TrainLossTarget;
            break;
        }
        if let StopDecision::Stop { .. } = early_stop(&progress.history, cfg.patience) {
            stop = StopReason::EarlyStop;
            break;
        }
    }
    finish(bundle, snapshot, progress, stop, "autoencoder")
}

fn finish(
    bundle: ModelBundle<f32>,
    snapshot: Option<ModelBundle<f32>>,
    progress: Progress,
    stop: StopReason,
    stage: &str,
) -> Result<(ModelBundle<f32>, TrainReport)> {
    let Some((best_epoch, _)) = progress.best else {
        return Err(Error::config("max_epochs must be at least 1"));
    };
    let bundle = snapshot.unwrap_or(bundle);
    Ok((
        bundle,
        TrainReport {
            stage: stage.to_string(),
            rows: progress.rows,
            best_epoch,
            stop_reason: stop,
        },
    ))
}

/// Checks that a stage-1 bundle can feed a stage-2 model of `arch`.
pub fn check_ae_compatible(ae: &ArchConfig, arch: &ArchConfig) -> Result<()> {
    let same = ae.context_size == arch.context_size
        && ae.context_bands == arch.context_bands
        && ae.ae_channels() == arch.ae_channels()
        && ae.ae_pools == arch.ae_pools
        && ae.latent_size() == arch.latent_size()
        && ae.fused_channels() == arch.fused_channels();
    if same {
        Ok(())
    } else {
        Err(Error::config(format!(
            "autoencoder checkpoint (context {}, channels {:?}, fused width {}) does not match \
             the model (context {}, channels {:?}, fused width {})",
            ae.context_size,
            ae.ae_channels(),
            ae.fused_channels(),
            arch.context_size,
            arch.ae_channels(),
            arch.fused_channels()
        )))
    }
}

/// Stage 2: trains the regression model. The proposed variant takes its
/// context encoder from `ae` and keeps it frozen; the baseline refuses one.
pub fn train_model(
    train: &[Sample],
    val: &[Sample],
    arch: &ArchConfig,
    cfg: &TrainConfig,
    variant: Variant,
    ae: Option<&ModelBundle<f32>>,
) -> Result<(ModelBundle<f32>, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::config("training needs at least one sample"));
    }
    let mut bundle = ModelBundle::<f32>::init(arch, variant, cfg.seed)?;
    match (variant, ae) {
        (Variant::Baseline, Some(_)) => {
            return Err(Error::config("the baseline variant does not use an autoencoder"))
        }
        (Variant::Proposed, None) => {
            return Err(Error::config(
                "the proposed variant needs a trained autoencoder checkpoint",
            ))
        }
        (Variant::Proposed, Some(ae)) => {
            check_ae_compatible(&ae.arch, arch)?;
            bundle.ae_enc = ae.ae_enc.clone();
            bundle.ae_dec = ae.ae_dec.clone();
            bundle.freeze(Component::AeEnc);
            bundle.freeze(Component::AeDec);
        }
        (Variant::Baseline, None) => {}
    }
    let components = variant.trained_components();
    let mut adam = Adam::new();
    let mut rng = training_rng(cfg, 2);
    let sampler = if cfg.weighted_sampling {
        let means: Vec<f64> = train.iter().map(|s| s.target.mean()).collect();
        Some(WeightedSampler::new(&sample_weights(&means))?)
    } else {
        None
    };
    // the context encoder is frozen and deterministic, so its latent only
    // depends on the sample and the flips applied to the tile
    let mut latents: HashMap<(usize, bool, bool), Array<f32>> = HashMap::new();
    let mut progress = Progress::new();
    let mut snapshot = None;
    let mut stop = StopReason::MaxEpochs;
    let (h, w) = (arch.patch_size, arch.patch_size);

    for epoch in 0..cfg.max_epochs {
        let lr = lr_at(epoch as f64, cfg)?;
        let order = epoch_order(&mut rng, train.len(), sampler.as_ref());
        let mut sum = 0.0;
        let mut used = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let augs: Vec<Augmentation> = chunk
                .iter()
                .map(|_| Augmentation::draw(&mut rng, &cfg.augment, h, w))
                .collect();
            let samples: Vec<Sample> = chunk
                .iter()
                .zip(&augs)
                .map(|(&i, a)| a.apply(&train[i]))
                .collect();
            let patch = stack_maps(&samples.iter().map(|s| &s.patch).collect::<Vec<_>>());
            let target = stack_maps(&samples.iter().map(|s| &s.target).collect::<Vec<_>>());
            let mask = stack_maps(&samples.iter().map(|s| &s.water_mask).collect::<Vec<_>>());
            let (geo, ctx) = match variant {
                Variant::Baseline => (None, None),
                Variant::Proposed => {
                    for (k, (&i, a)) in chunk.iter().zip(&augs).enumerate() {
                        let key = (i, a.hflip, a.vflip);
                        if let Entry::Vacant(slot) = latents.entry(key) {
                            let tile = stack::<f32>(&[&samples[k].context]);
                            slot.insert(bundle.ae_encoder_forward(&tile, Pass::EVAL)?);
                        }
                    }
                    let parts: Vec<&Array<f32>> = chunk
                        .iter()
                        .zip(&augs)
                        .map(|(&i, a)| &latents[&(i, a.hflip, a.vflip)])
                        .collect();
                    let geo =
                        stack_maps(&samples.iter().map(|s| &s.geo.values).collect::<Vec<_>>());
                    (Some(geo), Some(concat_batch(&parts)))
                }
            };
            let logits = bundle.forward_regression(&patch, geo.as_ref(), ctx.as_ref(), Pass::TRAIN)?;
            let batch = match masked_mae_batch(&logits, &target, &mask) {
                Ok(b) => b,
                Err(Error::ExcludedSample) => {
                    log::warn!("epoch {epoch}: skipping a batch without land pixels");
                    continue;
                }
                Err(e) => return Err(e),
            };
            check_finite_loss(batch.loss, "masked MAE loss")?;
            bundle.zero_grad();
            bundle.backward_regression(&batch.grad);
            update_components(&mut bundle, &mut adam, components, lr, cfg)?;
            sum += batch.loss * batch.used_samples as f64;
            used += batch.used_samples;
        }
        if used == 0 {
            return Err(Error::config("no training sample has land pixels"));
        }
        let train_loss = sum / used as f64;
        check_finite_loss(train_loss, "masked MAE loss")?;
        let (val_loss, report) = if val.is_empty() {
            (train_loss, None)
        } else {
            let r = evaluate(&bundle, val, variant)?;
            (mean_sample_mae(&r), Some(r))
        };
        check_finite_loss(val_loss, "validation loss")?;
        log::info!(
            "{variant} epoch {epoch}: train {train_loss:.5} val {val_loss:.5} lr {lr:.3e}"
        );
        if progress.push(EpochRow {
            epoch,
            train_loss,
            val_loss,
            lr,
            val_mae: report.as_ref().map(|r| r.mae),
            val_mse: report.as_ref().map(|r| r.mse),
            val_mssim: report.as_ref().map(|r| r.mssim),
        }) {
            snapshot = Some(bundle.clone());
        }
        if cfg.train_loss_target.is_some_and(|t| train_loss < t) {
            stop = StopReason::TrainLossTarget;
            break;
        }
        if let StopDecision::Stop { .. } = early_stop(&progress.history, cfg.patience) {
            stop = StopReason::EarlyStop;
            break;
        }
    }
    finish(bundle, snapshot, progress, stop, variant.name())
}

/// Sample-averaged masked MAE, matching the training loss definition.
fn mean_sample_mae(r: &EvalReport) -> f64 {
    let v: Vec<f64> = r.samples.iter().filter_map(|s| s.mae).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}
