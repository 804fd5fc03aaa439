//! Water-masked MAE, MSE and mean structural similarity.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{ModelBundle, Variant};
use crate::tensor::TensorArray;

fn check_same(pred: &TensorArray, target: &TensorArray, mask: &TensorArray) -> Result<()> {
    if pred.shape() != target.shape() || pred.shape() != mask.shape() {
        return Err(Error::shape(format!(
            "pred {:?}, target {:?}, mask {:?}",
            pred.shape(),
            target.shape(),
            mask.shape()
        )));
    }
    Ok(())
}

/// `(sum |d|, sum d^2, land pixel count)` over unmasked pixels.
fn masked_sums(pred: &TensorArray, target: &TensorArray, mask: &TensorArray) -> (f64, f64, usize) {
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut n = 0;
    for ((&p, &t), &m) in pred.data().iter().zip(target.data()).zip(mask.data()) {
        if m == 0.0 {
            let d = p as f64 - t as f64;
            abs += d.abs();
            sq += d * d;
            n += 1;
        }
    }
    (abs, sq, n)
}

pub fn masked_mae(pred: &TensorArray, target: &TensorArray, mask: &TensorArray) -> Result<f64> {
    check_same(pred, target, mask)?;
    match masked_sums(pred, target, mask) {
        (_, _, 0) => Err(Error::ExcludedSample),
        (a, _, n) => Ok(a / n as f64),
    }
}

pub fn masked_mse(pred: &TensorArray, target: &TensorArray, mask: &TensorArray) -> Result<f64> {
    check_same(pred, target, mask)?;
    match masked_sums(pred, target, mask) {
        (_, _, 0) => Err(Error::ExcludedSample),
        (_, s, n) => Ok(s / n as f64),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub dynamic_range: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            dynamic_range: 1.0,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    /// Normalized 1-D Gaussian taps.
    pub fn kernel(&self) -> Vec<f64> {
        let mid = (self.window as f64 - 1.0) / 2.0;
        let g: Vec<f64> = (0..self.window)
            .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimResult {
    pub value: f64,
    /// Number of windows averaged.
    pub windows: usize,
    /// No window was free of water, so every window was used.
    pub fallback: bool,
}

/// SSIM map value from local statistics.
#[inline]
pub fn ssim_from_stats(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64, c1: f64, c2: f64) -> f64 {
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// Mean SSIM over the valid (fully inside) Gaussian windows that contain no
/// water pixel.
pub fn mssim(
    pred: &TensorArray,
    target: &TensorArray,
    mask: &TensorArray,
    cfg: &SsimConfig,
) -> Result<SsimResult> {
    check_same(pred, target, mask)?;
    if pred.ndim() != 2 {
        return Err(Error::shape(format!("mssim expects h x w maps, got {:?}", pred.shape())));
    }
    let (h, w) = (pred.shape()[0], pred.shape()[1]);
    let k = cfg.window;
    if k == 0 || h < k || w < k {
        return Err(Error::config(format!(
            "{h}x{w} map is smaller than the {k}x{k} SSIM window"
        )));
    }
    let g = cfg.kernel();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let x: Vec<f64> = pred.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = target.data().iter().map(|&v| v as f64).collect();

    // horizontal pass over every row, then vertical pass
    let hpass = |f: &dyn Fn(usize) -> f64| -> Vec<f64> {
        let mut out = vec![0.0; h * ow];
        for r in 0..h {
            for c in 0..ow {
                let mut acc = 0.0;
                for (t, gt) in g.iter().enumerate() {
                    acc += gt * f(r * w + c + t);
                }
                out[r * ow + c] = acc;
            }
        }
        out
    };
    let vpass = |a: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; oh * ow];
        for r in 0..oh {
            for c in 0..ow {
                let mut acc = 0.0;
                for (t, gt) in g.iter().enumerate() {
                    acc += gt * a[(r + t) * ow + c];
                }
                out[r * ow + c] = acc;
            }
        }
        out
    };
    let mx = vpass(&hpass(&|i| x[i]));
    let my = vpass(&hpass(&|i| y[i]));
    let mxx = vpass(&hpass(&|i| x[i] * x[i]));
    let myy = vpass(&hpass(&|i| y[i] * y[i]));
    let mxy = vpass(&hpass(&|i| x[i] * y[i]));

    // 2-D prefix sum of the water mask for window occupancy
    let mut water = vec![0usize; (h + 1) * (w + 1)];
    for r in 0..h {
        for c in 0..w {
            let m = usize::from(mask.data()[r * w + c] != 0.0);
            water[(r + 1) * (w + 1) + c + 1] =
                m + water[r * (w + 1) + c + 1] + water[(r + 1) * (w + 1) + c] - water[r * (w + 1) + c];
        }
    }
    let window_water = |r: usize, c: usize| {
        water[(r + k) * (w + 1) + c + k] + water[r * (w + 1) + c]
            - water[r * (w + 1) + c + k]
            - water[(r + k) * (w + 1) + c]
    };

    let (c1, c2) = (cfg.c1(), cfg.c2());
    let mut sum_clean = 0.0;
    let mut n_clean = 0usize;
    let mut sum_all = 0.0;
    for r in 0..oh {
        for c in 0..ow {
            let i = r * ow + c;
            let v = ssim_from_stats(
                mx[i],
                my[i],
                mxx[i] - mx[i] * mx[i],
                myy[i] - my[i] * my[i],
                mxy[i] - mx[i] * my[i],
                c1,
                c2,
            );
            sum_all += v;
            if window_water(r, c) == 0 {
                sum_clean += v;
                n_clean += 1;
            }
        }
    }
    Ok(if n_clean > 0 {
        SsimResult {
            value: sum_clean / n_clean as f64,
            windows: n_clean,
            fallback: false,
        }
    } else {
        SsimResult {
            value: sum_all / (oh * ow) as f64,
            windows: oh * ow,
            fallback: true,
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub seed: u64,
    /// `None` when the sample has no land pixel.
    pub mae: Option<f64>,
    pub mse: Option<f64>,
    pub mssim: f64,
    pub mssim_fallback: bool,
    pub land_pixels: usize,
    pub total_pixels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub variant: String,
    pub samples: Vec<SampleMetrics>,
    /// Pixel-weighted over all land pixels.
    pub mae: f64,
    pub mse: f64,
    /// Sample-averaged.
    pub mssim: f64,
    pub land_pixels: usize,
    pub water_fraction: f64,
}

impl EvalReport {
    pub fn from_samples(variant: &str, samples: Vec<SampleMetrics>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::config("cannot evaluate an empty split"));
        }
        let mut abs = 0.0;
        let mut sq = 0.0;
        let mut land = 0usize;
        let mut total = 0usize;
        for s in &samples {
            if let (Some(a), Some(q)) = (s.mae, s.mse) {
                abs += a * s.land_pixels as f64;
                sq += q * s.land_pixels as f64;
            }
            land += s.land_pixels;
            total += s.total_pixels;
        }
        let (mae, mse) = if land > 0 {
            (abs / land as f64, sq / land as f64)
        } else {
            (f64::NAN, f64::NAN)
        };
        let mssim = samples.iter().map(|s| s.mssim).sum::<f64>() / samples.len() as f64;
        Ok(EvalReport {
            variant: variant.to_string(),
            mae,
            mse,
            mssim,
            land_pixels: land,
            water_fraction: 1.0 - land as f64 / total.max(1) as f64,
            samples,
        })
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("seed,mae,mse,mssim,mssim_fallback,land_pixels,total_pixels\n");
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |v| v.to_string());
        for m in &self.samples {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                m.seed,
                opt(m.mae),
                opt(m.mse),
                m.mssim,
                m.mssim_fallback,
                m.land_pixels,
                m.total_pixels
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "variant={}\nsamples={}\nmae={}\nmse={}\nmssim={}\nland_pixels={}\nwater_fraction={}\n",
            self.variant,
            self.samples.len(),
            self.mae,
            self.mse,
            self.mssim,
            self.land_pixels,
            self.water_fraction
        )
    }
}

/// Metrics of one predicted map against its sample.
pub fn sample_metrics(pred: &TensorArray, sample: &Sample, cfg: &SsimConfig) -> Result<SampleMetrics> {
    let target = &sample.target;
    let mask = &sample.water_mask;
    check_same(pred, target, mask)?;
    let (abs, sq, n) = masked_sums(pred, target, mask);
    let ss = mssim(pred, target, mask, cfg)?;
    Ok(SampleMetrics {
        seed: sample.seed,
        mae: (n > 0).then(|| abs / n as f64),
        mse: (n > 0).then(|| sq / n as f64),
        mssim: ss.value,
        mssim_fallback: ss.fallback,
        land_pixels: n,
        total_pixels: target.len(),
    })
}

/// Scores precomputed predictions, one per sample.
pub fn evaluate_predictions(
    variant: &str,
    preds: &[TensorArray],
    samples: &[Sample],
) -> Result<EvalReport> {
    if preds.len() != samples.len() {
        return Err(Error::shape("one prediction per sample required"));
    }
    let cfg = SsimConfig::default();
    let per = preds
        .iter()
        .zip(samples)
        .map(|(p, s)| sample_metrics(p, s, &cfg))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_samples(variant, per)
}

/// Predicts every sample and aggregates the metrics. Workers run on
/// private copies of the bundle, so results do not depend on scheduling.
pub fn evaluate(bundle: &ModelBundle<f32>, samples: &[Sample], variant: Variant) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::config("cannot evaluate an empty split"));
    }
    let cfg = SsimConfig::default();
    let per = samples
        .par_iter()
        .map_init(
            || bundle.clone(),
            |b, s| {
                let pred = b.predict(s.into(), variant)?;
                sample_metrics(&pred, s, &cfg)
            },
        )
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_samples(variant.name(), per)
}
