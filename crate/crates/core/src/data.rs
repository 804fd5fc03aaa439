//! Synthetic geospatial dataset, on-disk layout, cropping, imbalance-aware
//! sample weighting and augmentation.
//!
//! Every sample is drawn from smooth band fields over the full context
//! extent. The regression target mixes a local term (band 3 at the pixel), a
//! context term (band 3 averaged over the whole context tile) and a
//! geographic term, so a patch-only model is missing information that the
//! context tile and the coordinates supply.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geo::{build_geo_grid, GeoGrid, GeoPoint, LonMode};
use crate::tensor::{read_tensor, write_tensor, TensorArray};

pub const N_BANDS: usize = 10;
/// Bands copied into the context tile, in channel order.
pub const CONTEXT_BANDS: [usize; 3] = [3, 2, 1];
/// Band driving the local and context terms of the target.
pub const LABEL_BAND: usize = 3;
/// Ten-metre pixels expressed in degrees.
pub const PIXEL_SIZE_DEG: f64 = 10.0 / 111_320.0;
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const SAMPLE_FILES: [&str; 6] = [
    "patch.ntsr",
    "context.ntsr",
    "geo.ntsr",
    "target.ntsr",
    "mask.ntsr",
    "meta.txt",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub patch_size: usize,
    pub context_size: usize,
    pub n_sinusoids: usize,
    pub water_band: usize,
    pub water_threshold: f64,
    pub w_local: f64,
    pub w_ctx: f64,
    pub w_geo: f64,
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_mode: LonMode,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            patch_size: 64,
            context_size: 256,
            n_sinusoids: 8,
            water_band: 7,
            water_threshold: 0.85,
            w_local: 0.5,
            w_ctx: 0.3,
            w_geo: 0.2,
            lat_min: -60.0,
            lat_max: 70.0,
            lon_mode: LonMode::FullCircle,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.context_size != 4 * self.patch_size {
            return Err(Error::config(format!(
                "context_size ({}) must be 4 x patch_size ({})",
                self.context_size, self.patch_size
            )));
        }
        if self.n_sinusoids == 0 {
            return Err(Error::config("n_sinusoids must be at least 1"));
        }
        if self.water_band >= N_BANDS {
            return Err(Error::config(format!(
                "water_band {} out of range",
                self.water_band
            )));
        }
        let wsum = self.w_local + self.w_ctx + self.w_geo;
        if (wsum - 1.0).abs() > 1e-9 || [self.w_local, self.w_ctx, self.w_geo].iter().any(|w| *w < 0.0)
        {
            return Err(Error::config(format!(
                "label weights must be non-negative and sum to 1 (got {wsum})"
            )));
        }
        if !(-90.0..=90.0).contains(&self.lat_min)
            || !(-90.0..=90.0).contains(&self.lat_max)
            || self.lat_min > self.lat_max
        {
            return Err(Error::config("latitude range must lie in [-90, 90]"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("patch_size".into(), self.patch_size.to_string()),
            ("context_size".into(), self.context_size.to_string()),
            ("n_sinusoids".into(), self.n_sinusoids.to_string()),
            ("water_band".into(), self.water_band.to_string()),
            ("water_threshold".into(), self.water_threshold.to_string()),
            ("w_local".into(), self.w_local.to_string()),
            ("w_ctx".into(), self.w_ctx.to_string()),
            ("w_geo".into(), self.w_geo.to_string()),
            ("lat_min".into(), self.lat_min.to_string()),
            ("lat_max".into(), self.lat_max.to_string()),
            ("lon_mode".into(), self.lon_mode.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }

    /// Applies one `key=value` setting. Returns `Ok(false)` for keys this
    /// struct does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(format!("bad value `{v}` for `{key}`")))
        }
        match key {
            "patch_size" => self.patch_size = p(key, value)?,
            "context_size" => self.context_size = p(key, value)?,
            "n_sinusoids" => self.n_sinusoids = p(key, value)?,
            "water_band" => self.water_band = p(key, value)?,
            "water_threshold" => self.water_threshold = p(key, value)?,
            "w_local" => self.w_local = p(key, value)?,
            "w_ctx" => self.w_ctx = p(key, value)?,
            "w_geo" => self.w_geo = p(key, value)?,
            "lat_min" => self.lat_min = p(key, value)?,
            "lat_max" => self.lat_max = p(key, value)?,
            "lon_mode" => self.lon_mode = value.parse()?,
            "seed" => self.seed = p(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// One training unit. Spatial arrays are row-major h x w (x c).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub patch: TensorArray,
    pub context: TensorArray,
    pub geo: GeoGrid,
    pub target: TensorArray,
    pub water_mask: TensorArray,
    pub center: GeoPoint,
    pub seed: u64,
}

impl Sample {
    pub fn patch_size(&self) -> usize {
        self.patch.shape()[0]
    }

    pub fn land_pixels(&self) -> usize {
        self.water_mask.data().iter().filter(|&&m| m == 0.0).count()
    }
}

/// Per-sample generator stream: one ChaCha stream per sample id under the
/// dataset seed.
pub fn sample_rng(dataset_seed: u64, sample_seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(dataset_seed);
    rng.set_stream(sample_seed);
    rng
}

/// Geographic term of the target, in `[0, 1]`.
pub fn geo_term(lat_deg: f64, lon_deg: f64) -> f64 {
    0.5 * (1.0 + (PI * lat_deg / 90.0).sin() * (PI * lon_deg / 180.0).cos())
}

#[derive(Clone, Copy, Debug)]
struct Wave {
    amp: f64,
    u: f64,
    v: f64,
    phase: f64,
}

fn draw_waves(rng: &mut ChaCha8Rng, k: usize) -> Vec<Wave> {
    (0..k)
        .map(|_| Wave {
            amp: 1.0 - rng.random::<f64>(),
            u: rng.random_range(1..=6) as f64,
            v: rng.random_range(1..=6) as f64,
            phase: rng.random::<f64>() * 2.0 * PI,
        })
        .collect()
}

/// Min-max normalized sum of sinusoids over an `s x s` grid (x = column,
/// y = row).
fn band_field(waves: &[Wave], s: usize) -> Vec<f64> {
    let sf = s as f64;
    let mut field = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let (xf, yf) = (x as f64, y as f64);
            let v: f64 = waves
                .iter()
                .map(|w| w.amp * (2.0 * PI * (w.u * xf + w.v * yf) / sf + w.phase).sin())
                .sum();
            field.push(v);
        }
    }
    let (lo, hi) = field
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    if span > 0.0 {
        field.iter_mut().for_each(|v| *v = (*v - lo) / span);
    } else {
        field.iter_mut().for_each(|v| *v = 0.5);
    }
    field
}

/// Draws the sample's center, then builds everything else from it.
pub fn generate_sample(params: &SynthParams, sample_seed: u64) -> Result<Sample> {
    params.validate()?;
    let mut rng = sample_rng(params.seed, sample_seed);
    let lat = params.lat_min + (params.lat_max - params.lat_min) * rng.random::<f64>();
    let lon = -180.0 + 360.0 * rng.random::<f64>();
    build_sample(params, sample_seed, GeoPoint::new(lat, lon)?, &mut rng)
}

/// Like [`generate_sample`] but with the center fixed by the caller. The band
/// fields are identical to the ones `generate_sample` draws for the same
/// seeds.
pub fn generate_sample_at(
    params: &SynthParams,
    sample_seed: u64,
    center: GeoPoint,
) -> Result<Sample> {
    params.validate()?;
    let mut rng = sample_rng(params.seed, sample_seed);
    let _: f64 = rng.random();
    let _: f64 = rng.random();
    build_sample(params, sample_seed, center, &mut rng)
}

fn build_sample(
    params: &SynthParams,
    sample_seed: u64,
    center: GeoPoint,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    let s = params.context_size;
    let h = params.patch_size;
    let off = (s - h) / 2;

    let bands: Vec<Vec<f64>> = (0..N_BANDS)
        .map(|_| draw_waves(rng, params.n_sinusoids))
        .collect::<Vec<_>>()
        .iter()
        .map(|w| band_field(w, s))
        .collect();

    let mut context = Vec::with_capacity(s * s * 3);
    for p in 0..s * s {
        for &b in &CONTEXT_BANDS {
            context.push(bands[b][p] as f32);
        }
    }

    let mut patch = Vec::with_capacity(h * h * N_BANDS);
    for y in 0..h {
        for x in 0..h {
            let p = (y + off) * s + (x + off);
            for band in &bands {
                patch.push(band[p] as f32);
            }
        }
    }

    let label = &bands[LABEL_BAND];
    let ctx_mean = label.iter().sum::<f64>() / (s * s) as f64;
    let geo = geo_term(center.lat_deg, center.lon_deg);
    let offset = params.w_ctx * ctx_mean + params.w_geo * geo;

    let mut target = Vec::with_capacity(h * h);
    let mut mask = Vec::with_capacity(h * h);
    for y in 0..h {
        for x in 0..h {
            let p = (y + off) * s + (x + off);
            let t = (params.w_local * label[p] + offset).clamp(0.0, 1.0);
            target.push(t as f32);
            let water = bands[params.water_band][p] > params.water_threshold;
            mask.push(if water { 1.0 } else { 0.0 });
        }
    }

    Ok(Sample {
        patch: TensorArray::new(&[h, h, N_BANDS], patch)?,
        context: TensorArray::new(&[s, s, 3], context)?,
        geo: build_geo_grid(center, h, h, PIXEL_SIZE_DEG, params.lon_mode)?,
        target: TensorArray::new(&[h, h], target)?,
        water_mask: TensorArray::new(&[h, h], mask)?,
        center,
        seed: sample_seed,
    })
}

/// Returns the centered `size x size` window of an `H x W (x C)` array.
/// When `H - size` is odd the origin rounds down.
pub fn center_crop(tile: &TensorArray, size: usize) -> Result<TensorArray> {
    let shape = tile.shape();
    if !(shape.len() == 2 || shape.len() == 3) {
        return Err(Error::shape(format!("cannot crop array of shape {shape:?}")));
    }
    let (hh, ww) = (shape[0], shape[1]);
    let c = shape.get(2).copied().unwrap_or(1);
    if size == 0 || size > hh || size > ww {
        return Err(Error::shape(format!(
            "crop size {size} exceeds extent {hh}x{ww}"
        )));
    }
    let (oy, ox) = ((hh - size) / 2, (ww - size) / 2);
    let mut out = Vec::with_capacity(size * size * c);
    for y in oy..oy + size {
        let start = (y * ww + ox) * c;
        out.extend_from_slice(&tile.data()[start..start + size * c]);
    }
    let mut new_shape = vec![size, size];
    if shape.len() == 3 {
        new_shape.push(c);
    }
    TensorArray::from_shape_vec(&new_shape, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::config(format!("unknown split `{s}`"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub splits: BTreeMap<Split, Vec<u64>>,
    pub params: SynthParams,
    pub format_version: u32,
}

impl DatasetManifest {
    pub fn ids(&self, split: Split) -> &[u64] {
        self.splits.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn sample_dir(&self, split: Split, id: u64) -> PathBuf {
        self.root.join(split.as_str()).join(sample_dir_name(id))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "format_version={}", self.format_version);
        for (k, v) in self.params.to_kv() {
            let _ = writeln!(s, "{k}={v}");
        }
        for split in Split::ALL {
            let _ = writeln!(s, "n_{}={}", split, self.ids(split).len());
        }
        for split in Split::ALL {
            for id in self.ids(split) {
                let _ = writeln!(s, "{split},{id}");
            }
        }
        s
    }

    pub fn parse(root: &Path, text: &str) -> Result<Self> {
        let mut params = SynthParams::default();
        let mut splits: BTreeMap<Split, Vec<u64>> =
            Split::ALL.iter().map(|&s| (s, Vec::new())).collect();
        let mut version = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some((k, v)) = line.split_once('=') {
                if k == "format_version" {
                    version = Some(v.parse().map_err(|_| Error::config("bad format_version"))?);
                } else if k.starts_with("n_") {
                    continue;
                } else if !params.set(k, v)? {
                    return Err(Error::config(format!("unknown manifest key `{k}`")));
                }
            } else if let Some((split, id)) = line.split_once(',') {
                let id = id
                    .parse()
                    .map_err(|_| Error::config(format!("bad sample id `{id}`")))?;
                splits.entry(split.parse()?).or_default().push(id);
            } else {
                return Err(Error::config(format!("unparseable manifest line `{line}`")));
            }
        }
        let format_version = version.ok_or_else(|| Error::config("manifest lacks format_version"))?;
        if format_version != DATASET_FORMAT_VERSION {
            return Err(Error::config(format!(
                "unsupported dataset format version {format_version}"
            )));
        }
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            splits,
            params,
            format_version,
        })
    }

    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(root, &text)
    }

    pub fn load_sample(&self, split: Split, id: u64) -> Result<Sample> {
        read_sample_dir(&self.sample_dir(split, id))
    }

    /// Loads a whole split into memory, in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.ids(split)
            .par_iter()
            .map(|&id| self.load_sample(split, id))
            .collect()
    }
}

pub fn sample_dir_name(id: u64) -> String {
    format!("sample_{id:06}")
}

pub fn write_sample_dir(dir: &Path, sample: &Sample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_tensor(dir.join("patch.ntsr"), &sample.patch)?;
    write_tensor(dir.join("context.ntsr"), &sample.context)?;
    write_tensor(dir.join("geo.ntsr"), &sample.geo.values)?;
    write_tensor(dir.join("target.ntsr"), &sample.target)?;
    write_tensor(dir.join("mask.ntsr"), &sample.water_mask)?;
    let meta = format!(
        "lat={}\nlon={}\nseed={}\n",
        sample.center.lat_deg, sample.center.lon_deg, sample.seed
    );
    let p = dir.join("meta.txt");
    fs::write(&p, meta).map_err(|e| Error::io(&p, e))
}

pub fn read_sample_dir(dir: &Path) -> Result<Sample> {
    let meta_path = dir.join("meta.txt");
    let meta = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut kv = BTreeMap::new();
    for line in meta.lines() {
        if let Some((k, v)) = line.split_once('=') {
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let get = |k: &str| -> Result<f64> {
        kv.get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::config(format!("{} lacks `{k}`", meta_path.display())))
    };
    let center = GeoPoint::new(get("lat")?, get("lon")?)?;
    let seed = kv.get("seed").and_then(|v| v.parse().ok()).unwrap_or(0);

    let patch = read_tensor(dir.join("patch.ntsr"))?;
    let context = read_tensor(dir.join("context.ntsr"))?;
    let geo = read_tensor(dir.join("geo.ntsr"))?;
    let target = read_tensor(dir.join("target.ntsr"))?;
    let water_mask = read_tensor(dir.join("mask.ntsr"))?;
    let sample = Sample {
        patch,
        context,
        geo: GeoGrid { values: geo },
        target,
        water_mask,
        center,
        seed,
    };
    check_sample(&sample)?;
    Ok(sample)
}

/// Verifies the cross-array shape contract of a sample.
pub fn check_sample(s: &Sample) -> Result<()> {
    let ps = s.patch.shape();
    if ps.len() != 3 || ps[0] != ps[1] {
        return Err(Error::shape(format!("patch must be square h x w x c, got {ps:?}")));
    }
    let h = ps[0];
    let expect = |name: &str, got: &[usize], want: &[usize]| -> Result<()> {
        if got != want {
            return Err(Error::shape(format!("{name} has shape {got:?}, expected {want:?}")));
        }
        Ok(())
    };
    expect("context", s.context.shape(), &[4 * h, 4 * h, 3])?;
    expect("geo", s.geo.values.shape(), &[h, h, 3])?;
    expect("target", s.target.shape(), &[h, h])?;
    expect("mask", s.water_mask.shape(), &[h, h])?;
    Ok(())
}

/// Writes `root/{train,val,test}/sample_<id>/` plus `root/manifest.txt`.
///
/// Sample ids run consecutively across splits, so they are unique; each id
/// doubles as the sample's generator seed.
pub fn generate_dataset(
    params: &SynthParams,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    root: impl AsRef<Path>,
    overwrite: bool,
) -> Result<DatasetManifest> {
    params.validate()?;
    let root = root.as_ref();
    if root.exists() {
        let non_empty = fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .next()
            .is_some();
        if non_empty {
            if !overwrite {
                return Err(Error::config(format!(
                    "{} exists and is not empty (pass overwrite to replace it)",
                    root.display()
                )));
            }
            for split in Split::ALL {
                let d = root.join(split.as_str());
                if d.exists() {
                    fs::remove_dir_all(&d).map_err(|e| Error::io(&d, e))?;
                }
            }
            let m = root.join(MANIFEST_FILE);
            if m.exists() {
                fs::remove_file(&m).map_err(|e| Error::io(&m, e))?;
            }
        }
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;

    let mut splits = BTreeMap::new();
    let mut next = 0u64;
    for (split, n) in [(Split::Train, n_train), (Split::Val, n_val), (Split::Test, n_test)] {
        let ids: Vec<u64> = (next..next + n as u64).collect();
        next += n as u64;
        fs::create_dir_all(root.join(split.as_str()))
            .map_err(|e| Error::io(root.join(split.as_str()), e))?;
        ids.par_iter().try_for_each(|&id| {
            let sample = generate_sample(params, id)?;
            write_sample_dir(&root.join(split.as_str()).join(sample_dir_name(id)), &sample)
        })?;
        splits.insert(split, ids);
    }

    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        splits,
        params: params.clone(),
        format_version: DATASET_FORMAT_VERSION,
    };
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Generates samples `first_id..first_id + n` in memory.
pub fn generate_samples(params: &SynthParams, first_id: u64, n: usize) -> Result<Vec<Sample>> {
    (first_id..first_id + n as u64)
        .into_par_iter()
        .map(|id| generate_sample(params, id))
        .collect()
}

/// Inverse bin-frequency weights over 10 equal-width bins of the mean
/// target, normalized to sum 1.
pub fn sample_weights(mean_targets: &[f64]) -> Vec<f64> {
    const BINS: usize = 10;
    let bin = |m: f64| ((m.clamp(0.0, 1.0) * BINS as f64) as usize).min(BINS - 1);
    let mut counts = [0usize; BINS];
    for &m in mean_targets {
        counts[bin(m)] += 1;
    }
    let raw: Vec<f64> = mean_targets
        .iter()
        .map(|&m| 1.0 / counts[bin(m)] as f64)
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

pub fn compute_sample_weights(manifest: &DatasetManifest, split: Split) -> Result<Vec<f64>> {
    let means = manifest
        .ids(split)
        .iter()
        .map(|&id| {
            let t = read_tensor(manifest.sample_dir(split, id).join("target.ntsr"))?;
            Ok(t.mean())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(sample_weights(&means))
}

/// Draws indices with replacement, proportionally to the given weights.
#[derive(Clone, Debug)]
pub struct WeightedSampler {
    cumulative: Vec<f64>,
}

impl WeightedSampler {
    pub fn new(weights: &[f64]) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::config("sampler weights must be finite, non-negative, non-empty"));
        }
        let mut acc = 0.0;
        let cumulative: Vec<f64> = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        if acc <= 0.0 {
            return Err(Error::config("sampler weights sum to zero"));
        }
        Ok(WeightedSampler { cumulative })
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = *self.cumulative.last().unwrap();
        let u = rng.random::<f64>() * total;
        self.cumulative
            .partition_point(|&c| c <= u)
            .min(self.cumulative.len() - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub p_hflip: f64,
    pub p_vflip: f64,
    pub p_erase: f64,
    /// Erased fraction of the patch area.
    pub erase_area: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_hflip: 0.5,
            p_vflip: 0.5,
            p_erase: 0.5,
            erase_area: (0.02, 0.20),
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            p_hflip: 0.0,
            p_vflip: 0.0,
            p_erase: 0.0,
            erase_area: (0.02, 0.20),
        }
    }

    pub fn flips_only() -> Self {
        AugmentConfig {
            p_erase: 0.0,
            ..Self::default()
        }
    }
}

/// Axis-aligned rectangle in patch pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EraseRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// One drawn augmentation, applicable to any spatially aligned array.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augmentation {
    pub hflip: bool,
    pub vflip: bool,
    pub erase: Option<EraseRect>,
}

impl Augmentation {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, cfg: &AugmentConfig, h: usize, w: usize) -> Self {
        let hflip = rng.random::<f64>() < cfg.p_hflip;
        let vflip = rng.random::<f64>() < cfg.p_vflip;
        let erase = if rng.random::<f64>() < cfg.p_erase {
            draw_rect(rng, cfg, h, w)
        } else {
            None
        };
        Augmentation { hflip, vflip, erase }
    }

    /// Flips an h x w (x c) array in place of a copy.
    pub fn flip(&self, t: &TensorArray) -> TensorArray {
        if !self.hflip && !self.vflip {
            return t.clone();
        }
        let (h, w) = (t.shape()[0], t.shape()[1]);
        let c = t.shape().get(2).copied().unwrap_or(1);
        let src = t.data();
        let mut out = Vec::with_capacity(src.len());
        for i in 0..h {
            let si = if self.vflip { h - 1 - i } else { i };
            for j in 0..w {
                let sj = if self.hflip { w - 1 - j } else { j };
                let base = (si * w + sj) * c;
                out.extend_from_slice(&src[base..base + c]);
            }
        }
        TensorArray::raw(t.shape().to_vec(), out)
    }

    /// Flips, then fills the erase rectangle of every band with that band's
    /// patch mean.
    pub fn apply_to_patch(&self, patch: &TensorArray) -> TensorArray {
        let mut out = self.flip(patch);
        if let Some(r) = self.erase {
            let (w, c) = (out.shape()[1], out.shape()[2]);
            let n = (out.shape()[0] * w) as f64;
            let means: Vec<f32> = (0..c)
                .map(|k| {
                    (out.data().iter().skip(k).step_by(c).map(|&v| v as f64).sum::<f64>() / n)
                        as f32
                })
                .collect();
            let data = out.data_mut();
            for i in r.top..r.top + r.height {
                for j in r.left..r.left + r.width {
                    let base = (i * w + j) * c;
                    data[base..base + c].copy_from_slice(&means);
                }
            }
        }
        out
    }

    /// Applies to every array of the sample; erasing touches the patch only.
    pub fn apply(&self, s: &Sample) -> Sample {
        Sample {
            patch: self.apply_to_patch(&s.patch),
            context: self.flip(&s.context),
            geo: GeoGrid {
                values: self.flip(&s.geo.values),
            },
            target: self.flip(&s.target),
            water_mask: self.flip(&s.water_mask),
            center: s.center,
            seed: s.seed,
        }
    }
}

fn draw_rect<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &AugmentConfig,
    h: usize,
    w: usize,
) -> Option<EraseRect> {
    let area = (h * w) as f64;
    let (lo, hi) = cfg.erase_area;
    for _ in 0..10 {
        let target = area * rng.random_range(lo..=hi);
        let log_ratio = rng.random_range((0.3f64).ln()..=(1.0f64 / 0.3).ln());
        let ratio = log_ratio.exp();
        let rh = (target * ratio).sqrt().round() as usize;
        let rw = (target / ratio).sqrt().round() as usize;
        if rh == 0 || rw == 0 || rh > h || rw > w {
            continue;
        }
        let frac = (rh * rw) as f64 / area;
        if frac < lo || frac > hi {
            continue;
        }
        return Some(EraseRect {
            top: rng.random_range(0..=h - rh),
            left: rng.random_range(0..=w - rw),
            height: rh,
            width: rw,
        });
    }
    None
}

pub fn augment<R: Rng + ?Sized>(sample: &Sample, rng: &mut R, cfg: &AugmentConfig) -> Sample {
    let h = sample.patch.shape()[0];
    let w = sample.patch.shape()[1];
    Augmentation::draw(rng, cfg, h, w).apply(sample)
}
