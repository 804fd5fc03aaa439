//! Recomputes synthetic samples with a straight-line generator written
//! directly from the generation procedure.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use naturamap::data::{generate_dataset, generate_sample, generate_samples, SynthParams};
use naturamap::{read_tensor, DatasetManifest, Split};

struct Oracle {
    lat: f64,
    lon: f64,
    target: Vec<f32>,
    mask: Vec<f32>,
    ctx_mean: f64,
    patch_mean: f64,
    label_patch: Vec<f64>,
}

fn oracle(p: &SynthParams, sample_seed: u64) -> Oracle {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    rng.set_stream(sample_seed);
    let lat = p.lat_min + (p.lat_max - p.lat_min) * rng.random::<f64>();
    let lon = -180.0 + 360.0 * rng.random::<f64>();
    let s = p.context_size;
    let mut bands = Vec::new();
    for _ in 0..10 {
        let mut waves = Vec::new();
        for _ in 0..p.n_sinusoids {
            let a = 1.0 - rng.random::<f64>();
            let u = rng.random_range(1..=6) as f64;
            let v = rng.random_range(1..=6) as f64;
            let phi = rng.random::<f64>() * 2.0 * PI;
            waves.push((a, u, v, phi));
        }
        let mut f = vec![0.0f64; s * s];
        for y in 0..s {
            for x in 0..s {
                let mut acc = 0.0;
                for &(a, u, v, phi) in &waves {
                    acc += a * (2.0 * PI * (u * x as f64 + v * y as f64) / s as f64 + phi).sin();
                }
                f[y * s + x] = acc;
            }
        }
        let lo = f.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for v in f.iter_mut() {
            *v = (*v - lo) / (hi - lo);
        }
        bands.push(f);
    }
    let h = p.patch_size;
    let off = (s - h) / 2;
    let mut ctx_mean = 0.0;
    for v in &bands[3] {
        ctx_mean += v;
    }
    ctx_mean /= (s * s) as f64;
    let g = 0.5 * (1.0 + (PI * lat / 90.0).sin() * (PI * lon / 180.0).cos());
    let mut target = Vec::new();
    let mut mask = Vec::new();
    let mut label_patch = Vec::new();
    for y in 0..h {
        for x in 0..h {
            let b3 = bands[3][(y + off) * s + x + off];
            label_patch.push(b3);
            let t = p.w_local * b3 + (p.w_ctx * ctx_mean + p.w_geo * g);
            target.push(t.clamp(0.0, 1.0) as f32);
            let w = bands[p.water_band][(y + off) * s + x + off] > p.water_threshold;
            mask.push(if w { 1.0 } else { 0.0 });
        }
    }
    let patch_mean = label_patch.iter().sum::<f64>() / label_patch.len() as f64;
    Oracle {
        lat,
        lon,
        target,
        mask,
        ctx_mean,
        patch_mean,
        label_patch,
    }
}

fn small(seed: u64) -> SynthParams {
    SynthParams {
        patch_size: 16,
        context_size: 64,
        seed,
        ..SynthParams::default()
    }
}

#[test]
fn targets_match_straight_line_generator() {
    for (p, ids) in [(small(3), 0..12u64), (SynthParams::default(), 0..3u64)] {
        for id in ids {
            let s = generate_sample(&p, id).unwrap();
            let o = oracle(&p, id);
            assert_eq!(s.center.lat_deg, o.lat);
            assert_eq!(s.center.lon_deg, o.lon);
            let max_diff = s
                .target
                .data()
                .iter()
                .zip(&o.target)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert_eq!(max_diff, 0.0, "sample {id}");
            assert_eq!(s.water_mask.data(), o.mask.as_slice());
            let mean = s.target.mean();
            assert!((0.05..=0.95).contains(&mean), "mean target {mean}");
        }
    }
}

#[test]
fn target_decomposition_on_unclamped_pixels() {
    let p = small(8);
    for id in 0..20 {
        let s = generate_sample(&p, id).unwrap();
        let o = oracle(&p, id);
        let g = naturamap::data::geo_term(o.lat, o.lon);
        let offset = p.w_ctx * o.ctx_mean + p.w_geo * g;
        for (t, b3) in s.target.data().iter().zip(&o.label_patch) {
            let raw = p.w_local * b3 + offset;
            if (0.0..=1.0).contains(&raw) {
                assert_eq!(*t, raw as f32);
                assert!(((*t as f64 - p.w_local * b3) - offset).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn context_mean_differs_from_patch_mean() {
    let p = small(11);
    let n = 200;
    let differing = (0..n)
        .filter(|&id| {
            let o = oracle(&p, id);
            o.ctx_mean != o.patch_mean
        })
        .count();
    assert!(differing * 100 >= 95 * n as usize, "{differing}/{n}");
}

#[test]
fn water_coverage_is_sparse() {
    let samples = generate_samples(&small(2), 0, 100).unwrap();
    let water: f64 = samples
        .iter()
        .map(|s| s.water_mask.data().iter().map(|&m| m as f64).sum::<f64>())
        .sum();
    let total = (100 * 16 * 16) as f64;
    let frac = water / total;
    assert!(frac > 0.0 && frac < 0.3, "water fraction {frac}");
}

#[test]
fn dataset_on_disk_matches_memory() {
    let dir = tempfile::tempdir().unwrap();
    let p = small(5);
    let m = generate_dataset(&p, 2, 1, 1, dir.path().join("a"), false).unwrap();
    assert_eq!(m.ids(Split::Train), &[0, 1]);
    assert_eq!(m.ids(Split::Val), &[2]);
    assert_eq!(m.ids(Split::Test), &[3]);
    let loaded = DatasetManifest::load(dir.path().join("a")).unwrap();
    assert_eq!(loaded, m);
    for split in Split::ALL {
        for &id in m.ids(split) {
            let on_disk = m.load_sample(split, id).unwrap();
            assert_eq!(on_disk, generate_sample(&p, id).unwrap());
            let t = read_tensor(m.sample_dir(split, id).join("target.ntsr")).unwrap();
            assert_eq!(t, on_disk.target);
        }
    }
    let empty = generate_dataset(&p, 0, 0, 0, dir.path().join("e"), false).unwrap();
    assert!(Split::ALL.iter().all(|&s| empty.ids(s).is_empty()));
    assert_eq!(DatasetManifest::load(dir.path().join("e")).unwrap(), empty);
}
