//! 8-bit binary PGM export of [0, 1] maps.

use std::fs;
use std::path::Path;

use naturamap::{Error, Result, TensorArray};

/// Gap between panel tiles, in pixels.
const PANEL_GAP: usize = 4;

pub fn quantize(v: f32) -> u8 {
    (255.0 * v.clamp(0.0, 1.0) as f64).round() as u8
}

pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Gray {
    pub fn from_map(map: &TensorArray) -> Result<Self> {
        if map.ndim() != 2 {
            return Err(Error::config(format!("expected an h x w map, got {:?}", map.shape())));
        }
        Ok(Gray {
            height: map.shape()[0],
            width: map.shape()[1],
            pixels: map.data().iter().map(|&v| quantize(v)).collect(),
        })
    }

    /// Places maps left to right on a white background.
    pub fn panel(maps: &[&TensorArray]) -> Result<Self> {
        let tiles = maps.iter().map(|m| Self::from_map(m)).collect::<Result<Vec<_>>>()?;
        let height = tiles.iter().map(|t| t.height).max().unwrap_or(0);
        let width = tiles.iter().map(|t| t.width).sum::<usize>()
            + PANEL_GAP * tiles.len().saturating_sub(1);
        let mut pixels = vec![255u8; width * height];
        let mut x0 = 0;
        for t in &tiles {
            for r in 0..t.height {
                pixels[r * width + x0..r * width + x0 + t.width]
                    .copy_from_slice(&t.pixels[r * t.width..(r + 1) * t.width]);
            }
            x0 += t.width + PANEL_GAP;
        }
        Ok(Gray {
            width,
            height,
            pixels,
        })
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}
