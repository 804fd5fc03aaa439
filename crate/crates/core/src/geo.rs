//! Cyclic encoding of geographic coordinates.
//!
//! Longitude is mapped onto the unit circle so that +180 and -180 land on
//! the same point; latitude does not wrap and is scaled linearly.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::TensorArray;

/// Angular convention for the longitude encoding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LonMode {
    /// `theta = pi * lon / 180`, one revolution per 360 degrees.
    #[default]
    FullCircle,
    /// `theta = 2 * pi * lon / 180`, one revolution per 180 degrees; `lon`
    /// and `lon + 180` collide.
    Literal,
}

impl std::str::FromStr for LonMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full-circle" => Ok(LonMode::FullCircle),
            "paper-literal" | "literal" => Ok(LonMode::Literal),
            other => Err(Error::config(format!("unknown longitude mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for LonMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LonMode::FullCircle => "full-circle",
            LonMode::Literal => "paper-literal",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoPoint {
    pub lat_deg: f64,
    pub lon_deg: f64,
}

impl GeoPoint {
    pub fn new(lat_deg: f64, lon_deg: f64) -> Result<Self> {
        check_latitude(lat_deg)?;
        Ok(GeoPoint {
            lat_deg,
            lon_deg: normalize_longitude(lon_deg)?,
        })
    }
}

/// Wraps a longitude into `[-180, 180)`.
pub fn normalize_longitude(lon_deg: f64) -> Result<f64> {
    if !lon_deg.is_finite() {
        return Err(Error::InvalidCoordinate(format!(
            "longitude {lon_deg} is not finite"
        )));
    }
    let wrapped = (lon_deg + 180.0).rem_euclid(360.0) - 180.0;
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    Ok(if wrapped >= 180.0 { wrapped - 360.0 } else { wrapped })
}

fn check_latitude(lat_deg: f64) -> Result<()> {
    if !lat_deg.is_finite() || !(-90.0..=90.0).contains(&lat_deg) {
        return Err(Error::InvalidCoordinate(format!(
            "latitude {lat_deg} outside [-90, 90]"
        )));
    }
    Ok(())
}

/// Returns `(sin theta, cos theta)` for the normalized longitude.
pub fn encode_longitude(lon_deg: f64, mode: LonMode) -> Result<(f64, f64)> {
    let lon = normalize_longitude(lon_deg)?;
    let theta = match mode {
        LonMode::FullCircle => PI * lon / 180.0,
        LonMode::Literal => 2.0 * PI * lon / 180.0,
    };
    Ok(theta.sin_cos())
}

pub fn encode_latitude(lat_deg: f64) -> Result<f64> {
    check_latitude(lat_deg)?;
    Ok(lat_deg / 90.0)
}

/// Per-pixel h x w x 3 raster of encoded coordinates, channels ordered
/// (sin-lon, cos-lon, lat/90).
#[derive(Clone, Debug, PartialEq)]
pub struct GeoGrid {
    pub values: TensorArray,
}

impl GeoGrid {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Rasterizes the coordinates of each pixel center around `center`.
///
/// Rows run north to south and columns west to east; pixel `(i, j)` sits at
/// `lat = center.lat - (i - (h-1)/2) * px`, `lon = center.lon + (j - (w-1)/2) * px`.
pub fn build_geo_grid(
    center: GeoPoint,
    h: usize,
    w: usize,
    pixel_size_deg: f64,
    mode: LonMode,
) -> Result<GeoGrid> {
    if h == 0 || w == 0 {
        return Err(Error::shape(format!("geo grid extent {h}x{w} is empty")));
    }
    if !(pixel_size_deg.is_finite() && pixel_size_deg >= 0.0) {
        return Err(Error::config(format!(
            "pixel size {pixel_size_deg} must be finite and non-negative"
        )));
    }
    let row_mid = (h as f64 - 1.0) / 2.0;
    let col_mid = (w as f64 - 1.0) / 2.0;

    let lat_terms = (0..h)
        .map(|i| encode_latitude(center.lat_deg - (i as f64 - row_mid) * pixel_size_deg))
        .collect::<Result<Vec<_>>>()?;
    let lon_terms = (0..w)
        .map(|j| encode_longitude(center.lon_deg + (j as f64 - col_mid) * pixel_size_deg, mode))
        .collect::<Result<Vec<_>>>()?;

    let mut data = Vec::with_capacity(h * w * 3);
    for &lat in &lat_terms {
        for &(s, c) in &lon_terms {
            data.extend_from_slice(&[s as f32, c as f32, lat as f32]);
        }
    }
    Ok(GeoGrid {
        values: TensorArray::new(&[h, w, 3], data)?,
    })
}
