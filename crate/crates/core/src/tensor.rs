//! Dense row-major arrays and the NTSR tensor file format.
//!
//! NTSR layout (all integers little-endian):
//!
//! ```text
//! "NTSR" | version u8 = 1 | dtype u8 = 1 (f32 LE) | ndim u8 | 3 zero bytes
//! ndim x u32 extents
//! row-major f32 payload
//! ```

use std::fmt::Debug;
use std::fs;
use std::io::Write;
use std::path::Path;

use num_traits::Float;

use crate::error::{Error, Result};

pub const NTSR_MAGIC: &[u8; 4] = b"NTSR";
pub const NTSR_VERSION: u8 = 1;
pub const NTSR_DTYPE_F32: u8 = 1;

/// Floating point element type usable by the network layers.
///
/// `f32` is the training type; `f64` backs the gradient-check harness.
pub trait Scalar:
    Float
    + Default
    + Debug
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c <- alpha * a(m x k) * b(k x n) + beta * c`, strides in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                debug_assert!(a.len() >= max_index(m, k, rsa, csa));
                debug_assert!(b.len() >= max_index(k, n, rsb, csb));
                debug_assert!(c.len() >= max_index(m, n, rsc, csc));
                // SAFETY: the debug assertions above describe the contract every
                // caller in this crate satisfies; all strides are non-negative.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

#[allow(dead_code)]
fn max_index(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Dense n-dimensional array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Array<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// The value type for images, latents and maps on disk.
pub type TensorArray = Array<f32>;

impl<T: Copy + Default> Array<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: vec![T::default(); n],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Builds an array without checking finiteness; only the element count
    /// is validated.
    pub fn from_shape_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Array {
            shape: shape.to_vec(),
            data,
        })
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Array { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Array<U> {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl TensorArray {
    /// Builds a tensor, rejecting mismatched element counts and non-finite
    /// values.
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        let t = Self::from_shape_vec(shape, data)?;
        if let Some(i) = t.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::shape(format!("non-finite value at flat index {i}")));
        }
        Ok(t)
    }

    /// Element at `(row, col, channel)` of an h x w x c tensor.
    #[inline]
    pub fn at3(&self, i: usize, j: usize, k: usize) -> f32 {
        let (w, c) = (self.shape[1], self.shape[2]);
        self.data[(i * w + j) * c + k]
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.shape[1] + j]
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Single channel `k` of an h x w x c tensor, as h x w.
    pub fn channel(&self, k: usize) -> Result<TensorArray> {
        if self.ndim() != 3 || k >= self.shape[2] {
            return Err(Error::shape(format!(
                "channel {k} out of range for shape {:?}",
                self.shape
            )));
        }
        let c = self.shape[2];
        let data = self.data.iter().skip(k).step_by(c).copied().collect();
        Ok(Array::raw(vec![self.shape[0], self.shape[1]], data))
    }

    pub fn to_ntsr_bytes(&self) -> Result<Vec<u8>> {
        if self.ndim() > u8::MAX as usize {
            return Err(Error::shape("too many dimensions for NTSR"));
        }
        let mut out = Vec::with_capacity(10 + 4 * self.ndim() + 4 * self.len());
        out.extend_from_slice(NTSR_MAGIC);
        out.push(NTSR_VERSION);
        out.push(NTSR_DTYPE_F32);
        out.push(self.ndim() as u8);
        out.extend_from_slice(&[0, 0, 0]);
        for &e in &self.shape {
            let e = u32::try_from(e).map_err(|_| Error::shape("extent exceeds u32"))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_ntsr_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let format = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let corrupt = |reason: String| Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 10 {
            return Err(corrupt(format!("header truncated at {} bytes", bytes.len())));
        }
        if &bytes[0..4] != NTSR_MAGIC {
            return Err(format("bad magic"));
        }
        if bytes[4] != NTSR_VERSION {
            return Err(format(&format!("unsupported version {}", bytes[4])));
        }
        if bytes[5] != NTSR_DTYPE_F32 {
            return Err(format(&format!("unsupported dtype {}", bytes[5])));
        }
        let ndim = bytes[6] as usize;
        let header = 10 + 4 * ndim;
        if bytes.len() < header {
            return Err(corrupt("extent table truncated".into()));
        }
        let shape: Vec<usize> = bytes[10..header]
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
            .collect();
        let n: usize = shape.iter().product();
        let payload = &bytes[header..];
        if payload.len() != 4 * n {
            return Err(corrupt(format!(
                "payload is {} bytes, shape {:?} needs {}",
                payload.len(),
                shape,
                4 * n
            )));
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(corrupt("non-finite value in payload".into()));
        }
        Ok(Array::raw(shape, data))
    }
}

pub fn write_tensor(path: impl AsRef<Path>, t: &TensorArray) -> Result<()> {
    let path = path.as_ref();
    let bytes = t.to_ntsr_bytes()?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorArray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorArray::from_ntsr_bytes(&bytes, path)
}
