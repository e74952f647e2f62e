//! Dense rank-4 feature storage in (batch, channel, height, width) order.

use std::io::{Read, Write};

use crate::error::{ensure, Error, Result};
use crate::real::Real;

/// Magic prefix of the binary tensor record.
pub const CT4_MAGIC: [u8; 4] = *b"CT4\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(b: usize, c: usize, h: usize, w: usize) -> Self {
        Dims { b, c, h, w }
    }

    pub const fn scalar() -> Self {
        Dims::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.b * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(b < self.b && c < self.c && y < self.h && x < self.w);
        ((b * self.c + c) * self.h + y) * self.w + x
    }

    pub fn spatial_eq(&self, other: &Dims) -> bool {
        self.b == other.b && self.h == other.h && self.w == other.w
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.b, self.c, self.h, self.w)
    }
}

/// Immutable-by-convention dense tensor. Operations return new tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T = f32> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self> {
        ensure!(
            data.len() == dims.numel(),
            "data length {} does not match dims {dims}",
            data.len()
        );
        Ok(Tensor4 { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: Dims, value: T) -> Self {
        Tensor4 { dims, data: vec![value; dims.numel()] }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Dims::scalar(), value)
    }

    /// Per-channel vector stored as dims (1, C, 1, 1).
    pub fn channel_vector(values: Vec<T>) -> Self {
        Tensor4 { dims: Dims::new(1, values.len(), 1, 1), data: values }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.numel());
        for b in 0..dims.b {
            for c in 0..dims.c {
                for y in 0..dims.h {
                    for x in 0..dims.w {
                        data.push(f(b, c, y, x));
                    }
                }
            }
        }
        Tensor4 { dims, data }
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.dims.index(b, c, y, x)]
    }

    /// Value of a (1,1,1,1) tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Contiguous H×W plane for `(b, c)`.
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let p = self.dims.plane();
        let start = (b * self.dims.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 { dims: self.dims, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        ensure!(self.dims == other.dims, "dims mismatch {} vs {}", self.dims, other.dims);
        Ok(Tensor4 {
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.f64()).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        ensure!(self.dims == other.dims, "dims mismatch {} vs {}", self.dims, other.dims);
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().f64())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 { dims: self.dims, data: self.data.iter().map(|v| U::lit(v.f64())).collect() }
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack_batch(parts: &[Self]) -> Result<Self> {
        ensure!(!parts.is_empty(), "cannot stack an empty list");
        let d = parts[0].dims;
        let mut data = Vec::with_capacity(d.numel() * parts.len());
        let mut b = 0;
        for p in parts {
            ensure!(
                p.dims.c == d.c && p.dims.h == d.h && p.dims.w == d.w,
                "stack dims mismatch {} vs {}",
                p.dims,
                d
            );
            b += p.dims.b;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor4 { dims: Dims::new(b, d.c, d.h, d.w), data })
    }

    /// Writes the `CT4\0` record: magic, four u32 LE dims, then f32 LE values.
    pub fn write_ct4<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(&CT4_MAGIC)?;
        for d in [self.dims.b, self.dims.c, self.dims.h, self.dims.w] {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim {d} exceeds u32")))?;
            out.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_ct4<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if magic != CT4_MAGIC {
            return Err(Error::Format(format!("bad tensor magic {magic:?}")));
        }
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            let mut word = [0u8; 4];
            input.read_exact(&mut word)?;
            *d = u32::from_le_bytes(word) as usize;
        }
        let dims = Dims::new(dims[0], dims[1], dims[2], dims[3]);
        let mut raw = vec![0u8; dims.numel() * 4];
        input.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        Ok(Tensor4 { dims, data })
    }

    pub fn to_ct4_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_ct4(&mut out).expect("writing to a Vec cannot fail");
        out
    }
}
