//! Dense NCHW tensors and their little-endian wire format.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::real::Real;
use crate::Result;

/// Logical NCHW extents. Weight tensors reuse the same four slots as
/// (out, in, kh, kw); per-image scalars are (n, 1, 1, 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn count(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl core::fmt::Display for Shape {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// Plain value tensor. Data is `Arc`ed so graph leaves and the parameter
/// registry can share storage without copies; mutation goes through
/// [`Tensor::data_mut`] which is copy-on-write.
#[derive(Debug, Clone)]
pub struct Tensor<T: Real> {
    pub shape: Shape,
    data: Arc<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.count() {
            return Err(Error::shape(
                "tensor",
                format!("{} values for shape {}", data.len(), shape),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn from_shared(shape: Shape, data: Arc<Vec<T>>) -> Result<Self> {
        if data.len() != shape.count() {
            return Err(Error::shape(
                "tensor",
                format!("{} values for shape {}", data.len(), shape),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            data: Arc::new(vec![T::zero(); shape.count()]),
            shape,
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            data: Arc::new(vec![value; shape.count()]),
            shape,
        }
    }

    /// Builds from a function of (n, c, y, x).
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.count());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Copy-on-write mutable access.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::<Vec<T>>::make_mut(&mut self.data)
    }

    pub fn shared(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.shape.idx(n, c, y, x)]
    }

    pub fn iter(&self) -> core::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Serializes as `[dtype u8][rank u8][dims u32 le x rank][values le]`.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(2 + 16 + self.data.len() * T::BYTE_WIDTH);
        out.push(T::DTYPE);
        out.push(4);
        for d in [self.shape.n, self.shape.c, self.shape.h, self.shape.w] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in self.data.iter() {
            v.write_le(&mut out);
        }
        out
    }

    /// Decodes one tensor from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < 2 {
            return Err(Error::Decode("truncated tensor header".into()));
        }
        if bytes[0] != T::DTYPE {
            return Err(Error::Decode(format!(
                "dtype tag {} does not match requested element type (tag {})",
                bytes[0],
                T::DTYPE
            )));
        }
        let rank = bytes[1] as usize;
        if rank != 4 {
            return Err(Error::Decode(format!("unsupported rank {rank}")));
        }
        let mut off = 2;
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            let end = off + 4;
            if bytes.len() < end {
                return Err(Error::Decode("truncated dims".into()));
            }
            *d = u32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
                as usize;
            off = end;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let count = shape.count();
        let need = count * T::BYTE_WIDTH;
        if bytes.len() < off + need {
            return Err(Error::Decode(format!(
                "tensor body needs {} bytes, {} available",
                need,
                bytes.len() - off
            )));
        }
        let mut data = Vec::with_capacity(count);
        for i in 0..count {
            data.push(T::read_le(&bytes[off + i * T::BYTE_WIDTH..]));
        }
        off += need;
        Ok((Tensor::new(shape, data)?, off))
    }
}

/// Bilinear lookup into one channel plane with edge clamping and half-open
/// pixel-center coordinates (x=0 is the center of the left column). Used by
/// evaluation-side warping; the differentiable path has its own kernel.
pub fn bilinear_at<T: Real>(plane: &[T], h: usize, w: usize, x: T, y: T) -> T {
    let clampf = |v: T, hi: T| {
        if v < T::zero() {
            T::zero()
        } else if v > hi {
            hi
        } else {
            v
        }
    };
    let x = clampf(x, T::of_usize(w - 1));
    let y = clampf(y, T::of_usize(h - 1));
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let xi = x0.as_f64() as usize;
    let yi = y0.as_f64() as usize;
    let xi1 = (xi + 1).min(w - 1);
    let yi1 = (yi + 1).min(h - 1);
    let one = T::one();
    let v00 = plane[yi * w + xi];
    let v01 = plane[yi * w + xi1];
    let v10 = plane[yi1 * w + xi];
    let v11 = plane[yi1 * w + xi1];
    (one - fy) * ((one - fx) * v00 + fx * v01) + fy * ((one - fx) * v10 + fx * v11)
}
