//! Scalar abstraction so every module can run at f32 (training) or f64
//! (gradient checking) without duplication.

use core::fmt::{Debug, Display};

use num_traits::Float;

/// Floating-point scalar used throughout the crate.
///
/// `Float` comes with libm-backed transcendentals, so the bound holds in
/// `no_std` builds too. The conversion methods carry deliberately distinct
/// names so they never shadow the `num_traits` cast helpers.
pub trait Real: Float + Default + Debug + Display + Send + Sync + 'static {
    /// Wire-format tag stored in serialized tensor headers.
    const DTYPE: u8;
    /// Bytes per element in the wire format.
    const BYTE_WIDTH: usize;

    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn of_usize(x: usize) -> Self;

    fn write_le(self, out: &mut alloc::vec::Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: u8 = 1;
    const BYTE_WIDTH: usize = 4;

    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn of_usize(x: usize) -> Self {
        x as f32
    }
    fn write_le(self, out: &mut alloc::vec::Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Real for f64 {
    const DTYPE: u8 = 2;
    const BYTE_WIDTH: usize = 8;

    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn of_usize(x: usize) -> Self {
        x as f64
    }
    fn write_le(self, out: &mut alloc::vec::Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}

/// Shorthand for converting literals inside generic code.
#[inline]
pub fn real<T: Real>(x: f64) -> T {
    T::of(x)
}
