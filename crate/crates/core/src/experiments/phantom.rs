//! Modified Shepp–Logan head phantom.

use crate::error::{Error, Result};
use crate::experiments::image::ImageBuffer;

/// (intensity, semi-axis a, semi-axis b, centre x, centre y, angle in degrees)
const ELLIPSES: [(f64, f64, f64, f64, f64, f64); 10] = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
];

pub const MIN_PHANTOM_SIZE: usize = 32;

/// `size × size` phantom on `[-1, 1]²` sampled at pixel centres, values in
/// `[0, 1]` with a zero background.
pub fn shepp_logan_phantom(size: usize) -> Result<ImageBuffer> {
    if size < MIN_PHANTOM_SIZE {
        return Err(Error::Config(format!("phantom size {size} < {MIN_PHANTOM_SIZE}")));
    }
    let mut data = vec![0.0; size * size];
    for r in 0..size {
        let y = 1.0 - (2 * r + 1) as f64 / size as f64;
        for c in 0..size {
            let x = (2 * c + 1) as f64 / size as f64 - 1.0;
            let mut v = 0.0;
            for &(amp, a, b, x0, y0, deg) in &ELLIPSES {
                let (s, co) = deg.to_radians().sin_cos();
                let (dx, dy) = (x - x0, y - y0);
                let u = dx * co + dy * s;
                let w = -dx * s + dy * co;
                if (u / a).powi(2) + (w / b).powi(2) <= 1.0 {
                    v += amp;
                }
            }
            data[r * size + c] = v.clamp(0.0, 1.0);
        }
    }
    ImageBuffer::new(size, size, 1, data)
}

/// FNV-1a over the little-endian bytes of every value.
pub fn checksum(data: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in data {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = shepp_logan_phantom(64).unwrap();
        let b = shepp_logan_phantom(64).unwrap();
        assert_eq!(a, b);
        assert!(a.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a.data[0], 0.0);
        assert!(a.data.contains(&1.0));
        assert!(shepp_logan_phantom(16).is_err());
    }
}
