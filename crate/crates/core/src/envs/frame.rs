use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const FRAME_SIDE: usize = 50;
pub const FRAME_BYTES: usize = FRAME_SIDE * FRAME_SIDE * 3;

/// A 50x50 RGB image, row-major, channels interleaved.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Frame {
    pixels: Vec<u8>,
}

impl std::fmt::Debug for Frame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let lit = self.pixels.iter().filter(|&&p| p != 0).count();
        write!(f, "Frame({lit} nonzero channel values)")
    }
}

impl Frame {
    pub fn black() -> Self {
        Self {
            pixels: vec![0; FRAME_BYTES],
        }
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() != FRAME_BYTES {
            return Err(Error::shape("frame", format!("{} bytes", bytes.len())));
        }
        Ok(Self { pixels: bytes })
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * FRAME_SIDE + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * FRAME_SIDE + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Writes the frame as channels-first values in `[0, 1]` into `out`
    /// (length `3 * 50 * 50`).
    pub fn write_chw<F: Scalar>(&self, out: &mut [F]) {
        let plane = FRAME_SIDE * FRAME_SIDE;
        let inv = F::of(1.0 / 255.0);
        for (p, rgb) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = F::from_u8(rgb[c]).unwrap() * inv;
            }
        }
    }

    /// Inverse of [`Frame::write_chw`], rounding and clamping to bytes.
    pub fn from_chw<F: Scalar>(values: &[F]) -> Result<Self> {
        if values.len() != FRAME_BYTES {
            return Err(Error::shape("frame", format!("{} values", values.len())));
        }
        let plane = FRAME_SIDE * FRAME_SIDE;
        let mut frame = Frame::black();
        for p in 0..plane {
            for c in 0..3 {
                let v = values[c * plane + p].as_f64().clamp(0.0, 1.0);
                frame.pixels[p * 3 + c] = (v * 255.0).round() as u8;
            }
        }
        Ok(frame)
    }

    pub fn to_image(&self) -> image::RgbImage {
        image::RgbImage::from_raw(FRAME_SIDE as u32, FRAME_SIDE as u32, self.pixels.clone())
            .expect("frame buffer has the right size")
    }
}
