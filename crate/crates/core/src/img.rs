//! Row-major RGB float image buffer shared by the rasterizer, the losses,
//! and dataset IO. Values live in [0, 1]; all math runs in f64.

/// H x W x 3 image, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ImageBuf {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * 3, "image data length mismatch");
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i] = rgb[0];
        self.data[i + 1] = rgb[1];
        self.data[i + 2] = rgb[2];
    }

    pub fn same_shape(&self, other: &ImageBuf) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// One grayscale-style channel extracted as a dense H x W array.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        assert!(c < 3);
        self.data.iter().skip(c).step_by(3).copied().collect()
    }

    /// Multiply every sample by `gain` (used for appearance modulation).
    pub fn scaled(&self, gain: f64) -> ImageBuf {
        ImageBuf {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v * gain).collect(),
        }
    }
}

/// Bilinear factor-2 reduction: each output pixel is the mean of its 2x2
/// source block. Odd trailing rows/columns are dropped.
pub fn downsample_half(img: &ImageBuf) -> ImageBuf {
    let w = img.width / 2;
    let h = img.height / 2;
    let mut out = ImageBuf::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for dy in 0..2 {
                for dx in 0..2 {
                    let p = img.pixel(2 * x + dx, 2 * y + dy);
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                }
            }
            out.set_pixel(x, y, [acc[0] * 0.25, acc[1] * 0.25, acc[2] * 0.25]);
        }
    }
    out
}

/// Adjoint of [`downsample_half`]: distributes each coarse gradient sample
/// back to the four source pixels that produced it.
pub fn downsample_half_adjoint(grad: &ImageBuf, src_width: usize, src_height: usize) -> ImageBuf {
    let mut out = ImageBuf::zeros(src_width, src_height);
    for y in 0..grad.height {
        for x in 0..grad.width {
            let g = grad.pixel(x, y);
            for dy in 0..2 {
                for dx in 0..2 {
                    let mut p = out.pixel(2 * x + dx, 2 * y + dy);
                    for c in 0..3 {
                        p[c] += g[c] * 0.25;
                    }
                    out.set_pixel(2 * x + dx, 2 * y + dy, p);
                }
            }
        }
    }
    out
}
