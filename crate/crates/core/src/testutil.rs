//! Test-only helpers: a tiny RNG and straightforward reference kernels that
//! the optimized paths are checked against.

use crate::grid::{Grid, KernelBank};

/// SplitMix64; deterministic and independent of the weight stream under test.
pub(crate) struct Lcg(u64);

impl Lcg {
    pub fn new(seed: u64) -> Self {
        Lcg(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn grid(&mut self, c: usize, h: usize, w: usize, lo: f64, hi: f64) -> Grid {
        Grid::from_fn(c, h, w, |_, _, _| self.uniform(lo, hi))
    }
}

/// Six nested loops, no unrolling.
pub(crate) fn naive_conv2d(
    x: &Grid,
    k: &KernelBank,
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> Grid {
    let (h, w) = (x.height() as isize, x.width() as isize);
    let oh = (x.height() + 2 * pad - k.kh) / stride + 1;
    let ow = (x.width() + 2 * pad - k.kw) / stride + 1;
    let kd = k.as_slice();
    Grid::from_fn(k.out_channels, oh, ow, |o, oy, ox| {
        let mut acc = bias[o];
        for c in 0..k.in_channels {
            for ky in 0..k.kh {
                for kx in 0..k.kw {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy >= 0 && iy < h && ix >= 0 && ix < w {
                        let wv = kd[((o * k.in_channels + c) * k.kh + ky) * k.kw + kx];
                        acc += wv * x.at(c, iy as usize, ix as usize);
                    }
                }
            }
        }
        acc
    })
}
