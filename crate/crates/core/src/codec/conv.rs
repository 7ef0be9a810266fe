//! 1-D convolution and transposed convolution over time-major `[T, C]` signals.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;

use crate::nn::{gelu, gelu_grad, normal_matrix, slice, slice1, slice1_mut, slice_mut};

/// Rows of im2col processed at once during inference.
const BLOCK: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    /// `[kernel · c_in, c_out]`, tap-major.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Spacing between kernel taps.
    pub dilation: usize,
}

impl Conv1d {
    pub fn new<R: Rng>(rng: &mut R, c_in: usize, c_out: usize, kernel: usize, stride: usize, pad: usize, gain: f64) -> Self {
        let std = gain / ((kernel * c_in) as f64).sqrt();
        Self {
            w: normal_matrix(rng, kernel * c_in, c_out, std),
            b: Array1::zeros(c_out),
            kernel,
            stride,
            pad,
            dilation: 1,
        }
    }

    /// Length-preserving kernel-3 layer with taps `dilation` apart.
    pub fn dilated<R: Rng>(rng: &mut R, c_in: usize, c_out: usize, dilation: usize, gain: f64) -> Self {
        Self {
            dilation,
            ..Self::new(rng, c_in, c_out, 3, 1, dilation, gain)
        }
    }

    /// Strided layer whose output length is exactly `input / stride`.
    pub fn downsample<R: Rng>(rng: &mut R, c_in: usize, c_out: usize, stride: usize, gain: f64) -> Self {
        let pad = (stride / 2).max(1);
        Self::new(rng, c_in, c_out, stride + 2 * pad, stride, pad, gain)
    }

    pub fn c_in(&self) -> usize {
        self.w.nrows() / self.kernel
    }

    pub fn c_out(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_len(&self, t_in: usize) -> usize {
        let span = self.dilation * (self.kernel - 1) + 1;
        (t_in + 2 * self.pad).saturating_sub(span) / self.stride + 1
    }

    fn patches(&self, x: &Array2<f64>, rows: std::ops::Range<usize>) -> Array2<f64> {
        let c_in = self.c_in();
        let mut p = Array2::zeros((rows.len(), self.kernel * c_in));
        for (r, t) in rows.enumerate() {
            for j in 0..self.kernel {
                let idx = (t * self.stride + j * self.dilation) as isize - self.pad as isize;
                if idx >= 0 && (idx as usize) < x.nrows() {
                    p.slice_mut(s![r, j * c_in..(j + 1) * c_in]).assign(&x.row(idx as usize));
                }
            }
        }
        p
    }

    /// Forward pass keeping the im2col matrix for `backward`.
    pub fn forward_train(&self, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let p = self.patches(x, 0..self.out_len(x.nrows()));
        (p.dot(&self.w) + &self.b, p)
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let t_out = self.out_len(x.nrows());
        let mut y = Array2::zeros((t_out, self.c_out()));
        for start in (0..t_out).step_by(BLOCK) {
            let end = (start + BLOCK).min(t_out);
            let blk = self.patches(x, start..end).dot(&self.w) + &self.b;
            y.slice_mut(s![start..end, ..]).assign(&blk);
        }
        y
    }

    pub fn backward(&self, patches: &Array2<f64>, t_in: usize, dy: &Array2<f64>, grad: &mut Conv1d) -> Array2<f64> {
        grad.w += &patches.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
        let dp = dy.dot(&self.w.t());
        let c_in = self.c_in();
        let mut dx = Array2::zeros((t_in, c_in));
        for t in 0..dp.nrows() {
            for j in 0..self.kernel {
                let idx = (t * self.stride + j * self.dilation) as isize - self.pad as isize;
                if idx >= 0 && (idx as usize) < t_in {
                    let mut row = dx.row_mut(idx as usize);
                    row += &dp.slice(s![t, j * c_in..(j + 1) * c_in]);
                }
            }
        }
        dx
    }

    pub fn tensors(&self) -> [&[f64]; 2] {
        [slice(&self.w), slice1(&self.b)]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 2] {
        [slice_mut(&mut self.w), slice1_mut(&mut self.b)]
    }
}

/// Residual unit `x + proj(gelu(conv(gelu(x))))` with a dilated kernel-3 conv.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub conv: Conv1d,
    pub proj: Conv1d,
}

pub struct ResCache {
    p_conv: Array2<f64>,
    pre_in: Array2<f64>,
    pre_mid: Array2<f64>,
    p_proj: Array2<f64>,
}

impl ResBlock {
    pub fn new<R: Rng>(rng: &mut R, channels: usize, dilation: usize) -> Self {
        Self {
            conv: Conv1d::dilated(rng, channels, channels, dilation, 1.5),
            proj: Conv1d::new(rng, channels, channels, 1, 1, 0, 0.5),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let a = self.conv.forward(&x.mapv(gelu)).mapv(gelu);
        x + &self.proj.forward(&a)
    }

    pub fn forward_train(&self, x: &Array2<f64>) -> (Array2<f64>, ResCache) {
        let (pre_mid, p_conv) = self.conv.forward_train(&x.mapv(gelu));
        let (out, p_proj) = self.proj.forward_train(&pre_mid.mapv(gelu));
        let cache = ResCache {
            p_conv,
            pre_in: x.clone(),
            pre_mid,
            p_proj,
        };
        (x + &out, cache)
    }

    pub fn backward(&self, c: &ResCache, dy: &Array2<f64>, grad: &mut ResBlock) -> Array2<f64> {
        let t = dy.nrows();
        let da = self.proj.backward(&c.p_proj, t, dy, &mut grad.proj) * &c.pre_mid.mapv(gelu_grad);
        let dx = self.conv.backward(&c.p_conv, t, &da, &mut grad.conv) * &c.pre_in.mapv(gelu_grad);
        dx + dy
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        let [a, b] = self.conv.tensors();
        let [c, d] = self.proj.tensors();
        [a, b, c, d]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        let [a, b] = self.conv.tensors_mut();
        let [c, d] = self.proj.tensors_mut();
        [a, b, c, d]
    }
}

/// Adjoint of a strided `Conv1d`; output length is `input · stride`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose1d {
    /// `[c_in, kernel · c_out]`, tap-major columns.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose1d {
    pub fn upsample<R: Rng>(rng: &mut R, c_in: usize, c_out: usize, stride: usize, gain: f64) -> Self {
        let pad = (stride / 2).max(1);
        let kernel = stride + 2 * pad;
        // each output sample receives about kernel/stride taps
        let fan_in = (c_in * kernel).div_ceil(stride);
        Self {
            w: normal_matrix(rng, c_in, kernel * c_out, gain / (fan_in as f64).sqrt()),
            b: Array1::zeros(c_out),
            kernel,
            stride,
            pad,
        }
    }

    pub fn c_out(&self) -> usize {
        self.w.ncols() / self.kernel
    }

    fn scatter(&self, z: &Array2<f64>, y: &mut Array2<f64>, t_offset: usize) {
        let c_out = self.c_out();
        let t_out = y.nrows();
        for t in 0..z.nrows() {
            for j in 0..self.kernel {
                let idx = ((t + t_offset) * self.stride + j) as isize - self.pad as isize;
                if idx >= 0 && (idx as usize) < t_out {
                    let mut row = y.row_mut(idx as usize);
                    row += &z.slice(s![t, j * c_out..(j + 1) * c_out]);
                }
            }
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let t_out = x.nrows() * self.stride;
        let mut y = Array2::zeros((t_out, self.c_out()));
        for start in (0..x.nrows()).step_by(BLOCK) {
            let end = (start + BLOCK).min(x.nrows());
            let z = x.slice(s![start..end, ..]).dot(&self.w);
            self.scatter(&z, &mut y, start);
        }
        y + &self.b
    }

    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut ConvTranspose1d) -> Array2<f64> {
        let c_out = self.c_out();
        let mut dz = Array2::zeros((x.nrows(), self.kernel * c_out));
        for t in 0..x.nrows() {
            for j in 0..self.kernel {
                let idx = (t * self.stride + j) as isize - self.pad as isize;
                if idx >= 0 && (idx as usize) < dy.nrows() {
                    dz.slice_mut(s![t, j * c_out..(j + 1) * c_out]).assign(&dy.row(idx as usize));
                }
            }
        }
        grad.w += &x.t().dot(&dz);
        grad.b += &dy.sum_axis(Axis(0));
        dz.dot(&self.w.t())
    }

    pub fn tensors(&self) -> [&[f64]; 2] {
        [slice(&self.w), slice1(&self.b)]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 2] {
        [slice_mut(&mut self.w), slice1_mut(&mut self.b)]
    }
}
