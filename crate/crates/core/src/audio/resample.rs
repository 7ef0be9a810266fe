//! Polyphase windowed-sinc resampling with a Kaiser window.

use super::AudioClip;
use crate::error::{Error, Result};

/// Zero crossings of the sinc on each side, at the filter's cutoff.
const ZERO_CROSSINGS: f64 = 32.0;
const KAISER_BETA: f64 = 9.0;
/// Above this many phases the kernel is evaluated per output sample instead of tabulated.
const MAX_TABLE_PHASES: u64 = 2048;

pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(Error::invalid("target rate must be positive"));
    }
    if clip.is_empty() {
        return Err(Error::EmptyClip);
    }
    let source_rate = clip.sample_rate();
    if source_rate == target_rate {
        return Ok(clip.clone());
    }
    let g = gcd(source_rate as u64, target_rate as u64);
    let up = target_rate as u64 / g;
    let down = source_rate as u64 / g;
    let kernel = Kernel::new(up, down);

    let x = clip.samples();
    let out_len = ((x.len() as u64 * up).div_ceil(down)) as usize;
    let mut out = Vec::with_capacity(out_len);
    if up <= MAX_TABLE_PHASES {
        let table: Vec<Vec<f64>> = (0..up).map(|p| kernel.taps(p as f64 / up as f64)).collect();
        for n in 0..out_len as u64 {
            let pos = n * down;
            let base = (pos / up) as i64;
            let taps = &table[(pos % up) as usize];
            out.push(kernel.apply(x, base, taps));
        }
    } else {
        for n in 0..out_len as u64 {
            let pos = n * down;
            let base = (pos / up) as i64;
            let taps = kernel.taps((pos % up) as f64 / up as f64);
            out.push(kernel.apply(x, base, &taps));
        }
    }
    AudioClip::new(out, target_rate)
}

/// Low-pass at half the Nyquist frequency and keep every other sample.
/// Output sample `n` sits at input sample `2n`.
pub(crate) fn decimate_by_two(x: &[f64]) -> Vec<f64> {
    let kernel = Kernel::new(1, 2);
    let taps = kernel.taps(0.0);
    (0..x.len().div_ceil(2))
        .map(|n| kernel.apply(x, 2 * n as i64, &taps))
        .collect()
}

struct Kernel {
    /// Cutoff relative to the source Nyquist frequency.
    cutoff: f64,
    half_width: f64,
    reach: i64,
    i0_beta: f64,
}

impl Kernel {
    fn new(up: u64, down: u64) -> Self {
        let cutoff = (up as f64 / down as f64).min(1.0);
        let half_width = ZERO_CROSSINGS / cutoff;
        Self {
            cutoff,
            half_width,
            reach: half_width.ceil() as i64,
            i0_beta: bessel_i0(KAISER_BETA),
        }
    }

    /// Taps for source indices `base - reach + 1 ..= base + reach`, where the
    /// output instant sits `frac` samples after `base`. Normalized to unit sum
    /// so DC passes exactly.
    fn taps(&self, frac: f64) -> Vec<f64> {
        let mut taps: Vec<f64> = (-self.reach + 1..=self.reach)
            .map(|k| {
                let tau = frac - k as f64;
                if tau.abs() >= self.half_width {
                    return 0.0;
                }
                let r = tau / self.half_width;
                let w = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / self.i0_beta;
                self.cutoff * sinc(self.cutoff * tau) * w
            })
            .collect();
        let sum: f64 = taps.iter().sum();
        if sum != 0.0 {
            taps.iter_mut().for_each(|t| *t /= sum);
        }
        taps
    }

    fn apply(&self, x: &[f64], base: i64, taps: &[f64]) -> f64 {
        let first = base - self.reach + 1;
        let lo = (-first).max(0) as usize;
        let hi = ((x.len() as i64 - first).max(0) as usize).min(taps.len());
        (lo..hi)
            .map(|j| taps[j] * x[(first + j as i64) as usize])
            .sum()
    }
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    while term > sum * 1e-17 {
        term *= q / (k * k);
        sum += term;
        k += 1.0;
    }
    sum
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}
