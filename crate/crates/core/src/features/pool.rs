use ndarray::{s, Array2, ArrayView2, Axis};

use super::FeatureMatrix;
use crate::error::{Error, Result};

/// Mean and population standard deviation over time of the features and of
/// their first and second frame-to-frame differences.
///
/// Layout: `[mean(x), std(x), mean(Δx), std(Δx), mean(ΔΔx), std(ΔΔx)]`.
pub fn stats_pool(feat: &FeatureMatrix) -> Result<Vec<f64>> {
    if feat.frames() < 3 {
        return Err(Error::TooFewFrames {
            frames: feat.frames(),
            required: 3,
        });
    }
    let x = feat.values();
    let d1 = diff(x.view());
    let d2 = diff(d1.view());
    let mut out = Vec::with_capacity(6 * feat.dims());
    for m in [x.view(), d1.view(), d2.view()] {
        let (mean, std) = mean_std(m);
        out.extend(mean);
        out.extend(std);
    }
    Ok(out)
}

fn diff(x: ArrayView2<f64>) -> Array2<f64> {
    &x.slice(s![1.., ..]) - &x.slice(s![..-1, ..])
}

fn mean_std(x: ArrayView2<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = x.nrows() as f64;
    let mean = x.sum_axis(Axis(0)) / n;
    let var = x
        .rows()
        .into_iter()
        .fold(ndarray::Array1::zeros(x.ncols()), |acc, r| {
            let d = &r - &mean;
            acc + &d * &d
        })
        / n;
    (mean.to_vec(), var.mapv(f64::sqrt).to_vec())
}
