//! Test oracles kept independent of the library's matrix code.
#![allow(dead_code)]

use afm_core::nn::{Activation, Network};
use afm_core::Matrix2D;

/// Straight-line scalar forward over plain nested loops.
pub fn scalar_forward(net: &Network, x: &[Vec<f64>], gates: &[Option<Vec<bool>>]) -> Vec<Vec<f64>> {
    let mut acts: Vec<Vec<f64>> = x.to_vec();
    for (li, layer) in net.layers.iter().enumerate() {
        let fan_in = layer.fan_in();
        let fan_out = layer.fan_out();
        let w = layer.weights.as_slice();
        let mut next = Vec::with_capacity(acts.len());
        for row in &acts {
            let mut out = vec![0.0; fan_out];
            for j in 0..fan_out {
                let mut z = layer.bias[j];
                for i in 0..fan_in {
                    z += row[i] * w[i * fan_out + j];
                }
                let a = match layer.activation {
                    Activation::ReLU => z.max(0.0),
                    Activation::Identity => z,
                };
                let on = gates.get(li).and_then(|g| g.as_ref()).is_none_or(|g| g[j]);
                out[j] = if on { a } else { 0.0 };
            }
            next.push(out);
        }
        acts = next;
    }
    acts
}

/// Central difference of `f` with respect to each entry of parameter tensor
/// `tensor` of `net`.
pub fn central_differences(
    net: &Network,
    tensor: usize,
    h: f64,
    f: &dyn Fn(&Network) -> f64,
) -> Vec<f64> {
    let len = net.param_slices()[tensor].len();
    let mut out = Vec::with_capacity(len);
    for k in 0..len {
        let mut plus = net.clone();
        plus.param_slices_mut()[tensor][k] += h;
        let mut minus = net.clone();
        minus.param_slices_mut()[tensor][k] -= h;
        out.push((f(&plus) - f(&minus)) / (2.0 * h));
    }
    out
}

/// |a-b| / max(|a|, |b|, floor).
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn matrix_from(rows: &[Vec<f64>]) -> Matrix2D {
    Matrix2D::from_rows(rows).unwrap()
}

/// Gaussian class blobs in `[0, 1]`-ish space: class `c` centers on a
/// distinct random point, rows are interleaved by class.
pub fn blobs(n: usize, dim: usize, classes: usize, spread: f64, seed: u64) -> afm_core::data::LabeledDataset {
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};
    let mut r = afm_core::rng::stream(seed, 1234);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| r.random_range(0.0..1.0)).collect())
        .collect();
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for d in 0..dim {
            let e: f64 = StandardNormal.sample(&mut r);
            data.push(centers[c][d] + spread * e);
        }
        labels.push(c);
    }
    afm_core::data::LabeledDataset::new(Matrix2D::from_vec(n, dim, data).unwrap(), labels, "blobs").unwrap()
}
