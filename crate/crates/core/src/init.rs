//! Data-driven initialization of centroids and inverse-widths from one batch.
//!
//! Centroids come from online (web-scale) k-means seeded with k-means++.
//! Widths are set so that roughly 95% of points lie within one RBF width of
//! their nearest centroid: `β⁺ = 4 / d`, where `d` is the larger of the 95%
//! quantiles of point-to-nearest-centroid and centroid-to-nearest-point
//! k-powered distances. For `k = 2` this is the familiar `4 / d²` rule.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rbf::Network;
use crate::tape::{cdist_pow_values, inverse_softplus, Tape};
use crate::tensor::{Scalar, Tensor};

/// Online passes used by [`lazy_init_network`].
pub const DEFAULT_KMEANS_PASSES: usize = 100;

const SEED_JITTER: f64 = 1e-5;
const MIN_D_POWER: f64 = 1e-12;
/// Targets at or above this are stored raw instead of through inverse-softplus.
const RAW_PASSTHROUGH: f64 = 5.0;

#[inline]
fn pow_dist(a: &[f64], b: &[f64], k: f64) -> f64 {
    if k == 2.0 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    } else {
        a.iter().zip(b).map(|(x, y)| (x - y).abs().powf(k)).sum()
    }
}

/// Linear-interpolation quantile (`h = (n − 1)·p`).
pub fn quantile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of an empty set");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// k-means++ seeding followed by `passes` online refinement passes.
///
/// The first centroid is row 0. Each further seed is drawn with probability
/// proportional to its k-powered distance to the nearest chosen seed and
/// jittered by `1e-5 · N(0, 1)`. A refinement pass assigns every point to
/// its nearest centroid, then moves each assigned centroid toward the point
/// with step `1 / v_c`, `v_c` counting all updates to `c` so far.
pub fn webscale_kmeans<T: Scalar, R: Rng + ?Sized>(
    data: &Tensor<T>,
    num_centroids: usize,
    k: f64,
    passes: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let (n, d) = data.shape();
    if num_centroids == 0 || n < num_centroids {
        return Err(Error::InsufficientData(format!(
            "{n} points cannot seed {num_centroids} centroids"
        )));
    }
    let points: Vec<Vec<f64>> = (0..n)
        .map(|i| data.row_slice(i).iter().map(|v| v.as_f64()).collect())
        .collect();

    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(num_centroids);
    centroids.push(points[0].clone());
    let mut nearest: Vec<f64> = points.iter().map(|p| pow_dist(p, &centroids[0], k)).collect();
    while centroids.len() < num_centroids {
        let total: f64 = nearest.iter().sum();
        let u: f64 = rng.gen();
        let idx = if total > 0.0 {
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in nearest.iter().enumerate() {
                acc += w / total;
                if acc > u {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave the cumulative sum just below u
            pick.unwrap_or_else(|| nearest.iter().rposition(|&w| w > 0.0).unwrap_or(0))
        } else {
            0
        };
        let seed: Vec<f64> = points[idx]
            .iter()
            .map(|&v| {
                let z: f64 = StandardNormal.sample(rng);
                v + SEED_JITTER * z
            })
            .collect();
        for (w, p) in nearest.iter_mut().zip(&points) {
            *w = w.min(pow_dist(p, &seed, k));
        }
        centroids.push(seed);
    }

    let mut counts = vec![0usize; num_centroids];
    let mut assign = vec![0usize; n];
    for _ in 0..passes {
        for (a, p) in assign.iter_mut().zip(&points) {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in centroids.iter().enumerate() {
                let dist = pow_dist(p, c, k);
                if dist < best_d {
                    best_d = dist;
                    best = j;
                }
            }
            *a = best;
        }
        for (&c, p) in assign.iter().zip(&points) {
            counts[c] += 1;
            let eta = 1.0 / counts[c] as f64;
            for (cv, &pv) in centroids[c].iter_mut().zip(p) {
                *cv = (1.0 - eta) * *cv + eta * pv;
            }
        }
    }

    let flat = centroids.into_iter().flatten().map(T::of).collect();
    Tensor::from_vec(num_centroids, d, flat)
}

/// Shared inverse-width of one layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WidthInit {
    /// `max(q₁, q₂)` of the k-powered nearest distances, floored at `1e-12`.
    pub d_power: f64,
    /// `4 / d_power`
    pub beta_plus: f64,
    /// Stored raw parameter (`inverse_softplus(β⁺)`, or `β⁺` itself when ≥ 5).
    pub beta_raw: f64,
}

pub fn init_inverse_widths<T: Scalar>(
    data: &Tensor<T>,
    centroids: &Tensor<T>,
    k: f64,
) -> Result<WidthInit> {
    if data.rows() == 0 || centroids.rows() == 0 {
        return Err(Error::InsufficientData("width estimation needs data and centroids".into()));
    }
    let dist = cdist_pow_values(&data.cast::<f64>(), &centroids.cast::<f64>(), k)?;
    let per_point: Vec<f64> = (0..dist.rows())
        .map(|i| dist.row_slice(i).iter().copied().fold(f64::INFINITY, f64::min))
        .collect();
    let per_centroid: Vec<f64> = (0..dist.cols())
        .map(|j| (0..dist.rows()).map(|i| dist.get(i, j)).fold(f64::INFINITY, f64::min))
        .collect();
    let mut d_power = quantile(&per_point, 0.95).max(quantile(&per_centroid, 0.95));
    if d_power < MIN_D_POWER {
        log::warn!("width-estimation data sits on the centroids (d = {d_power:e}); clamping to {MIN_D_POWER:e}");
        d_power = MIN_D_POWER;
    }
    let beta_plus = 4.0 / d_power;
    let beta_raw = if beta_plus < RAW_PASSTHROUGH {
        inverse_softplus(beta_plus)?
    } else {
        beta_plus
    };
    Ok(WidthInit {
        d_power,
        beta_plus,
        beta_raw,
    })
}

#[derive(Clone, Debug)]
pub struct LayerInit {
    pub layer: usize,
    pub centroids: Tensor<f64>,
    pub width: WidthInit,
    /// Rows used for the centroid fit and the width estimate.
    pub centroid_rows: usize,
    pub width_rows: usize,
}

#[derive(Clone, Debug, Default)]
pub struct InitReport {
    pub layers: Vec<LayerInit>,
}

impl fmt::Display for InitReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.layers {
            writeln!(
                f,
                "layer={} centroids={} centroid_rows={} width_rows={} d_power={:.6e} beta_plus={:.6e} beta_raw={:.6e}",
                l.layer,
                l.centroids.rows(),
                l.centroid_rows,
                l.width_rows,
                l.width.d_power,
                l.width.beta_plus,
                l.width.beta_raw
            )?;
        }
        Ok(())
    }
}

/// Initializes every layer from one batch, front to back.
///
/// Each layer fits its centroids on the first half of its input rows and its
/// widths on the second half; the full batch is then pushed through the
/// initialized layer (depression included) to produce the next layer's input.
pub fn lazy_init_network<T: Scalar, R: Rng + ?Sized>(
    network: &mut Network<T>,
    batch: &Tensor<T>,
    passes: usize,
    rng: &mut R,
) -> Result<InitReport> {
    let m = batch.rows();
    if m < 2 {
        return Err(Error::InsufficientData(format!(
            "initialization batch needs at least 2 rows, got {m}"
        )));
    }
    if batch.cols() != network.input_dim() {
        return Err(Error::Dimension(format!(
            "init batch has {} features, network expects {}",
            batch.cols(),
            network.input_dim()
        )));
    }
    let half = m / 2;
    let (k, rec, depression) = {
        let c = network.config();
        (c.k, c.recovery, c.depression)
    };
    let mut report = InitReport::default();
    let mut x = batch.clone();
    let mut dep = Tensor::<T>::ones(m, 1);
    let depth = network.layers().len();
    for li in 0..depth {
        let layer = &mut network.layers_mut()[li];
        let fit_rows = x.slice_rows(0, half);
        let width_rows = x.slice_rows(half, m);
        let centroids = webscale_kmeans(&fit_rows, layer.num_centroids(), k, passes, rng)?;
        let width = init_inverse_widths(&width_rows, &centroids, k)?;
        layer.centroids = centroids;
        let n = layer.num_centroids();
        layer.beta_raw = Tensor::full(1, n, T::of(width.beta_raw));
        layer.beta_init_raw = Tensor::full(1, n, T::of(width.beta_raw));
        report.layers.push(LayerInit {
            layer: li,
            centroids: layer.centroids.cast(),
            width,
            centroid_rows: half,
            width_rows: m - half,
        });
        log::info!(
            "init layer {li}: d_power={:.4e} beta_plus={:.4e}",
            width.d_power,
            width.beta_plus
        );
        if li + 1 < depth {
            let tape = Tape::new();
            let lv = layer.bind(&tape, false);
            let xv = tape.constant(x.clone());
            let next = if depression {
                let dv = tape.constant(dep.clone());
                let (p, d) = crate::rbf::hidden_forward(&tape, xv, dv, &lv, k, rec)?;
                dep = tape.value(d).clone();
                p
            } else {
                crate::rbf::plain_hidden_forward(&tape, xv, &lv, k)?
            };
            let next_x = tape.value(next).clone();
            x = next_x;
        }
    }
    network.mark_initialized();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rbf::NetworkConfig;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quantile_linear_interpolation() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_abs_diff_eq!(quantile(&v, 0.95), 95.05, epsilon = 1e-12);
        assert_eq!(quantile(&[3.0], 0.95), 3.0);
        assert_abs_diff_eq!(quantile(&[0.0, 10.0], 0.5), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn single_centroid_is_running_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data = Tensor::<f64>::from_rows(&[[1.0, 2.0], [3.0, -2.0], [8.0, 0.5], [0.0, 0.0]]);
        let c = webscale_kmeans(&data, 1, 2.0, 1, &mut rng).unwrap();
        assert_abs_diff_eq!(c.get(0, 0), 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.get(0, 1), 0.125, epsilon = 1e-12);
    }

    #[test]
    fn far_apart_points_each_get_a_centroid() {
        let pts: Vec<[f64; 2]> = (0..6).map(|i| [100.0 * i as f64, -50.0 * i as f64]).collect();
        let data = Tensor::<f64>::from_rows(&pts);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = webscale_kmeans(&data, 6, 2.0, 3, &mut rng).unwrap();
        // brute-force: nearest centroid of each point, must be a bijection
        let mut used = vec![false; 6];
        for p in &pts {
            let (j, d) = (0..6)
                .map(|j| {
                    let cj = c.row_slice(j);
                    (j, ((cj[0] - p[0]).powi(2) + (cj[1] - p[1]).powi(2)).sqrt())
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            assert!(d < 1e-3, "centroid {j} is {d} away");
            assert!(!used[j]);
            used[j] = true;
        }
    }

    #[test]
    fn kmeans_rejects_too_few_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data = Tensor::<f64>::zeros(3, 2);
        assert!(matches!(
            webscale_kmeans(&data, 4, 2.0, 1, &mut rng),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn kmeans_is_deterministic() {
        let data = Tensor::<f32>::from_vec(40, 3, (0..120).map(|i| ((i * 7919) % 97) as f32 / 10.0).collect()).unwrap();
        let a = webscale_kmeans(&data, 8, 2.0, 10, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = webscale_kmeans(&data, 8, 2.0, 10, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn width_examples() {
        // one centroid at the origin; all points at squared distance 1
        let data = Tensor::<f64>::from_rows(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]]);
        let c = Tensor::<f64>::from_rows(&[[0.0, 0.0]]);
        let w = init_inverse_widths(&data, &c, 2.0).unwrap();
        assert_abs_diff_eq!(w.d_power, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w.beta_plus, 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w.beta_raw, (4f64.exp() - 1.0).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(crate::tape::softplus_scalar(w.beta_raw), 4.0, epsilon = 1e-12);

        let s = 0.5f64.sqrt();
        let data = Tensor::<f64>::from_rows(&[[s, 0.0], [0.0, s]]);
        let w = init_inverse_widths(&data, &c, 2.0).unwrap();
        assert_abs_diff_eq!(w.beta_plus, 8.0, epsilon = 1e-9);
        assert_eq!(w.beta_raw, w.beta_plus);
    }

    #[test]
    fn width_clamps_degenerate_distance() {
        let data = Tensor::<f64>::from_rows(&[[1.0, 1.0], [1.0, 1.0]]);
        let w = init_inverse_widths(&data, &data.slice_rows(0, 1), 2.0).unwrap();
        assert_eq!(w.d_power, 1e-12);
        assert!(w.beta_raw.is_finite());
    }

    fn blob_batch(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 2).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_vec(n, 2, data).unwrap()
    }

    #[test]
    fn lazy_init_splits_and_fills_constant_widths() {
        let mut cfg = NetworkConfig::uniform(2, 1, 5, 4, 3);
        cfg.seed = 2;
        let mut net = Network::<f64>::new(cfg).unwrap();
        let batch = blob_batch(100, 1);
        let report = lazy_init_network(&mut net, &batch, 100, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(report.layers.len(), 2);
        assert_eq!(report.layers[0].centroid_rows, 50);
        assert_eq!(report.layers[0].width_rows, 50);
        for l in net.layers() {
            let first = l.beta_raw.data()[0];
            assert!(l.beta_raw.data().iter().all(|&b| b == first));
            assert_eq!(l.beta_raw, l.beta_init_raw);
        }
        // centroids of layer 0 come from the first half only
        let again = webscale_kmeans(&batch.slice_rows(0, 50), 5, 2.0, 100, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(net.layers()[0].centroids, again);
        assert_eq!(report.to_string().lines().count(), 2);
    }

    #[test]
    fn lazy_init_is_deterministic_and_rejects_tiny_batches() {
        let cfg = NetworkConfig::uniform(2, 2, 6, 5, 3);
        let batch = blob_batch(40, 3);
        let run = || {
            let mut net = Network::<f32>::new(cfg.clone()).unwrap();
            lazy_init_network(&mut net, &batch.cast(), 20, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
            net
        };
        assert_eq!(run(), run());
        let mut net = Network::<f64>::new(cfg).unwrap();
        assert!(lazy_init_network(&mut net, &Tensor::zeros(1, 2), 1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    proptest! {
        #[test]
        fn quantile_covers_at_least_floor_fraction(
            vals in proptest::collection::vec(0.0f64..100.0, 1..200),
        ) {
            // points with distance <= q: at least floor(0.95(n-1)) + 1 of them
            let n = vals.len();
            let q = quantile(&vals, 0.95);
            let covered = vals.iter().filter(|&&v| v <= q).count();
            let bound = ((0.95 * (n - 1) as f64).floor() as usize) + 1;
            prop_assert!(covered >= bound);
        }

        #[test]
        fn width_half_is_95_percent_covered(seed in 0u64..500) {
            // n = 100: the interpolated quantile bound reaches exactly 95%
            let data = blob_batch(100, seed);
            let c = blob_batch(4, seed + 1000);
            let w = init_inverse_widths(&data, &c, 2.0).unwrap();
            let d = cdist_pow_values(&data, &c, 2.0).unwrap();
            let inside = (0..100)
                .filter(|&i| d.row_slice(i).iter().copied().fold(f64::INFINITY, f64::min) <= w.d_power)
                .count();
            prop_assert!(inside >= 95);
        }
    }
}
