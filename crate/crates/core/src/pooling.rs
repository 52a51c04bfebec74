//! Spatial pooling: reduce an `H x W x C` feature map to a length-`C` vector.
//!
//! Three reductions are supported: average, max, and the generalized mean
//! `(mean x^p)^(1/p)`, which interpolates between average (`p = 1`) and max
//! (`p -> inf`). Each has an analytic backward pass.

use ndarray::{Array1, Array3, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default generalized-mean exponent.
pub const DEFAULT_GEM_P: f64 = 3.0;

/// Pooling reduction. The generalized mean carries its exponent; it is fixed
/// at construction, not learned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PoolingMethod {
    Avg,
    Max,
    Gem { p: f64 },
}

impl PoolingMethod {
    /// Generalized mean with exponent `p`; `p` must be finite and positive.
    pub fn gem(p: f64) -> Result<Self> {
        if !(p.is_finite() && p > 0.0) {
            return Err(Error::config(format!("gem exponent must be positive, got {p}")));
        }
        Ok(PoolingMethod::Gem { p })
    }

    /// Parse a CLI/config name; `gem` uses the supplied exponent.
    pub fn parse(name: &str, gem_p: f64) -> Result<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "avg" => Ok(PoolingMethod::Avg),
            "max" => Ok(PoolingMethod::Max),
            "gem" => PoolingMethod::gem(gem_p),
            other => Err(Error::config(format!(
                "unknown pooling method {other:?} (expected avg, max or gem)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PoolingMethod::Avg => "avg",
            PoolingMethod::Max => "max",
            PoolingMethod::Gem { .. } => "gem",
        }
    }
}

fn check_map(map: &Array3<f64>) -> Result<()> {
    let (h, w, c) = map.dim();
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::shape(format!("empty feature map {:?}", map.dim())));
    }
    if !map.iter().all(|v| v.is_finite()) {
        return Err(Error::numerical("feature map contains non-finite values"));
    }
    Ok(())
}

/// Reduce `map` to one value per channel.
pub fn pool_forward(map: &Array3<f64>, method: &PoolingMethod) -> Result<Array1<f64>> {
    check_map(map)?;
    let (h, w, c) = map.dim();
    let spatial = (h * w) as f64;
    let mut out = Array1::zeros(c);
    match *method {
        PoolingMethod::Avg => {
            for ch in 0..c {
                let mut sum = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        sum += map[(i, j, ch)];
                    }
                }
                out[ch] = sum / spatial;
            }
        }
        PoolingMethod::Max => {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                for i in 0..h {
                    for j in 0..w {
                        let v = map[(i, j, ch)];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[ch] = best;
            }
        }
        PoolingMethod::Gem { p } => {
            for ch in 0..c {
                out[ch] = gem_channel(map, ch, p)?.0;
            }
        }
    }
    Ok(out)
}

/// Generalized mean of one channel, computed on values rescaled by the channel
/// max so that `x^p` cannot overflow for large `p`. Returns `(value, max)`.
fn gem_channel(map: &Array3<f64>, ch: usize, p: f64) -> Result<(f64, f64)> {
    let (h, w, _) = map.dim();
    let mut peak = 0.0f64;
    for i in 0..h {
        for j in 0..w {
            let v = map[(i, j, ch)];
            if v < 0.0 {
                return Err(Error::domain(format!(
                    "gem pooling requires non-negative inputs, got {v} at ({i}, {j}, {ch})"
                )));
            }
            if v > peak {
                peak = v;
            }
        }
    }
    if peak == 0.0 {
        return Ok((0.0, 0.0));
    }
    let spatial = (h * w) as f64;
    let mut acc = 0.0;
    for i in 0..h {
        for j in 0..w {
            acc += (map[(i, j, ch)] / peak).powf(p);
        }
    }
    Ok((peak * (acc / spatial).powf(1.0 / p), peak))
}

/// Gradient of [`pool_forward`] with respect to the map, given the gradient
/// on the pooled vector.
///
/// Max routes the whole subgradient to the first (row-major) maximum of each
/// channel. For an all-zero channel the generalized-mean gradient is taken
/// as zero.
pub fn pool_backward(
    map: &Array3<f64>,
    method: &PoolingMethod,
    upstream: &ArrayView1<f64>,
) -> Result<Array3<f64>> {
    check_map(map)?;
    let (h, w, c) = map.dim();
    if upstream.len() != c {
        return Err(Error::shape(format!(
            "upstream has {} channels, map has {c}",
            upstream.len()
        )));
    }
    let spatial = (h * w) as f64;
    let mut grad = Array3::zeros((h, w, c));
    match *method {
        PoolingMethod::Avg => {
            for ch in 0..c {
                let g = upstream[ch] / spatial;
                for i in 0..h {
                    for j in 0..w {
                        grad[(i, j, ch)] = g;
                    }
                }
            }
        }
        PoolingMethod::Max => {
            for (ch, (i, j)) in max_argmax(map).into_iter().enumerate() {
                grad[(i, j, ch)] = upstream[ch];
            }
        }
        PoolingMethod::Gem { p } => {
            // d/dx_i (mean x^p)^(1/p) = x_i^(p-1) * (mean x^p)^(1/p - 1) / (HW).
            // The expression is scale-invariant in the gradient sense
            // (degree-1 homogeneity), so it is evaluated at x / max.
            for ch in 0..c {
                let (value, peak) = gem_channel(map, ch, p)?;
                if peak == 0.0 {
                    continue;
                }
                let scaled_value = value / peak;
                for i in 0..h {
                    for j in 0..w {
                        let t = map[(i, j, ch)] / peak;
                        grad[(i, j, ch)] =
                            upstream[ch] * t.powf(p - 1.0) * scaled_value.powf(1.0 - p) / spatial;
                    }
                }
            }
        }
    }
    Ok(grad)
}

/// Row-major first argmax per channel; the tie-break the backward pass uses.
pub fn max_argmax(map: &Array3<f64>) -> Vec<(usize, usize)> {
    let (h, w, c) = map.dim();
    let mut picks = Vec::with_capacity(c);
    for ch in 0..c {
        let mut best = f64::NEG_INFINITY;
        let mut at = (0, 0);
        for i in 0..h {
            for j in 0..w {
                let v = map[(i, j, ch)];
                if v > best {
                    best = v;
                    at = (i, j);
                }
            }
        }
        picks.push(at);
    }
    picks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn map_from(values: &[f64], h: usize, w: usize, c: usize) -> Array3<f64> {
        Array3::from_shape_vec((h, w, c), values.to_vec()).unwrap()
    }

    fn random_positive_map(seed: u64, h: usize, w: usize, c: usize) -> Array3<f64> {
        let mut r = rng::seeded(seed);
        let values: Vec<f64> = (0..h * w * c)
            .map(|_| 0.1 + 4.0 * rng::uniform_f64(&mut r))
            .collect();
        map_from(&values, h, w, c)
    }

    #[test]
    fn constant_map_pools_to_the_constant() {
        let map = map_from(&[5.0; 12], 2, 2, 3);
        for method in [
            PoolingMethod::Avg,
            PoolingMethod::Max,
            PoolingMethod::gem(3.0).unwrap(),
        ] {
            let out = pool_forward(&map, &method).unwrap();
            for v in out.iter() {
                assert!((v - 5.0).abs() < 1e-12, "{method:?}: {v}");
            }
        }
    }

    #[test]
    fn gem_p1_equals_avg() {
        let map = random_positive_map(11, 3, 4, 2);
        let avg = pool_forward(&map, &PoolingMethod::Avg).unwrap();
        let gem = pool_forward(&map, &PoolingMethod::gem(1.0).unwrap()).unwrap();
        for (a, g) in avg.iter().zip(gem.iter()) {
            assert!((a - g).abs() < 1e-12);
        }
    }

    #[test]
    fn two_by_two_values_match_direct_arithmetic() {
        let map = map_from(&[1.0, 2.0, 3.0, 4.0], 2, 2, 1);
        let avg = pool_forward(&map, &PoolingMethod::Avg).unwrap();
        assert!((avg[0] - 2.5).abs() < 1e-12);
        let max = pool_forward(&map, &PoolingMethod::Max).unwrap();
        assert!((max[0] - 4.0).abs() < 1e-12);
        let gem = pool_forward(&map, &PoolingMethod::gem(3.0).unwrap()).unwrap();
        let expected = ((1.0f64 + 8.0 + 27.0 + 64.0) / 4.0).powf(1.0 / 3.0);
        assert!((gem[0] - expected).abs() < 1e-12, "{} vs {expected}", gem[0]);
    }

    #[test]
    fn gem_rejects_negative_entries() {
        let map = map_from(&[1.0, -0.5, 3.0, 4.0], 2, 2, 1);
        let err = pool_forward(&map, &PoolingMethod::gem(3.0).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn avg_backward_splits_uniformly() {
        let map = map_from(&[1.0, 2.0, 3.0, 4.0], 2, 2, 1);
        let upstream = Array1::from_vec(vec![1.0]);
        let grad = pool_backward(&map, &PoolingMethod::Avg, &upstream.view()).unwrap();
        for v in grad.iter() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn max_backward_is_one_hot_at_first_max() {
        let map = map_from(&[1.0, 7.0, 7.0, 4.0], 2, 2, 1);
        let upstream = Array1::from_vec(vec![2.0]);
        let grad = pool_backward(&map, &PoolingMethod::Max, &upstream.view()).unwrap();
        // ties broken by row-major order: (0, 1) wins over (1, 0)
        assert_eq!(grad[(0, 1, 0)], 2.0);
        assert_eq!(grad[(1, 0, 0)], 0.0);
        assert_eq!(grad.iter().filter(|v| **v != 0.0).count(), 1);
    }

    #[test]
    fn backward_rejects_channel_mismatch() {
        let map = random_positive_map(5, 2, 2, 3);
        let upstream = Array1::from_vec(vec![1.0, 1.0]);
        let err = pool_backward(&map, &PoolingMethod::Avg, &upstream.view()).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    /// Central finite difference of the pooled value w.r.t. one map entry.
    fn fd_entry(
        map: &Array3<f64>,
        method: &PoolingMethod,
        at: (usize, usize, usize),
        ch: usize,
        step: f64,
    ) -> f64 {
        let mut plus = map.clone();
        plus[at] += step;
        let mut minus = map.clone();
        minus[at] -= step;
        let fp = pool_forward(&plus, method).unwrap()[ch];
        let fm = pool_forward(&minus, method).unwrap()[ch];
        (fp - fm) / (2.0 * step)
    }

    #[test]
    fn gem_backward_matches_finite_differences() {
        let map = random_positive_map(23, 3, 3, 2);
        let method = PoolingMethod::gem(3.0).unwrap();
        let upstream = Array1::from_vec(vec![1.0, 1.0]);
        let grad = pool_backward(&map, &method, &upstream.view()).unwrap();
        let mut r = rng::seeded(7);
        for _ in 0..10 {
            let at = (
                rng::bounded(&mut r, 3) as usize,
                rng::bounded(&mut r, 3) as usize,
                rng::bounded(&mut r, 2) as usize,
            );
            let num = fd_entry(&map, &method, at, at.2, 1e-4);
            let ana = grad[at];
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-8);
            assert!(rel < 1e-5, "at {at:?}: fd {num} vs analytic {ana}");
        }
    }

    #[test]
    fn gem_value_is_nondecreasing_in_p_and_bounded_by_max() {
        let map = random_positive_map(31, 4, 4, 3);
        let max = pool_forward(&map, &PoolingMethod::Max).unwrap();
        let mut prev = pool_forward(&map, &PoolingMethod::gem(0.5).unwrap()).unwrap();
        for p in [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0] {
            let cur = pool_forward(&map, &PoolingMethod::gem(p).unwrap()).unwrap();
            for ch in 0..3 {
                assert!(cur[ch] >= prev[ch] - 1e-12, "p={p} ch={ch}");
            }
            prev = cur;
        }
        // power-mean gap at p = 64: (1/HW)^(1/64) <= gem/max <= 1
        let floor = (1.0f64 / 16.0).powf(1.0 / 64.0);
        for ch in 0..3 {
            assert!(prev[ch] <= max[ch] + 1e-12, "ch={ch}");
            assert!(prev[ch] >= max[ch] * floor - 1e-12, "ch={ch}");
        }
    }

    #[test]
    fn gem_64_is_within_one_percent_of_max_on_low_spread_maps() {
        // The 1% approach bound needs entries concentrated near the channel
        // max; with a lone maximum the gap is (1/HW)^(1/64), above 1% for
        // any HW >= 2.
        let mut r = rng::seeded(47);
        for _ in 0..20 {
            let base = 0.5 + 5.0 * rng::uniform_f64(&mut r);
            let map = Array3::from_shape_fn((3, 3, 2), |_| {
                base * (1.0 + 0.01 * (rng::uniform_f64(&mut r) - 0.5))
            });
            let max = pool_forward(&map, &PoolingMethod::Max).unwrap();
            let gem = pool_forward(&map, &PoolingMethod::gem(64.0).unwrap()).unwrap();
            for ch in 0..2 {
                assert!((gem[ch] - max[ch]).abs() / max[ch] < 0.01);
            }
        }
    }

    #[test]
    fn all_zero_map_gives_zero_gem_value_and_gradient() {
        let map = Array3::zeros((2, 2, 1));
        let method = PoolingMethod::gem(3.0).unwrap();
        assert_eq!(pool_forward(&map, &method).unwrap()[0], 0.0);
        let upstream = Array1::from_vec(vec![1.0]);
        let grad = pool_backward(&map, &method, &upstream.view()).unwrap();
        assert!(grad.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn parse_names() {
        assert_eq!(PoolingMethod::parse("avg", 3.0).unwrap(), PoolingMethod::Avg);
        assert_eq!(PoolingMethod::parse("MAX", 3.0).unwrap(), PoolingMethod::Max);
        assert_eq!(
            PoolingMethod::parse("gem", 2.5).unwrap(),
            PoolingMethod::Gem { p: 2.5 }
        );
        assert!(PoolingMethod::parse("gem", -1.0).is_err());
        assert!(PoolingMethod::parse("mean", 3.0).is_err());
    }
}
