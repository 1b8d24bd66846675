//! Kernel-relaxed plug-in entropy and mutual information.
//!
//! For observations `x_1..x_n`, `H = -(1/n) sum_i log((1/n) sum_j k(x_i - x_j))`.
//! With the exact-match kernel this is the plug-in (histogram) estimate; with
//! `k(d) = exp(-lambda |d|)` it is differentiable in the observations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{check_same_grid, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EntropyConfig {
    /// `lambda` in `exp(-lambda |d|)`.
    pub bandwidth: f64,
    /// Number of locations drawn when the input is larger.
    pub samples: usize,
    pub seed: u64,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self { bandwidth: 10.0, samples: 4096, seed: 0 }
    }
}

impl EntropyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::Config(format!("entropy bandwidth must be > 0, got {}", self.bandwidth)));
        }
        if self.samples < 2 {
            return Err(Error::Config(format!("entropy needs >= 2 samples, got {}", self.samples)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    /// `1` when the difference is exactly zero, else `0`.
    Exact,
    /// `exp(-lambda |d|)` with `lambda` from the config.
    Laplacian,
}

/// Seeded subset of `0..len` of size `cfg.samples`, sorted; all of `0..len`
/// when it is small enough.
pub(crate) fn sample_locations(len: usize, cfg: &EntropyConfig) -> Vec<usize> {
    if len <= cfg.samples {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut idx = rand::seq::index::sample(&mut rng, len, cfg.samples).into_vec();
    idx.sort_unstable();
    idx
}

#[inline]
fn kernel(d: f64, kind: Kernel, lambda: f64) -> f64 {
    match kind {
        Kernel::Exact => {
            if d == 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Kernel::Laplacian => (-lambda * d.abs()).exp(),
    }
}

/// Entropy from per-observation kernel sums `s_i = sum_j k(...)`.
fn entropy_from_sums(sums: &[f64]) -> f64 {
    let n = sums.len() as f64;
    -sums.iter().map(|s| (s / n).ln()).sum::<f64>() / n
}

fn kernel_sums_1d(x: &[f64], kind: Kernel, lambda: f64) -> Vec<f64> {
    x.iter().map(|&xi| x.iter().map(|&xj| kernel(xi - xj, kind, lambda)).sum()).collect()
}

fn kernel_sums_2d(x: &[f64], y: &[f64], kind: Kernel, lambda: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            (0..x.len())
                .map(|j| kernel(x[i] - x[j], kind, lambda) * kernel(y[i] - y[j], kind, lambda))
                .sum()
        })
        .collect()
}

/// Entropy estimate in nats. Inputs longer than `cfg.samples` are
/// subsampled at seeded random locations.
pub fn entropy_estimate(samples: &[f64], cfg: &EntropyConfig, kind: Kernel) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "entropy needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    cfg.validate()?;
    let x: Vec<f64> = sample_locations(samples.len(), cfg).into_iter().map(|i| samples[i]).collect();
    Ok(entropy_from_sums(&kernel_sums_1d(&x, kind, cfg.bandwidth)))
}

fn gather(v: &Volume, idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| v.data()[i]).collect()
}

/// `-(H(X) + H(Y) - H(X, Y))`, all three terms on the same sampled
/// locations. The joint kernel is the product of the marginal kernels.
pub fn mutual_information_loss(
    i1: &Volume,
    i2: &Volume,
    cfg: &EntropyConfig,
    kind: Kernel,
) -> Result<f64> {
    check_same_grid(&i1.grid(), &i2.grid(), "mutual_information_loss")?;
    cfg.validate()?;
    let idx = sample_locations(i1.data().len(), cfg);
    let (x, y) = (gather(i1, &idx), gather(i2, &idx));
    let lambda = cfg.bandwidth;
    let hx = entropy_from_sums(&kernel_sums_1d(&x, kind, lambda));
    let hy = entropy_from_sums(&kernel_sums_1d(&y, kind, lambda));
    let hxy = entropy_from_sums(&kernel_sums_2d(&x, &y, kind, lambda));
    Ok(-(hx + hy - hxy))
}

/// Gradients of the Laplacian-kernel mutual information loss with respect
/// to both volumes. Only the sampled voxels receive gradient.
pub(crate) fn mutual_information_backward(
    i1: &Volume,
    i2: &Volume,
    cfg: &EntropyConfig,
    upstream: f64,
) -> (Vec<f64>, Vec<f64>) {
    let idx = sample_locations(i1.data().len(), cfg);
    let (x, y) = (gather(i1, &idx), gather(i2, &idx));
    let lambda = cfg.bandwidth;
    let n = x.len();
    let k = |d: f64| (-lambda * d.abs()).exp();
    // d k / d d; zero at d = 0 (symmetric subgradient).
    let dk = |d: f64| -lambda * d.signum() * (-lambda * d.abs()).exp() * (d != 0.0) as u8 as f64;

    let sx = kernel_sums_1d(&x, Kernel::Laplacian, lambda);
    let sy = kernel_sums_1d(&y, Kernel::Laplacian, lambda);
    let sxy = kernel_sums_2d(&x, &y, Kernel::Laplacian, lambda);

    // loss = -H(X) - H(Y) + H(X,Y); dH/dx_m = -(1/n) sum_j k'(x_m - x_j)(1/S_m + 1/S_j).
    let scale = upstream / n as f64;
    let mut gx = vec![0.0; n];
    let mut gy = vec![0.0; n];
    for m in 0..n {
        let (mut ax, mut ay) = (0.0, 0.0);
        for j in 0..n {
            let (dx, dy) = (x[m] - x[j], y[m] - y[j]);
            let inv_x = 1.0 / sx[m] + 1.0 / sx[j];
            let inv_y = 1.0 / sy[m] + 1.0 / sy[j];
            let inv_xy = 1.0 / sxy[m] + 1.0 / sxy[j];
            let (kx, ky, dkx, dky) = (k(dx), k(dy), dk(dx), dk(dy));
            // -dH(X) contributes +(1/n)..., +dH(X,Y) contributes -(1/n)...
            ax += dkx * inv_x - dkx * ky * inv_xy;
            ay += dky * inv_y - kx * dky * inv_xy;
        }
        gx[m] = scale * ax;
        gy[m] = scale * ay;
    }

    let mut g1 = vec![0.0; i1.data().len()];
    let mut g2 = vec![0.0; i2.data().len()];
    for (s, &i) in idx.iter().enumerate() {
        g1[i] += gx[s];
        g2[i] += gy[s];
    }
    (g1, g2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::GridSpec;

    /// Brute-force plug-in entropy `-sum_v p_v ln p_v` from exact counts.
    fn plug_in(samples: &[f64]) -> f64 {
        let mut distinct: Vec<(f64, usize)> = Vec::new();
        for &s in samples {
            match distinct.iter_mut().find(|(v, _)| *v == s) {
                Some((_, c)) => *c += 1,
                None => distinct.push((s, 1)),
            }
        }
        let n = samples.len() as f64;
        -distinct.iter().map(|&(_, c)| (c as f64 / n) * (c as f64 / n).ln()).sum::<f64>()
    }

    fn cfg() -> EntropyConfig {
        EntropyConfig::default()
    }

    #[test]
    fn equal_samples_have_zero_entropy() {
        assert_eq!(entropy_estimate(&[3.0; 7], &cfg(), Kernel::Exact).unwrap(), 0.0);
    }

    #[test]
    fn distinct_samples_give_log_n() {
        let s: Vec<f64> = (0..9).map(|i| i as f64 * 0.5).collect();
        let h = entropy_estimate(&s, &cfg(), Kernel::Exact).unwrap();
        assert!((h - 9f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn two_pairs_give_log_two() {
        let h = entropy_estimate(&[1.0, 1.0, 4.0, 4.0], &cfg(), Kernel::Exact).unwrap();
        assert!((h - 2f64.ln()).abs() < 1e-15);
        assert!((h - plug_in(&[1.0, 1.0, 4.0, 4.0])).abs() < 1e-15);
    }

    #[test]
    fn rejects_too_few_samples() {
        assert!(matches!(entropy_estimate(&[1.0], &cfg(), Kernel::Exact), Err(Error::InvalidArgument(_))));
        let bad = EntropyConfig { bandwidth: 0.0, ..cfg() };
        assert!(entropy_estimate(&[1.0, 2.0], &bad, Kernel::Laplacian).is_err());
    }

    #[test]
    fn subsampling_is_seeded() {
        let s: Vec<f64> = (0..500).map(|i| ((i * 37) % 11) as f64).collect();
        let c = EntropyConfig { samples: 64, seed: 5, ..cfg() };
        let a = entropy_estimate(&s, &c, Kernel::Exact).unwrap();
        let b = entropy_estimate(&s, &c, Kernel::Exact).unwrap();
        assert_eq!(a, b);
        assert_eq!(sample_locations(500, &c).len(), 64);
    }

    #[test]
    fn laplacian_kernel_approaches_exact() {
        let s: Vec<f64> = [0, 0, 1, 2, 2, 2, 3, 5, 5, 1].iter().map(|&v| v as f64).collect();
        let exact = entropy_estimate(&s, &cfg(), Kernel::Exact).unwrap();
        let gaps: Vec<f64> = [1.0, 10.0, 100.0]
            .iter()
            .map(|&l| {
                let c = EntropyConfig { bandwidth: l, ..cfg() };
                (entropy_estimate(&s, &c, Kernel::Laplacian).unwrap() - exact).abs()
            })
            .collect();
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
        assert!(gaps[2] < 1e-12);
    }

    #[test]
    fn mi_cases() {
        let g = GridSpec::cube(4).unwrap();
        let a = Volume::from_fn(g, |p| ((p[0] as usize) % 2) as f64);
        let h = entropy_estimate(a.data(), &cfg(), Kernel::Exact).unwrap();
        let self_mi = mutual_information_loss(&a, &a, &cfg(), Kernel::Exact).unwrap();
        assert!((self_mi + h).abs() < 1e-12);

        let c1 = Volume::constant(g, 1.0);
        let c2 = Volume::constant(g, -2.0);
        assert_eq!(mutual_information_loss(&c1, &c2, &cfg(), Kernel::Exact).unwrap(), 0.0);

        // x-parity against y-parity: every joint cell holds a quarter of the voxels.
        let b = Volume::from_fn(g, |p| ((p[1] as usize) % 2) as f64);
        let mi = mutual_information_loss(&a, &b, &cfg(), Kernel::Exact).unwrap();
        assert!(mi.abs() < 1e-12);
    }

    #[test]
    fn mi_gradient_matches_finite_differences() {
        let g = GridSpec::new(4, 3, 3).unwrap();
        let a = Volume::from_fn(g, |p| (0.9 * p[0] + 0.4 * p[1] * p[2]).sin());
        let b = Volume::from_fn(g, |p| (0.5 * p[0] - 0.3 * p[2]).cos() + 0.1 * p[1]);
        let c = EntropyConfig { bandwidth: 3.0, samples: 20, seed: 2 };
        let (ga, gb) = mutual_information_backward(&a, &b, &c, 1.0);
        let h = 1e-6;
        let loss = |x: &Volume, y: &Volume| mutual_information_loss(x, y, &c, Kernel::Laplacian).unwrap();
        for i in 0..a.data().len() {
            let mut p = a.clone();
            let mut q = a.clone();
            p.data_mut()[i] += h;
            q.data_mut()[i] -= h;
            let fd = (loss(&p, &b) - loss(&q, &b)) / (2.0 * h);
            assert!((fd - ga[i]).abs() < 1e-6, "a[{i}] {fd} vs {}", ga[i]);
            let mut p = b.clone();
            let mut q = b.clone();
            p.data_mut()[i] += h;
            q.data_mut()[i] -= h;
            let fd = (loss(&a, &p) - loss(&a, &q)) / (2.0 * h);
            assert!((fd - gb[i]).abs() < 1e-6, "b[{i}] {fd} vs {}", gb[i]);
        }
    }
}
