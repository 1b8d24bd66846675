use crate::error::{Error, Result};
use crate::field::{check_same_grid, Volume};

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Centered second moments `(S_ab, S_aa, S_bb)` and the means.
fn moments(a: &[f64], b: &[f64]) -> (f64, f64, f64, f64, f64) {
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (da, db) = (x - ma, y - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    (sab, saa, sbb, ma, mb)
}

/// Population covariance over the grid.
pub fn covariance(i1: &Volume, i2: &Volume) -> Result<f64> {
    check_same_grid(&i1.grid(), &i2.grid(), "covariance")?;
    let (sab, ..) = moments(i1.data(), i2.data());
    Ok(sab / i1.data().len() as f64)
}

fn check_not_constant(v: &Volume, which: &str) -> Result<()> {
    if v.is_constant() {
        Err(Error::Degenerate(format!("{which} has zero variance")))
    } else {
        Ok(())
    }
}

/// `1 - Corr(i1, i2)`, in `[0, 2]`.
pub fn correlation_loss(i1: &Volume, i2: &Volume) -> Result<f64> {
    check_same_grid(&i1.grid(), &i2.grid(), "correlation_loss")?;
    check_not_constant(i1, "first image")?;
    check_not_constant(i2, "second image")?;
    let (sab, saa, sbb, ..) = moments(i1.data(), i2.data());
    let corr = (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0);
    Ok(1.0 - corr)
}

/// Gradients of `correlation_loss` with respect to both images.
pub(crate) fn correlation_backward(i1: &Volume, i2: &Volume, upstream: f64) -> (Vec<f64>, Vec<f64>) {
    let (a, b) = (i1.data(), i2.data());
    let (sab, saa, sbb, ma, mb) = moments(a, b);
    let norm = (saa * sbb).sqrt();
    let corr = sab / norm;
    let ga = a
        .iter()
        .zip(b)
        .map(|(x, y)| -upstream * ((y - mb) / norm - corr * (x - ma) / saa))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(x, y)| -upstream * ((x - ma) / norm - corr * (y - mb) / sbb))
        .collect();
    (ga, gb)
}

/// Mean squared intensity difference.
pub fn l2_loss(i1: &Volume, i2: &Volume) -> Result<f64> {
    check_same_grid(&i1.grid(), &i2.grid(), "l2_loss")?;
    let s: f64 = i1.data().iter().zip(i2.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / i1.data().len() as f64)
}

pub(crate) fn l2_backward(i1: &Volume, i2: &Volume, upstream: f64) -> (Vec<f64>, Vec<f64>) {
    let k = 2.0 * upstream / i1.data().len() as f64;
    let ga: Vec<f64> = i1.data().iter().zip(i2.data()).map(|(a, b)| k * (a - b)).collect();
    let gb = ga.iter().map(|g| -g).collect();
    (ga, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::GridSpec;
    use proptest::prelude::*;

    fn vol(dims: [usize; 3], data: &[f64]) -> Volume {
        Volume::new(GridSpec::from_dims(dims).unwrap(), data.to_vec()).unwrap()
    }

    fn textured(seed: f64) -> Volume {
        Volume::from_fn(GridSpec::cube(5).unwrap(), |p| {
            (seed * p[0] + 0.7 * p[1]).sin() + 0.3 * (p[2] * seed).cos()
        })
    }

    #[test]
    fn covariance_cases() {
        let t = textured(1.1);
        let c = Volume::constant(t.grid(), 3.0);
        assert!(covariance(&t, &c).unwrap().abs() < 1e-15);
        let m = mean(t.data());
        let var = t.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / 125.0;
        assert!((covariance(&t, &t).unwrap() - var).abs() < 1e-14);
        // (0,1) against (1,0) on a 2-voxel lattice view: embed in a 2x2x2
        // grid as the same pattern repeated four times.
        let a = vol([2, 2, 2], &[0., 1., 0., 1., 0., 1., 0., 1.]);
        let b = vol([2, 2, 2], &[1., 0., 1., 0., 1., 0., 1., 0.]);
        assert_eq!(covariance(&a, &b).unwrap(), -0.25);
    }

    #[test]
    fn correlation_cases() {
        let t = textured(0.9);
        assert!(correlation_loss(&t, &t.map(|v| 3.0 * v + 5.0)).unwrap().abs() < 1e-12);
        assert!((correlation_loss(&t, &t.map(|v| -v)).unwrap() - 2.0).abs() < 1e-12);
        let g = GridSpec::cube(4).unwrap();
        let x = Volume::from_fn(g, |p| p[0]);
        let y = Volume::from_fn(g, |p| p[1]);
        assert!((correlation_loss(&x, &y).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn correlation_rejects_constant() {
        let t = textured(1.0);
        let c = Volume::constant(t.grid(), 1.0);
        assert!(matches!(correlation_loss(&t, &c), Err(Error::Degenerate(_))));
        assert!(matches!(correlation_loss(&c, &t), Err(Error::Degenerate(_))));
    }

    #[test]
    fn l2_cases() {
        let t = textured(1.3);
        assert_eq!(l2_loss(&t, &t).unwrap(), 0.0);
        let shifted = t.map(|v| v + 2.0);
        assert!((l2_loss(&t, &shifted).unwrap() - 4.0).abs() < 1e-12);
        let a = vol([3, 2, 2], &[0., 1., 2., 0., 1., 2., 0., 1., 2., 0., 1., 2.]);
        let b = Volume::constant(a.grid(), 1.0);
        assert!((l2_loss(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn correlation_linear_invariance(a in 0.01f64..100.0, c in -50.0f64..50.0, s in 0.2f64..3.0) {
            let t = textured(s);
            prop_assert!(correlation_loss(&t, &t.map(|v| a * v + c)).unwrap().abs() < 1e-10);
        }

        #[test]
        fn correlation_symmetric(s1 in 0.2f64..3.0, s2 in 0.2f64..3.0) {
            let (a, b) = (textured(s1), textured(s2));
            let d = correlation_loss(&a, &b).unwrap() - correlation_loss(&b, &a).unwrap();
            prop_assert!(d.abs() < 1e-12);
        }
    }
}
