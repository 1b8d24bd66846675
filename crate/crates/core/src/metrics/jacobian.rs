use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{det3, FlowField};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianStats {
    /// Population standard deviation of `det(I + grad f)` over all voxels.
    pub std_jacobian: f64,
    /// Fraction of voxels with a negative determinant.
    pub folding_fraction: f64,
}

/// `det(I + grad f)` per voxel: central differences inside, one-sided on
/// the faces.
pub fn jacobian_determinants(f: &FlowField) -> Result<Vec<f64>> {
    let grid = f.grid();
    let dims = grid.dims();
    if dims.iter().any(|&d| d < 3) {
        return Err(Error::InvalidArgument(format!(
            "jacobian needs every dim >= 3, got {dims:?}"
        )));
    }
    let d = f.data();
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut out = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let c = grid.coords(i);
        let mut j = [[0.0; 3]; 3];
        for a in 0..3 {
            let (lo, hi, h) = if c[a] == 0 {
                (i, i + strides[a], 1.0)
            } else if c[a] + 1 == dims[a] {
                (i - strides[a], i, 1.0)
            } else {
                (i - strides[a], i + strides[a], 2.0)
            };
            for r in 0..3 {
                j[r][a] = (d[hi][r] - d[lo][r]) / h;
            }
            j[a][a] += 1.0;
        }
        out.push(det3(&j));
    }
    Ok(out)
}

pub fn jacobian_stats(f: &FlowField) -> Result<JacobianStats> {
    let dets = jacobian_determinants(f)?;
    let n = dets.len() as f64;
    let mean = dets.iter().sum::<f64>() / n;
    let var = dets.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    let folds = dets.iter().filter(|&&d| d < 0.0).count();
    Ok(JacobianStats { std_jacobian: var.sqrt(), folding_fraction: folds as f64 / n })
}
