use crate::error::{Error, Result};
use crate::field::{
    check_same_grid, cofactor3, compose_flows, det3, AffineTransform, FlowField, Mat3, RegionBox,
    Vec3,
};

/// `1/(3|grid|) * sum_x sum_i |f(x + e_i) - f(x)|^2` over forward neighbours
/// that lie inside the grid.
pub fn total_variation_loss(f: &FlowField) -> f64 {
    let grid = f.grid();
    let [nx, ny, nz] = grid.dims();
    let d = f.data();
    let strides = [1, nx, nx * ny];
    let mut sum = 0.0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = grid.index(x, y, z);
                let at = [x + 1 < nx, y + 1 < ny, z + 1 < nz];
                for a in 0..3 {
                    if at[a] {
                        let (p, q) = (d[i + strides[a]], d[i]);
                        let e = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
                        sum += e[0] * e[0] + e[1] * e[1] + e[2] * e[2];
                    }
                }
            }
        }
    }
    sum / (3.0 * grid.len() as f64)
}

pub(crate) fn total_variation_backward(f: &FlowField, upstream: f64) -> Vec<Vec3> {
    let grid = f.grid();
    let [nx, ny, nz] = grid.dims();
    let d = f.data();
    let strides = [1, nx, nx * ny];
    let k = 2.0 * upstream / (3.0 * grid.len() as f64);
    let mut g = vec![[0.0; 3]; grid.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = grid.index(x, y, z);
                let at = [x + 1 < nx, y + 1 < ny, z + 1 < nz];
                for a in 0..3 {
                    if at[a] {
                        let j = i + strides[a];
                        for c in 0..3 {
                            let e = k * (d[j][c] - d[i][c]);
                            g[j][c] += e;
                            g[i][c] -= e;
                        }
                    }
                }
            }
        }
    }
    g
}

fn gram(f: &Mat3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| f[k][i] * f[k][j]).sum();
        }
    }
    m
}

/// Elementary symmetric polynomials of the eigenvalues of the symmetric
/// matrix `m`, read off its characteristic polynomial: trace, sum of
/// principal 2x2 minors, determinant.
fn char_poly_coefficients(m: &Mat3) -> (f64, f64, f64) {
    let e1 = m[0][0] + m[1][1] + m[2][2];
    let e2 = m[0][0] * m[1][1] - m[0][1] * m[1][0] + m[0][0] * m[2][2] - m[0][2] * m[2][0]
        + m[1][1] * m[2][2]
        - m[1][2] * m[2][1];
    (e1, e2, det3(m))
}

/// `-6 + sum_i (s_i^2 + s_i^-2)` over the singular values `s_i` of `I + A`.
///
/// With `M = (I+A)^T (I+A)` the squared singular values are the eigenvalues
/// of `M`, so the loss is `tr M + tr M^-1 - 6 = e1 + e2/e3 - 6` in terms of
/// the characteristic-polynomial coefficients; no decomposition is needed.
pub fn orthogonality_loss(t: &AffineTransform) -> Result<f64> {
    let f = t.linear_part();
    let det = det3(&f);
    if det == 0.0 || !det.is_finite() {
        return Err(Error::Singular(det));
    }
    let (e1, e2, _) = char_poly_coefficients(&gram(&f));
    Ok(e1 + e2 / (det * det) - 6.0)
}

pub(crate) fn orthogonality_backward(t: &AffineTransform, upstream: f64) -> Mat3 {
    let f = t.linear_part();
    let m = gram(&f);
    let det = det3(&f);
    let (e1, e2, _) = char_poly_coefficients(&m);
    let e3 = det * det;
    let cof = cofactor3(&f);
    // d e1/dF = 2F, d e2/dF = 2F (e1 I - M), d e3/dF = 2 det(F) cof(F)
    let mut g = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut fg = 0.0;
            for k in 0..3 {
                let shifted = if k == j { e1 - m[k][j] } else { -m[k][j] };
                fg += f[i][k] * shifted;
            }
            let de1 = 2.0 * f[i][j];
            let de2 = 2.0 * fg;
            let de3 = 2.0 * det * cof[i][j];
            g[i][j] = upstream * (de1 + de2 / e3 - e2 * de3 / (e3 * e3));
        }
    }
    g
}

/// `(det(I + A) - 1)^2`.
pub fn determinant_loss(t: &AffineTransform) -> f64 {
    let d = det3(&t.linear_part()) - 1.0;
    d * d
}

pub(crate) fn determinant_backward(t: &AffineTransform, upstream: f64) -> Mat3 {
    let f = t.linear_part();
    let k = 2.0 * (det3(&f) - 1.0) * upstream;
    cofactor3(&f).map(|row| row.map(|c| k * c))
}

/// Mean of `|f(x)|^2` over the voxels of `region`.
pub(crate) fn region_mean_sq(f: &FlowField, region: &RegionBox) -> f64 {
    let grid = f.grid();
    let d = f.data();
    let s: f64 = region
        .indices(&grid)
        .map(|i| d[i][0] * d[i][0] + d[i][1] * d[i][1] + d[i][2] * d[i][2])
        .sum();
    s / region.voxel_count() as f64
}

pub(crate) fn region_mean_sq_backward(f: &FlowField, region: &RegionBox, upstream: f64) -> Vec<Vec3> {
    let grid = f.grid();
    let d = f.data();
    let k = 2.0 * upstream / region.voxel_count() as f64;
    let mut g = vec![[0.0; 3]; grid.len()];
    for i in region.indices(&grid) {
        g[i] = d[i].map(|c| k * c);
    }
    g
}

/// Round-trip residual `|f12 * f21|^2 + |f21 * f12|^2`, each term the mean
/// squared magnitude of the composed flow over `region`.
pub fn invertibility_loss(f12: &FlowField, f21: &FlowField, region: &RegionBox) -> Result<f64> {
    check_same_grid(&f12.grid(), &f21.grid(), "invertibility_loss")?;
    region.check(&f12.grid())?;
    let a = compose_flows(f12, f21)?;
    let b = compose_flows(f21, f12)?;
    Ok(region_mean_sq(&a, region) + region_mean_sq(&b, region))
}
