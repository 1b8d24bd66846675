use rayon::prelude::*;

use super::sample::Stencil;
use super::{
    add3, check_same_grid, AffineTransform, FlowField, GridSpec, Mat3, RegionBox, Vec3, Volume,
};
use crate::error::{Error, Result};

const PAR_MIN_ROWS: usize = 64;

/// `out[i] = f(i, position(i))`, in parallel over lattice rows. Positions
/// are tracked per row to avoid per-voxel index division.
fn par_fill<T: Send>(out: &mut [T], grid: &GridSpec, f: impl Fn(usize, Vec3) -> T + Sync + Send) {
    let [nx, ny, _] = grid.dims();
    out.par_chunks_mut(nx).with_min_len(PAR_MIN_ROWS).enumerate().for_each(|(r, row)| {
        let (y, z) = ((r % ny) as f64, (r / ny) as f64);
        for (x, o) in row.iter_mut().enumerate() {
            *o = f(r * nx + x, [x as f64, y, z]);
        }
    });
}

/// Sequential visit of every voxel with its position, x fastest.
pub(crate) fn for_each_voxel(grid: &GridSpec, mut f: impl FnMut(usize, Vec3)) {
    let [nx, ny, nz] = grid.dims();
    let mut i = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                f(i, [x as f64, y as f64, z as f64]);
                i += 1;
            }
        }
    }
}

/// `(v o f)(x) = v(x + f(x))`, sampled with clamp-then-trilinear.
pub fn warp_volume(v: &Volume, f: &FlowField) -> Result<Volume> {
    check_same_grid(&v.grid(), &f.grid(), "warp_volume")?;
    let grid = v.grid();
    let src = v.data();
    let flow = f.data();
    let mut out = vec![0.0; grid.len()];
    par_fill(&mut out, &grid, |i, p| Stencil::new(&grid, add3(p, flow[i])).interpolate(src));
    Ok(Volume::from_raw(grid, out))
}

/// Samples every channel of `g1` at `x + g2(x)`.
pub fn warp_flow(g1: &FlowField, g2: &FlowField) -> Result<FlowField> {
    check_same_grid(&g1.grid(), &g2.grid(), "warp_flow")?;
    let grid = g1.grid();
    let src = g1.data();
    let by = g2.data();
    let mut out = vec![[0.0; 3]; grid.len()];
    par_fill(&mut out, &grid, |i, p| Stencil::new(&grid, add3(p, by[i])).interpolate3(src));
    Ok(FlowField::from_raw(grid, out))
}

/// `g1 * g2 = g2 + g1 o g2`: warping by `g1` then by `g2` equals warping by
/// the composition.
pub fn compose_flows(g1: &FlowField, g2: &FlowField) -> Result<FlowField> {
    warp_flow(g1, g2)?.add(g2)
}

/// Dense flow `x -> A x + b` on the lattice.
pub fn affine_to_flow(t: &AffineTransform, grid: GridSpec) -> FlowField {
    let mut out = vec![[0.0; 3]; grid.len()];
    par_fill(&mut out, &grid, |_, p| t.displacement(p));
    FlowField::from_raw(grid, out)
}

/// Closed form of `(A x + b) * f = (I + A) f + A x + b`; no interpolation.
pub fn compose_affine_with_flow(t: &AffineTransform, f: &FlowField) -> FlowField {
    let grid = f.grid();
    let m = t.linear_part();
    let src = f.data();
    let mut out = vec![[0.0; 3]; grid.len()];
    par_fill(&mut out, &grid, |i, p| add3(matvec(&m, src[i]), t.displacement(p)));
    FlowField::from_raw(grid, out)
}

#[inline]
fn matvec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

#[inline]
fn matvec_t(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

/// Voxels whose displaced point stays inside the lattice cuboid.
pub fn valid_domain(f: &FlowField) -> Vec<bool> {
    let grid = f.grid();
    let d = f.data();
    let mut out = vec![false; grid.len()];
    par_fill(&mut out, &grid, |i, p| grid.contains(add3(p, d[i])));
    out
}

/// Box with the first and last quarter (rounded up) of each axis removed.
pub fn central_region(grid: &GridSpec) -> Result<RegionBox> {
    let dims = grid.dims();
    if dims.iter().any(|&d| d < 4) {
        return Err(Error::InvalidArgument(format!(
            "central region needs every dim >= 4, got {dims:?}"
        )));
    }
    let lower = dims.map(|d| d.div_ceil(4));
    let upper = dims.map(|d| d - d.div_ceil(4));
    RegionBox::new(grid, lower, upper)
}

/// Per-axis interpolation taps `(lo, t)` mapping target voxel centres onto
/// the source axis, clamped like lattice sampling.
fn axis_taps(n_src: usize, n_dst: usize) -> Vec<(usize, f64)> {
    let r = n_src as f64 / n_dst as f64;
    let hi = (n_src - 1) as f64;
    (0..n_dst)
        .map(|o| {
            let q = ((o as f64 + 0.5) * r - 0.5).clamp(0.0, hi);
            let lo = (q as usize).min(n_src - 2);
            (lo, q - lo as f64)
        })
        .collect()
}

/// Linear resampling of `data` (dims `dims`) along `axis` to `n` samples.
fn resample_axis(data: &[Vec3], dims: [usize; 3], axis: usize, n: usize) -> (Vec<Vec3>, [usize; 3]) {
    let taps = axis_taps(dims[axis], n);
    let mut out_dims = dims;
    out_dims[axis] = n;
    let stride_in = [1, dims[0], dims[0] * dims[1]][axis];
    let mut out = vec![[0.0; 3]; out_dims.iter().product()];
    let [nx, ny, _] = out_dims;
    out.par_chunks_mut(nx).with_min_len(PAR_MIN_ROWS).enumerate().for_each(|(r, row)| {
        let c = [0, r % ny, r / ny];
        for (x, o) in row.iter_mut().enumerate() {
            let mut p = [x, c[1], c[2]];
            let (lo, t) = taps[p[axis]];
            p[axis] = lo;
            let i = p[0] + dims[0] * (p[1] + dims[1] * p[2]);
            let (a, b) = (data[i], data[i + stride_in]);
            *o = [
                (1.0 - t) * a[0] + t * b[0],
                (1.0 - t) * a[1] + t * b[1],
                (1.0 - t) * a[2] + t * b[2],
            ];
        }
    });
    (out, out_dims)
}

/// Adjoint of [`resample_axis`]: scatters `upstream` (dims `out_dims`) back
/// onto an axis of length `n_src`.
fn resample_axis_adjoint(upstream: &[Vec3], out_dims: [usize; 3], axis: usize, n_src: usize) -> (Vec<Vec3>, [usize; 3]) {
    let taps = axis_taps(n_src, out_dims[axis]);
    let mut dims = out_dims;
    dims[axis] = n_src;
    let stride_in = [1, dims[0], dims[0] * dims[1]][axis];
    let mut g = vec![[0.0; 3]; dims.iter().product()];
    let grid_out = GridSpec::from_dims(out_dims).expect("resampled dims are valid");
    for_each_voxel(&grid_out, |j, p| {
        let mut q = [p[0] as usize, p[1] as usize, p[2] as usize];
        let (lo, t) = taps[q[axis]];
        q[axis] = lo;
        let i = q[0] + dims[0] * (q[1] + dims[1] * q[2]);
        let u = upstream[j];
        for c in 0..3 {
            g[i][c] += (1.0 - t) * u[c];
            g[i + stride_in][c] += t * u[c];
        }
    });
    (g, dims)
}

/// Resamples `f` onto `target`, aligning voxel centres and rescaling the
/// displacement components by the per-axis size ratio. Trilinear
/// interpolation is separable, so this runs as three linear passes.
pub fn resample_flow(f: &FlowField, target: GridSpec) -> FlowField {
    let src_grid = f.grid();
    if src_grid == target {
        return f.clone();
    }
    let (s, t) = (src_grid.dims(), target.dims());
    let scale: [f64; 3] = std::array::from_fn(|a| t[a] as f64 / s[a] as f64);
    let mut data = f.data().to_vec();
    let mut dims = s;
    for a in 0..3 {
        (data, dims) = resample_axis(&data, dims, a, t[a]);
    }
    data.par_iter_mut().with_min_len(4096).for_each(|v| {
        for a in 0..3 {
            v[a] *= scale[a];
        }
    });
    FlowField::from_raw(target, data)
}

// ---------------------------------------------------------------------------
// Adjoints. `upstream` is d(loss)/d(output) with the output's layout.
// ---------------------------------------------------------------------------

pub(crate) fn warp_volume_backward(
    v: &Volume,
    f: &FlowField,
    upstream: &[f64],
    want_image: bool,
    want_flow: bool,
) -> (Option<Vec<f64>>, Option<Vec<Vec3>>) {
    let grid = v.grid();
    let src = v.data();
    let flow = f.data();
    if want_image && want_flow {
        // One pass for both adjoints: the stencil is shared.
        let mut gi = vec![0.0; grid.len()];
        let mut gf = vec![[0.0; 3]; grid.len()];
        for_each_voxel(&grid, |i, p| {
            let u = upstream[i];
            if u != 0.0 {
                let s = Stencil::new(&grid, add3(p, flow[i]));
                let d = s.gradient(src);
                gf[i] = [u * d[0], u * d[1], u * d[2]];
                for c in 0..8 {
                    gi[s.idx[c]] += u * s.w[c];
                }
            }
        });
        return (Some(gi), Some(gf));
    }
    let grad_flow = want_flow.then(|| {
        let mut g = vec![[0.0; 3]; grid.len()];
        par_fill(&mut g, &grid, |i, p| {
            let s = Stencil::new(&grid, add3(p, flow[i]));
            let d = s.gradient(src);
            let u = upstream[i];
            [u * d[0], u * d[1], u * d[2]]
        });
        g
    });
    let grad_image = want_image.then(|| {
        let mut g = vec![0.0; grid.len()];
        for_each_voxel(&grid, |i, p| {
            let u = upstream[i];
            if u != 0.0 {
                let s = Stencil::new(&grid, add3(p, flow[i]));
                for c in 0..8 {
                    g[s.idx[c]] += u * s.w[c];
                }
            }
        });
        g
    });
    (grad_image, grad_flow)
}

pub(crate) fn warp_flow_backward(
    g1: &FlowField,
    g2: &FlowField,
    upstream: &[Vec3],
    want_source: bool,
    want_displacement: bool,
) -> (Option<Vec<Vec3>>, Option<Vec<Vec3>>) {
    let grid = g1.grid();
    let src = g1.data();
    let by = g2.data();
    let grad_by = want_displacement.then(|| {
        let mut g = vec![[0.0; 3]; grid.len()];
        par_fill(&mut g, &grid, |i, p| {
            let s = Stencil::new(&grid, add3(p, by[i]));
            let dw = s.weight_derivatives();
            let u = upstream[i];
            let mut out = [0.0; 3];
            for c in 0..8 {
                let v = src[s.idx[c]];
                let dot = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
                out[0] += dw[0][c] * dot;
                out[1] += dw[1][c] * dot;
                out[2] += dw[2][c] * dot;
            }
            out
        });
        g
    });
    let grad_src = want_source.then(|| {
        let mut g = vec![[0.0; 3]; grid.len()];
        for_each_voxel(&grid, |i, p| {
            let u = upstream[i];
            let s = Stencil::new(&grid, add3(p, by[i]));
            for c in 0..8 {
                let w = s.w[c];
                let dst = &mut g[s.idx[c]];
                dst[0] += w * u[0];
                dst[1] += w * u[1];
                dst[2] += w * u[2];
            }
        });
        g
    });
    (grad_src, grad_by)
}

/// Returns `(d/dA, d/db, d/df)` of `compose_affine_with_flow`.
pub(crate) fn compose_affine_with_flow_backward(
    t: &AffineTransform,
    f: &FlowField,
    upstream: &[Vec3],
) -> (AffineTransform, Vec<Vec3>) {
    let grid = f.grid();
    let m = t.linear_part();
    let src = f.data();
    let mut ga = [[0.0; 3]; 3];
    let mut gb = [0.0; 3];
    let mut gf = vec![[0.0; 3]; grid.len()];
    for_each_voxel(&grid, |i, x| {
        let (u, v) = (upstream[i], src[i]);
        for r in 0..3 {
            for c in 0..3 {
                ga[r][c] += u[r] * (v[c] + x[c]);
            }
            gb[r] += u[r];
        }
        gf[i] = matvec_t(&m, u);
    });
    (AffineTransform { matrix: ga, translation: gb }, gf)
}

pub(crate) fn resample_flow_backward(
    src_grid: GridSpec,
    target: GridSpec,
    upstream: &[Vec3],
) -> Vec<Vec3> {
    if src_grid == target {
        return upstream.to_vec();
    }
    let (s, t) = (src_grid.dims(), target.dims());
    let mut g: Vec<Vec3> = upstream
        .iter()
        .map(|u| std::array::from_fn(|a| u[a] * t[a] as f64 / s[a] as f64))
        .collect();
    let mut dims = t;
    for a in (0..3).rev() {
        (g, dims) = resample_axis_adjoint(&g, dims, a, s[a]);
    }
    g
}
