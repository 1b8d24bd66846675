use super::Volume;
use crate::error::{Error, Result};

pub const DEFAULT_HISTOGRAM_BINS: usize = 256;

/// Monotone intensity remap of `moving` so that its empirical CDF follows
/// `reference`'s. The moving CDF comes from a `bins`-bin histogram,
/// interpolated linearly inside each bin; the result is read off the sorted
/// reference values at the matching rank.
pub fn histogram_match(moving: &Volume, reference: &Volume, bins: usize) -> Result<Volume> {
    if bins == 0 {
        return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
    }
    if moving.is_constant() || reference.is_constant() {
        return Err(Error::InvalidArgument("histogram matching of a constant volume".into()));
    }
    let (lo, hi) = moving.min_max();
    let width = (hi - lo) / bins as f64;
    let bin_of = |v: f64| (((v - lo) / width) as usize).min(bins - 1);

    let mut counts = vec![0usize; bins];
    for &v in moving.data() {
        counts[bin_of(v)] += 1;
    }
    let mut starts = Vec::with_capacity(bins);
    let mut acc = 0usize;
    for c in &counts {
        starts.push(acc);
        acc += c;
    }

    let mut sorted = reference.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = moving.data().len() as f64;
    let m = sorted.len();
    let to_ref = m as f64 / n;

    Ok(moving.map(|v| {
        let k = bin_of(v);
        let frac = ((v - lo) / width - k as f64).clamp(0.0, 1.0);
        let rank = starts[k] as f64 + frac * counts[k] as f64;
        let first = (starts[k] as f64 * to_ref) as usize;
        let last = (((starts[k] + counts[k]) as f64 * to_ref).ceil() as usize).max(first + 1);
        let idx = ((rank * to_ref) as usize).clamp(first, last - 1).min(m - 1);
        sorted[idx]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::GridSpec;

    fn textured(n: usize) -> Volume {
        Volume::from_fn(GridSpec::cube(n).unwrap(), |p| {
            (0.7 * p[0] + 0.3 * p[1]).sin() * 3.0 + (0.45 * p[2]).cos() + 0.05 * p[0] * p[1]
        })
    }

    fn ref_bin_width(r: &Volume, bins: usize) -> f64 {
        let (lo, hi) = r.min_max();
        (hi - lo) / bins as f64
    }

    fn sorted(v: &Volume) -> Vec<f64> {
        let mut s = v.data().to_vec();
        s.sort_by(f64::total_cmp);
        s
    }

    #[test]
    fn self_match_is_near_identity() {
        let r = textured(12);
        let out = histogram_match(&r, &r, DEFAULT_HISTOGRAM_BINS).unwrap();
        let w = ref_bin_width(&r, DEFAULT_HISTOGRAM_BINS);
        for (a, b) in out.data().iter().zip(r.data()) {
            assert!((a - b).abs() <= w, "{a} vs {b} (bin {w})");
        }
    }

    #[test]
    fn scaled_copy_maps_back() {
        let r = textured(12);
        let m = r.map(|v| 2.0 * v);
        let out = histogram_match(&m, &r, DEFAULT_HISTOGRAM_BINS).unwrap();
        let w = ref_bin_width(&r, DEFAULT_HISTOGRAM_BINS);
        for (a, b) in out.data().iter().zip(r.data()) {
            assert!((a - b).abs() <= w);
        }
    }

    #[test]
    fn quantiles_follow_reference() {
        // Every moving bin maps onto the reference values at that bin's rank
        // span, so the i-th smallest output and the i-th smallest reference
        // value always fall within the same mapped bin.
        let m = textured(14).map(|v| (v * 0.8).exp());
        let r = Volume::from_fn(GridSpec::cube(14).unwrap(), |p| p[0] * p[1] - 0.3 * p[2]);
        let bins = 32;
        let out = histogram_match(&m, &r, bins).unwrap();
        let (lo, hi) = m.min_max();
        let bin_of = |v: f64| (((v - lo) / ((hi - lo) / bins as f64)) as usize).min(bins - 1);
        let (so, sr) = (sorted(&out), sorted(&r));
        let mut order: Vec<usize> = (0..m.data().len()).collect();
        order.sort_by(|&i, &j| m.data()[i].total_cmp(&m.data()[j]));
        let mut start = 0;
        while start < order.len() {
            let k = bin_of(m.data()[order[start]]);
            let mut end = start;
            while end < order.len() && bin_of(m.data()[order[end]]) == k {
                end += 1;
            }
            let width = sr[end - 1] - sr[start];
            for i in start..end {
                assert!((so[i] - sr[i]).abs() <= width, "rank {i}: {} vs {}", so[i], sr[i]);
            }
            start = end;
        }
    }

    #[test]
    fn preserves_ranking() {
        let m = textured(9);
        let r = textured(9).map(|v| v * v);
        let out = histogram_match(&m, &r, 64).unwrap();
        for i in 0..m.data().len() {
            for j in 0..m.data().len() {
                if m.data()[i] < m.data()[j] {
                    assert!(out.data()[i] <= out.data()[j]);
                }
            }
        }
    }

    #[test]
    fn rejects_constant_inputs() {
        let c = Volume::constant(GridSpec::cube(4).unwrap(), 1.0);
        let t = textured(4);
        assert!(matches!(histogram_match(&c, &t, 16), Err(Error::InvalidArgument(_))));
        assert!(matches!(histogram_match(&t, &c, 16), Err(Error::InvalidArgument(_))));
    }
}
