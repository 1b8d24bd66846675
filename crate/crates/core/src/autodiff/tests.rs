use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::Fault;
use super::*;
use crate::error::Error;
use crate::field::{central_region, AffineTransform, FlowField, GridSpec, Volume};
use crate::losses::EntropyConfig;

fn smooth_volume(grid: GridSpec) -> Volume {
    Volume::from_fn(grid, |p| {
        (0.7 * p[0]).sin() + (0.5 * p[1]).cos() * (0.3 * p[2] + 0.2).sin() + 0.05 * p[0] * p[2]
    })
}

fn random_volume(grid: GridSpec, rng: &mut ChaCha8Rng) -> Volume {
    Volume::new(grid, (0..grid.len()).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

fn random_flow(grid: GridSpec, amp: f64, rng: &mut ChaCha8Rng) -> FlowField {
    FlowField::from_fn(grid, |_| {
        [amp * rng.gen_range(-1.0..1.0), amp * rng.gen_range(-1.0..1.0), amp * rng.gen_range(-1.0..1.0)]
    })
}

fn random_affine(amp: f64, rng: &mut ChaCha8Rng) -> AffineTransform {
    let p: Vec<f64> = (0..12).map(|_| amp * rng.gen_range(-1.0..1.0)).collect();
    AffineTransform::from_params(&p.try_into().unwrap())
}

fn check(pipeline: &dyn Pipeline, params: &ParameterSet) -> GradientCheckReport {
    let cfg = GradientCheckConfig { coordinates: 120, ..Default::default() };
    let r = gradient_check(pipeline, params, &cfg).unwrap();
    assert!(r.checked >= 40, "too few coordinates checked: {r:?}");
    r
}

#[test]
fn identity_warp_l2_has_zero_loss_and_gradient() {
    let g = GridSpec::cube(8).unwrap();
    let v = smooth_volume(g);
    let params = ParameterSet::new().with("flow", Value::Flow(FlowField::zeros(g))).unwrap();
    let p = |t: &mut Tape, b: &Bindings| {
        let img = t.constant_volume(&v);
        let w = t.warp(img, b.get("flow")?)?;
        t.l2_loss(w, img)
    };
    let (loss, grads) = evaluate_with_gradients(&p, &params).unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!(grads.max_abs(), 0.0);
}

#[test]
fn determinant_loss_is_stationary_at_identity() {
    let params = ParameterSet::new().with("a", Value::Affine(AffineTransform::identity())).unwrap();
    let p = |t: &mut Tape, b: &Bindings| t.determinant_loss(b.get("a")?);
    let (loss, grads) = evaluate_with_gradients(&p, &params).unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!(grads.max_abs(), 0.0);
}

#[test]
fn quadratic_matches_to_rounding() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = GridSpec::cube(4).unwrap();
    let params = ParameterSet::new()
        .with("s", Value::Scalar(0.3))
        .unwrap()
        .with("a", Value::Affine(random_affine(0.5, &mut rng)))
        .unwrap()
        .with("f", Value::Flow(random_flow(g, 2.0, &mut rng)))
        .unwrap();
    let p = |t: &mut Tape, b: &Bindings| {
        let terms = [b.get("s")?, b.get("a")?, b.get("f")?]
            .into_iter()
            .map(|v| t.squared_norm(v).map(|n| (1.0, n)))
            .collect::<crate::Result<Vec<_>>>()?;
        t.weighted_sum(&terms)
    };
    // Central differences are exact on quadratics for any step, so a large
    // one keeps cancellation error out of the comparison.
    let cfg = GradientCheckConfig { coordinates: 500, step: 0.5, ..Default::default() };
    let r = gradient_check(&p, &params, &cfg).unwrap();
    assert!(r.passed);
    assert!(r.max_rel_error < 1e-10, "{r:?}");
    assert_eq!(r.skipped, 0);
}

#[test]
fn warp_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = GridSpec::cube(8).unwrap();
    let fixed = random_volume(g, &mut rng);
    let moving = smooth_volume(g);
    let params = ParameterSet::new()
        .with("flow", Value::Flow(random_flow(g, 1.5, &mut rng)))
        .unwrap()
        .with("image", Value::Volume(moving))
        .unwrap();
    let p = |t: &mut Tape, b: &Bindings| {
        let f = t.constant_volume(&fixed);
        let w = t.warp(b.get("image")?, b.get("flow")?)?;
        let c = t.correlation_loss(f, w)?;
        let l = t.l2_loss(f, w)?;
        t.weighted_sum(&[(1.0, c), (0.5, l)])
    };
    let r = check(&p, &params);
    assert!(r.passed, "{r:?}");
}

#[test]
fn composition_and_resample_gradients_match() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = GridSpec::cube(8).unwrap();
    let coarse = GridSpec::cube(4).unwrap();
    let fixed = smooth_volume(g);
    let moving = random_volume(g, &mut rng);
    let params = ParameterSet::new()
        .with("affine", Value::Affine(random_affine(0.05, &mut rng)))
        .unwrap()
        .with("dense", Value::Flow(random_flow(coarse, 1.0, &mut rng)))
        .unwrap()
        .with("g", Value::Flow(random_flow(g, 1.0, &mut rng)))
        .unwrap();
    let p = |t: &mut Tape, b: &Bindings| {
        let a = b.get("affine")?;
        let af = t.affine_to_flow(a, g)?;
        let d = t.resample(b.get("dense")?, g)?;
        let c = t.compose_flows(af, d)?;
        let c = t.compose_flows(b.get("g")?, c)?;
        let ca = t.compose_affine_with_flow(a, d)?;
        let m = t.constant_volume(&moving);
        let fi = t.constant_volume(&fixed);
        let w1 = t.warp(m, c)?;
        let w2 = t.warp(m, ca)?;
        let s1 = t.correlation_loss(fi, w1)?;
        let s2 = t.l2_loss(fi, w2)?;
        let tv = t.total_variation_loss(d)?;
        let o = t.orthogonality_loss(a)?;
        let dt = t.determinant_loss(a)?;
        t.weighted_sum(&[(1.0, s1), (1.0, s2), (0.3, tv), (0.1, o), (0.1, dt)])
    };
    let r = check(&p, &params);
    assert!(r.passed, "{r:?}");
}

#[test]
fn invertibility_and_mutual_information_gradients_match() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = GridSpec::cube(8).unwrap();
    let region = central_region(&g).unwrap();
    let fixed = random_volume(g, &mut rng);
    let params = ParameterSet::new()
        .with("f12", Value::Flow(random_flow(g, 1.0, &mut rng)))
        .unwrap()
        .with("f21", Value::Flow(random_flow(g, 1.0, &mut rng)))
        .unwrap()
        .with("img", Value::Volume(random_volume(g, &mut rng)))
        .unwrap();
    let cfg = EntropyConfig { samples: 200, ..Default::default() };
    let p = move |t: &mut Tape, b: &Bindings| {
        let inv = t.invertibility_loss(b.get("f12")?, b.get("f21")?, region)?;
        let f = t.constant_volume(&fixed);
        let mi = t.mutual_information_loss(f, b.get("img")?, cfg.clone())?;
        t.weighted_sum(&[(1.0, inv), (1.0, mi)])
    };
    let r = check(&p, &params);
    assert!(r.passed, "{r:?}");
}

#[test]
fn gradients_are_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = GridSpec::cube(6).unwrap();
    let fixed = random_volume(g, &mut rng);
    let moving = smooth_volume(g);
    let params = ParameterSet::new()
        .with("flow", Value::Flow(random_flow(g, 1.0, &mut rng)))
        .unwrap();
    let l1 = |t: &mut Tape, b: &Bindings| {
        let (f, m) = (t.constant_volume(&fixed), t.constant_volume(&moving));
        let w = t.warp(m, b.get("flow")?)?;
        t.correlation_loss(f, w)
    };
    let l2 = |t: &mut Tape, b: &Bindings| t.total_variation_loss(b.get("flow")?);
    let (a, c) = (0.7, -2.5);
    let both = |t: &mut Tape, b: &Bindings| {
        let x = l1(t, b)?;
        let y = l2(t, b)?;
        t.weighted_sum(&[(a, x), (c, y)])
    };
    let (_, g1) = evaluate_with_gradients(&l1, &params).unwrap();
    let (_, g2) = evaluate_with_gradients(&l2, &params).unwrap();
    let (_, gb) = evaluate_with_gradients(&both, &params).unwrap();
    let (v1, v2, vb) = (g1.get("flow").unwrap(), g2.get("flow").unwrap(), gb.get("flow").unwrap());
    for i in 0..vb.len() {
        let want = a * v1.get(i) + c * v2.get(i);
        assert!((vb.get(i) - want).abs() <= 1e-12, "entry {i}");
    }
}

#[test]
fn unused_blocks_get_exact_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let g = GridSpec::cube(6).unwrap();
    let params = ParameterSet::new()
        .with("used", Value::Flow(random_flow(g, 1.0, &mut rng)))
        .unwrap()
        .with("unused", Value::Affine(random_affine(0.2, &mut rng)))
        .unwrap()
        .with("also", Value::Volume(random_volume(g, &mut rng)))
        .unwrap();
    let p = |t: &mut Tape, b: &Bindings| t.total_variation_loss(b.get("used")?);
    let (_, grads) = evaluate_with_gradients(&p, &params).unwrap();
    for name in ["unused", "also"] {
        let v = grads.get(name).unwrap();
        assert!((0..v.len()).all(|i| v.get(i) == 0.0), "{name}");
    }
    assert!(grads.get("used").unwrap().len() == 3 * g.len());
}

#[test]
fn late_similarity_reaches_first_stage() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = GridSpec::cube(8).unwrap();
    let fixed = random_volume(g, &mut rng);
    let moving = smooth_volume(g);
    let params = ParameterSet::new()
        .with("s1", Value::Flow(random_flow(g, 0.5, &mut rng)))
        .unwrap()
        .with("s2", Value::Flow(random_flow(g, 0.5, &mut rng)))
        .unwrap();
    // Only the second stage's output is scored.
    let p = |t: &mut Tape, b: &Bindings| {
        let m = t.constant_volume(&moving);
        let m1 = t.warp(m, b.get("s1")?)?;
        let m2 = t.warp(m1, b.get("s2")?)?;
        let f = t.constant_volume(&fixed);
        t.correlation_loss(f, m2)
    };
    let (_, grads) = evaluate_with_gradients(&p, &params).unwrap();
    let s1 = grads.get("s1").unwrap();
    let norm: f64 = (0..s1.len()).map(|i| s1.get(i).powi(2)).sum();
    assert!(norm > 1e-8, "first-stage gradient norm {norm}");
}

#[test]
fn corrupted_adjoint_is_flagged() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = GridSpec::cube(8).unwrap();
    let fixed = random_volume(g, &mut rng);
    let moving = smooth_volume(g);
    let params = ParameterSet::new()
        .with("flow", Value::Flow(random_flow(g, 1.0, &mut rng)))
        .unwrap();
    let p = |t: &mut Tape, b: &Bindings| {
        t.inject_fault(Some(Fault::ScaleWarpFlowAdjoint(1.05)));
        let (f, m) = (t.constant_volume(&fixed), t.constant_volume(&moving));
        let w = t.warp(m, b.get("flow")?)?;
        t.correlation_loss(f, w)
    };
    let r = gradient_check(&p, &params, &GradientCheckConfig::default()).unwrap();
    assert!(!r.passed);
    assert!(r.max_rel_error > 1e-3, "{r:?}");
}

#[test]
fn unregistered_parameter_is_a_config_error() {
    let params = ParameterSet::new().with("a", Value::Scalar(1.0)).unwrap();
    let p = |t: &mut Tape, b: &Bindings| t.squared_norm(b.get("missing")?);
    assert!(matches!(evaluate(&p, &params), Err(Error::Config(_))));
}

#[test]
fn overflow_names_the_primitive() {
    let g = GridSpec::cube(4).unwrap();
    let params =
        ParameterSet::new().with("f", Value::Flow(FlowField::constant(g, [1e308; 3]))).unwrap();
    let p = |t: &mut Tape, b: &Bindings| {
        let f = b.get("f")?;
        let s = t.add_flows(f, f)?;
        t.total_variation_loss(s)
    };
    match evaluate(&p, &params) {
        Err(Error::Numeric { primitive }) => assert_eq!(primitive, "add_flows"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn kink_crossings_are_skipped() {
    // Displacements exactly on lattice points: every +-h probe changes cell.
    let g = GridSpec::cube(5).unwrap();
    let v = smooth_volume(g);
    let params = ParameterSet::new()
        .with("f", Value::Flow(FlowField::zeros(g)))
        .unwrap();
    let p = |t: &mut Tape, b: &Bindings| {
        let m = t.constant_volume(&v);
        let w = t.warp(m, b.get("f")?)?;
        t.squared_norm(w)
    };
    let r = gradient_check(&p, &params, &GradientCheckConfig::default()).unwrap();
    assert_eq!(r.checked, 0);
    assert!(r.skipped > 0);
    assert!(!r.passed);
}

#[test]
fn non_positive_step_is_rejected() {
    let params = ParameterSet::new().with("a", Value::Scalar(1.0)).unwrap();
    let p = |t: &mut Tape, b: &Bindings| t.squared_norm(b.get("a")?);
    let cfg = GradientCheckConfig { step: 0.0, ..Default::default() };
    assert!(gradient_check(&p, &params, &cfg).is_err());
}
