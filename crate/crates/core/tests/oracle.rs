use sonic::fields::{apply_mask, gaussian_field, Field, MaskField, SeedRng, Shape};
use sonic::flow::{
    denoise, Architecture, ClassId, ConstantVelocity, ConvVelocityNet, DiracVelocity,
    GuidanceConfig, SamplerConfig, VelocityModel,
};
use sonic::oracle::{
    compare_grads, finite_diff_grad, finite_diff_sampled, true_loss, unrolled_grad,
};
use sonic::seedopt::linearized_grad;

struct Instance {
    x_t: Field,
    y: Field,
    mask: MaskField,
}

fn instance(shape: Shape, seed: u64) -> Instance {
    let mut rng = SeedRng::new(seed);
    let x_t = gaussian_field(&mut rng, shape).unwrap();
    let y = gaussian_field(&mut rng, shape).unwrap();
    let mask = MaskField::from_fn(shape.height, shape.width, |r, c| (r + 2 * c) % 3 != 0).unwrap();
    Instance { x_t, y, mask }
}

fn check_against_fd<M: VelocityModel<f64>>(
    model: &M,
    guidance: &GuidanceConfig,
    shape: Shape,
    seed: u64,
) {
    let inst = instance(shape, seed);
    let sampler = SamplerConfig::new(3).unwrap();
    let g = unrolled_grad(model, &inst.x_t, &inst.y, &inst.mask, &sampler, guidance).unwrap();
    let fd = finite_diff_grad(
        |x: &Field| true_loss(model, x, &inst.y, &inst.mask, &sampler, guidance),
        &inst.x_t,
        1e-3,
    )
    .unwrap();
    let rel = fd.sub(&g).unwrap().norm() / fd.norm();
    assert!(rel <= 1e-3, "relative error {rel}");
}

#[test]
fn unrolled_matches_finite_differences_unconditional() {
    for seed in 0..3 {
        let net = ConvVelocityNet::<f64>::new(Architecture::new(1, 8, 0), &mut SeedRng::new(seed))
            .unwrap();
        check_against_fd(
            &net,
            &GuidanceConfig::default(),
            Shape::new(1, 8, 8),
            10 + seed,
        );
    }
}

#[test]
fn unrolled_matches_finite_differences_with_guidance() {
    let net =
        ConvVelocityNet::<f64>::new(Architecture::new(2, 6, 3), &mut SeedRng::new(7)).unwrap();
    let guidance = GuidanceConfig::default().with_class(ClassId(2));
    check_against_fd(&net, &guidance, Shape::new(2, 6, 6), 3);
}

#[test]
fn single_step_matches_hand_derivation() {
    // T = 1: x0 = x - v(x, 1), L = |A(x0 - y)|^2,
    // dL/dx = r - J^T r with r = 2 A (x0 - y).
    let shape = Shape::new(1, 5, 5);
    let net =
        ConvVelocityNet::<f64>::new(Architecture::new(1, 5, 0), &mut SeedRng::new(2)).unwrap();
    let inst = instance(shape, 4);
    let v = net.eval(&inst.x_t, 1.0, ClassId::NULL).unwrap();
    let x0 = inst.x_t.sub(&v).unwrap();
    let r = apply_mask(&x0.sub(&inst.y).unwrap().scale(2.0), &inst.mask).unwrap();
    let expected = r
        .sub(&net.vjp_input(&inst.x_t, 1.0, ClassId::NULL, &r).unwrap())
        .unwrap();
    let sampler = SamplerConfig::new(1).unwrap();
    let g = unrolled_grad(
        &net,
        &inst.x_t,
        &inst.y,
        &inst.mask,
        &sampler,
        &GuidanceConfig::default(),
    )
    .unwrap();
    assert!(g.max_abs_diff(&expected).unwrap() <= 1e-12);
}

#[test]
fn constant_velocity_gradients_coincide() {
    let shape = Shape::new(2, 6, 6);
    let inst = instance(shape, 5);
    let model = ConstantVelocity::new(gaussian_field(&mut SeedRng::new(6), shape).unwrap());
    let sampler = SamplerConfig::default();
    let guidance = GuidanceConfig::default();
    let unrolled =
        unrolled_grad(&model, &inst.x_t, &inst.y, &inst.mask, &sampler, &guidance).unwrap();
    let endpoint = denoise(&model, &inst.x_t, &sampler, &guidance).unwrap().x0;
    let lin = linearized_grad(&inst.x_t, &endpoint, &inst.y, &inst.mask).unwrap();
    let report = compare_grads(&lin, &unrolled).unwrap();
    assert!((report.cosine - 1.0).abs() <= 1e-12);
    assert!(report.rel_l2 <= 1e-12);
    assert_eq!(report.support_overlap, 1.0);
}

/// Every Euler step of the point-mass flow contracts toward `c`, and the
/// last one (at `s = 1/T`) lands on it exactly, so `D_T` is constant and its
/// true gradient vanishes.
#[test]
fn dirac_flow_true_gradient_vanishes() {
    let shape = Shape::new(1, 6, 6);
    let inst = instance(shape, 8);
    let model = DiracVelocity::new(Field::filled(shape, 0.5).unwrap());
    for t in [1, 5, 20] {
        let sampler = SamplerConfig::new(t).unwrap();
        let g = unrolled_grad(
            &model,
            &inst.x_t,
            &inst.y,
            &inst.mask,
            &sampler,
            &GuidanceConfig::default(),
        )
        .unwrap();
        assert!(g.max_abs() <= 1e-12, "T = {t}");
    }
}

#[test]
fn sampled_fd_agrees_with_unrolled() {
    let shape = Shape::new(1, 8, 8);
    let net =
        ConvVelocityNet::<f64>::new(Architecture::new(1, 6, 0), &mut SeedRng::new(9)).unwrap();
    let inst = instance(shape, 9);
    let sampler = SamplerConfig::new(2).unwrap();
    let guidance = GuidanceConfig::default();
    let g = unrolled_grad(&net, &inst.x_t, &inst.y, &inst.mask, &sampler, &guidance).unwrap();
    let samples = finite_diff_sampled(
        |x: &Field| true_loss(&net, x, &inst.y, &inst.mask, &sampler, &guidance),
        &inst.x_t,
        1e-4,
        10,
        &mut SeedRng::new(1),
    )
    .unwrap();
    for (i, d) in samples {
        assert!(
            (d - g.data()[i]).abs() <= 1e-5 * g.max_abs().max(1.0),
            "coordinate {i}"
        );
    }
}
