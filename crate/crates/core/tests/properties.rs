use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fplnet::analysis::{
    count_params, gridding_diagnostic, rf_of_steps, symbolic_param_count, Convention, GridBlock, ModuleFormula,
};
use fplnet::autograd::{class_weights, poly_lr, ParamStore, Tape, TrainConfig};
use fplnet::blocks::{BranchFusion, FplConfig, FplModule, FusionStrategy, RfStep};
use fplnet::data::{augment, miou, AugmentConfig, Sample};
use fplnet::network::{build_variant, Ablation, Network, NetworkConfig};
use fplnet::tensor::{conv2d, conv2d_oracle, transposed_conv2d, BnMode, ConvSpec, Shape, Tensor};

fn rand_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
    Tensor::random_uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Clone, Copy, Debug)]
enum Layer {
    Conv { k: usize, d: usize, s: usize },
    Pool,
}

#[derive(Clone, Copy, Debug)]
enum Up {
    Transposed { k: usize },
    Bilinear { factor: usize },
}

fn layer() -> impl Strategy<Value = Layer> {
    prop_oneof![
        4 => (prop::sample::select(vec![1usize, 3, 5]), 1usize..=3, 1usize..=2).prop_map(|(k, d, s)| Layer::Conv { k, d, s }),
        1 => Just(Layer::Pool),
    ]
}

fn up() -> impl Strategy<Value = Option<Up>> {
    prop_oneof![
        Just(None),
        prop::sample::select(vec![2usize, 4]).prop_map(|k| Some(Up::Transposed { k })),
        prop::sample::select(vec![2usize, 4, 8]).prop_map(|factor| Some(Up::Bilinear { factor })),
    ]
}

/// Bounding box of the inputs reaching the centre output of an all-ones stack.
fn impulse_rf(layers: &[Layer], upsample: Option<Up>, size: usize) -> (usize, usize) {
    let mut store = ParamStore::<f64>::new(0);
    let mut tape = Tape::new();
    let x = tape.input_with_grad(Tensor::full(Shape::new(1, 1, size, size), 1.0));
    let mut y = x;
    for (i, l) in layers.iter().enumerate() {
        y = match *l {
            Layer::Conv { k, d, s } => {
                let spec = ConvSpec::same(1, 1, k, k, d).with_stride(s);
                let id = store.add_kaiming(format!("w{i}"), spec.weight_shape()).unwrap();
                store.value_mut(id).data_mut().fill(1.0);
                let w = tape.param(&store, id);
                tape.conv2d(y, w, &spec).unwrap()
            }
            Layer::Pool => tape.avg_pool2(y).unwrap(),
        };
    }
    match upsample {
        Some(Up::Transposed { k }) => {
            let spec = ConvSpec::new(1, 1, k, k).with_stride(2);
            let id = store.add_kaiming("up", spec.transposed_weight_shape()).unwrap();
            store.value_mut(id).data_mut().fill(1.0);
            let w = tape.param(&store, id);
            y = tape.conv_transpose2d(y, w, &spec).unwrap();
        }
        Some(Up::Bilinear { factor }) => y = tape.bilinear(y, factor).unwrap(),
        None => {}
    }
    let out = tape.shape(y);
    let mut onehot = Tensor::zeros(out);
    onehot.set(0, 0, out.h / 2, out.w / 2, 1.0);
    let loss = tape.dot_const(y, onehot).unwrap();
    let g = tape.backward(loss).unwrap();
    let g = g.wrt(x).unwrap();
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..size {
        for c in 0..size {
            if g.at(0, 0, r, c) != 0.0 {
                y0 = y0.min(r);
                y1 = y1.max(r);
                x0 = x0.min(c);
                x1 = x1.max(c);
            }
        }
    }
    assert!(y0 > 0 && x0 > 0 && y1 + 1 < size && x1 + 1 < size, "response touches the border");
    (y1 - y0 + 1, x1 - x0 + 1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_oracle(
        ci in 1usize..=8, co in 1usize..=8, h in 1usize..=8, w in 1usize..=8,
        k in 1usize..=3, d in prop::sample::select(vec![1usize, 2, 4, 16]), s in 1usize..=2, seed in any::<u64>(),
    ) {
        let spec = ConvSpec::same(ci, co, k, k, d).with_stride(s);
        prop_assume!(spec.out_size(h, w).is_ok());
        let x = rand_tensor(Shape::new(1, ci, h, w), seed);
        let wt = rand_tensor(spec.weight_shape(), seed ^ 1);
        let fast = conv2d(&x, &wt, &spec).unwrap();
        let slow = conv2d_oracle(&x, &wt, &spec).unwrap();
        prop_assert!(fast.rel_err(&slow).unwrap() < 1e-12);
    }

    #[test]
    fn transposed_conv_is_adjoint(
        ci in 1usize..=4, co in 1usize..=4, k in 1usize..=4, s in 1usize..=3, d in 1usize..=2,
        mh in 1usize..6, mw in 1usize..6, seed in any::<u64>(),
    ) {
        let spec = ConvSpec::new(ci, co, k, k).with_stride(s).with_dilation(d);
        let f = d * (k - 1) + 1;
        let (h, w) = ((mh - 1) * s + f, (mw - 1) * s + f);
        let x = rand_tensor(Shape::new(1, ci, h, w), seed);
        let wt = rand_tensor(spec.weight_shape(), seed ^ 1);
        let ax = conv2d(&x, &wt, &spec).unwrap();
        let y = rand_tensor(ax.shape(), seed ^ 2);
        let back = ConvSpec::new(co, ci, k, k).with_stride(s).with_dilation(d);
        let aty = transposed_conv2d(&y, &wt, &back).unwrap();
        let (l, r) = (ax.dot(&y).unwrap(), x.dot(&aty).unwrap());
        prop_assert!((l - r).abs() <= 1e-10 * l.abs().max(r.abs()).max(1e-300));
    }

    #[test]
    fn closed_form_rf_matches_impulse(layers in prop::collection::vec(layer(), 1..5), upsample in up()) {
        let downs = layers.iter().filter(|l| matches!(l, Layer::Pool | Layer::Conv { s: 2, .. })).count();
        prop_assume!(downs <= 3);
        prop_assume!(upsample.is_none() || downs >= 1);
        let mut steps: Vec<RfStep> = layers.iter().map(|l| match *l {
            Layer::Conv { k, d, s } => RfStep::Conv { kh: k, kw: k, dilation: d, stride: s },
            Layer::Pool => RfStep::AvgPool2,
        }).collect();
        match upsample {
            Some(Up::Transposed { k }) => steps.push(RfStep::Transposed { kernel: k, stride: 2 }),
            Some(Up::Bilinear { factor }) => steps.push(RfStep::Bilinear { factor }),
            None => {}
        }
        let closed = rf_of_steps(&steps).unwrap();
        let size = 2 * closed.rf_h as usize + 8 * (1 << downs) + 9;
        let (oh, ow) = impulse_rf(&layers, upsample, size);
        prop_assert_eq!((oh as f64, ow as f64), (closed.rf_h, closed.rf_w));
    }

    #[test]
    fn poly_lr_is_nonincreasing(max_iter in 1usize..5000, power in 0.1f64..3.0, lr in 1e-4f64..1.0) {
        let cfg = TrainConfig { max_iter, power, lr_init: lr, ..TrainConfig::default() };
        let mut prev = f64::INFINITY;
        for it in (0..=max_iter).step_by((max_iter / 50).max(1)) {
            let v = poly_lr(it, &cfg).unwrap();
            prop_assert!(v <= prev && v >= 0.0);
            prev = v;
        }
    }

    #[test]
    fn class_weights_decrease_with_frequency(mut p in prop::collection::vec(0.0f64..=1.0, 2..10), c in 1.001f64..3.0) {
        p.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let w = class_weights(&p, c).unwrap().w_class;
        for (i, pair) in w.windows(2).enumerate() {
            prop_assert!(pair[0].is_finite() && pair[0] > 0.0);
            if p[i] < p[i + 1] {
                prop_assert!(pair[0] > pair[1]);
            } else {
                prop_assert_eq!(pair[0], pair[1]);
            }
        }
    }

    #[test]
    fn iou_bounds(k in 2usize..6, len in 1usize..200, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred: Vec<usize> = (0..len).map(|_| rng.gen_range(0..k)).collect();
        let truth: Vec<u8> = (0..len).map(|_| if rng.gen_bool(0.1) { 255 } else { rng.gen_range(0..k) as u8 }).collect();
        let r = miou(&[pred], &[&truth[..]], k, 255).unwrap();
        let present: Vec<f64> = r.per_class.iter().flatten().copied().collect();
        prop_assert!(present.iter().all(|&v| (0.0..=1.0).contains(&v)));
        if let Some(max) = present.iter().copied().reduce(f64::max) {
            prop_assert!(r.miou <= max);
        }
    }

    #[test]
    fn augmentation_keeps_validity(h in 4usize..24, w in 4usize..24, seed in any::<u64>(), crop in any::<bool>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let label: Vec<u8> = (0..h * w).map(|_| if rng.gen_bool(0.3) { 255 } else { rng.gen_range(0..19) }).collect();
        let mask: Vec<u8> = label.iter().map(|&l| if l == 255 { 255 } else { 0 }).collect();
        let image = Tensor::<f32>::random_uniform(Shape::new(1, 3, h, w), 0.0, 1.0, &mut rng);
        let cfg = AugmentConfig {
            crop: crop.then_some((3, 3)),
            ..AugmentConfig::default()
        };
        let a = augment(&Sample::new(image.clone(), label).unwrap(), &cfg, seed).unwrap();
        let b = augment(&Sample::new(image, mask).unwrap(), &cfg, seed).unwrap();
        prop_assert_eq!(a.label.len(), b.label.len());
        for (x, m) in a.label.iter().zip(&b.label) {
            prop_assert_eq!(*x == 255, *m == 255);
        }
    }

    #[test]
    fn pff_never_widens_gaps(extra in prop::collection::btree_set(1usize..=9, 1..4)) {
        let dilations: Vec<usize> = std::iter::once(1).chain(extra.into_iter().filter(|&d| d > 1)).collect();
        prop_assume!(dilations.len() >= 2);
        let b = dilations.len();
        let cfg = FplConfig { dilations, ..FplConfig::new(2 * b, 2 * b).with_branches(b) };
        let pff = gridding_diagnostic(&GridBlock::Fpl(cfg.clone().with_fusion(BranchFusion::Pff))).unwrap().score;
        let none = gridding_diagnostic(&GridBlock::Fpl(cfg.with_fusion(BranchFusion::None))).unwrap().score;
        prop_assert!(pff <= none);
        if none > 0.0 {
            prop_assert!(pff < none, "pff {} none {}", pff, none);
        }
    }
}

#[test]
fn dense_coverage_scores_zero() {
    for k in [1, 3, 5, 7] {
        assert_eq!(gridding_diagnostic(&GridBlock::Conv { kernel: k, dilation: 1 }).unwrap().score, 0.0);
    }
}

#[test]
fn module_ratios_at_sixty_channels() {
    let decomp = symbolic_param_count(ModuleFormula::FplDecomp, 60, 60, 3, 4).unwrap() as f64;
    let fpl = symbolic_param_count(ModuleFormula::Fpl, 60, 60, 3, 4).unwrap() as f64;
    let esp = symbolic_param_count(ModuleFormula::Esp, 60, 60, 3, 5).unwrap() as f64;
    // Both ratios are dyadic, so the division is exact.
    assert_eq!(decomp / esp, 1.53125);
    assert_eq!(fpl / esp, 1.15625);
}

#[test]
fn fir_routes_gradient_to_both_inputs() {
    let mut tape = Tape::<f64>::new();
    let deep = tape.input_with_grad(rand_tensor(Shape::new(1, 2, 3, 3), 1));
    let shallow = tape.input_with_grad(rand_tensor(Shape::new(1, 2, 3, 3), 2));
    let image = tape.input_with_grad(rand_tensor(Shape::new(1, 3, 3, 3), 3));
    let out = FusionStrategy::Fir.forward(&mut tape, deep, shallow, image).unwrap();
    assert_eq!(tape.shape(out).c, 7);
    let r = rand_tensor(tape.shape(out), 4);
    let loss = tape.dot_const(out, r.clone()).unwrap();
    let g = tape.backward(loss).unwrap();
    let (gd, gs) = (g.wrt(deep).unwrap(), g.wrt(shallow).unwrap());
    for c in 0..2 {
        for y in 0..3 {
            for x in 0..3 {
                assert_eq!(gs.at(0, c, y, x), r.at(0, c, y, x));
                assert_eq!(gd.at(0, c, y, x), r.at(0, c, y, x) + r.at(0, c + 2, y, x));
            }
        }
    }
}

#[test]
fn fusion_parameter_equalities_and_stage_monotonicity() {
    let base = NetworkConfig::tiny().encoder_only();
    let count = |a: Ablation| count_params(build_variant::<f32>(&base, a).unwrap().store(), Convention::Trainable).total;
    assert_eq!(count(Ablation::Fusion(FusionStrategy::Fir)), count(Ablation::Fusion(FusionStrategy::IfAndIsffConcat)));
    assert_eq!(count(Ablation::Fusion(FusionStrategy::If)), count(Ablation::Fusion(FusionStrategy::IfAndIsffAdd)));
    let mut prev = 0;
    for s3 in 1..=5 {
        let c = count(Ablation::Stages(2, s3));
        assert!(c > prev);
        prev = c;
    }
    assert!(count(Ablation::Stages(3, 2)) > count(Ablation::Stages(2, 2)));
}

#[test]
fn forward_is_bit_identical() {
    let mut store = ParamStore::<f64>::new(9);
    let m = FplModule::new(&mut store, "m", FplConfig::new(8, 8)).unwrap();
    let x = rand_tensor(Shape::new(2, 8, 6, 6), 10);
    let run = || {
        let mut t = Tape::new();
        let xi = t.input(x.clone());
        let y = m.forward(&mut t, &store, xi, BnMode::Train).unwrap();
        t.value(y).clone()
    };
    assert_eq!(run().data(), run().data());
    let net = Network::<f32>::new(NetworkConfig::tiny()).unwrap();
    let img = Tensor::<f32>::random_uniform(Shape::new(1, 3, 32, 64), 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(11));
    let a = net.infer(&img).unwrap();
    assert_eq!(a.shape(), Shape::new(1, 3, 32, 64));
    assert_eq!(a.data(), net.infer(&img).unwrap().data());
}
