use orthosphere_core::analysis::grad_cam;
use orthosphere_core::data::{ImageShape, PerturbConfig};
use orthosphere_core::model::{Model, ModelConfig, PassMode};
use orthosphere_core::{Graph, Rng, Tensor};

fn small() -> Model<f64> {
    let cfg = ModelConfig {
        conv_blocks: vec![vec![2], vec![3, 3]],
        classes: 3,
        input: ImageShape { channels: 3, height: 8, width: 8 },
        ..ModelConfig::desk(3)
    };
    Model::new(cfg, &mut Rng::new(11)).unwrap()
}

fn batch(seed: u64) -> Tensor<f64> {
    let mut rng = Rng::new(seed);
    Tensor::new(&[4, 3, 8, 8], (0..4 * 192).map(|_| rng.normal()).collect()).unwrap()
}

fn perturb() -> PerturbConfig {
    PerturbConfig { dropout_rate: 0.0, ..PerturbConfig::default() }
}

fn teacher_probs(model: &Model<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::no_grad();
    let p = model.bind(&mut g);
    let f = model.forward(&mut g, &p, x, PassMode::Teacher, &perturb(), Some(&mut Rng::new(2))).unwrap();
    g.value(f.probs).clone()
}

fn consistency_against(model: &Model<f64>, x: &Tensor<f64>, target: &Tensor<f64>) -> f64 {
    let mut g = Graph::no_grad();
    let p = model.bind(&mut g);
    let f = model.forward(&mut g, &p, x, PassMode::Student, &perturb(), Some(&mut Rng::new(1))).unwrap();
    let c = g.consistency(f.probs, target).unwrap();
    g.value(c).data()[0]
}

#[test]
fn consistency_gradient_treats_the_teacher_as_constant() {
    let model = small();
    let x = batch(5);
    let target = teacher_probs(&model, &x);

    let mut g = Graph::new();
    let params = model.bind(&mut g);
    let f = model.forward(&mut g, &params, &x, PassMode::Student, &perturb(), Some(&mut Rng::new(1))).unwrap();
    let c = g.consistency(f.probs, &target).unwrap();
    g.backward(c).unwrap();
    let pi = model.params().iter().position(|p| p.name == "head.weight").unwrap();
    let analytic = g.grad(params[pi]);

    let eps = 1e-6;
    let mut worst_fixed: f64 = 0.0;
    let mut worst_moving: f64 = 0.0;
    for i in 0..analytic.numel() {
        let shifted = |delta: f64| {
            let mut m = model.clone();
            m.param_mut("head.weight").unwrap().data_mut()[i] += delta;
            m
        };
        let (plus, minus) = (shifted(eps), shifted(-eps));
        let fixed = (consistency_against(&plus, &x, &target) - consistency_against(&minus, &x, &target)) / (2.0 * eps);
        let moving = (consistency_against(&plus, &x, &teacher_probs(&plus, &x))
            - consistency_against(&minus, &x, &teacher_probs(&minus, &x)))
            / (2.0 * eps);
        let a = analytic.data()[i];
        let scale = a.abs().max(1e-8);
        worst_fixed = worst_fixed.max((a - fixed).abs() / scale.max(fixed.abs()));
        worst_moving = worst_moving.max((a - moving).abs() / scale.max(moving.abs()));
    }
    assert!(worst_fixed < 1e-5, "detached target: {worst_fixed}");
    assert!(worst_moving > 1e-3, "a differentiated teacher would have matched: {worst_moving}");
}

#[test]
fn grad_cam_ignores_a_constant_logit_shift() {
    let model = small();
    let image = batch(9).data()[..192].to_vec();
    let base = grad_cam(&model, &image, 1, "conv2_2").unwrap();
    let mut shifted = model.clone();
    shifted.param_mut("head.bias").unwrap().data_mut().iter_mut().for_each(|b| *b += 7.5);
    let moved = grad_cam(&shifted, &image, 1, "conv2_2").unwrap();
    for (a, b) in base.values.iter().zip(&moved.values) {
        assert!((a - b).abs() < 1e-6);
    }
    assert!(base.values.iter().all(|v| (0.0..=1.0).contains(v) && v.is_finite()));
}

#[test]
fn grad_cam_of_an_image_blind_head_is_zero() {
    let mut model = small();
    model.param_mut("head.weight").unwrap().data_mut().fill(0.0);
    let image = batch(3).data()[..192].to_vec();
    let h = grad_cam(&model, &image, 0, "conv2_1").unwrap();
    assert!(h.values.iter().all(|&v| v == 0.0));
    assert!(grad_cam(&model, &image, 3, "conv2_1").is_err());
}
