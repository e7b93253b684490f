use nailtrace::model::{images_to_tensor, EncoderVariant, FuseLevel, Model, ModelConfig};
use nailtrace::objectives::{total_loss, LossConfig};
use nailtrace::synth::{generate_sample, ImageSample, SceneSpec};
use nailtrace::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gray(h: usize, w: usize) -> Tensor<f32> {
    let img = vec![128u8; h * w * 3];
    images_to_tensor(&[&img], h, w)
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn spatial(t: &Tensor<f32>) -> (usize, usize) {
    (t.shape()[2], t.shape()[3])
}

#[test]
fn shape_contract_at_deployment_sizes() {
    for s in [224, 288, 336, 448] {
        let model = Model::build(ModelConfig::tiny(s, s), 0).unwrap();
        let out = model.forward(&gray(s, s)).unwrap();
        assert_eq!(out.fgbg_logits.shape(), &[1, 2, s, s]);
        assert_eq!(out.class_logits.shape(), &[1, 10, s, s]);
        assert_eq!(out.field.shape(), &[1, 2, s, s]);
        let scales: Vec<usize> = out.aux.iter().map(|a| a.scale).collect();
        assert_eq!(scales, [16, 8]);
        for a in &out.aux {
            let d = s / a.scale;
            assert_eq!(a.heads.fgbg_logits.shape(), &[1, 2, d, d]);
            assert_eq!(a.heads.class_logits.shape(), &[1, 10, d, d]);
            assert_eq!(a.heads.field.shape(), &[1, 2, d, d]);
        }
    }
}

#[test]
fn non_square_input() {
    let model = Model::build(ModelConfig::tiny(96, 160), 0).unwrap();
    let out = model.forward(&gray(96, 160)).unwrap();
    assert_eq!(spatial(&out.fgbg_logits), (96, 160));
    assert_eq!(spatial(&out.aux[0].heads.field), (6, 10));
    assert_eq!(spatial(&out.aux[1].heads.field), (12, 20));
}

#[test]
fn wrong_input_size_is_rejected() {
    let model = Model::build(ModelConfig::tiny(64, 64), 0).unwrap();
    assert!(model.forward(&gray(96, 96)).is_err());
    assert!(Model::build(ModelConfig::tiny(100, 96), 0).is_err());
}

#[test]
fn low_branch_stride_and_surgery() {
    let model = Model::build(ModelConfig::default(), 0).unwrap();
    assert_eq!(model.low_branch_stride(), 16);
    let geo = model.low_stage_geometry();
    assert_eq!(geo.len(), 8);
    assert_eq!(geo[5], (1, 1));
    assert_eq!(geo[6], (1, 2));
    assert_eq!(geo[7], (1, 2));
}

#[test]
fn shallow_variant_is_smaller_and_runs() {
    let cfg = ModelConfig {
        encoder_variant: EncoderVariant::Shallow43,
        ..ModelConfig::tiny(224, 224)
    };
    let small = Model::build(cfg, 0).unwrap();
    let full = Model::build(ModelConfig::default(), 0).unwrap();
    let deep = Model::build(ModelConfig::tiny(224, 224), 0).unwrap();
    assert!(small.num_parameters() < full.num_parameters());
    assert!(small.low_branch_depth() < deep.low_branch_depth());
    let out = small.forward(&gray(224, 224)).unwrap();
    assert_eq!(spatial(&out.fgbg_logits), (224, 224));
    assert_eq!(spatial(&out.aux[0].heads.fgbg_logits), (14, 14));
}

#[test]
fn cascade_off_keeps_the_interface() {
    let on = Model::build(ModelConfig::tiny(96, 96), 0).unwrap();
    let off_cfg = ModelConfig {
        cascade_enabled: false,
        ..ModelConfig::tiny(96, 96)
    };
    let off = Model::build(off_cfg, 0).unwrap();
    assert!(off.num_parameters() < on.num_parameters());
    assert!(off.params().iter().all(|(n, _)| !n.starts_with("high.")));
    let a = on.forward(&gray(96, 96)).unwrap();
    let b = off.forward(&gray(96, 96)).unwrap();
    assert_eq!(a.fgbg_logits.shape(), b.fgbg_logits.shape());
    assert_eq!(a.class_logits.shape(), b.class_logits.shape());
    assert_eq!(a.field.shape(), b.field.shape());
    for (x, y) in a.aux.iter().zip(&b.aux) {
        assert_eq!(x.scale, y.scale);
        assert_eq!(x.heads.fgbg_logits.shape(), y.heads.fgbg_logits.shape());
    }
}

/// Spatial sizes of every recorded 4-d activation in a forward pass.
fn activation_shapes(model: &Model, h: usize, w: usize) -> Vec<(usize, usize, usize)> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let x = tape.leaf(gray(h, w), false);
    model.forward_on_tape(&mut tape, &p, x).unwrap();
    tape.vars()
        .filter(|&v| tape.op_name(v) != "leaf")
        .filter_map(|v| {
            let s = tape.value(v).shape();
            (s.len() == 4).then(|| (s[1], s[2], s[3]))
        })
        .collect()
}

#[test]
fn doubling_input_doubles_every_feature_map() {
    let small = Model::build(ModelConfig::tiny(64, 96), 0).unwrap();
    let large = small.with_input_size(128, 192).unwrap();
    let a = activation_shapes(&small, 64, 96);
    let b = activation_shapes(&large, 128, 192);
    assert_eq!(a.len(), b.len());
    assert!(a.len() > 50);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!((2 * x.1, 2 * x.2, x.0), (y.1, y.2, y.0));
    }
}

#[test]
fn same_seed_same_parameters() {
    let a = Model::build(ModelConfig::tiny(64, 64), 7).unwrap();
    let b = Model::build(ModelConfig::tiny(64, 64), 7).unwrap();
    let c = Model::build(ModelConfig::tiny(64, 64), 8).unwrap();
    assert_eq!(a.params().checksum(), b.params().checksum());
    assert_ne!(a.params().checksum(), c.params().checksum());
}

#[test]
fn width_multiplier_shrinks_the_model() {
    let a = Model::build(ModelConfig::tiny(224, 224), 0).unwrap();
    let b = Model::build(ModelConfig::default(), 0).unwrap();
    assert!(a.num_parameters() < b.num_parameters());
    assert!(b.num_parameters() > 1_000_000);
}

#[test]
fn zero_classifier_gives_even_odds() {
    let mut model = Model::build(ModelConfig::tiny(64, 64), 0).unwrap();
    let params = model.params_mut();
    let targets: Vec<usize> = (0..params.len()).filter(|&i| params.name(i).starts_with("head.fgbg.")).collect();
    assert_eq!(targets.len(), 2);
    for i in targets {
        params.get_mut(i).data_mut().fill(0.0);
    }
    let img: Vec<u8> = (0..64 * 64 * 3).map(|v| (v * 37 % 251) as u8).collect();
    let out = model.forward(&images_to_tensor(&[&img], 64, 64)).unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf(out.fgbg_logits.clone(), false);
    let s = tape.softmax(x, 1).unwrap();
    assert!(tape.value(s).data().iter().all(|&v| (v - 0.5).abs() < 1e-6));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::build(ModelConfig::tiny(64, 64), 3).unwrap();
    let (ckpt, cfg) = (dir.path().join("m.ntck"), dir.path().join("m.json"));
    model.save(&ckpt, &cfg).unwrap();
    let back = Model::load(&ckpt, &cfg).unwrap();
    assert_eq!(back.config(), model.config());
    assert_eq!(back.params().checksum(), model.params().checksum());
    let x = gray(64, 64);
    assert_eq!(back.forward(&x).unwrap(), model.forward(&x).unwrap());
}

fn fuse_case(level: FuseLevel, f1_shape: &[usize], f2_shape: &[usize]) {
    let model = Model::build(ModelConfig::tiny(128, 128), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let f1 = random_tensor(f1_shape, &mut rng);
    let f2 = random_tensor(f2_shape, &mut rng);
    let zero1 = Tensor::zeros(f1_shape);
    let zero2 = Tensor::zeros(f2_shape);

    let run = |tape: &mut Tape<f32>, a: &Tensor<f32>, b: Option<&Tensor<f32>>| {
        let a = tape.leaf(a.clone(), false);
        let b = b.map(|b| tape.leaf(b.clone(), false));
        let v = model.fuse(tape, &p, level, a, b).unwrap();
        tape.value(v).clone()
    };
    let both = run(&mut tape, &f1, Some(&f2));
    assert_eq!(spatial(&both), (f2_shape[2], f2_shape[3]));

    // zero shallow input leaves only the deep path
    let deep_only = run(&mut tape, &f1, Some(&zero2));
    let deep_ref = {
        let cfg = ModelConfig {
            cascade_enabled: false,
            ..model.config().clone()
        };
        if level == FuseLevel::High {
            // a cascade-off model shares the deep-path parameter layout
            let off = Model::build(cfg, 0).unwrap();
            let mut t = Tape::new();
            let q = off.bind(&mut t, false);
            let a = t.leaf(f1.clone(), false);
            let v = off.fuse(&mut t, &q, level, a, None).unwrap();
            Some(t.value(v).clone())
        } else {
            None
        }
    };
    if let Some(r) = deep_ref {
        assert_eq!(r.shape(), deep_only.shape());
    }

    // zero deep input leaves only the projected shallow path, which is
    // relu6-bounded
    let shallow_only = run(&mut tape, &zero1, Some(&f2));
    assert!(shallow_only.data().iter().all(|&v| (0.0..=6.0).contains(&v)));

    // both zero: normalized zeros with zero shift
    let nothing = run(&mut tape, &zero1, Some(&zero2));
    assert!(nothing.data().iter().all(|&v| v == 0.0));

    // sum identity: deep-only plus shallow-only (pre-activation) matches
    // wherever neither term saturates
    let mismatched = Tensor::zeros(&[1, f2_shape[1], f2_shape[2] + 2, f2_shape[3]]);
    let a = tape.leaf(f1.clone(), false);
    let b = tape.leaf(mismatched, false);
    assert!(model.fuse(&mut tape, &p, level, a, Some(b)).is_err());
}

#[test]
fn fuse_shapes_and_additive_identities() {
    // tiny at 128: deep encoder output 80 ch at 4x4, its stage 4 is 8 ch at
    // 8x8; decoder width 32; shallow stage 4 is 8 ch at 16x16
    fuse_case(FuseLevel::Low, &[1, 80, 4, 4], &[1, 8, 8, 8]);
    fuse_case(FuseLevel::High, &[1, 32, 8, 8], &[1, 8, 16, 16]);
    // odd multiple of 16: the deep map has a padded extra cell
    fuse_case(FuseLevel::Low, &[1, 80, 4, 4], &[1, 8, 7, 7]);
}

fn sample(seed: u64, size: usize, nails: usize) -> ImageSample {
    generate_sample(&SceneSpec::random(seed, size, size, nails)).unwrap()
}

#[test]
fn every_parameter_gets_gradient_at_init() {
    let size = 64;
    let model = Model::build(ModelConfig::tiny(size, size), 1).unwrap();
    let samples = [sample(11, size, 3), sample(12, size, 3)];
    let refs: Vec<&ImageSample> = samples.iter().collect();
    let images: Vec<&[u8]> = samples.iter().map(|s| s.image.as_slice()).collect();
    let labels = ImageSample::batch_labels(&refs);
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, true);
    let x = tape.leaf(images_to_tensor(&images, size, size), false);
    let out = model.forward_on_tape(&mut tape, &p, x).unwrap();
    let (loss, _) = total_loss(&mut tape, &out, &labels, &LossConfig::default()).unwrap();
    let grads = tape.backward(loss).unwrap();
    for (i, &v) in p.iter().enumerate() {
        let g = grads.get(v).expect("gradient recorded");
        let norm: f64 = g.iter().map(|&x| (x as f64).powi(2)).sum();
        assert!(norm > 0.0, "{} has zero gradient", model.params().name(i));
        assert!(norm.is_finite());
    }
}
