use nailtrace::metrics::{angular_error, evaluate, miou, EvalReport};
use nailtrace::model::{Model, ModelConfig};
use nailtrace::objectives::FgbgObjective;
use nailtrace::postprocess::PostprocessParams;
use nailtrace::synth::{generate_dataset, generate_sample, DatasetSpec, SceneSpec, Split};
use nailtrace::train::{train, AblationSetting, Optimizer, TrainConfig};
use proptest::prelude::*;

fn masks() -> impl Strategy<Value = (Vec<bool>, Vec<bool>)> {
    (1usize..300).prop_flat_map(|n| (prop::collection::vec(any::<bool>(), n), prop::collection::vec(any::<bool>(), n)))
}

proptest! {
    #[test]
    fn miou_is_symmetric_and_complement_invariant((a, b) in masks()) {
        let m = miou(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
        prop_assert_eq!(m, miou(&b, &a).unwrap());
        let na: Vec<bool> = a.iter().map(|v| !v).collect();
        let nb: Vec<bool> = b.iter().map(|v| !v).collect();
        prop_assert_eq!(m, miou(&na, &nb).unwrap());
        prop_assert_eq!(miou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn angle_is_symmetric_and_bounded(t1 in 0.0f64..std::f64::consts::TAU, t2 in 0.0f64..std::f64::consts::TAU) {
        let (u, v) = ((t1.cos(), t1.sin()), (t2.cos(), t2.sin()));
        let a = angular_error(u, v).unwrap();
        prop_assert!((0.0..=180.0).contains(&a));
        prop_assert!((a - angular_error(v, u).unwrap()).abs() < 1e-9);
    }
}

#[test]
fn miou_rejects_mismatched_masks() {
    assert!(miou(&[true], &[true, false]).is_err());
    assert!(angular_error((2.0, 0.0), (1.0, 0.0)).is_err());
}

fn without_timing(mut r: EvalReport) -> EvalReport {
    r.runtime_ms_per_frame = 0.0;
    r
}

#[test]
fn evaluation_does_not_depend_on_thread_count() {
    let model = Model::build(ModelConfig::tiny(64, 64), 3).unwrap();
    let samples: Vec<_> = (0..6).map(|s| generate_sample(&SceneSpec::random(s, 64, 64, 2)).unwrap()).collect();
    let refs: Vec<_> = samples.iter().collect();
    let params = PostprocessParams::for_size(64, 64);
    let run = |threads: usize, batch: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| without_timing(evaluate(&model, &refs, &params, batch).unwrap()))
    };
    let one = run(1, 1);
    assert_eq!(one, run(4, 1));
    assert_eq!(one, run(3, 4));
    assert_eq!(one.frames, 6);
}

fn small_dataset() -> nailtrace::synth::Dataset {
    generate_dataset(&DatasetSpec {
        seed: 4,
        count: 24,
        width: 64,
        height: 64,
        ..DatasetSpec::default()
    })
    .unwrap()
}

fn quick(optimizer: Optimizer, lr: f64) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: 2,
        crop: (64, 64),
        optimizer,
        learning_rate: lr,
        eval_every: 0,
        max_train_images: Some(4),
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = small_dataset();
    for opt in [Optimizer::Sgd, Optimizer::Adam] {
        let mut model = Model::build(ModelConfig::tiny(64, 64), 1).unwrap();
        let before = model.params().checksum();
        let out = train(&mut model, &data, &quick(opt, 0.0), std::io::sink()).unwrap();
        assert_eq!(out.steps, 2);
        assert_eq!(model.params().checksum(), before, "{opt:?}");
    }
}

#[test]
fn training_is_deterministic_and_logs_every_step() {
    let data = small_dataset();
    let cfg = TrainConfig {
        eval_every: 1,
        max_eval_images: Some(2),
        ..quick(Optimizer::Adam, 0.003)
    };
    let run = || {
        let mut model = Model::build(ModelConfig::tiny(64, 64), 1).unwrap();
        let mut log = Vec::new();
        let out = train(&mut model, &data, &cfg, &mut log).unwrap();
        (model.params().checksum(), log, out)
    };
    let (a, log_a, out) = run();
    let (b, log_b, _) = run();
    assert_eq!(a, b);
    // eval lines carry wall-clock timing; step lines must match exactly
    let steps = |log: Vec<u8>| -> Vec<String> {
        let text = String::from_utf8(log).unwrap();
        text.lines().filter(|l| l.contains("\"step\"")).map(str::to_string).collect()
    };
    let steps_a = steps(log_a);
    assert_eq!(steps_a, steps(log_b));
    assert_eq!(steps_a.len(), out.steps);
    assert_eq!(out.evals.len(), 1);
    assert!(out.best_report.is_some());
    assert_ne!(a, Model::build(ModelConfig::tiny(64, 64), 1).unwrap().params().checksum());
}

#[test]
fn empty_training_split_is_an_error() {
    let data = small_dataset();
    let mut model = Model::build(ModelConfig::tiny(64, 64), 1).unwrap();
    let cfg = TrainConfig {
        max_train_images: Some(0),
        ..quick(Optimizer::Sgd, 0.1)
    };
    assert!(train(&mut model, &data, &cfg, std::io::sink()).is_err());
    assert!(!data.split(Split::Train).is_empty());
}

#[test]
fn ablation_settings_differ_only_in_loss_and_cascade() {
    let m = ModelConfig::tiny(64, 64);
    let t = TrainConfig::default();
    let configs: Vec<_> = AblationSetting::ALL.iter().map(|s| s.configure(&m, &t)).collect();
    let (base, lmp, casc) = (&configs[0], &configs[1], &configs[2]);
    assert!(!base.0.cascade_enabled && !lmp.0.cascade_enabled && casc.0.cascade_enabled);
    assert!(matches!(base.1.loss.fgbg, FgbgObjective::WeightedCrossEntropy { .. }));
    assert!(matches!(lmp.1.loss.fgbg, FgbgObjective::LossMaxPooling { .. }));
    assert_eq!(lmp.1.loss, casc.1.loss);
    for (mc, tc) in &configs {
        assert_eq!(ModelConfig { cascade_enabled: false, ..mc.clone() }, ModelConfig { cascade_enabled: false, ..m.clone() });
        assert_eq!(TrainConfig { loss: t.loss, ..tc.clone() }, t);
        assert_eq!((tc.loss.class_normalization, tc.loss.field_normalization), (t.loss.class_normalization, t.loss.field_normalization));
        assert_eq!(tc.loss.aux_weight, t.loss.aux_weight);
    }
}
