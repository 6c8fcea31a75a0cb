use alf_core::autodiff::Tape;
use alf_core::data::{argmax_rows, synth_teacher, SyntheticTeacher, TeacherSpec};
use alf_core::trainer::task_loss;
use alf_core::{
    evaluate, Activation, Architecture, Checkpoint, Dataset, InputSpec, LayerSpec, Layout, Model, Tensor4, Trainer,
    TrainingConfig,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_arch() -> Architecture {
    Architecture {
        input: InputSpec {
            height: 8,
            width: 8,
            channels: 1,
            classes: 4,
        },
        layers: vec![
            LayerSpec::Conv {
                in_channels: 1,
                out_channels: 6,
                kernel: 3,
                stride: 1,
                padding: 0,
                activation: Activation::Relu,
            },
            LayerSpec::AlfConv {
                in_channels: 6,
                out_channels: 8,
                kernel: 3,
                stride: 1,
                padding: 0,
                activation: Activation::Identity,
                inter_activation: None,
                code_channels: None,
            },
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear {
                in_features: 8,
                out_features: 4,
            },
        ],
    }
}

fn quick_config() -> TrainingConfig {
    TrainingConfig {
        epochs: 2,
        batch_size: 16,
        learning_rate: 0.05,
        pr: 0.5,
        m: 4,
        seed: 11,
        ..TrainingConfig::default()
    }
}

#[test]
fn rank_one_teacher_has_one_singular_value() {
    let teacher = SyntheticTeacher::new(TeacherSpec {
        rank: 1,
        ..TeacherSpec::default()
    })
    .unwrap();
    for bank in teacher.filter_banks() {
        let m = DMatrix::from_row_slice(bank.rows(), bank.channels(), bank.data()).map(|v| v as f64);
        let sv = m.singular_values();
        let top = sv.max();
        assert!(top > 0.1);
        let rest = sv.iter().filter(|&&s| s != top).fold(0.0f64, |a, &b| a.max(b));
        assert!(rest <= 1e-5 * top, "singular values {sv:?}");
    }
}

#[test]
fn rank_four_teacher_has_four_singular_values() {
    let teacher = SyntheticTeacher::new(TeacherSpec::default()).unwrap();
    for bank in teacher.filter_banks() {
        let m = DMatrix::from_row_slice(bank.rows(), bank.channels(), bank.data()).map(|v| v as f64);
        let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        assert!(sv[3] > 1e-3 * sv[0]);
        assert!(sv[4] <= 1e-5 * sv[0]);
    }
}

#[test]
fn teacher_data_is_seed_deterministic_and_self_consistent() {
    let a = synth_teacher(3, 200, 4).unwrap();
    assert_eq!(a, synth_teacher(3, 200, 4).unwrap());
    let teacher = SyntheticTeacher::new(TeacherSpec {
        seed: 3,
        ..TeacherSpec::default()
    })
    .unwrap();
    assert_eq!(teacher.label(&a.images).unwrap(), a.labels);
    // all classes occur
    assert!(a.class_histogram().iter().all(|&c| c > 0), "{:?}", a.class_histogram());
}

#[test]
fn fixed_seed_runs_are_identical() {
    let data = synth_teacher(1, 128, 4).unwrap();
    let run = || {
        let mut t = Trainer::from_architecture(&small_arch(), quick_config()).unwrap();
        let metrics = t.train_loop(&data, &data).unwrap();
        (metrics, t.into_model())
    };
    let (m1, model1) = run();
    let (m2, model2) = run();
    assert_eq!(m1, m2);
    assert_eq!(model1, model2);
    assert_eq!(m1.records.len(), 2);
    assert_eq!(m1.records[1].masked_count, vec![4]);
}

#[test]
fn step_losses_are_additive() {
    let data = synth_teacher(2, 32, 4).unwrap();
    for lambda_rec in [0.0, 0.3, 2.0] {
        let mut t = Trainer::from_architecture(
            &small_arch(),
            TrainingConfig {
                lambda_rec,
                ..quick_config()
            },
        )
        .unwrap();
        let (x, y) = data.range(0, 32);
        let l = t.train_step(&x, &y).unwrap();
        assert!((l.total - (l.task + lambda_rec * l.reconstruction)).abs() <= 1e-6);
    }
}

#[test]
fn zero_lambda_cuts_reconstruction_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model: Model<f64> = Model::init(&small_arch(), Activation::Identity, &mut rng).unwrap();
    let x = Tensor4::<f64>::randn([4, 8, 8, 1], 1.0, Layout::Nhwc, &mut rng);
    let labels = [0, 1, 2, 3];
    let grads_of = |lambda: f64, task_weight: f64| {
        let mut tape = Tape::new();
        let rec = model.record(&mut tape, &x).unwrap();
        let task = tape.softmax_cross_entropy(rec.logits, &labels).unwrap();
        let task = tape.scale(task, task_weight);
        let r = tape.scale(rec.reconstruction[0], lambda);
        let total = tape.add(task, r).unwrap();
        let g = tape.backward(total).unwrap();
        // encoder of the ALF layer is the third parameter
        g.get(rec.params[2])
    };
    let rec_only = grads_of(0.0, 0.0);
    assert!(rec_only.data().iter().all(|&v| v == 0.0));
    let task_only = grads_of(0.0, 1.0);
    assert!(task_only.data().iter().any(|&v| v != 0.0));
}

#[test]
fn one_step_descends_on_convex_toy() {
    // a linear classifier alone is convex in its weights
    let arch = Architecture {
        input: InputSpec {
            height: 2,
            width: 2,
            channels: 1,
            classes: 3,
        },
        layers: vec![LayerSpec::Linear {
            in_features: 4,
            out_features: 3,
        }],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor4::randn([12, 2, 2, 1], 1.0, Layout::Nhwc, &mut rng);
    let y: Vec<usize> = (0..12).map(|_| rng.random_range(0..3)).collect();
    let cfg = TrainingConfig {
        learning_rate: 0.01,
        optimizer: alf_core::OptimizerKind::Sgd,
        ..TrainingConfig::default()
    };
    let mut t = Trainer::from_architecture(&arch, cfg).unwrap();
    let before = task_loss(&t.model.forward(&x).unwrap(), &y).unwrap();
    t.train_step(&x, &y).unwrap();
    let after = task_loss(&t.model.forward(&x).unwrap(), &y).unwrap();
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn accuracy_reference_points() {
    // constant-label data and a model whose logits always favour class 1
    let arch = Architecture {
        input: InputSpec {
            height: 1,
            width: 1,
            channels: 1,
            classes: 2,
        },
        layers: vec![LayerSpec::Linear {
            in_features: 1,
            out_features: 2,
        }],
    };
    let mut model: Model<f32> = Model::init(&arch, Activation::Identity, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    if let alf_core::Layer::Linear(l) = &mut model.layers[0] {
        l.weights = Tensor4::from_vec([1, 1, 1, 2], vec![0.0, 1.0], Layout::Kkio).unwrap();
    }
    let ones = Dataset::new(Tensor4::filled([20, 1, 1, 1], 1.0, Layout::Nhwc), vec![1; 20], 2).unwrap();
    assert_eq!(evaluate(&model, &ones).unwrap(), 1.0);

    // random labels against an untrained model land near chance
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 4000;
    let x = Tensor4::randn([n, 1, 1, 1], 1.0, Layout::Nhwc, &mut rng);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
    let random = Dataset::new(x, labels, 2).unwrap();
    let acc = evaluate(&model, &random).unwrap();
    assert!((acc - 0.5).abs() < 0.05, "{acc}");
}

#[test]
fn checkpoint_round_trip() {
    let data = synth_teacher(6, 64, 4).unwrap();
    let mut t = Trainer::from_architecture(&small_arch(), quick_config()).unwrap();
    t.train_loop(&data, &data).unwrap();
    let ck = Checkpoint::from_trainer(small_arch(), &t);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    let (x, _) = data.range(0, 8);
    assert_eq!(
        argmax_rows(&back.model.forward(&x).unwrap()),
        argmax_rows(&ck.model.forward(&x).unwrap())
    );
}

#[test]
fn tape_replay_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let model: Model<f32> = Model::init(&small_arch(), Activation::Relu, &mut rng).unwrap();
    let x = Tensor4::randn([3, 8, 8, 1], 1.0, Layout::Nhwc, &mut rng);
    let grads = || {
        let mut tape = Tape::new();
        let rec = model.record(&mut tape, &x).unwrap();
        let (total, _) = alf_core::combined_loss(&mut tape, &rec, &[0, 1, 2], 1.0).unwrap();
        let g = tape.backward(total).unwrap();
        rec.params.iter().map(|&p| g.get(p)).collect::<Vec<_>>()
    };
    assert_eq!(grads(), grads());
}
