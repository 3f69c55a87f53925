use super::*;
use crate::io::{synth_split, SynthConfig};
use crate::rng::Rng;
use crate::tensor::{gelu, matmul};

fn tiny() -> ModelSpec {
    ModelSpec {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        mlp_ratio: 4.0,
        num_classes: 3,
    }
}

fn images(spec: &ModelSpec, n: usize, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    let data = (0..n * spec.image_len()).map(|_| rng.normal() as f32).collect();
    Tensor::new(vec![n, spec.channels, spec.image_size, spec.image_size], data).unwrap()
}

#[test]
fn logits_do_not_depend_on_batch_composition() {
    let spec = tiny();
    let w = ModelWeights::init(&spec, &mut Rng::new(1)).unwrap();
    let x = images(&spec, 70, 2);
    let all = forward(&spec, &w, &x).unwrap();
    assert_eq!(all.shape(), &[70, 3]);
    let len = spec.image_len();
    for i in [0, 31, 32, 69] {
        let one = Tensor::new(vec![1, 1, 8, 8], x.data()[i * len..(i + 1) * len].to_vec()).unwrap();
        let l = forward(&spec, &w, &one).unwrap();
        for c in 0..3 {
            assert!((l.data()[c] - all.row(i)[c]).abs() < 1e-5);
        }
    }
}

#[test]
fn gradients_do_not_depend_on_thread_count() {
    let spec = tiny();
    let w = ModelWeights::init(&spec, &mut Rng::new(3)).unwrap();
    let x = images(&spec, 100, 4);
    let labels: Vec<usize> = (0..100).map(|i| i % 3).collect();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| batch_gradients(&spec, &w, x.data(), &labels, None, &LossSpec::cross_entropy()).unwrap())
    };
    let (l1, g1) = run(1);
    let (l3, g3) = run(3);
    assert_eq!(l1.to_bits(), l3.to_bits());
    assert_eq!(g1, g3);
}

#[test]
fn wrong_image_shape_is_a_dimension_error() {
    let spec = tiny();
    let w = ModelWeights::init(&spec, &mut Rng::new(0)).unwrap();
    let bad = Tensor::zeros(&[2, 1, 9, 9]);
    assert!(matches!(forward(&spec, &w, &bad), Err(Error::Dimension(_))));
}

#[test]
fn captured_activation_is_gelu_of_first_projection() {
    let spec = tiny();
    let w = ModelWeights::init(&spec, &mut Rng::new(5)).unwrap();
    let x = images(&spec, 3, 6);
    let (_, records) = forward_with_capture(&spec, &w, &x, &[0, 1, 2], &[1]).unwrap();
    assert_eq!(records.len(), 3 * spec.seq_len());
    let mlp = w.blocks[1].ffn.as_dense().unwrap();
    for r in &records {
        let xin = Tensor::new(vec![1, 8], r.x.data().to_vec()).unwrap();
        let mut z = matmul(&xin, &mlp.w1).unwrap();
        z.axpy(1.0, &mlp.b1.clone().reshape(&[1, 32]).unwrap()).unwrap();
        let y = gelu(&z);
        assert!(y.data().iter().zip(r.y.data()).all(|(a, b)| (a - b).abs() < 1e-5));
        assert_eq!(r.class_label, r.image_id);
    }
    // the captured input is layer-normalized: zero mean per token (γ=1, β=0)
    let mean: f32 = records[4].x.data().iter().sum::<f32>() / 8.0;
    assert!(mean.abs() < 1e-5);
}

#[test]
fn capture_dataset_drops_class_tokens_on_request() {
    let cfg = SynthConfig {
        image_size: 8,
        num_classes: 3,
        ..Default::default()
    };
    let (train, _) = synth_split(&cfg, 10, 1, 0).unwrap();
    let spec = tiny();
    let w = ModelWeights::init(&spec, &mut Rng::new(7)).unwrap();
    let opts = |cls| CaptureOptions {
        layers: vec![0, 1],
        include_class_token: cls,
    };
    let with = capture_dataset(&spec, &w, &train, &[1, 4, 7], &opts(true)).unwrap();
    let without = capture_dataset(&spec, &w, &train, &[1, 4, 7], &opts(false)).unwrap();
    assert_eq!(with.tokens_per_layer(), 3 * 5);
    assert_eq!(without.tokens_per_layer(), 3 * 4);
    let l = without.layer(1).unwrap();
    assert!(l.token_index.iter().all(|&t| t > 0));
    assert_eq!(l.image_id[0], 1);
    assert_eq!(l.class_label[0] as usize, train.labels[1]);
    assert!(capture_dataset(&spec, &w, &train, &[0], &CaptureOptions { layers: vec![2], include_class_token: true }).is_err());
}

#[test]
fn zero_kd_weight_is_plain_cross_entropy() {
    let spec = tiny();
    let w = ModelWeights::init(&spec, &mut Rng::new(8)).unwrap();
    let x = images(&spec, 5, 9);
    let labels = [0, 1, 2, 1, 0];
    let teacher = forward(&spec, &ModelWeights::init(&spec, &mut Rng::new(10)).unwrap(), &x).unwrap();
    let ce = backward(&spec, &w, &x, &labels, &LossSpec::cross_entropy(), None).unwrap();
    let kd0 = backward(&spec, &w, &x, &labels, &LossSpec::distillation(0.0, 2.0), Some(&teacher)).unwrap();
    assert!((ce.loss - kd0.loss).abs() < 1e-12);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    ce.grads.visit_trainable(|_, t, _| a.extend_from_slice(t.data()));
    kd0.grads.visit_trainable(|_, t, _| b.extend_from_slice(t.data()));
    assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-6));
}

#[test]
fn distillation_vanishes_when_student_equals_teacher() {
    let spec = tiny();
    let w = ModelWeights::init(&spec, &mut Rng::new(11)).unwrap();
    let x = images(&spec, 4, 12);
    let own = forward(&spec, &w, &x).unwrap();
    let g = backward(&spec, &w, &x, &[0, 1, 2, 0], &LossSpec::distillation(1.0, 2.0), Some(&own)).unwrap();
    assert!(g.loss.abs() < 1e-9);
    let mut max = 0.0f32;
    g.grads.visit_trainable(|_, t, _| max = t.data().iter().fold(max, |m, v| m.max(v.abs())));
    assert!(max < 1e-6);
}

#[test]
fn training_fits_a_small_synthetic_set() {
    let cfg = SynthConfig {
        image_size: 8,
        num_classes: 3,
        noise: 0.05,
        ..Default::default()
    };
    let (train, _) = synth_split(&cfg, 90, 1, 1).unwrap();
    let spec = tiny();
    let (w, report) = train_base(
        &spec,
        &train,
        &TrainConfig {
            epochs: 15,
            batch_size: 16,
            lr: 5e-3,
            ..Default::default()
        },
        &mut Rng::new(2),
    )
    .unwrap();
    assert!(report.epoch_loss.last().unwrap() < &(report.epoch_loss[0] * 0.5), "{:?}", report.epoch_loss);
    assert!(report.train_accuracy > 0.9);
    assert!(w.is_all_dense());
}
