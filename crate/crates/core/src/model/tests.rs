use super::*;
use crate::attention::soften_mask;
use rand::Rng;

fn random_image(r: usize, seed: u64) -> ImageTensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..3 * r * r).map(|_| rng.random_range(0.0..1.0)).collect();
    ImageTensor::new(3, r, r, data).unwrap()
}

fn disc(r: usize) -> LesionMask {
    let c = r as f64 / 2.0 - 0.5;
    LesionMask::from_fn(r, r, |y, x| {
        let (dy, dx) = (y as f64 - c, x as f64 - c);
        dy * dy + dx * dx <= (r as f64 / 3.5).powi(2)
    })
}

fn small(mode: InputMode) -> ModelConfig {
    ModelConfig {
        input_resolution: 8,
        attention_kernel_size: 3,
        channels_per_block: vec![3, 4],
        head_hidden_units: 5,
        rescale_attention: true,
        input_mode: mode,
        seed: 11,
    }
}

/// Parameter count from the layer list, written out independently of `Arch`.
fn count_params(cfg: &ModelConfig) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
    let mut n = match cfg.input_mode {
        InputMode::Attention => conv(3, 1, cfg.attention_kernel_size),
        InputMode::LesionOnly => 0,
    };
    let mut cin = 3;
    for &c in &cfg.channels_per_block {
        n += conv(cin, c, 3) + conv(c, c, 3) + conv(cin, c, 1);
        cin = c;
    }
    n + conv(cin, cfg.head_hidden_units, 1) + conv(cfg.head_hidden_units, 1, 1)
}

#[test]
fn default_architecture_shapes_and_count() {
    let cfg = ModelConfig::default();
    let m = Rann::<f32>::new(cfg.clone()).unwrap();
    assert_eq!(m.n_params(), count_params(&cfg));
    assert_eq!(m.n_params(), 76_941);
    assert_eq!(m.output_shapes(), vec![(16, 32, 32), (32, 16, 16), (64, 8, 8)]);
    assert_eq!(m.attention_param_range(), Some(0..28));

    let lo = ModelConfig {
        input_mode: InputMode::LesionOnly,
        ..cfg
    };
    assert_eq!(Rann::<f32>::new(lo.clone()).unwrap().n_params(), count_params(&lo));
}

#[test]
fn config_validation() {
    let bad = [
        ModelConfig {
            input_resolution: 60,
            ..Default::default()
        },
        ModelConfig {
            attention_kernel_size: 4,
            ..Default::default()
        },
        ModelConfig {
            channels_per_block: vec![],
            ..Default::default()
        },
        ModelConfig {
            head_hidden_units: 0,
            ..Default::default()
        },
    ];
    for cfg in bad {
        assert!(Rann::<f64>::new(cfg).is_err());
    }
    assert!(Rann::<f64>::from_parts(ModelConfig::default(), vec![]).is_err());
}

#[test]
fn initialization_is_seeded() {
    let a = Rann::<f64>::new(small(InputMode::Attention)).unwrap();
    let b = Rann::<f64>::new(small(InputMode::Attention)).unwrap();
    let c = Rann::<f64>::new(ModelConfig {
        seed: 12,
        ..small(InputMode::Attention)
    })
    .unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
}

#[test]
fn forward_outputs_are_well_formed() {
    let m = Rann::<f64>::new(small(InputMode::Attention)).unwrap();
    let out = m.forward(&random_image(8, 1)).unwrap();
    assert!(out.score > 0.0 && out.score < 1.0);
    assert!((out.score - 1.0 / (1.0 + (-out.logit).exp())).abs() < 1e-15);
    assert_eq!(out.attention.shape(), (8, 8));
    assert!((out.attention.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(out.attention.data().iter().all(|&a| a >= 0.0));

    let wrong = random_image(16, 1);
    assert!(matches!(m.forward(&wrong), Err(Error::Shape { .. })));
}

#[test]
fn constant_attention_logits_give_uniform_map() {
    let mut m = Rann::<f64>::new(small(InputMode::Attention)).unwrap();
    m.set_attention_weights(&[0.0; 27], 0.4).unwrap();
    let a = m.attention_block(&random_image(8, 2)).unwrap();
    assert!(a.data().iter().all(|&v| (v - 1.0 / 64.0).abs() < 1e-15));
}

#[test]
fn uniform_attention_scales_by_pixel_count() {
    let x = random_image(4, 3);
    let xa = apply_attention(&x, &AttentionMap::uniform(4, 4)).unwrap();
    for (a, b) in xa.data().iter().zip(x.data()) {
        assert!((a - b / 16.0).abs() < 1e-15);
    }
    assert!(apply_attention(&x, &AttentionMap::uniform(3, 4)).is_err());
}

#[test]
fn rescaled_uniform_attention_matches_lesion_only_on_full_mask() {
    // With uniform attention and rescaling the residual blocks see X itself,
    // which is also what the lesion-only path sees under an all-ones mask.
    let mut att = Rann::<f64>::new(small(InputMode::Attention)).unwrap();
    att.set_attention_weights(&[0.0; 27], 0.0).unwrap();
    let lo_cfg = small(InputMode::LesionOnly);
    let tail = att.params()[28..].to_vec();
    let lo = Rann::from_parts(lo_cfg, tail).unwrap();
    let x = random_image(8, 4);
    let full = LesionMask::from_fn(8, 8, |_, _| true);
    let a = att.forward(&x).unwrap().score;
    let b = lo.forward_with_mask(&x, Some(&full)).unwrap().score;
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn lesion_only_input_zeroes_background() {
    let x = random_image(8, 5);
    let m = disc(8);
    let xl = lesion_only_input(&x, &m).unwrap();
    for c in 0..3 {
        for y in 0..8 {
            for xx in 0..8 {
                let expect = if m.get(y, xx) { x.get(c, y, xx) } else { 0.0 };
                assert_eq!(xl.get(c, y, xx), expect);
            }
        }
    }
    let empty = LesionMask::from_fn(8, 8, |_, _| false);
    assert!(lesion_only_input(&x, &empty).is_err());
    assert!(lesion_only_input(&x, &disc(4)).is_err());
}

#[test]
fn lesion_only_ignores_background_and_needs_mask() {
    let m = Rann::<f64>::new(small(InputMode::LesionOnly)).unwrap();
    let x = random_image(8, 6);
    let mask = disc(8);
    assert!(matches!(m.forward(&x), Err(Error::MissingMask(_))));
    let mut y = x.clone();
    for c in 0..3 {
        y.set(c, 0, 0, 0.123);
        y.set(c, 7, 7, 0.987);
    }
    let a = m.forward_with_mask(&x, Some(&mask)).unwrap();
    let b = m.forward_with_mask(&y, Some(&mask)).unwrap();
    assert_eq!(a.score, b.score);
    let area = mask.area() as f64;
    for (v, &inside) in a.attention.data().iter().zip(mask.data()) {
        assert_eq!(*v, if inside { 1.0 / area } else { 0.0 });
    }
}

fn batch_loss(m: &Rann<f64>, batch: &[TrainExample<'_, f64>], lambda: f64) -> f64 {
    let mut g = vec![0.0; m.n_params()];
    m.loss_and_gradient(batch, lambda, &mut g, &mut Scratch::default())
        .unwrap()
        .total
}

/// Central differences over every parameter.
fn check_gradient(mode: InputMode, lambda: f64) {
    let mut m = Rann::<f64>::new(small(mode)).unwrap();
    // Zero biases over a zeroed background put pre-activations exactly on the
    // ReLU kink, where central differences are meaningless.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for p in m.params_mut() {
        *p += rng.random_range(-0.05..0.05);
    }
    let imgs: Vec<_> = (0..3).map(|s| random_image(8, 100 + s)).collect();
    let mask = disc(8);
    let soft = soften_mask::<f64>(&mask, 0.7).unwrap();
    let batch: Vec<_> = imgs
        .iter()
        .enumerate()
        .map(|(i, im)| TrainExample {
            image: im,
            label: i % 2 == 0,
            mask: Some(&mask),
            target: Some(&soft),
        })
        .collect();

    let mut grad = vec![0.0; m.n_params()];
    let loss = m
        .loss_and_gradient(&batch, lambda, &mut grad, &mut Scratch::default())
        .unwrap();
    assert!((loss.total - batch_loss(&m, &batch, lambda)).abs() < 1e-15);

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..m.n_params() {
        let orig = m.params()[i];
        m.params_mut()[i] = orig + h;
        let up = batch_loss(&m, &batch, lambda);
        m.params_mut()[i] = orig - h;
        let down = batch_loss(&m, &batch, lambda);
        m.params_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let err = (fd - grad[i]).abs() / (fd.abs() + grad[i].abs()).max(1e-4);
        worst = worst.max(err);
    }
    assert!(worst < 1e-4, "worst relative gradient error {worst}");
}

#[test]
fn gradient_matches_finite_differences_attention() {
    check_gradient(InputMode::Attention, 0.0);
    check_gradient(InputMode::Attention, 0.5);
}

#[test]
fn gradient_matches_finite_differences_lesion_only() {
    check_gradient(InputMode::LesionOnly, 0.5);
}

#[test]
fn attention_loss_reaches_attention_parameters() {
    let m = Rann::<f64>::new(small(InputMode::Attention)).unwrap();
    let x = random_image(8, 7);
    let mask = disc(8);
    let soft = soften_mask::<f64>(&mask, 0.7).unwrap();
    let ex = [TrainExample {
        image: &x,
        label: true,
        mask: None,
        target: Some(&soft),
    }];
    let mut with = vec![0.0; m.n_params()];
    let mut without = vec![0.0; m.n_params()];
    let mut s = Scratch::default();
    let l1 = m.loss_and_gradient(&ex, 0.5, &mut with, &mut s).unwrap();
    let l0 = m.loss_and_gradient(&ex, 0.0, &mut without, &mut s).unwrap();
    assert!(l1.attention > 0.0);
    assert_eq!(l0.attention, 0.0);
    let range = m.attention_param_range().unwrap();
    let diff: f64 = range.clone().map(|i| (with[i] - without[i]).abs()).sum();
    assert!(diff > 1e-8);
    // The classifier head only sees the attention term through the input.
    let head = m.n_params() - 1;
    assert_eq!(with[head], without[head]);
}

#[test]
fn attention_loss_requires_targets() {
    let m = Rann::<f64>::new(small(InputMode::Attention)).unwrap();
    let x = random_image(8, 8);
    let ex = [TrainExample {
        image: &x,
        label: false,
        mask: None,
        target: None,
    }];
    let mut g = vec![0.0; m.n_params()];
    assert!(m.loss_and_gradient(&ex, 0.5, &mut g, &mut Scratch::default()).is_err());
    assert!(m.loss_and_gradient(&ex, 0.0, &mut g, &mut Scratch::default()).is_ok());
    assert!(m.loss_and_gradient(&[], 0.0, &mut g, &mut Scratch::default()).is_err());
}

#[test]
fn f32_and_f64_agree() {
    let cfg = small(InputMode::Attention);
    let m64 = Rann::<f64>::new(cfg.clone()).unwrap();
    let m32 = Rann::<f32>::new(cfg).unwrap();
    let x64 = random_image(8, 9);
    let x32 = ImageTensor::new(3, 8, 8, x64.data().iter().map(|&v| v as f32).collect()).unwrap();
    let a = m64.forward(&x64).unwrap().score;
    let b = m32.forward(&x32).unwrap().score as f64;
    assert!((a - b).abs() < 1e-5);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let m = Rann::<f32>::new(ModelConfig {
        seed: 3,
        ..small(InputMode::Attention)
    })
    .unwrap();
    Checkpoint::from_model(&m).save(&path).unwrap();
    let back: Rann<f32> = Checkpoint::load(&path).unwrap().to_model().unwrap();
    assert_eq!(back.config(), m.config());
    assert!(back
        .params()
        .iter()
        .zip(m.params())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
    let x = ImageTensor::new(3, 8, 8, vec![0.5f32; 192]).unwrap();
    assert_eq!(m.forward(&x).unwrap(), back.forward(&x).unwrap());

    std::fs::write(&path, "{not json").unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));
}
