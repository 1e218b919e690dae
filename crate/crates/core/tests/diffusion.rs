use crosswkv::autodiff::Tape;
use crosswkv::crosswkv::{random_params, LayerConfig};
use crosswkv::diffusion::{
    diffusion_loss_with, q_sample, sample_batch, train_model, Denoiser, DenoiserConfig, EvalSet,
    NoiseSchedule, TrainConfig,
};
use crosswkv::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_cfg() -> DenoiserConfig {
    DenoiserConfig {
        layer: LayerConfig::new(8, 6, 8, 2).unwrap(),
        depth: 2,
        channels: 1,
        seq_len: 64,
        cond_len: 8,
    }
}

/// Tiny denoiser with every parameter moved off its init so all paths carry
/// gradient.
fn random_tiny(seed: u64) -> Denoiser {
    let mut model = Denoiser::init(tiny_cfg(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
    for (i, layer) in model.params.layers.iter_mut().enumerate() {
        *layer = random_params(&model.cfg.layer_config(i), seed + i as u64);
    }
    for (name, p) in model.params.fields_mut() {
        if !name.starts_with("layer") {
            let z = Tensor::<f64>::randn(p.shape().to_vec(), &mut rng);
            *p = z.map(|z| 0.4 * z);
        }
    }
    model
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let model = random_tiny(5);
    let schedule = NoiseSchedule::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let batch = sample_batch(&model.cfg, 2, 0.5, &mut rng).unwrap();
    let t = vec![17, 150];
    let noise = Tensor::<f64>::randn(batch.x0.shape().to_vec(), &mut rng);
    let x_t = q_sample(&schedule, &batch.x0, &t, &noise).unwrap();

    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let x = tape.constant(x_t.clone());
    let c = tape.constant(batch.cond.clone());
    let pred = model
        .forward_on_tape(&mut tape, &vars, x, c, &t, true)
        .unwrap();
    let target = tape.constant(noise.clone());
    let d = tape.sub(pred, target).unwrap();
    let sq = tape.square(d);
    let loss = tape.mean(sq);
    let grads = tape.backward(loss).unwrap();

    // the MSE seen by the loss helper, recomputed from perturbed copies
    let loss_at = |m: &Denoiser| diffusion_loss_with(m, &schedule, &batch, &t, &noise).unwrap();
    let h = 1e-5;
    let mut worst = (String::new(), 0.0f64);
    let mut checked = 0;
    let names: Vec<String> = model.params.fields().into_iter().map(|(n, _)| n).collect();
    for (idx, (name, var)) in vars.fields().into_iter().enumerate() {
        let Some(g) = grads.get(*var) else { continue };
        let numel = g.numel();
        // a spread of entries from each tensor keeps the run short
        let picks: Vec<usize> = (0..numel.min(6))
            .map(|k| k * numel / numel.min(6))
            .collect();
        for &i in &picks {
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.params.fields_mut()[idx].1.data_mut()[i] += delta;
                loss_at(&m)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let analytic = g.data()[i];
            let err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6);
            if err > worst.1 {
                worst = (format!("{name}[{i}]"), err);
            }
            checked += 1;
        }
        assert_eq!(names[idx], name);
    }
    assert!(checked > 100, "only {checked} entries checked");
    assert!(worst.1 <= 1e-4, "worst {} at {}", worst.1, worst.0);
}

#[test]
fn prediction_is_causal_along_pixels() {
    let model = random_tiny(2);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = sample_batch(&model.cfg, 2, 0.0, &mut rng).unwrap();
    let t = [30, 120];
    let base = model.predict(&batch.x0, &batch.cond, &t).unwrap();
    let mut x = batch.x0.clone();
    x.data_mut()[40] += 0.5;
    x.data_mut()[64 + 40] -= 0.5;
    let moved = model.predict(&x, &batch.cond, &t).unwrap();
    for b in 0..2 {
        for p in 0..64 {
            let (a, c) = (base.at(&[b, p, 0]), moved.at(&[b, p, 0]));
            if p < 40 {
                assert_eq!(a, c, "pixel {p} saw a later pixel");
            } else if p == 40 {
                assert_ne!(a, c);
            }
        }
    }
}

#[test]
fn permuting_cond_changes_prediction() {
    let model = random_tiny(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let labels = [Some(0), Some(1), Some(2), Some(3)];
    let cond = crosswkv::diffusion::data::class_cond(&labels, 8, 6).unwrap();
    let rotated =
        crosswkv::diffusion::data::class_cond(&[Some(1), Some(2), Some(3), Some(0)], 8, 6).unwrap();
    let x = Tensor::<f64>::randn([4, 64, 1], &mut rng);
    let t = [50; 4];
    let a = model.predict(&x, &cond, &t).unwrap();
    let b = model.predict(&x, &rotated, &t).unwrap();
    for row in 0..4 {
        let diff = (0..64)
            .map(|p| (a.at(&[row, p, 0]) - b.at(&[row, p, 0])).abs())
            .fold(0.0, f64::max);
        assert!(diff > 0.0, "row {row} ignored its tokens");
    }
}

#[test]
fn training_is_deterministic() {
    let cfg = TrainConfig {
        steps: 4,
        batch_size: 3,
        log_every: 1,
        seed: 8,
        ..Default::default()
    };
    let run = || {
        let mut model = Denoiser::init(tiny_cfg(), 8).unwrap();
        let log = train_model(&mut model, &NoiseSchedule::toy(), &cfg, |_| {}).unwrap();
        (
            model,
            log.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>(),
        )
    };
    let (m1, l1) = run();
    let (m2, l2) = run();
    assert_eq!(l1, l2);
    assert_eq!(m1.params, m2.params);
    assert_ne!(m1.params, Denoiser::init(tiny_cfg(), 8).unwrap().params);
}

#[test]
fn zero_predictor_baseline_is_unit() {
    let cfg = DenoiserConfig::toy();
    let eval = EvalSet::new(&cfg, &NoiseSchedule::toy(), 256, 0).unwrap();
    let zero = |x: &Tensor, _: &Tensor, _: &[usize]| Ok(Tensor::zeros(x.shape().to_vec()));
    let loss = eval.loss(&zero, &NoiseSchedule::toy()).unwrap();
    assert_eq!(loss, eval.zero_baseline());
    assert!((loss - 1.0).abs() <= 0.05, "{loss}");
}

#[test]
fn denoiser_checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let model = random_tiny(6);
    let (p1, p2) = (dir.path().join("a.cwkv"), dir.path().join("b.cwkv"));
    model.save(&p1).unwrap();
    let back = Denoiser::load(&p1).unwrap();
    assert_eq!(back.cfg, model.cfg);
    assert_eq!(back.params, model.params);
    back.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}
