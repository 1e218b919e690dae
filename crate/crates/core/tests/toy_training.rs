//! One full default training run (a few minutes on one core), checked from
//! several angles.

use crosswkv::diffusion::data::class_cond;
use crosswkv::diffusion::{
    sample_and_classify, train, DenoiserConfig, EvalSet, NoiseSchedule, TrainConfig, CLASSES,
};
use crosswkv::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn default_training_run() {
    let schedule = NoiseSchedule::toy();
    let cfg = DenoiserConfig::toy();
    let (model, log) = train(cfg, &schedule, &TrainConfig::default()).unwrap();

    let first = log.first().unwrap();
    let last = log.last().unwrap();
    assert_eq!((first.step, last.step), (0, 1999));
    assert_eq!(log.len(), 41);
    assert!(
        last.loss <= 0.5 * first.loss,
        "batch loss {} -> {}",
        first.loss,
        last.loss
    );

    let eval = EvalSet::new(&cfg, &schedule, 256, 7).unwrap();
    let loss = eval.loss(&model, &schedule).unwrap();
    assert!(loss <= 0.5 * eval.zero_baseline(), "eval loss {loss}");

    let cond = sample_and_classify(&model, &schedule, 200, true, 21).unwrap();
    assert!(cond.accuracy() >= 0.8, "accuracy {}", cond.accuracy());

    let uncond = sample_and_classify(&model, &schedule, 200, false, 22).unwrap();
    let counts = uncond.class_counts();
    let top = *counts.iter().max().unwrap();
    assert!(top * 10 < 200 * 6, "unconditional counts {counts:?}");

    // swapping tokens across the batch moves every row's predicted noise
    let labels: Vec<Option<usize>> = (0..CLASSES).map(Some).collect();
    let rotated: Vec<Option<usize>> = (0..CLASSES).map(|c| Some((c + 1) % CLASSES)).collect();
    let x = Tensor::<f64>::randn([CLASSES, 64, 1], &mut ChaCha8Rng::seed_from_u64(3));
    let t = [100; CLASSES];
    let a = model
        .predict(&x, &class_cond(&labels, 64, 8).unwrap(), &t)
        .unwrap();
    let b = model
        .predict(&x, &class_cond(&rotated, 64, 8).unwrap(), &t)
        .unwrap();
    for row in 0..CLASSES {
        let diff = (0..64)
            .map(|p| (a.at(&[row, p, 0]) - b.at(&[row, p, 0])).abs())
            .fold(0.0, f64::max);
        assert!(
            diff > 1e-3,
            "row {row} barely reacts to its tokens ({diff})"
        );
    }
}
