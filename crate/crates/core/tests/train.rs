use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segkit::data::{synthetic_circles, AugmentSpec, Sample};
use segkit::model::{ModelConfig, ModelParams};
use segkit::train::{
    adadelta_update, binarize, dice_coefficient, dice_loss, iou, run_fit, AdadeltaParams,
    AdadeltaState, Checkpoint, EarlyStopping, FitProgress, FitTarget, MetricsRecord,
    SegmentationTrainer, TrainConfig,
};
use segkit::{Error, Graph, Result, Tensor};

fn binary(n: usize, p: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n)
        .map(|_| if rng.random_bool(p) { 1.0 } else { 0.0 })
        .collect()
}

fn t(v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64_slice(&[v.len()], v).unwrap()
}

/// Counts pixels one at a time on 0/1 integer masks.
fn count_oracle(pred: &[f64], target: &[f64]) -> (u32, u32, u32) {
    let (mut both, mut only_p, mut only_t) = (0, 0, 0);
    for (&p, &g) in pred.iter().zip(target) {
        match (p == 1.0, g == 1.0) {
            (true, true) => both += 1,
            (true, false) => only_p += 1,
            (false, true) => only_t += 1,
            _ => {}
        }
    }
    (both, only_p, only_t)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn dice_and_iou_identity(seed in any::<u64>(), p in 0.05f64..0.95, q in 0.05f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (binary(256, p, &mut rng), binary(256, q, &mut rng));
        let (d, j) = (dice_coefficient(&t(&a), &t(&b), 0.0).unwrap(), iou(&t(&a), &t(&b), 0.0).unwrap());
        prop_assume!(a.contains(&1.0) || b.contains(&1.0));
        prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12, "{} vs {}", d, j);
    }

    #[test]
    fn fixing_one_pixel_never_hurts(seed in any::<u64>(), p in 0.05f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = binary(64, 0.5, &mut rng);
        let pred = binary(64, p, &mut rng);
        let wrong: Vec<usize> = (0..64).filter(|&i| pred[i] != target[i]).collect();
        prop_assume!(!wrong.is_empty());
        let mut fixed = pred.clone();
        let i = wrong[rng.random_range(0..wrong.len())];
        fixed[i] = target[i];
        prop_assume!(fixed.contains(&1.0) || target.contains(&1.0));
        prop_assert!(dice_coefficient(&t(&fixed), &t(&target), 0.0).unwrap() >= dice_coefficient(&t(&pred), &t(&target), 0.0).unwrap());
        prop_assert!(iou(&t(&fixed), &t(&target), 0.0).unwrap() >= iou(&t(&pred), &t(&target), 0.0).unwrap());
    }

    #[test]
    fn loss_is_one_minus_dice(seed in any::<u64>(), smooth in prop::sample::select(vec![0.0, 1e-6, 1.0])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred: Vec<f64> = (0..32).map(|_| rng.random_range(0.01..0.99)).collect();
        let target = binary(32, 0.5, &mut rng);
        let mut g = Graph::new();
        let pv = g.param(t(&pred));
        let tv = g.constant(t(&target));
        let loss = dice_loss(&mut g, pv, tv, smooth).unwrap();
        let l = g.value(loss).data()[0];
        prop_assert!((l + dice_coefficient(&t(&pred), &t(&target), smooth).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn binarize_is_strict_and_idempotent(values in prop::collection::vec(0.0f64..=1.0, 1..64), th in 0.01f64..0.99) {
        let b = binarize(&t(&values), th);
        for (v, o) in values.iter().zip(b.data()) {
            prop_assert_eq!(*o, if *v > th { 1.0 } else { 0.0 });
        }
        prop_assert_eq!(binarize(&b, th), b);
    }

    #[test]
    fn adadelta_accumulators_stay_nonnegative(grads in prop::collection::vec(-1e3f64..1e3, 1..50)) {
        let hp = AdadeltaParams { lr: 1.0, rho: 0.95, eps: 1e-6 };
        let (mut x, mut eg, mut ed) = ([0.0f64], [0.0], [0.0]);
        for g in grads {
            adadelta_update(&mut x, &[g], &mut eg, &mut ed, hp);
            prop_assert!(eg[0] >= 0.0 && ed[0] >= 0.0);
        }
    }

    #[test]
    fn stop_epoch_is_best_plus_patience(
        losses in prop::collection::vec(0.0f64..1.0, 1..40), patience in 1..8usize,
    ) {
        let (out, _) = scripted_fit(&losses, patience);
        if out.stopped_early {
            prop_assert_eq!(out.last_epoch, out.best_epoch + patience);
        } else {
            prop_assert_eq!(out.last_epoch, losses.len());
        }
    }
}

#[test]
fn metrics_match_pixel_counting_on_1000_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    for _ in 0..1000 {
        let p = rng.random_range(0.0..1.0);
        let a = binary(256, p, &mut rng);
        let b = binary(256, rng.random_range(0.0..1.0), &mut rng);
        let (both, op, ot) = count_oracle(&a, &b);
        let smooth = 1e-6;
        let dice_want = (2.0 * f64::from(both) + smooth) / (f64::from(2 * both + op + ot) + smooth);
        let iou_want = (f64::from(both) + smooth) / (f64::from(both + op + ot) + smooth);
        let shape = [1, 1, 16, 16];
        let (ta, tb): (Tensor<f64>, Tensor<f64>) = (
            Tensor::from_f64_slice(&shape, &a).unwrap(),
            Tensor::from_f64_slice(&shape, &b).unwrap(),
        );
        assert!((dice_coefficient(&ta, &tb, smooth).unwrap() - dice_want).abs() < 1e-6);
        assert!((iou(&ta, &tb, smooth).unwrap() - iou_want).abs() < 1e-6);
    }
}

/// The recurrence written out for one scalar.
fn adadelta_oracle(x: f64, grads: &[f64], lr: f64, rho: f64, eps: f64) -> f64 {
    let (mut x, mut eg2, mut edx2) = (x, 0.0, 0.0);
    for &g in grads {
        eg2 = rho * eg2 + (1.0 - rho) * g * g;
        let dx = -(edx2 + eps).sqrt() / (eg2 + eps).sqrt() * g;
        edx2 = rho * edx2 + (1.0 - rho) * dx * dx;
        x += lr * dx;
    }
    x
}

#[test]
fn adadelta_matches_hand_recurrence() {
    let hp = AdadeltaParams {
        lr: 1e-4,
        rho: 0.95,
        eps: 1e-6,
    };
    let (mut x, mut eg, mut ed) = ([0.0f64], [0.0], [0.0]);
    adadelta_update(&mut x, &[1.0], &mut eg, &mut ed, hp);
    assert!((eg[0] - 0.05).abs() < 1e-15);
    let dx = -(1e-6f64).sqrt() / 0.050001f64.sqrt();
    assert!((dx - -4.4721e-3).abs() < 1e-7);
    assert!((x[0] - 1e-4 * dx).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let grads: Vec<f64> = (0..200).map(|_| rng.random_range(-2.0..2.0)).collect();
    let (mut x, mut eg, mut ed) = ([0.7f64], [0.0], [0.0]);
    for &g in &grads {
        adadelta_update(&mut x, &[g], &mut eg, &mut ed, hp);
    }
    assert!((x[0] - adadelta_oracle(0.7, &grads, 1e-4, 0.95, 1e-6)).abs() < 1e-12);

    // zero gradients: parameter fixed, accumulators decay by rho
    let (mut x, mut eg, mut ed) = ([1.5f64], [0.4], [0.2]);
    adadelta_update(&mut x, &[0.0], &mut eg, &mut ed, hp);
    assert_eq!(x[0], 1.5);
    assert!((eg[0] - 0.38).abs() < 1e-15 && (ed[0] - 0.19).abs() < 1e-15);
}

#[test]
fn adadelta_descends_on_a_parabola() {
    let hp = AdadeltaParams {
        lr: 1e-4,
        rho: 0.95,
        eps: 1e-6,
    };
    let (mut x, mut eg, mut ed) = ([5.0f64], [0.0], [0.0]);
    let mut prev = x[0].abs();
    for step in 0..10_000 {
        let g = 2.0 * x[0];
        adadelta_update(&mut x, &[g], &mut eg, &mut ed, hp);
        assert!(x[0].abs() < prev, "step {step}: |x| = {}", x[0].abs());
        prev = x[0].abs();
    }
}

#[test]
fn optimizer_rejects_non_finite_gradients_by_name() {
    let mut params = ModelParams::<f32>::new();
    params.insert("a.weight", Tensor::ones(&[2]));
    params.insert("b.weight", Tensor::ones(&[2]));
    let mut state = AdadeltaState::zeros_like(&params);
    let grads = [
        ("a.weight".to_string(), Tensor::ones(&[2])),
        (
            "b.weight".to_string(),
            Tensor::new(vec![2], vec![1.0, f32::NAN]).unwrap(),
        ),
    ]
    .into_iter()
    .collect();
    let before = params.clone();
    let hp = AdadeltaParams {
        lr: 1.0,
        rho: 0.95,
        eps: 1e-6,
    };
    match state.step(&mut params, &grads, hp) {
        Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "b.weight"),
        other => panic!("expected a non-finite gradient error, got {other:?}"),
    }
    assert_eq!(params, before);
}

struct Scripted {
    losses: Vec<f64>,
    state: usize,
}

impl FitTarget for Scripted {
    type Snapshot = usize;

    fn train_epoch(&mut self, epoch: usize) -> Result<f64> {
        self.state = epoch;
        Ok(0.0)
    }

    fn validate(&mut self, epoch: usize) -> Result<MetricsRecord> {
        Ok(MetricsRecord {
            dice: 0.0,
            iou: 0.0,
            loss: self.losses[epoch - 1],
            epoch,
            split_name: "val".into(),
        })
    }

    fn snapshot(&self) -> usize {
        self.state
    }

    fn restore(&mut self, snapshot: usize) {
        self.state = snapshot;
    }
}

fn scripted_fit(losses: &[f64], patience: usize) -> (segkit::train::FitOutcome, usize) {
    let mut target = Scripted {
        losses: losses.to_vec(),
        state: 0,
    };
    let progress = FitProgress {
        epoch: 0,
        early: EarlyStopping::new(patience),
        best: 0,
    };
    let out = run_fit(&mut target, losses.len(), progress, |_, _, _, _| Ok(())).unwrap();
    (out, target.state)
}

/// Patience counter written out by hand: returns (stop epoch, best epoch).
fn hand_counter(losses: &[f64], patience: usize) -> (usize, usize) {
    let (mut best, mut best_epoch, mut since) = (f64::INFINITY, 0, 0);
    for (i, &l) in losses.iter().enumerate() {
        if l < best {
            best = l;
            best_epoch = i + 1;
            since = 0;
        } else {
            since += 1;
            if since == patience {
                return (i + 1, best_epoch);
            }
        }
    }
    (losses.len(), best_epoch)
}

#[test]
fn early_stopping_matches_hand_counter_on_500_sequences() {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    for _ in 0..500 {
        let n = rng.random_range(1..60);
        let patience = rng.random_range(1..12);
        // coarse values make ties common
        let losses: Vec<f64> = (0..n)
            .map(|_| f64::from(rng.random_range(0..20u8)) / 10.0)
            .collect();
        let (out, restored) = scripted_fit(&losses, patience);
        let (stop, best) = hand_counter(&losses, patience);
        assert_eq!(out.last_epoch, stop, "{losses:?} patience {patience}");
        assert_eq!(out.best_epoch, best);
        assert_eq!(restored, best);
    }
}

fn toy_trainer(lr: f64) -> (SegmentationTrainer, Vec<Sample>) {
    let cfg = TrainConfig {
        learning_rate: lr,
        batch_size: 2,
        max_epochs: 4,
        ..TrainConfig::default()
    };
    let trainer =
        SegmentationTrainer::new(ModelConfig::scaled(32, 0.25), cfg, AugmentSpec::default())
            .unwrap();
    (trainer, synthetic_circles(6, 32, 8))
}

#[test]
fn checkpoint_round_trip_then_resume_matches_straight_run() {
    let (mut straight, samples) = toy_trainer(1.0);
    let (train, val) = samples.split_at(4);
    let early = EarlyStopping::new(10);
    let mut straight_losses = Vec::new();
    for epoch in 1..=4 {
        straight_losses.push(straight.train_epoch(train, epoch).unwrap().0);
    }

    let (mut first, _) = toy_trainer(1.0);
    let mut losses = Vec::new();
    for epoch in 1..=2 {
        losses.push(first.train_epoch(train, epoch).unwrap().0);
    }
    let bytes = first.checkpoint(2, &early).to_bytes().unwrap();
    let loaded = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(loaded.to_bytes().unwrap(), bytes);
    let mut resumed =
        SegmentationTrainer::from_checkpoint(&loaded, AugmentSpec::default()).unwrap();
    for epoch in 3..=4 {
        losses.push(resumed.train_epoch(train, epoch).unwrap().0);
    }
    assert_eq!(losses, straight_losses);
    assert_eq!(resumed.params, straight.params);
    assert_eq!(resumed.optimizer, straight.optimizer);
    assert_eq!(
        resumed.evaluate(val, 4, "val").unwrap(),
        straight.evaluate(val, 4, "val").unwrap()
    );
}

#[test]
fn evaluation_reproduces_recorded_best_loss() {
    let (mut trainer, samples) = toy_trainer(1.0);
    let (train, rest) = samples.split_at(4);
    let (val, test) = rest.split_at(1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");
    let result = trainer
        .fit(
            train,
            val,
            test,
            trainer.initial_progress(),
            |session, report, early, best| {
                if report.improved {
                    session
                        .trainer()
                        .checkpoint_with(best.clone(), report.epoch, early)
                        .save(&path)?;
                }
                Ok(())
            },
        )
        .unwrap();
    let ckpt = Checkpoint::load(&path).unwrap();
    assert_eq!(ckpt.best_val_loss, result.outcome.best_val_loss);
    let again = SegmentationTrainer::from_checkpoint(&ckpt, AugmentSpec::identity()).unwrap();
    let loss = again.evaluate(val, ckpt.epoch, "val").unwrap().loss;
    assert!((loss - ckpt.best_val_loss.unwrap()).abs() < 1e-6);
    assert_eq!(trainer.params, ckpt.params);
}

/// Per-image binarized Dice/IoU and soft loss, counted in flat loops.
fn evaluate_oracle(
    probs: &[f32],
    masks: &[f32],
    plane: usize,
    threshold: f64,
    smooth: f64,
) -> (f64, f64, f64) {
    let n = probs.len() / plane;
    let (mut dice, mut jac, mut loss) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (mut inter, mut sp, mut st, mut soft_inter, mut soft_p) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for k in i * plane..(i + 1) * plane {
            let p = f64::from(probs[k]);
            let b = if p > threshold { 1.0 } else { 0.0 };
            let m = f64::from(masks[k]);
            inter += b * m;
            sp += b;
            st += m;
            soft_inter += p * m;
            soft_p += p;
        }
        dice += (2.0 * inter + smooth) / (sp + st + smooth);
        jac += (inter + smooth) / (sp + st - inter + smooth);
        loss += 1.0 - (2.0 * soft_inter + smooth) / (soft_p + st + smooth);
    }
    (dice / n as f64, jac / n as f64, loss / n as f64)
}

#[test]
fn evaluate_is_a_per_image_mean() {
    let (mut trainer, _) = toy_trainer(1.0);
    let samples = synthetic_circles(14, 32, 21);
    trainer.train_epoch(&samples[..4], 1).unwrap();
    let split = &samples[4..];
    let record = trainer.evaluate(split, 1, "test").unwrap();
    let refs: Vec<&Sample> = split.iter().collect();
    let probs = trainer.predict(&refs).unwrap();
    let masks: Vec<f32> = split.iter().flat_map(|s| s.mask.data().to_vec()).collect();
    let (d, j, l) = evaluate_oracle(probs.data(), &masks, 32 * 32, 0.5, 1e-6);
    assert!((record.dice - d).abs() < 1e-6);
    assert!((record.iou - j).abs() < 1e-6);
    assert!((record.loss - l).abs() < 1e-6);
}

#[test]
fn constant_outputs_score_as_expected() {
    let (mut trainer, _) = toy_trainer(1.0);
    let samples = synthetic_circles(3, 32, 2);
    for (bias, want) in [(-30.0f32, 0.0), (30.0, 1.0)] {
        for (name, tensor) in trainer.params.iter_mut() {
            if name == "head.weight" {
                tensor.data_mut().fill(0.0);
            } else if name == "head.bias" {
                tensor.data_mut().fill(bias);
            }
        }
        let record = trainer.evaluate(&samples, 0, "test").unwrap();
        if want == 0.0 {
            assert!(record.dice < 1e-6 && record.iou < 1e-6, "{record:?}");
        } else {
            let full: Vec<Sample> = samples
                .iter()
                .map(|s| {
                    Sample::new(s.id.clone(), s.image.clone(), Tensor::ones(&[1, 32, 32])).unwrap()
                })
                .collect();
            let record = trainer.evaluate(&full, 0, "test").unwrap();
            assert_eq!((record.dice, record.iou), (1.0, 1.0));
        }
    }
}

#[test]
fn training_loss_drops_on_circles() {
    let cfg = TrainConfig {
        batch_size: 4,
        ..TrainConfig::default()
    };
    let mut trainer =
        SegmentationTrainer::new(ModelConfig::scaled(64, 0.25), cfg, AugmentSpec::identity())
            .unwrap();
    let samples = synthetic_circles(4, 64, 7);
    let first = trainer.train_epoch(&samples, 1).unwrap().0;
    let mut last = first;
    for epoch in 2..=30 {
        last = trainer.train_epoch(&samples, epoch).unwrap().0;
    }
    assert!(last < first, "epoch 30 loss {last} vs epoch 1 {first}");
}

#[test]
fn same_seed_same_loss_sequence() {
    let run = || {
        let (mut trainer, samples) = toy_trainer(1.0);
        (1..=3)
            .map(|e| trainer.train_epoch(&samples, e).unwrap().0)
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
