use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, RngState};
use super::early_stop::{run_fit, EarlyStopping, EpochReport, FitOutcome, FitProgress, FitTarget};
use super::loss::dice_loss;
use super::metrics::{per_image_scores, ImageScore, MetricsRecord};
use super::optim::AdadeltaState;
use super::TrainConfig;
use crate::data::{augment, collate, sample_rng, AugmentSpec, Sample};
use crate::error::{Error, Result};
use crate::model::{is_trainable_name, ModelConfig, ModelParams, UNetMobileNetV2};
use crate::seed::derive_seed;
use crate::tensor::{BatchNormMode, Graph, Tensor};

/// Owns the network parameters, optimizer state, and shuffling stream of one
/// training run.
pub struct SegmentationTrainer {
    model: UNetMobileNetV2,
    config: TrainConfig,
    augment: AugmentSpec,
    pub params: ModelParams<f32>,
    pub optimizer: AdadeltaState<f32>,
    rng: ChaCha8Rng,
}

fn check_augment(spec: &AugmentSpec, side: usize) -> Result<()> {
    spec.validate(side)?;
    if spec.output_side(side) != side {
        return Err(Error::Config(format!(
            "augmentation crops {side}-pixel inputs to {}; the model needs {side}",
            spec.output_side(side)
        )));
    }
    Ok(())
}

impl SegmentationTrainer {
    /// Fresh parameters from `train_config.seed`.
    pub fn new(
        model_config: ModelConfig,
        train_config: TrainConfig,
        augment: AugmentSpec,
    ) -> Result<Self> {
        train_config.validate()?;
        let model = UNetMobileNetV2::new(model_config)?;
        check_augment(&augment, model.config().input_side)?;
        let params = model.init_params(train_config.seed);
        let optimizer = AdadeltaState::zeros_like(&params);
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(train_config.seed, &[b"shuffle"]));
        Ok(Self {
            model,
            config: train_config,
            augment,
            params,
            optimizer,
            rng,
        })
    }

    /// Restores parameters, optimizer state, and the shuffling stream.
    pub fn from_checkpoint(ckpt: &Checkpoint, augment: AugmentSpec) -> Result<Self> {
        ckpt.train_config.validate()?;
        let model = UNetMobileNetV2::new(ckpt.model_config.clone())?;
        check_augment(&augment, model.config().input_side)?;
        ckpt.params.check_against(&model.param_specs())?;
        ckpt.optimizer.check_against(&ckpt.params)?;
        Ok(Self {
            model,
            config: ckpt.train_config.clone(),
            augment,
            params: ckpt.params.clone(),
            optimizer: ckpt.optimizer.clone(),
            rng: ckpt.rng.to_rng(),
        })
    }

    pub fn model(&self) -> &UNetMobileNetV2 {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn augment_spec(&self) -> &AugmentSpec {
        &self.augment
    }

    pub fn checkpoint(&self, epoch: usize, early: &EarlyStopping) -> Checkpoint {
        self.checkpoint_with(self.params.clone(), epoch, early)
    }

    /// Like [`checkpoint`](Self::checkpoint) but with other parameters.
    pub fn checkpoint_with(
        &self,
        params: ModelParams<f32>,
        epoch: usize,
        early: &EarlyStopping,
    ) -> Checkpoint {
        Checkpoint {
            model_config: self.model.config().clone(),
            train_config: self.config.clone(),
            params,
            optimizer: self.optimizer.clone(),
            epoch,
            best_val_loss: early.best_val_loss,
            best_epoch: early.best_epoch,
            epochs_since_improvement: early.epochs_since_improvement,
            rng: RngState::of(&self.rng),
        }
    }

    /// One pass over `samples` in shuffled minibatches, the last one possibly
    /// short. Returns the mean batch loss and per-image scores of the
    /// train-mode predictions on the augmented inputs.
    pub fn train_epoch(
        &mut self,
        samples: &[Sample],
        epoch: usize,
    ) -> Result<(f64, MetricsRecord)> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("training split is empty".into()));
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut self.rng);
        let hp = self.config.adadelta();
        let mut batch_losses = Vec::new();
        let mut scores: Vec<ImageScore> = Vec::with_capacity(samples.len());
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    let s = &samples[i];
                    augment(
                        s,
                        &self.augment,
                        &mut sample_rng(self.augment.seed, &s.id, epoch),
                    )
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&Sample> = batch.iter().collect();
            let (images, masks) = collate(&refs)?;

            let mut graph = Graph::new();
            let x = graph.constant(images);
            let out = self
                .model
                .forward(&mut graph, &mut self.params, x, BatchNormMode::Train)?;
            let target = graph.constant(masks);
            let loss = dice_loss(&mut graph, out.probs, target, self.config.dice_smooth)?;
            let loss_value = f64::from(graph.value(loss).data()[0]);
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    loss: loss_value,
                    epoch,
                });
            }
            graph.backward(loss)?;
            let grads: BTreeMap<String, Tensor<f32>> = out
                .param_vars
                .iter()
                .filter(|(name, _)| is_trainable_name(name))
                .map(|(name, &var)| (name.clone(), graph.grad_or_zeros(var)))
                .collect();
            self.optimizer.step(&mut self.params, &grads, hp)?;

            scores.extend(per_image_scores(
                graph.value(out.probs),
                graph.value(target),
                self.config.threshold,
                self.config.dice_smooth,
            )?);
            batch_losses.push(loss_value);
        }
        let mean = batch_losses.iter().sum::<f64>() / batch_losses.len() as f64;
        let mut record = MetricsRecord::from_scores(&scores, epoch, "train");
        record.loss = mean;
        Ok((mean, record))
    }

    /// Eval-mode probabilities for `samples`, batched by the configured
    /// batch size.
    pub fn predict(&self, samples: &[&Sample]) -> Result<Tensor<f32>> {
        predict_batched(&self.model, &self.params, samples, self.config.batch_size)
    }

    /// Unaugmented eval-mode scores of `samples`, averaged per image.
    pub fn evaluate(
        &self,
        samples: &[Sample],
        epoch: usize,
        split_name: &str,
    ) -> Result<MetricsRecord> {
        evaluate_with(
            &self.model,
            &self.params,
            &self.config,
            samples,
            epoch,
            split_name,
        )
    }

    /// A fit position with nothing trained yet.
    pub fn initial_progress(&self) -> FitProgress<ModelParams<f32>> {
        FitProgress {
            epoch: 0,
            early: EarlyStopping::new(self.config.early_stop_patience),
            best: self.params.clone(),
        }
    }

    /// Runs the early-stopped loop from `progress`, restores the best
    /// parameters, and scores the test split with them.
    pub fn fit<C>(
        &mut self,
        train: &[Sample],
        val: &[Sample],
        test: &[Sample],
        progress: FitProgress<ModelParams<f32>>,
        on_epoch: C,
    ) -> Result<FitResult>
    where
        C: FnMut(&FitSession<'_>, &EpochReport, &EarlyStopping, &ModelParams<f32>) -> Result<()>,
    {
        for (name, split) in [("train", train), ("val", val), ("test", test)] {
            if split.is_empty() {
                return Err(Error::InvalidArgument(format!("{name} split is empty")));
            }
        }
        let max_epochs = self.config.max_epochs;
        let mut session = FitSession {
            trainer: self,
            train,
            val,
            train_history: Vec::new(),
        };
        let outcome = run_fit(&mut session, max_epochs, progress, on_epoch)?;
        let train_history = session.train_history;
        let test = self.evaluate(test, outcome.best_epoch, "test")?;
        Ok(FitResult {
            outcome,
            train_history,
            test,
        })
    }
}

pub(crate) fn predict_batched(
    model: &UNetMobileNetV2,
    params: &ModelParams<f32>,
    samples: &[&Sample],
    batch_size: usize,
) -> Result<Tensor<f32>> {
    let side = model.config().input_side;
    let mut data = Vec::with_capacity(samples.len() * side * side);
    for chunk in samples.chunks(batch_size.max(1)) {
        let (images, _) = collate(chunk)?;
        data.extend_from_slice(model.predict(params, &images)?.data());
    }
    Tensor::new(vec![samples.len(), 1, side, side], data)
}

pub(crate) fn evaluate_with(
    model: &UNetMobileNetV2,
    params: &ModelParams<f32>,
    config: &TrainConfig,
    samples: &[Sample],
    epoch: usize,
    split_name: &str,
) -> Result<MetricsRecord> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{split_name} split is empty"
        )));
    }
    let mut scores = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(config.batch_size) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (images, masks) = collate(&refs)?;
        let probs = model.predict(params, &images)?;
        scores.extend(per_image_scores(
            &probs,
            &masks,
            config.threshold,
            config.dice_smooth,
        )?);
    }
    Ok(MetricsRecord::from_scores(&scores, epoch, split_name))
}

/// A trainer bound to its train and validation splits for [`run_fit`].
pub struct FitSession<'a> {
    trainer: &'a mut SegmentationTrainer,
    train: &'a [Sample],
    val: &'a [Sample],
    train_history: Vec<MetricsRecord>,
}

impl FitSession<'_> {
    pub fn trainer(&self) -> &SegmentationTrainer {
        self.trainer
    }

    /// Train-split record of the most recent epoch.
    pub fn last_train_record(&self) -> Option<&MetricsRecord> {
        self.train_history.last()
    }
}

impl FitTarget for FitSession<'_> {
    type Snapshot = ModelParams<f32>;

    fn train_epoch(&mut self, epoch: usize) -> Result<f64> {
        let (loss, record) = self.trainer.train_epoch(self.train, epoch)?;
        self.train_history.push(record);
        Ok(loss)
    }

    fn validate(&mut self, epoch: usize) -> Result<MetricsRecord> {
        self.trainer.evaluate(self.val, epoch, "val")
    }

    fn snapshot(&self) -> ModelParams<f32> {
        self.trainer.params.clone()
    }

    fn restore(&mut self, snapshot: ModelParams<f32>) {
        self.trainer.params = snapshot;
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub outcome: FitOutcome,
    /// One train-split record per epoch.
    pub train_history: Vec<MetricsRecord>,
    /// Test-split scores of the restored best parameters.
    pub test: MetricsRecord,
}
