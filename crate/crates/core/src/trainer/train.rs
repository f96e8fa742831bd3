use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::ib::{soft_assign_all, IbReport, LabelTerm};
use crate::mask::UpdateScope;
use crate::numerics::{Rng, Tape, Tensor};
use crate::transformer::{MaskMode, Model, UpdateContext};

use super::checkpoint::{Checkpoint, EpochLog};
use super::config::TrainConfig;
use super::optim::OptimState;
use super::stats::{
    accuracy, flatten_images, forward_pass, ib_report, input_clusters, mean_loss, refresh_states, stats_indices, Phase,
};

const SHUFFLE_STREAM: u64 = 2;

/// Epoch-by-epoch training over a fixed dataset. All state that affects the
/// trajectory lives in the [`Checkpoint`], so a run can stop and resume
/// anywhere between epochs.
pub struct Trainer<'a> {
    ckpt: Checkpoint,
    train: &'a Dataset,
    test: Option<&'a Dataset>,
    phi_train: Tensor<f64>,
    phi_test: Option<Tensor<f64>>,
    stats_idx: Vec<usize>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, train: &'a Dataset, test: Option<&'a Dataset>) -> Result<Self> {
        config.validate()?;
        train.check_classes()?;
        let spec = config.model_spec(train)?;
        let model = Model::init(&spec, config.seed)?;
        let stats_idx = stats_indices(train.len(), config.kmeans_samples, config.seed);
        let flat = flatten_images(&train.images)?;
        let input_centroids = input_clusters(&flat.select0(&stats_idx), train.classes, config.seed)?;
        let ckpt = Checkpoint {
            optim: OptimState::new(config.optimizer, &model.params),
            states: vec![None; model.layout().len()],
            rng: Rng::with_stream(config.seed, SHUFFLE_STREAM).state(),
            config,
            model,
            input_centroids,
            epoch: 0,
            history: Vec::new(),
            reports: Vec::new(),
        };
        Self::resume(ckpt, train, test)
    }

    /// Continues from `ckpt`; `train` must be the dataset it was trained on.
    pub fn resume(ckpt: Checkpoint, train: &'a Dataset, test: Option<&'a Dataset>) -> Result<Self> {
        ckpt.config.validate()?;
        train.check_classes()?;
        if ckpt.config.model_spec(train)? != ckpt.model.spec {
            return Err(Error::invalid("dataset does not match the checkpoint's model"));
        }
        if let Some(t) = test {
            if (t.height(), t.width(), t.classes) != (train.height(), train.width(), train.classes) {
                return Err(Error::invalid("test set does not match the training set"));
            }
        }
        let phi_train = soft_assign_all(&flatten_images(&train.images)?, &ckpt.input_centroids)?;
        let phi_test = test
            .map(|t| soft_assign_all(&flatten_images(&t.images)?, &ckpt.input_centroids))
            .transpose()?;
        let stats_idx = stats_indices(train.len(), ckpt.config.kmeans_samples, ckpt.config.seed);
        Ok(Trainer {
            ckpt,
            train,
            test,
            phi_train,
            phi_test,
            stats_idx,
        })
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.ckpt
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.ckpt
    }

    pub fn finished(&self) -> bool {
        self.ckpt.epoch >= self.ckpt.config.epochs
    }

    /// Trains until the configured epoch count.
    pub fn run(&mut self) -> Result<()> {
        while !self.finished() {
            self.run_epoch()?;
        }
        Ok(())
    }

    fn stats_set(&self) -> (Tensor<f64>, Tensor<f64>, Vec<usize>) {
        let idx = &self.stats_idx;
        (
            self.train.images.select0(idx),
            self.phi_train.select0(idx),
            idx.iter().map(|&i| self.train.labels[i]).collect(),
        )
    }

    /// Runs one epoch and returns its log.
    pub fn run_epoch(&mut self) -> Result<&EpochLog> {
        let cfg = self.ckpt.config.clone();
        let epoch = self.ckpt.epoch + 1;
        let merging = epoch > cfg.t_warm;
        let classes = self.train.classes;
        let (stats_images, stats_phi, stats_labels) = self.stats_set();

        if merging && epoch == cfg.t_warm + 1 {
            // No statistics exist for merged tokens yet.
            let pass = forward_pass(
                &self.ckpt.model,
                &stats_images,
                &stats_phi,
                Some(&stats_labels),
                &self.ckpt.states,
                Phase::Bootstrap,
            )?;
            self.ckpt.states = refresh_states(
                &pass.features,
                &stats_labels,
                classes,
                &self.ckpt.input_centroids,
                cfg.t_warm,
                cfg.seed,
            )?;
        }

        let lr = cfg.lr_at(epoch - 1);
        let mut rng = Rng::from_state(self.ckpt.rng);
        let order = rng.permutation(self.train.len());
        self.ckpt.rng = rng.state();
        let (mut loss_sum, mut hits) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let (loss, acc) = self.step(batch, merging, lr, epoch)?;
            loss_sum += loss * batch.len() as f64;
            hits += acc * batch.len() as f64;
        }

        let phase = if merging { Phase::Merge } else { Phase::Off };
        let pass = forward_pass(
            &self.ckpt.model,
            &stats_images,
            &stats_phi,
            Some(&stats_labels),
            &self.ckpt.states,
            phase,
        )?;
        let states = refresh_states(
            &pass.features,
            &stats_labels,
            classes,
            &self.ckpt.input_centroids,
            epoch,
            cfg.seed,
        )?;
        let report = ib_report(epoch, "train", &pass.features, &stats_phi, &stats_labels, &states)?;
        self.ckpt.states = states;

        let (test_loss, test_accuracy) = match (self.test, &self.phi_test) {
            (Some(t), Some(phi)) => {
                let pass = forward_pass(&self.ckpt.model, &t.images, phi, None, &self.ckpt.states, phase)?;
                (
                    Some(mean_loss(&pass.logits, &t.labels)),
                    Some(accuracy(&pass.logits, &t.labels)),
                )
            }
            _ => (None, None),
        };
        let n = self.train.len() as f64;
        self.ckpt.history.push(EpochLog {
            epoch,
            lr,
            merging,
            train_loss: loss_sum / n,
            train_accuracy: hits / n,
            test_loss,
            test_accuracy,
        });
        self.ckpt.reports.push(report);
        self.ckpt.epoch = epoch;
        Ok(self.ckpt.history.last().expect("just pushed"))
    }

    /// One optimizer step; returns the batch loss and accuracy.
    fn step(&mut self, batch: &[usize], merging: bool, lr: f64, epoch: usize) -> Result<(f64, f64)> {
        let (images, labels) = self.train.batch(batch);
        let images = images.cast::<f32>();
        let phi = self.phi_train.select0(batch);
        let model = &self.ckpt.model;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let mode = if merging {
            MaskMode::Update(UpdateContext {
                states: &self.ckpt.states,
                phi_input: &phi,
                labels: LabelTerm::Observed(&labels),
                scope: UpdateScope::Batch,
            })
        } else {
            MaskMode::Off
        };
        let trace = model.forward(&mut tape, &bound, &images, &mode)?;
        let loss = tape.cross_entropy(trace.logits, &labels)?;
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::Diverged { epoch, loss: value });
        }
        let acc = accuracy(tape.value(trace.logits), &labels);
        let mut grads = tape.backward(loss)?;
        let grads: Vec<Option<Tensor<f32>>> = bound.vars().iter().map(|&v| grads.take(v)).collect();
        let cfg = &self.ckpt.config;
        self.ckpt.optim.step(cfg, lr, &mut self.ckpt.model.params, &grads);
        Ok((value, acc))
    }
}

/// Trains from scratch to `config.epochs`.
pub fn train(config: TrainConfig, train: &Dataset, test: Option<&Dataset>) -> Result<Checkpoint> {
    let mut t = Trainer::new(config, train, test)?;
    t.run()?;
    Ok(t.into_checkpoint())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    /// Absent before the first finished epoch, when no cluster state exists.
    pub report: Option<IbReport>,
    /// `[n, classes]`
    pub logits: Tensor<f32>,
}

/// Accuracy, loss and IB terms of `ckpt` on `data`. Masks use the
/// class-prior update, so labels are only read for the metrics.
pub fn evaluate(ckpt: &Checkpoint, data: &Dataset, name: &str) -> Result<Evaluation> {
    let spec = &ckpt.model.spec;
    if (data.height(), data.width()) != (spec.image_height, spec.image_width) || data.classes > spec.classes {
        return Err(Error::invalid("dataset does not match the checkpoint's model"));
    }
    let phi = soft_assign_all(&flatten_images(&data.images)?, &ckpt.input_centroids)?;
    let phase = if ckpt.epoch > ckpt.config.t_warm {
        Phase::Merge
    } else {
        Phase::Off
    };
    let pass = forward_pass(&ckpt.model, &data.images, &phi, None, &ckpt.states, phase)?;
    let report = if ckpt.states.iter().all(Option::is_some) {
        Some(ib_report(
            ckpt.epoch,
            name,
            &pass.features,
            &phi,
            &data.labels,
            &ckpt.states,
        )?)
    } else {
        None
    };
    Ok(Evaluation {
        accuracy: accuracy(&pass.logits, &data.labels),
        loss: mean_loss(&pass.logits, &data.labels),
        report,
        logits: pass.logits,
    })
}

/// Merge masks `[B, N, P]` per block for `images`, built as in [`evaluate`].
/// `None` for blocks without a mask, and for every block before merging starts.
pub fn block_masks(ckpt: &Checkpoint, images: &Tensor<f64>) -> Result<Vec<Option<Tensor<f64>>>> {
    let phi = soft_assign_all(&flatten_images(images)?, &ckpt.input_centroids)?;
    let mode = if ckpt.epoch > ckpt.config.t_warm {
        MaskMode::Update(UpdateContext {
            states: &ckpt.states,
            phi_input: &phi,
            labels: LabelTerm::Prior,
            scope: UpdateScope::PerSample,
        })
    } else {
        MaskMode::Off
    };
    let (tape, trace) = ckpt.model.evaluate(&images.cast::<f32>(), &mode)?;
    Ok(trace
        .blocks
        .iter()
        .map(|b| b.mask.map(|m| tape.value(m).cast::<f64>()))
        .collect())
}
