use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::checkpoint::{Checkpoint, TrainerState};
use super::config::TrainConfig;
use super::plateau::PlateauTracker;
use crate::data::{
    self, onehot, pad_or_crop, pad_or_crop_labels, round_up_dims, zscore_normalize, AugmentParams, LabelMap,
    SplitPlan, Volume, NUM_CLASSES,
};
use crate::error::{Error, Result};
use crate::losses::training_loss;
use crate::metrics::{aggregate, evaluate_case, ClassMetrics, MetricsReport};
use crate::nn::{Model, ModelConfig};
use crate::rng::{self, tag};
use crate::tensor::{Tape, Tensor};

/// One line of the training history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

/// Raw cases held in memory, addressable by id.
#[derive(Clone, Debug, Default)]
pub struct CaseSet {
    cases: BTreeMap<String, (Volume, LabelMap)>,
}

impl CaseSet {
    pub fn new(cases: Vec<(Volume, LabelMap)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (v, l) in cases {
            l.check_pairs_with(&v)?;
            l.check_classes(NUM_CLASSES)?;
            let id = v.id.clone();
            if map.insert(id.clone(), (v, l)).is_some() {
                return Err(Error::Data(format!("duplicate case id {id:?}")));
            }
        }
        Ok(Self { cases: map })
    }

    pub fn load(manifest: &data::DataManifest) -> Result<Self> {
        Self::new(manifest.cases.iter().map(data::load_case).collect::<Result<Vec<_>>>()?)
    }

    pub fn ids(&self) -> Vec<String> {
        self.cases.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn get(&self, id: &str) -> Result<&(Volume, LabelMap)> {
        self.cases
            .get(id)
            .ok_or_else(|| Error::Data(format!("case {id:?} not found")))
    }

    /// Cases for `ids`, in that order.
    pub fn select(&self, ids: &[String]) -> Result<Vec<(Volume, LabelMap)>> {
        ids.iter().map(|id| self.get(id).cloned()).collect()
    }

    pub fn prepare(&self, ids: &[String], target: [usize; 3]) -> Result<Vec<PreparedCase>> {
        ids.iter()
            .map(|id| {
                let (v, l) = self.get(id)?;
                prepare_case(v, l, target)
            })
            .collect()
    }
}

/// A normalized case padded or cropped to the training grid.
#[derive(Clone, Debug)]
pub struct PreparedCase {
    pub image: Volume,
    pub labels: LabelMap,
}

impl PreparedCase {
    pub fn id(&self) -> &str {
        &self.image.id
    }
}

/// Z-score the image, then pad (with zeros / background) or crop both to `target`.
pub fn prepare_case(v: &Volume, l: &LabelMap, target: [usize; 3]) -> Result<PreparedCase> {
    l.check_pairs_with(v)?;
    let (image, _) = pad_or_crop(&zscore_normalize(v), target)?;
    let (labels, _) = pad_or_crop_labels(l, target)?;
    Ok(PreparedCase { image, labels })
}

/// Model, optimizer and schedule state plus the epoch loop.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub plateau: PlateauTracker,
    pub epochs_done: usize,
    pub history: Vec<EpochRecord>,
    config: TrainConfig,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate(model_config.divisor())?;
        let model = Model::build(model_config, config.seed)?;
        let adam = AdamState::for_params(&model.store.params);
        let plateau = PlateauTracker::new(config.lr, config.plateau_patience, config.plateau_factor, config.min_lr);
        Ok(Self {
            model,
            adam,
            plateau,
            epochs_done: 0,
            history: Vec::new(),
            config,
        })
    }

    /// Continue from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ck: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate(ck.model.config().divisor())?;
        let adam = ck
            .adam
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        let state = ck
            .trainer
            .ok_or_else(|| Error::Checkpoint("checkpoint has no trainer state".into()))?;
        if state.history.len() != state.epochs_done {
            return Err(Error::Checkpoint("history length disagrees with epoch count".into()));
        }
        Ok(Self {
            model: ck.model,
            adam,
            plateau: state.plateau,
            epochs_done: state.epochs_done,
            history: state.history,
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            adam: Some(self.adam.clone()),
            trainer: Some(TrainerState {
                epochs_done: self.epochs_done,
                plateau: self.plateau.clone(),
                history: self.history.clone(),
            }),
        }
    }

    fn augmented(&self, c: &PreparedCase, epoch: usize) -> Result<(Volume, LabelMap)> {
        let a = &self.config.augment;
        if !a.enabled {
            return Ok((c.image.clone(), c.labels.clone()));
        }
        let mut r = rng::stream(self.config.seed, &[tag::AUGMENT, rng::hash_str(c.id()), epoch as u64]);
        AugmentParams::sample(&mut r, a.max_angle_deg, a.flip_prob).apply(&c.image, &c.labels)
    }

    /// One optimizer step on a batch; returns its loss.
    pub fn step(&mut self, batch: &[(Volume, LabelMap)]) -> Result<f64> {
        let images: Vec<Tensor> = batch.iter().map(|(v, _)| v.to_tensor()).collect();
        let targets = batch
            .iter()
            .map(|(_, l)| onehot(l, self.model.config().num_classes))
            .collect::<Result<Vec<_>>>()?;
        let x = Tensor::stack_batch(&images.iter().collect::<Vec<_>>())?;
        let q = Tensor::stack_batch(&targets.iter().collect::<Vec<_>>())?;
        let mut tape = Tape::new();
        let input = tape.constant(x);
        let out = self.model.forward_train(&mut tape, input)?;
        let probs = tape.softmax_channels(out.logits)?;
        let (loss, value) = training_loss(&mut tape, probs, &q, self.config.loss)?;
        if !value.total.is_finite() {
            return Err(Error::Numerical {
                epoch: self.epochs_done,
                lr: self.plateau.current_lr,
                case_id: batch.iter().map(|(v, _)| v.id.as_str()).collect::<Vec<_>>().join(","),
                detail: format!("loss {value:?}"),
            });
        }
        let mut grads = tape.backward(loss)?;
        let mut named = BTreeMap::new();
        for (name, var) in &out.bindings {
            let g = grads
                .take(*var)
                .unwrap_or_else(|| Tensor::zeros(self.model.store.params[name].shape()));
            named.insert(name.clone(), g);
        }
        self.adam.step(&mut self.model.store.params, &named, self.plateau.current_lr)?;
        Ok(value.total)
    }

    /// Mean training loss over one pass of shuffled, augmented batches.
    pub fn train_epoch(&mut self, train: &[PreparedCase]) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::Data("no training cases".into()));
        }
        let epoch = self.epochs_done;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(self.config.seed, &[tag::SHUFFLE, epoch as u64]));
        let mut total = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| self.augmented(&train[i], epoch))
                .collect::<Result<Vec<_>>>()?;
            total += self.step(&batch)? * chunk.len() as f64;
        }
        Ok(total / train.len() as f64)
    }

    /// Mean eval-mode loss over `cases`, one case at a time.
    pub fn validation_loss(&self, cases: &[PreparedCase]) -> Result<f64> {
        let mut total = 0.0;
        for c in cases {
            let mut tape = Tape::new();
            let input = tape.constant(c.image.to_tensor());
            let out = self.model.forward(&mut tape, input)?;
            let probs = tape.softmax_channels(out.logits)?;
            let q = onehot(&c.labels, self.model.config().num_classes)?;
            let (_, value) = training_loss(&mut tape, probs, &q, self.config.loss)?;
            if !value.total.is_finite() {
                return Err(Error::Numerical {
                    epoch: self.epochs_done,
                    lr: self.plateau.current_lr,
                    case_id: c.id().to_string(),
                    detail: format!("validation loss {value:?}"),
                });
            }
            total += value.total;
        }
        Ok(total / cases.len().max(1) as f64)
    }

    /// Train one epoch, validate, and update the schedule. With no validation
    /// cases the training loss stands in for the validation loss. Returns the
    /// record and whether the validation loss improved on the best.
    pub fn run_epoch(&mut self, train: &[PreparedCase], val: &[PreparedCase]) -> Result<(EpochRecord, bool)> {
        let lr = self.plateau.current_lr;
        let train_loss = self.train_epoch(train)?;
        let val_loss = if val.is_empty() {
            train_loss
        } else {
            self.validation_loss(val)?
        };
        let improved = self.plateau.update(val_loss);
        let rec = EpochRecord {
            epoch: self.epochs_done,
            train_loss,
            val_loss,
            lr,
        };
        self.history.push(rec);
        self.epochs_done += 1;
        Ok((rec, improved))
    }

    /// Run epochs until the configured count, calling `on_epoch` after each.
    pub fn fit(
        &mut self,
        train: &[PreparedCase],
        val: &[PreparedCase],
        mut on_epoch: impl FnMut(&Trainer, &EpochRecord, bool) -> Result<()>,
    ) -> Result<()> {
        while self.epochs_done < self.config.epochs {
            let (rec, improved) = self.run_epoch(train, val)?;
            on_epoch(self, &rec, improved)?;
        }
        Ok(())
    }
}

/// Result of training one cross-validation fold.
#[derive(Debug)]
pub struct FoldOutcome {
    pub trainer: Trainer,
    /// Weights from the epoch with the best validation loss.
    pub best: Model,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Train on every fold but `fold`, validating on `fold`.
pub fn train_fold(
    model_config: &ModelConfig,
    config: &TrainConfig,
    cases: &CaseSet,
    split: &SplitPlan,
    fold: usize,
) -> Result<FoldOutcome> {
    let train_ids = split.train_ids(fold)?;
    let val_ids = split.val_ids(fold)?;
    let mut trainer = Trainer::new(model_config.clone(), config.clone())?;
    let train = cases.prepare(&train_ids, config.input_dims)?;
    let val = cases.prepare(&val_ids, config.input_dims)?;
    let mut best = (trainer.model.clone(), 0usize, f64::INFINITY);
    trainer.fit(&train, &val, |t, rec, improved| {
        if improved {
            best = (t.model.clone(), rec.epoch, rec.val_loss);
        }
        Ok(())
    })?;
    Ok(FoldOutcome {
        trainer,
        best: best.0,
        best_epoch: best.1,
        best_val_loss: best.2,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_cases: usize,
    pub val_ids: Vec<String>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Mean foreground metrics of the best model on the validation cases.
    pub metrics: ClassMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldReport>,
    pub mean: ClassMetrics,
    pub mean_best_val_loss: f64,
}

/// Train and score every fold of `split`.
pub fn cross_validate(model_config: &ModelConfig, config: &TrainConfig, cases: &CaseSet, split: &SplitPlan) -> Result<CvReport> {
    let mut folds = Vec::with_capacity(split.num_folds());
    for fold in 0..split.num_folds() {
        let out = train_fold(model_config, config, cases, split, fold)?;
        let val_ids = split.val_ids(fold)?;
        let reports = evaluate(&out.best, &cases.select(&val_ids)?)?;
        folds.push(FoldReport {
            fold,
            train_cases: split.train_ids(fold)?.len(),
            val_ids,
            best_epoch: out.best_epoch,
            best_val_loss: out.best_val_loss,
            metrics: aggregate(&reports),
        });
    }
    let mean = ClassMetrics::mean(&folds.iter().map(|f| f.metrics).collect::<Vec<_>>());
    let mean_best_val_loss = folds.iter().map(|f| f.best_val_loss).sum::<f64>() / folds.len().max(1) as f64;
    Ok(CvReport {
        folds,
        mean,
        mean_best_val_loss,
    })
}

/// Segment a raw volume: normalize, pad to the network's divisor, run the
/// eval-mode forward pass, take the per-voxel argmax and undo the padding.
pub fn predict_labels(model: &Model, v: &Volume) -> Result<LabelMap> {
    let target = round_up_dims(v.dims, model.config().divisor());
    let (padded, placement) = pad_or_crop(&zscore_normalize(v), target)?;
    let logits = model.predict(&padded.to_tensor())?;
    let labels = LabelMap::from_scores(v.id.clone(), &logits, v.spacing)?;
    LabelMap::new(v.id.clone(), v.dims, v.spacing, placement.inverse(&labels.labels, 0))
}

/// Predict and score each case against its ground truth.
pub fn evaluate(model: &Model, cases: &[(Volume, LabelMap)]) -> Result<Vec<MetricsReport>> {
    cases
        .iter()
        .map(|(v, gt)| {
            gt.check_pairs_with(v)?;
            evaluate_case(&predict_labels(model, v)?, gt)
        })
        .collect()
}
