//! Mini-batch training of the regularized objective, plus evaluation.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{Dataset, PerturbConfig, SemiSplit};
use crate::error::{Error, Result};
use crate::losses::{
    argmax, disjoint_pairs, ramp_down_over, ramp_up_over, total_loss, AuxKind, LossInputs, LossWeights,
};
use crate::model::{Model, PassMode, GAP_TAP};
use crate::optim::{AdamConfig, AdamState, StepOutcome};
use crate::rng::Rng;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Random-stream labels for [`Rng::derive`]: `[EPOCH_STREAM, epoch]` orders
/// an epoch; `[STEP_STREAM, epoch, step, role]` drives one step, with roles
/// [`ROLE_STUDENT`], [`ROLE_TEACHER`] and [`ROLE_PAIRS`].
pub const EPOCH_STREAM: u64 = 1;
pub const STEP_STREAM: u64 = 2;
pub const ROLE_STUDENT: u64 = 0;
pub const ROLE_TEACHER: u64 = 1;
pub const ROLE_PAIRS: u64 = 2;

/// Stream used for initializing model parameters from a run seed.
pub const INIT_STREAM: u64 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_learning_rate: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    pub ramp_up_epochs: usize,
    pub ramp_down_epochs: usize,
    pub loss: LossWeights,
    #[serde(default)]
    pub perturb: PerturbConfig,
    pub seed: u64,
    /// Tap feeding SNTG/AMC.
    #[serde(default = "default_aux_tap")]
    pub aux_tap: String,
    /// Taps regularized by the orthogonal-sphere term; empty means every tap
    /// the model exposes.
    #[serde(default)]
    pub os_taps: Vec<String>,
    /// Evaluate every this many epochs (0 never); the final epoch is always
    /// evaluated when an evaluation set is given.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

fn default_aux_tap() -> String {
    GAP_TAP.to_string()
}

fn default_eval_every() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 100,
            base_learning_rate: 0.003,
            adam: AdamConfig::default(),
            ramp_up_epochs: 80,
            ramp_down_epochs: 50,
            loss: LossWeights::default(),
            perturb: PerturbConfig::default(),
            seed: 0,
            aux_tap: default_aux_tap(),
            os_taps: Vec::new(),
            eval_every: default_eval_every(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("train.epochs: must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("train.batch_size: must be at least 2".into()));
        }
        if !(self.base_learning_rate > 0.0) || !self.base_learning_rate.is_finite() {
            return Err(Error::Config("train.base_learning_rate: must be positive".into()));
        }
        self.adam.validate()?;
        self.loss.validate()?;
        self.perturb.validate()?;
        Ok(())
    }

    /// Consistency and auxiliary weight `w(t)` at epoch `t`.
    pub fn weight_ramp(&self, epoch: usize) -> f64 {
        ramp_up_over(epoch as f64, self.ramp_up_epochs)
    }

    /// Multiplier of the base learning rate at epoch `t`: the same warm-up
    /// shape as `w(t)` times the final ramp-down.
    pub fn lr_factor(&self, epoch: usize) -> f64 {
        ramp_up_over(epoch as f64, self.ramp_up_epochs)
            * ramp_down_over(epoch as f64, self.epochs, self.ramp_down_epochs)
    }

    /// Taps the objective reads, checked against the model.
    fn resolve_taps(&self, model: &crate::model::ModelConfig) -> Result<(Option<String>, Vec<String>)> {
        let available = model.tap_names();
        let aux = if self.loss.aux > 0.0 && self.loss.aux_kind != AuxKind::None {
            if !available.contains(&self.aux_tap) {
                return Err(Error::Config(format!("train.aux_tap: model exposes no tap {:?}", self.aux_tap)));
            }
            Some(self.aux_tap.clone())
        } else {
            None
        };
        let os = if self.loss.os > 0.0 {
            let taps = if self.os_taps.is_empty() { available.clone() } else { self.os_taps.clone() };
            for t in &taps {
                let dim = model.tap_dim(t).filter(|_| available.contains(t));
                match dim {
                    None => return Err(Error::Config(format!("train.os_taps: model exposes no tap {t:?}"))),
                    Some(m) if m % self.loss.blocks != 0 => {
                        return Err(Error::Config(format!(
                            "loss.blocks: {} does not divide the {m}-d tap {t:?}",
                            self.loss.blocks
                        )))
                    }
                    _ => {}
                }
            }
            taps
        } else {
            Vec::new()
        };
        Ok((aux, os))
    }
}

/// Indices of one mini-batch and which of them carry labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub labeled: Vec<bool>,
}

/// Uniform sample of `batch_size` distinct training indices.
pub fn compose_batch(split: &SemiSplit, batch_size: usize, rng: &mut Rng) -> Result<Batch> {
    let n = split.len();
    if batch_size > n || batch_size == 0 {
        return Err(Error::invalid("compose_batch", format!("batch of {batch_size} from {n} samples")));
    }
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..batch_size {
        let j = i + rng.index(n - i);
        pool.swap(i, j);
    }
    pool.truncate(batch_size);
    let labeled = pool.iter().map(|&i| split.is_labeled(i)).collect();
    Ok(Batch { indices: pool, labeled })
}

/// One pass over a seeded permutation, cut into full batches; a trailing
/// partial batch is dropped.
pub fn epoch_batches(split: &SemiSplit, batch_size: usize, rng: &mut Rng) -> Result<Vec<Batch>> {
    let n = split.len();
    if batch_size > n || batch_size == 0 {
        return Err(Error::invalid("epoch_batches", format!("batch of {batch_size} from {n} samples")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    Ok(order
        .chunks_exact(batch_size)
        .map(|c| Batch { indices: c.to_vec(), labeled: c.iter().map(|&i| split.is_labeled(i)).collect() })
        .collect())
}

/// Unweighted loss terms of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub ce: f64,
    pub consistency: f64,
    pub aux: f64,
    pub os: f64,
    /// The optimized scalar.
    pub total: f64,
}

/// Summary of one completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Means of the per-step terms.
    pub ce: f64,
    pub consistency: f64,
    pub aux: f64,
    pub os: f64,
    pub total: f64,
    pub w_t: f64,
    pub lr_factor: f64,
    pub eval_acc: Option<f64>,
    pub labeled_seen: usize,
    pub unlabeled_seen: usize,
    pub skipped_steps: usize,
    pub clamped_targets: usize,
    pub steps: Vec<StepLoss>,
}

/// Model plus optimizer state and training position.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub adam: AdamState<T>,
    pub config: TrainConfig,
    /// Next epoch to run.
    pub epoch: usize,
    pub log: Vec<EpochRecord>,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self> {
        let adam = AdamState::new(model.params());
        Self::resume(model, adam, config, 0)
    }

    /// Continues from a saved position; schedules pick up at `epoch`.
    pub fn resume(model: Model<T>, adam: AdamState<T>, config: TrainConfig, epoch: usize) -> Result<Self> {
        config.validate()?;
        config.resolve_taps(model.config())?;
        if adam.m.len() != model.params().len() {
            return Err(Error::Config("optimizer state does not match the model".into()));
        }
        Ok(Self { model, adam, config, epoch, log: Vec::new() })
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Runs one epoch. A non-finite objective aborts it with the step index;
    /// parameters then hold the updates of the preceding steps.
    pub fn train_epoch(&mut self, data: &Dataset, split: &SemiSplit, eval: Option<&Dataset>) -> Result<EpochRecord> {
        if split.len() != data.len() {
            return Err(Error::shape(
                "train",
                format!("split covers {} samples, data has {}", split.len(), data.len()),
            ));
        }
        if data.classes() != self.model.config().classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, model predicts {}",
                data.classes(),
                self.model.config().classes
            )));
        }
        let cfg = self.config.clone();
        let t = self.epoch;
        let (aux_tap, os_taps) = cfg.resolve_taps(self.model.config())?;
        let w_t = cfg.weight_ramp(t);
        let lr_factor = cfg.lr_factor(t);
        let lr = cfg.base_learning_rate * lr_factor;
        let needs_teacher = cfg.loss.needs_teacher();
        let batches = epoch_batches(split, cfg.batch_size, &mut Rng::derive(cfg.seed, &[EPOCH_STREAM, t as u64]))?;

        let mut rec = EpochRecord {
            epoch: t,
            ce: 0.0,
            consistency: 0.0,
            aux: 0.0,
            os: 0.0,
            total: 0.0,
            w_t,
            lr_factor,
            eval_acc: None,
            labeled_seen: 0,
            unlabeled_seen: 0,
            skipped_steps: 0,
            clamped_targets: 0,
            steps: Vec::with_capacity(batches.len()),
        };
        for (s, batch) in batches.iter().enumerate() {
            let stream = |role| Rng::derive(cfg.seed, &[STEP_STREAM, t as u64, s as u64, role]);
            let x = data.batch::<T>(&batch.indices);
            let labels = data.batch_labels(&batch.indices);

            let mut g = Graph::new();
            let params = self.model.bind(&mut g);
            let student = self.model.forward(
                &mut g,
                &params,
                &x,
                PassMode::Student,
                &cfg.perturb,
                Some(&mut stream(ROLE_STUDENT)),
            )?;
            let teacher_probs = if needs_teacher {
                let mut tg = Graph::no_grad();
                let tp = self.model.bind(&mut tg);
                let f = self.model.forward(
                    &mut tg,
                    &tp,
                    &x,
                    PassMode::Teacher,
                    &cfg.perturb,
                    Some(&mut stream(ROLE_TEACHER)),
                )?;
                Some(tg.value(f.probs).clone())
            } else {
                None
            };
            let pairs = if aux_tap.is_some() {
                disjoint_pairs(batch.indices.len(), &mut stream(ROLE_PAIRS))
            } else {
                Vec::new()
            };
            let os_latents: Vec<_> = os_taps.iter().map(|n| student.tap(n).expect("tap resolved")).collect();
            let inputs = LossInputs {
                probs: student.probs,
                teacher_probs: teacher_probs.as_ref(),
                labels: &labels,
                labeled: &batch.labeled,
                aux_latent: aux_tap.as_deref().and_then(|n| student.tap(n)),
                os_latents: &os_latents,
                pairs: &pairs,
            };
            let loss = total_loss(&mut g, &inputs, &cfg.loss, w_t)?;
            if !loss.total_value.is_finite() {
                return Err(Error::NonFinite { what: "total loss", at: Some(s) });
            }
            g.backward(loss.total)?;
            let grads: Vec<Tensor<T>> = params.iter().map(|&p| g.grad(p)).collect();
            match self.adam.step(self.model.params_mut(), &grads, lr, &cfg.adam)? {
                StepOutcome::Applied => self.model.update_bn(&student.moments),
                StepOutcome::Skipped { param } => {
                    log::warn!("epoch {t} step {s}: non-finite gradient in parameter {param}; update skipped");
                    rec.skipped_steps += 1;
                }
            }

            let step = StepLoss {
                ce: loss.ce.to_f64_lossy(),
                consistency: loss.consistency.to_f64_lossy(),
                aux: loss.aux.to_f64_lossy(),
                os: loss.os.to_f64_lossy(),
                total: loss.total_value.to_f64_lossy(),
            };
            rec.labeled_seen += batch.labeled.iter().filter(|&&l| l).count();
            rec.unlabeled_seen += batch.labeled.iter().filter(|&&l| !l).count();
            rec.clamped_targets += loss.clamped;
            rec.steps.push(step);
        }
        let n = rec.steps.len().max(1) as f64;
        rec.ce = rec.steps.iter().map(|s| s.ce).sum::<f64>() / n;
        rec.consistency = rec.steps.iter().map(|s| s.consistency).sum::<f64>() / n;
        rec.aux = rec.steps.iter().map(|s| s.aux).sum::<f64>() / n;
        rec.os = rec.steps.iter().map(|s| s.os).sum::<f64>() / n;
        rec.total = rec.steps.iter().map(|s| s.total).sum::<f64>() / n;

        let last = t + 1 == cfg.epochs;
        if let Some(eval) = eval {
            if last || (cfg.eval_every > 0 && (t + 1).is_multiple_of(cfg.eval_every)) {
                rec.eval_acc = Some(evaluate(&self.model, eval, cfg.batch_size)?.accuracy);
            }
        }
        self.epoch += 1;
        self.log.push(rec.clone());
        Ok(rec)
    }

    /// Runs the remaining epochs.
    pub fn fit(&mut self, data: &Dataset, split: &SemiSplit, eval: Option<&Dataset>) -> Result<&[EpochRecord]> {
        let start = self.log.len();
        while !self.is_done() {
            let rec = self.train_epoch(data, split, eval)?;
            log::info!(
                "epoch {} ce {:.4} cons {:.4} aux {:.4} os {:.4} w {:.4} lr {:.4} acc {}",
                rec.epoch,
                rec.ce,
                rec.consistency,
                rec.aux,
                rec.os,
                rec.w_t,
                rec.lr_factor,
                rec.eval_acc.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"))
            );
        }
        Ok(&self.log[start..])
    }
}

/// Accuracy and class probabilities of an evaluation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation<T> {
    pub accuracy: f64,
    /// `[N, K]`.
    pub probs: Tensor<T>,
    pub predictions: Vec<usize>,
}

/// Evaluation-mode predictions over `data` in chunks of `chunk` images.
/// Ties go to the lowest class index.
pub fn evaluate<T: Real>(model: &Model<T>, data: &Dataset, chunk: usize) -> Result<Evaluation<T>> {
    if data.is_empty() {
        return Err(Error::invalid("evaluate", "empty dataset"));
    }
    let k = model.config().classes;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut probs = Vec::with_capacity(data.len() * k);
    for c in idx.chunks(chunk.max(1)) {
        let out = model.infer(&data.batch(c))?;
        probs.extend_from_slice(out.probs.data());
    }
    let probs = Tensor::new(&[data.len(), k], probs)?;
    Ok(evaluation_from_probs(probs, data.labels()))
}

/// Accuracy of given probability rows against `labels`.
pub fn evaluation_from_probs<T: Real>(probs: Tensor<T>, labels: &[usize]) -> Evaluation<T> {
    let predictions: Vec<usize> = probs.rows().map(argmax).collect();
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Evaluation { accuracy: correct as f64 / labels.len() as f64, probs, predictions }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, ImageShape};
    use crate::model::ModelConfig;

    fn tiny_model_config(classes: usize) -> ModelConfig {
        ModelConfig {
            conv_blocks: vec![vec![4], vec![8, 8]],
            classes,
            leaky_alpha: 0.1,
            input: ImageShape::CIFAR,
            taps: Vec::new(),
        }
    }

    #[test]
    fn compose_batch_contract() {
        let d = synth_dataset(2, 50, 0).unwrap();
        let all = SemiSplit::all_labeled(d.len());
        let b = compose_batch(&all, 10, &mut Rng::new(0)).unwrap();
        assert!(b.labeled.iter().all(|&l| l));
        assert_eq!(b, compose_batch(&all, 10, &mut Rng::new(0)).unwrap());
        let mut sorted = b.indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 10);
        assert!(compose_batch(&all, 101, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn labeled_fraction_within_binomial_bound() {
        let d = synth_dataset(4, 250, 1).unwrap();
        let split = crate::data::split_semi(&d, 200, 0).unwrap();
        let mut rng = Rng::new(9);
        let (batches, size) = (500, 50);
        let mut labeled = 0usize;
        for _ in 0..batches {
            labeled += compose_batch(&split, size, &mut rng).unwrap().labeled.iter().filter(|&&l| l).count();
        }
        let n = (batches * size) as f64;
        let p = 0.2;
        let sigma = (n * p * (1.0 - p)).sqrt();
        assert!((labeled as f64 - n * p).abs() < 3.0 * sigma, "{labeled}");
    }

    #[test]
    fn schedules_in_log() {
        let cfg = TrainConfig { epochs: 300, ..TrainConfig::default() };
        assert_eq!(cfg.weight_ramp(80), 1.0);
        assert_eq!(cfg.weight_ramp(200), 1.0);
        assert!((cfg.weight_ramp(0) - (-5.0f64).exp()).abs() < 1e-15);
        assert_eq!(cfg.lr_factor(100), 1.0);
        for t in 250..299 {
            assert!(cfg.lr_factor(t + 1) < cfg.lr_factor(t));
        }
    }

    #[test]
    fn supervised_two_class_learns() {
        let d = synth_dataset(2, 100, 3).unwrap();
        let (train, stats) = crate::data::normalize(&d).unwrap();
        let test = stats.apply(&synth_dataset(2, 50, 3).unwrap()).unwrap();
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 20,
            ramp_up_epochs: 0,
            ramp_down_epochs: 0,
            loss: LossWeights::supervised_only(),
            perturb: PerturbConfig::none(),
            eval_every: 0,
            ..TrainConfig::default()
        };
        let model = Model::<f32>::new(tiny_model_config(2), &mut Rng::new(0)).unwrap();
        let mut tr = Trainer::new(model, cfg).unwrap();
        let log = tr.fit(&train, &SemiSplit::all_labeled(train.len()), Some(&test)).unwrap().to_vec();
        assert_eq!(log.len(), 10);
        let acc = log.last().unwrap().eval_acc.unwrap();
        assert!(acc > 0.95, "accuracy {acc}");
    }

    #[test]
    fn breakdown_resums_to_total_and_is_reproducible() {
        let d = synth_dataset(2, 20, 3).unwrap();
        let (train, _) = crate::data::normalize(&d).unwrap();
        let split = crate::data::split_semi(&train, 10, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 10,
            ramp_up_epochs: 2,
            ramp_down_epochs: 1,
            loss: LossWeights { blocks: 4, os: 1e-2, ..LossWeights::default() }.with_amc(),
            eval_every: 0,
            ..TrainConfig::default()
        };
        let run = || {
            let model = Model::<f64>::new(tiny_model_config(2), &mut Rng::new(1)).unwrap();
            let mut tr = Trainer::new(model, cfg.clone()).unwrap();
            tr.fit(&train, &split, None).unwrap();
            tr
        };
        let a = run();
        let b = run();
        assert_eq!(a.log, b.log);
        assert_eq!(a.model, b.model);
        for rec in &a.log {
            for s in &rec.steps {
                let w = rec.w_t;
                let resum =
                    s.ce + w * (cfg.loss.consistency * s.consistency + cfg.loss.aux * s.aux + cfg.loss.os * s.os);
                assert!((resum - s.total).abs() < 1e-6, "{resum} vs {}", s.total);
            }
            assert!(rec.consistency > 0.0 && rec.os > 0.0);
        }
    }

    #[test]
    fn evaluation_tie_rule_and_oracle() {
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        let uniform = Tensor::full(&[100, 10], 0.1f64);
        assert_eq!(evaluation_from_probs(uniform, &labels).accuracy, 0.1);
        let mut onehot = vec![0.0f64; 1000];
        for (i, &l) in labels.iter().enumerate() {
            onehot[i * 10 + l] = 1.0;
        }
        let e = evaluation_from_probs(Tensor::new(&[100, 10], onehot).unwrap(), &labels);
        assert_eq!(e.accuracy, 1.0);
    }

    #[test]
    fn unknown_taps_rejected() {
        let model = Model::<f32>::new(tiny_model_config(2), &mut Rng::new(0)).unwrap();
        let cfg = TrainConfig { os_taps: vec!["conv1_1".into()], ..TrainConfig::default() };
        assert!(Trainer::new(model.clone(), cfg).is_err());
        let cfg = TrainConfig { loss: LossWeights { blocks: 3, ..LossWeights::default() }, ..TrainConfig::default() };
        assert!(Trainer::new(model, cfg).is_err());
    }
}
