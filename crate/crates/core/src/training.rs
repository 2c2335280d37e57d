//! Training loop: pair sampling per target mode, the denoising loss and AdamW.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::consensus::{build_consensus_stack, fraction_map, AnnotationSet};
use crate::data::{augment, AugmentParams, Dataset};
use crate::diffusion::{forward_noise, NoiseSchedule};
use crate::error::{Error, Result};
use crate::maps::Map;
use crate::model::{init_model, Checkpoint, ModelConfig, ModelParams, Net, OptimizerSnapshot};
use crate::rng;
use crate::tensor::{Scalar, Tape, Tensor};

/// Which target the model learns to generate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Consensus map `M^c` with condition `c`.
    Consensus,
    /// Annotator `i`'s mask with condition `i`.
    Annotator,
    /// A random annotator's mask with the constant condition 1.
    NoAnnotator,
    /// The fraction map with the constant condition 1.
    SoftLabel,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [
        TrainMode::Consensus,
        TrainMode::Annotator,
        TrainMode::NoAnnotator,
        TrainMode::SoftLabel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Consensus => "consensus",
            TrainMode::Annotator => "annotator",
            TrainMode::NoAnnotator => "no_annotator",
            TrainMode::SoftLabel => "soft_label",
        }
    }

    /// Number of condition indices a model trained in this mode uses for `annotators` raters.
    pub fn condition_count(self, annotators: usize) -> usize {
        match self {
            TrainMode::Consensus | TrainMode::Annotator => annotators,
            TrainMode::NoAnnotator | TrainMode::SoftLabel => 1,
        }
    }

    /// Factor on the generation count at inference. A soft-label model yields one
    /// map per generation instead of one per consensus level, so it samples
    /// `annotators` times as many generations.
    pub fn generation_factor(self, annotators: usize) -> usize {
        match self {
            TrainMode::SoftLabel => annotators,
            _ => 1,
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown training mode {s:?} (consensus, annotator, no_annotator, soft_label)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
    pub augment: bool,
    pub augment_params: AugmentParams,
    /// Global gradient-norm bound; off when `None`.
    pub grad_clip: Option<f64>,
    pub log_every: u64,
    /// Write an intermediate checkpoint every this many steps.
    pub checkpoint_every: Option<u64>,
    /// Evaluate validation soft Dice every this many steps when a validation set is given.
    pub validate_every: Option<u64>,
    /// Stop once validation soft Dice has not improved for this many steps.
    pub patience: Option<u64>,
    pub validation_generations: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Consensus,
            steps: 3000,
            batch_size: 4,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            seed: 0,
            augment: true,
            augment_params: AugmentParams::default(),
            grad_clip: None,
            log_every: 1,
            checkpoint_every: None,
            validate_every: None,
            patience: None,
            validation_generations: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.batch_size == 0 {
            errs.push("batch_size must be >= 1".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            errs.push(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) {
            errs.push(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            errs.push(format!("betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if !(self.adam_eps > 0.0) {
            errs.push("adam_eps must be > 0".to_string());
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            errs.push("grad_clip must be > 0".to_string());
        }
        if self.log_every == 0 {
            errs.push("log_every must be >= 1".to_string());
        }
        if self.checkpoint_every == Some(0) || self.validate_every == Some(0) {
            errs.push("checkpoint_every and validate_every must be >= 1".to_string());
        }
        if self.validation_generations == 0 {
            errs.push("validation_generations must be >= 1".to_string());
        }
        let (lo, hi) = self.augment_params.scale;
        if !(lo > 0.0 && lo <= hi) {
            errs.push(format!("augment scale range ({lo}, {hi}) invalid"));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}

/// AdamW with weight decay applied multiplicatively before the moment update.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Scalar = f32> {
    pub step: u64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl From<&TrainConfig> for AdamW {
    fn from(c: &TrainConfig) -> Self {
        Self {
            learning_rate: c.learning_rate,
            weight_decay: c.weight_decay,
            betas: c.betas,
            eps: c.adam_eps,
        }
    }
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }

    fn check(&self, params: &[Tensor<T>]) -> Result<()> {
        let ok = self.first_moment.len() == params.len()
            && self.second_moment.len() == params.len()
            && params.iter().zip(&self.first_moment).zip(&self.second_moment).all(|((p, m), v)| {
                p.shape() == m.shape() && p.shape() == v.shape()
            });
        if ok {
            Ok(())
        } else {
            Err(Error::shape("optimizer", "moment shapes do not match the parameters"))
        }
    }

    /// One update; `grads[i] = None` means a zero gradient for parameter `i`.
    pub fn apply(&mut self, opt: &AdamW, params: &mut [Tensor<T>], grads: &[Option<Tensor<T>>]) -> Result<()> {
        self.check(params)?;
        if grads.len() != params.len() {
            return Err(Error::shape(
                "optimizer",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        self.step += 1;
        let (b1, b2) = opt.betas;
        let bc1 = 1.0 - b1.powf(self.step as f64);
        let bc2 = 1.0 - b2.powf(self.step as f64);
        let decay = 1.0 - opt.learning_rate * opt.weight_decay;
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].as_ref();
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::shape(
                        "optimizer",
                        format!("gradient {:?} for parameter {:?}", g.shape(), p.shape()),
                    ));
                }
            }
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g.data()[j].to64());
                let mj = b1 * m[j].to64() + (1.0 - b1) * gj;
                let vj = b2 * v[j].to64() + (1.0 - b2) * gj * gj;
                m[j] = T::of(mj);
                v[j] = T::of(vj);
                let step = opt.learning_rate * (mj / bc1) / ((vj / bc2).sqrt() + opt.eps);
                *w = T::of(w.to64() * decay - step);
            }
        }
        Ok(())
    }
}

impl OptimizerState<f32> {
    pub fn snapshot(&self) -> OptimizerSnapshot {
        OptimizerSnapshot {
            step: self.step,
            first_moment: self.first_moment.clone(),
            second_moment: self.second_moment.clone(),
        }
    }

    pub fn from_snapshot(s: OptimizerSnapshot) -> Self {
        Self {
            step: s.step,
            first_moment: s.first_moment,
            second_moment: s.second_moment,
        }
    }
}

/// One training example: image, target map and 1-based condition index.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub sample_id: String,
    pub image: Map,
    pub target: Map,
    pub condition: usize,
}

/// Draws a sample uniformly, then a level or annotator uniformly from `1..=C`,
/// and builds the target for `mode`.
pub fn sample_training_pair<R: Rng + ?Sized>(
    dataset: &Dataset,
    mode: TrainMode,
    augmentation: Option<&AugmentParams>,
    rng: &mut R,
) -> Result<TrainingPair> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot sample from an empty dataset".into()));
    }
    let k = rng.random_range(0..dataset.len());
    let j = rng.random_range(1..=dataset.annotators);
    let sample = &dataset.samples[k];
    let augmented;
    let sample: &AnnotationSet = match augmentation {
        Some(p) => {
            let (image, masks) = augment(sample.image(), sample.masks(), p, rng);
            augmented = AnnotationSet::new(sample.sample_id.clone(), image, masks)?;
            &augmented
        }
        None => sample,
    };
    let (target, condition) = match mode {
        TrainMode::Consensus => (build_consensus_stack(sample).level(j)?.to_map(), j),
        TrainMode::Annotator => (sample.masks()[j - 1].to_map(), j),
        TrainMode::NoAnnotator => (sample.masks()[j - 1].to_map(), 1),
        TrainMode::SoftLabel => (fraction_map(sample).into_map(), 1),
    };
    Ok(TrainingPair {
        sample_id: sample.sample_id.clone(),
        image: sample.image().clone(),
        target,
        condition,
    })
}

fn stack_maps<T: Scalar>(maps: &[&Map]) -> Tensor<T> {
    let (h, w) = maps[0].dims();
    let data = maps.iter().flat_map(|m| m.data().iter().map(|&v| T::of(v as f64))).collect();
    Tensor::new(vec![maps.len(), 1, h, w], data).expect("maps share a shape")
}

/// Loss and gradients of the denoising objective on one noised batch.
pub struct StepGradients<T: Scalar> {
    pub loss: f64,
    pub grads: Vec<Option<Tensor<T>>>,
    pub timesteps: Vec<usize>,
}

/// Draws per-item `t ~ U{1..T}` and `eps ~ N(0, I)`, forms `x_t`, and returns the
/// mean squared error between `eps` and the network's prediction with its gradients.
pub fn loss_and_gradients<T: Scalar, R: Rng + ?Sized>(
    params: &ModelParams<T>,
    batch: &[TrainingPair],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<StepGradients<T>> {
    let first = batch.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    if let Some(p) = batch.iter().find(|p| p.image.dims() != first.image.dims() || p.target.dims() != first.image.dims()) {
        return Err(Error::shape(
            "train_step",
            format!("sample {} does not match the batch shape {:?}", p.sample_id, first.image.dims()),
        ));
    }
    let (h, w) = first.image.dims();
    let mut timesteps = Vec::with_capacity(batch.len());
    let mut xt = Vec::with_capacity(batch.len() * h * w);
    let mut eps = Vec::with_capacity(batch.len() * h * w);
    for p in batch {
        let t = rng.random_range(1..=sched.steps());
        let e = Tensor::<T>::randn(vec![h * w], 1.0, rng).into_data();
        let x0: Vec<T> = p.target.data().iter().map(|&v| T::of(v as f64)).collect();
        xt.extend(forward_noise(&x0, t, &e, sched)?);
        eps.extend(e);
        timesteps.push(t);
    }
    let shape = vec![batch.len(), 1, h, w];
    let xt = Tensor::new(shape.clone(), xt)?;
    let eps = Tensor::new(shape, eps)?;
    let images = stack_maps::<T>(&batch.iter().map(|p| &p.image).collect::<Vec<_>>());
    let conditions: Vec<usize> = batch.iter().map(|p| p.condition).collect();

    let mut tape = Tape::new();
    let net = Net::bind(params, &mut tape, true);
    let xv = tape.constant(xt);
    let iv = tape.constant(images);
    let ev = tape.constant(eps);
    let out = net.epsilon_theta(&mut tape, xv, iv, &timesteps, &conditions)?;
    let loss = tape.mse(out, ev)?;
    let loss_value = tape.value(loss).data()[0].to64();
    let mut g = tape.backward(loss)?;
    let grads = net.vars().iter().map(|&v| g.take(v)).collect();
    Ok(StepGradients {
        loss: loss_value,
        grads,
        timesteps,
    })
}

fn clip_global_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], max_norm: f64) {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter().map(|v| v.to64() * v.to64()))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
}

/// Forward, backward and one AdamW update. Fails without touching the
/// parameters when the loss is not finite.
pub fn train_step<T: Scalar, R: Rng + ?Sized>(
    params: &mut ModelParams<T>,
    opt_state: &mut OptimizerState<T>,
    opt: &AdamW,
    batch: &[TrainingPair],
    sched: &NoiseSchedule,
    grad_clip: Option<f64>,
    rng: &mut R,
) -> Result<f64> {
    let StepGradients {
        loss,
        mut grads,
        timesteps,
    } = loss_and_gradients(params, batch, sched, rng)?;
    if !loss.is_finite() {
        let dump = serde_json::json!({
            "optimizer_step": opt_state.step,
            "loss": loss.to_string(),
            "timesteps": timesteps,
            "conditions": batch.iter().map(|p| p.condition).collect::<Vec<_>>(),
            "samples": batch.iter().map(|p| p.sample_id.as_str()).collect::<Vec<_>>(),
            "non_finite_parameters": params
                .names()
                .iter()
                .zip(params.tensors())
                .filter(|(_, t)| t.data().iter().any(|v| !v.to64().is_finite()))
                .map(|(n, _)| n.as_str())
                .collect::<Vec<_>>(),
        });
        return Err(Error::Numeric(format!("non-finite training loss; step state: {dump}")));
    }
    if let Some(c) = grad_clip {
        clip_global_norm(&mut grads, c);
    }
    opt_state.apply(opt, params.tensors_mut(), &grads)?;
    Ok(loss)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f64,
    pub wall_ms: f64,
    pub mode: TrainMode,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_soft_dice: Option<f64>,
}

/// Parameters, optimizer state and schedule of a training run.
pub struct Trainer {
    pub params: ModelParams<f32>,
    pub opt_state: OptimizerState<f32>,
    pub schedule: NoiseSchedule,
    pub config: TrainConfig,
    annotators: usize,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.ndjson";

impl Trainer {
    pub fn new(model: &ModelConfig, config: TrainConfig, annotators: usize) -> Result<Self> {
        config.validate()?;
        let needed = config.mode.condition_count(annotators);
        if model.consensus_levels < needed {
            return Err(Error::Config(format!(
                "{} mode with {annotators} annotators needs consensus_levels >= {needed}, model has {}",
                config.mode.as_str(),
                model.consensus_levels
            )));
        }
        let params = init_model::<f32>(model, config.seed)?;
        let opt_state = OptimizerState::new(params.tensors());
        Ok(Self {
            schedule: NoiseSchedule::new(model.timesteps)?,
            params,
            opt_state,
            config,
            annotators,
        })
    }

    /// Continues from a checkpoint holding optimizer state.
    pub fn resume(ckpt: Checkpoint, config: TrainConfig, annotators: usize) -> Result<Self> {
        config.validate()?;
        let opt = ckpt
            .optimizer
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state to resume from".into()))?;
        let opt_state = OptimizerState::from_snapshot(opt);
        opt_state.check(ckpt.params.tensors())?;
        if let Some(m) = ckpt.metadata.get("mode").and_then(|m| m.as_str()) {
            if m != config.mode.as_str() {
                return Err(Error::Config(format!(
                    "checkpoint was trained in {m} mode, resume requested {}",
                    config.mode.as_str()
                )));
            }
        }
        Ok(Self {
            params: ckpt.params,
            opt_state,
            schedule: ckpt.schedule,
            config,
            annotators,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.opt_state.step
    }

    /// Runs the next step with its own random stream, so resumed runs repeat exactly.
    pub fn step(&mut self, dataset: &Dataset) -> Result<f64> {
        if dataset.annotators != self.annotators {
            return Err(Error::Data(format!(
                "dataset has {} annotators, trainer was built for {}",
                dataset.annotators, self.annotators
            )));
        }
        let mut rng = rng::stream(self.config.seed, &[rng::TRAIN, self.opt_state.step]);
        let aug = self.config.augment.then_some(&self.config.augment_params);
        let batch = (0..self.config.batch_size)
            .map(|_| sample_training_pair(dataset, self.config.mode, aug, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        train_step(
            &mut self.params,
            &mut self.opt_state,
            &AdamW::from(&self.config),
            &batch,
            &self.schedule,
            self.config.grad_clip,
            &mut rng,
        )
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            schedule: self.schedule.clone(),
            metadata: serde_json::json!({
                "mode": self.config.mode.as_str(),
                "step": self.opt_state.step,
                "annotators": self.annotators,
                "inference_levels": self.config.mode.condition_count(self.annotators),
                "train_config": self.config,
            }),
            optimizer: Some(self.opt_state.snapshot()),
        }
    }
}

/// Output of [`train`].
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<f64>,
    /// Path and sha256 of the final checkpoint when an output directory was given.
    pub saved: Option<(PathBuf, String)>,
    pub stopped_early: bool,
}

/// Optional pieces of a training run.
#[derive(Default)]
pub struct TrainRun<'a> {
    pub out_dir: Option<&'a Path>,
    pub resume: Option<Checkpoint>,
    pub validation: Option<&'a Dataset>,
    /// Called after every step with `(step, loss)`.
    pub progress: Option<&'a mut dyn FnMut(u64, f64)>,
}

/// Trains until `config.steps` optimizer steps have been taken in total.
pub fn train(dataset: &Dataset, model: &ModelConfig, config: &TrainConfig, run: TrainRun<'_>) -> Result<TrainOutcome> {
    let TrainRun {
        out_dir,
        resume,
        validation,
        mut progress,
    } = run;
    let mut trainer = match resume {
        Some(ck) => Trainer::resume(ck, config.clone(), dataset.annotators)?,
        None => Trainer::new(model, config.clone(), dataset.annotators)?,
    };
    let mut log = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let p = d.join(METRICS_FILE);
            Some((
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&p)
                    .map_err(|e| Error::io(&p, e))?,
                p,
            ))
        }
        None => None,
    };
    let mut losses = Vec::new();
    let mut best = (f64::NEG_INFINITY, trainer.step_count());
    let mut stopped_early = false;
    let start = Instant::now();
    while trainer.step_count() < config.steps {
        let loss = match trainer.step(dataset) {
            Ok(l) => l,
            Err(e @ Error::Numeric(_)) => {
                if let Some(d) = out_dir {
                    let p = d.join("failure.json");
                    let _ = std::fs::write(&p, e.to_string());
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let step = trainer.step_count();
        losses.push(loss);
        let mut val_soft_dice = None;
        if let (Some(every), Some(val)) = (config.validate_every, validation) {
            if step % every == 0 {
                let d = crate::inference::mean_soft_dice(
                    &trainer.params,
                    &trainer.schedule,
                    val,
                    &crate::inference::InferenceConfig {
                        n_generations: config.validation_generations * config.mode.generation_factor(dataset.annotators),
                        levels: config.mode.condition_count(dataset.annotators),
                        seed: config.seed,
                        workers: 1,
                    },
                )?;
                val_soft_dice = Some(d);
                if d > best.0 {
                    best = (d, step);
                }
            }
        }
        if let Some((f, p)) = log.as_mut() {
            if step % config.log_every == 0 || val_soft_dice.is_some() {
                let rec = MetricsRecord {
                    step,
                    loss,
                    wall_ms: start.elapsed().as_secs_f64() * 1e3,
                    mode: config.mode,
                    val_soft_dice,
                };
                writeln!(f, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(p.as_path(), e))?;
            }
        }
        if let Some(cb) = progress.as_mut() {
            cb(step, loss);
        }
        if let (Some(every), Some(d)) = (config.checkpoint_every, out_dir) {
            if step % every == 0 && step < config.steps {
                trainer.checkpoint().save(&d.join(CHECKPOINT_FILE))?;
            }
        }
        if config.patience.is_some_and(|p| step - best.1 >= p) && best.0 > f64::NEG_INFINITY {
            stopped_early = true;
            break;
        }
    }
    let checkpoint = trainer.checkpoint();
    let saved = match out_dir {
        Some(d) => {
            let p = d.join(CHECKPOINT_FILE);
            let hash = checkpoint.save(&p)?;
            Some((p, hash))
        }
        None => None,
    };
    Ok(TrainOutcome {
        checkpoint,
        losses,
        saved,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::Mask;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn adam(lr: f64, wd: f64) -> AdamW {
        AdamW {
            learning_rate: lr,
            weight_decay: wd,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }

    #[test]
    fn scalar_adamw_matches_recurrence() {
        let opt = adam(0.01, 0.1);
        let grads = [0.5, -1.0, 0.25, 2.0, -0.75];
        let mut params = vec![Tensor::<f64>::scalar(1.5)];
        let mut state = OptimizerState::new(&params);
        for &g in &grads {
            state.apply(&opt, &mut params, &[Some(Tensor::scalar(g))]).unwrap();
        }
        let (mut p, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            p *= 1.0 - 0.01 * 0.1;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            p -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((params[0].data()[0] - p).abs() < 1e-10);
        assert_eq!(state.step, 5);
    }

    #[test]
    fn zero_gradient_decays_by_exact_factor() {
        let opt = adam(0.1, 0.5);
        let mut params = vec![Tensor::<f64>::new(vec![2], vec![2.0, -4.0]).unwrap()];
        let mut state = OptimizerState::new(&params);
        state.apply(&opt, &mut params, &[None]).unwrap();
        assert_eq!(params[0].data(), &[2.0 * 0.95, -4.0 * 0.95]);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let cfg = ModelConfig {
            image_size: 8,
            depth: 2,
            channel_multipliers: vec![1, 1],
            attention_resolutions: vec![4],
            rrdb_blocks: 1,
            base_channels: 8,
            embed_dim: 8,
            heads: 2,
            ..ModelConfig::desk()
        };
        let mut params = init_model::<f32>(&cfg, 0).unwrap();
        let before = params.clone();
        let mut state = OptimizerState::new(params.tensors());
        let ds = tiny_dataset(3, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch: Vec<_> = (0..2)
            .map(|_| sample_training_pair(&ds, TrainMode::Consensus, None, &mut rng).unwrap())
            .collect();
        let sched = NoiseSchedule::new(cfg.timesteps).unwrap();
        train_step(&mut params, &mut state, &adam(0.0, 0.0), &batch, &sched, None, &mut rng).unwrap();
        assert_eq!(params, before);
    }

    fn tiny_dataset(annotators: usize, size: usize) -> Dataset {
        let spec = crate::data::SynthSpec {
            count: 4,
            test_count: 0,
            image_size: size,
            annotators,
            ..Default::default()
        };
        Dataset::new(crate::data::synthesize(&spec).unwrap()).unwrap()
    }

    #[test]
    fn consensus_levels_are_uniform() {
        let ds = tiny_dataset(3, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 3];
        for _ in 0..30_000 {
            let p = sample_training_pair(&ds, TrainMode::Consensus, None, &mut rng).unwrap();
            counts[p.condition - 1] += 1;
        }
        for c in counts {
            assert!((c as f64 / 30_000.0 - 1.0 / 3.0).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn modes_coincide_with_one_annotator() {
        let ds = tiny_dataset(1, 8);
        for seed in 0..20 {
            let pairs: Vec<TrainingPair> = [TrainMode::Consensus, TrainMode::Annotator, TrainMode::NoAnnotator]
                .into_iter()
                .map(|m| sample_training_pair(&ds, m, None, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap())
                .collect();
            assert!(pairs.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn soft_label_target_is_fractional_where_raters_disagree() {
        let masks = vec![
            Mask::new(1, 3, vec![1, 1, 0]).unwrap(),
            Mask::new(1, 3, vec![1, 0, 0]).unwrap(),
        ];
        let s = AnnotationSet::new("a", Map::zeros(1, 3), masks).unwrap();
        let ds = Dataset::new(vec![s]).unwrap();
        let p = sample_training_pair(&ds, TrainMode::SoftLabel, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.target.data(), &[1.0, 0.5, 0.0]);
        assert_eq!(p.condition, 1);
    }

    #[test]
    fn config_errors_listed_together() {
        let c = TrainConfig {
            batch_size: 0,
            learning_rate: 0.0,
            ..Default::default()
        };
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("batch_size") && msg.contains("learning_rate"), "{msg}");
        assert!("soft_label".parse::<TrainMode>().is_ok());
        assert!("bogus".parse::<TrainMode>().is_err());
    }

    #[test]
    fn soft_label_samples_as_many_maps_as_consensus() {
        for c in 1..=7 {
            for m in TrainMode::ALL {
                let maps = m.condition_count(c) * m.generation_factor(c);
                let want = if m == TrainMode::NoAnnotator { 1 } else { c };
                assert_eq!(maps, want, "{}", m.as_str());
            }
        }
    }
}
