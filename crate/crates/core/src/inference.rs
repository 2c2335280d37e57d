//! Sampling soft segmentations from a trained model.
//!
//! For each consensus level `c` the reverse chain starts at `x_T ~ N(0, I)`
//! and applies `T` denoising steps conditioned on the image and on `c`. The
//! level samples are averaged into one soft map, and several such
//! generations are averaged again. Clamping to `[0, 1]` happens once, after
//! all averaging.
//!
//! Randomness is split per `(image key, generation, level)`, so every chain
//! is reproducible on its own and the worker count never changes a result.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::consensus::{average_levels, fraction_map, SoftMap};
use crate::data::Dataset;
use crate::diffusion::{reverse_step, NoiseSchedule};
use crate::error::{Error, Result};
use crate::eval::{soft_dice, SOFT_DICE_THRESHOLDS};
use crate::maps::Map;
use crate::model::{ModelParams, Net};
use crate::rng;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub n_generations: usize,
    /// Consensus levels `1..=levels` sampled per generation.
    pub levels: usize,
    pub seed: u64,
    /// Threads used for independent chains; results do not depend on it.
    pub workers: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            n_generations: 25,
            levels: 3,
            seed: 0,
            workers: 1,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self, params: &ModelParams) -> Result<()> {
        let mut errs = Vec::new();
        if self.n_generations == 0 {
            errs.push("n_generations must be >= 1".to_string());
        }
        if self.levels == 0 {
            errs.push("levels must be >= 1".to_string());
        }
        if self.levels > params.config().consensus_levels {
            errs.push(format!(
                "levels {} exceeds the model's consensus_levels {}",
                self.levels,
                params.config().consensus_levels
            ));
        }
        if self.workers == 0 {
            errs.push("workers must be >= 1".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}

/// Stable 64-bit key of an image identifier, used to name its random streams.
pub fn image_key(id: &str) -> u64 {
    let d = Sha256::digest(id.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Random stream of one reverse chain.
pub fn chain_rng(seed: u64, key: u64, generation: usize, level: usize) -> ChaCha8Rng {
    rng::stream(seed, &[rng::INFER, key, generation as u64, level as u64])
}

fn image_tensor(image: &Map) -> Tensor<f32> {
    let (h, w) = image.dims();
    Tensor::new(vec![1, 1, h, w], image.data().to_vec()).expect("map dims")
}

/// `G(I)` for one image, `[1, L, H, W]`.
pub fn image_features(params: &ModelParams, image: &Map) -> Result<Tensor<f32>> {
    let mut tape = Tape::no_grad();
    let net = Net::bind(params, &mut tape, false);
    let iv = tape.constant(image_tensor(image));
    let g = net.encode_image(&mut tape, iv)?;
    Ok(tape.value(g).clone())
}

fn draw_normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f32> {
    Tensor::<f32>::randn(vec![n], 1.0, rng).into_data()
}

/// Runs one reverse chain per entry of `levels`, batched together; chain `i`
/// draws `x_T` and then one `z` per step `t > 1` from `rngs[i]`. Outputs are unclamped.
pub fn sample_levels_with_features(
    params: &ModelParams,
    sched: &NoiseSchedule,
    features: &Tensor<f32>,
    levels: &[usize],
    rngs: &mut [ChaCha8Rng],
) -> Result<Vec<Map>> {
    let cfg = params.config();
    if rngs.len() != levels.len() {
        return Err(Error::shape("sample_levels", format!("{} levels, {} streams", levels.len(), rngs.len())));
    }
    if let Some(&c) = levels.iter().find(|&&c| c == 0 || c > cfg.consensus_levels) {
        return Err(Error::OutOfRange {
            what: "consensus level",
            index: c,
            max: cfg.consensus_levels,
        });
    }
    if sched.steps() != cfg.timesteps {
        return Err(Error::Config(format!(
            "schedule has {} steps, model was built for {}",
            sched.steps(),
            cfg.timesteps
        )));
    }
    let (_, l, h, w) = features.dims4()?;
    let n = levels.len();
    let feats = Tensor::stack_batch(&vec![features; n])?;
    let hw = h * w;
    let mut x: Vec<Vec<f32>> = rngs.iter_mut().map(|r| draw_normal(hw, r)).collect();
    debug_assert_eq!(feats.shape(), &[n, l, h, w]);
    for t in (1..=sched.steps()).rev() {
        let xt = Tensor::new(vec![n, 1, h, w], x.concat())?;
        let mut tape = Tape::no_grad();
        let net = Net::bind(params, &mut tape, false);
        let xv = tape.constant(xt);
        let fv = tape.constant_ref(&feats);
        let (zt, zc) = net.embed(&mut tape, &vec![t; n], levels)?;
        let eps = net.denoise(&mut tape, xv, fv, zt, zc)?;
        let eps = tape.value(eps);
        for (i, (xi, r)) in x.iter_mut().zip(rngs.iter_mut()).enumerate() {
            let z = if t > 1 { draw_normal(hw, r) } else { Vec::new() };
            *xi = reverse_step(xi, eps.batch_item(i), t, &z, sched)?;
        }
    }
    x.into_iter().map(|d| Map::new(h, w, d)).collect()
}

/// One reverse chain for level `c` (1-based); returns the unclamped `x_0`.
pub fn sample_level(image: &Map, c: usize, params: &ModelParams, sched: &NoiseSchedule, rng: &mut ChaCha8Rng) -> Result<Map> {
    let f = image_features(params, image)?;
    let mut rngs = [rng.clone()];
    let out = sample_levels_with_features(params, sched, &f, &[c], &mut rngs)?;
    *rng = rngs[0].clone();
    Ok(out.into_iter().next().expect("one level"))
}

/// Unclamped level samples of every generation of one image: `levels[g][c - 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Generations {
    pub levels: Vec<Vec<Map>>,
}

impl Generations {
    /// Mean over levels of generation `g`, in 64-bit.
    fn level_mean(&self, g: usize) -> Vec<f64> {
        let maps = &self.levels[g];
        let mut acc = vec![0f64; maps[0].len()];
        for m in maps {
            for (a, &v) in acc.iter_mut().zip(m.data()) {
                *a += v as f64;
            }
        }
        let c = maps.len() as f64;
        acc.iter_mut().for_each(|a| *a /= c);
        acc
    }

    /// Mean of the first `n` generations' level means, clamped to `[0, 1]`.
    pub fn ensemble(&self, n: usize) -> Result<SoftMap> {
        if n == 0 || n > self.levels.len() {
            return Err(Error::Config(format!(
                "ensemble of {n} generations requested, {} available",
                self.levels.len()
            )));
        }
        let mut acc = vec![0f64; self.levels[0][0].len()];
        for g in 0..n {
            for (a, v) in acc.iter_mut().zip(self.level_mean(g)) {
                *a += v;
            }
        }
        let (h, w) = self.levels[0][0].dims();
        let data = acc.into_iter().map(|s| (s / n as f64) as f32).collect();
        Ok(SoftMap::clamped(Map::new(h, w, data)?))
    }

    /// Clamped level average of a single generation.
    pub fn generation(&self, g: usize) -> Result<SoftMap> {
        average_levels(&self.levels[g])
    }
}

#[cfg(feature = "parallel")]
fn run_tasks<T: Send>(workers: usize, n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    use rayon::prelude::*;
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}

#[cfg(not(feature = "parallel"))]
fn run_tasks<T: Send>(_workers: usize, n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    (0..n).map(f).collect()
}

/// Samples every generation of every `(key, image)`; tasks are `(image, generation)`
/// pairs spread over `cfg.workers` threads and reassembled in a fixed order.
pub fn generate(images: &[(u64, &Map)], params: &ModelParams, sched: &NoiseSchedule, cfg: &InferenceConfig) -> Result<Vec<Generations>> {
    cfg.validate(params)?;
    let features = run_tasks(cfg.workers, images.len(), |i| image_features(params, images[i].1))?;
    let n_gen = cfg.n_generations;
    let levels: Vec<usize> = (1..=cfg.levels).collect();
    let samples = run_tasks(cfg.workers, images.len() * n_gen, |task| {
        let (i, g) = (task / n_gen, task % n_gen);
        let mut rngs: Vec<ChaCha8Rng> = levels.iter().map(|&c| chain_rng(cfg.seed, images[i].0, g, c)).collect();
        sample_levels_with_features(params, sched, &features[i], &levels, &mut rngs)
    })?;
    let mut it = samples.into_iter();
    Ok(images
        .iter()
        .map(|_| Generations {
            levels: it.by_ref().take(n_gen).collect(),
        })
        .collect())
}

/// Single generation: all levels averaged and clamped.
pub fn predict_soft(image: &Map, key: u64, params: &ModelParams, sched: &NoiseSchedule, cfg: &InferenceConfig) -> Result<SoftMap> {
    let one = InferenceConfig {
        n_generations: 1,
        ..cfg.clone()
    };
    generate(&[(key, image)], params, sched, &one)?[0].generation(0)
}

/// Mean of `cfg.n_generations` independent [`predict_soft`]-style generations, clamped once.
pub fn ensemble_predict(image: &Map, key: u64, params: &ModelParams, sched: &NoiseSchedule, cfg: &InferenceConfig) -> Result<SoftMap> {
    generate(&[(key, image)], params, sched, cfg)?[0].ensemble(cfg.n_generations)
}

/// Mean soft Dice (in `[0, 1]`) of ensemble predictions against fraction maps.
pub fn mean_soft_dice(params: &ModelParams, sched: &NoiseSchedule, dataset: &Dataset, cfg: &InferenceConfig) -> Result<f64> {
    let images: Vec<(u64, &Map)> = dataset.samples.iter().map(|s| (image_key(&s.sample_id), s.image())).collect();
    let gens = generate(&images, params, sched, cfg)?;
    let mut total = 0.0;
    for (g, s) in gens.iter().zip(&dataset.samples) {
        total += soft_dice(&g.ensemble(cfg.n_generations)?, &fraction_map(s), &SOFT_DICE_THRESHOLDS)?;
    }
    Ok(total / dataset.len() as f64)
}
