//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Three operations are exposed: the noise schedule curves, a synthetic
//! multi-annotator sample with its consensus levels and fraction map, and
//! forward noising of a consensus level at a chosen timestep.

use consensus_diffusion::consensus::{build_consensus_stack, fraction_map, AnnotationSet};
use consensus_diffusion::data::{synthesize, SynthSpec};
use consensus_diffusion::diffusion::{forward_noise, NoiseSchedule};
use consensus_diffusion::eval::pairwise_dice;
use consensus_diffusion::rng;
use consensus_diffusion::tensor::Tensor;
use wasm_bindgen::prelude::*;

fn js_err(e: consensus_diffusion::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// `[beta_1..beta_T, alpha_bar_1..alpha_bar_T, beta_tilde_1..beta_tilde_T]`.
#[wasm_bindgen]
pub fn schedule_curves(steps: usize) -> Result<Vec<f64>, JsError> {
    let s = NoiseSchedule::new(steps).map_err(js_err)?;
    Ok([s.betas(), s.alpha_bars(), s.beta_tildes()].concat())
}

/// One synthetic image with its annotators, consensus stack and fraction map.
#[wasm_bindgen]
pub struct Sample {
    set: AnnotationSet,
    schedule: NoiseSchedule,
}

#[wasm_bindgen]
impl Sample {
    #[wasm_bindgen(constructor)]
    pub fn new(
        seed: u64,
        size: usize,
        annotators: usize,
        radial_noise: f64,
        offset_noise: f64,
        timesteps: usize,
    ) -> Result<Sample, JsError> {
        let spec = SynthSpec {
            count: 1,
            test_count: 0,
            image_size: size,
            annotators,
            radial_noise,
            offset_noise,
            seed,
            ..SynthSpec::default()
        };
        let set = synthesize(&spec).map_err(js_err)?.remove(0);
        let schedule = NoiseSchedule::new(timesteps).map_err(js_err)?;
        Ok(Sample { set, schedule })
    }

    pub fn size(&self) -> usize {
        self.set.dims().0
    }

    pub fn annotators(&self) -> usize {
        self.set.annotator_count()
    }

    pub fn image(&self) -> Vec<f32> {
        self.set.image().data().to_vec()
    }

    /// Mask of annotator `i` (0-based) as 0/1 values.
    pub fn annotator(&self, i: usize) -> Vec<f32> {
        self.set.masks().get(i).map(|m| m.to_map().into_data()).unwrap_or_default()
    }

    /// Consensus level `c` (1-based): pixels marked by at least `c` annotators.
    pub fn consensus(&self, c: usize) -> Result<Vec<f32>, JsError> {
        let stack = build_consensus_stack(&self.set);
        Ok(stack.level(c).map_err(js_err)?.to_map().into_data())
    }

    pub fn fraction(&self) -> Vec<f32> {
        fraction_map(&self.set).into_map().into_data()
    }

    /// Mean Dice over annotator pairs in `[0, 100]`; NaN with one annotator.
    pub fn pairwise_dice(&self) -> f64 {
        pairwise_dice(std::slice::from_ref(&self.set)).map_or(f64::NAN, |d| 100.0 * d)
    }

    /// Consensus level `c` noised to step `t` with a fixed noise draw per `noise_seed`.
    pub fn noised(&self, c: usize, t: usize, noise_seed: u64) -> Result<Vec<f32>, JsError> {
        let x0 = build_consensus_stack(&self.set).level(c).map_err(js_err)?.to_map().into_data();
        let mut r = rng::stream(noise_seed, &[c as u64]);
        let eps = Tensor::<f32>::randn(vec![x0.len()], 1.0, &mut r).into_data();
        forward_noise(&x0, t, &eps, &self.schedule).map_err(js_err)
    }
}
