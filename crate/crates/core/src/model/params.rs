use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Residual scaling inside dense blocks and around each RRDB.
pub(crate) const RRDB_RESIDUAL_SCALE: f64 = 0.2;
/// Extra init gain applied to dense-block convolutions.
const RRDB_INIT_GAIN: f64 = 0.1;
const EMBED_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
enum Init {
    /// `N(0, gain^2 * 2 / fan_in)`.
    FanIn { fan_in: usize, gain: f64 },
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvP {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LinearP {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct NormP {
    pub g: usize,
    pub b: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct ResBlockP {
    pub norm1: NormP,
    pub conv1: ConvP,
    pub emb1: LinearP,
    pub emb2: LinearP,
    pub norm2: NormP,
    pub conv2: ConvP,
    pub skip: Option<ConvP>,
}

#[derive(Clone, Debug)]
pub(crate) struct AttnP {
    pub norm: NormP,
    pub q: ConvP,
    pub k: ConvP,
    pub v: ConvP,
    pub out: ConvP,
}

#[derive(Clone, Debug)]
pub(crate) struct ImageEncoderP {
    pub conv_in: ConvP,
    /// `rrdbs[i][j]` is dense block `j` of RRDB `i`; each dense block has five convs.
    pub rrdbs: Vec<[Vec<ConvP>; 3]>,
    pub trunk: ConvP,
    pub hidden: ConvP,
    pub conv_out: ConvP,
}

#[derive(Clone, Debug)]
pub(crate) struct StageP {
    pub blocks: Vec<(ResBlockP, Option<AttnP>)>,
    /// Downsample (encoder) or post-upsample (decoder) conv.
    pub resample: Option<ConvP>,
}

/// Parameter indices of every layer, derived deterministically from the config.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub lut_t: usize,
    pub lut_c: usize,
    pub mask_in: ConvP,
    pub image: ImageEncoderP,
    pub encoder: Vec<StageP>,
    pub mid: (ResBlockP, AttnP, ResBlockP),
    pub decoder: Vec<StageP>,
    pub out_norm: NormP,
    pub out_conv: ConvP,
}

struct Builder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }

    fn conv_gain(&mut self, name: &str, cin: usize, cout: usize, k: usize, gain: f64) -> ConvP {
        let init = if gain == 0.0 {
            Init::Zeros
        } else {
            Init::FanIn {
                fan_in: cin * k * k,
                gain,
            }
        };
        ConvP {
            w: self.push(format!("{name}.weight"), vec![cout, cin, k, k], init),
            b: self.push(format!("{name}.bias"), vec![cout], Init::Zeros),
        }
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> ConvP {
        self.conv_gain(name, cin, cout, k, 1.0)
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize) -> LinearP {
        LinearP {
            w: self.push(
                format!("{name}.weight"),
                vec![fout, fin],
                Init::FanIn { fan_in: fin, gain: 1.0 },
            ),
            b: self.push(format!("{name}.bias"), vec![fout], Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> NormP {
        NormP {
            g: self.push(format!("{name}.gamma"), vec![c], Init::Ones),
            b: self.push(format!("{name}.beta"), vec![c], Init::Zeros),
        }
    }

    fn res_block(&mut self, name: &str, cin: usize, cout: usize, d: usize) -> ResBlockP {
        ResBlockP {
            norm1: self.norm(&format!("{name}.norm1"), cin),
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3),
            emb1: self.linear(&format!("{name}.emb1"), d, d),
            emb2: self.linear(&format!("{name}.emb2"), d, cout),
            norm2: self.norm(&format!("{name}.norm2"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1)),
        }
    }

    fn attn(&mut self, name: &str, c: usize) -> AttnP {
        AttnP {
            norm: self.norm(&format!("{name}.norm"), c),
            q: self.conv(&format!("{name}.q"), c, c, 1),
            k: self.conv(&format!("{name}.k"), c, c, 1),
            v: self.conv(&format!("{name}.v"), c, c, 1),
            out: self.conv(&format!("{name}.out"), c, c, 1),
        }
    }

    fn dense_block(&mut self, name: &str, ch: usize, growth: usize) -> Vec<ConvP> {
        (0..5)
            .map(|i| {
                let cout = if i == 4 { ch } else { growth };
                self.conv_gain(&format!("{name}.conv{}", i + 1), ch + i * growth, cout, 3, RRDB_INIT_GAIN)
            })
            .collect()
    }
}

impl Layout {
    fn build(cfg: &ModelConfig) -> (Self, Vec<(String, Vec<usize>, Init)>) {
        let mut b = Builder { specs: Vec::new() };
        let l = cfg.base_channels;
        let d = cfg.embed_dim;
        let lut_t = b.push("lut_t".into(), vec![cfg.timesteps, d], Init::Normal(EMBED_STD));
        let lut_c = b.push("lut_c".into(), vec![cfg.consensus_levels, d], Init::Normal(EMBED_STD));
        let mask_in = b.conv("mask_in", 1, l, 3);

        let growth = cfg.growth();
        let image = ImageEncoderP {
            conv_in: b.conv("image.conv_in", 1, l, 3),
            rrdbs: (0..cfg.rrdb_blocks)
                .map(|i| {
                    [0, 1, 2].map(|j| b.dense_block(&format!("image.rrdb{i}.rdb{j}"), l, growth))
                })
                .collect(),
            trunk: b.conv("image.trunk", l, l, 3),
            hidden: b.conv("image.hidden", l, l, 3),
            conv_out: b.conv("image.conv_out", l, l, 3),
        };

        let mut skips = vec![l];
        let mut ch = l;
        let mut encoder = Vec::new();
        for lvl in 0..cfg.depth {
            let out = cfg.level_channels(lvl);
            let mut blocks = Vec::new();
            for r in 0..cfg.res_blocks {
                let name = format!("enc{lvl}.res{r}");
                let res = b.res_block(&name, ch, out, d);
                ch = out;
                let attn = cfg.attends_at(lvl).then(|| b.attn(&format!("{name}.attn"), ch));
                blocks.push((res, attn));
                skips.push(ch);
            }
            let resample = (lvl + 1 < cfg.depth).then(|| {
                skips.push(ch);
                b.conv(&format!("enc{lvl}.down"), ch, ch, 3)
            });
            encoder.push(StageP { blocks, resample });
        }

        let mid = (
            b.res_block("mid.res0", ch, ch, d),
            b.attn("mid.attn", ch),
            b.res_block("mid.res1", ch, ch, d),
        );

        let mut decoder = Vec::new();
        for lvl in (0..cfg.depth).rev() {
            let out = cfg.level_channels(lvl);
            let mut blocks = Vec::new();
            for r in 0..=cfg.res_blocks {
                let skip = skips.pop().expect("one skip per decoder block");
                let name = format!("dec{lvl}.res{r}");
                let res = b.res_block(&name, ch + skip, out, d);
                ch = out;
                let attn = cfg.attends_at(lvl).then(|| b.attn(&format!("{name}.attn"), ch));
                blocks.push((res, attn));
            }
            let resample = (lvl > 0).then(|| b.conv(&format!("dec{lvl}.up"), ch, ch, 3));
            decoder.push(StageP { blocks, resample });
        }
        debug_assert!(skips.is_empty());

        let out_norm = b.norm("out.norm", ch);
        let out_conv = b.conv_gain("out.conv", ch, 1, 3, 0.0);
        (
            Self {
                lut_t,
                lut_c,
                mask_in,
                image,
                encoder,
                mid,
                decoder,
                out_norm,
                out_conv,
            },
            b.specs,
        )
    }
}

/// Named learnable tensors of the denoiser plus the layer layout.
#[derive(Clone, Debug)]
pub struct ModelParams<T: Scalar = f32> {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    pub(crate) layout: Layout,
}

impl<T: Scalar> PartialEq for ModelParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.names == other.names && self.tensors == other.tensors
    }
}

/// Deterministic initialization: fan-in scaled normal conv/linear weights,
/// `N(0, 0.02^2)` embeddings, zero biases, zero output conv.
pub fn init_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let (layout, specs) = Layout::build(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::with_capacity(specs.len());
    let mut tensors = Vec::with_capacity(specs.len());
    for (name, shape, init) in specs {
        let t = match init {
            Init::FanIn { fan_in, gain } => Tensor::randn(shape, gain * (2.0 / fan_in as f64).sqrt(), &mut rng),
            Init::Normal(std) => Tensor::randn(shape, std, &mut rng),
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, T::one()),
        };
        names.push(name);
        tensors.push(t);
    }
    Ok(ModelParams {
        config: config.clone(),
        names,
        tensors,
        layout,
    })
}

impl<T: Scalar> ModelParams<T> {
    /// Assembles parameters from named tensors, checking names and shapes against the config.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = Layout::build(config);
        let mut by_name: HashMap<String, Tensor<T>> = named.into_iter().collect();
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (name, shape, _) in specs {
            let t = by_name
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, config expects {shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            tensors.push(t);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            layout: self.layout.clone(),
        }
    }
}
