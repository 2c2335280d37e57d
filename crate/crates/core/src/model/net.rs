use std::cell::RefCell;

use super::params::{AttnP, ConvP, ImageEncoderP, LinearP, ModelParams, NormP, ResBlockP, RRDB_RESIDUAL_SCALE};
use crate::error::{Error, Result};
use crate::tensor::{AttentionVars, Scalar, Tape, Var};

pub(crate) const LEAKY_SLOPE: f64 = 0.2;

/// One entry of the activation trace: layer name and output shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerTrace {
    pub layer: String,
    pub shape: Vec<usize>,
}

/// Model parameters bound to a tape; evaluates the denoiser and its pieces.
pub struct Net<'p, T: Scalar> {
    params: &'p ModelParams<T>,
    vars: Vec<Var>,
    trace: Option<RefCell<Vec<LayerTrace>>>,
}

impl<'p, T: Scalar> Net<'p, T> {
    /// Registers every parameter on `tape`; `trainable` controls gradient tracking.
    pub fn bind(params: &'p ModelParams<T>, tape: &mut Tape<'p, T>, trainable: bool) -> Self {
        let vars = params
            .tensors()
            .iter()
            .map(|t| if trainable { tape.param(t) } else { tape.constant_ref(t) })
            .collect();
        Self {
            params,
            vars,
            trace: None,
        }
    }

    /// Records the output shape of every attention layer and stage.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(RefCell::new(Vec::new()));
        self
    }

    pub fn trace(&self) -> Vec<LayerTrace> {
        self.trace.as_ref().map(|t| t.borrow().clone()).unwrap_or_default()
    }

    fn log(&self, tape: &Tape<'p, T>, layer: impl Into<String>, v: Var) {
        if let Some(t) = &self.trace {
            t.borrow_mut().push(LayerTrace {
                layer: layer.into(),
                shape: tape.value(v).shape().to_vec(),
            });
        }
    }

    /// Var bound to parameter `index`, in [`ModelParams::names`] order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn params(&self) -> &'p ModelParams<T> {
        self.params
    }

    fn v(&self, i: usize) -> Var {
        self.vars[i]
    }

    fn conv(&self, tape: &mut Tape<'p, T>, x: Var, p: ConvP, stride: usize) -> Result<Var> {
        let k = tape.value(self.v(p.w)).shape()[2];
        tape.conv2d(x, self.v(p.w), Some(self.v(p.b)), stride, k / 2)
    }

    fn linear(&self, tape: &mut Tape<'p, T>, x: Var, p: LinearP) -> Result<Var> {
        tape.linear(x, self.v(p.w), Some(self.v(p.b)))
    }

    fn norm(&self, tape: &mut Tape<'p, T>, x: Var, p: NormP) -> Result<Var> {
        tape.group_norm(x, self.v(p.g), self.v(p.b))
    }

    fn norm_act_conv(&self, tape: &mut Tape<'p, T>, x: Var, n: NormP, c: ConvP) -> Result<Var> {
        let h = self.norm(tape, x, n)?;
        let h = tape.silu(h);
        self.conv(tape, h, c, 1)
    }

    /// Looks up `z_t = LUT_t[t]` and `z_c = LUT_c[c]` for 1-based indices.
    pub fn embed(&self, tape: &mut Tape<'p, T>, t: &[usize], c: &[usize]) -> Result<(Var, Var)> {
        let cfg = self.params.config();
        let rows = |idx: &[usize], max: usize, what: &'static str| -> Result<Vec<usize>> {
            idx.iter()
                .map(|&i| {
                    if i == 0 || i > max {
                        Err(Error::OutOfRange { what, index: i, max })
                    } else {
                        Ok(i - 1)
                    }
                })
                .collect()
        };
        let rt = rows(t, cfg.timesteps, "timestep")?;
        let rc = rows(c, cfg.consensus_levels, "consensus level")?;
        let lay = &self.params.layout;
        let zt = tape.embedding(self.v(lay.lut_t), &rt)?;
        let zc = tape.embedding(self.v(lay.lut_c), &rc)?;
        Ok((zt, zc))
    }

    fn check_input(&self, tape: &Tape<'p, T>, x: Var, what: &str) -> Result<usize> {
        let s = self.params.config().image_size;
        let (n, c, h, w) = tape.value(x).dims4()?;
        if c != 1 || h != s || w != s {
            return Err(Error::shape(
                "model input",
                format!(
                    "{what} has shape {:?}, expected [N, 1, {s}, {s}]",
                    tape.value(x).shape()
                ),
            ));
        }
        Ok(n)
    }

    fn dense_block(&self, tape: &mut Tape<'p, T>, x: Var, convs: &[ConvP]) -> Result<Var> {
        let slope = T::of(LEAKY_SLOPE);
        let mut acc = x;
        for (i, &c) in convs.iter().enumerate() {
            let y = self.conv(tape, acc, c, 1)?;
            if i + 1 == convs.len() {
                let y = tape.scale(y, T::of(RRDB_RESIDUAL_SCALE));
                return tape.add(y, x);
            }
            let y = tape.leaky_relu(y, slope);
            acc = tape.concat(acc, y)?;
        }
        unreachable!("dense block has five convs")
    }

    /// Image encoder `G(I)`: `[N,1,H,W]` -> `[N,L,H,W]`.
    pub fn encode_image(&self, tape: &mut Tape<'p, T>, image: Var) -> Result<Var> {
        self.check_input(tape, image, "image")?;
        let p: &ImageEncoderP = &self.params.layout.image;
        let fea = self.conv(tape, image, p.conv_in, 1)?;
        let mut trunk = fea;
        for rrdb in &p.rrdbs {
            let mut h = trunk;
            for rdb in rrdb {
                h = self.dense_block(tape, h, rdb)?;
            }
            let h = tape.scale(h, T::of(RRDB_RESIDUAL_SCALE));
            trunk = tape.add(h, trunk)?;
        }
        let trunk = self.conv(tape, trunk, p.trunk, 1)?;
        let fea = tape.add(fea, trunk)?;
        let fea = self.conv(tape, fea, p.hidden, 1)?;
        let fea = tape.leaky_relu(fea, T::of(LEAKY_SLOPE));
        let out = self.conv(tape, fea, p.conv_out, 1)?;
        self.log(tape, "image_encoder", out);
        Ok(out)
    }

    fn res_block(&self, tape: &mut Tape<'p, T>, x: Var, emb: Var, p: &ResBlockP) -> Result<Var> {
        let h = self.norm_act_conv(tape, x, p.norm1, p.conv1)?;
        let e = self.linear(tape, emb, p.emb1)?;
        let e = tape.silu(e);
        let e = self.linear(tape, e, p.emb2)?;
        let h = tape.add_channel(h, e)?;
        let h = self.norm_act_conv(tape, h, p.norm2, p.conv2)?;
        let skip = match p.skip {
            Some(c) => self.conv(tape, x, c, 1)?,
            None => x,
        };
        tape.add(skip, h)
    }

    fn attn(&self, tape: &mut Tape<'p, T>, x: Var, p: &AttnP) -> Result<Var> {
        let pair = |c: ConvP| (self.v(c.w), self.v(c.b));
        let vars = AttentionVars {
            norm: Some((self.v(p.norm.g), self.v(p.norm.b))),
            q: pair(p.q),
            k: pair(p.k),
            v: pair(p.v),
            out: pair(p.out),
        };
        tape.attention(x, self.params.config().heads, &vars)
    }

    /// `D(E(F(x_t) + G(I), z), z)` with `z = z_t + z_c`, given precomputed `G(I)`.
    pub fn denoise(
        &self,
        tape: &mut Tape<'p, T>,
        x_t: Var,
        image_features: Var,
        z_t: Var,
        z_c: Var,
    ) -> Result<Var> {
        let n = self.check_input(tape, x_t, "x_t")?;
        let lay = &self.params.layout;
        let cfg = self.params.config();
        let feat_shape = [n, cfg.base_channels, cfg.image_size, cfg.image_size];
        if tape.value(image_features).shape() != feat_shape {
            return Err(Error::shape(
                "denoise",
                format!(
                    "image features {:?}, expected {feat_shape:?}",
                    tape.value(image_features).shape()
                ),
            ));
        }
        let emb = tape.add(z_t, z_c)?;
        let f = self.conv(tape, x_t, lay.mask_in, 1)?;
        let mut h = tape.add(f, image_features)?;
        let mut skips = vec![h];
        for (lvl, stage) in lay.encoder.iter().enumerate() {
            for (r, (res, attn)) in stage.blocks.iter().enumerate() {
                h = self.res_block(tape, h, emb, res)?;
                if let Some(a) = attn {
                    h = self.attn(tape, h, a)?;
                    self.log(tape, format!("enc{lvl}.res{r}.attn"), h);
                }
                skips.push(h);
            }
            if let Some(down) = stage.resample {
                h = self.conv(tape, h, down, 2)?;
                skips.push(h);
            }
            self.log(tape, format!("enc{lvl}"), h);
        }
        h = self.res_block(tape, h, emb, &lay.mid.0)?;
        h = self.attn(tape, h, &lay.mid.1)?;
        self.log(tape, "mid.attn", h);
        h = self.res_block(tape, h, emb, &lay.mid.2)?;
        let depth = lay.decoder.len();
        for (i, stage) in lay.decoder.iter().enumerate() {
            let lvl = depth - 1 - i;
            for (r, (res, attn)) in stage.blocks.iter().enumerate() {
                let skip = skips.pop().ok_or_else(|| Error::shape("decoder", "skip stack exhausted"))?;
                let cat = tape.concat(h, skip).map_err(|e| {
                    Error::shape("decoder", format!("dec{lvl}.res{r}: {e}"))
                })?;
                h = self.res_block(tape, cat, emb, res)?;
                if let Some(a) = attn {
                    h = self.attn(tape, h, a)?;
                    self.log(tape, format!("dec{lvl}.res{r}.attn"), h);
                }
            }
            if let Some(up) = stage.resample {
                h = tape.upsample2x(h)?;
                h = self.conv(tape, h, up, 1)?;
            }
            self.log(tape, format!("dec{lvl}"), h);
        }
        let h = self.norm(tape, h, lay.out_norm)?;
        let h = tape.silu(h);
        self.conv(tape, h, lay.out_conv, 1)
    }

    /// Noise prediction `epsilon_theta(x_t, I, z_t, z_c)` for 1-based `t` and `c` per batch item.
    pub fn epsilon_theta(
        &self,
        tape: &mut Tape<'p, T>,
        x_t: Var,
        image: Var,
        t: &[usize],
        c: &[usize],
    ) -> Result<Var> {
        let n = self.check_input(tape, x_t, "x_t")?;
        if t.len() != n || c.len() != n {
            return Err(Error::shape(
                "epsilon_theta",
                format!("batch {n} but {} timesteps and {} levels", t.len(), c.len()),
            ));
        }
        let g = self.encode_image(tape, image)?;
        let (zt, zc) = self.embed(tape, t, c)?;
        self.denoise(tape, x_t, g, zt, zc)
    }
}
