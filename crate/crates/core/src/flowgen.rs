//! Class-conditional flow matching over latent grids.
//!
//! The velocity model is a stack of AdaLN-zero blocks: self-attention with
//! 2D RoPE, cross-attention to a single class token, and a SwiGLU MLP, each
//! on a modulated pre-norm and gated by the conditioning. Modulation and
//! output heads start at zero, so the initial velocity field is exactly 0.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{Tape, Var};
use crate::autoencoder::{canvas_to_image, decode, Autoencoder, LatentGrid};
use crate::backbone::{attention_layer, attention_param_specs, dense, hidden_dim, swiglu, swiglu_param_specs, AttnContext};
use crate::checkpoint::Checkpoint;
use crate::error::{ensure, Result};
use crate::imagedata::Image;
use crate::naflex::GridFit;
use crate::params::{Binder, Init, ParamSpec, ParameterStore};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub class_count: usize,
    pub cfg_dropout: f64,
    pub ema_decay: f64,
    pub latent_channels: usize,
    pub mlp_expansion: f64,
    pub mlp_multiple: usize,
    pub rope_base: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            width: 128,
            heads: 4,
            class_count: 4,
            cfg_dropout: 0.1,
            ema_decay: 0.99,
            latent_channels: 16,
            mlp_expansion: 8.0 / 3.0,
            mlp_multiple: 64,
            rope_base: 10_000.0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.width >= 1 && self.heads >= 1 && self.width.is_multiple_of(self.heads), InvalidArgument, "width {} not divisible by {} heads", self.width, self.heads);
        ensure!((self.width / self.heads).is_multiple_of(4), InvalidArgument, "head_dim must be divisible by 4");
        ensure!(self.width.is_multiple_of(2), InvalidArgument, "width must be even for the timestep embedding");
        ensure!((0.0..1.0).contains(&self.cfg_dropout), InvalidArgument, "cfg_dropout {} outside [0, 1)", self.cfg_dropout);
        ensure!((0.0..=1.0).contains(&self.ema_decay), InvalidArgument, "ema_decay {} outside [0, 1]", self.ema_decay);
        ensure!(self.class_count >= 1 && self.latent_channels >= 1, InvalidArgument, "class_count and latent_channels must be positive");
        Ok(())
    }

    /// Index of the unconditional class token.
    pub fn null_label(&self) -> usize {
        self.class_count
    }

    fn hidden(&self) -> usize {
        hidden_dim(self.width, self.mlp_expansion, self.mlp_multiple)
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (w, c) = (self.width, self.latent_channels);
        let mut s = vec![
            ParamSpec::new("in_proj.w", &[c, w], Init::Xavier),
            ParamSpec::new("in_proj.b", &[w], Init::Zeros),
            ParamSpec::new("t_emb.fc1.w", &[w, w], Init::Xavier),
            ParamSpec::new("t_emb.fc1.b", &[w], Init::Zeros),
            ParamSpec::new("t_emb.fc2.w", &[w, w], Init::Xavier),
            ParamSpec::new("t_emb.fc2.b", &[w], Init::Zeros),
            ParamSpec::new("class_emb", &[self.class_count + 1, w], Init::Normal(0.02)),
        ];
        for i in 0..self.depth {
            let p = format!("blocks.{i}");
            s.push(ParamSpec::new(format!("{p}.ada.w"), &[w, 6 * w], Init::Zeros));
            s.push(ParamSpec::new(format!("{p}.ada.b"), &[6 * w], Init::Zeros));
            s.extend(attention_param_specs(&format!("{p}.attn"), w, w / self.heads));
            for name in ["v", "out"] {
                s.push(ParamSpec::new(format!("{p}.cross.{name}.w"), &[w, w], Init::Xavier));
                s.push(ParamSpec::new(format!("{p}.cross.{name}.b"), &[w], Init::Zeros));
            }
            s.extend(swiglu_param_specs(&format!("{p}.mlp"), w, self.hidden()));
        }
        s.extend([
            ParamSpec::new("final.ada.w", &[w, 2 * w], Init::Zeros),
            ParamSpec::new("final.ada.b", &[2 * w], Init::Zeros),
            ParamSpec::new("head.w", &[w, c], Init::Zeros),
            ParamSpec::new("head.b", &[c], Init::Zeros),
        ]);
        s
    }

    /// Multiply-accumulate count of one forward pass over `tokens` tokens.
    pub fn forward_macs(&self, tokens: usize) -> f64 {
        let (n, w, c, hd) = (tokens as f64, self.width as f64, self.latent_channels as f64, self.hidden() as f64);
        let per_block = n * (4.0 * w * w + 2.0 * n * w + 2.0 * w * w + 3.0 * w * hd) + 6.0 * w * w;
        n * c * w + 2.0 * w * w + self.depth as f64 * per_block + 2.0 * w * w + n * w * c
    }

    /// Training FLOPs per sample counting forward and backward (3x forward,
    /// 2 FLOPs per multiply-accumulate).
    pub fn train_flops(&self, tokens: usize) -> f64 {
        6.0 * self.forward_macs(tokens)
    }
}

/// Sinusoidal embedding of `t` (scaled by 1000) into `width` channels.
pub fn timestep_embedding<T: Scalar>(t: f64, width: usize) -> Tensor<T> {
    let half = width / 2;
    let mut data = Vec::with_capacity(width);
    let freqs: Vec<f64> = (0..half).map(|k| (-(10_000f64.ln()) * k as f64 / half as f64).exp()).collect();
    data.extend(freqs.iter().map(|f| T::lit((1000.0 * t * f).cos())));
    data.extend(freqs.iter().map(|f| T::lit((1000.0 * t * f).sin())));
    Tensor::new(vec![1, width], data).expect("embedding layout")
}

fn broadcast_rows<T: Scalar>(tape: &mut Tape<T>, row: Var, rows: usize) -> Result<Var> {
    let w = tape.value(row).numel();
    let idx = (0..rows).flat_map(|_| 0..w).collect();
    tape.gather(row, idx, vec![rows, w])
}

fn chunk<T: Scalar>(tape: &mut Tape<T>, v: Var, k: usize, w: usize) -> Result<Var> {
    tape.gather(v, (k * w..(k + 1) * w).collect(), vec![w])
}

/// `LN(x) * (1 + scale) + shift`.
fn modulate<T: Scalar>(tape: &mut Tape<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = tape.layer_norm(x);
    let s = tape.add_scalar(scale, T::one());
    let y = tape.mul_row(n, s)?;
    tape.add_row(y, shift)
}

pub fn flow_context<T: Scalar>(cfg: &FlowConfig, grid_h: usize, grid_w: usize) -> Result<AttnContext<T>> {
    let positions = GridFit::exact(grid_h, grid_w, 1).positions();
    AttnContext::all_valid(positions, None, cfg.width / cfg.heads, cfg.rope_base)
}

/// Velocity field on the tape for latents `z` of shape `[N, c]`.
pub fn velocity_tape<T: Scalar>(
    tape: &mut Tape<T>,
    p: &mut Binder<'_, T>,
    cfg: &FlowConfig,
    z: Var,
    t: f64,
    label: usize,
    ctx: &AttnContext<T>,
) -> Result<Var> {
    ensure!(label <= cfg.class_count, InvalidArgument, "label {} outside 0..={}", label, cfg.class_count);
    ensure!((0.0..=1.0).contains(&t), InvalidArgument, "t = {} outside [0, 1]", t);
    let (n, c) = tape.value(z).dims2();
    ensure!(c == cfg.latent_channels, Shape, "latent has {} channels, flow expects {}", c, cfg.latent_channels);
    let w = cfg.width;

    let temb = tape.constant(timestep_embedding(t, w));
    let h = dense(tape, p, "t_emb.fc1", temb)?;
    let h = tape.silu(h);
    let temb = dense(tape, p, "t_emb.fc2", h)?;
    let table = p.get(tape, "class_emb")?;
    let cls = tape.gather(table, (label * w..(label + 1) * w).collect(), vec![1, w])?;
    let cond = tape.add(temb, cls)?;
    let cond_act = tape.silu(cond);

    let mut x = dense(tape, p, "in_proj", z)?;
    for i in 0..cfg.depth {
        let pre = format!("blocks.{i}");
        let m = dense(tape, p, &format!("{pre}.ada"), cond_act)?;
        let parts = (0..6).map(|k| chunk(tape, m, k, w)).collect::<Result<Vec<_>>>()?;

        let h = modulate(tape, x, parts[0], parts[1])?;
        let a = attention_layer(tape, p, &format!("{pre}.attn"), h, ctx, cfg.heads)?;
        let a = tape.mul_row(a, parts[2])?;
        x = tape.add(x, a)?;

        // A single key gets softmax weight 1, so cross-attention reduces to
        // the projected value of the class token at every query.
        let v = dense(tape, p, &format!("{pre}.cross.v"), cls)?;
        let v = dense(tape, p, &format!("{pre}.cross.out"), v)?;
        let v = broadcast_rows(tape, v, n)?;
        x = tape.add(x, v)?;

        let h = modulate(tape, x, parts[3], parts[4])?;
        let f = swiglu(tape, p, &format!("{pre}.mlp"), h)?;
        let f = tape.mul_row(f, parts[5])?;
        x = tape.add(x, f)?;
    }
    let m = dense(tape, p, "final.ada", cond_act)?;
    let (shift, scale) = (chunk(tape, m, 0, w)?, chunk(tape, m, 1, w)?);
    let h = modulate(tape, x, shift, scale)?;
    dense(tape, p, "head", h)
}

/// Inference-only velocity for a latent grid.
pub fn velocity<T: Scalar>(z: &LatentGrid<T>, t: f64, label: usize, params: &ParameterStore<T>, cfg: &FlowConfig) -> Result<Tensor<T>> {
    let ctx = flow_context(cfg, z.grid.grid_h, z.grid.grid_w)?;
    velocity_raw(&z.latents, t, label, params, cfg, &ctx)
}

fn velocity_raw<T: Scalar>(z: &Tensor<T>, t: f64, label: usize, params: &ParameterStore<T>, cfg: &FlowConfig, ctx: &AttnContext<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let mut b = Binder::frozen(params);
    let zv = tape.constant(z.clone());
    let v = velocity_tape(&mut tape, &mut b, cfg, zv, t, label, ctx)?;
    Ok(tape.value(v).clone())
}

/// Draws `(t, z0, label')` and returns the flow-matching MSE on the tape.
#[allow(clippy::too_many_arguments)]
pub fn fm_loss_tape<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    p: &mut Binder<'_, T>,
    cfg: &FlowConfig,
    z1: &Tensor<T>,
    label: usize,
    ctx: &AttnContext<T>,
    rng: &mut R,
) -> Result<Var> {
    ensure!(z1.is_finite(), NonFinite, "flow target latents");
    let t: f64 = rng.gen();
    let z0 = rng::normal_vec::<T, R>(rng, z1.numel());
    let label = if rng.gen::<f64>() < cfg.cfg_dropout { cfg.null_label() } else { label };
    let tt = T::lit(t);
    let zt: Vec<T> = z0.iter().zip(z1.data()).map(|(&a, &b)| (T::one() - tt) * a + tt * b).collect();
    let target: Vec<T> = z0.iter().zip(z1.data()).map(|(&a, &b)| b - a).collect();
    let zt = tape.constant(Tensor::new(z1.shape().to_vec(), zt)?);
    let target = tape.constant(Tensor::new(z1.shape().to_vec(), target)?);
    let v = velocity_tape(tape, p, cfg, zt, t, label, ctx)?;
    tape.mse(v, target)
}

/// Value of the flow-matching loss for one latent grid.
pub fn fm_loss<T: Scalar, R: Rng + ?Sized>(z1: &LatentGrid<T>, label: usize, params: &ParameterStore<T>, cfg: &FlowConfig, rng: &mut R) -> Result<T> {
    let ctx = flow_context(cfg, z1.grid.grid_h, z1.grid.grid_w)?;
    let mut tape = Tape::new();
    let mut b = Binder::frozen(params);
    let l = fm_loss_tape(&mut tape, &mut b, cfg, &z1.latents, label, &ctx, rng)?;
    Ok(tape.value(l).item())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleOptions {
    pub steps: usize,
    pub cfg_scale: f64,
    /// Evaluate both branches and blend even when the scale is 1.
    pub force_blend: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            steps: 50,
            cfg_scale: 4.0,
            force_blend: false,
        }
    }
}

/// Euler integration from `t = 0` to `t = 1` with classifier-free guidance.
pub fn euler_sample<T: Scalar, R: Rng + ?Sized>(
    label: usize,
    opts: &SampleOptions,
    grid: GridFit,
    params: &ParameterStore<T>,
    cfg: &FlowConfig,
    rng: &mut R,
) -> Result<LatentGrid<T>> {
    ensure!(opts.steps >= 1, InvalidArgument, "steps must be at least 1");
    ensure!(opts.cfg_scale >= 0.0 && opts.cfg_scale.is_finite(), InvalidArgument, "cfg_scale must be finite and non-negative");
    let ctx = flow_context(cfg, grid.grid_h, grid.grid_w)?;
    let shape = vec![grid.tokens(), cfg.latent_channels];
    let mut z = Tensor::new(shape.clone(), rng::normal_vec::<T, R>(rng, grid.tokens() * cfg.latent_channels))?;
    let dt = T::one() / T::from_usize(opts.steps).unwrap();
    let s = T::lit(opts.cfg_scale);
    for k in 0..opts.steps {
        let t = k as f64 / opts.steps as f64;
        let vc = velocity_raw(&z, t, label, params, cfg, &ctx)?;
        let v = if opts.cfg_scale == 1.0 && !opts.force_blend {
            vc
        } else {
            let vu = velocity_raw(&z, t, cfg.null_label(), params, cfg, &ctx)?;
            let d = vu.data().iter().zip(vc.data()).map(|(&u, &c)| u + s * (c - u)).collect();
            Tensor::new(shape.clone(), d)?
        };
        for (zi, &vi) in z.data_mut().iter_mut().zip(v.data()) {
            *zi += dt * vi;
        }
    }
    LatentGrid::new(z, grid)
}

/// Live weights and their moving average.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState<T: Scalar> {
    pub cfg: FlowConfig,
    pub params: ParameterStore<T>,
    pub ema: ParameterStore<T>,
    pub step: u64,
}

pub const FLOW_KIND: &str = "flow";

impl<T: Scalar> FlowState<T> {
    pub fn init(cfg: FlowConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = ParameterStore::init(&cfg.param_specs(), &mut rng::seeded(seed))?;
        let ema = params.clone();
        Ok(Self { cfg, params, ema, step: 0 })
    }

    /// `ema <- decay * ema + (1 - decay) * live` for every parameter.
    pub fn ema_update(&mut self, decay: f64) -> Result<()> {
        ensure!(self.ema.same_layout(&self.params), Shape, "EMA and live parameters drifted apart");
        let (d, e) = (T::lit(decay), T::lit(1.0 - decay));
        let live: Vec<&[T]> = self.params.iter().map(|(_, p)| p.value.data()).collect();
        for ((_, ep), lv) in self.ema.iter_mut().zip(live) {
            for (a, &b) in ep.value.data_mut().iter_mut().zip(lv) {
                *a = d * *a + e * b;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(json!({"kind": FLOW_KIND, "flow": self.cfg, "step": self.step}));
        ck.push_store("live.", &self.params);
        ck.push_store("ema.", &self.ema);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ensure!(ck.kind() == Some(FLOW_KIND), Malformed, "checkpoint kind {:?} is not a flow model", ck.kind());
        let cfg: FlowConfig = serde_json::from_value(ck.config["flow"].clone())?;
        cfg.validate()?;
        let params = ck.store::<T>("live.")?;
        let ema = ck.store::<T>("ema.")?;
        let expected = ParameterStore::<T>::init(&cfg.param_specs(), &mut rng::seeded(0))?;
        ensure!(params.same_layout(&expected) && ema.same_layout(&expected), Malformed, "flow checkpoint does not match its config");
        let step = ck.config["step"].as_u64().unwrap_or(0);
        Ok(Self { cfg, params, ema, step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Samples one latent grid per label with the EMA weights and decodes it.
pub fn generate_images<T: Scalar>(
    ae: &Autoencoder<T>,
    state: &FlowState<T>,
    labels: &[usize],
    grid_h: usize,
    grid_w: usize,
    opts: &SampleOptions,
    seed: u64,
) -> Result<Vec<Image<T>>> {
    ensure!(
        ae.cfg.latent_channels == state.cfg.latent_channels,
        Shape,
        "autoencoder has {} latent channels, flow has {}",
        ae.cfg.latent_channels,
        state.cfg.latent_channels
    );
    let grid = GridFit::exact(grid_h, grid_w, ae.cfg.patch);
    labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let mut r = rng::stream(seed, 0, i as u64);
            let z = euler_sample(label, opts, grid, &state.ema, &state.cfg, &mut r)?;
            let canvas = decode(&z, &ae.params, &ae.cfg, None)?;
            canvas_to_image(&canvas)
        })
        .collect()
}
