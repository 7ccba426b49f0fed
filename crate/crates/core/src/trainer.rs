//! Optimization: AdamW with global-norm clipping, linear warmup into cosine
//! decay, and the two-stage token budget.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::autoencoder::{context_for, decode_tape, encode_tape, regularize_tape, unpatchify_tape, Autoencoder, LatentGrid};
use crate::error::{ensure, Error, Result};
use crate::flowgen::{flow_context, fm_loss_tape, FlowState};
use crate::imagedata::Image;
use crate::losses::{total_loss_tape, FrozenExtractor, LossBreakdown, LossWeights};
use crate::naflex::PackedImage;
use crate::params::{Binder, ParameterStore};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub warmup_fraction: f64,
    pub stage_split: f64,
    pub budgets: (usize, usize),
    pub seed: u64,
    /// Save a checkpoint every this many steps (0 disables periodic saves).
    pub checkpoint_every: usize,
    /// Random square crop side applied before budget fitting.
    pub crop: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            batch_size: 8,
            peak_lr: 5e-4,
            betas: (0.9, 0.95),
            weight_decay: 0.05,
            clip_norm: 1.0,
            warmup_fraction: 0.01,
            stage_split: 0.9,
            budgets: (256, 1024),
            seed: 0,
            checkpoint_every: 0,
            crop: None,
        }
    }
}

pub const ADAM_EPS: f64 = 1e-8;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.total_steps >= 1 && self.batch_size >= 1, InvalidArgument, "total_steps and batch_size must be positive");
        ensure!(self.stage_split > 0.0 && self.stage_split < 1.0, InvalidArgument, "stage_split {} outside (0, 1)", self.stage_split);
        ensure!(self.budgets.0 < self.budgets.1 && self.budgets.0 >= 1, InvalidArgument, "budgets {:?} must be strictly increasing", self.budgets);
        ensure!(self.clip_norm > 0.0, InvalidArgument, "clip_norm must be positive");
        ensure!(self.peak_lr > 0.0 && self.weight_decay >= 0.0, InvalidArgument, "peak_lr must be positive and weight_decay non-negative");
        ensure!((0.0..1.0).contains(&self.warmup_fraction), InvalidArgument, "warmup_fraction outside [0, 1)");
        ensure!(
            (0.0..1.0).contains(&self.betas.0) && (0.0..1.0).contains(&self.betas.1),
            InvalidArgument,
            "betas {:?} outside [0, 1)",
            self.betas
        );
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        ((self.warmup_fraction * self.total_steps as f64).round() as usize).max(1)
    }
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay to 0 at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_steps();
    let total = cfg.total_steps;
    if step <= warm || total <= warm {
        return cfg.peak_lr * (step.min(warm) as f64) / warm as f64;
    }
    let progress = (step.min(total) - warm) as f64 / (total - warm) as f64;
    cfg.peak_lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// First budget while `step / total < stage_split`, the second from there on.
pub fn budget_at(step: usize, cfg: &TrainConfig) -> usize {
    if (step as f64) / (cfg.total_steps as f64) < cfg.stage_split {
        cfg.budgets.0
    } else {
        cfg.budgets.1
    }
}

/// First and second moments per parameter plus the update count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
    pub t: u64,
}

/// Global gradient norm over every parameter.
pub fn grad_norm<T: Scalar>(store: &ParameterStore<T>) -> f64 {
    store
        .iter()
        .map(|(_, p)| p.grad.data().iter().map(|g| g.to_f64_lossy().powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Clips the stored gradients to `clip_norm`, then applies one AdamW update
/// with decoupled decay. Returns the pre-clip gradient norm.
pub fn adamw_step<T: Scalar>(store: &mut ParameterStore<T>, state: &mut AdamState<T>, lr: f64, cfg: &TrainConfig) -> Result<f64> {
    for (name, p) in store.iter() {
        if !p.grad.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    let norm = grad_norm(store);
    let clip = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
    state.t += 1;
    let (b1, b2) = cfg.betas;
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    let (tb1, tb2, tclip, tlr, twd, teps) = (T::lit(b1), T::lit(b2), T::lit(clip), T::lit(lr), T::lit(cfg.weight_decay), T::lit(ADAM_EPS));
    let (tbc1, tbc2) = (T::lit(bc1), T::lit(bc2));
    let one = T::one();
    for (name, p) in store.iter_mut() {
        let n = p.value.numel();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
        ensure!(m.len() == n && v.len() == n, Shape, "optimizer state for {} has the wrong size", name);
        let grad = p.grad.data().to_vec();
        for (((w, g), mi), vi) in p.value.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = g * tclip;
            *mi = tb1 * *mi + (one - tb1) * g;
            *vi = tb2 * *vi + (one - tb2) * g * g;
            let mhat = *mi / tbc1;
            let vhat = *vi / tbc2;
            *w = *w - tlr * twd * *w - tlr * mhat / (vhat.sqrt() + teps);
        }
    }
    store.step += 1;
    Ok(norm)
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub budget: usize,
    pub loss_total: f64,
    pub loss_char: f64,
    pub loss_ssim: f64,
    pub loss_perc: f64,
    pub loss_reg: f64,
    pub grad_norm: f64,
}

/// Where training writes its side outputs.
#[derive(Default)]
pub struct TrainOutputs<'a> {
    /// Receives one JSON object per line.
    pub log: Option<&'a mut dyn Write>,
    /// Directory for periodic and final checkpoints.
    pub checkpoint_dir: Option<&'a Path>,
}

impl TrainOutputs<'_> {
    fn write_log(&mut self, rec: &StepLog) -> Result<()> {
        if let Some(w) = self.log.as_mut() {
            let line = serde_json::to_string(rec)?;
            writeln!(w, "{line}").map_err(|e| Error::io("<training log>", e))?;
        }
        Ok(())
    }
}

/// Sample order: consecutive seeded permutations of the dataset, one per epoch.
pub struct EpochOrder {
    seed: u64,
    n: usize,
    epoch: u64,
    perm: Vec<usize>,
    pos: usize,
}

impl EpochOrder {
    pub fn new(seed: u64, n: usize) -> Self {
        let mut s = Self {
            seed,
            n,
            epoch: 0,
            perm: Vec::new(),
            pos: 0,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        let mut r = rng::stream(self.seed, self.epoch, u64::MAX);
        self.perm = rng::permutation(&mut r, self.n);
        self.pos = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.n {
                    self.epoch += 1;
                    self.reshuffle();
                }
                self.pos += 1;
                self.perm[self.pos - 1]
            })
            .collect()
    }
}

fn random_crop<T: Scalar, R: Rng + ?Sized>(img: &Image<T>, side: usize, rng: &mut R) -> Result<Image<T>> {
    let (h, w) = (side.min(img.height()), side.min(img.width()));
    let y = rng.gen_range(0..=img.height() - h);
    let x = rng.gen_range(0..=img.width() - w);
    img.crop(y, x, h, w)
}

fn checkpoint_path(dir: &Path, prefix: &str, step: Option<usize>) -> std::path::PathBuf {
    match step {
        Some(s) => dir.join(format!("{prefix}_step{s:06}.vtkf")),
        None => dir.join(format!("{prefix}_final.vtkf")),
    }
}

/// Loss and breakdown of one batch, accumulated into the store's gradients.
fn ae_batch<T: Scalar>(
    ae: &mut Autoencoder<T>,
    images: &[&Image<T>],
    step: usize,
    budget: usize,
    tcfg: &TrainConfig,
    weights: &LossWeights,
    extractor: Option<&FrozenExtractor<T>>,
) -> Result<LossBreakdown> {
    let cfg = ae.cfg.clone();
    let mut tape = Tape::new();
    let mut binder = Binder::trainable(&ae.params);
    let inv = 1.0 / images.len() as f64;
    let mut total = None;
    let mut mean = LossBreakdown::default();
    for (i, img) in images.iter().enumerate() {
        let mut r = rng::stream(tcfg.seed, step as u64, i as u64);
        let cropped;
        let img = match tcfg.crop {
            Some(side) => {
                cropped = random_crop(img, side, &mut r)?;
                &cropped
            }
            None => *img,
        };
        let packed = PackedImage::pack(img, cfg.patch, budget)?;
        let ctx = context_for(&cfg, &packed.grid, None)?;
        let tokens = tape.constant(packed.tokens.clone());
        let h = encode_tape(&mut tape, &mut binder, &cfg, tokens, &ctx)?;
        let (z, reg) = regularize_tape(&mut tape, &cfg, h, Some(&mut r))?;
        let out = decode_tape(&mut tape, &mut binder, &cfg, z, &ctx)?;
        let canvas = unpatchify_tape(&mut tape, out, &packed.grid)?;
        let target = tape.constant(packed.canvas());
        let (loss, b) = total_loss_tape(&mut tape, target, canvas, &packed.pad_mask, reg, weights, extractor, &mut r)?;
        mean.add_scaled(&b, inv);
        total = Some(match total {
            None => loss,
            Some(acc) => tape.add(acc, loss)?,
        });
    }
    let total = tape.scale(total.expect("non-empty batch"), T::lit(inv));
    let grads = tape.backward(total)?;
    let bound = binder.finish();
    ae.params.zero_grad();
    bound.accumulate(&grads, &mut ae.params, T::one())?;
    Ok(mean)
}

/// Trains `ae` in place. The log gets one record per step; checkpoints go to
/// `outputs.checkpoint_dir` every `checkpoint_every` steps and at the end.
/// A non-finite loss aborts before the update, leaving earlier checkpoints.
pub fn train_autoencoder<T: Scalar>(
    ae: &mut Autoencoder<T>,
    data: &[Image<T>],
    tcfg: &TrainConfig,
    weights: &LossWeights,
    extractor: Option<&FrozenExtractor<T>>,
    outputs: &mut TrainOutputs<'_>,
) -> Result<Vec<StepLog>> {
    tcfg.validate()?;
    ensure!(!data.is_empty(), InvalidArgument, "empty training set");
    if let Some(e) = extractor {
        weights.validate(e.config().patch)?;
    }
    let mut order = EpochOrder::new(tcfg.seed, data.len());
    let mut adam = AdamState::default();
    let mut logs = Vec::with_capacity(tcfg.total_steps);
    for step in 1..=tcfg.total_steps {
        let lr = lr_at(step, tcfg);
        let budget = budget_at(step, tcfg);
        let batch: Vec<&Image<T>> = order.next_batch(tcfg.batch_size).into_iter().map(|i| &data[i]).collect();
        let b = ae_batch(ae, &batch, step, budget, tcfg, weights, extractor)?;
        let norm = adamw_step(&mut ae.params, &mut adam, lr, tcfg)?;
        let rec = StepLog {
            step,
            lr,
            budget,
            loss_total: b.total,
            loss_char: b.char,
            loss_ssim: b.ssim,
            loss_perc: b.perc,
            loss_reg: b.reg,
            grad_norm: norm,
        };
        log::debug!("ae step {step}: loss {:.6} lr {:.3e} budget {budget}", b.total, lr);
        outputs.write_log(&rec)?;
        logs.push(rec);
        if let Some(dir) = outputs.checkpoint_dir {
            if tcfg.checkpoint_every > 0 && step % tcfg.checkpoint_every == 0 && step < tcfg.total_steps {
                ae.save(&checkpoint_path(dir, "ae", Some(step)))?;
            }
        }
    }
    if let Some(dir) = outputs.checkpoint_dir {
        ae.save(&checkpoint_path(dir, "ae", None))?;
    }
    Ok(logs)
}

/// Trains the flow model on fixed `(latent, label)` pairs; EMA is updated
/// after every optimizer step.
pub fn train_flow<T: Scalar>(
    state: &mut FlowState<T>,
    data: &[(LatentGrid<T>, usize)],
    tcfg: &TrainConfig,
    outputs: &mut TrainOutputs<'_>,
) -> Result<Vec<StepLog>> {
    tcfg.validate()?;
    ensure!(!data.is_empty(), InvalidArgument, "empty latent set");
    for (z, label) in data {
        ensure!(*label < state.cfg.class_count, InvalidArgument, "label {} outside 0..{}", label, state.cfg.class_count);
        ensure!(z.channels() == state.cfg.latent_channels, Shape, "latents have {} channels, flow expects {}", z.channels(), state.cfg.latent_channels);
    }
    let mut order = EpochOrder::new(tcfg.seed, data.len());
    let mut adam = AdamState::default();
    let mut logs = Vec::with_capacity(tcfg.total_steps);
    for step in 1..=tcfg.total_steps {
        let lr = lr_at(step, tcfg);
        let idx = order.next_batch(tcfg.batch_size);
        let cfg = state.cfg.clone();
        let mut tape = Tape::new();
        let mut binder = Binder::trainable(&state.params);
        let mut total = None;
        let mut tokens = 0;
        for (i, &k) in idx.iter().enumerate() {
            let (z, label) = &data[k];
            tokens = z.grid.tokens();
            let ctx = flow_context(&cfg, z.grid.grid_h, z.grid.grid_w)?;
            let mut r = rng::stream(tcfg.seed, step as u64, i as u64);
            let l = fm_loss_tape(&mut tape, &mut binder, &cfg, &z.latents, *label, &ctx, &mut r)?;
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        let loss = tape.scale(total.expect("non-empty batch"), T::lit(1.0 / idx.len() as f64));
        let value = tape.value(loss).item().to_f64_lossy();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("flow loss at step {step}")));
        }
        let grads = tape.backward(loss)?;
        let bound = binder.finish();
        state.params.zero_grad();
        bound.accumulate(&grads, &mut state.params, T::one())?;
        let norm = adamw_step(&mut state.params, &mut adam, lr, tcfg)?;
        state.ema_update(state.cfg.ema_decay)?;
        state.step += 1;
        let rec = StepLog {
            step,
            lr,
            budget: tokens,
            loss_total: value,
            loss_char: 0.0,
            loss_ssim: 0.0,
            loss_perc: 0.0,
            loss_reg: 0.0,
            grad_norm: norm,
        };
        outputs.write_log(&rec)?;
        logs.push(rec);
        if let Some(dir) = outputs.checkpoint_dir {
            if tcfg.checkpoint_every > 0 && step % tcfg.checkpoint_every == 0 && step < tcfg.total_steps {
                state.save(&checkpoint_path(dir, "flow", Some(step)))?;
            }
        }
    }
    if let Some(dir) = outputs.checkpoint_dir {
        state.save(&checkpoint_path(dir, "flow", None))?;
    }
    Ok(logs)
}
