//! Encoder, latent bottleneck and decoder.
//!
//! Encoder: patch embedding, `enc_depth` blocks, head to `c` channels (`2c`
//! in KL mode). With `enc_depth == 0` the encoder is a single affine map from
//! patch pixels to latent channels. Decoder: latent projection, `dec_depth`
//! blocks, head to `p*p*3` values per token.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{Tape, Var};
use crate::backbone::{block_forward, block_param_specs, dense, layer_norm_affine, AttnContext, BlockConfig};
use crate::checkpoint::Checkpoint;
use crate::error::{ensure, Error, Result};
use crate::imagedata::{Image, CHANNELS};
use crate::naflex::{unpatch_index, unpatchify, GridFit, PackedImage};
use crate::params::{Binder, Init, ParamSpec, ParameterStore};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    Kl,
    TanhNoise,
    #[serde(rename = "layernorm")]
    LayerNorm,
}

impl Regularizer {
    pub const ALL: [Regularizer; 3] = [Regularizer::Kl, Regularizer::TanhNoise, Regularizer::LayerNorm];

    pub fn name(self) -> &'static str {
        match self {
            Regularizer::Kl => "kl",
            Regularizer::TanhNoise => "tanh_noise",
            Regularizer::LayerNorm => "layernorm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "kl" => Ok(Regularizer::Kl),
            "tanh_noise" => Ok(Regularizer::TanhNoise),
            "layernorm" => Ok(Regularizer::LayerNorm),
            other => Err(Error::Unknown {
                kind: "regularizer",
                name: other.to_string(),
            }),
        }
    }

    /// β for KL, noise σ for tanh, unused for layernorm.
    pub fn default_param(self) -> f64 {
        match self {
            Regularizer::Kl | Regularizer::TanhNoise => 0.01,
            Regularizer::LayerNorm => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub width: usize,
    pub heads: usize,
    pub patch: usize,
    pub latent_channels: usize,
    pub regularizer: Regularizer,
    pub reg_param: f64,
    pub name: String,
    pub mlp_expansion: f64,
    pub mlp_multiple: usize,
    pub layerscale_init: f64,
    pub rope_base: f64,
}

fn default_expansion() -> f64 {
    8.0 / 3.0
}
fn default_multiple() -> usize {
    64
}
fn default_layerscale() -> f64 {
    1e-4
}
fn default_rope_base() -> f64 {
    10_000.0
}

/// `(width, dec_depth, heads)` per decoder scale.
pub const SCALES: [(&str, usize, usize, usize); 4] = [
    ("B", 768, 12, 12),
    ("L", 1024, 24, 16),
    ("G", 1408, 40, 16),
    ("T", 3072, 40, 24),
];

/// Config for a named decoder scale, e.g. `("B", 4, 16, 64, LayerNorm)` is
/// "Bd4-B/16x64".
pub fn make_config(scale: &str, enc_depth: usize, patch: usize, latent_channels: usize, regularizer: Regularizer) -> Result<ModelConfig> {
    let &(_, width, dec_depth, heads) = SCALES.iter().find(|s| s.0 == scale).ok_or_else(|| Error::Unknown {
        kind: "model scale",
        name: scale.to_string(),
    })?;
    let cfg = ModelConfig {
        enc_depth,
        dec_depth,
        width,
        heads,
        patch,
        latent_channels,
        regularizer,
        reg_param: regularizer.default_param(),
        name: format!("{scale}d{enc_depth}-{scale}/{patch}x{latent_channels}"),
        mlp_expansion: default_expansion(),
        mlp_multiple: default_multiple(),
        layerscale_init: default_layerscale(),
        rope_base: default_rope_base(),
    };
    cfg.validate()?;
    Ok(cfg)
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small model used by tests and the default CLI runs.
    pub fn desk() -> Self {
        Self {
            enc_depth: 2,
            dec_depth: 6,
            width: 128,
            heads: 4,
            patch: 8,
            latent_channels: 16,
            regularizer: Regularizer::LayerNorm,
            reg_param: 0.0,
            name: "desk-d2/8x16".to_string(),
            mlp_expansion: default_expansion(),
            mlp_multiple: default_multiple(),
            layerscale_init: default_layerscale(),
            rope_base: default_rope_base(),
        }
    }

    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            width: self.width,
            heads: self.heads,
            mlp_expansion: self.mlp_expansion,
            mlp_multiple: self.mlp_multiple,
            layerscale_init: self.layerscale_init,
            rope_base: self.rope_base,
        }
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * CHANNELS
    }

    /// Encoder head width: `2c` for KL (mean and log-variance), else `c`.
    pub fn head_channels(&self) -> usize {
        match self.regularizer {
            Regularizer::Kl => 2 * self.latent_channels,
            _ => self.latent_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.patch >= 1, InvalidArgument, "patch must be positive");
        ensure!(self.latent_channels >= 1, InvalidArgument, "latent_channels must be positive");
        ensure!(self.reg_param >= 0.0 && self.reg_param.is_finite(), InvalidArgument, "reg_param must be finite and non-negative");
        self.block().validate()?;
        if self.width < self.token_dim() {
            log::warn!(
                "{}: width {} is below the {} pixel values per token",
                self.name,
                self.width,
                self.token_dim()
            );
        }
        Ok(())
    }

    pub fn encoder_specs(&self) -> Vec<ParamSpec> {
        let (w, d, c) = (self.width, self.token_dim(), self.head_channels());
        if self.enc_depth == 0 {
            return vec![
                ParamSpec::new("enc.head.w", &[d, c], Init::Xavier),
                ParamSpec::new("enc.head.b", &[c], Init::Zeros),
            ];
        }
        let mut specs = vec![
            ParamSpec::new("enc.patch_embed.w", &[d, w], Init::Xavier),
            ParamSpec::new("enc.patch_embed.b", &[w], Init::Zeros),
        ];
        let block = self.block();
        for i in 0..self.enc_depth {
            specs.extend(block_param_specs(&format!("enc.blocks.{i}"), &block));
        }
        specs.extend([
            ParamSpec::new("enc.norm.g", &[w], Init::Constant(1.0)),
            ParamSpec::new("enc.norm.b", &[w], Init::Zeros),
            ParamSpec::new("enc.head.w", &[w, c], Init::Xavier),
            ParamSpec::new("enc.head.b", &[c], Init::Zeros),
        ]);
        specs
    }

    pub fn decoder_specs(&self) -> Vec<ParamSpec> {
        let (w, d, c) = (self.width, self.token_dim(), self.latent_channels);
        let mut specs = vec![
            ParamSpec::new("dec.latent_proj.w", &[c, w], Init::Xavier),
            ParamSpec::new("dec.latent_proj.b", &[w], Init::Zeros),
        ];
        let block = self.block();
        for i in 0..self.dec_depth {
            specs.extend(block_param_specs(&format!("dec.blocks.{i}"), &block));
        }
        specs.extend([
            ParamSpec::new("dec.norm.g", &[w], Init::Constant(1.0)),
            ParamSpec::new("dec.norm.b", &[w], Init::Zeros),
            ParamSpec::new("dec.head.w", &[w, d], Init::Normal(0.02)),
            ParamSpec::new("dec.head.b", &[d], Init::Constant(0.5)),
        ]);
        specs
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut s = self.encoder_specs();
        s.extend(self.decoder_specs());
        s
    }
}

/// `3 p^2 / c`: pixel values per latent dimension.
pub fn compression_ratio(patch: usize, latent_channels: usize) -> f64 {
    (CHANNELS * patch * patch) as f64 / latent_channels as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub encoder: u64,
    pub decoder: u64,
}

impl ParamCount {
    pub fn total(&self) -> u64 {
        self.encoder + self.decoder
    }
}

/// Exact scalar counts without allocating anything.
pub fn count_parameters(cfg: &ModelConfig) -> ParamCount {
    let sum = |s: Vec<ParamSpec>| s.iter().map(|p| p.numel() as u64).sum();
    ParamCount {
        encoder: sum(cfg.encoder_specs()),
        decoder: sum(cfg.decoder_specs()),
    }
}

/// Latent tokens for one image. `logvar` is present only for KL encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid<T> {
    pub latents: Tensor<T>,
    pub logvar: Option<Tensor<T>>,
    pub grid: GridFit,
}

impl<T: Scalar> LatentGrid<T> {
    pub fn new(latents: Tensor<T>, grid: GridFit) -> Result<Self> {
        ensure!(
            latents.rank() == 2 && latents.shape()[0] == grid.tokens(),
            Shape,
            "latents {:?} do not match a {}x{} grid",
            latents.shape(),
            grid.grid_h,
            grid.grid_w
        );
        ensure!(latents.is_finite(), NonFinite, "latent grid");
        Ok(Self { latents, logvar: None, grid })
    }

    pub fn channels(&self) -> usize {
        self.latents.shape()[1]
    }
}

pub fn context_for<T: Scalar>(cfg: &ModelConfig, grid: &GridFit, window: Option<usize>) -> Result<AttnContext<T>> {
    AttnContext::all_valid(grid.positions(), window, cfg.block().head_dim(), cfg.rope_base)
}

/// Encoder on the tape: `[N, p*p*3] -> [N, head_channels]`.
pub fn encode_tape<T: Scalar>(tape: &mut Tape<T>, p: &mut Binder<'_, T>, cfg: &ModelConfig, tokens: Var, ctx: &AttnContext<T>) -> Result<Var> {
    if cfg.enc_depth == 0 {
        return dense(tape, p, "enc.head", tokens);
    }
    let block = cfg.block();
    let mut x = dense(tape, p, "enc.patch_embed", tokens)?;
    for i in 0..cfg.enc_depth {
        x = block_forward(tape, p, &format!("enc.blocks.{i}"), x, ctx, &block)?;
    }
    let x = layer_norm_affine(tape, p, "enc.norm", x)?;
    dense(tape, p, "enc.head", x)
}

/// Bottleneck on the tape. Returns the latent and the regularization loss
/// (`None` when the mode has none). `rng == None` means inference: no noise
/// and KL uses the mean.
pub fn regularize_tape<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    h: Var,
    rng: Option<&mut R>,
) -> Result<(Var, Option<Var>)> {
    let (n, ch) = tape.value(h).dims2();
    ensure!(ch == cfg.head_channels(), Shape, "encoder output has {} channels, expected {}", ch, cfg.head_channels());
    let c = cfg.latent_channels;
    match cfg.regularizer {
        Regularizer::LayerNorm => Ok((tape.layer_norm(h), None)),
        Regularizer::TanhNoise => {
            let z = tape.tanh(h);
            match rng {
                Some(r) => {
                    let sigma = T::lit(cfg.reg_param);
                    let noise: Vec<T> = rng::normal_vec::<T, R>(r, n * c).into_iter().map(|e| e * sigma).collect();
                    let noise = tape.constant(Tensor::new(vec![n, c], noise)?);
                    Ok((tape.add(z, noise)?, None))
                }
                None => Ok((z, None)),
            }
        }
        Regularizer::Kl => {
            let cols = |off: usize| -> Vec<usize> { (0..n).flat_map(|i| (0..c).map(move |j| i * 2 * c + off + j)).collect() };
            let mu = tape.gather(h, cols(0), vec![n, c])?;
            let lv = tape.gather(h, cols(c), vec![n, c])?;
            let mu2 = tape.mul(mu, mu)?;
            let var = tape.exp(lv);
            let t = tape.add(mu2, var)?;
            let t = tape.sub(t, lv)?;
            let t = tape.add_scalar(t, -T::one());
            let m = tape.mean(t);
            let reg = tape.scale(m, T::lit(0.5 * cfg.reg_param));
            let z = match rng {
                Some(r) => {
                    let half = tape.scale(lv, T::lit(0.5));
                    let std = tape.exp(half);
                    let eps = tape.constant(Tensor::new(vec![n, c], rng::normal_vec::<T, R>(r, n * c))?);
                    let s = tape.mul(std, eps)?;
                    tape.add(mu, s)?
                }
                None => mu,
            };
            Ok((z, Some(reg)))
        }
    }
}

/// Decoder on the tape: `[N, c] -> [N, p*p*3]`.
pub fn decode_tape<T: Scalar>(tape: &mut Tape<T>, p: &mut Binder<'_, T>, cfg: &ModelConfig, z: Var, ctx: &AttnContext<T>) -> Result<Var> {
    let (_, c) = tape.value(z).dims2();
    ensure!(c == cfg.latent_channels, Shape, "latent has {} channels, decoder expects {}", c, cfg.latent_channels);
    let block = cfg.block();
    let mut x = dense(tape, p, "dec.latent_proj", z)?;
    for i in 0..cfg.dec_depth {
        x = block_forward(tape, p, &format!("dec.blocks.{i}"), x, ctx, &block)?;
    }
    let x = layer_norm_affine(tape, p, "dec.norm", x)?;
    dense(tape, p, "dec.head", x)
}

/// Token predictions `[N, p*p*3]` to the padded canvas `[H, W, 3]` on the tape.
pub fn unpatchify_tape<T: Scalar>(tape: &mut Tape<T>, tokens: Var, grid: &GridFit) -> Result<Var> {
    let (h, w) = (grid.canvas_h(), grid.canvas_w());
    let idx = unpatch_index(h, w, grid.patch)?;
    tape.gather(tokens, idx, vec![h, w, CHANNELS])
}

/// Encoder output for one packed image with full attention. KL encoders
/// return the mean as `latents` and the log-variance separately.
pub fn encode<T: Scalar>(packed: &PackedImage<T>, params: &ParameterStore<T>, cfg: &ModelConfig) -> Result<LatentGrid<T>> {
    encode_windowed(packed, params, cfg, None)
}

/// [`encode`] with optional windowed attention in the encoder blocks.
pub fn encode_windowed<T: Scalar>(
    packed: &PackedImage<T>,
    params: &ParameterStore<T>,
    cfg: &ModelConfig,
    window: Option<usize>,
) -> Result<LatentGrid<T>> {
    ensure!(packed.patch_size == cfg.patch, Shape, "image packed with patch {}, model uses {}", packed.patch_size, cfg.patch);
    let ctx = context_for(cfg, &packed.grid, window)?;
    let mut tape = Tape::new();
    let mut b = Binder::frozen(params);
    let x = tape.constant(packed.tokens.clone());
    let h = encode_tape(&mut tape, &mut b, cfg, x, &ctx)?;
    let h = tape.value(h);
    let (n, ch) = h.dims2();
    if cfg.regularizer == Regularizer::Kl {
        let c = ch / 2;
        let split = |off: usize| -> Vec<T> { (0..n).flat_map(|i| h.data()[i * ch + off..i * ch + off + c].to_vec()).collect() };
        let mut grid = LatentGrid::new(Tensor::new(vec![n, c], split(0))?, packed.grid)?;
        grid.logvar = Some(Tensor::new(vec![n, c], split(c))?);
        Ok(grid)
    } else {
        LatentGrid::new(h.clone(), packed.grid)
    }
}

/// Applies the bottleneck; `rng == None` is inference. Returns the
/// regularized latent and its loss (0 when the mode has none).
pub fn regularize_latent<T: Scalar, R: Rng + ?Sized>(z: &LatentGrid<T>, cfg: &ModelConfig, rng: Option<&mut R>) -> Result<(LatentGrid<T>, T)> {
    let mut tape = Tape::new();
    let h = match (&z.logvar, cfg.regularizer) {
        (Some(lv), Regularizer::Kl) => {
            let (n, c) = z.latents.dims2();
            let mut joined = Vec::with_capacity(2 * n * c);
            for i in 0..n {
                joined.extend_from_slice(&z.latents.data()[i * c..(i + 1) * c]);
                joined.extend_from_slice(&lv.data()[i * c..(i + 1) * c]);
            }
            Tensor::new(vec![n, 2 * c], joined)?
        }
        (None, Regularizer::Kl) => return Err(Error::InvalidArgument("KL regularizer needs a log-variance".into())),
        _ => z.latents.clone(),
    };
    let hv = tape.constant(h);
    let (zv, reg) = regularize_tape(&mut tape, cfg, hv, rng)?;
    let loss = reg.map(|r| tape.value(r).item()).unwrap_or_else(T::zero);
    Ok((LatentGrid::new(tape.value(zv).clone(), z.grid)?, loss))
}

/// Decodes a latent grid to the raw padded canvas `[H, W, 3]` (unclamped).
pub fn decode<T: Scalar>(z: &LatentGrid<T>, params: &ParameterStore<T>, cfg: &ModelConfig, window: Option<usize>) -> Result<Tensor<T>> {
    let ctx = context_for(cfg, &z.grid, window)?;
    let mut tape = Tape::new();
    let mut b = Binder::frozen(params);
    let zv = tape.constant(z.latents.clone());
    let out = decode_tape(&mut tape, &mut b, cfg, zv, &ctx)?;
    unpatchify(tape.value(out), &z.grid)
}

/// Clamps a raw canvas into an image.
pub fn canvas_to_image<T: Scalar>(canvas: &Tensor<T>) -> Result<Image<T>> {
    ensure!(canvas.rank() == 3 && canvas.shape()[2] == CHANNELS, Shape, "canvas must be [H, W, 3], got {:?}", canvas.shape());
    Image::from_raw_clamped(canvas.shape()[0], canvas.shape()[1], canvas.data())
}

/// Anything that maps a packed image back to a padded canvas.
pub trait Reconstructor<T: Scalar> {
    fn patch_size(&self) -> usize;

    /// Raw canvas `[H, W, 3]` and, if the model has one, the latent array.
    fn reconstruct(&self, packed: &PackedImage<T>, window: Option<usize>) -> Result<(Tensor<T>, Option<Tensor<T>>)>;
}

/// Trained or freshly initialized autoencoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder<T: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParameterStore<T>,
}

pub const AE_KIND: &str = "autoencoder";
pub const IDENTITY_KIND: &str = "identity-stub";

impl<T: Scalar> Autoencoder<T> {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = ParameterStore::init(&cfg.param_specs(), &mut rng::seeded(seed))?;
        Ok(Self { cfg, params })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(json!({"kind": AE_KIND, "model": self.cfg, "step": self.params.step}));
        ck.push_store("", &self.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ensure!(ck.kind() == Some(AE_KIND), Malformed, "checkpoint kind {:?} is not an autoencoder", ck.kind());
        let cfg: ModelConfig = serde_json::from_value(ck.config["model"].clone())?;
        cfg.validate()?;
        let mut params = ck.store::<T>("")?;
        params.step = ck.config["step"].as_u64().unwrap_or(0);
        let expected = ParameterStore::<T>::init(&cfg.param_specs(), &mut rng::seeded(0))?;
        ensure!(params.same_layout(&expected), Malformed, "checkpoint parameters do not match config {}", cfg.name);
        Ok(Self { cfg, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl<T: Scalar> Reconstructor<T> for Autoencoder<T> {
    fn patch_size(&self) -> usize {
        self.cfg.patch
    }

    fn reconstruct(&self, packed: &PackedImage<T>, window: Option<usize>) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let z = encode_windowed(packed, &self.params, &self.cfg, window)?;
        let (z, _) = regularize_latent::<T, rng::StreamRng>(&z, &self.cfg, None)?;
        let canvas = decode(&z, &self.params, &self.cfg, window)?;
        Ok((canvas, Some(z.latents)))
    }
}

/// Returns its input unchanged; exercises the evaluation path end to end.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IdentityStub {
    pub patch: usize,
}

impl IdentityStub {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(json!({"kind": IDENTITY_KIND, "patch": self.patch}))
    }
}

impl<T: Scalar> Reconstructor<T> for IdentityStub {
    fn patch_size(&self) -> usize {
        self.patch
    }

    fn reconstruct(&self, packed: &PackedImage<T>, _window: Option<usize>) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        Ok((packed.canvas(), None))
    }
}

/// Loads either an autoencoder or an identity stub checkpoint.
pub fn load_reconstructor<T: Scalar>(path: &Path) -> Result<Box<dyn Reconstructor<T>>> {
    let ck = Checkpoint::load(path)?;
    match ck.kind() {
        Some(AE_KIND) => Ok(Box::new(Autoencoder::<T>::from_checkpoint(&ck)?)),
        Some(IDENTITY_KIND) => {
            let patch = ck.config["patch"].as_u64().ok_or_else(|| Error::Malformed("identity stub without patch".into()))?;
            Ok(Box::new(IdentityStub { patch: patch as usize }))
        }
        other => Err(Error::Unknown {
            kind: "checkpoint kind",
            name: format!("{other:?}"),
        }),
    }
}
