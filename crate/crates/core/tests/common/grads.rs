//! One gradient check per differentiable operation, parameterized by a case
//! index that picks the shape, masking and seed.

use std::rc::Rc;

use vitok::autoencoder::{decode_tape, encode_tape, ModelConfig, Regularizer};
use vitok::backbone::{
    block_forward, block_param_specs, rope_tape, scaled_dot_attention, swiglu, swiglu_param_specs, AttnContext, BlockConfig, RopeTable,
};
use vitok::flowgen::{flow_context, velocity_tape, FlowConfig};
use vitok::losses::{charbonnier_tape, perceptual_tile_loss_tape, ssim_loss_tape, ExtractorConfig, FrozenExtractor, LossWeights};
use vitok::naflex::PixelMask;
use vitok::params::ParameterStore;
use vitok::rng;

use super::{grad_check, grid_positions, jitter, project, randn, uniform, CheckReport};

pub const CASES: usize = 5;
const PARAM_COORDS: usize = 120;

pub type CheckFn = fn(usize) -> CheckReport;

pub const SUITE: [(&str, CheckFn); 11] = [
    ("swiglu", check_swiglu),
    ("attention_full", check_attention_full),
    ("attention_swa", check_attention_swa),
    ("rope", check_rope),
    ("block", check_block),
    ("encode", check_encode),
    ("decode", check_decode),
    ("charbonnier", check_charbonnier),
    ("ssim_loss", check_ssim),
    ("perceptual_tile_loss", check_perceptual),
    ("velocity", check_velocity),
];

const GRIDS: [(usize, usize); CASES] = [(2, 3), (3, 3), (1, 5), (4, 2), (3, 4)];

fn seed(case: usize, salt: u64) -> u64 {
    salt.wrapping_mul(1000) + case as u64
}

/// Valid-token pattern; odd cases drop the last token and one interior one.
fn validity(case: usize, n: usize) -> Vec<bool> {
    let mut v = vec![true; n];
    if case % 2 == 1 && n > 2 {
        v[n - 1] = false;
        v[n / 2] = false;
    }
    v
}

fn store(specs: &[vitok::params::ParamSpec], seed: u64, jitter_std: f64) -> ParameterStore<f64> {
    let mut s = ParameterStore::init(specs, &mut rng::seeded(seed)).unwrap();
    if jitter_std > 0.0 {
        jitter(&mut s, jitter_std, seed ^ 0xABCD);
    }
    s
}

pub fn check_swiglu(case: usize) -> CheckReport {
    let (n, w, hidden) = (2 + case, 3 + 2 * case, 4 + case);
    let s = store(&swiglu_param_specs("mlp", w, hidden), seed(case, 1), 0.2);
    let x = randn(&[n, w], seed(case, 2), 1.0);
    grad_check(&s, &[x], PARAM_COORDS, |tape, p, v| {
        let y = swiglu(tape, p, "mlp", v[0])?;
        project(tape, y, 7)
    })
}

fn attention_case(case: usize, window: Option<usize>) -> CheckReport {
    let (gh, gw) = GRIDS[case];
    let heads = 1 + case % 2;
    let hd = 4;
    let n = gh * gw;
    let ctx = AttnContext::<f64>::new(grid_positions(gh, gw), validity(case, n), window, hd, 100.0).unwrap();
    let inputs: Vec<_> = (0..3).map(|k| randn(&[n, heads * hd], seed(case, 10 + k), 1.0)).collect();
    grad_check(&ParameterStore::new(), &inputs, 0, |tape, _, v| {
        let o = scaled_dot_attention(tape, v[0], v[1], v[2], &ctx, heads)?;
        project(tape, o, 11)
    })
}

pub fn check_attention_full(case: usize) -> CheckReport {
    attention_case(case, None)
}

pub fn check_attention_swa(case: usize) -> CheckReport {
    attention_case(case, Some(1))
}

pub fn check_rope(case: usize) -> CheckReport {
    let (gh, gw) = GRIDS[case];
    let hd = 4 * (1 + case % 2);
    let heads = 1 + case / 2;
    let positions: Vec<(i32, i32)> = grid_positions(gh, gw).into_iter().map(|(y, x)| (y - 1, 2 * x - 3)).collect();
    let table = Rc::new(RopeTable::<f64>::new(&positions, hd, 100.0).unwrap());
    let x = randn(&[positions.len(), heads * hd], seed(case, 20), 1.0);
    grad_check(&ParameterStore::new(), &[x], 0, |tape, _, v| {
        let y = rope_tape(tape, v[0], &table)?;
        project(tape, y, 21)
    })
}

fn toy_block() -> BlockConfig {
    BlockConfig {
        mlp_multiple: 4,
        rope_base: 100.0,
        ..BlockConfig::new(8, 2)
    }
}

pub fn check_block(case: usize) -> CheckReport {
    let (gh, gw) = GRIDS[case];
    let cfg = toy_block();
    let window = (case >= 3).then_some(1);
    let ctx = AttnContext::<f64>::new(grid_positions(gh, gw), validity(case, gh * gw), window, cfg.head_dim(), cfg.rope_base).unwrap();
    let s = store(&block_param_specs("b", &cfg), seed(case, 30), 0.3);
    let x = randn(&[gh * gw, cfg.width], seed(case, 31), 1.0);
    grad_check(&s, &[x], PARAM_COORDS, |tape, p, v| {
        let y = block_forward(tape, p, "b", v[0], &ctx, &cfg)?;
        project(tape, y, 32)
    })
}

fn toy_model(case: usize) -> ModelConfig {
    ModelConfig {
        enc_depth: 1,
        dec_depth: 1 + case % 2,
        width: 8,
        heads: 2,
        patch: 2,
        latent_channels: 3,
        regularizer: if case.is_multiple_of(2) { Regularizer::Kl } else { Regularizer::LayerNorm },
        reg_param: 0.01,
        name: "grad-toy".into(),
        mlp_multiple: 4,
        rope_base: 100.0,
        ..ModelConfig::desk()
    }
}

pub fn check_encode(case: usize) -> CheckReport {
    let (gh, gw) = GRIDS[case];
    let cfg = toy_model(case);
    let window = (case >= 3).then_some(1);
    let ctx = AttnContext::<f64>::new(grid_positions(gh, gw), validity(case, gh * gw), window, cfg.block().head_dim(), cfg.rope_base).unwrap();
    let s = store(&cfg.encoder_specs(), seed(case, 40), 0.3);
    let tokens = uniform(&[gh * gw, cfg.token_dim()], seed(case, 41), 0.0, 1.0);
    grad_check(&s, &[tokens], PARAM_COORDS, |tape, p, v| {
        let h = encode_tape(tape, p, &cfg, v[0], &ctx)?;
        project(tape, h, 42)
    })
}

pub fn check_decode(case: usize) -> CheckReport {
    let (gh, gw) = GRIDS[case];
    let cfg = toy_model(case);
    let window = (case >= 3).then_some(1);
    let ctx = AttnContext::<f64>::all_valid(grid_positions(gh, gw), window, cfg.block().head_dim(), cfg.rope_base).unwrap();
    let s = store(&cfg.decoder_specs(), seed(case, 50), 0.3);
    let z = randn(&[gh * gw, cfg.latent_channels], seed(case, 51), 1.0);
    grad_check(&s, &[z], PARAM_COORDS, |tape, p, v| {
        let y = decode_tape(tape, p, &cfg, v[0], &ctx)?;
        project(tape, y, 52)
    })
}

fn image_mask(h: usize, w: usize, case: usize) -> PixelMask {
    if case.is_multiple_of(2) {
        PixelMask::full(h, w)
    } else {
        PixelMask::rect(h, w, h - 1, w - 2)
    }
}

pub fn check_charbonnier(case: usize) -> CheckReport {
    let (h, w) = (2 + case, 3 + 2 * case);
    let mask = image_mask(h, w, case);
    let x = uniform(&[h, w, 3], seed(case, 60), 0.0, 1.0);
    let y = uniform(&[h, w, 3], seed(case, 61), 0.0, 1.0);
    grad_check(&ParameterStore::new(), &[x, y], 0, |tape, _, v| charbonnier_tape(tape, v[0], v[1], &mask))
}

pub fn check_ssim(case: usize) -> CheckReport {
    let (h, w) = (13 + case, 14 + (case * 2) % 5);
    let mask = image_mask(h, w, case);
    let x = uniform(&[h, w, 3], seed(case, 70), 0.0, 1.0);
    let mut y = x.clone();
    let noise = randn(&[h, w, 3], seed(case, 71), 0.2);
    for (a, b) in y.data_mut().iter_mut().zip(noise.data()) {
        *a += b;
    }
    grad_check(&ParameterStore::new(), &[x, y], 0, |tape, _, v| ssim_loss_tape(tape, v[0], v[1], &mask))
}

pub fn toy_extractor(seed: u64) -> FrozenExtractor<f64> {
    FrozenExtractor::new(ExtractorConfig {
        patch: 4,
        width: 8,
        depth: 2,
        heads: 2,
        taps: vec![1, 2],
        seed,
        input: 8,
    })
    .unwrap()
}

pub fn check_perceptual(case: usize) -> CheckReport {
    // Cases 0, 1, 4 crop tiles directly; 2 and 3 go through the resize path.
    let (h, w) = [(10, 12), (9, 11), (6, 7), (8, 5), (12, 9)][case];
    let mask = image_mask(h, w, case);
    let ex = toy_extractor(seed(case, 80));
    let weights = LossWeights {
        tile: 8,
        tiles_per_image: 1 + case % 2,
        ..LossWeights::default()
    };
    let x = uniform(&[h, w, 3], seed(case, 81), 0.0, 1.0);
    let y = uniform(&[h, w, 3], seed(case, 82), 0.0, 1.0);
    grad_check(&ParameterStore::new(), &[x, y], 0, |tape, _, v| {
        let mut r = rng::seeded(seed(case, 83));
        perceptual_tile_loss_tape(tape, v[0], v[1], &mask, &ex, &weights, &mut r)
    })
}

pub fn check_velocity(case: usize) -> CheckReport {
    let (gh, gw) = GRIDS[case];
    let cfg = FlowConfig {
        depth: 1 + case % 2,
        width: 8,
        heads: 2,
        class_count: 3,
        latent_channels: 3,
        mlp_multiple: 4,
        rope_base: 100.0,
        ..FlowConfig::default()
    };
    let ctx = flow_context::<f64>(&cfg, gh, gw).unwrap();
    let s = store(&cfg.param_specs(), seed(case, 90), 0.3);
    let z = randn(&[gh * gw, cfg.latent_channels], seed(case, 91), 1.0);
    let t = 0.1 + 0.2 * case as f64;
    let label = case % (cfg.class_count + 1);
    grad_check(&s, &[z], PARAM_COORDS, |tape, p, v| {
        let y = velocity_tape(tape, p, &cfg, v[0], t, label, &ctx)?;
        project(tape, y, 92)
    })
}
