//! Transformer machinery shared by the autoencoder, the flow model and the
//! frozen feature extractor.
//!
//! Blocks are pre-norm: `x + ls1 * Attn(LN(x))`, then `x + ls2 * MLP(LN(x))`.
//! Attention normalizes Q and K per head (RMS), rotates them with axial 2D
//! RoPE and attends either globally or within a square Chebyshev window on
//! the token grid.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_in_place, Backward, Tape, Var};
use crate::error::{ensure, Result};
use crate::params::{Binder, Init, ParamSpec, ParameterStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub width: usize,
    pub heads: usize,
    pub mlp_expansion: f64,
    /// SwiGLU hidden size is rounded to a multiple of this.
    pub mlp_multiple: usize,
    pub layerscale_init: f64,
    pub rope_base: f64,
}

impl BlockConfig {
    pub fn new(width: usize, heads: usize) -> Self {
        Self {
            width,
            heads,
            mlp_expansion: 8.0 / 3.0,
            mlp_multiple: 64,
            layerscale_init: 1e-4,
            rope_base: 10_000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.width >= 1 && self.heads >= 1, InvalidArgument, "width and heads must be positive");
        ensure!(self.width.is_multiple_of(self.heads), InvalidArgument, "width {} not divisible by {} heads", self.width, self.heads);
        ensure!(self.head_dim().is_multiple_of(4), InvalidArgument, "head_dim {} must be divisible by 4 for 2D RoPE", self.head_dim());
        ensure!(self.mlp_expansion > 0.0 && self.mlp_multiple >= 1, InvalidArgument, "mlp expansion must be positive");
        ensure!(self.rope_base > 1.0, InvalidArgument, "rope_base must exceed 1");
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        hidden_dim(self.width, self.mlp_expansion, self.mlp_multiple)
    }
}

/// `width * expansion` rounded to the nearest positive multiple of `multiple`.
pub fn hidden_dim(width: usize, expansion: f64, multiple: usize) -> usize {
    let k = (width as f64 * expansion / multiple as f64).round().max(1.0);
    k as usize * multiple
}

/// Tokens with grid coordinates and validity flags.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch<T> {
    pub values: Tensor<T>,
    pub positions: Vec<(i32, i32)>,
    pub valid: Vec<bool>,
}

impl<T: Scalar> TokenBatch<T> {
    pub fn new(values: Tensor<T>, positions: Vec<(i32, i32)>, valid: Vec<bool>) -> Result<Self> {
        let (rows, _) = values.dims2();
        ensure!(
            positions.len() == rows && valid.len() == rows,
            Shape,
            "{} tokens but {} positions and {} flags",
            rows,
            positions.len(),
            valid.len()
        );
        Ok(Self { values, positions, valid })
    }
}

/// Cos/sin of every rotation angle, `[tokens, head_dim / 2]`.
///
/// Pair `j` of a head vector is `(2j, 2j + 1)`. The first `head_dim / 4`
/// pairs rotate with the row coordinate and the rest with the column
/// coordinate, at frequencies `base^(-2k / (head_dim / 2))`.
#[derive(Debug)]
pub struct RopeTable<T> {
    head_dim: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> RopeTable<T> {
    pub fn new(positions: &[(i32, i32)], head_dim: usize, base: f64) -> Result<Self> {
        ensure!(head_dim >= 4 && head_dim.is_multiple_of(4), InvalidArgument, "head_dim {} must be divisible by 4 for 2D RoPE", head_dim);
        let quarter = head_dim / 4;
        let half = head_dim / 2;
        let freqs: Vec<f64> = (0..quarter).map(|k| base.powf(-(2.0 * k as f64) / half as f64)).collect();
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &(r, c) in positions {
            for coord in [r, c] {
                for &f in &freqs {
                    let a = coord as f64 * f;
                    cos.push(T::lit(a.cos()));
                    sin.push(T::lit(a.sin()));
                }
            }
        }
        Ok(Self { head_dim, cos, sin })
    }

    fn rotate(&self, data: &mut [T], width: usize, inverse: bool) {
        let half = self.head_dim / 2;
        for (i, row) in data.chunks_mut(width).enumerate() {
            let (cs, sn) = (&self.cos[i * half..(i + 1) * half], &self.sin[i * half..(i + 1) * half]);
            for head in row.chunks_mut(self.head_dim) {
                for j in 0..half {
                    let (a, b) = (head[2 * j], head[2 * j + 1]);
                    let (c, s) = (cs[j], if inverse { -sn[j] } else { sn[j] });
                    head[2 * j] = a * c - b * s;
                    head[2 * j + 1] = a * s + b * c;
                }
            }
        }
    }
}

/// Rotates per-head vectors `[tokens, heads * head_dim]` by their positions.
pub fn apply_rope2d<T: Scalar>(x: &Tensor<T>, positions: &[(i32, i32)], head_dim: usize, base: f64) -> Result<Tensor<T>> {
    let (rows, cols) = x.dims2();
    ensure!(rows == positions.len(), Shape, "{} rows vs {} positions", rows, positions.len());
    ensure!(head_dim > 0 && cols % head_dim == 0, Shape, "{} columns not divisible by head_dim {}", cols, head_dim);
    let table = RopeTable::new(positions, head_dim, base)?;
    let mut out = x.clone();
    table.rotate(out.data_mut(), cols, false);
    Ok(out)
}

struct RopeBackward<T> {
    table: Rc<RopeTable<T>>,
}

impl<T: Scalar> Backward<T> for RopeBackward<T> {
    fn name(&self) -> &'static str {
        "rope2d"
    }

    fn backward(&self, _inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (_, cols) = output.dims2();
        let mut g = grad.to_vec();
        self.table.rotate(&mut g, cols, true);
        vec![Some(g)]
    }
}

pub fn rope_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, table: &Rc<RopeTable<T>>) -> Result<Var> {
    let v = tape.value(x);
    let (rows, cols) = v.dims2();
    ensure!(cols % table.head_dim == 0, Shape, "rope: {} columns vs head_dim {}", cols, table.head_dim);
    ensure!(rows * table.head_dim / 2 == table.cos.len(), Shape, "rope: table built for another token count");
    let mut out = v.clone();
    table.rotate(out.data_mut(), cols, false);
    let table = table.clone();
    Ok(tape.custom(vec![x], out, move || Box::new(RopeBackward { table })))
}

/// Key lists per query in compressed-row form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Neighbors {
    offsets: Vec<usize>,
    keys: Vec<u32>,
}

impl Neighbors {
    /// Valid keys within Chebyshev distance `radius` of each valid query,
    /// scanned in row-major window order. Cost is `O(tokens * (2r+1)^2)`.
    pub fn window(positions: &[(i32, i32)], valid: &[bool], radius: usize) -> Self {
        let n = positions.len();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut keys = Vec::new();
        offsets.push(0);
        if n == 0 {
            return Self { offsets, keys };
        }
        let (min_r, max_r) = positions.iter().fold((i32::MAX, i32::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
        let (min_c, max_c) = positions.iter().fold((i32::MAX, i32::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
        let (gh, gw) = ((max_r - min_r + 1) as usize, (max_c - min_c + 1) as usize);
        let mut cell = vec![u32::MAX; gh * gw];
        for (i, &(r, c)) in positions.iter().enumerate() {
            if valid[i] {
                cell[(r - min_r) as usize * gw + (c - min_c) as usize] = i as u32;
            }
        }
        let rad = radius.min(gh.max(gw)) as i64;
        for (i, &(r, c)) in positions.iter().enumerate() {
            if valid[i] {
                let (r, c) = ((r - min_r) as i64, (c - min_c) as i64);
                for rr in (r - rad).max(0)..=(r + rad).min(gh as i64 - 1) {
                    for cc in (c - rad).max(0)..=(c + rad).min(gw as i64 - 1) {
                        let k = cell[rr as usize * gw + cc as usize];
                        if k != u32::MAX {
                            keys.push(k);
                        }
                    }
                }
            }
            offsets.push(keys.len());
        }
        Self { offsets, keys }
    }

    pub fn of(&self, query: usize) -> &[u32] {
        &self.keys[self.offsets[query]..self.offsets[query + 1]]
    }

    pub fn pair_count(&self) -> usize {
        self.keys.len()
    }
}

/// Per-forward attention geometry shared by every block that uses it.
#[derive(Clone, Debug)]
pub struct AttnContext<T> {
    pub positions: Vec<(i32, i32)>,
    pub valid: Vec<bool>,
    pub window: Option<usize>,
    neighbors: Option<Rc<Neighbors>>,
    rope: Rc<RopeTable<T>>,
}

impl<T: Scalar> AttnContext<T> {
    pub fn new(positions: Vec<(i32, i32)>, valid: Vec<bool>, window: Option<usize>, head_dim: usize, rope_base: f64) -> Result<Self> {
        ensure!(positions.len() == valid.len(), Shape, "positions and validity flags differ in length");
        let rope = Rc::new(RopeTable::new(&positions, head_dim, rope_base)?);
        let neighbors = window.map(|r| Rc::new(Neighbors::window(&positions, &valid, r)));
        Ok(Self {
            positions,
            valid,
            window,
            neighbors,
            rope,
        })
    }

    pub fn all_valid(positions: Vec<(i32, i32)>, window: Option<usize>, head_dim: usize, rope_base: f64) -> Result<Self> {
        let valid = vec![true; positions.len()];
        Self::new(positions, valid, window, head_dim, rope_base)
    }

    pub fn tokens(&self) -> usize {
        self.positions.len()
    }

    pub fn rope(&self) -> &Rc<RopeTable<T>> {
        &self.rope
    }

    /// Query-key pairs scored by one head.
    pub fn pair_count(&self) -> usize {
        match &self.neighbors {
            Some(n) => n.pair_count(),
            None => {
                let v = self.valid.iter().filter(|&&b| b).count();
                v * v
            }
        }
    }

    fn has_invalid(&self) -> bool {
        self.valid.iter().any(|&b| !b)
    }
}

enum AttnSaved<T> {
    Full {
        queries: Vec<usize>,
        keys: Vec<usize>,
        probs: Vec<Vec<T>>,
    },
    Window {
        neighbors: Rc<Neighbors>,
        probs: Vec<Vec<T>>,
    },
}

struct AttentionBackward<T> {
    heads: usize,
    head_dim: usize,
    scale: T,
    valid: Vec<bool>,
    saved: AttnSaved<T>,
}

fn gather_head<T: Scalar>(src: &[T], rows: &[usize], width: usize, off: usize, hd: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows.len() * hd);
    for &r in rows {
        out.extend_from_slice(&src[r * width + off..r * width + off + hd]);
    }
    out
}

fn scatter_head<T: Scalar>(dst: &mut [T], src: &[T], rows: &[usize], width: usize, off: usize, hd: usize) {
    for (k, &r) in rows.iter().enumerate() {
        for d in 0..hd {
            dst[r * width + off + d] += src[k * hd + d];
        }
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Softmax attention over already-projected `q`, `k`, `v` of shape
/// `[tokens, heads * head_dim]`. Invalid queries produce zero rows; invalid
/// keys are never attended to.
pub fn scaled_dot_attention<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, ctx: &AttnContext<T>, heads: usize) -> Result<Var> {
    let (rows, width) = tape.value(q).dims2();
    ensure!(
        tape.value(k).shape() == tape.value(q).shape() && tape.value(v).shape() == tape.value(q).shape(),
        Shape,
        "q/k/v shapes differ"
    );
    ensure!(rows == ctx.tokens(), Shape, "{} tokens vs context of {}", rows, ctx.tokens());
    ensure!(heads >= 1 && width % heads == 0, Shape, "width {} not divisible by {} heads", width, heads);
    let hd = width / heads;
    let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
    let keep = tape.requires_grad(q) || tape.requires_grad(k) || tape.requires_grad(v);
    let (qv, kv, vv) = (tape.value(q).data(), tape.value(k).data(), tape.value(v).data());
    let mut out = vec![T::zero(); rows * width];
    let saved = match &ctx.neighbors {
        None => {
            let idx: Vec<usize> = (0..rows).filter(|&i| ctx.valid[i]).collect();
            let n = idx.len();
            let mut probs = Vec::new();
            for h in 0..heads {
                let off = h * hd;
                let qh = gather_head(qv, &idx, width, off, hd);
                let kh = gather_head(kv, &idx, width, off, hd);
                let vh = gather_head(vv, &idx, width, off, hd);
                let mut s = vec![T::zero(); n * n];
                T::gemm(n, hd, n, scale, &qh, false, &kh, true, T::zero(), &mut s);
                for row in s.chunks_mut(n.max(1)) {
                    softmax_in_place(row);
                }
                let mut oh = vec![T::zero(); n * hd];
                T::gemm(n, n, hd, T::one(), &s, false, &vh, false, T::zero(), &mut oh);
                scatter_head(&mut out, &oh, &idx, width, off, hd);
                if keep {
                    probs.push(s);
                }
            }
            AttnSaved::Full {
                queries: idx.clone(),
                keys: idx,
                probs,
            }
        }
        Some(nb) => {
            let mut probs = Vec::new();
            let mut scores = Vec::new();
            for h in 0..heads {
                let off = h * hd;
                let mut ph = if keep { Vec::with_capacity(nb.pair_count()) } else { Vec::new() };
                for i in 0..rows {
                    let keys = nb.of(i);
                    if keys.is_empty() {
                        continue;
                    }
                    let qi = &qv[i * width + off..i * width + off + hd];
                    scores.clear();
                    scores.extend(keys.iter().map(|&j| {
                        let j = j as usize;
                        dot(qi, &kv[j * width + off..j * width + off + hd]) * scale
                    }));
                    softmax_in_place(&mut scores);
                    let oi = &mut out[i * width + off..i * width + off + hd];
                    for (&j, &p) in keys.iter().zip(&scores) {
                        let vj = &vv[j as usize * width + off..j as usize * width + off + hd];
                        for (o, &x) in oi.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                    if keep {
                        ph.extend_from_slice(&scores);
                    }
                }
                if keep {
                    probs.push(ph);
                }
            }
            AttnSaved::Window {
                neighbors: nb.clone(),
                probs,
            }
        }
    };
    let value = Tensor::new(tape.value(q).shape().to_vec(), out)?;
    let valid = ctx.valid.clone();
    Ok(tape.custom(vec![q, k, v], value, move || {
        Box::new(AttentionBackward {
            heads,
            head_dim: hd,
            scale,
            valid,
            saved,
        })
    }))
}

impl<T: Scalar> Backward<T> for AttentionBackward<T> {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (qv, kv, vv) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let (rows, width) = output.dims2();
        let hd = self.head_dim;
        let mut gq = vec![T::zero(); rows * width];
        let mut gk = vec![T::zero(); rows * width];
        let mut gv = vec![T::zero(); rows * width];
        match &self.saved {
            AttnSaved::Full { queries, keys, probs } => {
                let (nq, nk) = (queries.len(), keys.len());
                for h in 0..self.heads {
                    let off = h * hd;
                    let p = &probs[h];
                    let qh = gather_head(qv, queries, width, off, hd);
                    let kh = gather_head(kv, keys, width, off, hd);
                    let vh = gather_head(vv, keys, width, off, hd);
                    let go = gather_head(grad, queries, width, off, hd);
                    let mut gvh = vec![T::zero(); nk * hd];
                    T::gemm(nk, nq, hd, T::one(), p, true, &go, false, T::zero(), &mut gvh);
                    let mut gp = vec![T::zero(); nq * nk];
                    T::gemm(nq, hd, nk, T::one(), &go, false, &vh, true, T::zero(), &mut gp);
                    for (gr, pr) in gp.chunks_mut(nk.max(1)).zip(p.chunks(nk.max(1))) {
                        let d = dot(gr, pr);
                        for (g, &pv) in gr.iter_mut().zip(pr) {
                            *g = pv * (*g - d);
                        }
                    }
                    let mut gqh = vec![T::zero(); nq * hd];
                    T::gemm(nq, nk, hd, self.scale, &gp, false, &kh, false, T::zero(), &mut gqh);
                    let mut gkh = vec![T::zero(); nk * hd];
                    T::gemm(nk, nq, hd, self.scale, &gp, true, &qh, false, T::zero(), &mut gkh);
                    scatter_head(&mut gq, &gqh, queries, width, off, hd);
                    scatter_head(&mut gk, &gkh, keys, width, off, hd);
                    scatter_head(&mut gv, &gvh, keys, width, off, hd);
                }
            }
            AttnSaved::Window { neighbors, probs } => {
                let mut gp = Vec::new();
                for h in 0..self.heads {
                    let off = h * hd;
                    let mut cursor = 0;
                    for i in 0..rows {
                        let keys = neighbors.of(i);
                        if keys.is_empty() || !self.valid[i] {
                            continue;
                        }
                        let p = &probs[h][cursor..cursor + keys.len()];
                        cursor += keys.len();
                        let go = &grad[i * width + off..i * width + off + hd];
                        gp.clear();
                        for (&j, &pj) in keys.iter().zip(p) {
                            let j = j as usize;
                            gp.push(dot(go, &vv[j * width + off..j * width + off + hd]));
                            for (g, &o) in gv[j * width + off..j * width + off + hd].iter_mut().zip(go) {
                                *g += pj * o;
                            }
                        }
                        let d = dot(&gp, p);
                        let qi = &qv[i * width + off..i * width + off + hd];
                        for ((&j, &pj), &gpj) in keys.iter().zip(p).zip(gp.iter()) {
                            let j = j as usize;
                            let ds = pj * (gpj - d) * self.scale;
                            for dd in 0..hd {
                                gq[i * width + off + dd] += ds * kv[j * width + off + dd];
                                gk[j * width + off + dd] += ds * qi[dd];
                            }
                        }
                    }
                }
            }
        }
        vec![Some(gq), Some(gk), Some(gv)]
    }
}

/// Parameters of one pre-norm block under `prefix`.
pub fn block_param_specs(prefix: &str, cfg: &BlockConfig) -> Vec<ParamSpec> {
    let (w, hd, hidden) = (cfg.width, cfg.head_dim(), cfg.hidden_dim());
    let mut specs = vec![
        ParamSpec::new(format!("{prefix}.ln1.g"), &[w], Init::Constant(1.0)),
        ParamSpec::new(format!("{prefix}.ln1.b"), &[w], Init::Zeros),
    ];
    specs.extend(attention_param_specs(&format!("{prefix}.attn"), w, hd));
    specs.extend([
        ParamSpec::new(format!("{prefix}.ls1"), &[w], Init::Constant(cfg.layerscale_init)),
        ParamSpec::new(format!("{prefix}.ln2.g"), &[w], Init::Constant(1.0)),
        ParamSpec::new(format!("{prefix}.ln2.b"), &[w], Init::Zeros),
    ]);
    specs.extend(swiglu_param_specs(&format!("{prefix}.mlp"), w, hidden));
    specs.push(ParamSpec::new(format!("{prefix}.ls2"), &[w], Init::Constant(cfg.layerscale_init)));
    specs
}

pub fn attention_param_specs(prefix: &str, w: usize, head_dim: usize) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    for name in ["q", "k", "v", "out"] {
        specs.push(ParamSpec::new(format!("{prefix}.{name}.w"), &[w, w], Init::Xavier));
        specs.push(ParamSpec::new(format!("{prefix}.{name}.b"), &[w], Init::Zeros));
    }
    specs.push(ParamSpec::new(format!("{prefix}.q_norm"), &[head_dim], Init::Constant(1.0)));
    specs.push(ParamSpec::new(format!("{prefix}.k_norm"), &[head_dim], Init::Constant(1.0)));
    specs
}

pub fn swiglu_param_specs(prefix: &str, w: usize, hidden: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.gate.w"), &[w, hidden], Init::Xavier),
        ParamSpec::new(format!("{prefix}.gate.b"), &[hidden], Init::Zeros),
        ParamSpec::new(format!("{prefix}.up.w"), &[w, hidden], Init::Xavier),
        ParamSpec::new(format!("{prefix}.up.b"), &[hidden], Init::Zeros),
        ParamSpec::new(format!("{prefix}.down.w"), &[hidden, w], Init::Xavier),
        ParamSpec::new(format!("{prefix}.down.b"), &[w], Init::Zeros),
    ]
}

/// `y = x @ W + b` with parameters `{prefix}.w` / `{prefix}.b`.
pub fn dense<T: Scalar>(tape: &mut Tape<T>, p: &mut Binder<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(tape, &format!("{prefix}.w"))?;
    let b = p.get(tape, &format!("{prefix}.b"))?;
    tape.linear(x, w, Some(b))
}

/// Row layer norm with gain `{prefix}.g` and bias `{prefix}.b`.
pub fn layer_norm_affine<T: Scalar>(tape: &mut Tape<T>, p: &mut Binder<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let n = tape.layer_norm(x);
    let g = p.get(tape, &format!("{prefix}.g"))?;
    let b = p.get(tape, &format!("{prefix}.b"))?;
    let y = tape.mul_row(n, g)?;
    tape.add_row(y, b)
}

/// `down(silu(gate(x)) * up(x))`.
pub fn swiglu<T: Scalar>(tape: &mut Tape<T>, p: &mut Binder<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let gate = dense(tape, p, &format!("{prefix}.gate"), x)?;
    let up = dense(tape, p, &format!("{prefix}.up"), x)?;
    let act = tape.silu(gate);
    let h = tape.mul(act, up)?;
    dense(tape, p, &format!("{prefix}.down"), h)
}

/// Self-attention sublayer: projections, per-head Q/K RMS norm, RoPE,
/// attention, output projection.
pub fn attention_layer<T: Scalar>(
    tape: &mut Tape<T>,
    p: &mut Binder<'_, T>,
    prefix: &str,
    x: Var,
    ctx: &AttnContext<T>,
    heads: usize,
) -> Result<Var> {
    let (_, width) = tape.value(x).dims2();
    let hd = width / heads;
    let q = dense(tape, p, &format!("{prefix}.q"), x)?;
    let k = dense(tape, p, &format!("{prefix}.k"), x)?;
    let v = dense(tape, p, &format!("{prefix}.v"), x)?;
    let qn = p.get(tape, &format!("{prefix}.q_norm"))?;
    let kn = p.get(tape, &format!("{prefix}.k_norm"))?;
    let q = tape.rms_norm_heads(q, qn, hd)?;
    let k = tape.rms_norm_heads(k, kn, hd)?;
    let q = rope_tape(tape, q, ctx.rope())?;
    let k = rope_tape(tape, k, ctx.rope())?;
    let o = scaled_dot_attention(tape, q, k, v, ctx, heads)?;
    dense(tape, p, &format!("{prefix}.out"), o)
}

fn residual<T: Scalar>(tape: &mut Tape<T>, x: Var, branch: Var, gain: Var, ctx: &AttnContext<T>) -> Result<Var> {
    let mut b = tape.mul_row(branch, gain)?;
    if ctx.has_invalid() {
        b = tape.mask_rows(b, &ctx.valid)?;
    }
    tape.add(x, b)
}

/// One pre-norm transformer block. Invalid tokens pass through unchanged.
pub fn block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    p: &mut Binder<'_, T>,
    prefix: &str,
    x: Var,
    ctx: &AttnContext<T>,
    cfg: &BlockConfig,
) -> Result<Var> {
    let h = layer_norm_affine(tape, p, &format!("{prefix}.ln1"), x)?;
    let a = attention_layer(tape, p, &format!("{prefix}.attn"), h, ctx, cfg.heads)?;
    let ls1 = p.get(tape, &format!("{prefix}.ls1"))?;
    let x = residual(tape, x, a, ls1, ctx)?;
    let h = layer_norm_affine(tape, p, &format!("{prefix}.ln2"), x)?;
    let m = swiglu(tape, p, &format!("{prefix}.mlp"), h)?;
    let ls2 = p.get(tape, &format!("{prefix}.ls2"))?;
    residual(tape, x, m, ls2, ctx)
}

fn run_frozen<T: Scalar>(
    batch: &TokenBatch<T>,
    params: &ParameterStore<T>,
    cfg: &BlockConfig,
    window: Option<usize>,
    f: impl FnOnce(&mut Tape<T>, &mut Binder<'_, T>, Var, &AttnContext<T>) -> Result<Var>,
) -> Result<TokenBatch<T>> {
    cfg.validate()?;
    let ctx = AttnContext::new(batch.positions.clone(), batch.valid.clone(), window, cfg.head_dim(), cfg.rope_base)?;
    let mut tape = Tape::new();
    let mut binder = Binder::frozen(params);
    let x = tape.constant(batch.values.clone());
    let y = f(&mut tape, &mut binder, x, &ctx)?;
    TokenBatch::new(tape.value(y).clone(), batch.positions.clone(), batch.valid.clone())
}

/// Inference-only self-attention sublayer over a token batch.
pub fn attention<T: Scalar>(
    batch: &TokenBatch<T>,
    params: &ParameterStore<T>,
    prefix: &str,
    cfg: &BlockConfig,
    window: Option<usize>,
) -> Result<TokenBatch<T>> {
    run_frozen(batch, params, cfg, window, |t, p, x, ctx| attention_layer(t, p, prefix, x, ctx, cfg.heads))
}

/// Inference-only block over a token batch.
pub fn block<T: Scalar>(
    batch: &TokenBatch<T>,
    params: &ParameterStore<T>,
    prefix: &str,
    cfg: &BlockConfig,
    window: Option<usize>,
) -> Result<TokenBatch<T>> {
    run_frozen(batch, params, cfg, window, |t, p, x, ctx| block_forward(t, p, prefix, x, ctx, cfg))
}

/// Inference-only SwiGLU MLP.
pub fn swiglu_mlp<T: Scalar>(x: &Tensor<T>, params: &ParameterStore<T>, prefix: &str) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let mut binder = Binder::frozen(params);
    let xv = tape.constant(x.clone());
    let y = swiglu(&mut tape, &mut binder, prefix, xv)?;
    Ok(tape.value(y).clone())
}

/// Closed-form count of query-key pairs for a `grid_h x grid_w` grid.
pub fn attention_pairs(grid_h: usize, grid_w: usize, window: Option<usize>) -> u64 {
    let l = (grid_h * grid_w) as u64;
    match window {
        None => l * l,
        Some(r) => {
            let span = |n: usize| -> u64 {
                (0..n)
                    .map(|i| (i + r).min(n - 1) as u64 - i.saturating_sub(r) as u64 + 1)
                    .sum()
            };
            span(grid_h) * span(grid_w)
        }
    }
}
