//! Shared helpers: central-difference gradient checking in f64 and small
//! fixtures used by several test targets.
#![allow(dead_code)]

pub mod grads;

use rand::Rng;
use vitok::autodiff::{Tape, Var};
use vitok::params::{Binder, ParameterStore};
use vitok::rng;
use vitok::{Result, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// Relative L2 error between analytic and numeric gradients of one group.
#[derive(Clone, Debug)]
pub struct GroupError {
    pub name: String,
    pub rel: f64,
    pub norm: f64,
}

#[derive(Clone, Debug, Default)]
pub struct CheckReport {
    pub groups: Vec<GroupError>,
}

impl CheckReport {
    pub fn max_rel(&self) -> f64 {
        self.groups.iter().map(|g| g.rel).fold(0.0, f64::max)
    }

    /// Panics unless every group is within tolerance and carries a
    /// non-vanishing gradient.
    pub fn assert_ok(&self, what: &str) {
        for g in &self.groups {
            assert!(g.norm > 1e-8, "{what}: gradient of {} vanishes ({:e})", g.name, g.norm);
            assert!(g.rel < GRAD_TOL, "{what}: {} relative error {:e}", g.name, g.rel);
        }
    }
}

fn rel_err(a: &[f64], n: &[f64]) -> (f64, f64) {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nn);
    (if scale > 0.0 { diff / scale } else { diff }, scale)
}

/// Compares tape gradients with central differences for every element of
/// every input tensor and for up to `max_param_coords` parameter entries
/// (chosen deterministically). `f` must be deterministic.
pub fn grad_check<F>(store: &ParameterStore<f64>, inputs: &[Tensor<f64>], max_param_coords: usize, f: F) -> CheckReport
where
    F: Fn(&mut Tape<f64>, &mut Binder<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParameterStore<f64>, inputs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let mut binder = Binder::frozen(store);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &mut binder, &vars).expect("forward");
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let mut binder = Binder::trainable(store);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &mut binder, &vars).expect("forward");
    assert_eq!(tape.value(loss).numel(), 1, "loss must be scalar");
    let grads = tape.backward(loss).expect("backward");
    let bound = binder.finish();

    let mut report = CheckReport::default();
    for (k, (t, &v)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]);
        let mut numeric = Vec::with_capacity(t.numel());
        let mut work = inputs.to_vec();
        for j in 0..t.numel() {
            let orig = work[k].data()[j];
            work[k].data_mut()[j] = orig + FD_STEP;
            let up = eval(store, &work);
            work[k].data_mut()[j] = orig - FD_STEP;
            let down = eval(store, &work);
            work[k].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        let (rel, norm) = rel_err(&analytic, &numeric);
        report.groups.push(GroupError {
            name: format!("input{k}"),
            rel,
            norm,
        });
    }

    if max_param_coords > 0 && !store.is_empty() {
        let mut coords: Vec<(String, usize)> = store.iter().flat_map(|(name, p)| (0..p.value.numel()).map(move |j| (name.clone(), j))).collect();
        if coords.len() > max_param_coords {
            let mut r = rng::seeded(0xC0DE);
            let mut picked = Vec::with_capacity(max_param_coords);
            for _ in 0..max_param_coords {
                let i = r.gen_range(0..coords.len());
                picked.push(coords.swap_remove(i));
            }
            coords = picked;
        }
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        let mut work = store.clone();
        for (name, j) in &coords {
            let g = bound.var(name).and_then(|v| grads.get(v)).map_or(0.0, |g| g[*j]);
            analytic.push(g);
            let orig = work.value(name).unwrap().data()[*j];
            work.get_mut(name).unwrap().value.data_mut()[*j] = orig + FD_STEP;
            let up = eval(&work, inputs);
            work.get_mut(name).unwrap().value.data_mut()[*j] = orig - FD_STEP;
            let down = eval(&work, inputs);
            work.get_mut(name).unwrap().value.data_mut()[*j] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        let (rel, norm) = rel_err(&analytic, &numeric);
        report.groups.push(GroupError {
            name: format!("params({} coords)", coords.len()),
            rel,
            norm,
        });
    }
    report
}

/// `sum(v * R)` for a fixed Gaussian `R`; avoids the cancellations a plain
/// sum would hide (softmax rows, normalized features).
pub fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let n = shape.iter().product();
    let r = Tensor::new(shape, rng::normal_vec::<f64, _>(&mut rng::seeded(seed), n))?;
    let r = tape.constant(r);
    let m = tape.mul(v, r)?;
    Ok(tape.sum(m))
}

pub fn randn(shape: &[usize], seed: u64, std: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let d = rng::normal_vec::<f64, _>(&mut rng::seeded(seed), n).into_iter().map(|v| v * std).collect();
    Tensor::new(shape.to_vec(), d).unwrap()
}

pub fn uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut r = rng::seeded(seed);
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

/// Adds Gaussian noise of `std` to every parameter so zero- or
/// tiny-initialized tensors (LayerScale, AdaLN, heads) carry gradient.
pub fn jitter(store: &mut ParameterStore<f64>, std: f64, seed: u64) {
    let mut r = rng::seeded(seed);
    for (_, p) in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += std * rng::normal::<f64, _>(&mut r);
        }
    }
}

/// Row-major grid positions.
pub fn grid_positions(gh: usize, gw: usize) -> Vec<(i32, i32)> {
    (0..gh).flat_map(|y| (0..gw).map(move |x| (y as i32, x as i32))).collect()
}
