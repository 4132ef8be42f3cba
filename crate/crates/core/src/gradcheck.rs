//! Central finite-difference gradient checking.
//!
//! The error of one coordinate is `|a - n| / max(|a|, |n|, floor)` where `a`
//! is the analytic and `n` the numerical derivative. The floor keeps
//! vanishing gradients from turning round-off into huge relative errors.
//!
//! Networks are only piecewise smooth (ReLU, max aggregation). A coordinate
//! whose ±h probes take different discrete branches than the base point is
//! retried with a step ten times smaller, down to `h / 1000`; if the branch
//! still changes the coordinate is counted as skipped rather than compared.

use rand::seq::index::sample;

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{OpKind, ParamStore, Tape, Tensor, Var};

pub mod suite;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_FLOOR: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub step: f64,
    pub floor: f64,
    /// Coordinates probed per tensor; `None` probes all of them.
    pub max_coords_per_tensor: Option<usize>,
    /// Corrupts the backward of one op kind (negative-control fixture).
    pub fault: Option<OpKind>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            floor: DEFAULT_FLOOR,
            max_coords_per_tensor: None,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub skipped: usize,
    /// Tensor name and coordinate of the worst error.
    pub worst: Option<(String, usize)>,
}

impl CheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tol
    }

    fn record(&mut self, name: &str, coord: usize, analytic: f64, numeric: f64, floor: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(floor);
        self.checked += 1;
        self.max_abs_err = self.max_abs_err.max(abs);
        if rel > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(rel);
            self.worst = Some((name.to_string(), coord));
        }
    }

    pub fn merge(&mut self, other: &CheckReport) {
        if other.max_rel_err >= self.max_rel_err && other.worst.is_some() {
            self.worst = other.worst.clone();
        }
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

fn coords(n: usize, limit: Option<usize>, rng: &mut Rng) -> Vec<usize> {
    match limit {
        Some(m) if m < n => {
            let mut v = sample(rng, n, m).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..n).collect(),
    }
}

/// Numerical derivative along one coordinate. `eval(delta)` returns the loss
/// and branch fingerprint with the coordinate shifted by `delta`.
fn probe(base_fp: u64, step: f64, mut eval: impl FnMut(f64) -> Result<(f64, u64)>) -> Result<Option<f64>> {
    let mut h = step;
    for _ in 0..4 {
        let (fp, fpp) = eval(h)?;
        let (fm, fpm) = eval(-h)?;
        if fpp == base_fp && fpm == base_fp {
            return Ok(Some((fp - fm) / (2.0 * h)));
        }
        h /= 10.0;
    }
    Ok(None)
}

/// Checks `d loss / d input` for free-standing input tensors.
///
/// `f` records the loss on a fresh tape given one leaf per entry of `inputs`.
pub fn check_inputs<F>(inputs: &[Tensor], opts: CheckOptions, rng: &mut Rng, f: F) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.input(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok((tape.value(loss).data()[0], tape.decision_fingerprint()))
    };
    let mut tape = Tape::new();
    if let Some(k) = opts.fault {
        tape.inject_fault(k);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let base_fp = tape.decision_fingerprint();
    let mut report = CheckReport::default();
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match tape.grad(*v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; inputs[i].numel()],
        };
        for c in coords(inputs[i].numel(), opts.max_coords_per_tensor, rng) {
            let orig = work[i].data()[c];
            let num = probe(base_fp, opts.step, |d| {
                work[i].data_mut()[c] = orig + d;
                let r = eval(&work);
                work[i].data_mut()[c] = orig;
                r
            })?;
            match num {
                Some(n) => report.record(&format!("input{i}"), c, analytic[c], n, opts.floor),
                None => report.skipped += 1,
            }
        }
    }
    Ok(report)
}

/// Checks the gradient of every parameter in `store` (buffers excluded).
///
/// `f` records the loss on a fresh tape reading parameters from the store.
pub fn check_params<F>(store: &mut ParamStore, opts: CheckOptions, rng: &mut Rng, f: F) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    if let Some(k) = opts.fault {
        tape.inject_fault(k);
    }
    let loss = f(&mut tape, store)?;
    tape.backward_into(loss, store)?;
    let base_fp = tape.decision_fingerprint();
    drop(tape);
    let mut report = CheckReport::default();
    let n_params = store.params().len();
    for pi in 0..n_params {
        let name = store.params()[pi].name.clone();
        let analytic = store.params()[pi].grad.data().to_vec();
        for c in coords(analytic.len(), opts.max_coords_per_tensor, rng) {
            let orig = store.params()[pi].value.data()[c];
            let num = probe(base_fp, opts.step, |d| {
                store.params_mut()[pi].value.data_mut()[c] = orig + d;
                let mut t = Tape::new();
                let r = f(&mut t, store).map(|l| (t.value(l).data()[0], t.decision_fingerprint()));
                store.params_mut()[pi].value.data_mut()[c] = orig;
                r
            })?;
            match num {
                Some(n) => report.record(&name, c, analytic[c], n, opts.floor),
                None => report.skipped += 1,
            }
        }
    }
    store.zero_grad();
    Ok(report)
}
