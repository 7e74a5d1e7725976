//! Central finite-difference gradient checks.

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    /// Entries probed per tensor; larger tensors are strided through.
    pub max_entries: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-7,
            max_entries: 64,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst_rel: f64,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }

    fn record(&mut self, cfg: &GradCheck, label: &str, analytic: f64, numeric: f64) {
        self.checked += 1;
        let diff = (analytic - numeric).abs();
        if diff <= cfg.abs_floor {
            return;
        }
        let rel = diff / analytic.abs().max(numeric.abs());
        self.worst_rel = self.worst_rel.max(rel);
        if rel > cfg.rel_tol {
            self.failures.push(format!(
                "{label}: analytic {analytic:.9e} vs numeric {numeric:.9e} (rel {rel:.3e})"
            ));
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.worst_rel = self.worst_rel.max(other.worst_rel);
        self.failures.extend(other.failures);
    }
}

fn probe_indices(len: usize, max: usize) -> impl Iterator<Item = usize> {
    let stride = len.div_ceil(max.max(1)).max(1);
    (0..len).step_by(stride)
}

fn scalar_loss(tape: &Tape, loss: Var) -> Result<f64> {
    tape.value(loss).item()
}

/// Checks every trainable parameter of `store` reached by the loss `f` builds.
pub fn check_params<F>(store: &ParamStore, cfg: &GradCheck, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        tape.backward(loss)?.into_params()
    };
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for (id, g) in analytic.iter() {
        let name = store.get(id).name.clone();
        for e in probe_indices(g.len(), cfg.max_entries) {
            let orig = work.get(id).value.data()[e];
            let eval = |x: f64, work: &mut ParamStore| -> Result<f64> {
                work.get_mut(id).value.data_mut()[e] = x;
                let mut tape = Tape::new(work);
                let loss = f(&mut tape)?;
                scalar_loss(&tape, loss)
            };
            let plus = eval(orig + cfg.step, &mut work)?;
            let minus = eval(orig - cfg.step, &mut work)?;
            work.get_mut(id).value.data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            report.record(cfg, &format!("{name}[{e}]"), g[e], numeric);
        }
    }
    Ok(report)
}

/// Checks gradients with respect to input tensors. `f` receives one leaf per input.
pub fn check_inputs<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    cfg: &GradCheck,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let run = |values: &[Tensor], grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new(store);
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
        let loss = f(&mut tape, &vars)?;
        let value = scalar_loss(&tape, loss)?;
        if !grad {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(loss)?;
        let per_input = vars
            .iter()
            .zip(values)
            .map(|(v, t)| {
                grads
                    .wrt(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.len()])
            })
            .collect();
        Ok((value, per_input))
    };
    let (_, analytic) = run(inputs, true)?;
    let mut work = inputs.to_vec();
    let mut report = GradCheckReport::default();
    for (i, g) in analytic.iter().enumerate() {
        for e in probe_indices(g.len(), cfg.max_entries) {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + cfg.step;
            let plus = run(&work, false)?.0;
            work[i].data_mut()[e] = orig - cfg.step;
            let minus = run(&work, false)?.0;
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            report.record(cfg, &format!("input{i}[{e}]"), g[e], numeric);
        }
    }
    if report.checked == 0 {
        return Err(Error::contract("gradient check probed no entries"));
    }
    Ok(report)
}
