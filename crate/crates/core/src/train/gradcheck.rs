//! Central-difference verification of analytic gradients.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::TokenBatch;
use crate::param::Param;
use crate::peft::PeftModel;
use crate::tensor::{Fault, Graph};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Pass threshold on the per-group max relative error.
    pub tolerance: f64,
    /// Base step; the perturbation is `step · max(1, |p|)`.
    pub step: f64,
    /// Gradients below this magnitude on both sides count as agreeing.
    pub floor: f64,
    /// Deliberate backward corruption for negative-control runs.
    pub fault: Option<Fault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            step: 1e-5,
            floor: 1e-8,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub group: String,
    pub elements: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub rows: Vec<GradCheckRow>,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<40} {:>8} {:>14} {:>14}  status\n",
            "group", "elements", "max_rel_err", "max_abs_err"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<40} {:>8} {:>14.3e} {:>14.3e}  {}\n",
                r.group,
                r.elements,
                r.max_rel_err,
                r.max_abs_err,
                if r.pass { "ok" } else { "FAIL" }
            ));
        }
        out
    }
}

/// Parameter group of a name: the block index is replaced by `*`.
pub fn param_group(name: &str) -> String {
    let mut parts: Vec<&str> = name.split('.').collect();
    if parts.len() > 1 && parts[0] == "block" && parts[1].parse::<usize>().is_ok() {
        parts[1] = "*";
    }
    parts.join(".")
}

/// Compares analytic gradients of every trainable parameter against central
/// differences of the mean cross-entropy on `batch`. Frozen parameters are
/// not reported. Runs at `f64`.
pub fn grad_check(
    model: &mut PeftModel<f64>,
    batch: &TokenBatch,
    labels: &[usize],
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    model.zero_grad();
    let mut g = Graph::new();
    if let Some(fault) = opts.fault {
        g.inject_fault(fault);
    }
    let loss = model.loss(&mut g, batch, labels)?;
    g.backward(loss)?;
    model.base.params.accumulate_grads(&g);
    model.peft.params.accumulate_grads(&g);

    let eval = |m: &PeftModel<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = m.loss(&mut g, batch, labels)?;
        Ok(g.value(l).data()[0])
    };

    let mut rows: Vec<GradCheckRow> = Vec::new();
    for name in model.registry() {
        let in_base = model.base.params.contains(&name);
        let analytic = param_mut(model, in_base, &name)
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; param_mut(model, in_base, &name).value.numel()]);
        let (mut rel, mut abs) = (0.0f64, 0.0f64);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = param_mut(model, in_base, &name).value.data()[i];
            let h = opts.step * orig.abs().max(1.0);
            param_mut(model, in_base, &name).value.data_mut()[i] = orig + h;
            let plus = eval(model)?;
            param_mut(model, in_base, &name).value.data_mut()[i] = orig - h;
            let minus = eval(model)?;
            param_mut(model, in_base, &name).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let diff = (a - numeric).abs();
            abs = abs.max(diff);
            let scale = a.abs().max(numeric.abs());
            if scale >= opts.floor {
                rel = rel.max(diff / scale);
            }
        }
        let group = param_group(&name);
        match rows.iter_mut().find(|r| r.group == group) {
            Some(r) => {
                r.elements += analytic.len();
                r.max_rel_err = r.max_rel_err.max(rel);
                r.max_abs_err = r.max_abs_err.max(abs);
            }
            None => rows.push(GradCheckRow {
                group,
                elements: analytic.len(),
                max_rel_err: rel,
                max_abs_err: abs,
                pass: true,
            }),
        }
    }
    for r in &mut rows {
        r.pass = r.max_rel_err <= opts.tolerance;
    }
    model.zero_grad();
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        rows,
    })
}

fn param_mut<'a>(model: &'a mut PeftModel<f64>, in_base: bool, name: &str) -> &'a mut Param<f64> {
    let store = if in_base {
        &mut model.base.params
    } else {
        &mut model.peft.params
    };
    store
        .get_mut(name)
        .expect("registry names come from the model")
}

/// Moves every PEFT parameter away from its identity initialization by
/// uniform noise in `[-scale, scale]`, so that zero-initialized factors (LoRA
/// `up`, adapter `up`) do not mask the gradients of their partners.
pub fn perturb_peft(model: &mut PeftModel<f64>, seed: u64, scale: f64) {
    use rand::Rng;
    let mut rng = crate::rng::stream(seed, "gradcheck-perturb");
    for p in model.peft.params.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-scale..=scale);
        }
    }
}
