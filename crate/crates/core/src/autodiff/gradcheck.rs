use std::collections::BTreeMap;

use super::evaluate_with_gradient;
use super::params::{ParamStore, PartitionSet};
use super::tape::{Tape, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Relative error is `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check at most this many coordinates per parameter (evenly strided).
    pub max_coords: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-6,
            floor: 1e-6,
            max_coords: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub per_param: BTreeMap<String, f64>,
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<(&String, f64)> {
        self.per_param
            .iter()
            .map(|(n, &e)| (n, e))
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Compares the tape gradient of `f` against central finite differences for
/// every trainable parameter.
pub fn grad_check<F>(
    params: &ParamStore,
    trainable: PartitionSet,
    f: F,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let (_, analytic) = evaluate_with_gradient(params, trainable, &f)?;
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::inference();
        let out = f(&mut tape, store)?;
        tape.check()?;
        Ok(tape.scalar(out))
    };

    let mut report = GradCheckReport::default();
    let mut probe = params.clone();
    for (name, grad) in analytic.iter() {
        let n = grad.len();
        let stride = match cfg.max_coords {
            Some(c) if c > 0 && n > c => n.div_ceil(c),
            _ => 1,
        };
        let mut worst: f64 = 0.0;
        for idx in (0..n).step_by(stride) {
            let orig = probe.get(name)?.value.data()[idx];
            probe.get_mut(name)?.value.data_mut()[idx] = orig + cfg.step;
            let up = eval(&probe)?;
            probe.get_mut(name)?.value.data_mut()[idx] = orig - cfg.step;
            let down = eval(&probe)?;
            probe.get_mut(name)?.value.data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = grad.data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            worst = worst.max(rel);
            report.coords_checked += 1;
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.per_param.insert(name.clone(), worst);
    }
    Ok(report)
}
