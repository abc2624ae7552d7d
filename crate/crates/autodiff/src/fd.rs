//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the loss forward on no-grad tapes,
//! so it is independent of every adjoint it checks.

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tape::{OpTag, Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct FdConfig {
    /// Central-difference step.
    pub h: f64,
    /// Denominator floor for the relative error, so that vanishing
    /// gradients are compared in absolute terms.
    pub floor: f64,
    /// Optional adjoint corruption applied to the analytic tape.
    pub corrupt: Option<OpTag>,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            h: 1e-5,
            floor: 1e-4,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients of `loss` w.r.t. `ids` against central
/// differences.
pub fn check_param_grads<L>(
    store: &ParamStore<f64>,
    ids: &[ParamId],
    loss: L,
    cfg: FdConfig,
) -> Result<FdReport>
where
    L: Fn(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_all_grads();
    let mut tape = Tape::with_trainable(ids.iter().copied());
    if let Some(tag) = cfg.corrupt {
        tape = tape.corrupt_adjoint(tag);
    }
    let out = loss(&work, &mut tape)?;
    tape.backward(out)?;
    tape.write_param_grads(&mut work);

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::no_grad();
        let v = loss(s, &mut t)?;
        Ok(t.data(v)[0])
    };

    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for &id in ids {
        let analytic = work
            .get(id)
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; work.get(id).len()]);
        for (j, &a) in analytic.iter().enumerate() {
            let orig = work.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + cfg.h;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - cfg.h;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.h);
            let e = rel_err(a, numeric, cfg.floor);
            report.checked += 1;
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(e);
                if e >= report.max_rel_err {
                    report.worst = Some((work.name(id).to_string(), j));
                }
            }
        }
    }
    Ok(report)
}
