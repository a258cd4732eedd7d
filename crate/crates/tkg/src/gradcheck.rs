//! Central finite-difference verification of tape gradients.
//!
//! Independent of the backward pass: the loss closure is re-run with each
//! parameter entry perturbed in both directions.

use crate::tape::{NodeId, ParamStore, Tape};

/// Worst observed deviation between analytic and numerical gradients.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// (param name, row, col, analytic, numerical) of the worst entry.
    pub worst: Option<(String, usize, usize, f64, f64)>,
    pub entries_checked: usize,
}

/// Relative error with an absolute-scale guard for near-zero gradients.
pub fn rel_err(a: f64, n: f64) -> f64 {
    let denom = (a.abs() + n.abs()).max(1e-6);
    (a - n).abs() / denom
}

/// Compares tape gradients of `f` against central finite differences over
/// every entry of every parameter.
pub fn check_param_grads<F>(params: &ParamStore, f: F, step: f64) -> FdReport
where
    F: Fn(&ParamStore, &mut Tape) -> NodeId,
{
    let mut tape = Tape::new();
    let out = f(params, &mut tape);
    let grads = tape.backward(out, params).expect("backward failed");

    let eval = |p: &ParamStore| -> f64 {
        let mut t = Tape::new();
        let o = f(p, &mut t);
        t.scalar(o)
    };

    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: None,
        entries_checked: 0,
    };
    let mut perturbed = params.clone();
    for (pid, name, tensor) in params.iter() {
        let (rows, cols) = tensor.dim();
        for i in 0..rows {
            for j in 0..cols {
                let orig = tensor[(i, j)];
                perturbed.get_mut(pid)[(i, j)] = orig + step;
                let up = eval(&perturbed);
                perturbed.get_mut(pid)[(i, j)] = orig - step;
                let down = eval(&perturbed);
                perturbed.get_mut(pid)[(i, j)] = orig;
                let numerical = (up - down) / (2.0 * step);
                let analytic = grads.get(pid).map_or(0.0, |g| g[(i, j)]);
                let e = rel_err(analytic, numerical);
                report.entries_checked += 1;
                if e > report.max_rel_err {
                    report.max_rel_err = e;
                    report.worst = Some((name.to_string(), i, j, analytic, numerical));
                }
            }
        }
    }
    report
}
