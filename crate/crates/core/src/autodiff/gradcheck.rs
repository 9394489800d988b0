use crate::error::Result;
use crate::tensor::Tensor;

/// One compared scalar parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub tol: f64,
    /// Largest errors first.
    pub worst: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

const WORST_KEPT: usize = 10;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients against central differences
/// `(f(θ+h) − f(θ−h)) / 2h`, one scalar parameter at a time.
///
/// `params` is perturbed in place and restored before returning.
pub fn grad_check<F>(
    names: &[String],
    params: &mut [Tensor<f64>],
    analytic: &[Tensor<f64>],
    h: f64,
    tol: f64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    let mut entries = Vec::new();
    for p in 0..params.len() {
        for i in 0..params[p].numel() {
            let orig = params[p].data()[i];
            params[p].data_mut()[i] = orig + h;
            let up = loss(params);
            params[p].data_mut()[i] = orig - h;
            let down = loss(params);
            params[p].data_mut()[i] = orig;
            let numeric = (up? - down?) / (2.0 * h);
            let a = analytic[p].data()[i];
            entries.push(GradCheckEntry {
                param: names[p].clone(),
                index: i,
                analytic: a,
                numeric,
                rel_err: relative_error(a, numeric),
            });
        }
    }
    let checked = entries.len();
    entries.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
    entries.truncate(WORST_KEPT);
    Ok(GradCheckReport {
        checked,
        max_rel_err: entries.first().map_or(0.0, |e| e.rel_err),
        tol,
        worst: entries,
    })
}
