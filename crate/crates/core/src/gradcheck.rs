//! Central finite-difference gradient checking.

use alloc::string::String;

use crate::tape::Gradients;
use crate::tensor::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coords_checked: usize,
}

/// Compares `analytic` against central differences of `f` around `params`.
///
/// `max_per_param` caps the coordinates checked per tensor (evenly strided);
/// `None` checks everything. Every perturbation is undone before returning.
pub fn grad_check<F>(
    params: &mut ParamStore,
    analytic: &Gradients,
    mut f: F,
    h: f64,
    max_per_param: Option<usize>,
) -> GradCheckReport
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coords_checked: 0,
    };
    let ids: alloc::vec::Vec<_> = params.ids().collect();
    for id in ids {
        let n = params.get(id).len();
        let stride = match max_per_param {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + h;
            let fp = f(params);
            params.get_mut(id).data_mut()[i] = orig - h;
            let fm = f(params);
            params.get_mut(id).data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.get(id)[i];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            report.coords_checked += 1;
            if !(err <= report.max_rel_error) || report.coords_checked == 1 {
                report.max_rel_error = err;
                report.worst_param = params.name(id).into();
                report.worst_index = i;
            }
        }
    }
    report
}
