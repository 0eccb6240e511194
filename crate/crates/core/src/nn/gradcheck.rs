use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative error uses `|a - n| / max(|a|, |n|, DENOM_FLOOR)`, so coordinates
/// with gradients below the floor are compared in absolute terms. At
/// h = 1e-5 the central-difference noise is around 1e-10.
pub const DENOM_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamId {
    pub block: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: Option<ParamId>,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(DENOM_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic` against central differences of `loss_fn` at `params`.
///
/// `layout` names consecutive blocks of the flat parameter vector and must
/// cover it exactly.
pub fn gradient_check<F>(
    mut loss_fn: F,
    params: &[f64],
    analytic: &[f64],
    layout: &[(String, usize)],
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::CheckInvalid(format!("step h must be > 0, got {h}")));
    }
    let total: usize = layout.iter().map(|(_, n)| n).sum();
    if total != params.len() || analytic.len() != params.len() {
        return Err(Error::Shape {
            op: "gradient_check",
            left: (params.len(), analytic.len()),
            right: (total, 1),
        });
    }
    let base = loss_fn(params);
    let again = loss_fn(params);
    if base.to_bits() != again.to_bits() {
        return Err(Error::CheckInvalid(format!(
            "loss is not deterministic: {base} then {again}"
        )));
    }

    let mut probe = params.to_vec();
    let mut max_rel = 0.0_f64;
    let mut worst = None;
    let mut offset = 0;
    for (name, len) in layout {
        for i in 0..*len {
            let k = offset + i;
            let orig = probe[k];
            probe[k] = orig + h;
            let up = loss_fn(&probe);
            probe[k] = orig - h;
            let down = loss_fn(&probe);
            probe[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = relative_error(analytic[k], numeric);
            if !rel.is_finite() || rel > max_rel {
                max_rel = if rel.is_finite() { rel } else { f64::INFINITY };
                worst = Some(ParamId {
                    block: name.clone(),
                    index: i,
                });
            }
        }
        offset += len;
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst_param: worst,
        checked: params.len(),
        tolerance,
        passed: max_rel < tolerance,
    })
}
