use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Trace;

/// Distance between a strategy's latent and the reference at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DivergenceRow {
    /// Timestep of the latent (`T` for the initial state).
    pub step: usize,
    pub max_abs: f64,
    /// `‖x − ref‖₂ / ‖ref‖₂`, or the absolute norm when the reference is zero.
    pub rel_l2: f64,
}

fn check_lengths(trace: &Trace, reference: &Trace) -> Result<()> {
    if trace.len() != reference.len() {
        return Err(Error::InvalidSpec(format!(
            "trace has {} states, reference {}",
            trace.len(),
            reference.len()
        )));
    }
    Ok(())
}

pub fn divergence(trace: &Trace, reference: &Trace) -> Result<Vec<DivergenceRow>> {
    check_lengths(trace, reference)?;
    trace
        .iter()
        .zip(reference)
        .map(|(a, b)| {
            let diff = a.x.sub(&b.x)?;
            let norm = b.x.l2();
            Ok(DivergenceRow {
                step: b.t,
                max_abs: diff.max_abs(),
                rel_l2: if norm > 0.0 { diff.l2() / norm } else { diff.l2() },
            })
        })
        .collect()
}

/// Largest per-step relative max-abs error.
pub fn max_rel_err(trace: &Trace, reference: &Trace) -> Result<f64> {
    check_lengths(trace, reference)?;
    let mut worst = 0.0_f64;
    for (a, b) in trace.iter().zip(reference) {
        let e = a.x.rel_err(&b.x)?;
        if e.is_nan() {
            return Ok(f64::NAN);
        }
        worst = worst.max(e);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LatentState;
    use crate::tensor::Tensor;

    #[test]
    fn hand_values() {
        let r = vec![LatentState {
            x: Tensor::from_rows(&[&[3.0, 4.0]]),
            t: 1,
        }];
        let a = vec![LatentState {
            x: Tensor::from_rows(&[&[3.0, 4.5]]),
            t: 1,
        }];
        let d = divergence(&a, &r).unwrap();
        assert_eq!(d[0].max_abs, 0.5);
        assert!((d[0].rel_l2 - 0.1).abs() < 1e-15);
        assert_eq!(max_rel_err(&a, &r).unwrap(), 0.125);
        assert_eq!(divergence(&r, &r).unwrap()[0].rel_l2, 0.0);
    }
}
