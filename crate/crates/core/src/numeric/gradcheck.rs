//! Central finite-difference gradient checking over [`Params`] blocks.

use std::fmt;

use super::params::Params;
use crate::error::{Error, Result};

/// One evaluation of a loss closure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub loss: f64,
    /// Set when the evaluation crossed a non-differentiable boundary (a
    /// quantizer argmin flip); such coordinates are excluded.
    pub crossed_boundary: bool,
}

impl Probe {
    pub fn value(loss: f64) -> Self {
        Self {
            loss,
            crossed_boundary: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub excluded: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn excluded(&self) -> usize {
        self.blocks.iter().map(|b| b.excluded).sum()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().fold(0.0, |m, b| m.max(b.max_rel_error))
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.blocks {
            writeln!(
                f,
                "{:<40} max_rel_err={:.3e} checked={} excluded={} {}",
                b.name,
                b.max_rel_error,
                b.checked,
                b.excluded,
                if b.passed { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Gradients below this magnitude are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` gradients against central differences of `loss`
/// around `params`. Each coordinate is perturbed by ±`step` and restored
/// bitwise afterwards.
pub fn gradcheck<P, G, F>(
    mut loss: F,
    analytic: &G,
    params: &mut P,
    step: f64,
    tolerance: f64,
) -> Result<GradReport>
where
    P: Params,
    G: Params,
    F: FnMut(&P) -> Probe,
{
    let base = loss(params);
    let again = loss(params);
    if base.loss.to_bits() != again.loss.to_bits() {
        return Err(Error::NonDeterministic {
            first: base.loss,
            second: again.loss,
        });
    }

    let analytic_blocks: Vec<(String, Vec<f64>)> = analytic
        .blocks()
        .into_iter()
        .map(|(n, m)| (n, m.as_slice().to_vec()))
        .collect();
    let shapes: Vec<usize> = params.blocks().iter().map(|(_, m)| m.len()).collect();
    if shapes.len() != analytic_blocks.len()
        || shapes.iter().zip(&analytic_blocks).any(|(n, (_, a))| *n != a.len())
    {
        return Err(Error::shape(
            "gradcheck blocks",
            shapes.len(),
            analytic_blocks.len(),
        ));
    }

    let mut blocks = Vec::with_capacity(shapes.len());
    for (b, (name, grads)) in analytic_blocks.iter().enumerate() {
        let mut max_rel = 0.0f64;
        let mut excluded = 0;
        for (j, &g) in grads.iter().enumerate() {
            let original = params.blocks()[b].1.as_slice()[j];
            let plus = perturbed(&mut loss, params, b, j, original + step);
            let minus = perturbed(&mut loss, params, b, j, original - step);
            params.blocks_mut()[b].1.as_mut_slice()[j] = original;
            if plus.crossed_boundary || minus.crossed_boundary {
                excluded += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * step);
            let err = relative_error(g, numeric);
            max_rel = if err.is_nan() { f64::INFINITY } else { max_rel.max(err) };
        }
        blocks.push(BlockReport {
            name: name.clone(),
            max_rel_error: max_rel,
            checked: grads.len() - excluded,
            excluded,
            passed: max_rel <= tolerance,
        });
    }
    Ok(GradReport { tolerance, blocks })
}

fn perturbed<P: Params, F: FnMut(&P) -> Probe>(
    loss: &mut F,
    params: &mut P,
    block: usize,
    index: usize,
    value: f64,
) -> Probe {
    params.blocks_mut()[block].1.as_mut_slice()[index] = value;
    loss(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Matrix;
    use std::cell::Cell;

    #[test]
    fn quadratic_loss_matches_analytic_gradient() {
        let mut p = vec![Matrix::row_vector(&[0.3, -1.2, 2.0]), Matrix::row_vector(&[0.7])];
        let analytic = p.clone();
        let loss = |q: &Vec<Matrix>| {
            Probe::value(
                0.5 * q
                    .iter()
                    .flat_map(|m| m.as_slice().iter())
                    .map(|v| v * v)
                    .sum::<f64>(),
            )
        };
        let report = gradcheck(loss, &analytic, &mut p, 1e-5, 1e-8).unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.max_rel_error() < 1e-8);
        assert_eq!(report.blocks.len(), 2);
    }

    #[test]
    fn empty_parameter_set_gives_empty_report() {
        let mut p: Vec<Matrix> = Vec::new();
        let report = gradcheck(|_: &Vec<Matrix>| Probe::value(1.0), &Vec::<Matrix>::new(), &mut p, 1e-5, 1e-8).unwrap();
        assert!(report.blocks.is_empty());
        assert!(report.passed());
    }

    #[test]
    fn nondeterministic_closure_is_rejected() {
        let counter = Cell::new(0.0);
        let mut p = Matrix::row_vector(&[1.0]);
        let loss = |_: &Matrix| {
            counter.set(counter.get() + 1.0);
            Probe::value(counter.get())
        };
        let err = gradcheck(loss, &Matrix::zeros(1, 1), &mut p, 1e-5, 1e-8).unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }

    #[test]
    fn boundary_crossings_are_excluded_and_params_restored() {
        let mut p = Matrix::row_vector(&[0.0, 1.0]);
        let before = p.clone();
        let loss = |q: &Matrix| Probe {
            loss: q.get(0, 0).abs() + q.get(0, 1),
            crossed_boundary: q.get(0, 0) != 0.0,
        };
        let analytic = Matrix::row_vector(&[0.0, 1.0]);
        let report = gradcheck(loss, &analytic, &mut p, 1e-5, 1e-8).unwrap();
        assert_eq!(report.blocks[0].excluded, 1);
        assert_eq!(report.blocks[0].checked, 1);
        assert_eq!(p, before);
    }
}
