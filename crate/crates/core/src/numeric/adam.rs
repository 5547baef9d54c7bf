use serde::{Deserialize, Serialize};

use super::params::Params;
use super::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments, one buffer per parameter block.
///
/// Updates are lazy: a coordinate whose gradient is exactly zero keeps its
/// value and moments. Embedding rows absent from a batch and unselected
/// codebook rows therefore stay put.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamState {
    pub fn new<P: Params>(params: &P, config: AdamConfig) -> Self {
        let shapes: Vec<Matrix> = params.blocks().iter().map(|(_, m)| m.zeros_like()).collect();
        Self {
            config,
            t: 0,
            m: shapes.clone(),
            v: shapes,
        }
    }
}

/// One bias-corrected Adam update. `grads` must list blocks in the same
/// order and shapes as `params`.
pub fn adam_step<P: Params, G: Params>(state: &mut AdamState, params: &mut P, grads: &G) -> Result<()> {
    let grad_blocks = grads.blocks();
    let mut param_blocks = params.blocks_mut();
    if grad_blocks.len() != param_blocks.len() || state.m.len() != param_blocks.len() {
        return Err(Error::shape(
            "adam_step blocks",
            param_blocks.len(),
            format!("{} grads / {} moments", grad_blocks.len(), state.m.len()),
        ));
    }
    for ((name, p), ((_, g), m)) in param_blocks.iter().zip(grad_blocks.iter().zip(&state.m)) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape(
                format!("adam_step `{name}`"),
                format!("{:?}", p.shape()),
                format!("{:?}", g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                block: format!("grad {name}"),
                step: None,
            });
        }
    }

    state.t += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.t as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (i, (_, p)) in param_blocks.iter_mut().enumerate() {
        let g = grad_blocks[i].1.as_slice();
        let m = state.m[i].as_mut_slice();
        let v = state.v[i].as_mut_slice();
        for (j, w) in p.as_mut_slice().iter_mut().enumerate() {
            let gj = g[j];
            if gj == 0.0 {
                continue;
            }
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_gradients_only_advance_the_counter() {
        let mut p = Matrix::from_rows(&[vec![1.0, -2.0]]);
        let before = p.clone();
        let mut st = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut st, &mut p, &Matrix::zeros(1, 2)).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Matrix::from_rows(&[vec![0.0, 0.0, 0.0]]);
        let g = Matrix::from_rows(&[vec![3.0, -0.5, 1e-3]]);
        let mut st = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut st, &mut p, &g).unwrap();
        for (w, gv) in p.as_slice().iter().zip(g.as_slice()) {
            let want = -1e-3 * gv / (gv.abs() + 1e-8);
            assert!((w - want).abs() < 1e-15);
            assert!((w + 1e-3 * gv.signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn two_step_scalar_trace() {
        // Hand trace, lr=0.1 b1=0.9 b2=0.999 eps=1e-8, p0=1, g1=2, g2=-1:
        // m1=0.2  v1=0.004   m̂=2    v̂=4     p1 = 1 - 0.1*2/(2+1e-8)
        // m2=0.08 v2=0.004996 m̂=0.08/0.19  v̂=0.004996/0.001999
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut p = Matrix::row_vector(&[1.0]);
        let mut st = AdamState::new(&p, cfg);
        adam_step(&mut st, &mut p, &Matrix::row_vector(&[2.0])).unwrap();
        let p1 = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((p.get(0, 0) - p1).abs() < 1e-12);
        adam_step(&mut st, &mut p, &Matrix::row_vector(&[-1.0])).unwrap();
        let m_hat = 0.08 / (1.0 - 0.81);
        let v_hat = 0.004996 / (1.0 - 0.998001);
        let p2 = p1 - 0.1 * m_hat / (f64::sqrt(v_hat) + 1e-8);
        assert!((p.get(0, 0) - p2).abs() < 1e-12, "{} vs {p2}", p.get(0, 0));
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let mut p = vec![Matrix::zeros(1, 1), Matrix::zeros(1, 2)];
        let g = vec![Matrix::zeros(1, 1), Matrix::row_vector(&[0.0, f64::NAN])];
        let mut st = AdamState::new(&p, AdamConfig::default());
        let err = adam_step(&mut st, &mut p, &g).unwrap_err();
        assert!(err.to_string().contains("grad 1"), "{err}");
        assert_eq!(st.t, 0);
    }

    proptest! {
        #[test]
        fn zero_gradients_are_a_no_op_at_any_step(
            values in prop::collection::vec(-5.0f64..5.0, 1..6),
            history in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 6), 0..10),
        ) {
            let n = values.len();
            let mut p = Matrix::row_vector(&values);
            let mut st = AdamState::new(&p, AdamConfig::default());
            for g in &history {
                adam_step(&mut st, &mut p, &Matrix::row_vector(&g[..n])).unwrap();
            }
            let before = p.clone();
            adam_step(&mut st, &mut p, &Matrix::zeros(1, n)).unwrap();
            prop_assert_eq!(p, before);
            prop_assert!(st.v.iter().all(|v| v.as_slice().iter().all(|&x| x >= 0.0)));
        }
    }
}
