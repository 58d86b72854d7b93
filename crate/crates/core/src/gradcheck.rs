//! Central-difference verification of the tape's adjoints.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Fault, Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    /// Initial central-difference step.
    pub step: f64,
    pub fault: Option<Fault>,
    /// Upper bound on checked coordinates per tensor, spread evenly; `None`
    /// checks all of them.
    pub max_coords: Option<usize>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            fault: None,
            max_coords: None,
        }
    }
}

/// Evenly spaced coordinate indices, at most `cap` of `n`.
pub fn coordinate_sample(n: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(m) if m < n => (0..m).map(|k| k * n / m).collect(),
        _ => (0..n).collect(),
    }
}

/// Largest error for one parameter or input tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckEntry {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckReport {
    pub entries: Vec<CheckEntry>,
}

impl CheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    libm::fabs(analytic - numeric) / libm::fabs(numeric).max(1.0)
}

fn eval<F>(store: &ParamStore, inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new(store);
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t)).collect();
    let out = f(&mut g, &ids)?;
    Ok(g.value(out)[0])
}

/// Central difference at one coordinate. When the one-sided slopes disagree
/// (a ReLU kink inside the stencil) the step is shrunk and retried.
fn central<S>(h0: f64, f0: f64, mut at: S) -> Result<f64>
where
    S: FnMut(f64) -> Result<f64>,
{
    let mut h = h0;
    let mut estimate = 0.0;
    for _ in 0..3 {
        let (fp, fm) = (at(h)?, at(-h)?);
        estimate = (fp - fm) / (2.0 * h);
        let curvature = libm::fabs(fp - 2.0 * f0 + fm);
        if curvature <= 1e-3 * libm::fabs(fp - fm) + 1e-13 * libm::fabs(f0).max(1.0) {
            break;
        }
        h *= 1e-2;
    }
    Ok(estimate)
}

/// Compare reverse-mode gradients of the scalar built by `f` against central
/// differences for every parameter coordinate and every input coordinate.
///
/// `f` receives the graph and one node per entry of `inputs`. Parameters are
/// perturbed in place and restored before returning.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    inputs: &mut [Tensor],
    opts: &CheckOptions,
    f: F,
) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let h = opts.step;
    let (param_grads, input_grads, f0) = {
        let mut g = Graph::new(store).with_fault(opts.fault);
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.input_with_grad(t)).collect();
        let out = f(&mut g, &ids)?;
        if g.value(out).len() != 1 {
            return Err(Error::InvalidUse(format!(
                "gradient check needs a scalar output, got shape {:?}",
                g.shape(out)
            )));
        }
        let back = g.backward(out)?;
        let ig: Vec<Vec<f64>> = ids
            .iter()
            .zip(inputs.iter())
            .map(|(&id, t)| back.grad(id, t.len()))
            .collect();
        (back.params, ig, g.value(out)[0])
    };

    let mut report = CheckReport::default();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let n = store.get(id).value.len();
        let coords = coordinate_sample(n, opts.max_coords);
        let mut worst = 0.0f64;
        for &j in &coords {
            let orig = store.get(id).value.data()[j];
            let numeric = central(h, f0, |d| {
                store.get_mut(id).value.data_mut()[j] = orig + d;
                let v = eval(store, inputs, &f);
                store.get_mut(id).value.data_mut()[j] = orig;
                v
            })?;
            worst = worst.max(rel_error(param_grads.get(id)[j], numeric));
        }
        report.entries.push(CheckEntry {
            name: store.get(id).name.clone(),
            coords: coords.len(),
            max_rel_error: worst,
        });
    }
    for i in 0..inputs.len() {
        let coords = coordinate_sample(inputs[i].len(), opts.max_coords);
        let mut worst = 0.0f64;
        for &j in &coords {
            let orig = inputs[i].data()[j];
            let numeric = central(h, f0, |d| {
                inputs[i].data_mut()[j] = orig + d;
                let v = eval(store, inputs, &f);
                inputs[i].data_mut()[j] = orig;
                v
            })?;
            worst = worst.max(rel_error(input_grads[i][j], numeric));
        }
        report.entries.push(CheckEntry {
            name: format!("input{i}"),
            coords: coords.len(),
            max_rel_error: worst,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn store_with(name: &str, t: Tensor) -> (ParamStore, crate::params::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add(name.into(), t).unwrap();
        (s, id)
    }

    #[test]
    fn linear_loss_is_exact() {
        let mut rng = RngStream::new(3);
        let w = Tensor::new(&[3, 2], (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let (mut store, id) = store_with("w", w);
        let mut x = [Tensor::new(&[4, 3], (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()];
        let r = finite_diff_check(&mut store, &mut x, &CheckOptions::default(), |g, xs| {
            let y = g.linear(xs[0], id, None)?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(r.max_rel_error() <= 1e-10, "{r:?}");
        assert_eq!(r.entries.len(), 2);
    }

    #[test]
    fn corrupted_adjoints_are_detected() {
        let mut store = ParamStore::new();
        let w = store
            .add(
                "w".into(),
                Tensor::new(&[3, 2], vec![1.0, 0.5, -1.0, 0.25, 2.0, 1.5]).unwrap(),
            )
            .unwrap();
        let b = store
            .add("b".into(), Tensor::new(&[2], vec![0.3, -0.2]).unwrap())
            .unwrap();
        let mut x = [Tensor::new(&[2, 3], vec![-1.0, 0.5, -0.25, 2.0, -3.0, 0.75]).unwrap()];
        for fault in [Fault::ReluLeak, Fault::BiasGradDoubled] {
            let opts = CheckOptions {
                fault: Some(fault),
                ..Default::default()
            };
            let r = finite_diff_check(&mut store, &mut x, &opts, |g, xs| {
                let a = g.relu(xs[0]);
                let y = g.linear(a, w, Some(b))?;
                Ok(g.sum(y))
            })
            .unwrap();
            assert!(r.max_rel_error() > 1e-2, "{fault:?} went unnoticed: {r:?}");
        }
    }

    #[test]
    fn non_scalar_outputs_are_rejected() {
        let (mut store, _) = store_with("w", Tensor::zeros(&[1]));
        let mut x = [Tensor::zeros(&[2])];
        let r = finite_diff_check(&mut store, &mut x, &CheckOptions::default(), |_, xs| Ok(xs[0]));
        assert!(matches!(r, Err(Error::InvalidUse(_))));
    }

    #[test]
    fn coordinate_sampling_is_even_and_capped() {
        assert_eq!(coordinate_sample(5, None), vec![0, 1, 2, 3, 4]);
        assert_eq!(coordinate_sample(10, Some(4)), vec![0, 2, 5, 7]);
        assert_eq!(coordinate_sample(3, Some(8)), vec![0, 1, 2]);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_error(1.5, 1.0), 0.5);
        assert_eq!(rel_error(20.0, 10.0), 1.0);
        assert_eq!(rel_error(1e-3, 0.0), 1e-3);
    }
}
