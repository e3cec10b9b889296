use super::{Gradients, ParamSet, RngStream};
use crate::{Error, Result};

/// A deterministic scalar function of a parameter set with an analytic gradient.
pub trait Objective {
    fn value(&self, params: &ParamSet) -> Result<f64>;
    fn value_and_grad(&self, params: &ParamSet) -> Result<(f64, Gradients)>;
}

#[derive(Debug, Clone)]
pub struct FdOptions {
    /// Central-difference step.
    pub step: f64,
    /// Maximum admissible relative error per checked coordinate.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so that coordinates
    /// with a vanishing gradient are judged on absolute error instead.
    pub floor: f64,
    /// Check at most this many coordinates per tensor (all when `None`).
    pub coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            step: 1e-6,
            tolerance: 1e-5,
            floor: 1e-4,
            coords_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerFdResult {
    pub layer: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(tensor name, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
    pub flagged: bool,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub layers: Vec<LayerFdResult>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.layers.iter().all(|l| !l.flagged)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.layers.iter().map(|l| l.max_rel_err).fold(0.0, f64::max)
    }

    pub fn flagged(&self) -> Vec<&str> {
        self.layers.iter().filter(|l| l.flagged).map(|l| l.layer.as_str()).collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare `objective`'s analytic gradient against central differences.
///
/// The objective is evaluated twice at the base point first; any mismatch
/// means it is not deterministic and the audit is refused.
pub fn finite_diff_check(objective: &impl Objective, params: &ParamSet, opts: &FdOptions) -> Result<FdReport> {
    let (base, grads) = objective.value_and_grad(params)?;
    let again = objective.value(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Audit(format!(
            "objective is not deterministic: {base:e} then {again:e} at identical parameters"
        )));
    }
    check_against(objective, params, &grads, opts)
}

/// Like [`finite_diff_check`] but with caller-supplied analytic gradients
/// (used to audit a deliberately corrupted gradient).
pub fn check_against(objective: &impl Objective, params: &ParamSet, grads: &Gradients, opts: &FdOptions) -> Result<FdReport> {
    let mut rng = RngStream::new(opts.seed, 0xfd);
    let mut probe = params.clone();
    let registry = params.registry().clone();
    let mut layers = Vec::with_capacity(registry.len());
    for layer in 0..registry.len() {
        let mut res = LayerFdResult {
            layer: registry.name(layer).to_owned(),
            checked: 0,
            max_rel_err: 0.0,
            worst: None,
            flagged: false,
        };
        for &t in registry.members(layer) {
            let n = params.tensor(t).len();
            let coords = match opts.coords_per_tensor {
                Some(k) if k < n => rng.choose_indices(n, k),
                _ => (0..n).collect(),
            };
            for i in coords {
                let orig = params.tensor(t).values()[i];
                probe.tensor_mut(t).values_mut()[i] = orig + opts.step;
                let up = objective.value(&probe)?;
                probe.tensor_mut(t).values_mut()[i] = orig - opts.step;
                let down = objective.value(&probe)?;
                probe.tensor_mut(t).values_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * opts.step);
                let analytic = grads.tensors[t][i];
                let err = relative_error(analytic, numeric, opts.floor);
                res.checked += 1;
                if err > res.max_rel_err || res.worst.is_none() {
                    res.max_rel_err = res.max_rel_err.max(err);
                    res.worst = Some((params.tensor(t).name().to_owned(), i, analytic, numeric));
                }
            }
        }
        res.flagged = !(res.max_rel_err < opts.tolerance);
        layers.push(res);
    }
    Ok(FdReport { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::ParamTensor;
    use std::cell::Cell;

    struct HalfSquaredNorm;

    impl Objective for HalfSquaredNorm {
        fn value(&self, p: &ParamSet) -> Result<f64> {
            Ok(0.5 * p.tensors().iter().flat_map(|t| t.values()).map(|v| v * v).sum::<f64>())
        }
        fn value_and_grad(&self, p: &ParamSet) -> Result<(f64, Gradients)> {
            let g = Gradients {
                tensors: p.tensors().iter().map(|t| t.values().to_vec()).collect(),
            };
            Ok((self.value(p)?, g))
        }
    }

    fn params() -> ParamSet {
        let mut rng = RngStream::new(3, 3);
        let mut p = ParamSet::new();
        let a: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        p.push_layer("a", vec![ParamTensor::from_values("a.w", &[2, 3], a).unwrap()]).unwrap();
        p.push_layer("b", vec![ParamTensor::from_values("b.w", &[3], b).unwrap()]).unwrap();
        p
    }

    #[test]
    fn quadratic_matches_exactly() {
        let opts = FdOptions {
            tolerance: 1e-7,
            ..FdOptions::default()
        };
        let report = finite_diff_check(&HalfSquaredNorm, &params(), &opts).unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.max_rel_err() < 1e-7);
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let p = params();
        let (_, mut g) = HalfSquaredNorm.value_and_grad(&p).unwrap();
        g.tensors[1][2] += 0.1;
        let report = check_against(&HalfSquaredNorm, &p, &g, &FdOptions::default()).unwrap();
        assert_eq!(report.flagged(), vec!["b"]);
    }

    struct Drifting(Cell<f64>);

    impl Objective for Drifting {
        fn value(&self, _: &ParamSet) -> Result<f64> {
            self.0.set(self.0.get() + 1.0);
            Ok(self.0.get())
        }
        fn value_and_grad(&self, p: &ParamSet) -> Result<(f64, Gradients)> {
            Ok((self.value(p)?, Gradients::zeros_like(p)))
        }
    }

    #[test]
    fn nondeterministic_objective_is_refused() {
        let err = finite_diff_check(&Drifting(Cell::new(0.0)), &params(), &FdOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Audit(_)));
    }
}
