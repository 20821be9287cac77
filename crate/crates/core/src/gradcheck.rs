//! Central finite-difference verification of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step, must lie in `[1e-6, 1e-4]`.
    pub eps: f64,
    /// Bound on `|analytic - numeric| / max(1, |numeric|)`.
    pub tol: f64,
    /// Check at most this many entries, sampled uniformly; `None` checks all.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-6,
            tol: 1e-5,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EntryCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub tol: f64,
    pub worst: Option<EntryCheck>,
    pub failures: Vec<EntryCheck>,
    /// Name of the first parameter whose analytic gradient was not finite.
    pub non_finite: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.non_finite.is_none()
    }
}

/// Compares the analytic gradient returned by `f` against central differences
/// of its loss for sampled parameter entries.
pub fn grad_check<F>(params: &ParamStore<f64>, mut f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>) -> Result<(f64, ParamStore<f64>)>,
{
    if !(1e-6..=1e-4).contains(&cfg.eps) {
        return Err(Error::Config(format!(
            "finite-difference step {} outside [1e-6, 1e-4]",
            cfg.eps
        )));
    }
    let mut report = GradCheckReport {
        tol: cfg.tol,
        ..Default::default()
    };
    let entries: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(name, t)| (0..t.len()).map(move |i| (name.to_string(), i)))
        .collect();
    if entries.is_empty() {
        return Ok(report);
    }

    let (_, analytic) = f(params)?;
    if let Some(name) = analytic.first_non_finite() {
        report.non_finite = Some(name.to_string());
        return Ok(report);
    }

    let mut chosen: Vec<usize> = match cfg.max_entries {
        Some(m) if m < entries.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rand::seq::index::sample(&mut rng, entries.len(), m).into_vec()
        }
        _ => (0..entries.len()).collect(),
    };
    chosen.sort_unstable();

    let mut probe = params.clone();
    for idx in chosen {
        let (name, i) = &entries[idx];
        let orig = probe.get(name).data()[*i];
        probe.get_mut(name).data_mut()[*i] = orig + cfg.eps;
        let (plus, _) = f(&probe)?;
        probe.get_mut(name).data_mut()[*i] = orig - cfg.eps;
        let (minus, _) = f(&probe)?;
        probe.get_mut(name).data_mut()[*i] = orig;

        let numeric = (plus - minus) / (2.0 * cfg.eps);
        let a = analytic.try_get(name).map_or(0.0, |g| g.data()[*i]);
        let rel_err = (a - numeric).abs() / numeric.abs().max(1.0);
        let entry = EntryCheck {
            name: name.clone(),
            index: *i,
            analytic: a,
            numeric,
            rel_err,
        };
        report.checked += 1;
        if !rel_err.is_finite() || rel_err > cfg.tol {
            report.failures.push(entry.clone());
        }
        if report.worst.as_ref().is_none_or(|w| !(rel_err <= w.rel_err)) {
            report.worst = Some(entry);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn sum_of_squares(ps: &ParamStore<f64>) -> Result<(f64, ParamStore<f64>)> {
        let mut grads = ps.zeros_like();
        let mut loss = 0.0;
        for (name, t) in ps.iter() {
            loss += t.data().iter().map(|v| v * v).sum::<f64>();
            let g = grads.get_mut(name);
            for (d, &v) in g.data_mut().iter_mut().zip(t.data()) {
                *d = 2.0 * v;
            }
        }
        Ok((loss, grads))
    }

    #[test]
    fn quadratic_passes_tightly() {
        let mut ps = ParamStore::new();
        ps.register("a", Tensor::from_vec(&[3], vec![0.5, -1.5, 2.0]).unwrap());
        ps.register("b.c", Tensor::from_vec(&[2, 2], vec![1.0, 0.0, -0.25, 3.0]).unwrap());
        let cfg = GradCheckConfig {
            eps: 1e-5,
            tol: 1e-8,
            ..Default::default()
        };
        let report = grad_check(&ps, sum_of_squares, &cfg).unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.checked, 7);
    }

    #[test]
    fn empty_store_passes_with_empty_report() {
        let ps = ParamStore::<f64>::new();
        let report = grad_check(&ps, sum_of_squares, &GradCheckConfig::default()).unwrap();
        assert!(report.passed());
        assert_eq!(report.checked, 0);
        assert!(report.worst.is_none());
    }

    #[test]
    fn wrong_gradient_is_caught_and_named() {
        let mut ps = ParamStore::new();
        ps.register("w", Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let report = grad_check(
            &ps,
            |p| {
                let (l, mut g) = sum_of_squares(p)?;
                g.get_mut("w").data_mut()[1] *= 1.5;
                Ok((l, g))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.worst.unwrap().index, 1);
    }

    #[test]
    fn non_finite_gradient_reports_parameter() {
        let mut ps = ParamStore::new();
        ps.register("bad", Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let report = grad_check(
            &ps,
            |p| {
                let mut g = p.zeros_like();
                g.get_mut("bad").data_mut()[0] = f64::NAN;
                Ok((0.0, g))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.non_finite.as_deref(), Some("bad"));
        assert!(!report.passed());
    }

    #[test]
    fn step_outside_range_is_rejected() {
        let ps = ParamStore::<f64>::new();
        let cfg = GradCheckConfig {
            eps: 1e-3,
            ..Default::default()
        };
        assert!(grad_check(&ps, sum_of_squares, &cfg).is_err());
    }
}
