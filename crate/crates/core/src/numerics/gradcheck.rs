use super::{Graph, ParamStore, Perturbation, Rng, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub epsilon: f64,
    /// Elements sampled per parameter; `usize::MAX` checks every element.
    pub max_elements_per_param: usize,
    /// Selects which elements are sampled when a parameter is larger than the cap.
    pub seed: u64,
    /// Negative control: corrupts the first analytic gradient element by this
    /// relative amount before comparison.
    pub corrupt_analytic: Option<f64>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            max_elements_per_param: 32,
            seed: 0,
            corrupt_analytic: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_element: usize,
    pub elements_checked: usize,
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares reverse-mode gradients of `loss_fn` with central finite
/// differences, per element:
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// `params` restricts the check to the named parameters; empty means all.
/// `loss_fn` must build a scalar on the supplied graph and be deterministic.
pub fn grad_check<F>(store: &ParamStore, params: &[&str], cfg: &GradCheckConfig, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |g: &mut Graph| -> Result<f64> {
        let v = loss_fn(g, store)?;
        if g.dims(v) != (1, 1) {
            return Err(Error::Check("loss function is not scalar".into()));
        }
        Ok(g.scalar(v))
    };

    let mut g = Graph::new();
    let root = loss_fn(&mut g, store)?;
    if g.dims(root) != (1, 1) {
        return Err(Error::Check("loss function is not scalar".into()));
    }
    let base = g.scalar(root);
    let again = eval(&mut Graph::new())?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Check(format!(
            "loss function is not deterministic ({base} vs {again})"
        )));
    }
    let grads = g.backward(root)?;

    let selected: Vec<usize> = if params.is_empty() {
        (0..store.len()).collect()
    } else {
        params
            .iter()
            .map(|n| {
                store
                    .index_of(n)
                    .ok_or_else(|| Error::Check(format!("unknown parameter {n}")))
            })
            .collect::<Result<_>>()?
    };

    let mut rng = Rng::new(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_element: 0,
        elements_checked: 0,
        per_param: Vec::new(),
    };
    let mut corrupted = false;
    for pidx in selected {
        let p = store.by_index(pidx);
        let n = p.tensor.len();
        let zeros = vec![0.0; n];
        let analytic = grads.get(pidx).unwrap_or(&zeros);
        let elements: Vec<usize> = if n <= cfg.max_elements_per_param {
            (0..n).collect()
        } else {
            let mut e = rng.sample_distinct(n, cfg.max_elements_per_param);
            e.sort_unstable();
            e
        };
        let mut worst = 0f64;
        for el in elements {
            let mut a = analytic[el];
            if let (Some(c), false) = (cfg.corrupt_analytic, corrupted) {
                a = a * (1.0 + c) + c;
                corrupted = true;
            }
            let mut plus = Graph::with_perturbation(Perturbation {
                param: pidx,
                element: el,
                delta: cfg.epsilon,
            });
            let mut minus = Graph::with_perturbation(Perturbation {
                param: pidx,
                element: el,
                delta: -cfg.epsilon,
            });
            let numeric = (eval(&mut plus)? - eval(&mut minus)?) / (2.0 * cfg.epsilon);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if !rel.is_finite() {
                return Err(Error::Check(format!("non-finite comparison for {}[{el}]", p.name)));
            }
            worst = worst.max(rel);
            report.elements_checked += 1;
            if rel > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst_param = p.name.clone();
                report.worst_element = el;
            }
        }
        report.per_param.push((p.name.clone(), worst));
    }
    Ok(report)
}
