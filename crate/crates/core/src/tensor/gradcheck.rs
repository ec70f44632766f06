//! Central-difference verification of tape gradients.

use super::{Gradients, ParamStore, Tape, TensorError, TensorResult, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step `h`.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so that gradients which
    /// are zero up to rounding are compared absolutely.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-6,
        }
    }
}

/// Per-parameter outcome.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub scalars: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(move |p| p.max_rel_error >= self.tol)
    }
}

/// `(f(x+h) - f(x-h)) / 2h`.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients of the scalar built by `loss_fn` against central
/// differences, for every scalar of every parameter in `store`.
///
/// `loss_fn` must be deterministic (dropout off); it is evaluated twice at the
/// unperturbed point and rejected if the values differ.
pub fn finite_diff_check<F>(
    store: &ParamStore,
    loss_fn: F,
    cfg: &GradCheckConfig,
) -> TensorResult<GradCheckReport>
where
    F: for<'s> Fn(&Tape<'s>, &'s ParamStore) -> TensorResult<Var>,
{
    let eval = |s: &ParamStore| -> TensorResult<f64> {
        let tape = Tape::new();
        let loss = loss_fn(&tape, s)?;
        Ok(tape.scalar(loss))
    };
    let analytic = |s: &ParamStore| -> TensorResult<Vec<Vec<f64>>> {
        let tape = Tape::new();
        let loss = loss_fn(&tape, s)?;
        if !tape.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss(tape.shape(loss)));
        }
        let g = tape.backward(loss)?;
        Ok(dense_param_grads(s, &g))
    };
    check_scalar_function(store, eval, analytic, cfg)
}

/// Per-parameter gradients from `g`, with zeros where the loss did not reach.
pub(crate) fn dense_param_grads(store: &ParamStore, g: &Gradients) -> Vec<Vec<f64>> {
    store
        .ids()
        .map(|id| {
            g.param(id)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; store.get(id).len()])
        })
        .collect()
}

/// Generic driver: `eval` gives the loss at a parameter point, `analytic`
/// its gradient per parameter.
pub(crate) fn check_scalar_function<E, V, G>(
    store: &ParamStore,
    eval: V,
    analytic: G,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, E>
where
    E: From<TensorError>,
    V: Fn(&ParamStore) -> Result<f64, E>,
    G: FnOnce(&ParamStore) -> Result<Vec<Vec<f64>>, E>,
{
    if store.is_empty() {
        return Ok(GradCheckReport {
            params: Vec::new(),
            max_rel_error: 0.0,
            tol: cfg.tol,
            passed: true,
        });
    }

    let first = eval(store)?;
    let second = eval(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second }.into());
    }
    let grads = analytic(store)?;

    let mut probe = store.clone();
    let mut params = Vec::with_capacity(store.len());
    for id in store.ids() {
        let n = store.get(id).len();
        let mut check = ParamCheck {
            name: store.name(id).to_string(),
            scalars: n,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: 0,
        };
        for k in 0..n {
            let orig = store.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + cfg.step;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig - cfg.step;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let analytic = grads[id.index()][k];
            let rel = relative_error(analytic, numeric, cfg.abs_floor);
            let abs = (analytic - numeric).abs();
            check.max_abs_error = check.max_abs_error.max(abs);
            if rel > check.max_rel_error || !rel.is_finite() {
                check.max_rel_error = rel;
                check.worst_index = k;
            }
        }
        params.push(check);
    }
    let max_rel_error = params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error < cfg.tol && max_rel_error.is_finite(),
        params,
        max_rel_error,
        tol: cfg.tol,
    })
}
