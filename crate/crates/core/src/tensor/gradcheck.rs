use super::{ParamStore, Tape, TensorError, Var};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_abs_error: f64,
    /// Parameter name and flat index of the coordinate with the largest
    /// relative error.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Denominator floor used by [`relative_error`] and [`grad_check`].
pub const RELATIVE_FLOOR: f64 = 1e-8;

/// Relative error with the `max(|a|, |b|, 1e-8)` denominator.
pub fn relative_error(a: f64, b: f64) -> f64 {
    relative_error_floor(a, b, RELATIVE_FLOOR)
}

/// Relative error with the `max(|a|, |b|, floor)` denominator.
pub fn relative_error_floor(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares the autodiff gradient of `loss_fn` against
/// `(f(θ + h e_i) − f(θ − h e_i)) / 2h` for every scalar in `store`.
///
/// Every evaluation gets a fresh tape. With `dropout_seed = Some(s)` the
/// tapes run in training mode with seed `s`, so all evaluations see the
/// same dropout masks. Existing gradients in `store` are cleared.
pub fn grad_check<E, F>(store: &mut ParamStore, h: f64, dropout_seed: Option<u64>, loss_fn: F) -> Result<GradCheckReport, E>
where
    E: From<TensorError>,
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var, E>,
{
    grad_check_floor(store, h, RELATIVE_FLOOR, dropout_seed, loss_fn)
}

/// [`grad_check`] with a chosen denominator floor. Central differences
/// carry roughly `ε·|f|/h` of roundoff, so coordinates whose gradient is
/// below that scale need a floor above it.
pub fn grad_check_floor<E, F>(
    store: &mut ParamStore,
    h: f64,
    floor: f64,
    dropout_seed: Option<u64>,
    mut loss_fn: F,
) -> Result<GradCheckReport, E>
where
    E: From<TensorError>,
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var, E>,
{
    if h <= 0.0 {
        return Err(TensorError::InvalidArgument { op: "grad_check", msg: format!("step must be > 0, got {h}") }.into());
    }
    let new_tape = || match dropout_seed {
        Some(seed) => Tape::training(seed),
        None => Tape::new(),
    };

    store.zero_grads();
    let mut tape = new_tape();
    let loss = loss_fn(&mut tape, store)?;
    tape.backward(loss, store)?;
    let analytic: Vec<Vec<f64>> = store
        .iter()
        .map(|(_, p)| match &p.grad {
            Some(g) => g.as_slice().to_vec(),
            None => vec![0.0; p.value.len()],
        })
        .collect();

    let mut eval = |store: &ParamStore| -> Result<f64, E> {
        let mut tape = new_tape();
        let loss = loss_fn(&mut tape, store)?;
        Ok(tape.value(loss).item())
    };

    let mut report = GradCheckReport { max_relative_error: 0.0, max_abs_error: 0.0, worst: None, coords_checked: 0 };
    let ids: Vec<_> = store.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        for k in 0..store.value(id).len() {
            let orig = store.value(id).as_slice()[k];
            store.value_mut(id).as_mut_slice()[k] = orig + h;
            let plus = eval(store)?;
            store.value_mut(id).as_mut_slice()[k] = orig - h;
            let minus = eval(store)?;
            store.value_mut(id).as_mut_slice()[k] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi][k];
            let rel = relative_error_floor(a, numeric, floor);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(rel);
                report.worst = Some((store.get(id).name.clone(), k));
            }
            report.coords_checked += 1;
        }
    }
    Ok(report)
}
