use crate::error::{Error, Result};
use crate::tensor::{Mode, ParamGroup, Tape, Var};

/// Gradients smaller than this are compared in absolute terms.
const ABS_FLOOR: f64 = 1e-6;

/// Compares an analytic gradient against central finite differences.
///
/// `f` returns the function value and its analytic gradient at a point. The
/// result is the maximum over coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
pub fn finite_diff_check<F>(mut f: F, point: &[f64], epsilon: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    if epsilon <= 0.0 {
        return Err(Error::invalid("epsilon must be positive"));
    }
    let (v0, analytic) = f(point);
    if !v0.is_finite() {
        return Err(Error::NonFinite("function value at the base point".into()));
    }
    if analytic.len() != point.len() {
        return Err(Error::shape(format!(
            "gradient has {} entries for a {}-dimensional point",
            analytic.len(),
            point.len()
        )));
    }
    let mut x = point.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + epsilon;
        let (plus, _) = f(&x);
        x[i] = orig - epsilon;
        let (minus, _) = f(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("function value near coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let scale = analytic[i].abs().max(numeric.abs()).max(ABS_FLOOR);
        let err = (analytic[i] - numeric).abs() / scale;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Checks the tape's gradient of the scalar graph built by `build` with
/// respect to every entry of `group`, by central differences of width
/// `epsilon`. Returns the worst relative error.
pub fn check_graph<F>(group: &ParamGroup, epsilon: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_model(
        group,
        |g| vec![g],
        epsilon,
        |tape, g| {
            let vars = tape.bind(g, Mode::Train);
            build(tape, &vars)
        },
    )
}

/// Like [`check_graph`] for a whole model: `groups` lists the parameter
/// groups to perturb and `build` must bind them in [`Mode::Train`]. Any
/// other dependence of the graph on the model must go through constants
/// that do not change with those groups.
pub fn check_model<M, G, F>(model: &M, groups: G, epsilon: f64, build: F) -> Result<f64>
where
    M: Clone,
    G: Fn(&mut M) -> Vec<&mut ParamGroup>,
    F: Fn(&mut Tape, &M) -> Result<Var>,
{
    let mut probe = model.clone();
    let point: Vec<f64> = groups(&mut probe).iter().flat_map(|g| g.flatten()).collect();
    let mut failure = None;
    let worst = finite_diff_check(
        |x| {
            let mut off = 0;
            for g in groups(&mut probe) {
                let n = g.num_scalars();
                if let Err(e) = g.set_flat(&x[off..off + n]) {
                    failure.get_or_insert(e);
                }
                off += n;
            }
            let mut tape = Tape::new();
            let graph = build(&mut tape, &probe).and_then(|loss| {
                let grads = tape.backward(loss)?;
                Ok((tape.scalar(loss), grads))
            });
            match graph {
                Ok((value, grads)) => {
                    let flat = groups(&mut probe)
                        .iter()
                        .flat_map(|g| grads.for_group(g))
                        .flat_map(|t| t.into_data())
                        .collect();
                    (value, flat)
                }
                Err(e) => {
                    failure.get_or_insert(e);
                    (f64::NAN, Vec::new())
                }
            }
        },
        &point,
        epsilon,
    );
    match failure {
        Some(e) => Err(e),
        None => worst,
    }
}
