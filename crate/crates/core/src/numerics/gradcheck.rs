use super::{Matrix, NodeId, ParamId, ParamStore, Tape};
use crate::error::{Error, Result};

/// Central-difference step.
pub const FD_EPSILON: f64 = 1e-5;

/// `|a - b| / max(1, |a|, |b|)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Evaluates the scalar loss built by `f` on a fresh tape.
pub fn evaluate<F>(store: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: for<'a> Fn(&mut Tape<'a, f64>) -> Result<NodeId>,
{
    let mut tape = Tape::new(store);
    let out = f(&mut tape)?;
    let v = tape.value(out);
    if v.shape() != (1, 1) {
        return Err(Error::Evaluation(format!(
            "gradient check needs a scalar loss, got {:?}",
            v.shape()
        )));
    }
    let v = v.data()[0];
    if !v.is_finite() {
        return Err(Error::Evaluation(format!("non-finite loss {v}")));
    }
    Ok(v)
}

/// Compares tape gradients of `f` against central differences over every
/// coordinate of every trainable parameter in `store`.
///
/// `store` is perturbed in place and restored coordinate by coordinate; on
/// return every value is bit-identical to what it was on entry.
pub fn grad_check<F>(store: &mut ParamStore<f64>, f: F) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Tape<'a, f64>) -> Result<NodeId>,
{
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    grad_check_params(store, &ids, f)
}

/// Same as [`grad_check`], restricted to `ids`.
pub fn grad_check_params<F>(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Tape<'a, f64>) -> Result<NodeId>,
{
    let analytic = {
        let mut tape = Tape::new(&*store);
        let out = f(&mut tape)?;
        if !tape.value(out).is_finite() {
            return Err(Error::Evaluation("non-finite loss".into()));
        }
        tape.backward(out)?
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for &id in ids {
        let shape = store.value(id).shape();
        let zero = Matrix::zeros(shape.0, shape.1);
        let grad = analytic.get(id).unwrap_or(&zero).clone();
        for k in 0..grad.len() {
            let original = store.value(id).data()[k];
            store.get_mut(id).value.data_mut()[k] = original + FD_EPSILON;
            let plus = evaluate(store, &f);
            store.get_mut(id).value.data_mut()[k] = original - FD_EPSILON;
            let minus = evaluate(store, &f);
            store.get_mut(id).value.data_mut()[k] = original;
            let numeric = (plus? - minus?) / (2.0 * FD_EPSILON);
            let err = relative_error(grad.data()[k], numeric);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((store.get(id).name.clone(), k));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_all_ones_gradient() {
        let mut store = ParamStore::new();
        let a = store
            .add("a", Matrix::from_rows(&[&[0.3, -1.2], &[2.0, 0.1]]))
            .unwrap();
        let report = grad_check(&mut store, |t| {
            let n = t.param(a);
            Ok(t.sum(n))
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-10, "{report:?}");
        assert_eq!(report.coordinates, 4);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut store = ParamStore::new();
        let a = store.add("a", Matrix::from_rows(&[&[1e308]])).unwrap();
        let err = grad_check(&mut store, |t| {
            let n = t.param(a);
            let big = t.scale(n, 10.0);
            Ok(t.sum(big))
        })
        .unwrap_err();
        assert!(matches!(err, Error::Evaluation(_)));
    }

    #[test]
    fn relative_error_floor_of_one() {
        assert_eq!(relative_error(1e-3, 2e-3), 1e-3);
        assert_eq!(relative_error(10.0, 5.0), 0.5);
    }
}
