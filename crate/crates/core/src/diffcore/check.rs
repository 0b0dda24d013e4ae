use super::{DiffError, Tape, Tensor, Var};

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct FdReport {
    /// `max_i |analytic_i - numeric_i| / (|numeric_i| + 1e-12)`.
    pub max_rel_error: f64,
    /// Coordinate attaining `max_rel_error`.
    pub worst_coordinate: usize,
    pub analytic: Tensor,
    pub numeric: Tensor,
    /// Coordinates whose one-sided differences disagree, i.e. where the
    /// function has a kink at the scale of `step`.
    pub kinks: Vec<usize>,
}

impl FdReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Checks the reverse-mode gradient of a scalar function built on a tape
/// against central differences with the given `step`.
///
/// `f` receives a fresh tape and a leaf holding the evaluation point and
/// must return a one-element node.
pub fn finite_difference_check<F, E>(f: F, point: &Tensor, step: f64) -> Result<FdReport, E>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<DiffError>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let eval = |p: Tensor, coordinate: usize| -> Result<f64, E> {
        let mut tape = Tape::new();
        let x = tape.constant(p);
        let y = f(&mut tape, x)?;
        let v = tape.scalar(y);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(DiffError::NonFinite { coordinate }.into())
        }
    };

    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    let f0 = tape.scalar(y);
    if !f0.is_finite() {
        return Err(DiffError::NonFinite { coordinate: 0 }.into());
    }
    let analytic = tape.backward(y)?.wrt(&tape, x);

    let mut numeric = Tensor::zeros(point.shape());
    let mut kinks = Vec::new();
    let mut max_rel_error = 0.0;
    let mut worst_coordinate = 0;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let fp = eval(plus, i)?;
        let fm = eval(minus, i)?;
        let central = (fp - fm) / (2.0 * step);
        numeric.data_mut()[i] = central;

        let forward = (fp - f0) / step;
        let backward = (f0 - fm) / step;
        let scale = forward.abs().max(backward.abs()).max(1e-8);
        if (forward - backward).abs() > 0.5 * scale {
            kinks.push(i);
        }

        let a = analytic.data()[i];
        let rel = (a - central).abs() / (central.abs() + 1e-12);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_coordinate = i;
        }
    }
    Ok(FdReport {
        max_rel_error,
        worst_coordinate,
        analytic,
        numeric,
        kinks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_one() {
        let r = finite_difference_check(
            |t, x| {
                let y = t.square(x);
                Ok::<_, DiffError>(t.sum(y))
            },
            &Tensor::scalar(1.0),
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{}", r.max_rel_error);
        assert!(r.kinks.is_empty());
    }

    #[test]
    fn norm_at_origin_is_flagged() {
        let r = finite_difference_check(|t, x| Ok::<_, DiffError>(t.l2_norm(x)), &Tensor::zeros(&[1, 3]), 1e-5)
            .unwrap();
        assert_eq!(r.kinks, vec![0, 1, 2]);
        // The subgradient at the origin is taken as zero.
        assert!(r.analytic.data().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn non_finite_reports_coordinate() {
        let err = finite_difference_check(
            |t, x| {
                let y = t.log(x);
                Ok::<_, DiffError>(t.sum(y))
            },
            &Tensor::row(vec![1.0, 1e-6]),
            1e-5,
        )
        .unwrap_err();
        assert_eq!(err, DiffError::NonFinite { coordinate: 1 });
    }
}
