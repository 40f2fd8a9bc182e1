use super::{NumericsError, Tape, Tensor, Var};

/// Central finite-difference step.
pub const FD_STEP: f64 = 1e-3;

/// Coordinates whose ReLU pattern changes within this distance are skipped.
pub const KINK_MARGIN: f64 = 1e-2;

/// Gradients smaller than this are compared in absolute rather than relative terms.
const REL_FLOOR: f64 = 1e-2;

/// Outcome of comparing tape gradients against central finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Elements lying within [`KINK_MARGIN`] of a ReLU kink, where the function is not smooth.
    pub skipped_kinks: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Verifies the backward pass of `build` at `inputs`.
///
/// `build` records a computation over the supplied leaves (all registered as
/// trainable) and returns a scalar loss. Errors from `build` are reported as a
/// failed check rather than propagated.
pub fn check_gradients<F>(build: F, inputs: &[Tensor<f64>], tolerance: f64) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, NumericsError>,
{
    let failed = |tolerance| GradCheckReport {
        max_rel_error: f64::INFINITY,
        worst: None,
        checked: 0,
        skipped_kinks: 0,
        tolerance,
        passed: false,
    };

    let eval = |values: &[Tensor<f64>]| -> Result<(f64, Vec<bool>), NumericsError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok((tape.value(loss).item(), tape.relu_pattern()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let Ok(loss) = build(&mut tape, &vars) else {
        return failed(tolerance);
    };
    if tape.backward(loss).is_err() {
        return failed(tolerance);
    }
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped_kinks: 0,
        tolerance,
        passed: true,
    };
    let base_pattern = tape.relu_pattern();
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for e in 0..input.len() {
            let orig = input.data()[e];
            probe[k].data_mut()[e] = orig + FD_STEP;
            let plus = eval(&probe);
            probe[k].data_mut()[e] = orig - FD_STEP;
            let minus = eval(&probe);
            probe[k].data_mut()[e] = orig + KINK_MARGIN;
            let far_plus = eval(&probe);
            probe[k].data_mut()[e] = orig - KINK_MARGIN;
            let far_minus = eval(&probe);
            probe[k].data_mut()[e] = orig;
            let (Ok((fp, pat_p)), Ok((fm, pat_m))) = (plus, minus) else {
                return failed(tolerance);
            };
            let near_kink = [far_plus, far_minus]
                .iter()
                .any(|r| !matches!(r, Ok((_, p)) if *p == base_pattern));
            if pat_p != pat_m || near_kink {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let a = analytic[k].get(e).copied().unwrap_or(f64::NAN);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err.is_nan() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((k, e));
            }
        }
    }
    report.passed = report.max_rel_error < tolerance && report.checked > 0;
    report
}

/// `|a - n| / max(|a|, |n|, floor)`; NaN when either side is not finite.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    if !analytic.is_finite() || !numeric.is_finite() {
        return f64::NAN;
    }
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_away_from_kinks_passes_tightly() {
        let x = Tensor::matrix(2, 3, vec![-0.9, 0.4, 0.7, -0.3, 0.55, -0.6]).unwrap();
        let w = Tensor::matrix(3, 1, vec![0.3, -0.8, 0.5]).unwrap();
        let report = check_gradients(
            |tape, v| {
                let r = tape.relu(v[0]);
                let z = tape.matmul(r, v[1])?;
                let zt = tape.transpose(z)?;
                tape.softmax_cross_entropy(zt, &[1])
            },
            &[x, w],
            1e-6,
        );
        assert!(report.passed, "{report:?}");
        assert_eq!(report.skipped_kinks, 0);
    }

    #[test]
    fn corrupted_backward_rule_fails() {
        let x = Tensor::matrix(1, 3, vec![0.2, -0.5, 0.9]).unwrap();
        let report = check_gradients(
            |tape, v| {
                let xv = tape.value(v[0]).clone();
                let squared = Tensor::matrix(1, 3, xv.data().iter().map(|a| a * a).collect())?;
                // d(x²)/dx is 2x; the rule below returns x.
                let y = tape.custom(&[v[0]], squared, |inputs, _, g| {
                    vec![inputs[0].data().iter().zip(g).map(|(a, b)| a * b).collect()]
                });
                tape.softmax_cross_entropy(y, &[0])
            },
            &[x],
            1e-4,
        );
        assert!(!report.passed);
        assert!(report.max_rel_error > 0.1);
    }

    #[test]
    fn build_errors_are_reported_as_failures() {
        let x = Tensor::vector(vec![0.0, 0.0]);
        let report = check_gradients(
            |tape, v| {
                let c = tape.constant(Tensor::vector(vec![1.0, 0.0]));
                tape.cosine(v[0], c)
            },
            &[x],
            1e-4,
        );
        assert!(!report.passed);
    }
}
