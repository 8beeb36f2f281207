use super::{NumericsError, Result, Tape, Tensor, Var};

/// Outcome of a central-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over checked entries of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`
    pub max_rel_error: f64,
    /// `(input index, flat element index)` where the maximum occurred.
    pub worst: (usize, usize),
    /// `(analytic, numeric)` at `worst`.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compares tape gradients of a scalar function against central differences.
///
/// `build` receives a fresh tape with every entry of `inputs` registered as a
/// trainable leaf (in order) and must return a scalar loss. Inputs listed in
/// `frozen` are registered as constants and not checked, which is how
/// piecewise-constant arguments are excluded.
pub fn grad_check<F>(inputs: &[Tensor<f64>], frozen: &[usize], epsilon: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if epsilon <= 0.0 {
        return Err(NumericsError::Contract(format!("epsilon must be positive, got {epsilon}")));
    }
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> =
            values.iter().enumerate().map(|(i, t)| tape.leaf(t.clone(), !frozen.contains(&i))).collect();
        let loss = build(&mut tape, &vars)?;
        tape.value(loss)
            .item()
            .ok_or_else(|| NumericsError::Contract("grad_check loss must be scalar".into()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> =
        inputs.iter().enumerate().map(|(i, t)| tape.leaf(t.clone(), !frozen.contains(&i))).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), worst_values: (0.0, 0.0), checked: 0 };
    let mut probe = inputs.to_vec();
    for (i, &var) in vars.iter().enumerate() {
        if frozen.contains(&i) {
            continue;
        }
        let analytic = tape.grad(var).expect("backward fills every trainable leaf").data().to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + epsilon;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - epsilon;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (i, j);
                report.worst_values = (a, numeric);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes_tightly() {
        let x = Tensor::vector(vec![0.5, -1.5]);
        let report = grad_check(&[x], &[], 1e-3, |tape, v| {
            let sq = tape.mul(v[0], v[0])?;
            tape.sum(sq)
        })
        .unwrap();
        assert!(report.passes(1e-6), "{report:?}");
    }

    #[test]
    fn rejects_non_positive_epsilon() {
        let x = Tensor::vector(vec![1.0]);
        assert!(grad_check(&[x], &[], 0.0, |tape, v| tape.sum(v[0])).is_err());
    }
}
