use super::{Tape, Tensor, TensorError, Var};

pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, component index)` of the worst component.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub components: usize,
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` receives the parameters as tape leaves and must return a scalar. The
/// relative error of a component is `|a − n| / max(1e-8, |a| + |n|)`.
/// Functions with kinks (such as `max(0, ·)`) must be evaluated away from
/// them, since a perturbation that crosses a kink breaks the comparison.
pub fn grad_check<F>(f: F, params: &[Tensor], epsilon: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get(*v)).collect();

    let eval = |ps: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out)
            .item()
            .ok_or_else(|| TensorError::Contract("grad_check function must return a scalar".into()))
    };

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        components: 0,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        for ci in 0..work[pi].numel() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + epsilon;
            let plus = eval(&work)?;
            work[pi].data_mut()[ci] = orig - epsilon;
            let minus = eval(&work)?;
            work[pi].data_mut()[ci] = orig;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = grad.data()[ci];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.components += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((pi, ci));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
