use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing backward against central finite differences.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Denominator floor for the relative error, so exactly-zero gradients are
/// judged by the absolute finite-difference noise.
const REL_FLOOR: f64 = 1e-6;

fn projection(n: usize) -> Tensor<f64> {
    // fixed pseudo-random weights so non-scalar outputs reduce to a scalar
    let data = (0..n).map(|i| ((i as f64 + 1.0) * 0.618_034).fract() * 2.0 - 0.7).collect();
    Tensor::new(vec![n], data).expect("length matches")
}

fn scalar_loss<F>(inputs: &[Tensor<f64>], f: &F, track: bool) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| if track { g.param(t.clone()) } else { g.constant(t.clone()) })
        .collect();
    let out = f(&mut g, &vars)?;
    let loss = if g.value(out).numel() == 1 {
        out
    } else {
        let n = g.value(out).numel();
        let flat = g.reshape(out, &[n])?;
        let w = g.constant(projection(n));
        let prod = g.mul(flat, w)?;
        g.sum(prod)
    };
    Ok((g, vars, loss))
}

/// Checks the analytic gradient of `f` with respect to every input against
/// central differences with step `eps`, in double precision.
pub fn grad_check<F>(inputs: &[Tensor<f64>], f: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (g, vars, loss) = scalar_loss(inputs, &f, true)?;
    let grads = g.backward(loss)?;
    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("every input is a parameter");
        for j in 0..inputs[i].numel() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let (gp, _, lp) = scalar_loss(&probe, &f, false)?;
            let plus = gp.value(lp).item()?;
            probe[i].data_mut()[j] = orig - eps;
            let (gm, _, lm) = scalar_loss(&probe, &f, false)?;
            let minus = gm.value(lm).item()?;
            probe[i].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}
