use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Below this magnitude the absolute difference is reported instead of the
/// relative one.
const ABS_FALLBACK: f64 = 1e-8;

/// Worst disagreement found inside one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamError {
    pub param: usize,
    pub entry: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// One entry per parameter tensor, in input order.
    pub per_param: Vec<ParamError>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.per_param.iter().map(|p| p.error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamError> {
        self.per_param
            .iter()
            .max_by(|a, b| a.error.total_cmp(&b.error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale < ABS_FALLBACK {
        diff
    } else {
        diff / scale
    }
}

/// Compares the tape gradient of `f` against central differences
/// `(f(θ + h·e_i) − f(θ − h·e_i)) / 2h` for every entry of every parameter.
///
/// `f` builds a scalar on a fresh graph from the parameter leaves it is given.
pub fn check_gradients<F>(params: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.item(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
    let loss = f(&mut g, &vars)?;
    if g.value(loss).len() != 1 {
        return Err(Error::Contract("gradient check needs a scalar function".into()));
    }
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad_tensor(v)).collect();
    drop(g);

    let mut work = params.to_vec();
    let mut report = GradCheckReport::default();
    for (pi, grad) in analytic.iter().enumerate() {
        let mut worst = ParamError {
            param: pi,
            entry: 0,
            analytic: 0.0,
            numeric: 0.0,
            error: 0.0,
        };
        for e in 0..grad.numel() {
            let orig = work[pi].data()[e];
            work[pi].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[e];
            let err = relative_error(a, numeric);
            if err > worst.error || e == 0 {
                worst = ParamError {
                    param: pi,
                    entry: e,
                    analytic: a,
                    numeric,
                    error: err,
                };
            }
        }
        report.per_param.push(worst);
    }
    Ok(report)
}
