//! Central finite-difference check of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Array, Graph, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-8;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, REL_FLOOR)
}

pub fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many coordinates per input, sampled with `seed`.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Lower bound on the relative-error denominator. Gradients below it
    /// are compared in absolute terms, scaled by `1 / rel_floor`.
    pub rel_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: DEFAULT_STEP,
            max_coords: None,
            seed: 0,
            rel_floor: REL_FLOOR,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst entry.
    pub worst: Option<(usize, usize)>,
    /// Analytic and numeric gradient at `worst`.
    pub worst_values: (f64, f64),
    pub coords_checked: usize,
}

fn eval<F>(f: &F, inputs: &[Array]) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|a| g.param(a.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::Graph("grad_check function must return a scalar".into()));
    }
    Ok((g, vars, out))
}

/// Maximum relative error between analytic and central-difference gradients
/// over every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Array], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let opts = GradCheckOptions {
        step,
        ..Default::default()
    };
    grad_check_with(f, inputs, &opts).map(|r| r.max_rel_error)
}

pub fn grad_check_with<F>(f: F, inputs: &[Array], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (mut g, vars, out) = eval(&f, inputs)?;
    g.backward(out)?;
    let analytic: Vec<Array> = vars
        .iter()
        .zip(inputs)
        .map(|(v, a)| g.grad(*v).cloned().unwrap_or_else(|| Array::zeros(a.shape().to_vec())))
        .collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < input.len() => {
                let mut c = sample(&mut rng, input.len(), m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..input.len()).collect(),
        };
        for c in coords {
            let x0 = input.data()[c];
            probe[k].data_mut()[c] = x0 + opts.step;
            let fp = value_at(&f, &probe)?;
            probe[k].data_mut()[c] = x0 - opts.step;
            let fm = value_at(&f, &probe)?;
            probe[k].data_mut()[c] = x0;

            let numeric = (fp - fm) / (2.0 * opts.step);
            let err = relative_error_floored(analytic[k].data()[c], numeric, opts.rel_floor);
            report.coords_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((k, c));
                report.worst_values = (analytic[k].data()[c], numeric);
            }
        }
    }
    Ok(report)
}

fn value_at<F>(f: &F, inputs: &[Array]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (g, _, out) = eval(f, inputs)?;
    Ok(g.value(out).item())
}
