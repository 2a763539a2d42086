use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-3;

/// Denominator floor for the relative error, so a component whose true
/// gradient is essentially zero is judged on absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub tolerance: f64,
    /// `(input, element, analytic, numeric)` of the worst component.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn scalar_output<F>(op: &F, point: &[Tensor<f64>], trainable: bool) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| graph.leaf(t.clone(), trainable)).collect();
    let out = op(&mut graph, &vars)?;
    Ok((graph, vars, out))
}

/// Compares analytic gradients of `sum(op(point))` with central finite
/// differences on every element of every input.
///
/// Runs in `f64`: with a `1e-3` step, `f32` round-off alone contributes
/// relative errors around `1e-4` to the difference quotient.
pub fn grad_check<F>(op: F, point: &[Tensor<f64>], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let all: Vec<(usize, usize)> = point
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |e| (i, e)))
        .collect();
    check_components(&op, point, tolerance, &all)
}

/// Like [`grad_check`], but on `count` components drawn uniformly (without
/// replacement) across all inputs.
pub fn grad_check_sampled<F>(op: F, point: &[Tensor<f64>], tolerance: f64, count: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let offsets: Vec<usize> = point
        .iter()
        .scan(0, |acc, t| {
            let start = *acc;
            *acc += t.len();
            Some(start)
        })
        .collect();
    let total: usize = point.iter().map(Tensor::<f64>::len).sum();
    let count = count.min(total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<usize> = sample(&mut rng, total, count).into_vec();
    picks.sort_unstable();
    let components: Vec<(usize, usize)> = picks
        .into_iter()
        .map(|flat| {
            let input = offsets.partition_point(|&o| o <= flat) - 1;
            (input, flat - offsets[input])
        })
        .collect();
    check_components(&op, point, tolerance, &components)
}

fn check_components<F>(op: &F, point: &[Tensor<f64>], tolerance: f64, components: &[(usize, usize)]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if tolerance <= 0.0 {
        return Err(invalid("grad_check: tolerance must be positive"));
    }
    if point.iter().any(|t| !t.is_finite()) {
        return Err(invalid("grad_check: point must be finite"));
    }
    let (mut graph, vars, out) = scalar_output(op, point, true)?;
    let total = graph.sum(out);
    let grads = graph.backward(total)?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let (graph, _, out) = scalar_output(op, perturbed, false)?;
        Ok(graph.get(out).sum_f64())
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        tolerance,
        worst: None,
    };
    let mut work: Vec<Tensor<f64>> = point.to_vec();
    for &(input, elem) in components {
        let analytic = grads.get(vars[input]).map_or(0.0, |g| g.data()[elem]);
        let original = work[input].data()[elem];
        work[input].data_mut()[elem] = original + FD_STEP;
        let up = eval(&work)?;
        work[input].data_mut()[elem] = original - FD_STEP;
        let down = eval(&work)?;
        work[input].data_mut()[elem] = original;
        let numeric = (up - down) / (2.0 * FD_STEP);

        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        report.checked += 1;
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = rel;
            report.worst = Some((input, elem, analytic, numeric));
        }
    }
    Ok(report)
}
