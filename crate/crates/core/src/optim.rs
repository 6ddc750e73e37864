//! Nelder–Mead simplex search.
//!
//! The depth-alignment objective mixes a pixelwise median and absolute
//! values, so it is only piecewise smooth; a simplex search sidesteps
//! subgradient bookkeeping. When the simplex collapses the search restarts
//! around the incumbent with a shrinking radius, so the best-so-far trace
//! stays non-increasing across the whole budget.

use crate::error::Result;
use crate::rng::Rng;

const ALPHA: f64 = 1.0; // reflection
const GAMMA: f64 = 2.0; // expansion
const RHO: f64 = 0.5; // contraction
const SIGMA: f64 = 0.5; // shrink

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub best: Vec<f64>,
    pub best_value: f64,
    /// Best objective seen up to and including each iteration.
    pub trace: Vec<f64>,
    pub evals: usize,
}

pub fn nelder_mead(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    init: &[f64],
    iters: usize,
    init_step: f64,
    rng: &mut Rng,
) -> Result<SearchResult> {
    let dim = init.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| -> Result<f64> {
        *evals += 1;
        f(x)
    };

    let mut incumbent = init.to_vec();
    let mut incumbent_value = eval(&incumbent, &mut evals)?;
    let mut trace = Vec::with_capacity(iters);
    if iters == 0 {
        return Ok(SearchResult {
            best: incumbent,
            best_value: incumbent_value,
            trace,
            evals,
        });
    }

    let mut radius = init_step;
    let mut simplex = seed_simplex(&incumbent, radius, rng);
    let mut values = Vec::with_capacity(dim + 1);
    for p in &simplex {
        values.push(eval(p, &mut evals)?);
    }

    for _ in 0..iters {
        let mut order: Vec<usize> = (0..=dim).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let best = order[0];
        let worst = order[dim];
        let second_worst = order[dim - 1];

        if values[best] < incumbent_value {
            incumbent_value = values[best];
            incumbent = simplex[best].clone();
        }
        trace.push(incumbent_value);

        // collapsed simplex: restart around the incumbent, tighter
        let spread = values[worst] - values[best];
        if spread.abs() < 1e-15 || simplex_extent(&simplex, best) < 1e-14 {
            radius *= 0.25;
            if radius < 1e-16 {
                radius = init_step * 1e-6;
            }
            simplex = seed_simplex(&incumbent, radius, rng);
            values.clear();
            for p in &simplex {
                values.push(eval(p, &mut evals)?);
            }
            continue;
        }

        let mut centroid = vec![0.0; dim];
        for &i in order.iter().take(dim) {
            for (c, x) in centroid.iter_mut().zip(&simplex[i]) {
                *c += x;
            }
        }
        for c in &mut centroid {
            *c /= dim as f64;
        }

        let reflected = blend(&centroid, &simplex[worst], 1.0 + ALPHA, -ALPHA);
        let reflected_value = eval(&reflected, &mut evals)?;

        if reflected_value < values[best] {
            let expanded = blend(&centroid, &simplex[worst], 1.0 + GAMMA, -GAMMA);
            let expanded_value = eval(&expanded, &mut evals)?;
            if expanded_value < reflected_value {
                simplex[worst] = expanded;
                values[worst] = expanded_value;
            } else {
                simplex[worst] = reflected;
                values[worst] = reflected_value;
            }
            continue;
        }
        if reflected_value < values[second_worst] {
            simplex[worst] = reflected;
            values[worst] = reflected_value;
            continue;
        }

        let contracted = blend(&centroid, &simplex[worst], 1.0 - RHO, RHO);
        let contracted_value = eval(&contracted, &mut evals)?;
        if contracted_value < values[worst] {
            simplex[worst] = contracted;
            values[worst] = contracted_value;
            continue;
        }

        for &i in order.iter().skip(1) {
            let shrunk = blend(&simplex[best], &simplex[i], 1.0 - SIGMA, SIGMA);
            simplex[i] = shrunk;
            values[i] = eval(&simplex[i], &mut evals)?;
        }
    }

    // fold in the final simplex
    for (p, &v) in simplex.iter().zip(&values) {
        if v < incumbent_value {
            incumbent_value = v;
            incumbent = p.clone();
        }
    }
    if let Some(last) = trace.last_mut() {
        *last = (*last).min(incumbent_value);
    }

    Ok(SearchResult {
        best: incumbent,
        best_value: incumbent_value,
        trace,
        evals,
    })
}

fn seed_simplex(center: &[f64], radius: f64, rng: &mut Rng) -> Vec<Vec<f64>> {
    let dim = center.len();
    let mut simplex = Vec::with_capacity(dim + 1);
    simplex.push(center.to_vec());
    for i in 0..dim {
        let mut p = center.to_vec();
        // deterministic axis step with a touch of jitter so restarts do not
        // re-seed the exact same degenerate geometry
        p[i] += radius * (1.0 + 0.1 * rng.uniform());
        simplex.push(p);
    }
    simplex
}

fn simplex_extent(simplex: &[Vec<f64>], best: usize) -> f64 {
    let mut extent = 0.0f64;
    for p in simplex {
        for (x, b) in p.iter().zip(&simplex[best]) {
            extent = extent.max((x - b).abs());
        }
    }
    extent
}

fn blend(a: &[f64], b: &[f64], wa: f64, wb: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_shifted_quadratic() {
        let mut rng = Rng::new(1);
        let mut f = |x: &[f64]| Ok((x[0] - 3.0).powi(2) + (x[1] + 1.5).powi(2));
        let out = nelder_mead(&mut f, &[0.0, 0.0], 400, 0.5, &mut rng).unwrap();
        assert!((out.best[0] - 3.0).abs() < 1e-6, "{:?}", out.best);
        assert!((out.best[1] + 1.5).abs() < 1e-6);
    }

    #[test]
    fn handles_non_smooth_objectives() {
        let mut rng = Rng::new(2);
        let mut f = |x: &[f64]| Ok(x[0].abs() + 2.0 * (x[1] - 0.7).abs());
        let out = nelder_mead(&mut f, &[5.0, -3.0], 1500, 1.0, &mut rng).unwrap();
        assert!(out.best_value < 1e-8, "{}", out.best_value);
    }

    #[test]
    fn trace_is_non_increasing() {
        let mut rng = Rng::new(3);
        let mut f = |x: &[f64]| Ok(x.iter().map(|v| v * v).sum::<f64>());
        let out = nelder_mead(&mut f, &[2.0, -2.0, 1.0], 300, 0.5, &mut rng).unwrap();
        for w in out.trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn zero_iterations_returns_the_init() {
        let mut rng = Rng::new(4);
        let mut f = |x: &[f64]| Ok(x[0] * x[0]);
        let out = nelder_mead(&mut f, &[2.0], 0, 0.5, &mut rng).unwrap();
        assert_eq!(out.best, vec![2.0]);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn objective_errors_propagate() {
        let mut rng = Rng::new(5);
        let mut f = |_: &[f64]| {
            Err(crate::error::Error::NonFinite {
                op: "objective",
                index: 0,
            })
        };
        assert!(nelder_mead(&mut f, &[0.0], 10, 0.5, &mut rng).is_err());
    }
}
