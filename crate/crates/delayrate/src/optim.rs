//! Nelder–Mead with seeded Latin-hypercube restarts.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NelderMeadOptions {
    pub max_evals: usize,
    /// stop when the simplex diameter is below this, relative to max(1, |x|)
    pub x_tol: f64,
    /// and the spread of function values is below this, relative to max(1e-300, |f_best|)
    pub f_tol: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_evals: 4000,
            x_tol: 1e-9,
            f_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

/// Minimize `f` starting from `x0` with initial simplex offsets `step`.
/// Non-finite values are treated as +inf.
pub fn nelder_mead(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    step: &[f64],
    opts: &NelderMeadOptions,
) -> Minimum {
    let n = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let mut pts: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..n {
        let mut p = x0.to_vec();
        p[i] += if step[i] != 0.0 { step[i] } else { 1e-3 };
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| eval(p, &mut evals)).collect();
    let (alpha, gamma, rho, shrink) = (1.0, 2.0, 0.5, 0.5);
    let mut converged = false;
    while evals < opts.max_evals {
        let mut idx: Vec<usize> = (0..=n).collect();
        idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = idx.iter().map(|&i| pts[i].clone()).collect();
        vals = idx.iter().map(|&i| vals[i]).collect();

        let scale = pts[0].iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let diam = pts[1..]
            .iter()
            .map(|p| p.iter().zip(&pts[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        let spread = vals[n] - vals[0];
        if diam <= opts.x_tol * scale && spread <= opts.f_tol * vals[0].abs().max(1e-300) {
            converged = true;
            break;
        }
        if diam == 0.0 {
            converged = true;
            break;
        }

        let mut centroid = vec![0.0; n];
        for p in &pts[..n] {
            for (c, v) in centroid.iter_mut().zip(p) {
                *c += v / n as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&pts[n])
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };
        let xr = along(alpha);
        let fr = eval(&xr, &mut evals);
        if fr < vals[0] {
            let xe = along(gamma);
            let fe = eval(&xe, &mut evals);
            if fe < fr {
                pts[n] = xe;
                vals[n] = fe;
            } else {
                pts[n] = xr;
                vals[n] = fr;
            }
            continue;
        }
        if fr < vals[n - 1] {
            pts[n] = xr;
            vals[n] = fr;
            continue;
        }
        let (xc, fc) = if fr < vals[n] {
            let x = along(rho);
            let v = eval(&x, &mut evals);
            (x, v)
        } else {
            let x = along(-rho);
            let v = eval(&x, &mut evals);
            (x, v)
        };
        if fc < vals[n].min(fr) {
            pts[n] = xc;
            vals[n] = fc;
            continue;
        }
        for i in 1..=n {
            let p: Vec<f64> = pts[0]
                .iter()
                .zip(&pts[i])
                .map(|(b, x)| b + shrink * (x - b))
                .collect();
            vals[i] = eval(&p, &mut evals);
            pts[i] = p;
        }
    }
    let best = (0..=n).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    Minimum {
        x: pts[best].clone(),
        f: vals[best],
        evals,
        converged,
    }
}

/// `n` Latin-hypercube points in the box `center ± half_width`.
pub fn latin_hypercube(center: &[f64], half_width: &[f64], n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = center.len();
    let mut out = vec![vec![0.0; d]; n];
    for k in 0..d {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(&mut rng);
        for (i, s) in strata.into_iter().enumerate() {
            let u = (s as f64 + rng.gen::<f64>()) / n as f64;
            out[i][k] = center[k] + half_width[k] * (2.0 * u - 1.0);
        }
    }
    out
}

/// Nelder–Mead from `x0` and from `restarts` Latin-hypercube points, then a
/// polish from the best. Returns the best point and the total evaluation count.
pub fn minimize_with_restarts(
    f: impl Fn(&[f64]) -> f64 + Sync,
    x0: &[f64],
    half_width: &[f64],
    restarts: usize,
    seed: u64,
    opts: &NelderMeadOptions,
) -> Minimum {
    use rayon::prelude::*;
    let mut starts = vec![x0.to_vec()];
    starts.extend(latin_hypercube(x0, half_width, restarts, seed));
    let step: Vec<f64> = half_width.iter().map(|h| 0.25 * h).collect();
    let runs: Vec<Minimum> = starts
        .par_iter()
        .map(|s| nelder_mead(&f, s, &step, opts))
        .collect();
    let total: usize = runs.iter().map(|r| r.evals).sum();
    let best = runs
        .into_iter()
        .min_by(|a, b| a.f.total_cmp(&b.f))
        .expect("at least one start");
    let small: Vec<f64> = best
        .x
        .iter()
        .zip(&step)
        .map(|(x, s)| (1e-3 * x.abs()).max(1e-3 * s))
        .collect();
    let polish = nelder_mead(&f, &best.x, &small, opts);
    let mut out = if polish.f <= best.f { polish } else { best };
    out.evals = total + out.evals;
    out
}
