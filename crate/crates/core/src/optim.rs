//! Bounded Nelder–Mead minimizer used for GP hyperparameter search.

pub(crate) struct NelderMead {
    pub max_evals: usize,
    pub initial_step: f64,
    pub f_tol: f64,
}

impl Default for NelderMead {
    fn default() -> Self {
        Self { max_evals: 600, initial_step: 0.5, f_tol: 1e-10 }
    }
}

pub(crate) struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
}

impl NelderMead {
    /// Minimizes `f` starting from `x0`. Points are clamped into `bounds`
    /// before evaluation. Non-finite objective values count as `+inf`.
    pub fn minimize(
        &self,
        x0: &[f64],
        bounds: &[(f64, f64)],
        mut f: impl FnMut(&[f64]) -> f64,
    ) -> Minimum {
        let n = x0.len();
        let clamp = |x: &mut Vec<f64>| {
            for (xi, &(lo, hi)) in x.iter_mut().zip(bounds) {
                *xi = xi.clamp(lo, hi);
            }
        };
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

        let mut start = x0.to_vec();
        clamp(&mut start);
        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
        let f0 = eval(&start, &mut evals);
        simplex.push((start.clone(), f0));
        for i in 0..n {
            let mut x = start.clone();
            x[i] += self.initial_step;
            if x[i] > bounds[i].1 {
                x[i] = start[i] - self.initial_step;
            }
            clamp(&mut x);
            let fx = eval(&x, &mut evals);
            simplex.push((x, fx));
        }

        while evals < self.max_evals {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let best = simplex[0].1;
            let worst = simplex[n].1;
            if best.is_finite() && (worst - best).abs() <= self.f_tol * (1.0 + best.abs()) {
                break;
            }
            let mut centroid = vec![0.0; n];
            for (x, _) in &simplex[..n] {
                for (c, xi) in centroid.iter_mut().zip(x) {
                    *c += xi / n as f64;
                }
            }
            let along = |t: f64| -> Vec<f64> {
                let mut p: Vec<f64> = centroid
                    .iter()
                    .zip(&simplex[n].0)
                    .map(|(c, w)| c + t * (w - c))
                    .collect();
                clamp(&mut p);
                p
            };
            let xr = along(-1.0);
            let fr = eval(&xr, &mut evals);
            if fr < simplex[0].1 {
                let xe = along(-2.0);
                let fe = eval(&xe, &mut evals);
                simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            } else if fr < simplex[n - 1].1 {
                simplex[n] = (xr, fr);
            } else {
                let (xc, fc) = if fr < simplex[n].1 {
                    let xc = along(-0.5);
                    let fc = eval(&xc, &mut evals);
                    (xc, fc)
                } else {
                    let xc = along(0.5);
                    let fc = eval(&xc, &mut evals);
                    (xc, fc)
                };
                if fc < simplex[n].1.min(fr) {
                    simplex[n] = (xc, fc);
                } else {
                    let x_best = simplex[0].0.clone();
                    for (x, fx) in simplex.iter_mut().skip(1) {
                        for (xi, bi) in x.iter_mut().zip(&x_best) {
                            *xi = bi + 0.5 * (*xi - bi);
                        }
                        *fx = eval(x, &mut evals);
                    }
                }
            }
        }
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (x, f) = simplex.swap_remove(0);
        Minimum { x, f }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_rosenbrock() {
        let nm = NelderMead { max_evals: 5000, ..Default::default() };
        let m = nm.minimize(&[-1.2, 1.0], &[(-5.0, 5.0), (-5.0, 5.0)], |x| {
            (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
        });
        assert!((m.x[0] - 1.0).abs() < 1e-3 && (m.x[1] - 1.0).abs() < 1e-3, "{:?}", m.x);
    }

    #[test]
    fn respects_bounds() {
        let m = NelderMead::default().minimize(&[0.5], &[(0.0, 1.0)], |x| -x[0]);
        assert!((m.x[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn never_worse_than_start() {
        let f = |x: &[f64]| (x[0] - 3.0).abs().sqrt() + x[1].sin();
        let m = NelderMead::default().minimize(&[0.0, 0.0], &[(-10.0, 10.0); 2], f);
        assert!(m.f <= f(&[0.0, 0.0]));
    }
}
