//! Box-constrained Nelder–Mead simplex minimization.
//!
//! Vertices are projected onto the box after every move. Non-finite
//! objective values are treated as `+inf`, so an infeasible region simply
//! repels the simplex.

#[derive(Debug, Clone, Copy)]
pub struct NelderMead {
    pub max_evals: usize,
    /// Stop when the spread of objective values across the simplex drops
    /// below this (absolute).
    pub ftol: f64,
    /// and the largest vertex distance from the best vertex is below this.
    pub xtol: f64,
    /// Initial simplex edge along each coordinate.
    pub initial_step: f64,
}

impl Default for NelderMead {
    fn default() -> Self {
        NelderMead {
            max_evals: 4000,
            ftol: 1e-10,
            xtol: 1e-8,
            initial_step: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    pub converged: bool,
}

struct Bounded<'a, F> {
    f: F,
    bounds: Option<&'a [(f64, f64)]>,
    evals: usize,
}

impl<F: FnMut(&[f64]) -> f64> Bounded<'_, F> {
    fn project(&self, x: &mut [f64]) {
        if let Some(b) = self.bounds {
            for (xi, (lo, hi)) in x.iter_mut().zip(b) {
                *xi = xi.clamp(*lo, *hi);
            }
        }
    }

    fn eval(&mut self, x: &mut [f64]) -> f64 {
        self.project(x);
        self.evals += 1;
        let v = (self.f)(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    }
}

impl NelderMead {
    pub fn minimize<F>(&self, f: F, x0: &[f64], bounds: Option<&[(f64, f64)]>) -> Minimum
    where
        F: FnMut(&[f64]) -> f64,
    {
        let n = x0.len();
        let mut obj = Bounded {
            f,
            bounds,
            evals: 0,
        };
        let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
        let mut values = Vec::with_capacity(n + 1);
        let mut start = x0.to_vec();
        values.push(obj.eval(&mut start));
        simplex.push(start.clone());
        for i in 0..n {
            let mut v = start.clone();
            v[i] += self.initial_step;
            // step inward if the box clips the edge to nothing
            if let Some(b) = bounds {
                if v[i] > b[i].1 {
                    v[i] = start[i] - self.initial_step;
                }
            }
            values.push(obj.eval(&mut v));
            simplex.push(v);
        }

        let mut converged = false;
        while obj.evals < self.max_evals {
            let mut order: Vec<usize> = (0..=n).collect();
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
            simplex = order.iter().map(|&i| simplex[i].clone()).collect();
            values = order.iter().map(|&i| values[i]).collect();

            let spread = values[n] - values[0];
            let size = simplex[1..]
                .iter()
                .map(|v| {
                    v.iter()
                        .zip(&simplex[0])
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max)
                })
                .fold(0.0, f64::max);
            if spread.is_finite() && spread <= self.ftol && size <= self.xtol {
                converged = true;
                break;
            }

            let centroid: Vec<f64> = (0..n)
                .map(|j| simplex[..n].iter().map(|v| v[j]).sum::<f64>() / n as f64)
                .collect();
            let along = |coef: f64| -> Vec<f64> {
                centroid
                    .iter()
                    .zip(&simplex[n])
                    .map(|(c, w)| c + coef * (c - w))
                    .collect()
            };

            let mut reflected = along(1.0);
            let fr = obj.eval(&mut reflected);
            if fr < values[0] {
                let mut expanded = along(2.0);
                let fe = obj.eval(&mut expanded);
                if fe < fr {
                    simplex[n] = expanded;
                    values[n] = fe;
                } else {
                    simplex[n] = reflected;
                    values[n] = fr;
                }
                continue;
            }
            if fr < values[n - 1] {
                simplex[n] = reflected;
                values[n] = fr;
                continue;
            }
            let (mut contracted, outside) = if fr < values[n] {
                (along(0.5), true)
            } else {
                (along(-0.5), false)
            };
            let fc = obj.eval(&mut contracted);
            if (outside && fc <= fr) || (!outside && fc < values[n]) {
                simplex[n] = contracted;
                values[n] = fc;
                continue;
            }
            let best = simplex[0].clone();
            for i in 1..=n {
                let mut shrunk: Vec<f64> = best
                    .iter()
                    .zip(&simplex[i])
                    .map(|(b, v)| b + 0.5 * (v - b))
                    .collect();
                values[i] = obj.eval(&mut shrunk);
                simplex[i] = shrunk;
            }
        }

        let best = (0..=n)
            .min_by(|&a, &b| values[a].total_cmp(&values[b]))
            .expect("nonempty simplex");
        Minimum {
            x: simplex[best].clone(),
            value: values[best],
            evals: obj.evals,
            converged,
        }
    }
}
