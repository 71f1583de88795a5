//! Derivative-free minimisation (Nelder-Mead) for the low-dimensional
//! variance-component searches.

#[derive(Debug, Clone)]
pub struct NelderMead {
    pub max_iter: usize,
    /// Stop when the spread of objective values across the simplex, relative
    /// to the best value, falls below this.
    pub rel_tol: f64,
    pub initial_step: f64,
}

impl Default for NelderMead {
    fn default() -> Self {
        Self { max_iter: 500, rel_tol: 1e-10, initial_step: 0.5 }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Half-range of the simplex vertices, a cheap gradient-scale proxy.
    pub spread: f64,
}

impl NelderMead {
    pub fn minimize<F>(&self, start: &[f64], mut f: F) -> Minimum
    where
        F: FnMut(&[f64]) -> f64,
    {
        let n = start.len();
        let eval = |f: &mut F, x: &[f64]| {
            let v = f(x);
            if v.is_nan() { f64::INFINITY } else { v }
        };
        let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
        simplex.push(start.to_vec());
        for i in 0..n {
            let mut v = start.to_vec();
            v[i] += self.initial_step;
            simplex.push(v);
        }
        let mut values: Vec<f64> = simplex.iter().map(|x| eval(&mut f, x)).collect();

        let mut iterations = 0;
        let mut converged = false;
        while iterations < self.max_iter {
            iterations += 1;
            let mut order: Vec<usize> = (0..=n).collect();
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
            simplex = order.iter().map(|&i| simplex[i].clone()).collect();
            values = order.iter().map(|&i| values[i]).collect();

            let best = values[0];
            let worst = values[n];
            if (worst - best).abs() <= self.rel_tol * best.abs().max(1e-12) {
                converged = true;
                break;
            }

            let mut centroid = vec![0.0; n];
            for v in &simplex[..n] {
                for (c, x) in centroid.iter_mut().zip(v) {
                    *c += x / n as f64;
                }
            }
            let along = |t: f64| -> Vec<f64> {
                centroid.iter().zip(&simplex[n]).map(|(c, w)| c + t * (w - c)).collect()
            };

            let reflected = along(-1.0);
            let fr = eval(&mut f, &reflected);
            if fr < values[0] {
                let expanded = along(-2.0);
                let fe = eval(&mut f, &expanded);
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
            let (contracted, fc) = if fr < values[n] {
                let c = along(-0.5);
                let fc = eval(&mut f, &c);
                (c, fc)
            } else {
                let c = along(0.5);
                let fc = eval(&mut f, &c);
                (c, fc)
            };
            if fc < values[n].min(fr) {
                simplex[n] = contracted;
                values[n] = fc;
                continue;
            }
            // shrink toward the best vertex
            let best_vertex = simplex[0].clone();
            for k in 1..=n {
                for (x, b) in simplex[k].iter_mut().zip(&best_vertex) {
                    *x = b + 0.5 * (*x - b);
                }
                values[k] = eval(&mut f, &simplex[k]);
            }
        }

        let (imin, _) = values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty simplex");
        let spread = (0..n)
            .map(|d| {
                let lo = simplex.iter().map(|v| v[d]).fold(f64::INFINITY, f64::min);
                let hi = simplex.iter().map(|v| v[d]).fold(f64::NEG_INFINITY, f64::max);
                0.5 * (hi - lo)
            })
            .fold(0.0, f64::max);
        Minimum { x: simplex[imin].clone(), value: values[imin], iterations, converged, spread }
    }
}
