//! Central finite-difference verification of analytic gradients.
//!
//! A check builds the same scalar loss twice per perturbed element and
//! compares the analytic gradient against `(f(x+h) - f(x-h)) / 2h`.
//! The relative error divides by `max(|analytic|, |numeric|, floor)`; the
//! floor keeps near-zero gradients from turning floating-point noise into
//! spurious relative blow-ups.

use super::{Graph, Result, Tensor, Var};

pub struct GradCheck {
    pub h: f64,
    pub tol: f64,
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            h: 1e-6,
            tol: 1e-5,
            floor: 1e-3,
        }
    }
}

/// Worst element found by a check.
#[derive(Debug, Clone)]
pub struct WorstElement {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

impl GradCheck {
    /// Compares analytic gradients of `build`'s scalar output w.r.t. every
    /// element of every input against central differences. Returns the worst
    /// element; callers assert `rel_err < tol`.
    ///
    /// `build` must construct the loss deterministically from its inputs.
    pub fn run(
        &self,
        inputs: &[Tensor],
        build: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>,
    ) -> Result<WorstElement> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
        let root = build(&mut g, &vars)?;
        g.backward(root)?;
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
            .collect();

        let mut worst = WorstElement {
            input: 0,
            element: 0,
            analytic: 0.0,
            numeric: 0.0,
            rel_err: 0.0,
        };
        let mut work: Vec<Tensor> = inputs.to_vec();
        for (ti, t) in inputs.iter().enumerate() {
            for e in 0..t.len() {
                let orig = t.data()[e];
                work[ti].data_mut()[e] = orig + self.h;
                let up = self.eval(&work, build)?;
                work[ti].data_mut()[e] = orig - self.h;
                let down = self.eval(&work, build)?;
                work[ti].data_mut()[e] = orig;
                let numeric = (up - down) / (2.0 * self.h);
                let a = analytic[ti].get(e).copied().unwrap_or(0.0);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(self.floor);
                if rel > worst.rel_err {
                    worst = WorstElement {
                        input: ti,
                        element: e,
                        analytic: a,
                        numeric,
                        rel_err: rel,
                    };
                }
            }
        }
        Ok(worst)
    }

    /// `run` plus a panic with context when the tolerance is exceeded.
    /// Returns the worst relative error for reporting.
    pub fn assert_ok(
        &self,
        name: &str,
        inputs: &[Tensor],
        build: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>,
    ) -> f64 {
        let worst = self
            .run(inputs, build)
            .unwrap_or_else(|e| panic!("gradcheck {name}: graph error: {e}"));
        assert!(
            worst.rel_err < self.tol,
            "gradcheck {name}: input {} element {}: analytic {:.3e} vs numeric {:.3e} (rel {:.3e} >= {:.3e})",
            worst.input,
            worst.element,
            worst.analytic,
            worst.numeric,
            worst.rel_err,
            self.tol,
        );
        worst.rel_err
    }

    fn eval(&self, inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
        let root = build(&mut g, &vars)?;
        Ok(g.value(root)[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_passes() {
        let x = Tensor::from_vec(&[3], vec![0.5, -1.5, 2.0]).unwrap();
        let worst = GradCheck::default()
            .run(&[x], &|g, vs| {
                let y = g.mul(vs[0], vs[0])?;
                Ok(g.sum(y))
            })
            .unwrap();
        assert!(worst.rel_err < 1e-7, "{worst:?}");
    }

    #[test]
    fn deliberately_wrong_gradient_is_caught() {
        // relu evaluated at a kink: x = 1e-7 flips sign under +-h
        let x = Tensor::from_vec(&[1], vec![1e-7]).unwrap();
        let worst = GradCheck::default()
            .run(&[x], &|g, vs| {
                let y = g.relu(vs[0]);
                Ok(g.sum(y))
            })
            .unwrap();
        assert!(worst.rel_err > 0.1, "kink should break the check: {worst:?}");
    }
}
