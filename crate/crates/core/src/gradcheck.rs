//! Central finite-difference checks of analytic parameter gradients.

use crate::params::{Gradients, ParamId, ParamStore};

/// `|a − b| / max(|a| + |b|, floor)`.
pub fn relative_error(numeric: f64, analytic: f64, floor: f64) -> f64 {
    (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(floor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub eps: f64,
    pub floor: f64,
    /// Check at most this many entries per tensor, evenly strided.
    pub max_per_tensor: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            floor: 1e-4,
            max_per_tensor: usize::MAX,
        }
    }
}

impl GradCheck {
    /// Compares `analytic` against central differences of `loss` for every
    /// parameter selected by `include`.
    pub fn run(
        &self,
        store: &mut ParamStore<f64>,
        analytic: &Gradients<f64>,
        include: impl Fn(ParamId) -> bool,
        mut loss: impl FnMut(&ParamStore<f64>) -> f64,
    ) -> GradCheckReport {
        let mut rep = GradCheckReport {
            checked: 0,
            max_rel_error: 0.0,
            worst: None,
        };
        let ids: Vec<ParamId> = store.ids().filter(|&id| include(id)).collect();
        for id in ids {
            let n = store.get(id).len();
            let stride = n.div_ceil(self.max_per_tensor.min(n).max(1));
            for k in (0..n).step_by(stride.max(1)) {
                let orig = store.get(id).as_slice()[k];
                store.get_mut(id).as_mut_slice()[k] = orig + self.eps;
                let up = loss(store);
                store.get_mut(id).as_mut_slice()[k] = orig - self.eps;
                let down = loss(store);
                store.get_mut(id).as_mut_slice()[k] = orig;
                let num = (up - down) / (2.0 * self.eps);
                let ana = analytic.get(id).as_slice()[k];
                let rel = relative_error(num, ana, self.floor);
                rep.checked += 1;
                if rep.worst.is_none() || rel > rep.max_rel_error {
                    rep.max_rel_error = rel;
                    rep.worst = Some((store.name(id).to_string(), k));
                }
            }
        }
        rep
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    #[test]
    fn quadratic_gradient_passes_and_wrong_one_fails() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("x", Matrix::from_vec(1, 3, vec![0.5, -1.0, 2.0]));
        let f = |s: &ParamStore<f64>| s.get(id).as_slice().iter().map(|v| v * v * v).sum::<f64>();
        let mut g = Gradients::zeros_like(&s);
        let grad: Vec<f64> = s.get(id).as_slice().iter().map(|v| 3.0 * v * v).collect();
        g.accumulate(id, &Matrix::from_vec(1, 3, grad));
        let rep = GradCheck::default().run(&mut s, &g, |_| true, f);
        assert_eq!(rep.checked, 3);
        assert!(rep.max_rel_error < 1e-8);
        let mut bad = Gradients::zeros_like(&s);
        bad.accumulate(id, &Matrix::from_vec(1, 3, vec![0.75, 3.0, 13.0]));
        let rep = GradCheck::default().run(&mut s, &bad, |_| true, f);
        assert!(rep.max_rel_error > 1e-2);
        assert_eq!(rep.worst, Some(("x".into(), 2)));
    }
}
