//! Moment-based first-order updates and a monotone step acceptance rule.

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Folds `grad` into the moments and writes the bias-corrected descent
    /// step into `out`.
    pub fn step_into(&mut self, grad: &[f64], out: &mut [f64]) {
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..grad.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            out[i] = -self.lr * mh / (vh.sqrt() + self.eps);
        }
    }

    pub fn direction(&mut self, grad: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; grad.len()];
        self.step_into(grad, &mut out);
        out
    }
}

/// Tries step fractions 1, 1/2, 1/4, ... and returns the first whose
/// objective does not exceed `f0`, or `None` after `halvings` rejections.
pub fn monotone_step<F: FnMut(f64) -> f64>(
    f0: f64,
    halvings: usize,
    mut eval: F,
) -> Option<(f64, f64)> {
    let mut alpha = 1.0;
    for _ in 0..=halvings {
        let f = eval(alpha);
        if f <= f0 {
            return Some((alpha, f));
        }
        alpha *= 0.5;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_has_magnitude_lr() {
        let mut a = Adam::new(3, 0.01);
        let d = a.direction(&[2.0, -0.5, 0.0]);
        assert!((d[0] + 0.01).abs() < 1e-12);
        assert!((d[1] - 0.01).abs() < 1e-12);
        assert_eq!(d[2], 0.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut a = Adam::new(2, 0.05);
        let mut x = [3.0, -2.0];
        for _ in 0..2000 {
            let d = a.direction(&[2.0 * x[0], 8.0 * x[1]]);
            x[0] += d[0];
            x[1] += d[1];
        }
        assert!(x[0].abs() < 1e-2 && x[1].abs() < 1e-2);
    }

    #[test]
    fn monotone_step_halves_until_accepted() {
        let r = monotone_step(1.0, 4, |a| if a > 0.3 { 2.0 } else { 0.5 });
        assert_eq!(r, Some((0.25, 0.5)));
        assert_eq!(monotone_step(1.0, 2, |_| 2.0), None);
    }
}
