//! Classic fixed-step fourth-order Runge–Kutta.

pub struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub fn new(dim: usize) -> Self {
        Rk4 {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }

    /// Advances `y` in place by one step of size `dt` for the autonomous
    /// system `y' = f(y)`; `f(y, dy)` writes the derivative into `dy`.
    pub fn step<F>(&mut self, f: &mut F, y: &mut [f64], dt: f64)
    where
        F: FnMut(&[f64], &mut [f64]),
    {
        let n = y.len();
        debug_assert_eq!(n, self.k1.len());
        f(y, &mut self.k1);
        for k in 0..n {
            self.tmp[k] = y[k] + 0.5 * dt * self.k1[k];
        }
        f(&self.tmp, &mut self.k2);
        for k in 0..n {
            self.tmp[k] = y[k] + 0.5 * dt * self.k2[k];
        }
        f(&self.tmp, &mut self.k3);
        for k in 0..n {
            self.tmp[k] = y[k] + dt * self.k3[k];
        }
        f(&self.tmp, &mut self.k4);
        for k in 0..n {
            y[k] += dt / 6.0 * (self.k1[k] + 2.0 * self.k2[k] + 2.0 * self.k3[k] + self.k4[k]);
        }
    }
}

/// Number of whole steps of size `dt` that cover `[0, t_end]`.
pub fn step_count(t_end: f64, dt: f64) -> usize {
    (t_end / dt - 1e-9).ceil().max(0.0) as usize
}
