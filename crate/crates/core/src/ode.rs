//! Dormand-Prince 5(4) with dense output, used by the exact integrator for
//! within-mode dynamics that are not affine. Event location needs a
//! continuous solution, so every accepted step stores its interpolation
//! coefficients.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OdeError {
    #[error("step size underflow at t = {t}")]
    StepUnderflow { t: f64 },
    #[error("step budget exhausted at t = {t}")]
    TooManySteps { t: f64 },
}

/// One accepted step with its quartic interpolant.
#[derive(Debug, Clone)]
pub struct DenseStep {
    pub t0: f64,
    pub h: f64,
    /// Five interpolation coefficients per component.
    cont: Vec<[f64; 5]>,
}

impl DenseStep {
    pub fn t1(&self) -> f64 {
        self.t0 + self.h
    }

    /// Evaluate the interpolant at `t` in `[t0, t1]`.
    pub fn eval(&self, t: f64, out: &mut [f64]) {
        let theta = ((t - self.t0) / self.h).clamp(0.0, 1.0);
        let om = 1.0 - theta;
        for (c, o) in self.cont.iter().zip(out.iter_mut()) {
            *o = c[0] + theta * (c[1] + om * (c[2] + theta * (c[3] + om * c[4])));
        }
    }
}

/// Piecewise dense solution over `[t0, t_end]`.
#[derive(Debug, Clone)]
pub struct DenseOutput {
    pub steps: Vec<DenseStep>,
    pub y_end: Vec<f64>,
}

impl DenseOutput {
    pub fn eval(&self, t: f64, out: &mut [f64]) {
        let idx = self
            .steps
            .partition_point(|s| s.t1() < t)
            .min(self.steps.len().saturating_sub(1));
        self.steps[idx].eval(t, out);
    }
}

const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// Integrate `y' = f(t, y)` from `t0` to `t_end`, returning the dense
/// solution. Tolerances are applied per component as `atol + rtol |y|`.
pub fn integrate_dense(
    f: &mut dyn FnMut(f64, &[f64], &mut [f64]),
    t0: f64,
    y0: &[f64],
    t_end: f64,
    rtol: f64,
    atol: f64,
) -> Result<DenseOutput, OdeError> {
    let n = y0.len();
    let span = t_end - t0;
    let mut steps = Vec::new();
    if span <= 0.0 || n == 0 {
        return Ok(DenseOutput { steps, y_end: y0.to_vec() });
    }
    let mut y = y0.to_vec();
    let mut t = t0;
    let mut k = vec![vec![0.0; n]; 7];
    let mut ytmp = vec![0.0; n];
    f(t, &y, &mut k[0]);
    let f_norm = k[0].iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let y_norm = y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut h = (0.01 * (1.0 + y_norm) / (1.0 + f_norm)).min(span).max(span * 1e-10);
    let mut nsteps = 0usize;
    while t < t_end - 1e-14 * span.max(1.0) {
        nsteps += 1;
        if nsteps > 1_000_000 {
            return Err(OdeError::TooManySteps { t });
        }
        if h < 1e-14 * span.max(t.abs()) {
            return Err(OdeError::StepUnderflow { t });
        }
        h = h.min(t_end - t);

        macro_rules! stage {
            ($ki:expr, $c:expr, $($coef:expr => $kj:expr),+) => {{
                for x in 0..n {
                    let mut acc = 0.0;
                    $(acc += $coef * k[$kj][x];)+
                    ytmp[x] = y[x] + h * acc;
                }
                let (head, tail) = k.split_at_mut($ki);
                let _ = head;
                f(t + $c * h, &ytmp, &mut tail[0]);
            }};
        }
        stage!(1, 1.0 / 5.0, 1.0/5.0 => 0);
        stage!(2, 3.0 / 10.0, 3.0/40.0 => 0, 9.0/40.0 => 1);
        stage!(3, 4.0 / 5.0, 44.0/45.0 => 0, -56.0/15.0 => 1, 32.0/9.0 => 2);
        stage!(4, 8.0 / 9.0,
            19372.0/6561.0 => 0, -25360.0/2187.0 => 1, 64448.0/6561.0 => 2, -212.0/729.0 => 3);
        stage!(5, 1.0,
            9017.0/3168.0 => 0, -355.0/33.0 => 1, 46732.0/5247.0 => 2,
            49.0/176.0 => 3, -5103.0/18656.0 => 4);
        let mut y1 = vec![0.0; n];
        for x in 0..n {
            y1[x] = y[x]
                + h * (35.0 / 384.0 * k[0][x]
                    + 500.0 / 1113.0 * k[2][x]
                    + 125.0 / 192.0 * k[3][x]
                    - 2187.0 / 6784.0 * k[4][x]
                    + 11.0 / 84.0 * k[5][x]);
        }
        {
            let (head, tail) = k.split_at_mut(6);
            let _ = head;
            f(t + h, &y1, &mut tail[0]);
        }
        let mut err: f64 = 0.0;
        for x in 0..n {
            let e = h
                * (71.0 / 57600.0 * k[0][x] - 71.0 / 16695.0 * k[2][x]
                    + 71.0 / 1920.0 * k[3][x]
                    - 17253.0 / 339200.0 * k[4][x]
                    + 22.0 / 525.0 * k[5][x]
                    - 1.0 / 40.0 * k[6][x]);
            let scale = atol + rtol * y[x].abs().max(y1[x].abs());
            err += (e / scale) * (e / scale);
        }
        err = (err / n as f64).sqrt();
        if err <= 1.0 {
            let mut cont = Vec::with_capacity(n);
            for x in 0..n {
                let ydiff = y1[x] - y[x];
                let bspl = h * k[0][x] - ydiff;
                cont.push([
                    y[x],
                    ydiff,
                    bspl,
                    ydiff - h * k[6][x] - bspl,
                    h * (D1 * k[0][x]
                        + D3 * k[2][x]
                        + D4 * k[3][x]
                        + D5 * k[4][x]
                        + D6 * k[5][x]
                        + D7 * k[6][x]),
                ]);
            }
            steps.push(DenseStep { t0: t, h, cont });
            t += h;
            y.copy_from_slice(&y1);
            k.swap(0, 6); // FSAL
            h *= (0.9 * err.powf(-0.2)).clamp(0.2, 5.0);
        } else {
            h *= (0.9 * err.powf(-0.2)).clamp(0.2, 1.0).min(0.9);
        }
    }
    Ok(DenseOutput { steps, y_end: y })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_oscillator_dense_accuracy() {
        let mut f = |_t: f64, y: &[f64], dy: &mut [f64]| {
            dy[0] = y[1];
            dy[1] = -y[0];
        };
        let sol = integrate_dense(&mut f, 0.0, &[1.0, 0.0], 6.0, 1e-11, 1e-11).unwrap();
        let mut out = [0.0; 2];
        for i in 0..=600 {
            let t = 0.01 * i as f64;
            sol.eval(t, &mut out);
            assert!((out[0] - t.cos()).abs() < 1e-8, "t={t}: {} vs {}", out[0], t.cos());
            assert!((out[1] + t.sin()).abs() < 1e-8);
        }
        assert!((sol.y_end[0] - 6.0f64.cos()).abs() < 1e-9);
    }

    #[test]
    fn stiffish_decay() {
        let mut f = |_t: f64, y: &[f64], dy: &mut [f64]| {
            dy[0] = -50.0 * y[0];
        };
        let sol = integrate_dense(&mut f, 0.0, &[1.0], 1.0, 1e-10, 1e-12).unwrap();
        assert!((sol.y_end[0] - (-50.0f64).exp()).abs() < 1e-12);
    }
}
