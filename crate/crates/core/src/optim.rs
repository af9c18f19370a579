//! Projected first-order descent shared by the Bayes-action solver and the
//! acquisition optimizer.
//!
//! Steps are Adam-normalized and scaled per coordinate, with a cosine-decayed
//! step size. A candidate step is accepted only if it does not increase the
//! objective; otherwise it is halved a few times and finally dropped. The
//! recorded trace is therefore non-increasing.

/// Descent settings.
#[derive(Debug, Clone, PartialEq)]
pub struct DescentConfig {
    pub steps: usize,
    /// Initial step as a fraction of each coordinate's scale.
    pub step_size: f64,
    /// How many times a rejected step is halved before it is dropped.
    pub max_halvings: usize,
}

impl Default for DescentConfig {
    fn default() -> Self {
        DescentConfig {
            steps: 200,
            step_size: 0.05,
            max_halvings: 3,
        }
    }
}

/// Result of one descent run.
#[derive(Debug, Clone, PartialEq)]
pub struct DescentTrace {
    pub point: Vec<f64>,
    pub value: f64,
    pub initial_value: f64,
    /// Objective after each step (including rejected ones, which repeat the
    /// previous value).
    pub history: Vec<f64>,
    pub accepted_steps: usize,
}

impl DescentTrace {
    pub fn improved(&self) -> bool {
        self.value < self.initial_value
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;

/// Minimizes `objective` from `start`, projecting with `project` after each step.
///
/// `objective` returns the value and gradient. Errors at the start point are
/// returned; errors or non-finite values at a candidate count as rejections.
pub fn projected_descent<E>(
    objective: &mut impl FnMut(&[f64]) -> Result<(f64, Vec<f64>), E>,
    mut start: Vec<f64>,
    scales: &[f64],
    project: &impl Fn(&mut [f64]),
    cfg: &DescentConfig,
) -> Result<DescentTrace, E> {
    assert_eq!(start.len(), scales.len(), "one scale per coordinate");
    project(&mut start);
    let (mut value, mut grad) = objective(&start)?;
    let initial_value = value;
    let mut point = start;
    let n = point.len();
    let mut m1 = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    let mut history = Vec::with_capacity(cfg.steps);
    let mut accepted_steps = 0;

    for t in 0..cfg.steps {
        if !value.is_finite() || grad.iter().all(|g| *g == 0.0) {
            history.push(value);
            continue;
        }
        let bias1 = 1.0 - BETA1.powi(t as i32 + 1);
        let bias2 = 1.0 - BETA2.powi(t as i32 + 1);
        for i in 0..n {
            m1[i] = BETA1 * m1[i] + (1.0 - BETA1) * grad[i];
            m2[i] = BETA2 * m2[i] + (1.0 - BETA2) * grad[i] * grad[i];
        }
        let lr = cfg.step_size
            * 0.5
            * (1.0 + (std::f64::consts::PI * t as f64 / cfg.steps as f64).cos());
        let direction: Vec<f64> = (0..n)
            .map(|i| {
                let mhat = m1[i] / bias1;
                let vhat = m2[i] / bias2;
                scales[i] * mhat / (vhat.sqrt() + 1e-12)
            })
            .collect();

        let mut factor = lr;
        for _ in 0..=cfg.max_halvings {
            let mut cand: Vec<f64> = point
                .iter()
                .zip(&direction)
                .map(|(p, d)| p - factor * d)
                .collect();
            project(&mut cand);
            if let Ok((v, g)) = objective(&cand) {
                if v.is_finite() && v <= value {
                    point = cand;
                    value = v;
                    grad = g;
                    accepted_steps += 1;
                    break;
                }
            }
            factor *= 0.5;
        }
        history.push(value);
    }

    Ok(DescentTrace {
        point,
        value,
        initial_value,
        history,
        accepted_steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(x: &[f64]) -> Result<(f64, Vec<f64>), ()> {
        let v = (x[0] - 1.0).powi(2) + 3.0 * (x[1] + 2.0).powi(2);
        Ok((v, vec![2.0 * (x[0] - 1.0), 6.0 * (x[1] + 2.0)]))
    }

    #[test]
    fn converges_on_a_quadratic() {
        let cfg = DescentConfig {
            steps: 400,
            step_size: 0.1,
            max_halvings: 3,
        };
        let tr = projected_descent(&mut quadratic, vec![5.0, 5.0], &[5.0, 5.0], &|_| {}, &cfg).unwrap();
        assert!(tr.value < 1e-3, "final value {}", tr.value);
        assert!(tr.improved());
    }

    #[test]
    fn history_is_non_increasing() {
        let cfg = DescentConfig::default();
        let mut rough = |x: &[f64]| -> Result<(f64, Vec<f64>), ()> {
            let v = x[0].sin() * 3.0 + 0.1 * x[0] * x[0];
            Ok((v, vec![3.0 * x[0].cos() + 0.2 * x[0]]))
        };
        let tr = projected_descent(&mut rough, vec![4.0], &[10.0], &|_| {}, &cfg).unwrap();
        for w in tr.history.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(tr.value <= tr.initial_value);
    }

    #[test]
    fn projection_keeps_iterates_in_bounds() {
        let cfg = DescentConfig::default();
        let clamp = |x: &mut [f64]| {
            for v in x.iter_mut() {
                *v = v.clamp(0.0, 0.5);
            }
        };
        let tr = projected_descent(&mut quadratic, vec![0.2, 0.2], &[0.5, 0.5], &clamp, &cfg).unwrap();
        assert!(tr.point.iter().all(|v| (0.0..=0.5).contains(v)));
        assert!((tr.point[0] - 0.5).abs() < 1e-9 && tr.point[1].abs() < 1e-9);
    }

    #[test]
    fn start_errors_propagate() {
        let mut failing = |_: &[f64]| -> Result<(f64, Vec<f64>), &'static str> { Err("bad") };
        let r = projected_descent(&mut failing, vec![0.0], &[1.0], &|_| {}, &DescentConfig::default());
        assert_eq!(r.unwrap_err(), "bad");
    }
}
