//! Small statistics helpers: Student-t tails, the one-sided paired t-test and
//! adaptive Simpson quadrature.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub fn student_t_quantile(p: f64, dof: f64) -> f64 {
    StudentsT::new(0.0, 1.0, dof)
        .expect("dof > 0")
        .inverse_cdf(p)
}

pub fn student_t_cdf(x: f64, dof: f64) -> f64 {
    StudentsT::new(0.0, 1.0, dof).expect("dof > 0").cdf(x)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample mean and unbiased variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs);
    let n = xs.len() as f64;
    let v = if xs.len() > 1 {
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, v)
}

/// Outcome of a paired t-test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedTTest {
    pub t_statistic: f64,
    pub p_value: f64,
    pub mean_difference: f64,
}

/// One-sided paired t-test of `H1: mean(candidate - baseline) < 0`.
///
/// Zero-variance differences give `p = 0` when the mean is negative and `p = 1`
/// when positive. All-zero differences give `p = 0.5`.
pub fn paired_ttest_one_sided(candidate: &[f64], baseline: &[f64]) -> Result<PairedTTest> {
    if candidate.len() != baseline.len() {
        return Err(Error::Domain(format!(
            "paired samples differ in length: {} vs {}",
            candidate.len(),
            baseline.len()
        )));
    }
    if candidate.len() < 2 {
        return Err(Error::Domain("paired t-test needs at least 2 pairs".into()));
    }
    let diffs: Vec<f64> = candidate.iter().zip(baseline).map(|(c, b)| c - b).collect();
    let (m, v) = mean_var(&diffs);
    let n = diffs.len() as f64;
    // Differences below this are treated as exact ties.
    let scale = diffs.iter().fold(0.0f64, |a, d| a.max(d.abs()));
    if scale == 0.0 {
        return Ok(PairedTTest {
            t_statistic: 0.0,
            p_value: 0.5,
            mean_difference: 0.0,
        });
    }
    if v <= (1e-12 * scale).powi(2) {
        let (t, p) = if m < 0.0 {
            (f64::NEG_INFINITY, 0.0)
        } else if m > 0.0 {
            (f64::INFINITY, 1.0)
        } else {
            (0.0, 0.5)
        };
        return Ok(PairedTTest {
            t_statistic: t,
            p_value: p,
            mean_difference: m,
        });
    }
    let t = m / (v / n).sqrt();
    Ok(PairedTTest {
        t_statistic: t,
        p_value: student_t_cdf(t, n - 1.0),
        mean_difference: m,
    })
}

/// Adaptive Simpson quadrature of `f` on `[a, b]`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let c = 0.5 * (a + b);
    let (fa, fb, fc) = (f(a), f(b), f(c));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fc + fb);
    simpson_step(f, a, b, fa, fb, fc, whole, tol, depth)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fb: f64,
    fc: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let c = 0.5 * (a + b);
    let (d, e) = (0.5 * (a + c), 0.5 * (c + b));
    let (fd, fe) = (f(d), f(e));
    let left = (c - a) / 6.0 * (fa + 4.0 * fd + fc);
    let right = (b - c) / 6.0 * (fc + 4.0 * fe + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, c, fa, fc, fd, left, tol / 2.0, depth - 1)
        + simpson_step(f, c, b, fc, fb, fe, right, tol / 2.0, depth - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ttest_dominance() {
        let base: Vec<f64> = (0..30).map(|i| 5.0 + i as f64 * 0.1).collect();
        let cand: Vec<f64> = base.iter().map(|b| b - 1.0).collect();
        let r = paired_ttest_one_sided(&cand, &base).unwrap();
        assert!(r.p_value < 1e-12);
    }

    #[test]
    fn ttest_identical_is_half() {
        let xs = [1.0, 2.0, 3.0];
        assert_eq!(paired_ttest_one_sided(&xs, &xs).unwrap().p_value, 0.5);
    }

    #[test]
    fn ttest_symmetric_differences() {
        let base = [0.0; 4];
        let cand = [-1.0, 1.0, -1.0, 1.0];
        let r = paired_ttest_one_sided(&cand, &base).unwrap();
        assert_eq!(r.t_statistic, 0.0);
        assert_relative_eq!(r.p_value, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn ttest_known_value() {
        // diffs = [-1, -2, -3]: mean -2, sd 1, t = -2*sqrt(3) on 2 dof.
        let r = paired_ttest_one_sided(&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_relative_eq!(r.t_statistic, -2.0 * 3f64.sqrt(), epsilon = 1e-12);
        // Closed form for 2 dof: F(t) = 1/2 + t / (2 sqrt(2 + t^2)).
        let t = r.t_statistic;
        assert_relative_eq!(r.p_value, 0.5 + t / (2.0 * (2.0 + t * t).sqrt()), epsilon = 1e-9);
    }

    #[test]
    fn ttest_rejects_bad_input() {
        assert!(paired_ttest_one_sided(&[1.0], &[1.0]).is_err());
        assert!(paired_ttest_one_sided(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn simpson_polynomial() {
        let v = adaptive_simpson(&|x: f64| x * x, 0.0, 3.0, 1e-12, 30);
        assert_relative_eq!(v, 9.0, epsilon = 1e-10);
    }
}
