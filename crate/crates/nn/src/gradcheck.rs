//! Finite-difference gradient checking. Central differences in f64 with a
//! step of ~1e-5 resolve gradients to well below the 1e-3 relative tolerance
//! used throughout the test suites.

use ndarray::ArrayD;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// Largest relative error among checked entries.
    pub max_rel: f64,
    /// Entries actually compared (tiny gradients are skipped).
    pub checked: usize,
}

/// Compare `analytic` against central differences of `eval` around `at`.
///
/// Relative error is |a - fd| / max(|a| + |fd|, 1e-8). Entries where both
/// magnitudes are below 1e-7 carry no signal and are skipped, as are entries
/// agreeing to 1e-9 absolutely (relative error on near-zero gradients is pure
/// rounding noise). Returns an error describing the first offending entry if
/// any exceeds `tol`.
pub fn check_grad<F>(
    mut eval: F,
    at: &ArrayD<f64>,
    analytic: &ArrayD<f64>,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport, String>
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    assert_eq!(at.shape(), analytic.shape(), "check_grad: shape mismatch");
    let mut probe = at.clone();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let n = at.len();
    for i in 0..n {
        let slice = probe.as_slice_mut().expect("check_grad: non-contiguous input");
        let orig = slice[i];
        slice[i] = orig + step;
        let up = eval(&probe);
        let slice = probe.as_slice_mut().unwrap();
        slice[i] = orig - step;
        let down = eval(&probe);
        let slice = probe.as_slice_mut().unwrap();
        slice[i] = orig;
        let fd = (up - down) / (2.0 * step);
        let a = analytic.as_slice().expect("check_grad: non-contiguous analytic")[i];
        if a.abs() < 1e-7 && fd.abs() < 1e-7 {
            continue;
        }
        if (a - fd).abs() < 1e-9 {
            checked += 1;
            continue;
        }
        checked += 1;
        let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
        if rel > tol {
            return Err(format!(
                "gradient mismatch at flat index {i}: analytic {a:.6e}, finite-diff {fd:.6e}, rel {rel:.3e}"
            ));
        }
    }
    Ok(GradCheckReport { max_rel, checked })
}
