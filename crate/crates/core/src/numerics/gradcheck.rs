use super::tensor::{Scalar, Tensor};

/// Central-difference gradient of a scalar function, one coordinate at a
/// time: `(f(x + eps·eᵢ) − f(x − eps·eᵢ)) / 2eps`.
pub fn finite_diff_grad<T: Scalar>(f: impl Fn(&Tensor<T>) -> T, x: &Tensor<T>, eps: T) -> Tensor<T> {
    assert!(eps > T::zero(), "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / (eps + eps));
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    pub worst_index: usize,
    pub passed: bool,
}

/// Elementwise `|analytic − numeric| ≤ atol + rtol·|numeric|`.
pub fn assert_grad_close<A: Scalar, B: Scalar>(
    analytic: &Tensor<A>,
    numeric: &Tensor<B>,
    rtol: f64,
    atol: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_abs_err: 0.0,
        worst_index: 0,
        passed: analytic.len() == numeric.len(),
    };
    for (i, (a, n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let (a, n) = (a.as_f64(), n.as_f64());
        let err = (a - n).abs();
        if err > report.max_abs_err {
            report.max_abs_err = err;
            report.worst_index = i;
        }
        if !(err <= atol + rtol * n.abs()) {
            report.passed = false;
        }
    }
    report
}
