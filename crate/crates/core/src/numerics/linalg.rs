use super::graph::Var;
use super::Scalar;

/// Number of Taylor terms (orders 0..=15) in the scaled exponential core.
pub const TAYLOR_TERMS: usize = 16;

/// Squaring count `s = max(0, ceil(log2 ‖A‖₁))` for scaling and squaring.
pub fn squaring_count<S: Scalar>(a: &[S], n: usize) -> u32 {
    let norm = (0..n)
        .map(|j| (0..n).map(|i| a[i * n + j].abs()).fold(S::zero(), |acc, v| acc + v))
        .fold(S::zero(), S::max);
    if norm <= S::one() {
        0
    } else {
        norm.log2().ceil().to_u32().unwrap_or(0)
    }
}

/// Matrix exponential of a 3×3 node by scaling and squaring around a
/// 16-term Taylor polynomial. Gradients flow through every series term; the
/// squaring count is chosen from the forward value.
pub fn matexp<'g, S: Scalar>(a: Var<'g, S>) -> Var<'g, S> {
    let shape = a.shape();
    assert_eq!(shape, [3, 3], "matexp expects a 3x3 matrix, got {shape:?}");
    let g = a.graph();
    let s = squaring_count(&a.value(), 3);
    let b = a.mul_scalar(S::lit(0.5f64.powi(s as i32)));
    let eye = g.identity(3);
    // Horner: I + B(I + B/2(I + B/3(...)))
    let mut p = eye;
    for j in (1..TAYLOR_TERMS).rev() {
        p = eye + b.matmul(p).mul_scalar(S::one() / S::from_usize(j).expect("j"));
    }
    for _ in 0..s {
        p = p.matmul(p);
    }
    p
}
