//! Small dense-vector helpers. Embeddings are stored as `f32`; all
//! arithmetic is carried out in `f64`.

/// Norm below which a vector is treated as zero when normalizing.
pub const ZERO_NORM: f64 = 1e-12;

pub fn dot<A, B>(a: &[A], b: &[B]) -> f64
where
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x.into() * y.into()).sum()
}

pub fn norm<A: Copy + Into<f64>>(a: &[A]) -> f64 {
    dot(a, a).sqrt()
}

/// Unit vector in the direction of `a`, or `None` when `a` is (numerically) zero
/// or non-finite.
pub fn normalize<A: Copy + Into<f64>>(a: &[A]) -> Option<Vec<f64>> {
    let n = norm(a);
    if !n.is_finite() || n <= ZERO_NORM {
        return None;
    }
    Some(a.iter().map(|&x| x.into() / n).collect())
}

pub fn to_f32(a: &[f64]) -> Vec<f32> {
    a.iter().map(|&x| x as f32).collect()
}

/// True when `‖a‖` is within `tol` of one.
pub fn is_unit<A: Copy + Into<f64>>(a: &[A], tol: f64) -> bool {
    (norm(a) - 1.0).abs() <= tol
}
