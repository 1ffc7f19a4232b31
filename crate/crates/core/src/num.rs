//! Scalar abstraction and the small statistics kernels the schedulers share.
//!
//! Everything here is generic over [`Scalar`] so the rules can be checked in
//! `f32` as well as `f64`. The engine itself runs on `f64` (see the aliases at
//! the crate root).

use std::cmp::Ordering;
use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Total order used for ranking: NaN sorts last, `+inf` after every finite value.
pub fn total_cmp<S: Scalar>(a: &S, b: &S) -> Ordering {
    match (a.is_nan(), b.is_nan()) {
        (true, true) => Ordering::Equal,
        (true, false) => Ordering::Greater,
        (false, true) => Ordering::Less,
        (false, false) => a.partial_cmp(b).unwrap_or(Ordering::Equal),
    }
}

/// Median; an even count averages the two middle values. `None` on empty input.
pub fn median<S: Scalar>(values: &[S]) -> Option<S> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(total_cmp);
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        Some(sorted[mid])
    } else {
        let two = S::one() + S::one();
        Some((sorted[mid - 1] + sorted[mid]) / two)
    }
}

pub fn mean<S: Scalar>(values: &[S]) -> Option<S> {
    if values.is_empty() {
        return None;
    }
    let sum = values.iter().fold(S::zero(), |acc, v| acc + *v);
    Some(sum / S::from_usize(values.len())?)
}

/// The `k`-th smallest value, 1-based. `None` when `k` is 0 or out of range.
pub fn kth_smallest<S: Scalar>(values: &[S], k: usize) -> Option<S> {
    if k == 0 || k > values.len() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(total_cmp);
    Some(sorted[k - 1])
}

/// Maps a unit draw onto `[lo, hi]` linearly.
pub fn uniform_from_unit<S: Scalar>(lo: S, hi: S, unit: S) -> S {
    lo + unit * (hi - lo)
}

/// Maps a unit draw onto `[lo, hi]` uniformly in log space. Requires `0 < lo`.
pub fn log_uniform_from_unit<S: Scalar>(lo: S, hi: S, unit: S) -> S {
    let (ln_lo, ln_hi) = (lo.ln(), hi.ln());
    (ln_lo + unit * (ln_hi - ln_lo)).exp()
}

/// Index into a list of `len` elements for a unit draw; `unit == 1` maps to the last element.
pub fn index_from_unit<S: Scalar>(len: usize, unit: S) -> usize {
    debug_assert!(len > 0);
    let scaled = (unit * S::from_usize(len).unwrap_or_else(S::zero)).floor();
    scaled.to_usize().unwrap_or(0).min(len - 1)
}

pub fn clamp<S: Scalar>(v: S, lo: S, hi: S) -> S {
    v.max(lo).min(hi)
}
