//! The normal-map colour codec: `[-1, 1]` per axis onto `[0, 255]`.

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::Scalar;

/// Unit-length tolerance accepted by [`encode_normal`].
pub const UNIT_TOLERANCE: f64 = 1e-3;

/// Encodes a unit normal as RGB with `c = ⌊(n+1)/2·255 + ½⌋` (round half up),
/// so `0` maps to 128 and `±1` to the codec endpoints.
pub fn encode_normal<T: Scalar>(n: Vec3<T>) -> Result<[u8; 3]> {
    let n = n.map(|v| v.f64());
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    if !((len - 1.0).abs() <= UNIT_TOLERANCE) {
        return Err(Error::Invalid(format!(
            "normal {n:?} has length {len}, expected 1 ± {UNIT_TOLERANCE}"
        )));
    }
    Ok(n.map(encode_channel))
}

pub(crate) fn encode_channel(v: f64) -> u8 {
    ((v + 1.0) / 2.0 * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Inverse map `n = c/255·2 − 1`; the result is not renormalized.
pub fn decode_normal<T: Scalar>(c: [u8; 3]) -> Vec3<T> {
    c.map(|v| T::of(v as f64 / 255.0 * 2.0 - 1.0))
}
