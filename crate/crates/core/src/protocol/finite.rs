use serde::ser::{Error, SerializeSeq};
use serde::Serializer;

pub(crate) const NON_FINITE_TAG: &str = "non-finite number";

/// `serialize_with` helper that refuses NaN and infinities.
pub fn finite_f64<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if !v.is_finite() {
        return Err(S::Error::custom(format!("{NON_FINITE_TAG}: {v}")));
    }
    s.serialize_f64(*v)
}

/// Sequence variant of [`finite_f64`].
pub fn finite_vec<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for (i, x) in v.iter().enumerate() {
        if !x.is_finite() {
            return Err(S::Error::custom(format!("{NON_FINITE_TAG} at [{i}]: {x}")));
        }
        seq.serialize_element(x)?;
    }
    seq.end()
}
