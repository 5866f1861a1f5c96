//! Fixed-precision decimal formatting shared by the text file formats.

/// Formats `x` with 17 significant digits in scientific notation, e.g.
/// `2.0000000000000001e-1`. Every finite `f64` round-trips exactly through
/// this representation, and the output is a valid JSON number.
pub fn fmt17(x: f64) -> String {
    if x == 0.0 {
        // Normalises -0.0 so files do not depend on the sign of zero.
        return "0.0000000000000000e0".to_string();
    }
    format!("{x:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_values() {
        assert_eq!(fmt17(0.2), "2.0000000000000001e-1");
        assert_eq!(fmt17(1.0), "1.0000000000000000e0");
        assert_eq!(fmt17(-0.0), "0.0000000000000000e0");
    }

    proptest! {
        #[test]
        fn round_trips(x in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL) {
            let s = fmt17(x);
            let back: f64 = s.parse().unwrap();
            prop_assert_eq!(back, x);
            let json: f64 = serde_json::from_str(&s).unwrap();
            prop_assert_eq!(json, x);
        }
    }
}
