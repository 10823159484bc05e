//! JSON has no NaN or infinity; serde_json writes them as `null`. These
//! helpers read `null` back as NaN.

use serde::{Deserialize, Deserializer};

pub fn nullable<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

#[cfg(test)]
mod tests {
    #[derive(serde::Serialize, serde::Deserialize)]
    struct S {
        #[serde(deserialize_with = "super::nullable")]
        x: f64,
    }

    #[test]
    fn non_finite_round_trips_as_nan() {
        let text = serde_json::to_string(&S { x: f64::INFINITY }).unwrap();
        assert_eq!(text, r#"{"x":null}"#);
        assert!(serde_json::from_str::<S>(&text).unwrap().x.is_nan());
        assert_eq!(serde_json::from_str::<S>(r#"{"x":2.5}"#).unwrap().x, 2.5);
    }
}
