//! Serde adapters that encode vectors as flat arrays and matrices as arrays
//! of rows.

use nalgebra::{DMatrix, DVector};
use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

pub mod vector {
    use super::*;

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

pub mod option_vector {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<DVector<f64>>, s: S) -> Result<S::Ok, S::Error> {
        v.as_ref().map(|v| v.as_slice()).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DVector<f64>>, D::Error> {
        Ok(Option::<Vec<f64>>::deserialize(d)?.map(DVector::from_vec))
    }
}

pub mod matrix {
    use super::*;

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("matrix rows have different lengths"));
        }
        Ok(DMatrix::from_row_iterator(
            rows.len(),
            ncols,
            rows.into_iter().flatten(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Holder {
        #[serde(with = "vector")]
        v: DVector<f64>,
        #[serde(with = "matrix")]
        m: DMatrix<f64>,
        #[serde(with = "option_vector")]
        o: Option<DVector<f64>>,
    }

    #[test]
    fn round_trip() {
        let h = Holder {
            v: DVector::from_vec(vec![1.0, 2.0]),
            m: DMatrix::from_row_slice(2, 3, &[1., 2., 3., 4., 5., 6.]),
            o: None,
        };
        let json = serde_json::to_string(&h).unwrap();
        assert_eq!(json, r#"{"v":[1.0,2.0],"m":[[1.0,2.0,3.0],[4.0,5.0,6.0]],"o":null}"#);
        assert_eq!(serde_json::from_str::<Holder>(&json).unwrap(), h);
        assert!(serde_json::from_str::<Holder>(r#"{"v":[],"m":[[1.0],[1.0,2.0]],"o":null}"#).is_err());
    }
}
