//! Serde adapters that (de)serialize `Array1` fields as plain JSON arrays.

pub mod array1 {
    use ndarray::Array1;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<F, S>(arr: &Array1<F>, ser: S) -> Result<S::Ok, S::Error>
    where
        F: Serialize,
        S: Serializer,
    {
        ser.collect_seq(arr.iter())
    }

    pub fn deserialize<'de, F, D>(de: D) -> Result<Array1<F>, D::Error>
    where
        F: Deserialize<'de>,
        D: Deserializer<'de>,
    {
        Ok(Array1::from_vec(Vec::<F>::deserialize(de)?))
    }
}
