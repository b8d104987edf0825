//! JSON encodings shared by datasets and results.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense matrix with explicit dimensions and row-major data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&DMatrix<f64>> for MatrixJson {
    fn from(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        MatrixJson { rows: m.nrows(), cols: m.ncols(), data }
    }
}

impl From<DMatrix<f64>> for MatrixJson {
    fn from(m: DMatrix<f64>) -> Self {
        MatrixJson::from(&m)
    }
}

impl TryFrom<MatrixJson> for DMatrix<f64> {
    type Error = Error;

    fn try_from(j: MatrixJson) -> Result<Self> {
        if j.data.len() != j.rows * j.cols {
            return Err(Error::invalid(format!(
                "matrix declares {}x{} but carries {} entries",
                j.rows,
                j.cols,
                j.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(j.rows, j.cols, &j.data))
    }
}

/// Serde adapter for `DMatrix<f64>` fields: `#[serde(with = "crate::serial::dmatrix")]`.
pub mod dmatrix {
    use super::MatrixJson;
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        MatrixJson::from(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let j = MatrixJson::deserialize(d)?;
        DMatrix::try_from(j).map_err(serde::de::Error::custom)
    }
}

/// Same as [`dmatrix`] for `Vec<DMatrix<f64>>`.
pub mod dmatrix_vec {
    use super::MatrixJson;
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(MatrixJson::from).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
        Vec::<MatrixJson>::deserialize(d)?
            .into_iter()
            .map(|j| DMatrix::try_from(j).map_err(serde::de::Error::custom))
            .collect()
    }
}

/// Same as [`dmatrix`] for `Option<DMatrix<f64>>`.
pub mod opt_dmatrix {
    use super::MatrixJson;
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Option<DMatrix<f64>>, s: S) -> Result<S::Ok, S::Error> {
        m.as_ref().map(MatrixJson::from).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DMatrix<f64>>, D::Error> {
        Option::<MatrixJson>::deserialize(d)?
            .map(|j| DMatrix::try_from(j).map_err(serde::de::Error::custom))
            .transpose()
    }
}
