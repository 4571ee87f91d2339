//! JSON representation of dense matrices as `{rows, cols, data}` with
//! `data` in row-major order.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::matops::Mat;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixDoc {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&Mat> for MatrixDoc {
    fn from(m: &Mat) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            data.extend(m.row(i).iter());
        }
        MatrixDoc { rows: m.nrows(), cols: m.ncols(), data }
    }
}

impl MatrixDoc {
    pub fn to_mat(&self) -> std::result::Result<Mat, String> {
        if self.data.len() != self.rows * self.cols {
            return Err(format!("matrix declares {}x{} but has {} entries", self.rows, self.cols, self.data.len()));
        }
        if let Some(x) = self.data.iter().find(|x| !x.is_finite()) {
            return Err(format!("non-finite matrix entry {x}"));
        }
        Ok(Mat::from_row_slice(self.rows, self.cols, &self.data))
    }
}

pub fn serialize<S: Serializer>(m: &Mat, s: S) -> std::result::Result<S::Ok, S::Error> {
    MatrixDoc::from(m).serialize(s)
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Mat, D::Error> {
    MatrixDoc::deserialize(d)?.to_mat().map_err(serde::de::Error::custom)
}

pub mod list {
    use super::*;

    pub fn serialize<S: Serializer>(ms: &[Mat], s: S) -> std::result::Result<S::Ok, S::Error> {
        let docs: Vec<MatrixDoc> = ms.iter().map(MatrixDoc::from).collect();
        docs.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<Mat>, D::Error> {
        Vec::<MatrixDoc>::deserialize(d)?.iter().map(|doc| doc.to_mat().map_err(serde::de::Error::custom)).collect()
    }
}

pub mod vector {
    use crate::matops::Vector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vector, s: S) -> std::result::Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vector, D::Error> {
        Ok(Vector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}
