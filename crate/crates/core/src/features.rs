use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
    Fused,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::Image => 0,
            Modality::Text => 1,
            Modality::Fused => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Modality::Image),
            1 => Some(Modality::Text),
            2 => Some(Modality::Fused),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
            Modality::Fused => "fused",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Modality::Image),
            "text" => Ok(Modality::Text),
            "fused" => Ok(Modality::Fused),
            other => Err(Error::invalid(format!("unknown modality {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
}

/// Pooled representations `h_{t,b}`, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub data: Array2<f32>,
    pub modality: Modality,
    pub t: usize,
    pub b: usize,
    pub pooling: Pooling,
    pub provenance: String,
}

impl FeatureMatrix {
    pub fn new(data: Array2<f32>, modality: Modality, t: usize, b: usize) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix"));
        }
        Ok(Self {
            data,
            modality,
            t,
            b,
            pooling: Pooling::Mean,
            provenance: String::new(),
        })
    }

    pub fn with_provenance(mut self, provenance: impl Into<String>) -> Self {
        self.provenance = provenance.into();
        self
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.data.mapv(f64::from)
    }
}

/// Unpooled block outputs, `samples x tokens x width`. Only the
/// cross-attention fusion consumes these.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFeatures {
    pub data: Array3<f32>,
    pub modality: Modality,
    pub t: usize,
    pub b: usize,
}

impl TokenFeatures {
    pub fn samples(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[2]
    }

    /// Mean over the token axis.
    pub fn pooled(&self) -> Result<FeatureMatrix> {
        let pooled = self
            .data
            .mean_axis(ndarray::Axis(1))
            .ok_or_else(|| Error::Degenerate("token features have no tokens".into()))?;
        FeatureMatrix::new(pooled, self.modality, self.t, self.b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rejects_non_finite() {
        let m = array![[1.0f32, f32::NAN]];
        assert!(FeatureMatrix::new(m, Modality::Image, 0, 1).is_err());
    }

    #[test]
    fn modality_codes_round_trip() {
        for m in [Modality::Image, Modality::Text, Modality::Fused] {
            assert_eq!(Modality::from_code(m.code()), Some(m));
            assert_eq!(m.as_str().parse::<Modality>().unwrap(), m);
        }
        assert_eq!(Modality::from_code(9), None);
    }

    #[test]
    fn pooling_is_token_mean() {
        let data = Array3::from_shape_vec((1, 2, 2), vec![1.0f32, 2.0, 3.0, 6.0]).unwrap();
        let tf = TokenFeatures {
            data,
            modality: Modality::Text,
            t: 0,
            b: 1,
        };
        assert_eq!(tf.pooled().unwrap().data, array![[2.0f32, 4.0]]);
    }
}
