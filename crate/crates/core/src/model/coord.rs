use serde::{Deserialize, Serialize};

use super::ModelError;

/// What a coordinate axis controls. View axes share one per-pixel disparity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimensionKind {
    ViewHorizontal,
    ViewVertical,
    Time,
    Light,
    Generic,
}

impl DimensionKind {
    pub fn is_view(self) -> bool {
        matches!(self, Self::ViewHorizontal | Self::ViewVertical)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ViewHorizontal => "view_horizontal",
            Self::ViewVertical => "view_vertical",
            Self::Time => "time",
            Self::Light => "light",
            Self::Generic => "generic",
        }
    }
}

impl std::str::FromStr for DimensionKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "view_horizontal" => Self::ViewHorizontal,
            "view_vertical" => Self::ViewVertical,
            "time" => Self::Time,
            "light" => Self::Light,
            "generic" => Self::Generic,
            other => return Err(ModelError::UnknownDimensionKind(other.to_string())),
        })
    }
}

/// One axis of the coordinate space with the raw range used to normalize it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionSpec {
    pub name: String,
    pub kind: DimensionKind,
    pub min: f64,
    pub max: f64,
}

impl DimensionSpec {
    pub fn new(name: impl Into<String>, kind: DimensionKind, min: f64, max: f64) -> Self {
        Self {
            name: name.into(),
            kind,
            min,
            max,
        }
    }

    pub fn range(&self) -> f64 {
        self.max - self.min
    }

    /// Maps a raw value into `[0, 1]` (unclamped). A degenerate range maps
    /// everything to 0.
    pub fn normalize(&self, raw: f64) -> f64 {
        let r = self.range();
        if r > 0.0 {
            (raw - self.min) / r
        } else {
            0.0
        }
    }

    pub fn denormalize(&self, unit: f64) -> f64 {
        self.min + unit * self.range()
    }
}

/// A point of the normalized coordinate space `[0, 1]^n_d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct XFieldCoord(Vec<f64>);

impl XFieldCoord {
    pub fn new(values: Vec<f64>) -> Result<Self, ModelError> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidCoordinate(values));
        }
        Ok(Self(values))
    }

    /// Builds a coordinate, clamping every component into `[0, 1]`.
    pub fn clamped(values: &[f64]) -> Result<Self, ModelError> {
        Self::new(values.iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    pub fn from_raw(raw: &[f64], dims: &[DimensionSpec]) -> Result<Self, ModelError> {
        if raw.len() != dims.len() {
            return Err(ModelError::Arity {
                expected: dims.len(),
                got: raw.len(),
            });
        }
        Self::new(raw.iter().zip(dims).map(|(&v, d)| d.normalize(v)).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn clamp(&self) -> Self {
        Self(self.0.iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    /// Componentwise `self − other`.
    pub fn delta(&self, other: &Self) -> Vec<f64> {
        self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect()
    }

    pub fn distance_sq(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_round_trip() {
        let d = DimensionSpec::new("u", DimensionKind::ViewHorizontal, -2.0, 6.0);
        assert_eq!(d.normalize(2.0), 0.5);
        assert_eq!(d.denormalize(0.25), 0.0);
        let flat = DimensionSpec::new("t", DimensionKind::Time, 1.0, 1.0);
        assert_eq!(flat.normalize(1.0), 0.0);
    }

    #[test]
    fn coordinate_validation() {
        assert!(XFieldCoord::new(vec![]).is_err());
        assert!(XFieldCoord::new(vec![f64::NAN]).is_err());
        let c = XFieldCoord::clamped(&[1.7, -0.2, 0.4]).unwrap();
        assert_eq!(c.values(), &[1.0, 0.0, 0.4]);
        let dims = vec![DimensionSpec::new("t", DimensionKind::Time, 0.0, 2.0)];
        assert!(matches!(
            XFieldCoord::from_raw(&[1.0, 2.0], &dims),
            Err(ModelError::Arity { .. })
        ));
    }

    #[test]
    fn kind_names_round_trip() {
        for k in [
            DimensionKind::ViewHorizontal,
            DimensionKind::ViewVertical,
            DimensionKind::Time,
            DimensionKind::Light,
            DimensionKind::Generic,
        ] {
            assert_eq!(k.as_str().parse::<DimensionKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.as_str()));
        }
    }
}
