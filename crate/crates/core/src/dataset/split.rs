use std::collections::BTreeSet;

use super::{DatasetError, Manifest};

/// Which observations to withhold for evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HoldoutProtocol {
    /// Train on the corner images of a rectangular grid, hold out the rest.
    Corners,
    /// Hold out the single central image of an odd-sized grid.
    Center,
    /// 1D sequence: hold out the odd-indexed frames between kept endpoints.
    MiddleFrame,
    /// Use the manifest's `heldout` list.
    Explicit,
}

impl std::str::FromStr for HoldoutProtocol {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "corners" => Self::Corners,
            "center" => Self::Center,
            "middle_frame" | "middle" => Self::MiddleFrame,
            "explicit" => Self::Explicit,
            other => {
                return Err(DatasetError::Protocol(format!("unknown protocol `{other}`")))
            }
        })
    }
}

/// Image indices kept for training and withheld for evaluation, each in
/// manifest order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub heldout: Vec<usize>,
}

/// Distinct values per dimension, plus the grid index of every image.
fn grid(manifest: &Manifest) -> Result<(Vec<Vec<f64>>, Vec<Vec<usize>>), DatasetError> {
    let n_d = manifest.n_d();
    let mut axes: Vec<Vec<f64>> = vec![Vec::new(); n_d];
    for img in &manifest.images {
        for (axis, &v) in axes.iter_mut().zip(&img.coord) {
            if !axis.contains(&v) {
                axis.push(v);
            }
        }
    }
    for axis in &mut axes {
        axis.sort_by(|a, b| a.total_cmp(b));
    }
    let index: Vec<Vec<usize>> = manifest
        .images
        .iter()
        .map(|img| {
            img.coord
                .iter()
                .zip(&axes)
                .map(|(v, axis)| axis.iter().position(|a| a == v).unwrap())
                .collect()
        })
        .collect();
    let cells: usize = axes.iter().map(Vec::len).product();
    let unique: BTreeSet<&Vec<usize>> = index.iter().collect();
    if cells != manifest.images.len() || unique.len() != cells {
        return Err(DatasetError::Protocol(format!(
            "{} images do not form a complete rectangular grid",
            manifest.images.len()
        )));
    }
    Ok((axes, index))
}

pub fn holdout_split(manifest: &Manifest, protocol: HoldoutProtocol) -> Result<Split, DatasetError> {
    let n = manifest.images.len();
    let held: Vec<bool> = match protocol {
        HoldoutProtocol::Explicit => {
            let list = manifest.heldout.as_ref().ok_or_else(|| {
                DatasetError::Protocol("manifest has no heldout list".into())
            })?;
            (0..n).map(|i| list.contains(&i)).collect()
        }
        HoldoutProtocol::Corners => {
            let (axes, index) = grid(manifest)?;
            index
                .iter()
                .map(|ix| !ix.iter().zip(&axes).all(|(&i, a)| i == 0 || i == a.len() - 1))
                .collect()
        }
        HoldoutProtocol::Center => {
            let (axes, index) = grid(manifest)?;
            if axes.iter().any(|a| a.len() % 2 == 0) {
                return Err(DatasetError::Protocol(
                    "center protocol needs an odd count along every dimension".into(),
                ));
            }
            index
                .iter()
                .map(|ix| ix.iter().zip(&axes).all(|(&i, a)| i == a.len() / 2))
                .collect()
        }
        HoldoutProtocol::MiddleFrame => {
            let (axes, index) = grid(manifest)?;
            if axes.len() != 1 || axes[0].len() < 3 || axes[0].len() % 2 == 0 {
                return Err(DatasetError::Protocol(
                    "middle_frame protocol needs a 1D sequence with an odd frame count >= 3".into(),
                ));
            }
            index.iter().map(|ix| ix[0] % 2 == 1).collect()
        }
    };
    let (mut train, mut heldout) = (Vec::new(), Vec::new());
    for (i, h) in held.into_iter().enumerate() {
        if h {
            heldout.push(i);
        } else {
            train.push(i);
        }
    }
    Ok(Split { train, heldout })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ImageEntry;
    use crate::model::{DimensionKind, DimensionSpec};

    fn grid_manifest(m: usize, n: usize) -> Manifest {
        let mut images = Vec::new();
        for v in 0..n {
            for u in 0..m {
                images.push(ImageEntry {
                    path: format!("{u}_{v}.png"),
                    coord: vec![u as f64, v as f64],
                });
            }
        }
        Manifest {
            name: "grid".into(),
            dims: vec![
                DimensionSpec::new("u", DimensionKind::ViewHorizontal, 0.0, (m - 1) as f64),
                DimensionSpec::new("v", DimensionKind::ViewVertical, 0.0, (n - 1) as f64),
            ],
            images,
            heldout: None,
        }
    }

    fn sequence(n: usize) -> Manifest {
        Manifest {
            name: "seq".into(),
            dims: vec![DimensionSpec::new("t", DimensionKind::Time, 0.0, (n - 1) as f64)],
            images: (0..n)
                .map(|i| ImageEntry {
                    path: format!("{i}.png"),
                    coord: vec![i as f64],
                })
                .collect(),
            heldout: None,
        }
    }

    #[test]
    fn center_of_three_by_three() {
        let s = holdout_split(&grid_manifest(3, 3), HoldoutProtocol::Center).unwrap();
        assert_eq!(s.train.len(), 8);
        assert_eq!(s.heldout, vec![4]);
    }

    #[test]
    fn corners_of_two_by_two_hold_nothing() {
        let s = holdout_split(&grid_manifest(2, 2), HoldoutProtocol::Corners).unwrap();
        assert_eq!(s.train, vec![0, 1, 2, 3]);
        assert!(s.heldout.is_empty());
        let s = holdout_split(&grid_manifest(3, 3), HoldoutProtocol::Corners).unwrap();
        assert_eq!(s.train, vec![0, 2, 6, 8]);
    }

    #[test]
    fn middle_of_triplet() {
        let s = holdout_split(&sequence(3), HoldoutProtocol::MiddleFrame).unwrap();
        assert_eq!(s.train, vec![0, 2]);
        assert_eq!(s.heldout, vec![1]);
        let s = holdout_split(&sequence(5), HoldoutProtocol::MiddleFrame).unwrap();
        assert_eq!(s.train, vec![0, 2, 4]);
    }

    #[test]
    fn incompatible_grids() {
        assert!(holdout_split(&grid_manifest(2, 3), HoldoutProtocol::Center).is_err());
        assert!(holdout_split(&sequence(4), HoldoutProtocol::MiddleFrame).is_err());
        assert!(holdout_split(&grid_manifest(3, 3), HoldoutProtocol::MiddleFrame).is_err());
        let mut m = grid_manifest(3, 3);
        m.images.pop();
        assert!(holdout_split(&m, HoldoutProtocol::Corners).is_err());
        assert!(holdout_split(&m, HoldoutProtocol::Explicit).is_err());
        m.heldout = Some(vec![3]);
        assert_eq!(holdout_split(&m, HoldoutProtocol::Explicit).unwrap().heldout, vec![3]);
    }
}
