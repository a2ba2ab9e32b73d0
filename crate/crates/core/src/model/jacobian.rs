use crate::gradcore::{Graph, NodeId, Real, Tensor};

use super::coord::DimensionSpec;
use super::ModelError;

/// How the decoder's raw output channels become a `2×n_d` Jacobian.
///
/// All view axes share a single disparity channel (channel 0 when present);
/// each other axis owns two free channels `(∂x, ∂y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianLayout {
    n_d: usize,
    raw_channels: usize,
    disparity: bool,
    /// One entry per Jacobian element `row * n_d + dim`.
    map: Vec<Option<(usize, f64)>>,
}

impl JacobianLayout {
    pub fn new(dims: &[DimensionSpec]) -> Result<Self, ModelError> {
        if dims.is_empty() {
            return Err(ModelError::NoDimensions);
        }
        let n_d = dims.len();
        let reference = dims.iter().find(|d| d.kind.is_view());
        if reference.is_some() {
            for d in dims.iter().filter(|d| d.kind.is_view()) {
                if !(d.range().is_finite() && d.range() > 0.0) {
                    return Err(ModelError::MissingGridMetadata(d.name.clone()));
                }
            }
        }
        let mut map = vec![None; 2 * n_d];
        let mut next = usize::from(reference.is_some());
        for (i, d) in dims.iter().enumerate() {
            if d.kind.is_view() {
                let s = d.range() / reference.unwrap().range();
                let row = match d.kind {
                    super::DimensionKind::ViewHorizontal => 0,
                    _ => 1,
                };
                map[row * n_d + i] = Some((0, s));
            } else {
                map[i] = Some((next, 1.0));
                map[n_d + i] = Some((next + 1, 1.0));
                next += 2;
            }
        }
        Ok(Self {
            n_d,
            raw_channels: next,
            disparity: reference.is_some(),
            map,
        })
    }

    pub fn n_d(&self) -> usize {
        self.n_d
    }

    /// Number of raw channels the decoder head must emit.
    pub fn raw_channels(&self) -> usize {
        self.raw_channels
    }

    pub fn has_disparity(&self) -> bool {
        self.disparity
    }

    pub(crate) fn build<T: Real>(&self, g: &mut Graph<T>, raw: NodeId) -> Result<NodeId, ModelError> {
        Ok(g.gather_channels(raw, self.map.clone())?)
    }
}

/// Per-pixel `2×n_d` Jacobian of pixel position with respect to the
/// normalized coordinate, in pixels per unit coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianMap<T = f32> {
    n_d: usize,
    /// `H×W×(2·n_d)`, row-major `2×n_d` per pixel.
    data: Tensor<T>,
}

impl<T: Real> JacobianMap<T> {
    pub fn from_tensor(data: Tensor<T>, n_d: usize) -> Result<Self, ModelError> {
        let (_, _, c) = data.hwc()?;
        if c != 2 * n_d {
            return Err(ModelError::Arity {
                expected: 2 * n_d,
                got: c,
            });
        }
        Ok(Self { n_d, data })
    }

    /// `[H, W, 2, n_d]`.
    pub fn shape(&self) -> [usize; 4] {
        let s = self.data.shape();
        [s[0], s[1], 2, self.n_d]
    }

    pub fn n_d(&self) -> usize {
        self.n_d
    }

    pub fn get(&self, y: usize, x: usize, row: usize, dim: usize) -> T {
        let w = self.data.shape()[1];
        self.data.data()[(y * w + x) * 2 * self.n_d + row * self.n_d + dim]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }
}

/// Per-pixel absolute source positions `(x, y)`; only produced by
/// [`project_flow`].
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<T = f32> {
    data: Tensor<T>,
}

impl<T: Real> FlowField<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    /// `q[p] − p` at pixel `(y, x)`.
    pub fn displacement(&self, y: usize, x: usize) -> (T, T) {
        let w = self.data.shape()[1];
        let i = 2 * (y * w + x);
        let d = self.data.data();
        (
            d[i] - T::from_usize(x).unwrap(),
            d[i + 1] - T::from_usize(y).unwrap(),
        )
    }
}

/// Maps raw decoder channels to a Jacobian according to the dimension kinds.
pub fn disparity_to_jacobian<T: Real>(
    raw: &Tensor<T>,
    dims: &[DimensionSpec],
) -> Result<JacobianMap<T>, ModelError> {
    let layout = JacobianLayout::new(dims)?;
    let (_, _, c) = raw.hwc()?;
    if c != layout.raw_channels() {
        return Err(ModelError::Arity {
            expected: layout.raw_channels(),
            got: c,
        });
    }
    let mut g = Graph::new();
    let r = g.constant("raw", raw.clone());
    let j = layout.build(&mut g, r)?;
    g.forward()?;
    JacobianMap::from_tensor(g.value(j).unwrap().clone(), dims.len())
}

/// `q[p] = p + J[p]·delta`. A Jacobian coarser than `(height, width)` is
/// bilinearly upsampled first.
pub fn project_flow<T: Real>(
    jacobian: &JacobianMap<T>,
    delta: &[f64],
    height: usize,
    width: usize,
) -> Result<FlowField<T>, ModelError> {
    if delta.len() != jacobian.n_d() {
        return Err(ModelError::Arity {
            expected: jacobian.n_d(),
            got: delta.len(),
        });
    }
    let mut g = Graph::new();
    let mut j = g.constant("jacobian", jacobian.tensor().clone());
    if g.shape(j)[..2] != [height, width] {
        j = g.resize(j, height, width)?;
    }
    let q = g.project_flow(j, delta)?;
    g.forward()?;
    Ok(FlowField {
        data: g.value(q).unwrap().clone(),
    })
}

/// Spatial-transformer warp: `out[p] = image(q[p])`, bilinear, clamp-to-edge.
pub fn warp<T: Real>(image: &Tensor<T>, flow: &FlowField<T>) -> Result<Tensor<T>, ModelError> {
    let mut g = Graph::new();
    let i = g.constant("image", image.clone());
    let q = g.constant("flow", flow.data.clone());
    let out = g.bilinear_sample(i, q)?;
    g.forward()?;
    Ok(g.value(out).unwrap().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DimensionKind;

    fn dims(kinds: &[DimensionKind]) -> Vec<DimensionSpec> {
        kinds
            .iter()
            .enumerate()
            .map(|(i, &k)| DimensionSpec::new(format!("d{i}"), k, 0.0, 2.0))
            .collect()
    }

    #[test]
    fn shared_disparity_columns() {
        let d = dims(&[DimensionKind::ViewHorizontal, DimensionKind::ViewVertical]);
        let raw = Tensor::<f64>::full([2, 3, 1], 4.0);
        let j = disparity_to_jacobian(&raw, &d).unwrap();
        assert_eq!(j.shape(), [2, 3, 2, 2]);
        for y in 0..2 {
            for x in 0..3 {
                assert_eq!(
                    [j.get(y, x, 0, 0), j.get(y, x, 1, 0), j.get(y, x, 0, 1), j.get(y, x, 1, 1)],
                    [4.0, 0.0, 0.0, 4.0]
                );
            }
        }
    }

    #[test]
    fn non_view_dims_pass_through() {
        let d = dims(&[DimensionKind::Time, DimensionKind::Light]);
        let raw = Tensor::<f64>::from_fn([1, 2, 4], |i| i as f64);
        let layout = JacobianLayout::new(&d).unwrap();
        assert_eq!(layout.raw_channels(), 4);
        let j = disparity_to_jacobian(&raw, &d).unwrap();
        // raw (dx_t, dy_t, dx_l, dy_l) → rows (dx_t, dx_l | dy_t, dy_l)
        assert_eq!(j.get(0, 1, 0, 0), 4.0);
        assert_eq!(j.get(0, 1, 1, 0), 5.0);
        assert_eq!(j.get(0, 1, 0, 1), 6.0);
        assert_eq!(j.get(0, 1, 1, 1), 7.0);
    }

    #[test]
    fn mixed_layout_counts_channels() {
        let d = dims(&[
            DimensionKind::ViewHorizontal,
            DimensionKind::ViewVertical,
            DimensionKind::Time,
        ]);
        assert_eq!(JacobianLayout::new(&d).unwrap().raw_channels(), 3);
    }

    #[test]
    fn view_without_range_is_rejected() {
        let d = vec![DimensionSpec::new("u", DimensionKind::ViewHorizontal, 1.0, 1.0)];
        assert!(matches!(
            JacobianLayout::new(&d),
            Err(ModelError::MissingGridMetadata(_))
        ));
    }

    #[test]
    fn zero_delta_is_identity_map() {
        let j = JacobianMap::from_tensor(Tensor::<f32>::from_fn([3, 4, 4], |i| i as f32 * 0.3), 2)
            .unwrap();
        let f = project_flow(&j, &[0.0, 0.0], 3, 4).unwrap();
        for y in 0..3 {
            for x in 0..4 {
                assert_eq!(f.displacement(y, x), (0.0, 0.0));
            }
        }
    }

    #[test]
    fn single_column_product() {
        let mut t = Tensor::<f64>::zeros([2, 2, 6]);
        for p in 0..4 {
            t.data_mut()[p * 6] = 4.0;
        }
        let j = JacobianMap::from_tensor(t, 3).unwrap();
        let f = project_flow(&j, &[0.5, 0.0, 0.0], 2, 2).unwrap();
        assert_eq!(f.displacement(1, 1), (2.0, 0.0));
        assert!(project_flow(&j, &[0.5], 2, 2).is_err());
    }

    #[test]
    fn shift_by_one_pixel() {
        let img = Tensor::<f64>::from_fn([2, 4, 1], |i| i as f64);
        let mut t = Tensor::<f64>::zeros([2, 4, 2]);
        for p in 0..8 {
            t.data_mut()[p * 2] = 1.0;
        }
        let j = JacobianMap::from_tensor(t, 1).unwrap();
        let f = project_flow(&j, &[1.0], 2, 4).unwrap();
        let out = warp(&img, &f).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 3.0, 5.0, 6.0, 7.0, 7.0]);
    }
}
