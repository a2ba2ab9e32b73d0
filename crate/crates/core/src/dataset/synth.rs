//! Synthetic scenes with analytic ground-truth motion.
//!
//! Every scene renders frames by bilinearly sampling one seeded texture
//! image, so the true flow between any two coordinates is known exactly.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gradcore::{kernels, Tensor};
use crate::model::{DimensionKind, DimensionSpec};

use super::{save_manifest, save_png, DatasetError, ImageEntry, Manifest};

/// Multiplicative darkening inside a shadow.
pub const SHADOW_FACTOR: f32 = 0.4;

/// Seeded value noise at several scales plus hard-edged shapes, so that
/// motion is observable almost everywhere.
pub fn texture(seed: u64, height: usize, width: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = vec![0.0f32; height * width * 3];
    for (cell, amp) in [(16usize, 0.5f32), (8, 0.3), (4, 0.2)] {
        let gh = height / cell + 2;
        let gw = width / cell + 2;
        let lattice: Vec<f32> = (0..gh * gw * 3).map(|_| rng.gen::<f32>()).collect();
        for y in 0..height {
            let fy = y as f32 / cell as f32;
            let (iy, ty) = (fy.floor() as usize, smooth(fy.fract()));
            for x in 0..width {
                let fx = x as f32 / cell as f32;
                let (ix, tx) = (fx.floor() as usize, smooth(fx.fract()));
                for c in 0..3 {
                    let at = |yy: usize, xx: usize| lattice[(yy * gw + xx) * 3 + c];
                    let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
                    let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
                    img[(y * width + x) * 3 + c] += amp * (top * (1.0 - ty) + bot * ty);
                }
            }
        }
    }
    let shapes = (height * width / 400).max(4);
    for s in 0..shapes {
        let cy = rng.gen_range(0.0..height as f32);
        let cx = rng.gen_range(0.0..width as f32);
        let r = rng.gen_range(3.0..9.0f32);
        let bright = rng.gen_bool(0.5);
        let color: [f32; 3] = std::array::from_fn(|_| {
            if bright {
                rng.gen_range(0.8..1.0)
            } else {
                rng.gen_range(0.0..0.2)
            }
        });
        for y in 0..height {
            for x in 0..width {
                let (dy, dx) = (y as f32 - cy, x as f32 - cx);
                let inside = if s % 2 == 0 {
                    dx * dx + dy * dy <= r * r
                } else {
                    dx.abs() <= r && dy.abs() <= 0.6 * r
                };
                if inside {
                    img[(y * width + x) * 3..][..3].copy_from_slice(&color);
                }
            }
        }
    }
    Tensor::new([height, width, 3], img).unwrap()
}

fn smooth(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// A moving soft-edged rectangular shadow, in pixels at light coordinate 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShadowGeometry {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
    /// Horizontal travel across the full light range.
    pub travel: f64,
    /// Width of the soft edge.
    pub penumbra: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SceneKind {
    Translate1d { total_shift_px: f64, n_frames: usize },
    LightfieldPlane { disparity_px: f64, grid_m: usize, grid_n: usize },
    ShadowSweep { n_lights: usize, shadow: Option<ShadowGeometry> },
}

/// A generated scene: texture, geometry and the observation grid.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub kind: SceneKind,
    pub size: usize,
    pub seed: u64,
    margin: usize,
    texture: Tensor<f32>,
}

impl SyntheticScene {
    fn with_texture(kind: SceneKind, size: usize, seed: u64, max_shift: f64) -> Self {
        let margin = max_shift.ceil() as usize + 2;
        let texture = texture(seed, size + 2 * margin, size + 2 * margin);
        Self {
            kind,
            size,
            seed,
            margin,
            texture,
        }
    }

    /// Texture moving right by `total_shift_px` over `n_frames` frames.
    pub fn translate1d(seed: u64, size: usize, total_shift_px: f64, n_frames: usize) -> Result<Self, DatasetError> {
        if n_frames < 2 {
            return Err(DatasetError::Synth("need at least 2 frames".into()));
        }
        if !(total_shift_px.abs() <= size as f64 / 2.0) {
            return Err(DatasetError::Synth(format!(
                "shift {total_shift_px} px exceeds half the image width {size}"
            )));
        }
        Ok(Self::with_texture(
            SceneKind::Translate1d {
                total_shift_px,
                n_frames,
            },
            size,
            seed,
            total_shift_px.abs(),
        ))
    }

    /// Fronto-parallel textured plane seen from an `m×n` camera grid with
    /// `disparity_px` of shift between neighbouring views.
    pub fn lightfield_plane(
        seed: u64,
        size: usize,
        disparity_px: f64,
        grid_m: usize,
        grid_n: usize,
    ) -> Result<Self, DatasetError> {
        if grid_m < 2 || grid_n < 2 {
            return Err(DatasetError::Synth("camera grid must be at least 2x2".into()));
        }
        let max_shift = disparity_px.abs() * (grid_m.max(grid_n) - 1) as f64;
        if !(max_shift <= size as f64 / 2.0) {
            return Err(DatasetError::Synth(format!(
                "total view shift {max_shift} px exceeds half the image width {size}"
            )));
        }
        Ok(Self::with_texture(
            SceneKind::LightfieldPlane {
                disparity_px,
                grid_m,
                grid_n,
            },
            size,
            seed,
            max_shift,
        ))
    }

    /// Static texture under a shadow that moves with the light coordinate.
    pub fn shadow_sweep(
        seed: u64,
        size: usize,
        shadow: Option<ShadowGeometry>,
        n_lights: usize,
    ) -> Result<Self, DatasetError> {
        if n_lights < 2 {
            return Err(DatasetError::Synth("need at least 2 lights".into()));
        }
        Ok(Self::with_texture(
            SceneKind::ShadowSweep { n_lights, shadow },
            size,
            seed,
            0.0,
        ))
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            SceneKind::Translate1d { .. } => "translate1d",
            SceneKind::LightfieldPlane { .. } => "lightfield_plane",
            SceneKind::ShadowSweep { .. } => "shadow_sweep",
        }
    }

    pub fn dims(&self) -> Vec<DimensionSpec> {
        match &self.kind {
            SceneKind::Translate1d { n_frames, .. } => vec![DimensionSpec::new(
                "time",
                DimensionKind::Time,
                0.0,
                (*n_frames - 1) as f64,
            )],
            SceneKind::LightfieldPlane { grid_m, grid_n, .. } => vec![
                DimensionSpec::new("u", DimensionKind::ViewHorizontal, 0.0, (*grid_m - 1) as f64),
                DimensionSpec::new("v", DimensionKind::ViewVertical, 0.0, (*grid_n - 1) as f64),
            ],
            SceneKind::ShadowSweep { n_lights, .. } => vec![DimensionSpec::new(
                "light",
                DimensionKind::Light,
                0.0,
                (*n_lights - 1) as f64,
            )],
        }
    }

    /// Raw coordinates of the observation grid, first axis fastest.
    pub fn grid_coords(&self) -> Vec<Vec<f64>> {
        match &self.kind {
            SceneKind::Translate1d { n_frames: n, .. }
            | SceneKind::ShadowSweep { n_lights: n, .. } => (0..*n).map(|i| vec![i as f64]).collect(),
            SceneKind::LightfieldPlane { grid_m, grid_n, .. } => (0..*grid_n)
                .flat_map(|v| (0..*grid_m).map(move |u| vec![u as f64, v as f64]))
                .collect(),
        }
    }

    /// Texture displacement in pixels at a normalized coordinate.
    pub fn shift_at(&self, coord: &[f64]) -> (f64, f64) {
        let [jx, jy] = self.true_jacobian_columns();
        let mut s = (0.0, 0.0);
        for (i, &c) in coord.iter().enumerate() {
            s.0 += jx[i] * c;
            s.1 += jy[i] * c;
        }
        s
    }

    /// Ground-truth Jacobian of the texture motion, in pixels per unit
    /// normalized coordinate: `[row x, row y]`, one entry per dimension.
    pub fn true_jacobian_columns(&self) -> [Vec<f64>; 2] {
        match &self.kind {
            SceneKind::Translate1d { total_shift_px, .. } => [vec![*total_shift_px], vec![0.0]],
            SceneKind::LightfieldPlane {
                disparity_px,
                grid_m,
                grid_n,
            } => [
                vec![disparity_px * (*grid_m - 1) as f64, 0.0],
                vec![0.0, disparity_px * (*grid_n - 1) as f64],
            ],
            SceneKind::ShadowSweep { .. } => [vec![0.0], vec![0.0]],
        }
    }

    /// Ground-truth per-view disparity in pixels (light fields only).
    pub fn true_disparity(&self) -> Option<f64> {
        match self.kind {
            SceneKind::LightfieldPlane { disparity_px, .. } => Some(disparity_px),
            _ => None,
        }
    }

    /// Shadow coverage in `[0, 1]` per pixel at a normalized light coordinate.
    pub fn shadow_coverage(&self, coord: &[f64]) -> Vec<f32> {
        let n = self.size;
        let SceneKind::ShadowSweep {
            shadow: Some(g), ..
        } = &self.kind
        else {
            return vec![0.0; n * n];
        };
        let off = g.travel * coord[0];
        let mut out = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                let (xf, yf) = (x as f64, y as f64);
                let x0 = g.x + off - 0.5;
                let y0 = g.y - 0.5;
                let d = (xf - x0)
                    .min(x0 + g.width - xf)
                    .min(yf - y0)
                    .min(y0 + g.height - yf);
                let m = if g.penumbra > 0.0 {
                    ((d + g.penumbra / 2.0) / g.penumbra).clamp(0.0, 1.0)
                } else if d > 0.0 {
                    1.0
                } else {
                    0.0
                };
                out.push(m as f32);
            }
        }
        out
    }

    /// Binary shadow mask (coverage above one half).
    pub fn shadow_mask(&self, coord: &[f64]) -> Vec<bool> {
        self.shadow_coverage(coord).iter().map(|&m| m > 0.5).collect()
    }

    /// Analytic frame at a normalized coordinate, `size×size×3`.
    pub fn frame_at(&self, coord: &[f64]) -> Tensor<f32> {
        let (sx, sy) = self.shift_at(coord);
        let n = self.size;
        let m = self.margin as f64;
        let positions: Vec<f32> = (0..n * n)
            .flat_map(|i| {
                let (y, x) = ((i / n) as f64, (i % n) as f64);
                [(x + m - sx) as f32, (y + m - sy) as f32]
            })
            .collect();
        let ts = self.texture.shape();
        let mut out = vec![0.0f32; n * n * 3];
        kernels::bilinear_forward(self.texture.data(), ts[0], ts[1], 3, &positions, &mut out);
        if let SceneKind::ShadowSweep { shadow: Some(_), .. } = self.kind {
            for (px, m) in out.chunks_exact_mut(3).zip(self.shadow_coverage(coord)) {
                let f = 1.0 - (1.0 - SHADOW_FACTOR) * m;
                for v in px {
                    *v *= f;
                }
            }
        }
        Tensor::new([n, n, 3], out).unwrap()
    }

    /// Shading (per-pixel darkening factor) at a normalized coordinate.
    pub fn shading_at(&self, coord: &[f64]) -> Vec<f32> {
        self.shadow_coverage(coord)
            .iter()
            .map(|&m| 1.0 - (1.0 - SHADOW_FACTOR) * m)
            .collect()
    }

    pub fn manifest(&self) -> Manifest {
        let dims = self.dims();
        Manifest {
            name: self.name().to_string(),
            images: self
                .grid_coords()
                .into_iter()
                .enumerate()
                .map(|(i, coord)| ImageEntry {
                    path: format!("frame_{i:03}.png"),
                    coord,
                })
                .collect(),
            dims,
            heldout: None,
        }
    }

    /// Frames at every grid coordinate, in manifest order.
    pub fn frames(&self) -> Vec<Tensor<f32>> {
        let dims = self.dims();
        self.grid_coords()
            .iter()
            .map(|raw| {
                let c: Vec<f64> = raw.iter().zip(&dims).map(|(&v, d)| d.normalize(v)).collect();
                self.frame_at(&c)
            })
            .collect()
    }

    /// Writes frames (8-bit PNG), shadow masks if any, `scene.json` and
    /// `manifest.json` into `dir`. Returns the manifest.
    pub fn write(&self, dir: &Path, heldout: Option<Vec<usize>>) -> Result<Manifest, DatasetError> {
        std::fs::create_dir_all(dir).map_err(|e| DatasetError::Io(e.to_string()))?;
        let mut manifest = self.manifest();
        manifest.heldout = heldout;
        let dims = self.dims();
        for (entry, frame) in manifest.images.iter().zip(self.frames()) {
            save_png(&frame, &dir.join(&entry.path))?;
            if let SceneKind::ShadowSweep { shadow: Some(_), .. } = self.kind {
                let c: Vec<f64> = entry.coord.iter().zip(&dims).map(|(&v, d)| d.normalize(v)).collect();
                let mask = Tensor::new(
                    [self.size, self.size, 3],
                    self.shadow_mask(&c)
                        .iter()
                        .flat_map(|&m| [f32::from(u8::from(m)); 3])
                        .collect(),
                )?;
                save_png(&mask, &dir.join(entry.path.replace("frame_", "mask_")))?;
            }
        }
        let meta = serde_json::json!({
            "kind": self.kind,
            "size": self.size,
            "seed": self.seed,
            "true_jacobian": self.true_jacobian_columns(),
        });
        std::fs::write(dir.join("scene.json"), serde_json::to_string_pretty(&meta).unwrap())
            .map_err(|e| DatasetError::Io(e.to_string()))?;
        save_manifest(&manifest, &dir.join("manifest.json"))?;
        Ok(manifest)
    }
}
