//! Image comparison metrics, epipolar slices and held-out evaluation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::gradcore::Tensor;
use crate::render::{Model, RenderError};

/// PSNR reported for identical images.
pub const PSNR_SENTINEL_DB: f64 = 999.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("image {height}x{width} smaller than the {SSIM_WINDOW}px SSIM window")]
    TooSmall { height: usize, width: usize },
    #[error("expected an HxWx3 image, got {0:?}")]
    NotRgb(Vec<usize>),
    #[error("row {row} out of range for height {height}")]
    RowOutOfRange { row: usize, height: usize },
    #[error("empty image sequence")]
    Empty,
    #[error("nothing to evaluate")]
    NoHeldout,
    #[error(transparent)]
    Render(#[from] RenderError),
}

fn same_shape(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<(), MetricsError> {
    if a.shape() != b.shape() {
        return Err(MetricsError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(())
}

pub fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64, MetricsError> {
    same_shape(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    Ok(sum / a.len().max(1) as f64)
}

/// `10·log10(1/mse)` for images in `[0, 1]`; infinite when `mse == 0`.
pub fn psnr(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Rec.601 luma, `H×W`.
pub fn luma(image: &Tensor<f32>) -> Result<Vec<f64>, MetricsError> {
    match image.shape() {
        [_, _, 3] => Ok(image
            .data()
            .chunks_exact(3)
            .map(|p| 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]))
            .collect()),
        s => Err(MetricsError::NotRgb(s.to_vec())),
    }
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Valid-region separable filtering of an `h×w` plane.
fn filter(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of the luma channels over the valid window positions.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64, MetricsError> {
    same_shape(a, b)?;
    let (la, lb) = (luma(a)?, luma(b)?);
    let (h, w) = (a.shape()[0], a.shape()[1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricsError::TooSmall { height: h, width: w });
    }
    let k = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter(&la, h, w, &k);
    let mu_b = filter(&lb, h, w, &k);
    let aa = filter(&prod(&la, &la), h, w, &k);
    let bb = filter(&prod(&lb, &lb), h, w, &k);
    let ab = filter(&prod(&la, &lb), h, w, &k);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok((total / n as f64).clamp(-1.0, 1.0))
}

/// Stacks pixel row `row` of every image: `n×W×3`, coordinate down, space
/// across.
pub fn epipolar_slice(images: &[Tensor<f32>], row: usize) -> Result<Tensor<f32>, MetricsError> {
    let first = images.first().ok_or(MetricsError::Empty)?;
    let (h, w, c) = match first.shape() {
        &[h, w, c] => (h, w, c),
        s => return Err(MetricsError::NotRgb(s.to_vec())),
    };
    if row >= h {
        return Err(MetricsError::RowOutOfRange { row, height: h });
    }
    let mut data = Vec::with_capacity(images.len() * w * c);
    for img in images {
        same_shape(first, img)?;
        data.extend_from_slice(&img.data()[row * w * c..(row + 1) * w * c]);
    }
    Ok(Tensor::new([images.len(), w, c], data).unwrap())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub index: usize,
    pub coord: Vec<f64>,
    pub mse: f64,
    /// [`PSNR_SENTINEL_DB`] when the prediction is exact.
    pub psnr_db: f64,
    pub ssim: f64,
    pub render_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: Vec<ImageScore>,
    pub mean_mse: f64,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub mean_render_ms: f64,
    pub max_render_ms: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).unwrap();
        s.push('\n');
        s
    }

    /// Header plus one row per held-out image.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,coord,mse,psnr_db,ssim,render_ms\n");
        for r in &self.images {
            let coord: Vec<String> = r.coord.iter().map(|v| v.to_string()).collect();
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.index,
                coord.join(" "),
                r.mse,
                r.psnr_db,
                r.ssim,
                r.render_ms
            ));
        }
        s
    }
}

/// One held-out image: its manifest index, normalized coordinate and pixels.
#[derive(Clone, Debug)]
pub struct Heldout {
    pub index: usize,
    pub coord: Vec<f64>,
    pub image: Tensor<f32>,
}

/// Renders every held-out coordinate and compares it with the stored image.
pub fn evaluate(model: &Model, heldout: &[Heldout]) -> Result<EvalReport, MetricsError> {
    if heldout.is_empty() {
        return Err(MetricsError::NoHeldout);
    }
    let mut images = Vec::with_capacity(heldout.len());
    for h in heldout {
        let (height, width, _) = h.image.hwc().map_err(|_| MetricsError::NotRgb(h.image.shape().to_vec()))?;
        let start = Instant::now();
        let pred = model.render_frame(&h.coord, width, height)?;
        let render_ms = start.elapsed().as_secs_f64() * 1e3;
        let m = mse(&pred, &h.image)?;
        let p = psnr(m);
        images.push(ImageScore {
            index: h.index,
            coord: h.coord.clone(),
            mse: m,
            psnr_db: if p.is_finite() { p } else { PSNR_SENTINEL_DB },
            ssim: ssim(&pred, &h.image)?,
            render_ms,
        });
    }
    let n = images.len() as f64;
    let mean = |f: fn(&ImageScore) -> f64| images.iter().map(f).sum::<f64>() / n;
    Ok(EvalReport {
        mean_mse: mean(|r| r.mse),
        mean_psnr_db: mean(|r| r.psnr_db),
        mean_ssim: mean(|r| r.ssim),
        mean_render_ms: mean(|r| r.render_ms),
        max_render_ms: images.iter().map(|r| r.render_ms).fold(0.0, f64::max),
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, h: usize, w: usize) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([h, w, 3], |_| rng.gen::<f32>())
    }

    #[test]
    fn mse_trivial_cases() {
        let a = random(1, 4, 5);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(psnr(0.0), f64::INFINITY);
        let z = Tensor::zeros([3, 3, 3]);
        let o = Tensor::full([3, 3, 3], 1.0);
        assert_eq!(mse(&z, &o).unwrap(), 1.0);
        assert_eq!(psnr(1.0), 0.0);
        assert!(mse(&z, &a).is_err());
    }

    #[test]
    fn mse_matches_scalar_loop() {
        let (a, b) = (random(2, 7, 9), random(3, 7, 9));
        let mut acc = 0.0f64;
        for y in 0..7 {
            for x in 0..9 {
                for c in 0..3 {
                    let i = (y * 9 + x) * 3 + c;
                    acc += (a.data()[i] as f64 - b.data()[i] as f64).powi(2);
                }
            }
        }
        assert!((mse(&a, &b).unwrap() - acc / 189.0).abs() <= 1e-12);
    }

    #[test]
    fn ssim_bounds() {
        let a = random(4, 16, 16);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let inv = a.map(|v| 1.0 - v);
        let s = ssim(&a, &inv).unwrap();
        assert!((-1.0..1.0).contains(&s), "{s}");
        assert!(matches!(
            ssim(&random(5, 10, 16), &random(6, 10, 16)),
            Err(MetricsError::TooSmall { .. })
        ));
    }

    #[test]
    fn slice_of_static_sequence_has_constant_columns() {
        let a = random(7, 5, 6);
        let s = epipolar_slice(&[a.clone(), a.clone(), a.clone()], 2).unwrap();
        assert_eq!(s.shape(), &[3, 6, 3]);
        for r in 1..3 {
            assert_eq!(&s.data()[r * 18..(r + 1) * 18], &s.data()[..18]);
        }
        assert_eq!(epipolar_slice(&[a.clone()], 0).unwrap().shape(), &[1, 6, 3]);
        assert!(matches!(epipolar_slice(&[a], 5), Err(MetricsError::RowOutOfRange { .. })));
    }
}
