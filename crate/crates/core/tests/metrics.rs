use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xfields::gradcore::Tensor;
use xfields::metrics::{epipolar_slice, mse, psnr, ssim};

fn random(seed: u64, h: usize, w: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([h, w, 3], |_| rng.gen::<f32>())
}

/// Direct 2-D windowed SSIM, no separable filtering or shared buffers.
fn ssim_reference(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let (h, w) = (a.shape()[0], a.shape()[1]);
    let y = |t: &Tensor<f32>, r: usize, c: usize| {
        let p = &t.data()[(r * w + c) * 3..][..3];
        0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
    };
    let mut g = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut sum = 0.0;
    let mut count = 0;
    for r0 in 0..=h - 11 {
        for c0 in 0..=w - 11 {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = g[i][j] / total;
                    ma += k * y(a, r0 + i, c0 + j);
                    mb += k * y(b, r0 + i, c0 + j);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = g[i][j] / total;
                    let (da, db) = (y(a, r0 + i, c0 + j) - ma, y(b, r0 + i, c0 + j) - mb);
                    va += k * da * da;
                    vb += k * db * db;
                    cov += k * da * db;
                }
            }
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    sum / count as f64
}

#[test]
fn ssim_matches_direct_reference() {
    let a = random(1, 16, 16);
    // A correlated second image: blend of a and noise.
    let noise = random(2, 16, 16);
    let b = Tensor::from_fn([16, 16, 3], |i| 0.7 * a.data()[i] + 0.3 * noise.data()[i]);
    let got = ssim(&a, &b).unwrap();
    let want = ssim_reference(&a, &b);
    assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-12);
}

#[test]
fn psnr_of_uniform_error() {
    let a = Tensor::full([4, 4, 3], 0.5f32);
    let b = Tensor::full([4, 4, 3], 0.6f32);
    let m = mse(&a, &b).unwrap();
    assert!((m - 0.01).abs() < 1e-8);
    assert!((psnr(m) - 20.0).abs() < 1e-5);
}

#[test]
fn epipolar_slice_of_diagonal_motion() {
    // Frame i is a single bright pixel at column i of row 2, so the slice
    // shows a diagonal line.
    let frames: Vec<Tensor<f32>> = (0..5)
        .map(|i| {
            let mut t = Tensor::zeros([4, 5, 3]);
            for c in 0..3 {
                t.data_mut()[(2 * 5 + i) * 3 + c] = 1.0;
            }
            t
        })
        .collect();
    let slice = epipolar_slice(&frames, 2).unwrap();
    assert_eq!(slice.shape(), &[5, 5, 3]);
    for r in 0..5 {
        for c in 0..5 {
            let v = slice.data()[(r * 5 + c) * 3];
            assert_eq!(v, if r == c { 1.0 } else { 0.0 });
        }
    }
    assert!(epipolar_slice(&frames, 4).is_err());
}
