use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xfields::gradcore::{Graph, Tensor};
use xfields::model::{consistency_weights, project_flow, warp, ConsistencyConfig, JacobianMap};
use xfields::XFieldCoord;

/// Straightforward clamp-to-edge bilinear read of channel `c` at `(x, y)`.
fn sample_ref(img: &Tensor<f64>, x: f64, y: f64, c: usize) -> f64 {
    let (h, w, ch) = img.hwc().unwrap();
    let at = |yy: usize, xx: usize| img.data()[(yy * w + xx) * ch + c];
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    top * (1.0 - fy) + bot * fy
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn(vec![h, w, 3], |_| rng.gen_range(0.0..1.0))
}

#[test]
fn warp_matches_reference_sampler() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (h, w) = (12, 16);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n_d = rng.gen_range(1..=3);
        let img = random_image(&mut rng, h, w);
        let jac = Tensor::from_fn(vec![h, w, 2 * n_d], |_| rng.gen_range(-6.0..6.0));
        let delta: Vec<f64> = (0..n_d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let map = JacobianMap::from_tensor(jac.clone(), n_d).unwrap();
        let flow = project_flow(&map, &delta, h, w).unwrap();
        let out = warp(&img, &flow).unwrap();
        for y in 0..h {
            for x in 0..w {
                let j = &jac.data()[(y * w + x) * 2 * n_d..][..2 * n_d];
                let qx = x as f64 + (0..n_d).map(|k| j[k] * delta[k]).sum::<f64>();
                let qy = y as f64 + (0..n_d).map(|k| j[n_d + k] * delta[k]).sum::<f64>();
                for c in 0..3 {
                    let got = out.data()[(y * w + x) * 3 + c];
                    worst = worst.max((got - sample_ref(&img, qx, qy, c)).abs());
                }
            }
        }
    }
    assert!(worst <= 1e-6, "max deviation {worst:e}");
}

#[test]
fn integer_shift_is_exact_copy() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w) = (8, 8);
    let img = random_image(&mut rng, h, w);
    // J = [[3], [-2]] with delta 1 reads from (x + 3, y − 2).
    let jac = Tensor::from_fn(vec![h, w, 2], |i| if i % 2 == 0 { 3.0 } else { -2.0 });
    let flow = project_flow(&JacobianMap::from_tensor(jac, 1).unwrap(), &[1.0], h, w).unwrap();
    let out = warp(&img, &flow).unwrap();
    for y in 2..h {
        for x in 0..w - 3 {
            for c in 0..3 {
                assert_eq!(out.data()[(y * w + x) * 3 + c], img.data()[((y - 2) * w + x + 3) * 3 + c]);
            }
        }
    }
}

#[test]
fn zero_flow_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = random_image(&mut rng, 6, 6);
    let map = JacobianMap::from_tensor(Tensor::zeros([6, 6, 4]), 2).unwrap();
    let flow = project_flow(&map, &[0.4, -0.9], 6, 6).unwrap();
    assert_eq!(warp(&img, &flow).unwrap(), img);
}

#[test]
fn conv_worked_example() {
    // 3×3 ones kernel over 1..9 with zero padding and bias 0.5.
    let mut g = Graph::<f64>::new();
    let x = g.constant("x", Tensor::new([3, 3, 1], (1..=9).map(f64::from).collect()).unwrap());
    let k = g.constant("k", Tensor::full([3, 3, 1, 1], 1.0));
    let b = g.constant("b", Tensor::full([1], 0.5));
    let y = g.conv2d(x, k, b).unwrap();
    g.forward().unwrap();
    let expected = [12.0, 21.0, 16.0, 27.0, 45.0, 33.0, 24.0, 39.0, 28.0].map(|v| v + 0.5);
    assert_eq!(g.value(y).unwrap().data(), &expected);
}

fn random_jacobian(rng: &mut ChaCha8Rng, h: usize, w: usize, n_d: usize) -> JacobianMap<f64> {
    JacobianMap::from_tensor(
        Tensor::from_fn(vec![h, w, 2 * n_d], |_| rng.gen_range(-3.0..3.0)),
        n_d,
    )
    .unwrap()
}

#[test]
fn consistency_is_partition_of_unity() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for n in 1..=8 {
        let x = XFieldCoord::new(vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]).unwrap();
        let sources: Vec<XFieldCoord> = (0..n)
            .map(|_| XFieldCoord::new(vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]).unwrap())
            .collect();
        let weights = consistency_weights(&x, &sources, |_| random_jacobian(&mut rng, 8, 8, 2), ConsistencyConfig::default())
            .unwrap();
        assert_eq!(weights.len(), n);
        for p in 0..64 {
            let total: f64 = weights.iter().map(|w| w.data()[p]).sum();
            assert!((total - 1.0).abs() <= 1e-6, "n = {n}: sum {total}");
            assert!(weights.iter().all(|w| w.data()[p] >= 0.0));
        }
    }
}

#[test]
fn equal_residuals_give_uniform_weights() {
    // A spatially constant Jacobian maps every pixel back exactly, so all
    // residuals are zero.
    for n in 1..=8 {
        let x = XFieldCoord::new(vec![0.5]).unwrap();
        let sources: Vec<XFieldCoord> = (0..n).map(|i| XFieldCoord::new(vec![i as f64 / 8.0]).unwrap()).collect();
        let constant = JacobianMap::from_tensor(Tensor::full([4, 4, 2], 0.0), 1).unwrap();
        let weights = consistency_weights(&x, &sources, |_| constant.clone(), ConsistencyConfig::default()).unwrap();
        for w in &weights {
            for &v in w.data() {
                assert!((v - 1.0 / n as f64).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn larger_residual_gets_smaller_weight() {
    // Source 0 is consistent (zero Jacobian everywhere); the second source
    // coordinate differs and its Jacobian varies per pixel.
    let x = XFieldCoord::new(vec![0.5]).unwrap();
    let a = XFieldCoord::new(vec![0.0]).unwrap();
    let b = XFieldCoord::new(vec![1.0]).unwrap();
    let zero = JacobianMap::from_tensor(Tensor::<f64>::zeros([4, 4, 2]), 1).unwrap();
    let ramp = JacobianMap::from_tensor(Tensor::from_fn(vec![4, 4, 2], |i| (i % 7) as f64 * 0.6), 1).unwrap();
    let weights = consistency_weights(
        &x,
        &[a, b.clone()],
        |c| if c == &b { ramp.clone() } else { zero.clone() },
        ConsistencyConfig::default(),
    )
    .unwrap();
    let sum0: f64 = weights[0].data().iter().sum();
    let sum1: f64 = weights[1].data().iter().sum();
    assert!(sum0 > sum1);
}
