//! Cross-module pipelines through the public API.

use gradvision::augment::{AugRng, Augmentation, RandomAffine};
use gradvision::color::{hsv_to_rgb, rgb_to_grayscale, rgb_to_hsv};
use gradvision::features::{detect_and_describe, match_mnn, ransac_homography, DESCRIPTOR_DIM};
use gradvision::filters::gaussian_blur2d;
use gradvision::geometry::{transform_points2, warp_perspective, warp_perspective_const};
use gradvision::io::{decode_image, encode_image};
use gradvision::losses::mse;
use gradvision::{Tape, Tensor};
use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sum of random Gaussian blobs on a `h×w` canvas, offset by `(dx, dy)`.
fn blobs(seed: u64, h: usize, w: usize, dx: f64, dy: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spots: Vec<[f64; 4]> = (0..400)
        .map(|_| {
            [
                rng.random::<f64>() * (w as f64 + 40.0) - 20.0,
                rng.random::<f64>() * (h as f64 + 40.0) - 20.0,
                1.5 + rng.random::<f64>() * 4.0,
                rng.random::<f64>() * 2.0 - 1.0,
            ]
        })
        .collect();
    Tensor::from_fn(&[1, 1, h, w], |i| {
        let (x, y) = (i[3] as f64 - dx, i[2] as f64 - dy);
        let s: f64 = spots.iter().map(|&[bx, by, sg, a]| a * (-((x - bx).powi(2) + (y - by).powi(2)) / (2.0 * sg * sg)).exp()).sum();
        0.5 + 0.45 * s.tanh()
    })
}

#[test]
fn matching_recovers_a_translation() {
    let a = blobs(3, 96, 96, 0.0, 0.0);
    let b = blobs(3, 96, 96, 6.0, -3.0);
    let tape = Tape::new();
    let (ka, da) = detect_and_describe(&tape.constant(a), 300).unwrap();
    let (kb, db) = detect_and_describe(&tape.constant(b), 300).unwrap();
    let m = match_mnn(da.unwrap().value().data(), db.unwrap().value().data(), DESCRIPTOR_DIM, Some(0.9)).unwrap();
    let src: Vec<[f64; 2]> = m.iter().map(|p| [ka[p.ia].x, ka[p.ia].y]).collect();
    let dst: Vec<[f64; 2]> = m.iter().map(|p| [kb[p.ib].x, kb[p.ib].y]).collect();
    let (h, inliers) = ransac_homography(&src, &dst, 1.0, 500, 0).unwrap();
    assert!(inliers.iter().filter(|&&v| v).count() >= 8);
    let c = transform_points2(&h, &[[48.0, 48.0]]).unwrap()[0];
    assert!((c[0] - 54.0).abs() < 0.5 && (c[1] - 45.0).abs() < 0.5, "{c:?}");
}

#[test]
fn gradient_descent_through_a_warp_finds_the_shift() {
    let src = blobs(8, 48, 48, 0.0, 0.0);
    let truth = Matrix3::new(1.0, 0.0, 2.5, 0.0, 1.0, -1.5, 0.0, 0.0, 1.0);
    let tape = Tape::new();
    let dst = warp_perspective_const(&tape.constant(src.clone()), &[truth], (48, 48)).unwrap().value().clone();
    let mut t = [0.0f64, 0.0];
    for _ in 0..300 {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::from_fn(&[1, 3, 3], |i| match (i[1], i[2]) {
            (0, 2) => t[0],
            (1, 2) => t[1],
            (r, c) if r == c => 1.0,
            _ => 0.0,
        }));
        let warped = warp_perspective(&tape.constant(src.clone()), &p, (48, 48)).unwrap();
        let inner = |v: &gradvision::Var<f64>| v.slice(2, 6, 42, 1).unwrap().slice(3, 6, 42, 1).unwrap();
        let blurred = gaussian_blur2d(&inner(&warped), (5, 5), (1.5, 1.5)).unwrap();
        let target = gaussian_blur2d(&inner(&tape.constant(dst.clone())), (5, 5), (1.5, 1.5)).unwrap();
        let loss = mse(&blurred, &target).unwrap();
        let g = loss.backward().unwrap().wrt(&p).unwrap().clone();
        t[0] -= 100.0 * g.at(&[0, 0, 2]);
        t[1] -= 100.0 * g.at(&[0, 1, 2]);
    }
    assert!((t[0] - 2.5).abs() < 0.05 && (t[1] + 1.5).abs() < 0.05, "{t:?}");
}

#[test]
fn colour_pipeline_survives_8bit_io() {
    let rgb = Tensor::from_fn(&[1, 3, 12, 16], |i| (0.2 + 0.05 * i[1] as f64 + 0.03 * i[2] as f64 + 0.02 * i[3] as f64).min(1.0));
    let tape = Tape::new();
    let x = tape.constant(rgb.clone());
    let back = hsv_to_rgb(&rgb_to_hsv(&x).unwrap()).unwrap();
    assert!(back.value().max_abs_diff(&rgb) < 1e-12);
    let decoded: Tensor<f64> = decode_image(&encode_image(back.value()).unwrap()).unwrap();
    assert!(decoded.max_abs_diff(&rgb) <= 0.5 / 255.0 + 1e-12);
    let gray = rgb_to_grayscale(&tape.constant(decoded)).unwrap();
    assert_eq!(gray.shape(), &[1, 1, 12, 16]);
}

#[test]
fn augmentation_matrix_maps_keypoints() {
    // A bright spot moves to where the reported transform sends its centre.
    let x = Tensor::from_fn(&[1, 1, 40, 40], |i| (-((i[3] as f64 - 14.0).powi(2) + (i[2] as f64 - 22.0).powi(2)) / 8.0).exp());
    let tape = Tape::new();
    let op = RandomAffine { degrees: (-25.0, 25.0), translate: (-0.1, 0.1), scale: (0.9, 1.1) };
    let r = op.apply(&tape.constant(x), &mut AugRng::new(12)).unwrap();
    let expect = transform_points2(&r.matrix(0).unwrap(), &[[14.0, 22.0]]).unwrap()[0];
    let out = r.output.value();
    let (mut best, mut at) = (f64::MIN, (0, 0));
    for y in 0..40 {
        for x in 0..40 {
            if out.at(&[0, 0, y, x]) > best {
                best = out.at(&[0, 0, y, x]);
                at = (x, y);
            }
        }
    }
    assert!((at.0 as f64 - expect[0]).abs() <= 1.0 && (at.1 as f64 - expect[1]).abs() <= 1.0, "{at:?} vs {expect:?}");
}
