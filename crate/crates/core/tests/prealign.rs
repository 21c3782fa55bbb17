use docalign_core::metrics::ms_ssim;
use docalign_core::prealign::{
    boundary_control_points, extract_mask, prealign, prealign_with, tps_fit, tps_to_flow, ControlPoints,
    DocumentMask, PrealignOptions,
};
use docalign_core::synth::{apply_homography, composite_on_background, procedural_page};
use docalign_core::Image;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 2]> {
    (0..n).map(|_| [rng.random_range(0.0..100.0), rng.random_range(0.0..80.0)]).collect()
}

#[test]
fn exact_interpolation_without_regularization() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let src = random_points(&mut rng, 12);
    let dst: Vec<[f64; 2]> = src.iter().map(|p| [p[0] + rng.random_range(-5.0..5.0), p[1] + rng.random_range(-5.0..5.0)]).collect();
    let t = tps_fit(&ControlPoints::new(src.clone(), dst.clone()).unwrap(), 0.0).unwrap();
    for (s, d) in src.iter().zip(&dst) {
        let p = t.apply(*s);
        assert!((p[0] - d[0]).abs() <= 1e-6 && (p[1] - d[1]).abs() <= 1e-6);
    }
    // side conditions of the radial part
    let w = &t.weights;
    let sum: [f64; 2] = [w.iter().map(|v| v[0]).sum(), w.iter().map(|v| v[1]).sum()];
    assert!(sum[0].abs() < 1e-6 && sum[1].abs() < 1e-6);
}

/// Least-squares affine fit by normal equations, independent of the spline code.
fn affine_oracle(src: &[[f64; 2]], dst: &[[f64; 2]]) -> [[f64; 3]; 2] {
    let n = src.len();
    let a = DMatrix::from_fn(n, 3, |r, c| if c == 2 { 1.0 } else { src[r][c] });
    let mut out = [[0.0; 3]; 2];
    for (k, row) in out.iter_mut().enumerate() {
        let b = DVector::from_fn(n, |r, _| dst[r][k]);
        let sol = (a.transpose() * &a).lu().solve(&(a.transpose() * b)).unwrap();
        *row = [sol[0], sol[1], sol[2]];
    }
    out
}

#[test]
fn affine_correspondences_are_reproduced() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5 {
        let m = [
            [rng.random_range(0.7..1.3), rng.random_range(-0.3..0.3), rng.random_range(-20.0..20.0)],
            [rng.random_range(-0.3..0.3), rng.random_range(0.7..1.3), rng.random_range(-20.0..20.0)],
        ];
        let apply = |p: [f64; 2]| [m[0][0] * p[0] + m[0][1] * p[1] + m[0][2], m[1][0] * p[0] + m[1][1] * p[1] + m[1][2]];
        let src = random_points(&mut rng, 16);
        let dst: Vec<[f64; 2]> = src.iter().map(|&p| apply(p)).collect();
        let t = tps_fit(&ControlPoints::new(src.clone(), dst.clone()).unwrap(), 0.0).unwrap();
        let oracle = affine_oracle(&src, &dst);
        for _ in 0..100 {
            let q = [rng.random_range(-20.0..120.0), rng.random_range(-20.0..100.0)];
            let got = t.apply(q);
            let want = [
                oracle[0][0] * q[0] + oracle[0][1] * q[1] + oracle[0][2],
                oracle[1][0] * q[0] + oracle[1][1] * q[1] + oracle[1][2],
            ];
            assert!((got[0] - want[0]).abs() <= 1e-6 && (got[1] - want[1]).abs() <= 1e-6, "{got:?} vs {want:?}");
        }
        assert!(t.bending_energy() < 1e-9, "{}", t.bending_energy());
    }
}

#[test]
fn regularization_lowers_bending_energy() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let src = random_points(&mut rng, 14);
    let dst: Vec<[f64; 2]> = src.iter().map(|p| [p[0] + rng.random_range(-4.0..4.0), p[1] + rng.random_range(-4.0..4.0)]).collect();
    let cp = ControlPoints::new(src, dst).unwrap();
    let mut last = f64::INFINITY;
    for lambda in [0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0] {
        let e = tps_fit(&cp, lambda).unwrap().bending_energy();
        assert!(e <= last * (1.0 + 1e-9), "lambda {lambda}: {e} > {last}");
        last = e;
    }
}

#[test]
fn translation_gives_constant_flow() {
    let src = vec![[0.0, 0.0], [30.0, 0.0], [30.0, 20.0], [0.0, 20.0], [12.0, 7.0]];
    let dst: Vec<[f64; 2]> = src.iter().map(|p| [p[0] + 10.0, p[1] - 5.0]).collect();
    let t = tps_fit(&ControlPoints::new(src, dst).unwrap(), 0.0).unwrap();
    let f = tps_to_flow(&t, 20, 30).unwrap();
    for p in f.data().chunks_exact(2) {
        assert!((p[0] - 10.0).abs() < 1e-4 && (p[1] + 5.0).abs() < 1e-4);
    }
}

fn rotated_square(n: usize, center: [f64; 2], half: f64, angle: f64) -> ([[f64; 2]; 4], Image) {
    let (c, s) = (angle.cos(), angle.sin());
    let corners = [[-half, -half], [half, -half], [half, half], [-half, half]]
        .map(|[x, y]| [center[0] + c * x - s * y, center[1] + s * x + c * y]);
    let img = Image::from_fn(n, n, 1, |x, y, _| {
        let (dx, dy) = (x as f64 - center[0], y as f64 - center[1]);
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        if u.abs() <= half && v.abs() <= half { 0.9 } else { 0.1 }
    })
    .unwrap();
    (corners, img)
}

#[test]
fn rotated_square_corners_are_found() {
    let (corners, img) = rotated_square(120, [60.0, 58.0], 35.0, 0.3);
    let mask = extract_mask(&img).unwrap();
    let cp = boundary_control_points(&mask, 0, 100, 100).unwrap();
    assert_eq!(cp.len(), 4);
    for found in &cp.source_points {
        let best = corners.iter().map(|c| (c[0] - found[0]).hypot(c[1] - found[1])).fold(f64::INFINITY, f64::min);
        assert!(best <= 2.0, "corner {found:?} is {best} px from the nearest true corner");
    }
}

#[test]
fn composited_document_mask_matches_placement() {
    let page = procedural_page(128, 4).unwrap();
    let quad = [[30.0, 22.0], [220.0, 35.0], [210.0, 235.0], [25.0, 225.0]];
    let (photo, placement) = composite_on_background(&page, quad, 256, 256, 0.08).unwrap();
    let mask = extract_mask(&photo).unwrap();
    let truth = DocumentMask::new(256, 256, placement).unwrap();
    let iou = mask.iou(&truth);
    assert!(iou > 0.95, "IoU {iou}");
}

#[test]
fn homography_distortion_is_undone() {
    let n = 256;
    let page = procedural_page(n, 5).unwrap();
    // rotation, shrink and a weak perspective term
    let (c, s) = (0.07f64.cos() * 0.85, 0.07f64.sin() * 0.85);
    let h = [[c, -s, 30.0], [s, c, 12.0], [2e-5, 1e-5, 1.0]];
    let quad = [[0.0, 0.0], [255.0, 0.0], [255.0, 255.0], [0.0, 255.0]].map(|p| apply_homography(&h, p));
    let (photo, _) = composite_on_background(&page, quad, n, n, 0.05).unwrap();
    let out = prealign_with(&photo, &PrealignOptions { out_dims: Some((n, n)), ..Default::default() }).unwrap();
    let score = ms_ssim(&out.image, &page).unwrap();
    assert!(score > 0.95, "MS-SSIM {score}");
    let raw = ms_ssim(&photo, &page).unwrap();
    assert!(score > raw);
}

#[test]
fn prealignment_is_deterministic() {
    let page = procedural_page(96, 6).unwrap();
    let quad = [[8.0, 10.0], [88.0, 6.0], [90.0, 85.0], [5.0, 90.0]];
    let (photo, _) = composite_on_background(&page, quad, 96, 96, 0.1).unwrap();
    let (a, ta) = prealign(&photo, 3, 1e-3).unwrap();
    let (b, tb) = prealign(&photo, 3, 1e-3).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
}
