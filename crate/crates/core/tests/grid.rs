use docalign_core::filter::{mean_filter_plane, sobel_gradients};
use docalign_core::flow::{FlowField, FLOW_HEADER_LEN};
use docalign_core::synth::{random_flow, SynthParams};
use docalign_core::{bilinear_sample, compose_flows, read_flow, resize_flow, warp, write_flow, Image, OutOfBounds};
use proptest::prelude::*;

fn bandlimited(n: usize) -> Image {
    Image::from_fn(n, n, 1, |x, y, _| {
        let (u, v) = (x as f32 / n as f32, y as f32 / n as f32);
        0.5 + 0.2 * (6.0 * u + 1.0).sin() * (5.0 * v).cos() + 0.1 * (11.0 * (u + v)).sin()
    })
    .unwrap()
}

fn arb_image() -> impl Strategy<Value = Image> {
    (1usize..9, 1usize..9, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(|(h, w, c)| {
        prop::collection::vec(0.0f32..1.0, h * w * c).prop_map(move |d| Image::new(h, w, c, d).unwrap())
    })
}

proptest! {
    #[test]
    fn zero_flow_warp_is_bit_exact(img in arb_image()) {
        let out = warp(&img, &FlowField::zeros(img.height(), img.width())).unwrap();
        prop_assert_eq!(out, img);
    }

    #[test]
    fn sampling_is_linear_in_the_image(
        a in prop::collection::vec(0.0f32..1.0, 30),
        b in prop::collection::vec(0.0f32..1.0, 30),
        s in -2.0f32..2.0, t in -2.0f32..2.0,
        x in -1.0f64..7.0, y in -1.0f64..6.0,
    ) {
        let ia = Image::new(5, 6, 1, a.clone()).unwrap();
        let ib = Image::new(5, 6, 1, b.clone()).unwrap();
        let mix = Image::new(5, 6, 1, a.iter().zip(&b).map(|(p, q)| s * p + t * q).collect()).unwrap();
        let pa = bilinear_sample(&ia, &[(x, y)], OutOfBounds::Border).unwrap()[0];
        let pb = bilinear_sample(&ib, &[(x, y)], OutOfBounds::Border).unwrap()[0];
        let pm = bilinear_sample(&mix, &[(x, y)], OutOfBounds::Border).unwrap()[0];
        prop_assert!((pm - (s * pa + t * pb)).abs() < 1e-6);
    }

    #[test]
    fn flow_file_round_trip_is_bit_exact(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let f = FlowField::from_fn(h, w, |x, y| {
            let v = (seed.wrapping_mul(31).wrapping_add((y * w + x) as u64) % 1000) as f32;
            (v * 0.37 - 100.0, -v / 7.0)
        }).unwrap();
        prop_assert_eq!(FlowField::from_bytes(&f.to_bytes()).unwrap(), f);
    }

    #[test]
    fn resize_round_trip_on_constant_flow(dx in -20.0f32..20.0, dy in -20.0f32..20.0, k in 1usize..5) {
        let f = FlowField::constant(6, 5, dx, dy);
        let up = resize_flow(&f, 6 * k, 5 * k).unwrap();
        let back = resize_flow(&up, 6, 5).unwrap();
        for p in back.data().chunks_exact(2) {
            prop_assert!((p[0] - dx).abs() <= 1e-5 * dx.abs().max(1.0));
            prop_assert!((p[1] - dy).abs() <= 1e-5 * dy.abs().max(1.0));
        }
    }
}

#[test]
fn ramp_shifted_by_one() {
    let img = Image::from_fn(6, 9, 1, |x, _, _| x as f32).unwrap();
    let out = warp(&img, &FlowField::constant(6, 9, 1.0, 0.0)).unwrap();
    for y in 0..6 {
        for x in 0..8 {
            assert_eq!(out.get(x, y, 0), (x + 1) as f32);
        }
    }
}

#[test]
fn composition_against_sequential_warps_on_synthetic_flows() {
    let n = 128;
    let params = SynthParams::scaled(n);
    let f1 = random_flow(&params, 11).unwrap();
    let f2 = random_flow(&params, 12).unwrap();
    let img = bandlimited(n);
    let sequential = warp(&warp(&img, &f2).unwrap(), &f1).unwrap();
    let composed = warp(&img, &compose_flows(&f1, &f2).unwrap()).unwrap();
    let err = composed.mean_abs_diff(&sequential, None).unwrap();
    assert!(err < 2.0 / 255.0, "mean abs diff {err}");
}

#[test]
fn upsampled_ramp_matches_closed_form() {
    let f = FlowField::from_fn(8, 8, |x, y| (0.5 * x as f32 + 1.0, -0.25 * y as f32)).unwrap();
    let up = resize_flow(&f, 32, 32).unwrap();
    for y in 4..28 {
        for x in 4..28 {
            // source position of an output pixel under center alignment
            let sx = (x as f64 + 0.5) / 4.0 - 0.5;
            let sy = (y as f64 + 0.5) / 4.0 - 0.5;
            let (dx, dy) = up.get(x, y);
            assert!((dx as f64 - 4.0 * (0.5 * sx + 1.0)).abs() < 1e-5);
            assert!((dy as f64 - 4.0 * (-0.25 * sy)).abs() < 1e-5);
        }
    }
}

#[test]
fn mean_filter_preserves_interior_mean() {
    let (h, w, k) = (40, 40, 5);
    let plane: Vec<f64> = (0..h * w).map(|i| ((i * 7919) % 101) as f64 / 100.0).collect();
    let out = mean_filter_plane(&plane, h, w, k).unwrap();
    // each interior output is the window mean; compare against direct sums
    let r = k / 2;
    for y in r..h - r {
        for x in r..w - r {
            let mut s = 0.0;
            for yy in y - r..=y + r {
                for xx in x - r..=x + r {
                    s += plane[yy * w + xx];
                }
            }
            assert!((out[y * w + x] - s / (k * k) as f64).abs() < 1e-12);
        }
    }
    let m = 2 * r;
    let interior_mean = |p: &[f64]| {
        let mut s = 0.0;
        let mut n = 0;
        for y in m..h - m {
            for x in m..w - m {
                s += p[y * w + x];
                n += 1;
            }
        }
        s / n as f64
    };
    let constant: Vec<f64> = vec![0.3; h * w];
    assert!((interior_mean(&mean_filter_plane(&constant, h, w, k).unwrap()) - 0.3).abs() < 1e-6);
}

#[test]
fn sobel_is_zero_only_for_constant_images() {
    let constant = Image::filled(7, 7, 1, 100.0 / 255.0).unwrap();
    let g = sobel_gradients(&constant);
    assert!(g.data().iter().all(|&v| v == 0.0));
    let mut bumped = constant.clone();
    bumped.set(3, 3, 0, 101.0 / 255.0);
    let g = sobel_gradients(&bumped);
    let (h, w) = g.dims();
    let interior_nonzero = (1..h - 1).any(|y| (1..w - 1).any(|x| g.get(x, y) != (0.0, 0.0)));
    assert!(interior_nonzero);
}

#[test]
fn flow_files_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.flo");
    let f = FlowField::from_fn(2, 2, |x, y| (x as f32 - 0.5, y as f32 * 3.25)).unwrap();
    write_flow(&f, &path).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, FLOW_HEADER_LEN + 2 * 2 * 2 * 4);
    assert_eq!(read_flow(&path).unwrap(), f);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    let err = read_flow(&path).unwrap_err().to_string();
    assert!(err.contains("offset 0"), "{err}");
}
