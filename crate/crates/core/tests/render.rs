use nailtrace::postprocess::NailInstance;
use nailtrace::render::{linear_to_srgb, render_overlay, srgb_to_linear, RenderParams};
use proptest::prelude::*;

fn blob(cx: u32, cy: u32, rx: u32, ry: u32, orientation: (f64, f64)) -> NailInstance {
    let mut px = Vec::new();
    for y in cy - ry..=cy + ry {
        for x in cx - rx..=cx + rx {
            let (dx, dy) = (x as f64 - cx as f64, y as f64 - cy as f64);
            if (dx / rx as f64).powi(2) + (dy / ry as f64).powi(2) <= 1.0 {
                px.push((x, y));
            }
        }
    }
    NailInstance::from_pixels(0, 1, &px, orientation, 0.9, false)
}

fn noise_image(w: usize, h: usize, seed: u64) -> Vec<u8> {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    (0..w * h * 3)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 24) as u8
        })
        .collect()
}

/// Rotates an interleaved image 90 degrees clockwise: (x, y) -> (h-1-y, x).
fn rotate(img: &[u8], w: usize, h: usize, ch: usize) -> Vec<u8> {
    let mut out = vec![0u8; img.len()];
    for y in 0..h {
        for x in 0..w {
            let (nx, ny) = (h - 1 - y, x);
            let (src, dst) = ((y * w + x) * ch, (ny * h + nx) * ch);
            out[dst..dst + ch].copy_from_slice(&img[src..src + ch]);
        }
    }
    out
}

fn rotate_instance(inst: &NailInstance, h: usize) -> NailInstance {
    let px: Vec<(u32, u32)> = inst.pixels().iter().map(|&(x, y)| (h as u32 - 1 - y, x)).collect();
    let (ox, oy) = inst.orientation;
    NailInstance::from_pixels(inst.id, inst.class_label, &px, (-oy, ox), inst.mean_score, inst.degenerate)
}

#[test]
fn flat_fill_at_full_opacity() {
    let (w, h) = (24, 24);
    let img = noise_image(w, h, 1);
    let inst = blob(12, 12, 4, 6, (0.0, -1.0));
    let params = RenderParams {
        opacity: 1.0,
        gradient_strength: 0.0,
        edge_feather_px: 0.0,
        stretch_px: 0,
        color: [10, 200, 90],
        ..RenderParams::default()
    };
    let out = render_overlay(&img, w, h, std::slice::from_ref(&inst), &params).unwrap();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let expect = if inst.contains(x as u32, y as u32) {
                [10, 200, 90]
            } else {
                [img[3 * p], img[3 * p + 1], img[3 * p + 2]]
            };
            assert_eq!(&out.composited[3 * p..3 * p + 3], &expect);
        }
    }
}

#[test]
fn single_pixel_matches_scalar_compositing() {
    let inst = NailInstance::from_pixels(0, 1, &[(1, 1)], (0.0, -1.0), 1.0, false);
    let img = vec![0u8; 3 * 3 * 3];
    let params = RenderParams {
        opacity: 0.5,
        gradient_strength: 0.0,
        edge_feather_px: 0.0,
        stretch_px: 0,
        color: [255, 0, 0],
        ..RenderParams::default()
    };
    let out = render_overlay(&img, 3, 3, &[inst], &params).unwrap();
    let r = linear_to_srgb(0.5 * srgb_to_linear(255));
    assert_eq!(&out.composited[12..15], &[r, 0, 0]);
    assert_eq!(&out.overlay[16..20], &[255, 0, 0, 128]);
    assert_eq!(out.overlay[3], 0);
}

#[test]
fn per_pixel_source_over_oracle() {
    let (w, h) = (32, 28);
    let img = noise_image(w, h, 7);
    let inst = blob(15, 13, 5, 7, (0.6, -0.8));
    let params = RenderParams {
        opacity: 0.7,
        gradient_strength: 0.0,
        edge_feather_px: 0.0,
        stretch_px: 3,
        ..RenderParams::default()
    };
    let out = render_overlay(&img, w, h, std::slice::from_ref(&inst), &params).unwrap();
    let stretched = nailtrace::postprocess::stretch_mask(&inst, 3, w, h);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            for c in 0..3 {
                let expect = if stretched.contains(x as u32, y as u32) {
                    let src = srgb_to_linear(params.color[c]);
                    let dst = srgb_to_linear(img[3 * p + c]);
                    linear_to_srgb(0.7 * src + 0.3 * dst)
                } else {
                    img[3 * p + c]
                };
                assert_eq!(out.composited[3 * p + c], expect, "pixel ({x}, {y}) channel {c}");
            }
        }
    }
}

#[test]
fn gloss_band_brightens_near_its_position() {
    let (w, h) = (20, 40);
    let img = vec![0u8; w * h * 3];
    let inst = blob(10, 20, 4, 12, (0.0, -1.0));
    let params = RenderParams {
        opacity: 1.0,
        gradient_strength: 0.5,
        gloss_band_position: 0.5,
        edge_feather_px: 0.0,
        stretch_px: 0,
        color: [120, 120, 120],
        ..RenderParams::default()
    };
    let out = render_overlay(&img, w, h, &[inst], &params).unwrap();
    let at = |y: usize| out.composited[3 * (y * w + 10)];
    assert!(at(20) > at(10));
    assert!(at(20) > at(30));
}

#[test]
fn idempotent_at_full_opacity_without_feather() {
    let (w, h) = (30, 30);
    let img = noise_image(w, h, 3);
    let inst = blob(14, 15, 5, 8, (0.0, -1.0));
    let params = RenderParams {
        opacity: 1.0,
        edge_feather_px: 0.0,
        ..RenderParams::default()
    };
    let once = render_overlay(&img, w, h, std::slice::from_ref(&inst), &params).unwrap();
    let twice = render_overlay(&once.composited, w, h, &[inst], &params).unwrap();
    assert_eq!(once.composited, twice.composited);
}

#[test]
fn image_size_mismatch_is_rejected() {
    let inst = blob(5, 5, 2, 2, (0.0, -1.0));
    assert!(render_overlay(&[0u8; 10], 4, 4, &[inst], &RenderParams::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn zero_opacity_is_identity(seed in any::<u64>(), cx in 8u32..24, cy in 8u32..24, a in 0.0f64..6.3) {
        let (w, h) = (32, 32);
        let img = noise_image(w, h, seed);
        let inst = blob(cx, cy, 4, 6, (a.cos(), a.sin()));
        let params = RenderParams { opacity: 0.0, ..RenderParams::default() };
        let out = render_overlay(&img, w, h, &[inst], &params).unwrap();
        prop_assert_eq!(out.composited, img);
        prop_assert!(out.overlay.iter().all(|&v| v == 0));
    }

    #[test]
    fn rotation_equivariance(seed in any::<u64>(), cx in 8u32..22, cy in 8u32..22, dir in 0usize..8, feather in prop::sample::select(vec![0.0, 1.5])) {
        let (w, h) = (30, 30);
        let img = noise_image(w, h, seed);
        let a = dir as f64 * std::f64::consts::FRAC_PI_4;
        let inst = blob(cx, cy, 4, 6, (a.cos(), a.sin()));
        let params = RenderParams { edge_feather_px: feather, ..RenderParams::default() };
        let out = render_overlay(&img, w, h, std::slice::from_ref(&inst), &params).unwrap();
        let rot = render_overlay(&rotate(&img, w, h, 3), h, w, &[rotate_instance(&inst, h)], &params).unwrap();
        let expect = rotate(&out.composited, w, h, 3);
        let worst = expect.iter().zip(&rot.composited).map(|(&a, &b)| (a as i32 - b as i32).abs()).max().unwrap();
        prop_assert!(worst <= 1, "max channel difference {}", worst);
    }
}
