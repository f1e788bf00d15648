//! Image-side preprocessing: patchification, patch mask planning, and
//! augmentation.

use crate::data::ImageSample;
use crate::error::Error;
use crate::text::sample_without_replacement;
use crate::Result;
use rand::Rng;

/// Flattened image patches: `n` rows of `P²·C` pixels each, patches in
/// row-major grid order, each patch row-major channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    pub data: Vec<f64>,
    pub n: usize,
    pub patch_len: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch: usize,
    pub channels: usize,
}

/// Partition of patch indices into masked and unmasked sets, both sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMaskPlan {
    pub masked: Vec<usize>,
    pub unmasked: Vec<usize>,
    pub ratio: f64,
}

impl PatchMaskPlan {
    /// Nothing masked: the full-image encoding used in fine-tuning.
    pub fn empty(n: usize) -> Self {
        PatchMaskPlan {
            masked: Vec::new(),
            unmasked: (0..n).collect(),
            ratio: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.masked.len() + self.unmasked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draw a uniformly random plan masking `round(ratio·n)` patches.
pub fn sample_patch_mask(n: usize, ratio: f64, rng: &mut impl Rng) -> PatchMaskPlan {
    assert!((0.0..=1.0).contains(&ratio), "patch mask ratio {ratio} out of [0,1]");
    let k = (ratio * n as f64).round() as usize;
    let masked = sample_without_replacement(n, k, rng);
    let mut is_masked = vec![false; n];
    for &i in &masked {
        is_masked[i] = true;
    }
    let unmasked = (0..n).filter(|&i| !is_masked[i]).collect();
    PatchMaskPlan {
        masked,
        unmasked,
        ratio,
    }
}

/// Reshape an image into non-overlapping `P×P` patches.
pub fn patchify(image: &ImageSample, p: usize) -> Result<PatchSequence> {
    if p == 0 || image.h % p != 0 || image.w % p != 0 {
        return Err(Error::Config(format!(
            "patch size {p} does not divide image {}x{}",
            image.h, image.w
        )));
    }
    let (grid_h, grid_w, c) = (image.h / p, image.w / p, image.c);
    let n = grid_h * grid_w;
    let patch_len = p * p * c;
    let mut data = Vec::with_capacity(n * patch_len);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            for py in 0..p {
                let y = gy * p + py;
                let row_start = (y * image.w + gx * p) * c;
                data.extend_from_slice(&image.pixels[row_start..row_start + p * c]);
            }
        }
    }
    Ok(PatchSequence {
        data,
        n,
        patch_len,
        grid_h,
        grid_w,
        patch: p,
        channels: c,
    })
}

/// Exact inverse of [`patchify`]. Values are passed through unchanged;
/// clamping happens only when files are written.
pub fn unpatchify(patches: &PatchSequence) -> Result<ImageSample> {
    let expected = patches.grid_h * patches.grid_w;
    if patches.n != expected {
        return Err(Error::Config(format!(
            "patch count {} does not match grid {}x{}",
            patches.n, patches.grid_h, patches.grid_w
        )));
    }
    if patches.data.len() != patches.n * patches.patch_len {
        return Err(Error::Config(format!(
            "patch buffer {} does not match {}x{}",
            patches.data.len(),
            patches.n,
            patches.patch_len
        )));
    }
    let p = patches.patch;
    let c = patches.channels;
    let (h, w) = (patches.grid_h * p, patches.grid_w * p);
    let mut pixels = vec![0.0; h * w * c];
    for gy in 0..patches.grid_h {
        for gx in 0..patches.grid_w {
            let patch = &patches.data
                [(gy * patches.grid_w + gx) * patches.patch_len..][..patches.patch_len];
            for py in 0..p {
                let y = gy * p + py;
                let row_start = (y * w + gx * p) * c;
                pixels[row_start..row_start + p * c]
                    .copy_from_slice(&patch[py * p * c..(py + 1) * p * c]);
            }
        }
    }
    Ok(ImageSample {
        pixels,
        h,
        w,
        c,
        label: None,
        sample_id: String::new(),
    })
}

/// Bilinear sample with half-pixel-center convention and edge clamping.
fn bilinear(pixels: &[f64], h: usize, w: usize, c: usize, y: f64, x: f64, ch: usize) -> f64 {
    let clamp = |v: f64, hi: usize| v.max(0.0).min(hi as f64 - 1.0);
    let y = clamp(y, h);
    let x = clamp(x, w);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let at = |yy: usize, xx: usize| pixels[(yy * w + xx) * c + ch];
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

fn resize_bilinear(
    pixels: &[f64],
    src_h: usize,
    src_w: usize,
    c: usize,
    dst_h: usize,
    dst_w: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(dst_h * dst_w * c);
    let sy = src_h as f64 / dst_h as f64;
    let sx = src_w as f64 / dst_w as f64;
    for y in 0..dst_h {
        let src_y = (y as f64 + 0.5) * sy - 0.5;
        for x in 0..dst_w {
            let src_x = (x as f64 + 0.5) * sx - 0.5;
            for ch in 0..c {
                out.push(bilinear(pixels, src_h, src_w, c, src_y, src_x, ch));
            }
        }
    }
    out
}

/// Crop a random area fraction in `scale` at an aspect ratio log-uniform in
/// `aspect`, then resize back to the input size. Falls back to a full-image
/// center crop after 10 failed attempts.
pub fn random_resized_crop(
    image: &ImageSample,
    rng: &mut impl Rng,
    scale: (f64, f64),
    aspect: (f64, f64),
) -> ImageSample {
    assert!(image.h >= 2 && image.w >= 2, "image too small to crop");
    let area = (image.h * image.w) as f64;
    let mut crop = None;
    for _ in 0..10 {
        let target_area = area * rng.gen_range(scale.0..=scale.1);
        let log_ratio = rng.gen_range(aspect.0.ln()..=aspect.1.ln());
        let ratio = log_ratio.exp();
        let cw = (target_area * ratio).sqrt().round() as usize;
        let ch = (target_area / ratio).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= image.w && ch <= image.h {
            let y0 = rng.gen_range(0..=image.h - ch);
            let x0 = rng.gen_range(0..=image.w - cw);
            crop = Some((y0, x0, ch, cw));
            break;
        }
    }
    let (y0, x0, ch, cw) = crop.unwrap_or((0, 0, image.h, image.w));

    let mut cropped = Vec::with_capacity(ch * cw * image.c);
    for y in y0..y0 + ch {
        let start = (y * image.w + x0) * image.c;
        cropped.extend_from_slice(&image.pixels[start..start + cw * image.c]);
    }
    let pixels = if (ch, cw) == (image.h, image.w) {
        cropped
    } else {
        resize_bilinear(&cropped, ch, cw, image.c, image.h, image.w)
    };
    ImageSample {
        pixels,
        h: image.h,
        w: image.w,
        c: image.c,
        label: image.label.clone(),
        sample_id: image.sample_id.clone(),
    }
}

/// Rotate by a uniform angle in `[-max_degrees, +max_degrees]` about the
/// image center, bilinear with edge clamping.
pub fn rotate_small(image: &ImageSample, rng: &mut impl Rng, max_degrees: f64) -> ImageSample {
    let angle = rng.gen_range(-max_degrees..=max_degrees).to_radians();
    let (sin, cos) = angle.sin_cos();
    let cy = image.h as f64 / 2.0 - 0.5;
    let cx = image.w as f64 / 2.0 - 0.5;
    let mut pixels = Vec::with_capacity(image.numel());
    for y in 0..image.h {
        for x in 0..image.w {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let src_y = cy + dy * cos - dx * sin;
            let src_x = cx + dy * sin + dx * cos;
            for ch in 0..image.c {
                pixels.push(bilinear(
                    &image.pixels,
                    image.h,
                    image.w,
                    image.c,
                    src_y,
                    src_x,
                    ch,
                ));
            }
        }
    }
    ImageSample {
        pixels,
        h: image.h,
        w: image.w,
        c: image.c,
        label: image.label.clone(),
        sample_id: image.sample_id.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, tag};

    fn image(h: usize, w: usize, pixels: Vec<f64>) -> ImageSample {
        ImageSample {
            pixels,
            h,
            w,
            c: 1,
            label: None,
            sample_id: String::new(),
        }
    }

    #[test]
    fn patchify_orders_single_pixels() {
        let img = image(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let patches = patchify(&img, 1).unwrap();
        assert_eq!(patches.n, 4);
        // Top-left, top-right, bottom-left, bottom-right.
        assert_eq!(patches.data, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn toy_geometry_gives_256_patches() {
        let img = image(32, 128, vec![0.0; 32 * 128]);
        let patches = patchify(&img, 4).unwrap();
        assert_eq!(patches.n, 256);
        assert_eq!(patches.patch_len, 16);
        assert_eq!((patches.grid_h, patches.grid_w), (8, 32));
    }

    #[test]
    fn patch_rows_are_row_major_within_patch() {
        // 2x4 image, P=2: patch 0 is the left 2x2 block in row-major order.
        let img = image(2, 4, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let patches = patchify(&img, 2).unwrap();
        assert_eq!(&patches.data[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&patches.data[4..], &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn non_divisible_patch_size_rejected() {
        let img = image(3, 4, vec![0.0; 12]);
        assert!(patchify(&img, 2).is_err());
    }

    #[test]
    fn mask_plan_counts() {
        let mut r = rng::stream(5, &[tag::SAMPLE, 0]);
        let plan = sample_patch_mask(16, 0.75, &mut r);
        assert_eq!(plan.masked.len(), 12);
        assert_eq!(plan.unmasked.len(), 4);

        let plan = sample_patch_mask(16, 0.0, &mut r);
        assert!(plan.masked.is_empty());
        assert_eq!(plan.unmasked.len(), 16);
    }

    #[test]
    fn mask_frequency_is_uniform() {
        // Monte Carlo oracle: at ratio 0.5 every index appears in the
        // masked set with frequency 0.5 ± 0.02 over 10,000 draws.
        let mut r = rng::stream(123, &[tag::SAMPLE]);
        let n = 8;
        let draws = 10_000;
        let mut counts = vec![0usize; n];
        for _ in 0..draws {
            let plan = sample_patch_mask(n, 0.5, &mut r);
            for &i in &plan.masked {
                counts[i] += 1;
            }
        }
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / draws as f64;
            assert!(
                (freq - 0.5).abs() <= 0.02,
                "index {i} masked with frequency {freq}"
            );
        }
    }

    #[test]
    fn identity_crop_returns_input() {
        let mut r = rng::stream(5, &[tag::SAMPLE, 7]);
        let pixels: Vec<f64> = (0..32 * 128).map(|i| (i % 97) as f64 / 96.0).collect();
        let img = image(32, 128, pixels.clone());
        let aspect = 128.0 / 32.0;
        let out = random_resized_crop(&img, &mut r, (1.0, 1.0), (aspect, aspect));
        for (a, b) in out.pixels.iter().zip(&pixels) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn crop_preserves_shape_and_range() {
        let mut r = rng::stream(6, &[tag::SAMPLE, 8]);
        let pixels: Vec<f64> = (0..32 * 128).map(|i| (i % 61) as f64 / 60.0).collect();
        let img = image(32, 128, pixels);
        for _ in 0..50 {
            let out = random_resized_crop(&img, &mut r, (0.85, 1.0), (3.5, 5.0));
            assert_eq!((out.h, out.w, out.c), (32, 128, 1));
            assert!(out.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn constant_image_survives_crop_exactly() {
        let mut r = rng::stream(7, &[tag::SAMPLE, 9]);
        let img = image(32, 128, vec![0.37; 32 * 128]);
        let out = random_resized_crop(&img, &mut r, (0.85, 1.0), (3.5, 5.0));
        assert!(out.pixels.iter().all(|&v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn rotation_preserves_shape_and_range() {
        let mut r = rng::stream(8, &[tag::SAMPLE, 10]);
        let pixels: Vec<f64> = (0..32 * 128).map(|i| (i % 13) as f64 / 12.0).collect();
        let img = image(32, 128, pixels);
        let out = rotate_small(&img, &mut r, 10.0);
        assert_eq!((out.h, out.w, out.c), (32, 128, 1));
        assert!(out.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn patchify_unpatchify_round_trip(
                grid_h in 1usize..=4,
                grid_w in 1usize..=4,
                p in proptest::sample::select(vec![1usize, 2, 4]),
                seed in 0u64..500,
            ) {
                let (h, w) = (grid_h * p, grid_w * p);
                let mut r = rng::stream(seed, &[tag::SAMPLE]);
                let pixels: Vec<f64> = (0..h * w).map(|_| r.gen_range(0.0..1.0)).collect();
                let img = image(h, w, pixels.clone());
                let patches = patchify(&img, p).unwrap();
                let back = unpatchify(&patches).unwrap();
                prop_assert_eq!(back.pixels, pixels);
            }

            #[test]
            fn mask_plan_is_partition_with_exact_count(
                n in 1usize..=64,
                ratio in 0.0f64..=1.0,
                seed in 0u64..500,
            ) {
                let mut r = rng::stream(seed, &[tag::SAMPLE, 1]);
                let plan = sample_patch_mask(n, ratio, &mut r);
                prop_assert_eq!(plan.masked.len(), (ratio * n as f64).round() as usize);
                let mut all: Vec<usize> =
                    plan.masked.iter().chain(&plan.unmasked).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            }
        }
    }
}
