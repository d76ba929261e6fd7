//! Plug-and-play batch augmentation.
//!
//! Each training batch is doubled: sample `i` is blended with a transformed
//! copy of its reversed-batch partner under a patch-aligned binary mask,
//! `I_aug = I + lambda * (T(partner) - I) (.) Mask`, and keeps its own label.
//! Both the mixing ratio `lambda` and the mask density `p` ramp up linearly
//! over training. Augmentation only ever runs on training batches.
//!
//! The blend is evaluated as `(1 - lambda*m) * I + lambda*m * T`, which is
//! algebraically identical and bit-exact at the endpoints: `lambda = 0` or
//! `p = 0` reproduce the original pixels, `lambda = 1, p = 1` reproduce the
//! transformed partner pixels.

use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::bilinear_resize;
use crate::error::{Error, Result};

/// Augmentation settings. `mask_patch_size = None` aligns mask cells to the
/// model's patch size at training time.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Mask cell edge in pixels; must divide the image size.
    pub mask_patch_size: Option<usize>,
    /// Endpoint of the linear mixing-ratio ramp.
    pub lambda_max: f64,
    /// Endpoint of the linear mask-density ramp.
    pub p_max: f64,
    pub transforms: TransformSpec,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            mask_patch_size: None,
            lambda_max: 0.5,
            p_max: 0.5,
            transforms: TransformSpec::standard(),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_max", self.lambda_max), ("p_max", self.p_max)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        self.transforms.validate()
    }
}

/// Base image transforms applied to the partner before mixing.
/// An all-disabled spec is the identity.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformSpec {
    /// Random crop of scale `[min_scale, 1]`, resized back bilinearly.
    pub crop_min_scale: Option<f64>,
    /// Random rotation by a multiple of 90 degrees (exact pixel permutation).
    pub rotate90: bool,
    /// Additional small-angle rotation, degrees.
    pub small_angle_deg: Option<f64>,
    /// Brightness shift range (+/-).
    pub brightness: Option<f64>,
    /// Contrast factor range (1 +/- value) around the image mean.
    pub contrast: Option<f64>,
}

impl TransformSpec {
    /// Crop + 90-degree rotations + mild color jitter.
    pub fn standard() -> Self {
        Self {
            crop_min_scale: Some(0.8),
            rotate90: true,
            small_angle_deg: None,
            brightness: Some(0.2),
            contrast: Some(0.2),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.crop_min_scale.is_none()
            && !self.rotate90
            && self.small_angle_deg.is_none()
            && self.brightness.is_none()
            && self.contrast.is_none()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.crop_min_scale {
            if !(0.0 < s && s <= 1.0) {
                return Err(Error::config(format!("crop_min_scale = {s} outside (0, 1]")));
            }
        }
        for (name, v) in [("brightness", self.brightness), ("contrast", self.contrast)] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::config(format!("{name} = {v} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }
}

/// A batch doubled by augmentation: the first B entries are the originals
/// and entry `B + i` carries `labels[i]`.
pub struct AugmentedBatch {
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
}

/// Patch-aligned random binary mask: the grid of `patch_size` cells is
/// filled cell-by-cell with ones (probability `p`) or zeros.
pub fn make_mask(
    height: usize,
    width: usize,
    p: f64,
    patch_size: usize,
    rng: &mut impl Rng,
) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config(format!("mask density {p} outside [0, 1]")));
    }
    if patch_size == 0 || height % patch_size != 0 || width % patch_size != 0 {
        return Err(Error::config(format!(
            "mask patch size {patch_size} must divide {height}x{width}"
        )));
    }
    let mut mask = Array2::<f64>::zeros((height, width));
    for cy in 0..height / patch_size {
        for cx in 0..width / patch_size {
            if rng.gen_range(0.0..1.0) < p {
                mask.slice_mut(ndarray::s![
                    cy * patch_size..(cy + 1) * patch_size,
                    cx * patch_size..(cx + 1) * patch_size
                ])
                .fill(1.0);
            }
        }
    }
    Ok(mask)
}

/// Rotate `[3, H, W]` by `k` quarter turns counterclockwise (exact index
/// permutation, no interpolation).
pub fn rot90k(image: &Array3<f64>, k: usize) -> Array3<f64> {
    let (c, h, w) = image.dim();
    match k % 4 {
        0 => image.clone(),
        1 => Array3::from_shape_fn((c, w, h), |(ci, y, x)| image[[ci, x, w - 1 - y]]),
        2 => Array3::from_shape_fn((c, h, w), |(ci, y, x)| image[[ci, h - 1 - y, w - 1 - x]]),
        _ => Array3::from_shape_fn((c, w, h), |(ci, y, x)| image[[ci, h - 1 - x, y]]),
    }
}

fn rotate_small(image: &Array3<f64>, degrees: f64) -> Array3<f64> {
    let (c, h, w) = image.dim();
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    Array3::from_shape_fn((c, h, w), |(ci, y, x)| {
        let dy = y as f64 - cy;
        let dx = x as f64 - cx;
        let sy = (cy + cos * dy + sin * dx).clamp(0.0, h as f64 - 1.0);
        let sx = (cx - sin * dy + cos * dx).clamp(0.0, w as f64 - 1.0);
        let y0 = sy.floor() as usize;
        let x0 = sx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let fy = sy - y0 as f64;
        let fx = sx - x0 as f64;
        let top = image[[ci, y0, x0]] * (1.0 - fx) + image[[ci, y0, x1]] * fx;
        let bot = image[[ci, y1, x0]] * (1.0 - fx) + image[[ci, y1, x1]] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Apply the configured random transforms to one `[3, H, W]` image.
/// With an all-disabled spec the input is returned bit-identical.
pub fn base_transform(image: &Array3<f64>, spec: &TransformSpec, rng: &mut impl Rng) -> Array3<f64> {
    if spec.is_identity() {
        return image.clone();
    }
    let (_, h, w) = image.dim();
    let mut out = image.clone();

    if let Some(min_scale) = spec.crop_min_scale {
        let scale = rng.gen_range(min_scale..=1.0);
        let ch = ((h as f64 * scale).round() as usize).clamp(1, h);
        let cw = ((w as f64 * scale).round() as usize).clamp(1, w);
        let oy = rng.gen_range(0..=h - ch);
        let ox = rng.gen_range(0..=w - cw);
        if ch != h || cw != w {
            let crop = out.slice(ndarray::s![.., oy..oy + ch, ox..ox + cw]).to_owned();
            out = bilinear_resize(&crop, h, w);
        }
    }
    if spec.rotate90 {
        let k = rng.gen_range(0..4usize);
        out = rot90k(&out, k);
    }
    if let Some(max_deg) = spec.small_angle_deg {
        let deg = rng.gen_range(-max_deg..=max_deg);
        out = rotate_small(&out, deg);
    }
    if let Some(b) = spec.brightness {
        let delta = rng.gen_range(-b..=b);
        out.mapv_inplace(|x| (x + delta).clamp(0.0, 1.0));
    }
    if let Some(cmax) = spec.contrast {
        let factor = rng.gen_range(1.0 - cmax..=1.0 + cmax);
        let mean = out.mean().unwrap_or(0.5);
        out.mapv_inplace(|x| (mean + (x - mean) * factor).clamp(0.0, 1.0));
    }
    out
}

/// Linear ramps for the mixing ratio and mask density:
/// `(lambda_max, p_max) * epoch / total_epochs`.
pub fn schedule_at(epoch: usize, total_epochs: usize, cfg: &AugmentConfig) -> (f64, f64) {
    if total_epochs == 0 {
        return (0.0, 0.0);
    }
    let t = (epoch as f64 / total_epochs as f64).clamp(0.0, 1.0);
    (cfg.lambda_max * t, cfg.p_max * t)
}

/// Double a batch by masked mixing. Pixel values must already lie in [0, 1];
/// outputs stay in range because each pixel is a convex combination.
///
/// Batches smaller than 2 are returned unchanged with a logged warning,
/// since partner pairing needs at least two samples.
pub fn mix_augment(
    images: &Array4<f64>,
    labels: &[usize],
    lambda: f64,
    p: f64,
    mask_patch_size: usize,
    spec: &TransformSpec,
    rng: &mut impl Rng,
) -> Result<AugmentedBatch> {
    let (b, c, h, w) = images.dim();
    if labels.len() != b {
        return Err(Error::shape(format!("{} labels for batch {b}", labels.len())));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(format!("lambda {lambda} outside [0, 1]")));
    }
    if b < 2 {
        log::warn!("batch of {b} is too small to augment; passing through unchanged");
        return Ok(AugmentedBatch { images: images.clone(), labels: labels.to_vec() });
    }

    let mut out = Array4::<f64>::zeros((2 * b, c, h, w));
    out.slice_mut(ndarray::s![..b, .., .., ..]).assign(images);
    let mut out_labels = labels.to_vec();

    for i in 0..b {
        let partner = b - 1 - i;
        let partner_img = images.index_axis(ndarray::Axis(0), partner).to_owned();
        let transformed = base_transform(&partner_img, spec, rng);
        let mask = make_mask(h, w, p, mask_patch_size, rng)?;
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let m = lambda * mask[[y, x]];
                    out[[b + i, ci, y, x]] =
                        (1.0 - m) * images[[i, ci, y, x]] + m * transformed[[ci, y, x]];
                }
            }
        }
        out_labels.push(labels[i]);
    }
    Ok(AugmentedBatch { images: out, labels: out_labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_batch(b: usize, s: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((b, 3, s, s), |_| rng.gen_range(0.0..=1.0))
    }

    #[test]
    fn mask_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let zero = make_mask(32, 32, 0.0, 16, &mut rng).unwrap();
        assert!(zero.iter().all(|&m| m == 0.0));
        let ones = make_mask(32, 32, 1.0, 16, &mut rng).unwrap();
        assert!(ones.iter().all(|&m| m == 1.0));
        assert!(make_mask(32, 32, 1.5, 16, &mut rng).is_err());
        assert!(make_mask(32, 32, 0.5, 5, &mut rng).is_err());
    }

    #[test]
    fn mask_cells_are_constant_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mask = make_mask(32, 32, 0.5, 16, &mut rng).unwrap();
        for cy in 0..2 {
            for cx in 0..2 {
                let cell = mask.slice(ndarray::s![cy * 16..(cy + 1) * 16, cx * 16..(cx + 1) * 16]);
                let first = cell[[0, 0]];
                assert!(cell.iter().all(|&m| m == first));
                assert!(first == 0.0 || first == 1.0);
            }
        }
    }

    #[test]
    fn mask_density_matches_bernoulli_mean() {
        // Monte-Carlo estimate: 10000 trials of a 2x2 cell grid at p = 0.5
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut on = 0usize;
        let trials = 10_000;
        for _ in 0..trials {
            let mask = make_mask(32, 32, 0.5, 16, &mut rng).unwrap();
            on += mask.iter().filter(|&&m| m == 1.0).count() / (16 * 16);
        }
        let frac = on as f64 / (trials * 4) as f64;
        assert!((frac - 0.5).abs() < 0.02, "cell-on fraction {frac}");
    }

    #[test]
    fn empty_transform_spec_is_identity() {
        let img = rand_batch(1, 16, 4).index_axis(ndarray::Axis(0), 0).to_owned();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = base_transform(&img, &TransformSpec::default(), &mut rng);
        assert_eq!(img, out);
    }

    #[test]
    fn rot90_is_exact_permutation() {
        let img = rand_batch(1, 8, 8).index_axis(ndarray::Axis(0), 0).to_owned();
        let r1 = rot90k(&img, 1);
        // counterclockwise: out(y, x) = in(x, w-1-y)
        assert_eq!(r1[[0, 0, 0]], img[[0, 0, 7]]);
        assert_eq!(r1[[2, 7, 0]], img[[2, 0, 0]]);
        // four turns come back exactly
        let r4 = rot90k(&rot90k(&rot90k(&r1, 1), 1), 1);
        assert_eq!(img, r4);
        // rotation preserves the multiset of pixels
        let mut a: Vec<u64> = img.iter().map(|v| v.to_bits()).collect();
        let mut b: Vec<u64> = r1.iter().map(|v| v.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn base_transform_is_deterministic_under_seed() {
        let img = rand_batch(1, 16, 7).index_axis(ndarray::Axis(0), 0).to_owned();
        let spec = TransformSpec::standard();
        let a = base_transform(&img, &spec, &mut ChaCha8Rng::seed_from_u64(11));
        let b = base_transform(&img, &spec, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
    }

    #[test]
    fn lambda_zero_reproduces_batch_bitwise() {
        let images = rand_batch(4, 16, 8);
        let labels = vec![0, 1, 2, 3];
        let spec = TransformSpec::standard();
        let out =
            mix_augment(&images, &labels, 0.0, 0.7, 4, &spec, &mut ChaCha8Rng::seed_from_u64(9))
                .unwrap();
        assert_eq!(out.images.dim().0, 8);
        for i in 0..4 {
            let orig = images.index_axis(ndarray::Axis(0), i);
            let aug = out.images.index_axis(ndarray::Axis(0), 4 + i);
            assert_eq!(orig, aug);
        }
    }

    #[test]
    fn p_zero_reproduces_batch_bitwise() {
        let images = rand_batch(4, 16, 10);
        let labels = vec![0, 1, 0, 1];
        let out = mix_augment(
            &images,
            &labels,
            0.9,
            0.0,
            4,
            &TransformSpec::standard(),
            &mut ChaCha8Rng::seed_from_u64(12),
        )
        .unwrap();
        for i in 0..4 {
            assert_eq!(
                images.index_axis(ndarray::Axis(0), i),
                out.images.index_axis(ndarray::Axis(0), 4 + i)
            );
        }
    }

    #[test]
    fn full_mix_reproduces_reversed_partner_bitwise() {
        let images = rand_batch(4, 16, 13);
        let labels = vec![0, 1, 2, 3];
        let out = mix_augment(
            &images,
            &labels,
            1.0,
            1.0,
            4,
            &TransformSpec::default(), // identity
            &mut ChaCha8Rng::seed_from_u64(14),
        )
        .unwrap();
        for i in 0..4 {
            assert_eq!(
                images.index_axis(ndarray::Axis(0), 3 - i),
                out.images.index_axis(ndarray::Axis(0), 4 + i)
            );
        }
    }

    #[test]
    fn labels_copied_and_range_preserved() {
        let images = rand_batch(6, 8, 15);
        let labels = vec![0, 0, 1, 1, 2, 2];
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for trial in 0..50 {
            let lambda = (trial as f64 / 50.0) * 0.9;
            let out =
                mix_augment(&images, &labels, lambda, 0.5, 4, &TransformSpec::standard(), &mut rng)
                    .unwrap();
            assert_eq!(&out.labels[..6], &labels[..]);
            assert_eq!(&out.labels[6..], &labels[..]);
            assert!(out.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn tiny_batch_passes_through_with_warning() {
        let images = rand_batch(1, 8, 17);
        let out = mix_augment(
            &images,
            &[5],
            0.5,
            0.5,
            4,
            &TransformSpec::default(),
            &mut ChaCha8Rng::seed_from_u64(18),
        )
        .unwrap();
        assert_eq!(out.images.dim().0, 1);
        assert_eq!(out.labels, vec![5]);
    }

    #[test]
    fn mix_is_deterministic_under_seed() {
        let images = rand_batch(4, 16, 19);
        let labels = vec![0, 1, 2, 3];
        let run = |seed| {
            mix_augment(
                &images,
                &labels,
                0.4,
                0.6,
                4,
                &TransformSpec::standard(),
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap()
            .images
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let cfg = AugmentConfig { lambda_max: 0.5, p_max: 0.8, ..AugmentConfig::default() };
        assert_eq!(schedule_at(0, 10, &cfg), (0.0, 0.0));
        assert_eq!(schedule_at(10, 10, &cfg), (0.5, 0.8));
        let (l, p) = schedule_at(5, 10, &cfg);
        assert!((l - 0.25).abs() < 1e-15);
        assert!((p - 0.4).abs() < 1e-15);
        // monotone
        let mut prev = (0.0, 0.0);
        for e in 0..=10 {
            let cur = schedule_at(e, 10, &cfg);
            assert!(cur.0 >= prev.0 && cur.1 >= prev.1);
            prev = cur;
        }
    }
}
