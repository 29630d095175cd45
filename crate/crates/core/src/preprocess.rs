//! Image tensors, resizing, normalization and seeded augmentation.
//!
//! Every resampling step uses bilinear interpolation with half-pixel
//! centres. Geometric augmentations read outside the frame through
//! mirror padding about the edge pixel centres (`d c b | a b c d | c b a`).

use std::path::{Path, PathBuf};

use ndarray::{Array3, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::GradeLabel;
use crate::seed::seeded_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueDomain {
    /// Decoded 8-bit intensities, `[0, 255]`.
    Raw0To255,
    /// After [`normalize`], `[0, 1]`.
    Unit0To1,
}

impl ValueDomain {
    pub fn max_value(self) -> f32 {
        match self {
            ValueDomain::Raw0To255 => 255.0,
            ValueDomain::Unit0To1 => 1.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("target dimensions must be at least 1x1, got {0}x{1}")]
    ZeroDimension(usize, usize),
    #[error("image is already normalized")]
    AlreadyNormalized,
    #[error("invalid augmentation policy: {0}")]
    InvalidPolicy(String),
    #[error("image must have 3 channels, found {0}")]
    ChannelCount(usize),
    #[error("failed to decode {path}: {message}")]
    Decode { path: PathBuf, message: String },
}

/// H×W×3 image in channels-last layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f32>,
    domain: ValueDomain,
}

impl ImageTensor {
    pub fn new(data: Array3<f32>, domain: ValueDomain) -> Result<Self, PreprocessError> {
        let (h, w, c) = data.dim();
        if c != 3 {
            return Err(PreprocessError::ChannelCount(c));
        }
        if h == 0 || w == 0 {
            return Err(PreprocessError::ZeroDimension(h, w));
        }
        Ok(ImageTensor { data, domain })
    }

    pub fn filled(height: usize, width: usize, value: f32, domain: ValueDomain) -> Self {
        ImageTensor { data: Array3::from_elem((height, width, 3), value), domain }
    }

    pub fn from_rgb8(image: &image::RgbImage) -> Self {
        let (w, h) = image.dimensions();
        let data = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            image.get_pixel(x as u32, y as u32)[c] as f32
        });
        ImageTensor { data, domain: ValueDomain::Raw0To255 }
    }

    /// Decode a PNG or JPEG file into the raw domain.
    pub fn load(path: &Path) -> Result<Self, PreprocessError> {
        let decoded = image::open(path)
            .map_err(|e| PreprocessError::Decode { path: path.to_path_buf(), message: e.to_string() })?;
        Ok(Self::from_rgb8(&decoded.to_rgb8()))
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn domain(&self) -> ValueDomain {
        self.domain
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    /// Copy converted to `domain` by the linear 255 scaling.
    pub fn to_domain(&self, domain: ValueDomain) -> ImageTensor {
        let data = match (self.domain, domain) {
            (a, b) if a == b => self.data.clone(),
            (ValueDomain::Raw0To255, ValueDomain::Unit0To1) => self.data.mapv(|v| v / 255.0),
            _ => self.data.mapv(|v| v * 255.0),
        };
        ImageTensor { data, domain }
    }

    fn with_data(&self, data: Array3<f32>) -> ImageTensor {
        ImageTensor { data, domain: self.domain }
    }

    fn clipped(mut self) -> ImageTensor {
        let hi = self.domain.max_value();
        self.data.mapv_inplace(|v| v.clamp(0.0, hi));
        self
    }
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    // exact when a == b, so constant regions survive resampling unchanged
    a + t * (b - a)
}

#[derive(Clone, Copy)]
enum Border {
    Clamp,
    Mirror,
}

fn fold_coordinate(x: f64, n: usize, border: Border) -> f64 {
    let max = (n - 1) as f64;
    match border {
        Border::Clamp => x.clamp(0.0, max),
        Border::Mirror => {
            if n == 1 {
                return 0.0;
            }
            let period = 2.0 * max;
            let r = x.rem_euclid(period);
            if r > max {
                period - r
            } else {
                r
            }
        }
    }
}

/// Bilinear sample of all three channels at continuous pixel coordinates.
fn sample(src: &Array3<f32>, y: f64, x: f64, border: Border) -> [f32; 3] {
    let (h, w, _) = src.dim();
    let y = fold_coordinate(y, h, border);
    let x = fold_coordinate(x, w, border);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let ty = (y - y0 as f64) as f32;
    let tx = (x - x0 as f64) as f32;
    let mut out = [0.0f32; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let top = lerp(src[[y0, x0, c]], src[[y0, x1, c]], tx);
        let bottom = lerp(src[[y1, x0, c]], src[[y1, x1, c]], tx);
        *o = lerp(top, bottom, ty);
    }
    out
}

/// Fill an `out_h × out_w` image by sampling `src` at `map(y, x)`.
fn resample<F>(src: &Array3<f32>, out_h: usize, out_w: usize, border: Border, map: F) -> Array3<f32>
where
    F: Fn(f64, f64) -> (f64, f64) + Sync,
{
    let mut out = Array3::<f32>::zeros((out_h, out_w, 3));
    Zip::indexed(out.lanes_mut(ndarray::Axis(2))).for_each(|(y, x), mut px| {
        let (sy, sx) = map(y as f64, x as f64);
        let v = sample(src, sy, sx, border);
        px[0] = v[0];
        px[1] = v[1];
        px[2] = v[2];
    });
    out
}

/// Bilinear resize with half-pixel centres.
pub fn resize(image: &ImageTensor, target_h: usize, target_w: usize) -> Result<ImageTensor, PreprocessError> {
    if target_h == 0 || target_w == 0 {
        return Err(PreprocessError::ZeroDimension(target_h, target_w));
    }
    if image.height() == target_h && image.width() == target_w {
        return Ok(image.clone());
    }
    let sy = image.height() as f64 / target_h as f64;
    let sx = image.width() as f64 / target_w as f64;
    let data = resample(&image.data, target_h, target_w, Border::Clamp, |y, x| {
        ((y + 0.5) * sy - 0.5, (x + 0.5) * sx - 0.5)
    });
    Ok(image.with_data(data))
}

/// Scale a raw image into `[0, 1]` by dividing by 255.
pub fn normalize(image: &ImageTensor) -> Result<ImageTensor, PreprocessError> {
    match image.domain {
        ValueDomain::Unit0To1 => Err(PreprocessError::AlreadyNormalized),
        ValueDomain::Raw0To255 => Ok(image.to_domain(ValueDomain::Unit0To1)),
    }
}

/// Mirror columns: column `j` moves to `W - 1 - j`.
pub fn flip_horizontal(image: &ImageTensor) -> ImageTensor {
    let mut data = image.data.clone();
    data.invert_axis(ndarray::Axis(1));
    image.with_data(data.as_standard_layout().into_owned())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    pub rotation_max_deg: f64,
    pub shear_max: f64,
    /// Lower bound on the crop box side as a fraction of the image side.
    pub crop_fraction: f64,
    pub hflip_probability: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy { rotation_max_deg: 15.0, shear_max: 0.1, crop_fraction: 0.9, hflip_probability: 0.5 }
    }
}

impl AugmentationPolicy {
    /// The policy that leaves every image untouched.
    pub fn identity() -> Self {
        AugmentationPolicy { rotation_max_deg: 0.0, shear_max: 0.0, crop_fraction: 1.0, hflip_probability: 0.0 }
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        let bad = |what: &str| Err(PreprocessError::InvalidPolicy(what.to_string()));
        if !(self.rotation_max_deg.is_finite() && self.rotation_max_deg >= 0.0) {
            return bad("rotation_max_deg must be finite and >= 0");
        }
        if !(self.shear_max.is_finite() && self.shear_max >= 0.0) {
            return bad("shear_max must be finite and >= 0");
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return bad("crop_fraction must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.hflip_probability) {
            return bad("hflip_probability must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Parameters drawn for one augment call, in application order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub crop_scale: f64,
    pub crop_top: f64,
    pub crop_left: f64,
    pub shear: f64,
    pub rotation_deg: f64,
    pub flip: bool,
}

impl AugmentDraw {
    /// Six uniforms are consumed in a fixed order regardless of the policy.
    pub fn sample(policy: &AugmentationPolicy, height: usize, width: usize, rng_seed: u64) -> AugmentDraw {
        let mut rng = seeded_rng(rng_seed);
        let mut u = || rng.gen::<f64>();
        let (u_scale, u_top, u_left, u_shear, u_rot, u_flip) = (u(), u(), u(), u(), u(), u());
        let crop_scale = policy.crop_fraction + (1.0 - policy.crop_fraction) * u_scale;
        AugmentDraw {
            crop_scale,
            crop_top: (1.0 - crop_scale) * height as f64 * u_top,
            crop_left: (1.0 - crop_scale) * width as f64 * u_left,
            shear: policy.shear_max * (2.0 * u_shear - 1.0),
            rotation_deg: policy.rotation_max_deg * (2.0 * u_rot - 1.0),
            flip: u_flip < policy.hflip_probability,
        }
    }
}

/// Random crop (resized back), shear, rotation and horizontal flip, in that
/// order. The output keeps the input's shape and value domain, and the label
/// passes through unchanged.
pub fn augment(
    image: &ImageTensor,
    label: GradeLabel,
    policy: &AugmentationPolicy,
    rng_seed: u64,
) -> Result<(ImageTensor, GradeLabel), PreprocessError> {
    policy.validate()?;
    let draw = AugmentDraw::sample(policy, image.height(), image.width(), rng_seed);
    Ok((apply_draw(image, &draw), label))
}

pub fn apply_draw(image: &ImageTensor, draw: &AugmentDraw) -> ImageTensor {
    let (h, w) = (image.height(), image.width());
    let mut current = image.clone();
    let mut touched = false;

    if draw.crop_scale < 1.0 {
        let (s, top, left) = (draw.crop_scale, draw.crop_top, draw.crop_left);
        let data = resample(&current.data, h, w, Border::Mirror, |y, x| {
            (top + (y + 0.5) * s - 0.5, left + (x + 0.5) * s - 0.5)
        });
        current = current.with_data(data);
        touched = true;
    }

    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    if draw.shear != 0.0 {
        let k = draw.shear;
        let data = resample(&current.data, h, w, Border::Mirror, |y, x| (y, x + k * (y - cy)));
        current = current.with_data(data);
        touched = true;
    }

    if draw.rotation_deg != 0.0 {
        let (sin, cos) = draw.rotation_deg.to_radians().sin_cos();
        let data = resample(&current.data, h, w, Border::Mirror, |y, x| {
            let (dy, dx) = (y - cy, x - cx);
            (cy - sin * dx + cos * dy, cx + cos * dx + sin * dy)
        });
        current = current.with_data(data);
        touched = true;
    }

    if draw.flip {
        current = flip_horizontal(&current);
    }
    if touched {
        current.clipped()
    } else {
        current
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn random_raw(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = seeded_rng(seed);
        let data = Array3::from_shape_fn((h, w, 3), |_| rng.gen_range(0..=255) as f32);
        ImageTensor::new(data, ValueDomain::Raw0To255).unwrap()
    }

    #[test]
    fn resize_to_224() {
        let img = random_raw(37, 51, 1);
        assert_eq!(resize(&img, 224, 224).unwrap().shape(), (224, 224, 3));
        assert!(matches!(resize(&img, 0, 5), Err(PreprocessError::ZeroDimension(0, 5))));
    }

    #[test]
    fn identity_resize_is_exact() {
        let img = random_raw(224, 224, 2);
        assert_eq!(resize(&img, 224, 224).unwrap(), img);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = ImageTensor::filled(13, 29, 0.3721, ValueDomain::Unit0To1);
        for (h, w) in [(224, 224), (5, 3), (1, 1), (40, 7)] {
            let out = resize(&img, h, w).unwrap();
            assert!(out.data().iter().all(|&v| v == 0.3721));
        }
    }

    #[test]
    fn downsample_by_two_averages_pairs() {
        let data = Array3::from_shape_fn((2, 4, 3), |(_, x, _)| x as f32 * 10.0);
        let img = ImageTensor::new(data, ValueDomain::Raw0To255).unwrap();
        let out = resize(&img, 1, 2).unwrap();
        assert_eq!(out.data()[[0, 0, 0]], 5.0);
        assert_eq!(out.data()[[0, 1, 0]], 25.0);
    }

    #[test]
    fn normalize_endpoints() {
        let data = array![[[0.0, 128.0, 255.0]]];
        let img = ImageTensor::new(data, ValueDomain::Raw0To255).unwrap();
        let n = normalize(&img).unwrap();
        assert_eq!(n.data()[[0, 0, 0]], 0.0);
        assert!((n.data()[[0, 0, 1]] - 128.0 / 255.0).abs() < 1e-7);
        assert_eq!(n.data()[[0, 0, 2]], 1.0);
        assert_eq!(n.domain(), ValueDomain::Unit0To1);
        assert!(matches!(normalize(&n), Err(PreprocessError::AlreadyNormalized)));
    }

    #[test]
    fn normalized_range_scan() {
        let n = normalize(&random_raw(64, 48, 3)).unwrap();
        assert!(n.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn flip_two_pixels() {
        let data = array![[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]];
        let img = ImageTensor::new(data, ValueDomain::Raw0To255).unwrap();
        let f = flip_horizontal(&img);
        assert_eq!(f.data(), &array![[[4.0, 5.0, 6.0], [1.0, 2.0, 3.0]]]);
        assert_eq!(flip_horizontal(&f), img);
    }

    #[test]
    fn flip_fixes_symmetric_image() {
        let data = Array3::from_shape_fn((4, 6, 3), |(y, x, c)| (y * 7 + x.min(5 - x) * 3 + c) as f32);
        let img = ImageTensor::new(data, ValueDomain::Raw0To255).unwrap();
        assert_eq!(flip_horizontal(&img), img);
    }

    #[test]
    fn channel_check() {
        assert!(matches!(
            ImageTensor::new(Array3::zeros((2, 2, 4)), ValueDomain::Raw0To255),
            Err(PreprocessError::ChannelCount(4))
        ));
    }

    #[test]
    fn identity_policy_is_exact() {
        let img = random_raw(31, 17, 4);
        for seed in 0..20 {
            let (out, label) = augment(&img, GradeLabel::SevereDR, &AugmentationPolicy::identity(), seed).unwrap();
            assert_eq!(out, img);
            assert_eq!(label, GradeLabel::SevereDR);
        }
    }

    #[test]
    fn invalid_policies() {
        let base = AugmentationPolicy::default();
        for p in [
            AugmentationPolicy { rotation_max_deg: -1.0, ..base },
            AugmentationPolicy { shear_max: f64::NAN, ..base },
            AugmentationPolicy { crop_fraction: 0.0, ..base },
            AugmentationPolicy { crop_fraction: 1.2, ..base },
            AugmentationPolicy { hflip_probability: 1.5, ..base },
        ] {
            assert!(matches!(augment(&random_raw(4, 4, 0), GradeLabel::NoDR, &p, 0), Err(PreprocessError::InvalidPolicy(_))));
        }
    }

    #[test]
    fn flip_only_policy_flips() {
        let img = random_raw(5, 8, 5);
        let p = AugmentationPolicy { hflip_probability: 1.0, ..AugmentationPolicy::identity() };
        let (out, _) = augment(&img, GradeLabel::NoDR, &p, 9).unwrap();
        assert_eq!(out, flip_horizontal(&img));
    }

    #[test]
    fn mirror_fold() {
        assert_eq!(fold_coordinate(-1.0, 4, Border::Mirror), 1.0);
        assert_eq!(fold_coordinate(4.0, 4, Border::Mirror), 2.0);
        assert_eq!(fold_coordinate(7.5, 4, Border::Mirror), 1.5);
        assert_eq!(fold_coordinate(-3.0, 1, Border::Mirror), 0.0);
        assert_eq!(fold_coordinate(-3.0, 4, Border::Clamp), 0.0);
    }

    #[test]
    fn rotation_by_180_matches_point_reflection() {
        let img = random_raw(6, 6, 8);
        let draw = AugmentDraw { crop_scale: 1.0, crop_top: 0.0, crop_left: 0.0, shear: 0.0, rotation_deg: 180.0, flip: false };
        let out = apply_draw(&img, &draw);
        for y in 0..6 {
            for x in 0..6 {
                for c in 0..3 {
                    let expected = img.data()[[5 - y, 5 - x, c]];
                    assert!((out.data()[[y, x, c]] - expected).abs() < 1e-3);
                }
            }
        }
    }

    #[test]
    fn augment_preserves_domain_range() {
        let img = normalize(&random_raw(40, 40, 6)).unwrap();
        let policy = AugmentationPolicy { rotation_max_deg: 45.0, shear_max: 0.5, crop_fraction: 0.5, hflip_probability: 0.5 };
        for seed in 0..10 {
            let (out, _) = augment(&img, GradeLabel::MildDR, &policy, seed).unwrap();
            assert_eq!(out.domain(), ValueDomain::Unit0To1);
            assert_eq!(out.shape(), img.shape());
            assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
