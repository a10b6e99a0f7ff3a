//! Pixel-level operations on 8-bit RGB images.

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bilinear sample at continuous pixel coordinates. Coordinates outside the
/// image are clamped to the border, which replicates the nearest edge pixel.
pub fn sample_bilinear(img: &RgbImage, x: f64, y: f64) -> [f64; 3] {
    let (w, h) = img.dimensions();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as u32, y.floor() as u32);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let p = |xx, yy| img.get_pixel(xx, yy)[c] as f64;
        let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
        let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
        *o = top * (1.0 - fy) + bottom * fy;
    }
    out
}

fn to_pixel(v: [f64; 3]) -> Rgb<u8> {
    Rgb(v.map(|c| c.round().clamp(0.0, 255.0) as u8))
}

/// Bilinear resize with pixel-centre alignment: output pixel `i` samples
/// source coordinate `(i + 0.5) * src / dst - 0.5`.
pub fn resize(img: &RgbImage, width: u32, height: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    let sx = w as f64 / width as f64;
    let sy = h as f64 / height as f64;
    RgbImage::from_fn(width, height, |x, y| {
        let u = (x as f64 + 0.5) * sx - 0.5;
        let v = (y as f64 + 0.5) * sy - 0.5;
        to_pixel(sample_bilinear(img, u, v))
    })
}

fn check_fits(img: &RgbImage, size: u32) -> Result<()> {
    let (w, h) = img.dimensions();
    if w < size || h < size {
        return Err(Error::Data(format!("image is {w}x{h}, smaller than the {size}x{size} patch")));
    }
    Ok(())
}

/// Top-left corner of the centred `size x size` window.
pub fn center_origin(width: u32, height: u32, size: u32) -> (u32, u32) {
    ((width - size) / 2, (height - size) / 2)
}

pub fn crop(img: &RgbImage, x: u32, y: u32, size: u32) -> RgbImage {
    image::imageops::crop_imm(img, x, y, size, size).to_image()
}

pub fn center_patch(img: &RgbImage, size: u32) -> Result<RgbImage> {
    check_fits(img, size)?;
    let (x, y) = center_origin(img.width(), img.height(), size);
    Ok(crop(img, x, y, size))
}

/// `count` top-left corners drawn uniformly over every valid position.
pub fn random_origins(width: u32, height: u32, size: u32, count: usize, rng: &mut impl Rng) -> Vec<(u32, u32)> {
    (0..count)
        .map(|_| (rng.gen_range(0..=width - size), rng.gen_range(0..=height - size)))
        .collect()
}

pub fn random_patches(img: &RgbImage, count: usize, size: u32, rng: &mut impl Rng) -> Result<Vec<RgbImage>> {
    check_fits(img, size)?;
    Ok(random_origins(img.width(), img.height(), size, count, rng)
        .into_iter()
        .map(|(x, y)| crop(img, x, y, size))
        .collect())
}

/// Augmentation ranges. Every transformed output draws each parameter
/// uniformly from its symmetric range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub rotation_max_deg: f64,
    pub width_shift_frac: f64,
    pub height_shift_frac: f64,
    /// Horizontal shear coefficient: `x' = x + s * y`.
    pub shear_frac: f64,
    /// Isotropic zoom factor range `1 +- zoom_frac`.
    pub zoom_frac: f64,
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    /// Total outputs per input, the untouched original included.
    pub outputs_per_input: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_max_deg: 40.0,
            width_shift_frac: 0.2,
            height_shift_frac: 0.2,
            shear_frac: 0.2,
            zoom_frac: 0.2,
            horizontal_flip: true,
            vertical_flip: true,
            outputs_per_input: 21,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let fracs = [
            ("width_shift_frac", self.width_shift_frac),
            ("height_shift_frac", self.height_shift_frac),
            ("shear_frac", self.shear_frac),
            ("zoom_frac", self.zoom_frac),
        ];
        for (name, v) in fracs {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("augment.{name} = {v} must lie in [0, 1)")));
            }
        }
        if !(self.rotation_max_deg >= 0.0 && self.rotation_max_deg.is_finite()) {
            return Err(Error::Config("augment.rotation_max_deg must be a non-negative number".into()));
        }
        if self.outputs_per_input == 0 {
            return Err(Error::Config("augment.outputs_per_input must be at least 1".into()));
        }
        Ok(())
    }
}

/// One draw of augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub rotation_deg: f64,
    pub shear: f64,
    pub zoom: f64,
    /// Shifts in pixels.
    pub shift_x: f64,
    pub shift_y: f64,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl Affine {
    /// Draws parameters in a fixed order: rotation, shear, zoom, x shift, y
    /// shift, horizontal flip, vertical flip.
    pub fn draw(config: &AugmentConfig, width: u32, height: u32, rng: &mut impl Rng) -> Self {
        let sym = |rng: &mut dyn rand::RngCore, r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        let rotation_deg = sym(rng, config.rotation_max_deg);
        let shear = sym(rng, config.shear_frac);
        let zoom = 1.0 + sym(rng, config.zoom_frac);
        let shift_x = sym(rng, config.width_shift_frac) * width as f64;
        let shift_y = sym(rng, config.height_shift_frac) * height as f64;
        let flip_h = config.horizontal_flip && rng.gen_bool(0.5);
        let flip_v = config.vertical_flip && rng.gen_bool(0.5);
        Self {
            rotation_deg,
            shear,
            zoom,
            shift_x,
            shift_y,
            flip_h,
            flip_v,
        }
    }

    /// Linear part of rotation, then shear, then zoom, as a row-major 2x2.
    fn linear(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let rot = [[c, -s], [s, c]];
        let shear = [[1.0, self.shear], [0.0, 1.0]];
        let mul = |a: [[f64; 2]; 2], b: [[f64; 2]; 2]| {
            [
                [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
                [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
            ]
        };
        let z = self.zoom;
        mul([[z, 0.0], [0.0, z]], mul(shear, rot))
    }

    /// Applies the transform about the image centre, then the flips, sampling
    /// the source bilinearly with nearest-edge fill.
    pub fn apply(&self, img: &RgbImage) -> RgbImage {
        let (w, h) = img.dimensions();
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let m = self.linear();
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
        RgbImage::from_fn(w, h, |x, y| {
            let x = if self.flip_h { w - 1 - x } else { x };
            let y = if self.flip_v { h - 1 - y } else { y };
            let dx = x as f64 - cx - self.shift_x;
            let dy = y as f64 - cy - self.shift_y;
            let sx = inv[0][0] * dx + inv[0][1] * dy + cx;
            let sy = inv[1][0] * dx + inv[1][1] * dy + cy;
            to_pixel(sample_bilinear(img, sx, sy))
        })
    }
}

/// The original followed by `outputs_per_input - 1` random transforms.
pub fn augment(img: &RgbImage, config: &AugmentConfig, rng: &mut impl Rng) -> Vec<RgbImage> {
    let mut out = Vec::with_capacity(config.outputs_per_input);
    out.push(img.clone());
    for _ in 1..config.outputs_per_input {
        out.push(Affine::draw(config, img.width(), img.height(), rng).apply(img));
    }
    out
}
