//! Seeded generator of detection scenes and the fog shift applied to them.
//!
//! Scenes are grayscale canvases with a dark, lightly textured background and
//! 1 to 5 bright filled shapes, one shape kind per class. Fog blends pixels
//! towards a constant luminance, adds Gaussian noise and box-blurs, all scaled
//! by a per-image severity in `[0, 1]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Square,
    Disk,
    Triangle,
    Diamond,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Square, Shape::Disk, Shape::Triangle, Shape::Diamond];

    pub fn for_class(class: usize) -> Shape {
        Shape::ALL[class]
    }

    /// Whether the pixel centre `(px, py)` lies inside the shape inscribed in `b`.
    fn covers(self, b: &BBox, px: f64, py: f64) -> bool {
        let (cx, cy) = b.center();
        let (hw, hh) = (b.width() / 2.0, b.height() / 2.0);
        match self {
            Shape::Square => px >= b.x1 && px < b.x2 && py >= b.y1 && py < b.y2,
            Shape::Disk => (px - cx).powi(2) + (py - cy).powi(2) <= hw * hw,
            Shape::Triangle => {
                // apex at the top centre, base along the bottom edge; each pixel
                // row is tested at its lower boundary so the apex row is lit
                if py < b.y1 || py > b.y2 {
                    return false;
                }
                let half = hw * (py - b.y1 + 0.5) / b.height();
                (px - cx).abs() <= half
            }
            Shape::Diamond => (px - cx).abs() / hw + (py - cy).abs() / hh <= 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub bbox: BBox,
    pub class: usize,
}

/// One image with its labels. Pixels are stored `H x W x C`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
    pub boxes: Vec<GtBox>,
    pub severity: f64,
}

impl ImageSample {
    pub fn blank(id: u64, height: usize, width: usize, channels: usize, value: f64) -> Self {
        ImageSample {
            id,
            height,
            width,
            channels,
            pixels: vec![value; height * width * channels],
            boxes: Vec::new(),
            severity: 0.0,
        }
    }

    /// Pixels as a `[1, C, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w, c) = (self.height, self.width, self.channels);
        Tensor::from_fn(&[1, c, h, w], |i| {
            let ch = i / (h * w);
            let pos = i % (h * w);
            self.pixels[pos * c + ch]
        })
    }

    /// Stacks same-sized images into one `[N, C, H, W]` tensor.
    pub fn batch_tensor(images: &[&ImageSample]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::Contract("empty image batch".into()))?;
        let (h, w, c) = (first.height, first.width, first.channels);
        let mut data = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if (img.height, img.width, img.channels) != (h, w, c) {
                return Err(Error::shape(
                    format!("image {}", img.id),
                    format!(
                        "{}x{}x{} in a batch of {h}x{w}x{c}",
                        img.height, img.width, img.channels
                    ),
                ));
            }
            data.extend(img.to_tensor().into_data());
        }
        Tensor::new(vec![images.len(), c, h, w], data)
    }

    pub fn std_dev(&self) -> f64 {
        let n = self.pixels.len() as f64;
        let mean = self.pixels.iter().sum::<f64>() / n;
        (self.pixels.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n).sqrt()
    }

    /// Checks the labelling invariants: boxes inside the canvas, pixels in `[0, 1]`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let at = || format!("image {}", self.id);
        for b in &self.boxes {
            let r = b.bbox;
            let ok = 0.0 <= r.x1
                && r.x1 < r.x2
                && r.x2 <= self.width as f64
                && 0.0 <= r.y1
                && r.y1 < r.y2
                && r.y2 <= self.height as f64;
            if !ok || b.class >= num_classes {
                return Err(Error::shape(at(), format!("invalid box {b:?}")));
            }
        }
        if self.pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::shape(at(), "pixel outside [0, 1]"));
        }
        Ok(())
    }
}

/// Scene content parameters for one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainParams {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side length range in pixels (inclusive).
    pub min_size: usize,
    pub max_size: usize,
    pub background: (f64, f64),
    pub foreground: (f64, f64),
    /// Standard deviation of the per-pixel background texture.
    pub texture: f64,
    pub placement_retries: usize,
    pub fog: FogParams,
}

impl Default for DomainParams {
    fn default() -> Self {
        DomainParams {
            height: 64,
            width: 64,
            num_classes: 3,
            min_objects: 1,
            max_objects: 5,
            min_size: 12,
            max_size: 20,
            background: (0.05, 0.25),
            foreground: (0.6, 1.0),
            texture: 0.02,
            placement_retries: 20,
            fog: FogParams::default(),
        }
    }
}

impl DomainParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::Config {
                key: format!("scene.{key}"),
                msg: msg.into(),
            })
        };
        if !(2..=Shape::ALL.len()).contains(&self.num_classes) {
            return bad("num_classes", "must be between 2 and 4");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("min_objects", "need 1 <= min_objects <= max_objects");
        }
        if self.min_size < 2 || self.min_size > self.max_size {
            return bad("min_size", "need 2 <= min_size <= max_size");
        }
        if self.max_size > self.height.min(self.width) {
            return bad("max_size", "objects must fit in the canvas");
        }
        if !(0.0..=1.0).contains(&self.fog.luminance) {
            return bad("fog.luminance", "must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FogParams {
    pub luminance: f64,
    /// Noise standard deviation at severity 1 (scaled linearly by severity).
    pub noise_scale: f64,
    /// Blur radius at severity 1; the applied radius is `floor(blur_scale * s)`.
    pub blur_scale: f64,
}

impl Default for FogParams {
    fn default() -> Self {
        FogParams {
            luminance: 0.7,
            noise_scale: 0.05,
            blur_scale: 3.0,
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// Draws a shape of `class` with the given integer bounding box into `img`.
pub fn draw_shape(img: &mut ImageSample, class: usize, bbox: BBox, intensity: f64) {
    let shape = Shape::for_class(class);
    let x0 = bbox.x1.floor().max(0.0) as usize;
    let y0 = bbox.y1.floor().max(0.0) as usize;
    let x1 = (bbox.x2.ceil() as usize).min(img.width);
    let y1 = (bbox.y2.ceil() as usize).min(img.height);
    for y in y0..y1 {
        for x in x0..x1 {
            if shape.covers(&bbox, x as f64 + 0.5, y as f64 + 0.5) {
                for c in 0..img.channels {
                    img.pixels[(y * img.width + x) * img.channels + c] = intensity;
                }
            }
        }
    }
}

/// Generates one source-domain scene (severity 0).
pub fn gen_scene<R: Rng + ?Sized>(id: u64, rng: &mut R, params: &DomainParams) -> ImageSample {
    let (h, w) = (params.height, params.width);
    let bg = uniform(rng, params.background);
    let mut img = ImageSample::blank(id, h, w, 1, bg);
    if params.texture > 0.0 {
        let tex = Normal::new(0.0, params.texture).expect("positive std");
        for p in img.pixels.iter_mut() {
            *p = (*p + tex.sample(rng)).clamp(0.0, 1.0);
        }
    }
    let count = rng.gen_range(params.min_objects..=params.max_objects);
    let mut boxes: Vec<GtBox> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.gen_range(0..params.num_classes);
        let mut bbox = BBox::new(0.0, 0.0, 1.0, 1.0);
        for attempt in 0..=params.placement_retries {
            let size = rng.gen_range(params.min_size..=params.max_size) as f64;
            let x1 = rng.gen_range(0..=(w - size as usize)) as f64;
            let y1 = rng.gen_range(0..=(h - size as usize)) as f64;
            bbox = BBox::new(x1, y1, x1 + size, y1 + size);
            let free = boxes.iter().all(|b| b.bbox.intersection(&bbox) == 0.0);
            if free || attempt == params.placement_retries {
                break;
            }
        }
        let intensity = uniform(rng, params.foreground);
        draw_shape(&mut img, class, bbox, intensity);
        boxes.push(GtBox { bbox, class });
    }
    img.boxes = boxes;
    img
}

/// Separable box blur with edge clamping. Radius 0 is the identity.
pub fn box_blur(pixels: &mut [f64], height: usize, width: usize, channels: usize, radius: usize) {
    if radius == 0 {
        return;
    }
    let norm = (2 * radius + 1) as f64;
    let mut tmp = vec![0.0; pixels.len()];
    let at = |y: usize, x: usize, c: usize| (y * width + x) * channels + c;
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                let mut acc = 0.0;
                for d in -(radius as isize)..=radius as isize {
                    let xx = (x as isize + d).clamp(0, width as isize - 1) as usize;
                    acc += pixels[at(y, xx, c)];
                }
                tmp[at(y, x, c)] = acc / norm;
            }
        }
    }
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                let mut acc = 0.0;
                for d in -(radius as isize)..=radius as isize {
                    let yy = (y as isize + d).clamp(0, height as isize - 1) as usize;
                    acc += tmp[at(yy, x, c)];
                }
                pixels[at(y, x, c)] = acc / norm;
            }
        }
    }
}

/// `clamp((1 - s) * p + s * L + noise, 0, 1)` followed by a box blur of radius
/// `floor(blur_scale * s)`. Labels are untouched.
pub fn apply_fog<R: Rng + ?Sized>(
    sample: &ImageSample,
    severity: f64,
    fog: &FogParams,
    rng: &mut R,
) -> Result<ImageSample> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(Error::Domain {
            name: "severity",
            value: severity,
            expected: "0 <= s <= 1",
        });
    }
    let mut out = sample.clone();
    out.severity = severity;
    if severity == 0.0 {
        return Ok(out);
    }
    let noise_std = fog.noise_scale * severity;
    let noise = (noise_std > 0.0).then(|| Normal::new(0.0, noise_std).expect("positive std"));
    for p in out.pixels.iter_mut() {
        let n = noise.as_ref().map_or(0.0, |d| d.sample(rng));
        *p = ((1.0 - severity) * *p + severity * fog.luminance + n).clamp(0.0, 1.0);
    }
    let radius = (fog.blur_scale * severity).floor() as usize;
    box_blur(&mut out.pixels, out.height, out.width, out.channels, radius);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng_for;
    use proptest::prelude::*;

    fn quiet_fog() -> FogParams {
        FogParams {
            noise_scale: 0.0,
            ..FogParams::default()
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let p = DomainParams::default();
        let a = gen_scene(3, &mut rng_for(11, &[3]), &p);
        let b = gen_scene(3, &mut rng_for(11, &[3]), &p);
        assert_eq!(a, b);
        let c = gen_scene(3, &mut rng_for(12, &[3]), &p);
        assert_ne!(a, c);
    }

    #[test]
    fn disk_box_is_tight() {
        let mut img = ImageSample::blank(0, 64, 64, 1, 0.0);
        let bbox = BBox::from_center(32.0, 32.0, 16.0, 16.0);
        assert_eq!(bbox, BBox::new(24.0, 24.0, 40.0, 40.0));
        draw_shape(&mut img, 1, bbox, 1.0);
        let lit: Vec<(usize, usize)> = (0..64 * 64)
            .filter(|&i| img.pixels[i] > 0.0)
            .map(|i| (i % 64, i / 64))
            .collect();
        let min_x = lit.iter().map(|p| p.0).min().unwrap();
        let max_x = lit.iter().map(|p| p.0).max().unwrap();
        let min_y = lit.iter().map(|p| p.1).min().unwrap();
        let max_y = lit.iter().map(|p| p.1).max().unwrap();
        assert_eq!((min_x, min_y, max_x + 1, max_y + 1), (24, 24, 40, 40));
    }

    #[test]
    fn every_shape_fills_its_box_extent() {
        for class in 0..4 {
            let mut img = ImageSample::blank(0, 32, 32, 1, 0.0);
            draw_shape(&mut img, class, BBox::new(4.0, 6.0, 20.0, 22.0), 1.0);
            let lit: Vec<usize> = (0..32 * 32).filter(|&i| img.pixels[i] > 0.0).collect();
            let xs: Vec<usize> = lit.iter().map(|i| i % 32).collect();
            let ys: Vec<usize> = lit.iter().map(|i| i / 32).collect();
            assert_eq!(*xs.iter().min().unwrap(), 4, "class {class}");
            assert_eq!(*xs.iter().max().unwrap(), 19, "class {class}");
            assert_eq!(*ys.iter().min().unwrap(), 6, "class {class}");
            assert_eq!(*ys.iter().max().unwrap(), 21, "class {class}");
        }
    }

    #[test]
    fn class_frequencies_are_near_uniform() {
        let p = DomainParams::default();
        let mut counts = [0usize; 3];
        for id in 0..1000 {
            let s = gen_scene(id, &mut rng_for(5, &[id]), &p);
            for b in &s.boxes {
                counts[b.class] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        let expected = total as f64 / 3.0;
        for c in counts {
            assert!((c as f64 - expected).abs() <= 0.1 * expected, "{counts:?}");
        }
    }

    #[test]
    fn zero_severity_keeps_pixels() {
        let s = gen_scene(0, &mut rng_for(1, &[]), &DomainParams::default());
        let f = apply_fog(&s, 0.0, &FogParams::default(), &mut rng_for(2, &[])).unwrap();
        assert_eq!(f.pixels, s.pixels);
    }

    #[test]
    fn blend_hand_value() {
        let s = ImageSample::blank(0, 8, 8, 1, 0.2);
        let f = apply_fog(&s, 0.5, &quiet_fog(), &mut rng_for(0, &[])).unwrap();
        assert!(f.pixels.iter().all(|p| (p - 0.45).abs() < 1e-12));
        assert_eq!(f.severity, 0.5);
    }

    #[test]
    fn full_severity_is_flat_fog() {
        let s = gen_scene(0, &mut rng_for(1, &[]), &DomainParams::default());
        let f = apply_fog(&s, 1.0, &quiet_fog(), &mut rng_for(0, &[])).unwrap();
        assert!(f.pixels.iter().all(|p| (p - 0.7).abs() < 1e-12));
    }

    #[test]
    fn severity_out_of_range_is_rejected() {
        let s = ImageSample::blank(0, 4, 4, 1, 0.2);
        assert!(apply_fog(&s, 1.5, &quiet_fog(), &mut rng_for(0, &[])).is_err());
        assert!(apply_fog(&s, -0.1, &quiet_fog(), &mut rng_for(0, &[])).is_err());
    }

    #[test]
    fn blur_keeps_constant_regions() {
        let mut px = vec![0.3; 10 * 7];
        box_blur(&mut px, 10, 7, 1, 2);
        assert!(px.iter().all(|p| (p - 0.3).abs() < 1e-15));
    }

    #[test]
    fn batch_rejects_mixed_sizes() {
        let a = ImageSample::blank(0, 4, 4, 1, 0.0);
        let b = ImageSample::blank(1, 4, 5, 1, 0.0);
        assert!(ImageSample::batch_tensor(&[&a, &b]).is_err());
        assert_eq!(
            ImageSample::batch_tensor(&[&a, &a]).unwrap().shape(),
            &[2, 1, 4, 4]
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn generated_boxes_are_valid(seed in any::<u64>()) {
            let p = DomainParams::default();
            let s = gen_scene(seed, &mut rng_for(seed, &[]), &p);
            prop_assert!(s.validate(p.num_classes).is_ok());
            prop_assert!((1..=5).contains(&s.boxes.len()));
            prop_assert_eq!(s.severity, 0.0);
        }

        #[test]
        fn fog_keeps_boxes(seed in any::<u64>(), sev in 0.0f64..=1.0) {
            let p = DomainParams::default();
            let s = gen_scene(seed, &mut rng_for(seed, &[]), &p);
            let f = apply_fog(&s, sev, &p.fog, &mut rng_for(seed, &[1])).unwrap();
            prop_assert_eq!(&f.boxes, &s.boxes);
            prop_assert!(f.validate(p.num_classes).is_ok());
        }

        // Below severity 1/3 the blur radius is zero and the contrast scaling is exact;
        // above it the blur can only reduce the spread further.
        #[test]
        fn fog_scales_contrast(seed in any::<u64>(), sev in 0.0f64..=1.0) {
            let s = gen_scene(seed, &mut rng_for(seed, &[]), &DomainParams::default());
            let f = apply_fog(&s, sev, &quiet_fog(), &mut rng_for(0, &[])).unwrap();
            let expected = (1.0 - sev) * s.std_dev();
            if (3.0 * sev).floor() == 0.0 {
                prop_assert!((f.std_dev() - expected).abs() <= 1e-12);
            } else {
                prop_assert!(f.std_dev() <= expected + 1e-12);
            }
        }
    }
}
