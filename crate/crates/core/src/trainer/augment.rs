//! Photometric/flip augmentation and four-image mosaics, each with the exact
//! box transform that goes with it.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::scenes::{GtBox, ImageSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strength {
    Weak,
    Strong,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrongAug {
    pub flip_prob: f64,
    /// Half-width of the uniform brightness offset.
    pub brightness: f64,
    pub noise_std: f64,
}

impl Default for StrongAug {
    fn default() -> Self {
        StrongAug {
            flip_prob: 0.5,
            brightness: 0.2,
            noise_std: 0.02,
        }
    }
}

/// Box coordinate map of an augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxTransform {
    pub flip: bool,
    pub width: f64,
}

impl BoxTransform {
    pub fn identity(width: f64) -> Self {
        BoxTransform { flip: false, width }
    }

    pub fn apply(&self, b: &BBox) -> BBox {
        if self.flip {
            b.hflip(self.width)
        } else {
            *b
        }
    }

    pub fn apply_all(&self, boxes: &[GtBox]) -> Vec<GtBox> {
        boxes
            .iter()
            .map(|b| GtBox {
                bbox: self.apply(&b.bbox),
                class: b.class,
            })
            .collect()
    }
}

/// Mirror of an image across its vertical axis (boxes included).
pub fn hflip_image(img: &ImageSample) -> ImageSample {
    let (h, w, c) = (img.height, img.width, img.channels);
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.pixels[(y * w + x) * c + ch] = img.pixels[(y * w + (w - 1 - x)) * c + ch];
            }
        }
    }
    out.boxes = BoxTransform {
        flip: true,
        width: w as f64,
    }
    .apply_all(&img.boxes);
    out
}

/// Weak is the identity. Strong flips with `flip_prob`, adds one uniform
/// brightness offset and per-pixel Gaussian noise. Random draws happen in a
/// fixed order whatever the outcome, so the stream position after the call
/// depends only on the image size.
pub fn augment<R: Rng + ?Sized>(
    img: &ImageSample,
    rng: &mut R,
    strength: Strength,
    params: &StrongAug,
) -> (ImageSample, BoxTransform) {
    let width = img.width as f64;
    if strength == Strength::Weak {
        return (img.clone(), BoxTransform::identity(width));
    }
    let flip = rng.gen::<f64>() < params.flip_prob;
    let offset = if params.brightness > 0.0 {
        rng.gen_range(-params.brightness..=params.brightness)
    } else {
        0.0
    };
    let mut out = if flip { hflip_image(img) } else { img.clone() };
    if params.noise_std > 0.0 {
        let normal = Normal::new(0.0, params.noise_std).expect("positive std");
        for p in out.pixels.iter_mut() {
            *p += offset + normal.sample(rng);
        }
    } else {
        for p in out.pixels.iter_mut() {
            *p += offset;
        }
    }
    (out, BoxTransform { flip, width })
}

/// Quadrant offsets `(ox, oy)` in TL, TR, BL, BR order.
pub fn quadrant_offsets(width: usize, height: usize) -> [(f64, f64); 4] {
    let (hw, hh) = (width as f64 / 2.0, height as f64 / 2.0);
    [(0.0, 0.0), (hw, 0.0), (0.0, hh), (hw, hh)]
}

/// Box of a source image mapped into quadrant `q` of the mosaic.
pub fn mosaic_box(b: &BBox, q: usize, width: usize, height: usize) -> BBox {
    let (ox, oy) = quadrant_offsets(width, height)[q];
    BBox::new(
        b.x1 / 2.0 + ox,
        b.y1 / 2.0 + oy,
        b.x2 / 2.0 + ox,
        b.y2 / 2.0 + oy,
    )
}

/// Inverse of [`mosaic_box`].
pub fn mosaic_box_inverse(b: &BBox, q: usize, width: usize, height: usize) -> BBox {
    let (ox, oy) = quadrant_offsets(width, height)[q];
    BBox::new(
        2.0 * (b.x1 - ox),
        2.0 * (b.y1 - oy),
        2.0 * (b.x2 - ox),
        2.0 * (b.y2 - oy),
    )
}

/// Smallest box area (px²) kept in a mosaic.
pub const MOSAIC_MIN_AREA: f64 = 4.0;

/// A mosaic box and where it came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MosaicLabel {
    pub label: GtBox,
    pub quadrant: usize,
}

/// Four equally sized images, each halved (2x2 mean) into one quadrant of a
/// canvas of the original size. Labels follow; tiny boxes are dropped.
pub fn mosaic_compose(
    images: [&ImageSample; 4],
    labels: [&[GtBox]; 4],
) -> Result<(ImageSample, Vec<MosaicLabel>)> {
    let first = images[0];
    let (h, w, c) = (first.height, first.width, first.channels);
    if images
        .iter()
        .any(|i| (i.height, i.width, i.channels) != (h, w, c))
    {
        return Err(Error::shape("mosaic", "images differ in size"));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "mosaic",
            format!("{h}x{w} is not evenly divisible in half"),
        ));
    }
    let mut canvas = ImageSample::blank(first.id, h, w, c, 0.0);
    let offsets = quadrant_offsets(w, h);
    let mut out = Vec::new();
    for (q, img) in images.iter().enumerate() {
        let (ox, oy) = (offsets[q].0 as usize, offsets[q].1 as usize);
        for y in 0..h / 2 {
            for x in 0..w / 2 {
                for ch in 0..c {
                    let px = |yy: usize, xx: usize| img.pixels[(yy * w + xx) * c + ch];
                    let v = (px(2 * y, 2 * x)
                        + px(2 * y, 2 * x + 1)
                        + px(2 * y + 1, 2 * x)
                        + px(2 * y + 1, 2 * x + 1))
                        / 4.0;
                    canvas.pixels[((y + oy) * w + x + ox) * c + ch] = v;
                }
            }
        }
        for l in labels[q] {
            let bbox = mosaic_box(&l.bbox, q, w, h);
            if bbox.area() >= MOSAIC_MIN_AREA {
                out.push(MosaicLabel {
                    label: GtBox {
                        bbox,
                        class: l.class,
                    },
                    quadrant: q,
                });
            }
        }
    }
    canvas.boxes = out.iter().map(|m| m.label).collect();
    Ok((canvas, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng_for;
    use crate::scenes::{gen_scene, DomainParams};
    use proptest::prelude::*;

    fn sample(seed: u64) -> ImageSample {
        gen_scene(seed, &mut rng_for(seed, &[]), &DomainParams::default())
    }

    #[test]
    fn weak_is_identity() {
        let img = sample(1);
        let (out, t) = augment(
            &img,
            &mut rng_for(0, &[]),
            Strength::Weak,
            &StrongAug::default(),
        );
        assert_eq!(out, img);
        assert!(!t.flip);
    }

    #[test]
    fn flip_maps_the_hand_box() {
        let t = BoxTransform {
            flip: true,
            width: 64.0,
        };
        assert_eq!(
            t.apply(&BBox::new(10.0, 20.0, 30.0, 40.0)),
            BBox::new(34.0, 20.0, 54.0, 40.0)
        );
    }

    #[test]
    fn forced_flip_twice_is_identity() {
        let img = sample(2);
        let p = StrongAug {
            flip_prob: 1.0,
            brightness: 0.0,
            noise_std: 0.0,
        };
        let mut rng = rng_for(3, &[]);
        let (once, t) = augment(&img, &mut rng, Strength::Strong, &p);
        assert!(t.flip);
        assert_ne!(once.pixels, img.pixels);
        let (twice, _) = augment(&once, &mut rng, Strength::Strong, &p);
        for (a, b) in twice.pixels.iter().zip(&img.pixels) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert_eq!(twice.boxes, img.boxes);
    }

    #[test]
    fn strong_moves_pixels_and_keeps_box_count() {
        let img = sample(4);
        let (out, t) = augment(
            &img,
            &mut rng_for(5, &[]),
            Strength::Strong,
            &StrongAug::default(),
        );
        assert_ne!(out.pixels, img.pixels);
        assert_eq!(t.apply_all(&img.boxes), out.boxes);
    }

    fn flat(id: u64, v: f64) -> ImageSample {
        ImageSample::blank(id, 100, 100, 1, v)
    }

    #[test]
    fn mosaic_hand_example() {
        let imgs = [flat(0, 0.1), flat(1, 0.2), flat(2, 0.3), flat(3, 0.4)];
        let b = [GtBox {
            bbox: BBox::new(10.0, 20.0, 30.0, 40.0),
            class: 1,
        }];
        let (canvas, labels) = mosaic_compose(
            [&imgs[0], &imgs[1], &imgs[2], &imgs[3]],
            [&[], &b, &[], &[]],
        )
        .unwrap();
        assert_eq!(labels.len(), 1);
        assert_eq!(labels[0].label.bbox, BBox::new(55.0, 10.0, 65.0, 20.0));
        assert_eq!(labels[0].quadrant, 1);
        // quadrant pixels are the half-scaled sources
        assert!((canvas.pixels[10 * 100 + 70] - 0.2).abs() < 1e-15);
        assert!((canvas.pixels[80 * 100 + 20] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn full_extent_box_fills_its_quadrant() {
        let img = flat(0, 0.5);
        let b = [GtBox {
            bbox: BBox::new(0.0, 0.0, 100.0, 100.0),
            class: 0,
        }];
        let (_, labels) = mosaic_compose([&img; 4], [&b, &[], &[], &[]]).unwrap();
        assert_eq!(labels[0].label.bbox, BBox::new(0.0, 0.0, 50.0, 50.0));
    }

    #[test]
    fn tiny_boxes_are_dropped() {
        let img = flat(0, 0.5);
        let b = [
            GtBox {
                bbox: BBox::new(0.0, 0.0, 3.0, 3.0),
                class: 0,
            },
            GtBox {
                bbox: BBox::new(0.0, 0.0, 4.0, 4.0),
                class: 0,
            },
        ];
        let (_, labels) = mosaic_compose([&img; 4], [&b, &b, &[], &[]]).unwrap();
        assert_eq!(labels.len(), 2);
    }

    #[test]
    fn mismatched_sizes_are_rejected() {
        let a = flat(0, 0.1);
        let b = ImageSample::blank(1, 50, 50, 1, 0.0);
        assert!(mosaic_compose([&a, &a, &b, &a], [&[], &[], &[], &[]]).is_err());
    }

    proptest! {
        #[test]
        fn mosaic_inverse_recovers_boxes(x in 0.0f64..90.0, y in 0.0f64..90.0,
                                         w in 1.0f64..10.0, h in 1.0f64..10.0, q in 0usize..4) {
            let b = BBox::new(x, y, x + w, y + h);
            let back = mosaic_box_inverse(&mosaic_box(&b, q, 100, 100), q, 100, 100);
            for (p, o) in back.as_array().iter().zip(b.as_array()) {
                prop_assert!((p - o).abs() <= 1e-9);
            }
        }

        #[test]
        fn mosaic_conserves_label_count(n in prop::array::uniform4(0usize..4)) {
            let img = flat(0, 0.5);
            let make = |k: usize| (0..k).map(|i| GtBox {
                bbox: BBox::new(10.0 * i as f64, 0.0, 10.0 * i as f64 + 8.0, 8.0),
                class: 0,
            }).collect::<Vec<_>>();
            let sets: Vec<Vec<GtBox>> = n.iter().map(|&k| make(k)).collect();
            let (canvas, labels) = mosaic_compose(
                [&img; 4],
                [&sets[0], &sets[1], &sets[2], &sets[3]],
            ).unwrap();
            prop_assert_eq!(labels.len(), n.iter().sum::<usize>());
            prop_assert_eq!(canvas.boxes.len(), labels.len());
        }
    }
}
