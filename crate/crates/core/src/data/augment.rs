//! Geometric augmentation and resampling of images and their masks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::maps::{Map, Mask};

/// Ranges from which one random affine transform is drawn per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentParams {
    pub scale: (f64, f64),
    /// Rotation magnitude bound in degrees; the sign is drawn uniformly.
    pub max_rotation_deg: f64,
    /// Translation bound as a fraction of the side length, per axis.
    pub max_translation: f64,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            scale: (0.9, 1.1),
            max_rotation_deg: 15.0,
            max_translation: 0.1,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
        }
    }
}

/// One concrete transform: flips, then scaling, rotation and translation about the center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineDraw {
    pub scale: f64,
    pub rotation_deg: f64,
    /// Fractions of width and height.
    pub translation: (f64, f64),
    pub hflip: bool,
    pub vflip: bool,
}

impl AffineDraw {
    pub const IDENTITY: AffineDraw = AffineDraw {
        scale: 1.0,
        rotation_deg: 0.0,
        translation: (0.0, 0.0),
        hflip: false,
        vflip: false,
    };

    pub fn sample<R: Rng + ?Sized>(p: &AugmentParams, rng: &mut R) -> Self {
        let scale = rng.random_range(p.scale.0..=p.scale.1);
        let rotation_deg = rng.random_range(-p.max_rotation_deg..=p.max_rotation_deg);
        let t = p.max_translation;
        let translation = (rng.random_range(-t..=t), rng.random_range(-t..=t));
        let hflip = rng.random_bool(p.hflip_prob);
        let vflip = rng.random_bool(p.vflip_prob);
        Self {
            scale,
            rotation_deg,
            translation,
            hflip,
            vflip,
        }
    }

    /// Source pixel coordinates `(x, y)` that land on output pixel `(x, y)`.
    fn source(&self, x: usize, y: usize, w: usize, h: usize) -> (f64, f64) {
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        let px = x as f64 + 0.5 - cx - self.translation.0 * w as f64;
        let py = y as f64 + 0.5 - cy - self.translation.1 * h as f64;
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let mut qx = (c * px + s * py) / self.scale;
        let mut qy = (-s * px + c * py) / self.scale;
        if self.hflip {
            qx = -qx;
        }
        if self.vflip {
            qy = -qy;
        }
        (qx + cx - 0.5, qy + cy - 0.5)
    }
}

fn bilinear_at(src: &Map, sx: f64, sy: f64, clamp: bool) -> f32 {
    let (h, w) = src.dims();
    let (sx, sy) = if clamp {
        (sx.clamp(0.0, (w - 1) as f64), sy.clamp(0.0, (h - 1) as f64))
    } else {
        (sx, sy)
    };
    let (x0, y0) = (sx.floor(), sy.floor());
    let (fx, fy) = (sx - x0, sy - y0);
    let at = |x: f64, y: f64| -> f64 {
        if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
            0.0
        } else {
            src.get(y as usize, x as usize) as f64
        }
    };
    let mut v = 0.0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let wgt = wx * wy;
            if wgt != 0.0 {
                v += wgt * at(x0 + dx, y0 + dy);
            }
        }
    }
    v as f32
}

fn nearest_at(src: &Mask, sx: f64, sy: f64) -> u8 {
    let (h, w) = src.dims();
    let (x, y) = (sx.round(), sy.round());
    if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
        0
    } else {
        src.get(y as usize, x as usize)
    }
}

/// Applies one transform to the image (bilinear) and every mask (nearest);
/// regions mapped from outside the source are zero.
pub fn apply_affine(image: &Map, masks: &[Mask], draw: &AffineDraw) -> (Map, Vec<Mask>) {
    let (h, w) = image.dims();
    let coords: Vec<(f64, f64)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| draw.source(x, y, w, h))
        .collect();
    let img = coords.iter().map(|&(sx, sy)| bilinear_at(image, sx, sy, false)).collect();
    let image = Map::new(h, w, img).expect("same dims");
    let masks = masks
        .iter()
        .map(|m| {
            let data = coords.iter().map(|&(sx, sy)| nearest_at(m, sx, sy)).collect();
            Mask::new(h, w, data).expect("nearest sampling keeps masks binary")
        })
        .collect();
    (image, masks)
}

/// Draws one transform and applies it jointly to the image and all masks.
pub fn augment<R: Rng + ?Sized>(
    image: &Map,
    masks: &[Mask],
    params: &AugmentParams,
    rng: &mut R,
) -> (Map, Vec<Mask>) {
    let draw = AffineDraw::sample(params, rng);
    apply_affine(image, masks, &draw)
}

fn src_coord(dst: usize, dst_len: usize, src_len: usize) -> f64 {
    (dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(src: &Map, height: usize, width: usize) -> Map {
    if src.dims() == (height, width) {
        return src.clone();
    }
    let data = (0..height)
        .flat_map(|y| (0..width).map(move |x| (x, y)))
        .map(|(x, y)| {
            let sx = src_coord(x, width, src.width());
            let sy = src_coord(y, height, src.height());
            bilinear_at(src, sx, sy, true)
        })
        .collect();
    Map::new(height, width, data).expect("dims computed")
}

pub fn resize_nearest(src: &Mask, height: usize, width: usize) -> Mask {
    if src.dims() == (height, width) {
        return src.clone();
    }
    let pick = |d: usize, dl: usize, sl: usize| ((d as f64 + 0.5) * sl as f64 / dl as f64).floor() as usize;
    let data = (0..height)
        .flat_map(|y| (0..width).map(move |x| (x, y)))
        .map(|(x, y)| {
            let sx = pick(x, width, src.width()).min(src.width() - 1);
            let sy = pick(y, height, src.height()).min(src.height() - 1);
            src.get(sy, sx)
        })
        .collect();
    Mask::new(height, width, data).expect("values copied from a mask")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> Map {
        Map::new(h, w, (0..h * w).map(|i| i as f32 / (h * w) as f32).collect()).unwrap()
    }

    #[test]
    fn identity_draw_is_exact() {
        let img = ramp(6, 5);
        let m = Mask::new(6, 5, (0..30).map(|i| (i % 3 == 0) as u8).collect()).unwrap();
        let (i2, m2) = apply_affine(&img, std::slice::from_ref(&m), &AffineDraw::IDENTITY);
        assert_eq!(i2, img);
        assert_eq!(m2[0], m);
    }

    #[test]
    fn horizontal_flip_reverses_columns() {
        let m = Mask::new(2, 3, vec![1, 1, 0, 0, 0, 1]).unwrap();
        let draw = AffineDraw {
            hflip: true,
            ..AffineDraw::IDENTITY
        };
        let (_, out) = apply_affine(&Map::zeros(2, 3), &[m], &draw);
        assert_eq!(out[0].data(), &[0, 1, 1, 1, 0, 0]);
    }

    #[test]
    fn vertical_flip_reverses_rows() {
        let img = ramp(3, 2);
        let draw = AffineDraw {
            vflip: true,
            ..AffineDraw::IDENTITY
        };
        let (out, _) = apply_affine(&img, &[], &draw);
        for y in 0..3 {
            for x in 0..2 {
                assert_eq!(out.get(y, x), img.get(2 - y, x));
            }
        }
    }

    #[test]
    fn translation_fills_with_zero() {
        let img = Map::new(4, 4, vec![1.0; 16]).unwrap();
        let draw = AffineDraw {
            translation: (0.5, 0.0),
            ..AffineDraw::IDENTITY
        };
        let (out, _) = apply_affine(&img, &[], &draw);
        assert_eq!(out.get(0, 0), 0.0);
        assert_eq!(out.get(0, 1), 0.0);
        assert_eq!(out.get(0, 2), 1.0);
    }

    #[test]
    fn draws_stay_in_range() {
        let p = AugmentParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut neg = false;
        for _ in 0..500 {
            let d = AffineDraw::sample(&p, &mut rng);
            assert!((0.9..=1.1).contains(&d.scale));
            assert!(d.rotation_deg.abs() <= 15.0);
            assert!(d.translation.0.abs() <= 0.1 && d.translation.1.abs() <= 0.1);
            neg |= d.rotation_deg < 0.0;
        }
        assert!(neg);
    }

    #[test]
    fn resize_keeps_masks_binary() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = (0..64 * 64).map(|_| rng.random_range(0..2u8)).collect();
        let m = Mask::new(64, 64, data).unwrap();
        let r = resize_nearest(&m, 32, 32);
        assert_eq!(r.dims(), (32, 32));
        assert!(r.data().iter().all(|&v| v <= 1));
        assert_eq!(r.get(3, 5), m.get(7, 11));
    }

    #[test]
    fn bilinear_downsample_averages_pairs() {
        let src = Map::new(1, 4, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let out = resize_bilinear(&src, 1, 2);
        assert_eq!(out.data(), &[0.5, 2.5]);
        let same = resize_bilinear(&src, 1, 4);
        assert_eq!(same, src);
    }
}
