use crate::nnet::Tensor;
use crate::render::ImageRGB8;
use crate::Scalar;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Resizes the shorter side to `target` (bilinear, half-pixel centres),
/// centre-crops to `target×target`, scales to `[0,1]` and normalizes each
/// channel with ImageNet statistics. Returns a `3×target×target` tensor.
pub fn preprocess_image<T: Scalar>(img: &ImageRGB8, target: usize) -> Tensor<T> {
    assert!(img.width() > 0 && img.height() > 0, "empty image");
    let (w, h) = (img.width(), img.height());
    let short = w.min(h);
    let (rw, rh) = if short == target {
        (w, h)
    } else {
        let s = target as f64 / short as f64;
        (
            ((w as f64 * s).round() as usize).max(target),
            ((h as f64 * s).round() as usize).max(target),
        )
    };
    let (ox, oy) = ((rw - target) / 2, (rh - target) / 2);
    let resampled = rw != w || rh != h;
    let sample = |c: usize, x: usize, y: usize| -> f64 {
        if !resampled {
            return img.pixel(x, y)[c] as f64;
        }
        let sx = ((x as f64 + 0.5) * w as f64 / rw as f64 - 0.5).clamp(0.0, (w - 1) as f64);
        let sy = ((y as f64 + 0.5) * h as f64 / rh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
        let p = |x: usize, y: usize| img.pixel(x, y)[c] as f64;
        let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
        let bot = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
        top * (1.0 - fy) + bot * fy
    };
    let mut data = Vec::with_capacity(3 * target * target);
    for c in 0..3 {
        for y in 0..target {
            for x in 0..target {
                let v = sample(c, x + ox, y + oy) / 255.0;
                data.push(T::of((v - IMAGENET_MEAN[c]) / IMAGENET_STD[c]));
            }
        }
    }
    Tensor::new(vec![3, target, target], data).expect("shape matches data")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_colour_normalizes_to_zero() {
        let px = IMAGENET_MEAN.map(|m| (m * 255.0).round() as u8);
        let t: Tensor<f64> = preprocess_image(&ImageRGB8::filled(40, 40, px), 32);
        let tol = 1.0 / 255.0 / 0.229;
        assert!(t.data().iter().all(|v| v.abs() <= tol));
    }

    #[test]
    fn target_sized_square_is_only_normalized() {
        let data: Vec<u8> = (0..16 * 16 * 3).map(|i| (i * 31 % 256) as u8).collect();
        let img = ImageRGB8::new(16, 16, data).unwrap();
        let t: Tensor<f64> = preprocess_image(&img, 16);
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    let want = (img.pixel(x, y)[c] as f64 / 255.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
                    assert_eq!(t.data()[(c * 16 + y) * 16 + x], want);
                }
            }
        }
    }

    #[test]
    fn wide_image_keeps_centre_columns() {
        let (w, h) = (600, 512);
        let mut img = ImageRGB8::filled(w, h, [0, 0, 0]);
        for y in 0..h {
            for x in 0..w {
                img.set_pixel(x, y, [(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8]);
            }
        }
        let t: Tensor<f32> = preprocess_image(&img, 512);
        assert_eq!(t.shape(), &[3, 512, 512]);
        // oracle: columns 44..556 of the source
        for c in 0..3 {
            for &(y, x) in &[(0usize, 0usize), (100, 7), (511, 511), (256, 300)] {
                let src = img.pixel(x + 44, y)[c] as f64 / 255.0;
                let want = ((src - IMAGENET_MEAN[c]) / IMAGENET_STD[c]) as f32;
                assert_eq!(t.data()[(c * 512 + y) * 512 + x], want);
            }
        }
    }

    #[test]
    fn downscale_is_bilinear_average() {
        // 2x2 blocks of constant colour shrink to their block values.
        let mut img = ImageRGB8::filled(32, 32, [0, 0, 0]);
        for y in 0..32 {
            for x in 0..32 {
                let v = if (x / 2 + y / 2) % 2 == 0 { 200 } else { 40 };
                img.set_pixel(x, y, [v, v, v]);
            }
        }
        let t: Tensor<f64> = preprocess_image(&img, 16);
        assert_eq!(t.shape(), &[3, 16, 16]);
        // destination pixel centre maps to the corner shared by 4 source
        // pixels of one block, so the value is exact
        let v = t.data()[0] * IMAGENET_STD[0] + IMAGENET_MEAN[0];
        assert!((v - 200.0 / 255.0).abs() < 1e-12);
    }
}
