//! Seeded photo-like test images: smooth shading, soft blobs, hard-edged
//! shapes and sensor-style noise, with correlated color channels.

use crate::autodiff::rng;
use crate::codec::image::Image;
use rand::Rng;
use rand_distr::{Distribution, Normal};

struct Blob {
    cx: f64,
    cy: f64,
    radius: f64,
    amp: [f64; 3],
}

struct Rect {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    value: [f64; 3],
}

/// One `width x height` image with `channels` samples per pixel.
pub fn photo_like(r: &mut impl Rng, width: usize, height: usize, channels: usize) -> Image {
    let (w, h) = (width as f64, height as f64);
    let base: [f64; 3] = std::array::from_fn(|_| r.random_range(60.0..190.0));
    let grad: [[f64; 2]; 3] = {
        let gx = r.random_range(-80.0..80.0);
        let gy = r.random_range(-80.0..80.0);
        std::array::from_fn(|_| [gx + r.random_range(-15.0..15.0), gy + r.random_range(-15.0..15.0)])
    };
    let blobs: Vec<Blob> = (0..r.random_range(1..5))
        .map(|_| {
            let a = r.random_range(-70.0..70.0);
            Blob {
                cx: r.random_range(0.0..w),
                cy: r.random_range(0.0..h),
                radius: r.random_range(0.15..0.6) * w.max(h),
                amp: std::array::from_fn(|_| a + r.random_range(-20.0..20.0)),
            }
        })
        .collect();
    let rects: Vec<Rect> = (0..r.random_range(0..3))
        .map(|_| {
            let (x0, y0) = (r.random_range(0.0..w), r.random_range(0.0..h));
            let v = r.random_range(20.0..235.0);
            Rect {
                x0,
                y0,
                x1: x0 + r.random_range(0.1..0.5) * w,
                y1: y0 + r.random_range(0.1..0.5) * h,
                value: std::array::from_fn(|_| v + r.random_range(-25.0..25.0)),
            }
        })
        .collect();
    let freq = r.random_range(0.05..0.4);
    let texture = r.random_range(0.0..6.0);
    let noise = Normal::new(0.0, r.random_range(0.5..3.0)).expect("positive std");

    let mut data = Vec::with_capacity(width * height * channels);
    for y in 0..height {
        for x in 0..width {
            let (u, v) = (x as f64 / w.max(1.0), y as f64 / h.max(1.0));
            let (fx, fy) = (x as f64, y as f64);
            let shared = noise.sample(r);
            let wave = texture * (freq * fx).sin() * (freq * 1.3 * fy).cos();
            for c in 0..channels {
                let mut s = base[c] + grad[c][0] * (u - 0.5) + grad[c][1] * (v - 0.5) + wave;
                for b in &blobs {
                    let d2 = ((fx - b.cx).powi(2) + (fy - b.cy).powi(2)) / (b.radius * b.radius);
                    s += b.amp[c] * (-d2).exp();
                }
                for q in &rects {
                    if fx >= q.x0 && fx < q.x1 && fy >= q.y0 && fy < q.y1 {
                        s = 0.3 * s + 0.7 * q.value[c];
                    }
                }
                s += shared + 0.3 * noise.sample(r);
                data.push(s.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Image::new(width, height, channels, data).expect("non-empty")
}

/// `count` images named `synth_000.ppm`, ... drawn from one seed.
pub fn corpus(seed: u64, count: usize, width: usize, height: usize, channels: usize) -> Vec<(String, Image)> {
    let ext = if channels == 1 { "pgm" } else { "ppm" };
    (0..count)
        .map(|i| {
            let mut r = rng::seeded_stream(seed, i as u64);
            (format!("synth_{i:03}.{ext}"), photo_like(&mut r, width, height, channels))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let a = corpus(3, 4, 20, 12, 3);
        let b = corpus(3, 4, 20, 12, 3);
        assert_eq!(a.len(), 4);
        for ((na, ia), (nb, ib)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            assert_eq!(ia, ib);
            assert_eq!((ia.width(), ia.height(), ia.channels()), (20, 12, 3));
        }
        assert_ne!(a[0].1, a[1].1);
        assert_eq!(corpus(1, 1, 5, 5, 1)[0].0, "synth_000.pgm");
    }

    #[test]
    fn neighbours_are_correlated() {
        let img = &corpus(9, 1, 48, 48, 1)[0].1;
        let d = img.data();
        let mean_step: f64 = d.windows(2).map(|p| (p[0] as f64 - p[1] as f64).abs()).sum::<f64>() / (d.len() - 1) as f64;
        assert!(mean_step < 12.0, "{mean_step}");
    }
}
