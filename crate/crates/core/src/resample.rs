//! Image resampling: block averaging, integer-factor upsampling and
//! arbitrary-size area / bilinear resizing. All operate per channel.

use crate::error::{Error, Result};
use crate::image::Image;

/// Pairwise (tree) summation; exact for `2^k` copies of one value.
fn pairwise_sum(buf: &mut [f64]) -> f64 {
    let mut n = buf.len();
    if n == 0 {
        return 0.0;
    }
    while n > 1 {
        let half = n / 2;
        for i in 0..half {
            buf[i] = buf[2 * i] + buf[2 * i + 1];
        }
        if n % 2 == 1 {
            buf[half] = buf[n - 1];
            n = half + 1;
        } else {
            n = half;
        }
    }
    buf[0]
}

fn check_factor(img: &Image, factor: usize) -> Result<()> {
    if factor == 0 {
        return Err(Error::Param("resampling factor must be >= 1".into()));
    }
    if img.height() % factor != 0 || img.width() % factor != 0 {
        return Err(Error::Shape(format!(
            "{}x{} image is not divisible by factor {factor}",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

fn with_planes(like: &Image, h: usize, w: usize, mut f: impl FnMut(&[f64], &mut [f64])) -> Result<Image> {
    let c = like.channels();
    let mut data = vec![0.0; c * h * w];
    for ch in 0..c {
        f(like.plane(ch), &mut data[ch * h * w..(ch + 1) * h * w]);
    }
    Image::new(c, h, w, like.domain(), data)
}

/// Mean over non-overlapping `factor x factor` blocks.
pub fn block_average(img: &Image, factor: usize) -> Result<Image> {
    check_factor(img, factor)?;
    let (h, w) = (img.height(), img.width());
    let (oh, ow) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut buf = vec![0.0; factor * factor];
    with_planes(img, oh, ow, |src, dst| {
        for by in 0..oh {
            for bx in 0..ow {
                for dy in 0..factor {
                    let row = (by * factor + dy) * w + bx * factor;
                    buf[dy * factor..(dy + 1) * factor].copy_from_slice(&src[row..row + factor]);
                }
                dst[by * ow + bx] = pairwise_sum(&mut buf) * inv;
            }
        }
    })
}

pub fn upsample_nearest(img: &Image, factor: usize) -> Result<Image> {
    if factor == 0 {
        return Err(Error::Param("resampling factor must be >= 1".into()));
    }
    let (h, w) = (img.height(), img.width());
    let ow = w * factor;
    with_planes(img, h * factor, ow, |src, dst| {
        for (y, row) in dst.chunks_mut(ow).enumerate() {
            let s = &src[(y / factor) * w..(y / factor + 1) * w];
            for (x, v) in row.iter_mut().enumerate() {
                *v = s[x / factor];
            }
        }
    })
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(img: &Image, oh: usize, ow: usize) -> Result<Image> {
    if oh == 0 || ow == 0 {
        return Err(Error::Param("resize target must be non-empty".into()));
    }
    let (h, w) = (img.height(), img.width());
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ty = taps(oh, h);
    let tx = taps(ow, w);
    with_planes(img, oh, ow, |src, dst| {
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[y * ow + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    })
}

/// Area (box-overlap) resize: each output pixel is the mean of the input
/// area it covers. Reduces to block averaging for integer factors.
pub fn resize_area(img: &Image, oh: usize, ow: usize) -> Result<Image> {
    if oh == 0 || ow == 0 {
        return Err(Error::Param("resize target must be non-empty".into()));
    }
    let (h, w) = (img.height(), img.width());
    // per output index: list of (input index, weight) with weights summing to 1
    let weights = |out: usize, inp: usize| -> Vec<Vec<(usize, f64)>> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|i| {
                let (a, b) = (i as f64 * scale, (i + 1) as f64 * scale);
                let mut taps = Vec::new();
                let mut j = a.floor() as usize;
                while (j as f64) < b && j < inp {
                    let overlap = (b.min(j as f64 + 1.0) - a.max(j as f64)).max(0.0);
                    if overlap > 0.0 {
                        taps.push((j, overlap / scale));
                    }
                    j += 1;
                }
                taps
            })
            .collect()
    };
    let wy = weights(oh, h);
    let wx = weights(ow, w);
    with_planes(img, oh, ow, |src, dst| {
        let mut rows = vec![0.0; h * ow];
        for y in 0..h {
            for (x, taps) in wx.iter().enumerate() {
                rows[y * ow + x] = taps.iter().map(|&(j, wt)| src[y * w + j] * wt).sum();
            }
        }
        for (y, taps) in wy.iter().enumerate() {
            for x in 0..ow {
                dst[y * ow + x] = taps.iter().map(|&(j, wt)| rows[j * ow + x] * wt).sum();
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Domain;

    fn ramp(h: usize, w: usize) -> Image {
        Image::new(1, h, w, Domain::Diffusion11, (0..h * w).map(|i| i as f64 * 0.01).collect()).unwrap()
    }

    #[test]
    fn pairwise_sum_matches_and_is_exact_on_powers_of_two() {
        let mut v = vec![0.1; 64];
        assert_eq!(pairwise_sum(&mut v), 0.1 * 64.0);
        let mut v: Vec<f64> = (1..=7).map(f64::from).collect();
        assert_eq!(pairwise_sum(&mut v), 28.0);
    }

    #[test]
    fn area_matches_block_average_for_integer_factor() {
        let x = ramp(8, 12);
        let a = resize_area(&x, 2, 3).unwrap();
        let b = block_average(&x, 4).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn bilinear_preserves_constants_and_identity_size() {
        let c = Image::filled(3, 5, 7, Domain::Pixel01, 0.3).unwrap();
        let r = resize_bilinear(&c, 11, 4).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        let x = ramp(6, 6);
        assert_eq!(resize_bilinear(&x, 6, 6).unwrap(), x);
    }

    #[test]
    fn nearest_then_block_average_is_identity() {
        let x = ramp(3, 4);
        let up = upsample_nearest(&x, 4).unwrap();
        assert_eq!(up.shape(), (1, 12, 16));
        assert_eq!(block_average(&up, 4).unwrap(), x);
    }

    #[test]
    fn indivisible_block_average_is_shape_error() {
        assert!(matches!(block_average(&ramp(6, 6), 4), Err(Error::Shape(_))));
    }
}
