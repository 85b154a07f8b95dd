//! Edge-clamped bilinear resampling with half-pixel centers.
//!
//! Destination sample `d` maps to source coordinate
//! `(d + 0.5) * src_len / dst_len - 0.5`, clamped to `[0, src_len - 1]`.

use crate::error::{Error, Result};

/// Two-point interpolation stencil along one axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    /// Weight of `hi`; `lo` receives `1 - frac`.
    pub frac: f64,
}

pub fn linear_taps(src_len: usize, dst_len: usize) -> Vec<Tap> {
    let scale = src_len as f64 / dst_len as f64;
    let last = (src_len - 1) as f64;
    (0..dst_len)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src_len - 1);
            Tap {
                lo,
                hi,
                frac: s - lo as f64,
            }
        })
        .collect()
}

/// Resizes interleaved 8-bit samples, rounding to nearest.
pub fn resize_bilinear(
    data: &[u8],
    width: usize,
    height: usize,
    channels: usize,
    target_w: usize,
    target_h: usize,
) -> Result<Vec<u8>> {
    if target_w == 0 || target_h == 0 {
        return Err(Error::argument(format!(
            "resize target must be positive, got {target_w}x{target_h}"
        )));
    }
    if target_w == width && target_h == height {
        return Ok(data.to_vec());
    }
    let xs = linear_taps(width, target_w);
    let ys = linear_taps(height, target_h);
    let mut out = Vec::with_capacity(target_w * target_h * channels);
    for ty in &ys {
        let row_lo = &data[ty.lo * width * channels..(ty.lo + 1) * width * channels];
        let row_hi = &data[ty.hi * width * channels..(ty.hi + 1) * width * channels];
        for tx in &xs {
            for c in 0..channels {
                let p00 = row_lo[tx.lo * channels + c] as f64;
                let p01 = row_lo[tx.hi * channels + c] as f64;
                let p10 = row_hi[tx.lo * channels + c] as f64;
                let p11 = row_hi[tx.hi * channels + c] as f64;
                let top = (1.0 - tx.frac) * p00 + tx.frac * p01;
                let bottom = (1.0 - tx.frac) * p10 + tx.frac * p11;
                let v = (1.0 - ty.frac) * top + ty.frac * bottom;
                out.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagery::{Image, SoftMask};
    use proptest::prelude::*;

    #[test]
    fn identity_size_is_noop() {
        let img = Image::new(3, 2, 3, (0..18).collect()).unwrap();
        assert_eq!(img.resize(3, 2).unwrap(), img);
    }

    #[test]
    fn constant_stays_constant() {
        let img = Image::filled(2, 2, &[17, 200, 255]).unwrap();
        for (w, h) in [(1, 1), (5, 3), (7, 11), (64, 64)] {
            let r = img.resize(w, h).unwrap();
            assert!(r.data().chunks(3).all(|p| p == [17, 200, 255]));
        }
    }

    #[test]
    fn half_pixel_upsample_of_two_samples() {
        // Source coordinates for the three outputs: -1/6 -> 0, 1/2, 7/6 -> 1.
        // The middle sample is 0.5 * 0 + 0.5 * 255 = 127.5, rounded to 128.
        let m = SoftMask::new(1, 2, vec![0, 255]).unwrap();
        assert_eq!(m.resize(1, 3).unwrap().data(), &[0, 128, 255]);
        let m = SoftMask::new(2, 1, vec![0, 255]).unwrap();
        assert_eq!(m.resize(3, 1).unwrap().data(), &[0, 128, 255]);
    }

    #[test]
    fn downsample_by_four_averages_middle_pair() {
        let taps = linear_taps(128, 32);
        assert_eq!(taps[0], Tap { lo: 1, hi: 2, frac: 0.5 });
        assert_eq!(taps[31], Tap { lo: 125, hi: 126, frac: 0.5 });
    }

    #[test]
    fn zero_target_is_an_error() {
        let m = SoftMask::zeros(2, 2).unwrap();
        assert!(m.resize(0, 2).is_err());
        assert!(m.resize(2, 0).is_err());
    }

    proptest! {
        #[test]
        fn output_within_input_range(
            w in 1usize..9, h in 1usize..9, tw in 1usize..20, th in 1usize..20,
            data in proptest::collection::vec(any::<u8>(), 64..=64),
        ) {
            let data = data[..w * h].to_vec();
            let lo = *data.iter().min().unwrap();
            let hi = *data.iter().max().unwrap();
            let m = SoftMask::new(w, h, data).unwrap();
            let r = m.resize(tw, th).unwrap();
            prop_assert_eq!(r.data().len(), tw * th);
            prop_assert!(r.data().iter().all(|&v| v >= lo && v <= hi));
        }
    }
}
