//! The student's input: RGB, hue, saturation and luminance derivatives.

use super::Image;
use crate::error::{Error, Result};

pub const STUDENT_PLANES: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Plane {
    R = 0,
    G = 1,
    B = 2,
    Hue = 3,
    Saturation = 4,
    Dx = 5,
    Dy = 6,
}

/// Seven planar `f32` planes in the order `[R, G, B, H, S, Dx, Dy]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStack {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ChannelStack {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != STUDENT_PLANES * width * height {
            return Err(Error::argument(format!(
                "channel stack {width}x{height} needs {} values, got {}",
                STUDENT_PLANES * width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, plane: Plane) -> &[f32] {
        let n = self.width * self.height;
        let i = plane as usize;
        &self.data[i * n..(i + 1) * n]
    }
}

/// HSV hue in `[0, 1)` and saturation in `[0, 1]` for unit RGB.
/// Achromatic pixels get hue 0.
fn hue_saturation(r: f32, g: f32, b: f32) -> (f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta <= 0.0 {
        return (0.0, s);
    }
    let sector = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    let h = sector / 6.0;
    // rem_euclid can land on exactly 6.0 for tiny negative inputs.
    (if h >= 1.0 { 0.0 } else { h }, s)
}

pub fn to_student_channels(image: &Image, net_input_size: usize) -> Result<ChannelStack> {
    if image.channels() != 3 {
        return Err(Error::argument(format!(
            "student input needs an RGB image, got {} channels",
            image.channels()
        )));
    }
    let resized;
    let image = if image.width() == net_input_size && image.height() == net_input_size {
        image
    } else {
        resized = image.resize(net_input_size, net_input_size)?;
        &resized
    };
    let (w, h) = (net_input_size, net_input_size);
    let n = w * h;
    let mut data = vec![0f32; STUDENT_PLANES * n];
    let mut luma = vec![0f32; n];
    for (i, px) in image.data().chunks_exact(3).enumerate() {
        let r = px[0] as f32 / 255.0;
        let g = px[1] as f32 / 255.0;
        let b = px[2] as f32 / 255.0;
        let (hue, sat) = hue_saturation(r, g, b);
        data[i] = r;
        data[n + i] = g;
        data[2 * n + i] = b;
        data[3 * n + i] = hue;
        data[4 * n + i] = sat;
        luma[i] = 0.299 * r + 0.587 * g + 0.114 * b;
    }
    let (dx, rest) = data[5 * n..].split_at_mut(n);
    let dy = &mut rest[..n];
    for y in 0..h {
        let up = y.saturating_sub(1);
        let down = (y + 1).min(h - 1);
        for x in 0..w {
            let left = x.saturating_sub(1);
            let right = (x + 1).min(w - 1);
            dx[y * w + x] = (luma[y * w + right] - luma[y * w + left]) * 0.5;
            dy[y * w + x] = (luma[down * w + x] - luma[up * w + x]) * 0.5;
        }
    }
    Ok(ChannelStack {
        width: w,
        height: h,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gray_image_has_no_saturation_or_gradient() {
        let img = Image::filled(5, 5, &[90, 90, 90]).unwrap();
        let s = to_student_channels(&img, 5).unwrap();
        assert!(s.plane(Plane::Saturation).iter().all(|&v| v == 0.0));
        assert!(s.plane(Plane::Hue).iter().all(|&v| v == 0.0));
        assert!(s.plane(Plane::Dx).iter().all(|&v| v == 0.0));
        assert!(s.plane(Plane::Dy).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pure_red() {
        let img = Image::filled(4, 4, &[255, 0, 0]).unwrap();
        let s = to_student_channels(&img, 4).unwrap();
        assert!(s.plane(Plane::Hue).iter().all(|&v| v == 0.0));
        assert!(s.plane(Plane::Saturation).iter().all(|&v| v == 1.0));
        assert!(s.plane(Plane::R).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn hue_of_primaries() {
        let (h, _) = hue_saturation(0.0, 1.0, 0.0);
        assert!((h - 1.0 / 3.0).abs() < 1e-6);
        let (h, _) = hue_saturation(0.0, 0.0, 1.0);
        assert!((h - 2.0 / 3.0).abs() < 1e-6);
        let (h, _) = hue_saturation(1.0, 0.0, 1.0);
        assert!((h - 5.0 / 6.0).abs() < 1e-6);
    }

    #[test]
    fn vertical_step_edge() {
        // Columns 0-1 black, 2-3 white. Luma is 0 then 1 (up to rounding of
        // the weights), so central differences are luma/2 in columns 1 and 2
        // and zero elsewhere, including the replicated border columns.
        let mut data = Vec::new();
        for _ in 0..4 {
            for x in 0..4 {
                let v = if x >= 2 { 255 } else { 0 };
                data.extend_from_slice(&[v, v, v]);
            }
        }
        let img = Image::new(4, 4, 3, data).unwrap();
        let s = to_student_channels(&img, 4).unwrap();
        let luma_white = 0.299f32 + 0.587 + 0.114;
        let dx = s.plane(Plane::Dx);
        for y in 0..4 {
            assert_eq!(dx[y * 4], 0.0);
            assert_eq!(dx[y * 4 + 1], luma_white * 0.5);
            assert_eq!(dx[y * 4 + 2], luma_white * 0.5);
            assert_eq!(dx[y * 4 + 3], 0.0);
        }
        assert!(s.plane(Plane::Dy).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resizes_to_network_size() {
        let img = Image::filled(10, 6, &[10, 20, 30]).unwrap();
        let s = to_student_channels(&img, 8).unwrap();
        assert_eq!((s.width(), s.height(), s.data().len()), (8, 8, 7 * 64));
    }

    #[test]
    fn rejects_gray_input() {
        let img = Image::filled(4, 4, &[10]).unwrap();
        assert!(to_student_channels(&img, 4).is_err());
    }

    proptest! {
        #[test]
        fn planes_respect_ranges(data in proptest::collection::vec(any::<u8>(), 6 * 6 * 3)) {
            let img = Image::new(6, 6, 3, data).unwrap();
            let s = to_student_channels(&img, 6).unwrap();
            for p in [Plane::R, Plane::G, Plane::B, Plane::Saturation] {
                prop_assert!(s.plane(p).iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
            prop_assert!(s.plane(Plane::Hue).iter().all(|&v| (0.0..1.0).contains(&v)));
            for p in [Plane::Dx, Plane::Dy] {
                prop_assert!(s.plane(p).iter().all(|&v| (-1.0..=1.0).contains(&v)));
            }
        }

        #[test]
        fn constant_images_have_zero_derivatives(px in proptest::array::uniform3(any::<u8>())) {
            let img = Image::filled(5, 4, &px).unwrap();
            let s = to_student_channels(&img, 6).unwrap();
            prop_assert!(s.plane(Plane::Dx).iter().all(|&v| v == 0.0));
            prop_assert!(s.plane(Plane::Dy).iter().all(|&v| v == 0.0));
        }
    }
}
