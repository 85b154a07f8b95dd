//! Raster containers, Netpbm I/O, bilinear resizing and the student's
//! 7-plane input stack.

mod channels;
mod netpbm;
mod resize;

pub use channels::{to_student_channels, ChannelStack, Plane, STUDENT_PLANES};
pub use netpbm::{decode_netpbm, encode_netpbm, read_image, read_mask, write_netpbm};
pub use resize::{linear_taps, resize_bilinear, Tap};

use crate::error::{Error, Result};

/// An 8-bit raster with 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::argument(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::argument(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::argument(format!(
                "image data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, pixel: &[u8]) -> Result<Self> {
        let data = pixel
            .iter()
            .copied()
            .cycle()
            .take(width * height * pixel.len())
            .collect();
        Self::new(width, height, pixel.len(), data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    /// Copies the `w`×`h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::argument(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{} image",
                self.width, self.height
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(w * h * c);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * c;
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Self::new(w, h, c, data)
    }

    pub fn resize(&self, width: usize, height: usize) -> Result<Self> {
        let data = resize_bilinear(
            &self.data,
            self.width,
            self.height,
            self.channels,
            width,
            height,
        )?;
        Self::new(width, height, self.channels, data)
    }
}

/// An 8-bit soft segmentation: 0 is background, 255 full confidence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SoftMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl SoftMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::argument(format!(
                "mask dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::argument(format!(
                "mask data length {} does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![0; width * height])
    }

    /// Quantizes values in `[0, 1]` (clamped) to 0–255.
    pub fn from_unit(width: usize, height: usize, values: &[f32]) -> Result<Self> {
        let data = values
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn max_value(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        let gray = Image::from(self.clone()).crop(x0, y0, w, h)?;
        SoftMask::try_from(gray)
    }

    pub fn resize(&self, width: usize, height: usize) -> Result<Self> {
        let data = resize_bilinear(&self.data, self.width, self.height, 1, width, height)?;
        Self::new(width, height, data)
    }
}

impl From<SoftMask> for Image {
    fn from(mask: SoftMask) -> Self {
        Image {
            width: mask.width,
            height: mask.height,
            channels: 1,
            data: mask.data,
        }
    }
}

impl TryFrom<Image> for SoftMask {
    type Error = Error;

    fn try_from(image: Image) -> Result<Self> {
        if image.channels != 1 {
            return Err(Error::argument(format!(
                "soft mask needs a 1-channel image, got {} channels",
                image.channels
            )));
        }
        SoftMask::new(image.width, image.height, image.data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_buffers() {
        assert!(Image::new(2, 2, 3, vec![0; 11]).is_err());
        assert!(Image::new(0, 2, 1, vec![]).is_err());
        assert!(Image::new(1, 1, 4, vec![0; 4]).is_err());
        assert!(SoftMask::new(3, 3, vec![0; 8]).is_err());
    }

    #[test]
    fn crop_copies_window() {
        let img = Image::new(3, 2, 1, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let c = img.crop(1, 0, 2, 2).unwrap();
        assert_eq!(c.data(), &[2, 3, 5, 6]);
        assert!(img.crop(2, 0, 2, 1).is_err());
    }

    #[test]
    fn unit_quantization_clamps() {
        let m = SoftMask::from_unit(4, 1, &[-0.5, 0.0, 0.5, 1.7]).unwrap();
        assert_eq!(m.data(), &[0, 0, 128, 255]);
    }
}
