//! Owned 8-bit rasters with 1 (gray) or 3 (RGB) channels.

use std::io::Cursor;

use image::{DynamicImage, ImageFormat, ImageReader};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("unsupported image format (only PNG and JPEG are accepted)")]
    UnsupportedFormat,
    #[error("image decode failed: {0}")]
    Decode(String),
    #[error("image encode failed: {0}")]
    Encode(String),
    #[error("degenerate raster {width}x{height}")]
    Empty { width: u32, height: u32 },
    #[error("crop {x},{y} {w}x{h} outside {width}x{height} raster")]
    OutOfBounds {
        x: u32,
        y: u32,
        w: u32,
        h: u32,
        width: u32,
        height: u32,
    },
}

/// Row-major interleaved pixels, `height * width * channels` bytes.
#[derive(Clone, PartialEq, Eq)]
pub struct Raster {
    width: u32,
    height: u32,
    channels: u8,
    data: Vec<u8>,
}

impl std::fmt::Debug for Raster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Raster")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("channels", &self.channels)
            .finish()
    }
}

impl Raster {
    pub fn new(width: u32, height: u32, channels: u8, data: Vec<u8>) -> Result<Self, RasterError> {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        if width == 0 || height == 0 {
            return Err(RasterError::Empty { width, height });
        }
        assert_eq!(data.len(), width as usize * height as usize * channels as usize);
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Solid fill.
    pub fn filled(width: u32, height: u32, channels: u8, value: u8) -> Self {
        let n = width as usize * height as usize * channels as usize;
        Self::new(width, height, channels, vec![value; n]).expect("nonzero dimensions")
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * self.channels as usize
    }

    pub fn pixel(&self, x: u32, y: u32) -> &[u8] {
        let o = self.offset(x, y);
        &self.data[o..o + self.channels as usize]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, value: &[u8]) {
        let o = self.offset(x, y);
        let c = self.channels as usize;
        self.data[o..o + c].copy_from_slice(&value[..c]);
    }

    /// Mean of channels, scaled to [0, 1].
    pub fn luminance(&self, x: u32, y: u32) -> f64 {
        let px = self.pixel(x, y);
        let sum: u32 = px.iter().map(|&v| v as u32).sum();
        sum as f64 / (255.0 * px.len() as f64)
    }

    /// Decode PNG or JPEG bytes. Alpha is composited over white; with
    /// `promote_gray` single-channel images come back as RGB.
    pub fn decode(bytes: &[u8], promote_gray: bool) -> Result<Self, RasterError> {
        let format = image::guess_format(bytes).map_err(|_| RasterError::UnsupportedFormat)?;
        if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg) {
            return Err(RasterError::UnsupportedFormat);
        }
        let img = ImageReader::with_format(Cursor::new(bytes), format)
            .decode()
            .map_err(|e| RasterError::Decode(e.to_string()))?;
        Self::from_dynamic(&img, promote_gray)
    }

    pub fn from_dynamic(img: &DynamicImage, promote_gray: bool) -> Result<Self, RasterError> {
        let gray = !img.color().has_color();
        if gray && !promote_gray {
            let la = img.to_luma_alpha8();
            let (w, h) = la.dimensions();
            let data = la
                .pixels()
                .map(|p| over_white(p.0[0], p.0[1]))
                .collect();
            Self::new(w, h, 1, data)
        } else {
            let rgba = img.to_rgba8();
            let (w, h) = rgba.dimensions();
            let mut data = Vec::with_capacity(w as usize * h as usize * 3);
            for p in rgba.pixels() {
                let a = p.0[3];
                data.extend_from_slice(&[
                    over_white(p.0[0], a),
                    over_white(p.0[1], a),
                    over_white(p.0[2], a),
                ]);
            }
            Self::new(w, h, 3, data)
        }
    }

    pub fn to_dynamic(&self) -> DynamicImage {
        match self.channels {
            1 => DynamicImage::ImageLuma8(
                image::GrayImage::from_raw(self.width, self.height, self.data.clone())
                    .expect("buffer size matches"),
            ),
            _ => DynamicImage::ImageRgb8(
                image::RgbImage::from_raw(self.width, self.height, self.data.clone())
                    .expect("buffer size matches"),
            ),
        }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, RasterError> {
        let mut out = Cursor::new(Vec::new());
        self.to_dynamic()
            .write_to(&mut out, ImageFormat::Png)
            .map_err(|e| RasterError::Encode(e.to_string()))?;
        Ok(out.into_inner())
    }

    /// Copy out the `w`x`h` region whose top-left corner is (`x`, `y`).
    pub fn crop(&self, x: u32, y: u32, w: u32, h: u32) -> Result<Self, RasterError> {
        let fits = w >= 1
            && h >= 1
            && x.checked_add(w).is_some_and(|r| r <= self.width)
            && y.checked_add(h).is_some_and(|b| b <= self.height);
        if !fits {
            return Err(RasterError::OutOfBounds {
                x,
                y,
                w,
                h,
                width: self.width,
                height: self.height,
            });
        }
        let c = self.channels as usize;
        let mut data = Vec::with_capacity(w as usize * h as usize * c);
        for row in y..y + h {
            let start = self.offset(x, row);
            data.extend_from_slice(&self.data[start..start + w as usize * c]);
        }
        Self::new(w, h, self.channels, data)
    }
}

fn over_white(v: u8, alpha: u8) -> u8 {
    let a = alpha as u32;
    ((v as u32 * a + 255 * (255 - a) + 127) / 255) as u8
}
