use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, IoContext, Result};

/// Row-major image with 1 or 3 channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        assert!(channels == 1 || channels == 3, "unsupported channel count {channels}");
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidInput(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidInput(format!(
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

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn idx(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.idx(x, y) + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.idx(x, y) + c;
        self.data[i] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = self.idx(x, y);
        if self.channels == 1 {
            [self.data[i]; 3]
        } else {
            [self.data[i], self.data[i + 1], self.data[i + 2]]
        }
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = self.idx(x, y);
        if self.channels == 1 {
            self.data[i] = rgb[0];
        } else {
            self.data[i..i + 3].copy_from_slice(&rgb);
        }
    }

    /// Rec. 709 luma.
    pub fn luminance(&self) -> ImageBuffer {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| 0.2126 * p[0] + 0.7152 * p[1] + 0.0722 * p[2])
            .collect();
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    pub fn check_unit_range(&self) -> Result<()> {
        match self.data.iter().position(|v| !(v.is_finite() && (0.0..=1.0).contains(v))) {
            Some(index) => Err(Error::NonFinite {
                what: "image value in [0,1]",
                index,
            }),
            None => Ok(()),
        }
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let file = File::open(path).at(path)?;
        let mut decoder = png::Decoder::new(BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND);
        let mut reader = decoder.read_info().map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let src_channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            other => return Err(Error::Png(format!("unsupported color type {other:?}"))),
        };
        let samples: Vec<f64> = match info.bit_depth {
            png::BitDepth::Eight => buf[..info.buffer_size()].iter().map(|&b| b as f64 / 255.0).collect(),
            png::BitDepth::Sixteen => buf[..info.buffer_size()]
                .chunks_exact(2)
                .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / 65535.0)
                .collect(),
            other => return Err(Error::Png(format!("unsupported bit depth {other:?}"))),
        };
        let channels = if src_channels <= 2 { 1 } else { 3 };
        let data = samples
            .chunks_exact(src_channels)
            .flat_map(|p| p[..channels].to_vec())
            .collect();
        Self::from_data(w, h, channels, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let color = if self.channels == 1 {
            png::ColorType::Grayscale
        } else {
            png::ColorType::Rgb
        };
        write_png(path, self.width, self.height, color, png::BitDepth::Eight, &bytes)
    }

    /// 16-bit grayscale PNG of channel 0 after mapping `[lo, hi]` to `[0, 1]`.
    pub fn save_png16(&self, path: &Path, lo: f64, hi: f64) -> Result<()> {
        let span = if hi > lo { hi - lo } else { 1.0 };
        let mut bytes = Vec::with_capacity(self.width * self.height * 2);
        for i in 0..self.width * self.height {
            let v = ((self.data[i * self.channels] - lo) / span).clamp(0.0, 1.0);
            bytes.extend_from_slice(&((v * 65535.0).round() as u16).to_be_bytes());
        }
        write_png(path, self.width, self.height, png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes)
    }
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    bytes: &[u8],
) -> Result<()> {
    let file = File::create(path).at(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
    writer.write_image_data(bytes).map_err(|e| Error::Png(e.to_string()))?;
    writer.finish().map_err(|e| Error::Png(e.to_string()))
}

/// Raw little-endian f32 depth map.
pub fn save_f32_raw(path: &Path, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
    std::fs::write(path, bytes).at(path)
}

pub fn load_f32_raw(path: &Path) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).at(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::InvalidInput(format!("{}: length not a multiple of 4", path.display())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_quantizes_to_8_bit() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = ImageBuffer::new(3, 2, 3);
        img.set_pixel(1, 1, [0.2, 0.5, 1.0]);
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        let back = ImageBuffer::load_png(&path).unwrap();
        assert!(back.same_shape(&img));
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn png16_and_raw_depth() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageBuffer::from_data(2, 1, 1, vec![0.25, 0.75]).unwrap();
        let path = dir.path().join("g.png");
        img.save_png16(&path, 0.0, 1.0).unwrap();
        let back = ImageBuffer::load_png(&path).unwrap();
        assert!((back.data[0] - 0.25).abs() < 1e-4);
        let raw = dir.path().join("d.f32");
        save_f32_raw(&raw, &[1.5, 2.25]).unwrap();
        assert_eq!(load_f32_raw(&raw).unwrap(), vec![1.5, 2.25]);
    }

    #[test]
    fn range_check_flags_bad_values() {
        let img = ImageBuffer::from_data(2, 1, 1, vec![0.5, 1.5]).unwrap();
        assert!(img.check_unit_range().is_err());
        assert!(ImageBuffer::from_data(2, 2, 1, vec![0.0; 3]).is_err());
    }
}
