use std::io::{self, Read, Write};

use crate::tensor::Tensor;

/// Three-channel image with values in `[0, 1]`, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

pub const CHANNELS: usize = 3;

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), CHANNELS * width * height, "image buffer size");
        Self { width, height, data }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(CHANNELS * width * height);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, width * height));
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Mean value of each channel.
    pub fn channel_means(&self) -> [f64; 3] {
        let n = (self.width * self.height) as f64;
        std::array::from_fn(|c| self.channel(c).iter().sum::<f64>() / n)
    }
}

/// Stacks equally sized images into an `[N × 3 × H × W]` tensor.
pub fn stack_images(images: &[Image]) -> Tensor {
    assert!(!images.is_empty(), "empty image batch");
    let (w, h) = (images[0].width, images[0].height);
    let mut data = Vec::with_capacity(images.len() * CHANNELS * w * h);
    for img in images {
        assert_eq!((img.width, img.height), (w, h), "mixed image sizes in batch");
        data.extend_from_slice(&img.data);
    }
    Tensor::new(vec![images.len(), CHANNELS, h, w], data).expect("image batch shape")
}

const FARBFELD_MAGIC: &[u8; 8] = b"farbfeld";

/// Writes a farbfeld image: 16-byte header (magic, big-endian width and
/// height) followed by 16-bit big-endian RGBA pixels. Alpha is opaque.
pub fn write_farbfeld(image: &Image, mut w: impl Write) -> io::Result<()> {
    w.write_all(FARBFELD_MAGIC)?;
    w.write_all(&(image.width as u32).to_be_bytes())?;
    w.write_all(&(image.height as u32).to_be_bytes())?;
    let mut buf = Vec::with_capacity(8 * image.width * image.height);
    for y in 0..image.height {
        for x in 0..image.width {
            for c in 0..CHANNELS {
                let v = (image.get(c, y, x).clamp(0.0, 1.0) * 65535.0).round() as u16;
                buf.extend_from_slice(&v.to_be_bytes());
            }
            buf.extend_from_slice(&u16::MAX.to_be_bytes());
        }
    }
    w.write_all(&buf)
}

/// Reads a farbfeld image, dropping alpha.
pub fn read_farbfeld(mut r: impl Read) -> io::Result<Image> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if &header[..8] != FARBFELD_MAGIC {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "not a farbfeld image"));
    }
    let width = u32::from_be_bytes(header[8..12].try_into().unwrap()) as usize;
    let height = u32::from_be_bytes(header[12..16].try_into().unwrap()) as usize;
    if width == 0 || height == 0 || width.saturating_mul(height) > 1 << 26 {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("unsupported farbfeld size {width}x{height}"),
        ));
    }
    let mut buf = vec![0u8; 8 * width * height];
    r.read_exact(&mut buf)?;
    let mut img = Image::filled(width, height, [0.0; 3]);
    for (i, px) in buf.chunks_exact(8).enumerate() {
        let (y, x) = (i / width, i % width);
        for c in 0..CHANNELS {
            let v = u16::from_be_bytes([px[2 * c], px[2 * c + 1]]);
            img.set(c, y, x, f64::from(v) / 65535.0);
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn farbfeld_round_trip_quantizes_to_16_bits() {
        let data: Vec<f64> = (0..3 * 5 * 4).map(|i| i as f64 / 59.0).collect();
        let img = Image::new(5, 4, data);
        let mut bytes = Vec::new();
        write_farbfeld(&img, &mut bytes).unwrap();
        assert_eq!(bytes.len(), 16 + 8 * 20);
        assert_eq!(&bytes[..8], b"farbfeld");
        let back = read_farbfeld(bytes.as_slice()).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }

    #[test]
    fn farbfeld_rejects_bad_magic() {
        let bytes = [0u8; 24];
        assert!(read_farbfeld(&bytes[..]).is_err());
    }
}
