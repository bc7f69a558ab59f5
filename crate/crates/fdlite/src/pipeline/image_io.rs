//! Image ingestion and annotated output. Binary PPM (P6) is parsed and
//! written natively; PNG goes through the `image` crate.

use super::{Detection, PipelineError};
use std::io::Write;
use std::path::Path;

/// 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub w: usize,
    pub h: usize,
    pub data: Vec<u8>,
}

impl RawImage {
    pub fn new(w: usize, h: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), w * h * 3);
        RawImage { w, h, data }
    }

    pub fn filled(w: usize, h: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(w * h * 3);
        for _ in 0..w * h {
            data.extend_from_slice(&rgb);
        }
        RawImage { w, h, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.w + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.w + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn flip_horizontal(&self) -> RawImage {
        let mut out = self.clone();
        for y in 0..self.h {
            for x in 0..self.w {
                out.set_pixel(self.w - 1 - x, y, self.pixel(x, y));
            }
        }
        out
    }
}

/// Load a PPM (P6) or PNG image, detected by signature.
pub fn load_image(path: &Path) -> Result<RawImage, PipelineError> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(b"P6") {
        parse_ppm(&bytes)
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
            .map_err(|e| PipelineError::Format(format!("png decode: {e}")))?
            .to_rgb8();
        Ok(RawImage::new(
            decoded.width() as usize,
            decoded.height() as usize,
            decoded.into_raw(),
        ))
    } else {
        Err(PipelineError::Format(format!(
            "unsupported image format in {}",
            path.display()
        )))
    }
}

/// Binary PPM: "P6", whitespace-separated width/height/maxval with # comment
/// support, one whitespace byte, then raw RGB triplets.
pub fn parse_ppm(bytes: &[u8]) -> Result<RawImage, PipelineError> {
    if !bytes.starts_with(b"P6") {
        return Err(PipelineError::Format("not a P6 ppm".into()));
    }
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(b) = bytes.get(pos) {
                        pos += 1;
                        if *b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(PipelineError::Format("truncated ppm header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if pos == start {
            return Err(PipelineError::Format("malformed ppm header".into()));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        *field = text
            .parse()
            .map_err(|_| PipelineError::Format("bad ppm header number".into()))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(PipelineError::Format(format!(
            "unsupported ppm maxval {maxval}"
        )));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(PipelineError::Format(
                "missing ppm header terminator".into(),
            ))
        }
    }
    let need = w * h * 3;
    let pixels = bytes
        .get(pos..pos + need)
        .ok_or_else(|| PipelineError::Format("truncated ppm pixel data".into()))?;
    Ok(RawImage::new(w, h, pixels.to_vec()))
}

pub fn write_ppm(image: &RawImage, path: &Path) -> Result<(), PipelineError> {
    let mut file = std::fs::File::create(path)?;
    write!(file, "P6\n{} {}\n255\n", image.w, image.h)?;
    file.write_all(&image.data)?;
    Ok(())
}

/// Save as PPM or PNG depending on the extension.
pub fn save_image(image: &RawImage, path: &Path) -> Result<(), PipelineError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => write_ppm(image, path),
        Some("png") => {
            let buffer =
                image::RgbImage::from_raw(image.w as u32, image.h as u32, image.data.clone())
                    .expect("dimensions match buffer");
            buffer
                .save_with_format(path, image::ImageFormat::Png)
                .map_err(|e| PipelineError::Format(format!("png encode: {e}")))
        }
        other => Err(PipelineError::Format(format!(
            "unsupported output extension {other:?}"
        ))),
    }
}

const BOX_COLOR: [u8; 3] = [0, 255, 0];
const LANDMARK_COLOR: [u8; 3] = [255, 0, 0];

/// Copy of the image with detection boxes and landmark dots drawn on it.
/// Everything is clamped to the canvas; nothing draws out of bounds.
pub fn annotate(image: &RawImage, detections: &[Detection]) -> RawImage {
    let mut out = image.clone();
    let clamp_x = |v: f64| (v.round().max(0.0) as usize).min(image.w.saturating_sub(1));
    let clamp_y = |v: f64| (v.round().max(0.0) as usize).min(image.h.saturating_sub(1));
    for det in detections {
        let x0 = clamp_x(det.rect.x);
        let y0 = clamp_y(det.rect.y);
        let x1 = clamp_x(det.rect.x + det.rect.w);
        let y1 = clamp_y(det.rect.y + det.rect.h);
        for x in x0..=x1 {
            out.set_pixel(x, y0, BOX_COLOR);
            out.set_pixel(x, y1, BOX_COLOR);
        }
        for y in y0..=y1 {
            out.set_pixel(x0, y, BOX_COLOR);
            out.set_pixel(x1, y, BOX_COLOR);
        }
        for point in &det.landmarks {
            let px = clamp_x(point[0]);
            let py = clamp_y(point[1]);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let x = (px as i64 + dx).clamp(0, image.w as i64 - 1) as usize;
                    let y = (py as i64 + dy).clamp(0, image.h as i64 - 1) as usize;
                    out.set_pixel(x, y, LANDMARK_COLOR);
                }
            }
        }
    }
    out
}
