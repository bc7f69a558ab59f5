//! Resize and normalization feeding the network.

use super::image_io::RawImage;
use crate::exec::TensorBuf;
use crate::graph::TensorShape;

/// Per-channel means subtracted from (R, G, B) after resize. No further
/// scaling is applied.
pub const CHANNEL_MEANS: [f64; 3] = [123.0, 117.0, 104.0];

/// Bilinear resize with half-pixel center alignment so the short edge equals
/// `target_short_edge` (the long edge is ceiled), then mean subtraction.
/// Returns the tensor and the short-edge scale factor for mapping detections
/// back to the input frame.
pub fn preprocess(image: &RawImage, target_short_edge: usize) -> (TensorBuf, f64) {
    let short = image.w.min(image.h);
    let scale = target_short_edge as f64 / short as f64;
    let (new_w, new_h) = if image.w <= image.h {
        (target_short_edge, (image.h as f64 * scale).ceil() as usize)
    } else {
        ((image.w as f64 * scale).ceil() as usize, target_short_edge)
    };
    let tensor = resize_to_tensor(image, new_w, new_h);
    (tensor, scale)
}

fn resize_to_tensor(image: &RawImage, new_w: usize, new_h: usize) -> TensorBuf {
    let mut data = vec![0f32; new_h * new_w * 3];
    let x_ratio = image.w as f64 / new_w as f64;
    let y_ratio = image.h as f64 / new_h as f64;
    for dy in 0..new_h {
        let sy = ((dy as f64 + 0.5) * y_ratio - 0.5).clamp(0.0, (image.h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(image.h - 1);
        let fy = sy - y0 as f64;
        for dx in 0..new_w {
            let sx = ((dx as f64 + 0.5) * x_ratio - 0.5).clamp(0.0, (image.w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(image.w - 1);
            let fx = sx - x0 as f64;
            let out = (dy * new_w + dx) * 3;
            for c in 0..3 {
                let v00 = image.pixel(x0, y0)[c] as f64;
                let v01 = image.pixel(x1, y0)[c] as f64;
                let v10 = image.pixel(x0, y1)[c] as f64;
                let v11 = image.pixel(x1, y1)[c] as f64;
                let top = (1.0 - fx) * v00 + fx * v01;
                let bottom = (1.0 - fx) * v10 + fx * v11;
                let value = (1.0 - fy) * top + fy * bottom;
                data[out + c] = (value - CHANNEL_MEANS[c]) as f32;
            }
        }
    }
    TensorBuf::new(TensorShape::new(1, new_h, new_w, 3), data)
}
