use std::path::{Path, PathBuf};

use candle_core::DType;
use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::FlowField;

/// HSV to 8-bit RGB; `h` in degrees.
fn hsv_to_rgb(h: f64, s: f64, v: f64) -> Rgb<u8> {
    let c = v * s;
    let hp = (h.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |f: f64| ((f + m).clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([q(r), q(g), q(b)])
}

/// Colour-wheel rendering of the first clip in `flow`: hue encodes direction,
/// saturation encodes magnitude relative to the clip maximum, value is fixed at
/// one so still pixels are white.
pub fn visualize_flow(flow: &FlowField) -> Result<Vec<RgbImage>> {
    let (_, p, _, h, w) = flow.tensor().dims5()?;
    let data = flow
        .tensor()
        .narrow(0, 0, 1)?
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    let plane = h * w;
    let mag = |f: usize, i: usize| {
        let u = data[f * 2 * plane + i];
        let v = data[f * 2 * plane + plane + i];
        (u, v, (u * u + v * v).sqrt())
    };
    let mut max = 0.0f64;
    for f in 0..p {
        for i in 0..plane {
            max = max.max(mag(f, i).2);
        }
    }
    let mut frames = Vec::with_capacity(p);
    for f in 0..p {
        let mut img = RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let (u, v, m) = mag(f, y * w + x);
                let px = if max > 0.0 && m > 0.0 {
                    let hue = v.atan2(u).to_degrees();
                    hsv_to_rgb(hue, m / max, 1.0)
                } else {
                    Rgb([255, 255, 255])
                };
                img.put_pixel(x as u32, y as u32, px);
            }
        }
        frames.push(img);
    }
    Ok(frames)
}

/// `<clip_id>_flow_<frame:04d>.png`
pub fn flow_frame_name(clip_id: &str, frame: usize) -> String {
    format!("{clip_id}_flow_{frame:04}.png")
}

/// Render and save one PNG per flow frame; returns the written paths.
pub fn write_flow_pngs(flow: &FlowField, dir: &Path, clip_id: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for (i, img) in visualize_flow(flow)?.iter().enumerate() {
        let path = dir.join(flow_frame_name(clip_id, i));
        img.save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Tensor};

    #[test]
    fn zero_flow_is_white() {
        let f = FlowField::new(Tensor::zeros((1, 2, 2, 5, 5), DType::F32, &Device::Cpu).unwrap()).unwrap();
        let frames = visualize_flow(&f).unwrap();
        assert_eq!(frames.len(), 2);
        assert!(frames.iter().all(|im| im.pixels().all(|p| p.0 == [255, 255, 255])));
    }

    #[test]
    fn rightward_flow_is_one_hue() {
        let u = Tensor::ones((1, 1, 1, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let v = Tensor::zeros((1, 1, 1, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let f = FlowField::new(Tensor::cat(&[u, v], 2).unwrap()).unwrap();
        let im = &visualize_flow(&f).unwrap()[0];
        assert!(im.pixels().all(|p| p.0 == [255, 0, 0]));
    }

    #[test]
    fn frame_names_are_zero_padded() {
        assert_eq!(flow_frame_name("clip_12", 3), "clip_12_flow_0003.png");
    }
}
