//! Frame I/O: 8-bit grayscale PNG directories and raw planar YUV 4:2:0.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::{extract_luma, LumaFrame, PixelFormat};

pub fn load_png_gray(path: &Path) -> Result<LumaFrame> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    extract_luma(img.as_raw(), PixelFormat::Gray8, w, h)
}

pub fn save_png_gray(path: &Path, frame: &LumaFrame) -> Result<()> {
    let (h, w) = (frame.height(), frame.width());
    let buf: Vec<u8> = frame
        .pixels()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer sized from frame dims");
    img.save(path)?;
    Ok(())
}

/// Load every `*.png` in a directory in lexicographic order (the expected
/// naming is `%06d.png`).
pub fn load_frame_dir(dir: &Path) -> Result<Vec<LumaFrame>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyInput("no PNG frames in directory"));
    }
    let frames: Vec<LumaFrame> = paths.iter().map(|p| load_png_gray(p)).collect::<Result<_>>()?;
    let (h, w) = (frames[0].height(), frames[0].width());
    if frames.iter().any(|f| (f.height(), f.width()) != (h, w)) {
        return Err(Error::shape("frames in directory differ in size"));
    }
    Ok(frames)
}

/// Read all complete frames of a raw planar YUV 4:2:0 file with the given
/// dimensions, returning luminance planes.
pub fn load_yuv420_frames(path: &Path, width: usize, height: usize) -> Result<Vec<LumaFrame>> {
    let data = fs::read(path)?;
    let chroma = width.div_ceil(2) * height.div_ceil(2);
    let frame_bytes = width * height + 2 * chroma;
    if data.len() < frame_bytes {
        return Err(Error::MalformedInput(format!(
            "file holds {} bytes, one {width}x{height} 4:2:0 frame needs {frame_bytes}",
            data.len()
        )));
    }
    data.chunks_exact(frame_bytes)
        .map(|chunk| extract_luma(chunk, PixelFormat::Yuv420p, width, height))
        .collect()
}

/// Write a sequence as `%06d.png` under `dir`.
pub fn save_frame_dir(dir: &Path, frames: &[LumaFrame]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        save_png_gray(&dir.join(format!("{i:06}.png")), f)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::synthetic_sequence;
    use super::*;

    #[test]
    fn png_roundtrip_is_exact_at_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let f = &synthetic_sequence(1, 16, 16, 3)[0];
        let path = dir.path().join("000000.png");
        save_png_gray(&path, f).unwrap();
        let g = load_png_gray(&path).unwrap();
        // quantized to 8 bits on write, so equality holds to 1/255 / 2
        let max = f
            .pixels()
            .iter()
            .zip(g.pixels())
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
        assert!(max <= 0.5 / 255.0 + 1e-6);
    }

    #[test]
    fn frame_dir_roundtrip_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        let seq = synthetic_sequence(3, 16, 16, 4);
        save_frame_dir(dir.path(), &seq).unwrap();
        let loaded = load_frame_dir(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in seq.iter().zip(&loaded) {
            let max = a
                .pixels()
                .iter()
                .zip(b.pixels())
                .fold(0.0f32, |m, (x, y)| m.max((x - y).abs()));
            assert!(max <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn yuv_reader_counts_frames() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.yuv");
        let (w, h) = (16usize, 8usize);
        let frame_bytes = w * h + 2 * (w / 2) * (h / 2);
        std::fs::write(&path, vec![128u8; frame_bytes * 3]).unwrap();
        let frames = load_yuv420_frames(&path, w, h).unwrap();
        assert_eq!(frames.len(), 3);
        assert!((frames[0].pixels()[[0, 0]] - 128.0 / 255.0).abs() < 1e-6);
    }
}
