//! PNG frames and clip directories (`frame_00001.png`, `frame_00002.png`, ...).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use medvsr_core::image::{Clip, Frame};

use crate::error::{CliError, Result};

pub fn frame_name(index: usize) -> String {
    format!("frame_{index:05}.png")
}

fn frame_index(name: &str) -> Option<usize> {
    let digits = name.strip_prefix("frame_")?.strip_suffix(".png")?;
    (digits.len() == 5 && digits.bytes().all(|b| b.is_ascii_digit())).then(|| digits.parse().ok()).flatten()
}

/// Decodes an 8-bit PNG to planar RGB in `[0, 1]`. Grey and alpha channels are expanded or dropped.
pub fn read_png(path: &Path) -> Result<Frame> {
    let bad = |msg: String| CliError::Image { path: path.to_path_buf(), msg };
    let file = File::open(path).map_err(CliError::io(path))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| bad("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(bad(format!("unsupported colour type {other:?}"))),
    };
    let px = &buf[..info.buffer_size()];
    let row = info.line_size;
    Ok(Frame::from_fn(w, h, |c, y, x| {
        let src = if channels < 3 { 0 } else { c };
        px[y * row + x * channels + src] as f32 / 255.0
    }))
}

/// Encodes a frame as 8-bit RGB, rounding after clamping to `[0, 1]`.
pub fn write_png(path: &Path, frame: &Frame) -> Result<()> {
    let file = File::create(path).map_err(CliError::io(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), frame.width() as u32, frame.height() as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut bytes = Vec::with_capacity(3 * frame.width() * frame.height());
    for y in 0..frame.height() {
        for x in 0..frame.width() {
            for c in 0..3 {
                bytes.push(quantize(frame.get(c, y, x)));
            }
        }
    }
    let bad = |e: png::EncodingError| CliError::Image { path: path.to_path_buf(), msg: e.to_string() };
    let mut w = enc.write_header().map_err(bad)?;
    w.write_image_data(&bytes).map_err(bad)?;
    w.finish().map_err(bad)
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Indices of the frame files present in `dir`, sorted.
fn frame_indices(dir: &Path) -> Result<Vec<usize>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).map_err(CliError::io(dir))? {
        let entry = entry.map_err(CliError::io(dir))?;
        if let Some(i) = entry.file_name().to_str().and_then(frame_index) {
            found.push(i);
        }
    }
    found.sort_unstable();
    Ok(found)
}

/// Loads `frame_00001.png ...` in order; a hole in the numbering names the first missing index.
pub fn load_clip(dir: &Path) -> Result<Clip> {
    let found = frame_indices(dir)?;
    if found.is_empty() {
        return Err(CliError::Usage(format!("{}: no frame_NNNNN.png files", dir.display())));
    }
    if let Some(missing) = (1..).zip(&found).find(|(want, &got)| *want != got).map(|(want, _)| want) {
        return Err(CliError::Gap { dir: dir.to_path_buf(), index: missing, name: frame_name(missing) });
    }
    let frames = found.iter().map(|&i| read_png(&dir.join(frame_name(i)))).collect::<Result<Vec<_>>>()?;
    Ok(Clip::new(frames)?)
}

pub fn save_clip(dir: &Path, clip: &Clip) -> Result<()> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    for (i, f) in clip.frames().iter().enumerate() {
        write_png(&dir.join(frame_name(i + 1)), f)?;
    }
    Ok(())
}

/// Named clips under `root`: either `root` itself holds frames, or each subdirectory that does.
pub fn list_clips(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !root.is_dir() {
        return Err(CliError::Usage(format!("{} is not a directory", root.display())));
    }
    if !frame_indices(root)?.is_empty() {
        let name = root.file_name().and_then(|n| n.to_str()).unwrap_or("clip").to_string();
        return Ok(vec![(name, root.to_path_buf())]);
    }
    let mut clips = Vec::new();
    for entry in fs::read_dir(root).map_err(CliError::io(root))? {
        let path = entry.map_err(CliError::io(root))?.path();
        if path.is_dir() && !frame_indices(&path)?.is_empty() {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            clips.push((name, path));
        }
    }
    clips.sort();
    if clips.is_empty() {
        return Err(CliError::Usage(format!("{}: no clips found", root.display())));
    }
    Ok(clips)
}

/// True when `root` directly holds frames rather than clip subdirectories.
pub fn is_single_clip(root: &Path) -> Result<bool> {
    Ok(!frame_indices(root)?.is_empty())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_names_parse_back() {
        assert_eq!(frame_name(3), "frame_00003.png");
        assert_eq!(frame_index("frame_00003.png"), Some(3));
        assert_eq!(frame_index("frame_3.png"), None);
        assert_eq!(frame_index("frame_00003.jpg"), None);
    }

    #[test]
    fn quantization_rounds_and_clamps() {
        assert_eq!((quantize(-0.2), quantize(1.3), quantize(0.5)), (0, 255, 128));
        for b in 0..=255u8 {
            assert_eq!(quantize(b as f32 / 255.0), b);
        }
    }
}
