//! Clip files: raw planar tensors with a small self-describing header
//! (magic `GVCL`, dims, dtype), plus a PNG-sequence import path.
//!
//! Layout after the header: one channel plane at a time (`c` outer), each
//! plane `frames * h * w` big-endian values.

use std::io::{Read, Write};
use std::path::Path;

use crate::pipeline::VideoClip;

const MAGIC: &[u8; 4] = b"GVCL";
const VERSION: u8 = 1;

pub const DTYPE_F32: u8 = 1;
pub const DTYPE_F64: u8 = 2;

#[derive(Debug, thiserror::Error)]
pub enum ClipIoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic (not a clip file)")]
    BadMagic,
    #[error("unsupported clip version {0}")]
    Version(u8),
    #[error("unsupported dtype code {0}")]
    Dtype(u8),
    #[error("malformed clip file: {0}")]
    Malformed(String),
    #[error("png: {0}")]
    Png(#[from] image::ImageError),
    #[error("png sequence: {0}")]
    PngSequence(String),
}

pub fn write_clip(path: &Path, clip: &VideoClip, dtype: u8) -> Result<(), ClipIoError> {
    if dtype != DTYPE_F32 && dtype != DTYPE_F64 {
        return Err(ClipIoError::Dtype(dtype));
    }
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype);
    for dim in [clip.frames, clip.h, clip.w, 3usize] {
        out.extend_from_slice(&(dim as u32).to_be_bytes());
    }
    let plane = clip.frames * clip.h * clip.w;
    for c in 0..3 {
        for i in 0..plane {
            let v = clip.data[i * 3 + c];
            match dtype {
                DTYPE_F32 => out.extend_from_slice(&(v as f32).to_be_bytes()),
                _ => out.extend_from_slice(&v.to_be_bytes()),
            }
        }
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn read_clip(path: &Path) -> Result<VideoClip, ClipIoError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 22 {
        return Err(ClipIoError::Malformed("shorter than header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(ClipIoError::BadMagic);
    }
    if bytes[4] != VERSION {
        return Err(ClipIoError::Version(bytes[4]));
    }
    let dtype = bytes[5];
    let dim = |i: usize| u32::from_be_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().unwrap()) as usize;
    let (frames, h, w, channels) = (dim(0), dim(1), dim(2), dim(3));
    if channels != 3 {
        return Err(ClipIoError::Malformed(format!("{channels} channels, want 3")));
    }
    let plane = frames * h * w;
    let vsize = match dtype {
        DTYPE_F32 => 4,
        DTYPE_F64 => 8,
        other => return Err(ClipIoError::Dtype(other)),
    };
    let want = 22 + 3 * plane * vsize;
    if bytes.len() != want {
        return Err(ClipIoError::Malformed(format!(
            "payload is {} bytes, want {}",
            bytes.len(),
            want
        )));
    }
    let mut data = vec![0.0f64; plane * 3];
    let mut pos = 22;
    for c in 0..3 {
        for i in 0..plane {
            let v = match dtype {
                DTYPE_F32 => f32::from_be_bytes(bytes[pos..pos + 4].try_into().unwrap()) as f64,
                _ => f64::from_be_bytes(bytes[pos..pos + 8].try_into().unwrap()),
            };
            data[i * 3 + c] = v;
            pos += vsize;
        }
    }
    Ok(VideoClip::new(frames, h, w, data))
}

/// Import a clip from a directory of PNG frames (sorted by file name).
pub fn read_clip_png_dir(dir: &Path) -> Result<VideoClip, ClipIoError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(ClipIoError::PngSequence(format!(
            "no .png files in {}",
            dir.display()
        )));
    }
    let mut frames_data: Vec<f64> = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for p in &paths {
        let img = image::open(p)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        match dims {
            None => dims = Some((h, w)),
            Some(d) if d != (h, w) => {
                return Err(ClipIoError::PngSequence(format!(
                    "{} is {w}x{h}, earlier frames were {}x{}",
                    p.display(),
                    d.1,
                    d.0
                )))
            }
            _ => {}
        }
        frames_data.extend(img.pixels().flat_map(|px| {
            px.0.iter().map(|&v| v as f64 / 255.0).collect::<Vec<_>>()
        }));
    }
    let (h, w) = dims.unwrap();
    Ok(VideoClip::new(paths.len(), h, w, frames_data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("gvt_clipio_test");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn f64_roundtrip_is_exact() {
        let clip = VideoClip::new(
            2,
            3,
            4,
            (0..2 * 3 * 4 * 3).map(|i| i as f64 / 71.0).collect(),
        );
        let p = tmp("rt64.gvcl");
        write_clip(&p, &clip, DTYPE_F64).unwrap();
        let back = read_clip(&p).unwrap();
        assert_eq!(back, clip);
    }

    #[test]
    fn f32_roundtrip_is_close() {
        let clip = VideoClip::new(
            1,
            4,
            4,
            (0..4 * 4 * 3).map(|i| i as f64 / 47.0).collect(),
        );
        let p = tmp("rt32.gvcl");
        write_clip(&p, &clip, DTYPE_F32).unwrap();
        let back = read_clip(&p).unwrap();
        for (a, b) in back.data.iter().zip(&clip.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_garbage() {
        let p = tmp("bad.gvcl");
        std::fs::write(&p, b"not a clip").unwrap();
        assert!(matches!(read_clip(&p), Err(ClipIoError::Malformed(_))));
        std::fs::write(&p, b"XXXX0123456789012345678901234567").unwrap();
        assert!(matches!(read_clip(&p), Err(ClipIoError::BadMagic)));
    }

    #[test]
    fn png_sequence_import() {
        let dir = std::env::temp_dir().join("gvt_png_test");
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        for f in 0..3 {
            let img = image::RgbImage::from_fn(4, 4, |x, y| {
                image::Rgb([(x * 60) as u8, (y * 60) as u8, (f * 80) as u8])
            });
            img.save(dir.join(format!("frame_{f:03}.png"))).unwrap();
        }
        let clip = read_clip_png_dir(&dir).unwrap();
        assert_eq!((clip.frames, clip.h, clip.w), (3, 4, 4));
        assert!((clip.frame(2)[2] - 160.0 / 255.0).abs() < 1e-9);
    }
}
