//! Exactly invertible causal space-to-depth latent codec.
//!
//! Frame 0 fills latent slot 0 on its own (sub-slots 1..4 are zero), then
//! every group of four frames fills one further slot. Within a slot each
//! `s × s` pixel block becomes one latent position with
//! `c = 4 · s · s · 3` channels ordered `((τ·s + dy)·s + dx)·3 + rgb`, where
//! `τ` is the frame's position inside its group. Values map `x ↦ 2x − 1`.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array3, Array4, ArrayView3, ArrayView4, Axis};

use crate::error::{Error, Result};

pub const DEFAULT_SPATIAL_FACTOR: usize = 4;
pub const TEMPORAL_FACTOR: usize = 4;

/// Latent slot count for a `frames`-long video.
pub fn latent_len(frames: usize) -> usize {
    (frames + 3) / 4
}

pub fn latent_channels(s: usize) -> usize {
    3 * TEMPORAL_FACTOR * s * s
}

/// Source frames of latent slot `j`, in sub-slot order.
pub fn slot_frames(j: usize) -> Vec<usize> {
    if j == 0 {
        vec![0]
    } else {
        (4 * j - 3..=4 * j).collect()
    }
}

/// `(slot, sub-slot)` holding frame `f`.
pub fn frame_slot(f: usize) -> (usize, usize) {
    if f == 0 {
        (0, 0)
    } else {
        ((f + 3) / 4, (f - 1) % 4)
    }
}

pub fn channel_index(s: usize, tau: usize, dy: usize, dx: usize, rgb: usize) -> usize {
    ((tau * s + dy) * s + dx) * 3 + rgb
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    /// `l × h × w × c`.
    pub data: Array4<f64>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub s: usize,
}

fn check_video_shape(t: usize, h: usize, w: usize, ch: usize, s: usize) -> Result<()> {
    if s == 0 {
        return Err(Error::shape("s", "a positive spatial factor", s));
    }
    if t == 0 || t % 4 != 1 {
        return Err(Error::shape("T", "T = 1 (mod 4)", t));
    }
    if h == 0 || h % s != 0 {
        return Err(Error::shape("H", format!("a positive multiple of s = {s}"), h));
    }
    if w == 0 || w % s != 0 {
        return Err(Error::shape("W", format!("a positive multiple of s = {s}"), w));
    }
    if ch != 3 {
        return Err(Error::shape("channels", 3, ch));
    }
    Ok(())
}

impl LatentVideo {
    pub fn new(data: Array4<f64>, frames: usize, height: usize, width: usize, s: usize) -> Result<Self> {
        check_video_shape(frames, height, width, 3, s)?;
        let expected = (latent_len(frames), height / s, width / s, latent_channels(s));
        if data.dim() != expected {
            return Err(Error::shape("latent", format!("{expected:?}"), format!("{:?}", data.dim())));
        }
        Ok(LatentVideo {
            data,
            frames,
            height,
            width,
            s,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize, s: usize) -> Result<Self> {
        check_video_shape(frames, height, width, 3, s)?;
        let dim = (latent_len(frames), height / s, width / s, latent_channels(s));
        Ok(LatentVideo {
            data: Array4::zeros(dim),
            frames,
            height,
            width,
            s,
        })
    }

    pub fn slots(&self) -> usize {
        self.data.dim().0
    }

    pub fn channels(&self) -> usize {
        self.data.dim().3
    }

    /// Raw little-endian `f32` dump with an `(l, h, w, c, T, H, W, s)` `u32` header.
    pub fn write_debug_dump(&self, path: &Path) -> Result<()> {
        let (l, h, w, c) = self.data.dim();
        let mut buf = Vec::with_capacity(32 + 4 * self.data.len());
        for v in [l, h, w, c, self.frames, self.height, self.width, self.s] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in self.data.iter() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_debug_dump(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let word = |i: usize| -> Option<u32> {
            bytes.get(4 * i..4 * i + 4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        };
        let bad = || Error::Schema {
            path: path.to_path_buf(),
            reason: "truncated latent dump".into(),
        };
        let hdr: Vec<usize> = (0..8).map(|i| word(i).map(|v| v as usize).ok_or_else(bad)).collect::<Result<_>>()?;
        let n = hdr[0] * hdr[1] * hdr[2] * hdr[3];
        if bytes.len() != 32 + 4 * n {
            return Err(bad());
        }
        let vals: Vec<f64> = (0..n).map(|i| f64::from(f32::from_bits(word(8 + i).unwrap_or(0)))).collect();
        let data = Array4::from_shape_vec((hdr[0], hdr[1], hdr[2], hdr[3]), vals).map_err(|_| bad())?;
        LatentVideo::new(data, hdr[4], hdr[5], hdr[6], hdr[7])
    }
}

/// Encodes a `T × H × W × 3` video with values in `[0, 1]`.
pub fn encode(video: ArrayView4<'_, f32>, s: usize) -> Result<LatentVideo> {
    let (t, hh, ww, ch) = video.dim();
    check_video_shape(t, hh, ww, ch, s)?;
    let (h, w) = (hh / s, ww / s);
    let mut data = Array4::zeros((latent_len(t), h, w, latent_channels(s)));
    for f in 0..t {
        let (j, tau) = frame_slot(f);
        let frame = video.index_axis(Axis(0), f);
        for y in 0..hh {
            for x in 0..ww {
                for k in 0..3 {
                    let c = channel_index(s, tau, y % s, x % s, k);
                    data[[j, y / s, x / s, c]] = 2.0 * f64::from(frame[[y, x, k]]) - 1.0;
                }
            }
        }
    }
    Ok(LatentVideo {
        data,
        frames: t,
        height: hh,
        width: ww,
        s,
    })
}

/// Inverse of [`encode`]; the zero-filled sub-slots of slot 0 are ignored.
pub fn decode(latent: &LatentVideo) -> Result<Array4<f32>> {
    let LatentVideo {
        frames: t,
        height: hh,
        width: ww,
        s,
        ..
    } = *latent;
    check_video_shape(t, hh, ww, 3, s)?;
    let expected = (latent_len(t), hh / s, ww / s, latent_channels(s));
    if latent.data.dim() != expected {
        return Err(Error::shape("latent", format!("{expected:?}"), format!("{:?}", latent.data.dim())));
    }
    let mut video = Array4::zeros((t, hh, ww, 3));
    for f in 0..t {
        let (j, tau) = frame_slot(f);
        for y in 0..hh {
            for x in 0..ww {
                for k in 0..3 {
                    let v = latent.data[[j, y / s, x / s, channel_index(s, tau, y % s, x % s, k)]];
                    video[[f, y, x, k]] = ((v + 1.0) * 0.5) as f32;
                }
            }
        }
    }
    Ok(video)
}

/// Single-frame encode: the `1 × h × w × c` reference latent.
pub fn encode_image(image: ArrayView3<'_, f32>, s: usize) -> Result<LatentVideo> {
    encode(image.insert_axis(Axis(0)), s)
}

pub fn decode_image(latent: &LatentVideo) -> Result<Array3<f32>> {
    if latent.frames != 1 {
        return Err(Error::shape("T", 1, latent.frames));
    }
    Ok(decode(latent)?.index_axis_move(Axis(0), 0))
}
