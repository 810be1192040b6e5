//! Lossless patchify codec and latent resizing.
//!
//! `encode` folds every `p×p` pixel block into `3p²` channels and maps
//! `x ↦ (x − 0.5)·2`. The inverse `z ↦ z/2 + 0.5` is exact in f32 for every
//! pixel value in `{0} ∪ [0.25, 1]`; generated scenes only use such values.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CodecError {
    #[error("frame size {height}x{width} is not divisible by patch {patch}")]
    NotDivisible { height: usize, width: usize, patch: usize },
    #[error("latent has {channels} channels, expected {expected} for patch {patch}")]
    Channels { channels: usize, expected: usize, patch: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite latent value")]
    NonFinite,
}

/// RGB frames stored `T×H×W×3`.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Video {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self, CodecError> {
        if data.len() != frames * height * width * 3 {
            return Err(CodecError::Shape(format!("{} values for {frames}x{height}x{width}x3", data.len())));
        }
        Ok(Video { frames, height, width, data })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Video { frames, height, width, data: vec![0.0; frames * height * width * 3] }
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f32] {
        let n = self.frame_len();
        &mut self.data[t * n..(t + 1) * n]
    }

    pub fn clamped(mut self) -> Self {
        for v in &mut self.data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        self
    }
}

/// Flow state `T×C×H'×W'`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentVideo {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Spatial patch size of the codec that produced this grid.
    pub patch: usize,
    /// Pixel-space `(T, H, W)` the latent decodes to.
    pub source: [usize; 3],
    pub data: Vec<f32>,
}

impl LatentVideo {
    pub fn zeros(frames: usize, channels: usize, height: usize, width: usize, patch: usize) -> Self {
        LatentVideo {
            frames,
            channels,
            height,
            width,
            patch,
            source: [frames, height * patch, width * patch],
            data: vec![0.0; frames * channels * height * width],
        }
    }

    /// Same geometry as `self` with new contents.
    pub fn with_data(&self, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), self.data.len());
        LatentVideo { data, ..self.clone() }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.frames, self.channels, self.height, self.width]
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f32] {
        let n = self.frame_len();
        &mut self.data[t * n..(t + 1) * n]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &LatentVideo) -> Result<(), CodecError> {
        if self.shape() != other.shape() {
            return Err(CodecError::Shape(format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(())
    }
}

pub fn encode(video: &Video, patch: usize) -> Result<LatentVideo, CodecError> {
    let (h, w) = (video.height, video.width);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(CodecError::NotDivisible { height: h, width: w, patch });
    }
    let (hp, wp, c) = (h / patch, w / patch, 3 * patch * patch);
    let mut z = LatentVideo::zeros(video.frames, c, hp, wp, patch);
    z.source = [video.frames, h, w];
    for t in 0..video.frames {
        let src = video.frame(t);
        let dst = z.frame_mut(t);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let k = ((y % patch) * patch + x % patch) * 3 + ch;
                    dst[(k * hp + y / patch) * wp + x / patch] = (src[(y * w + x) * 3 + ch] - 0.5) * 2.0;
                }
            }
        }
    }
    Ok(z)
}

pub fn decode(z: &LatentVideo) -> Result<Video, CodecError> {
    let p = z.patch;
    if z.channels != 3 * p * p {
        return Err(CodecError::Channels { channels: z.channels, expected: 3 * p * p, patch: p });
    }
    let (hp, wp) = (z.height, z.width);
    let (h, w) = (hp * p, wp * p);
    let mut video = Video::zeros(z.frames, h, w);
    for t in 0..z.frames {
        let src = z.frame(t);
        let dst = video.frame_mut(t);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let k = ((y % p) * p + x % p) * 3 + ch;
                    dst[(y * w + x) * 3 + ch] = src[(k * hp + y / p) * wp + x / p] / 2.0 + 0.5;
                }
            }
        }
    }
    Ok(video)
}

/// Align-corners sample positions: `(i0, i1, frac)` per output index.
fn taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
    (0..n_out)
        .map(|i| {
            if n_out == 1 || n_in == 1 {
                return (0, 0, 0.0);
            }
            let pos = (i * (n_in - 1)) as f64 / (n_out - 1) as f64;
            let i0 = (pos.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, (pos - i0 as f64) as f32)
        })
        .collect()
}

/// Linear resampling of `data` along one axis of a `[outer, n, inner]` view.
fn resample_axis(data: &[f32], outer: usize, n: usize, inner: usize, m: usize) -> Vec<f32> {
    let taps = taps(n, m);
    let mut out = vec![0.0f32; outer * m * inner];
    for o in 0..outer {
        for (j, &(i0, i1, f)) in taps.iter().enumerate() {
            let a = &data[(o * n + i0) * inner..(o * n + i0 + 1) * inner];
            let b = &data[(o * n + i1) * inner..(o * n + i1 + 1) * inner];
            let dst = &mut out[(o * m + j) * inner..(o * m + j + 1) * inner];
            for k in 0..inner {
                dst[k] = a[k] + f * (b[k] - a[k]);
            }
        }
    }
    out
}

/// Separable align-corners linear resize over time, then height, then width.
pub fn resize_latent(z: &LatentVideo, frames: usize, height: usize, width: usize) -> LatentVideo {
    assert!(frames >= 1 && height >= 1 && width >= 1, "resize targets must be positive");
    if (frames, height, width) == (z.frames, z.height, z.width) {
        return z.clone();
    }
    let c = z.channels;
    let plane = z.height * z.width;
    let data = resample_axis(&z.data, 1, z.frames, c * plane, frames);
    let data = resample_axis(&data, frames * c, z.height, z.width, height);
    let data = resample_axis(&data, frames * c * height, z.width, 1, width);
    LatentVideo {
        frames,
        channels: c,
        height,
        width,
        patch: z.patch,
        source: [frames, height * z.patch, width * z.patch],
        data,
    }
}
