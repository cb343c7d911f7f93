//! Video tensors, frame-level transforms and file I/O.
//!
//! Every pixel lives in `[0, 1]`. Tensors are stored frame-major, then
//! channel-major, then row-major (`T×C×H×W`), which is also the byte order of
//! the `.vten` container.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const VTEN_MAGIC: &[u8; 4] = b"VTEN";
pub const VTEN_VERSION: u32 = 1;
const VTEN_HEADER_LEN: usize = 4 + 4 * 5;

/// Minimum spatial extent of a [`VideoTensor`].
pub const MIN_SPATIAL: usize = 8;

/// BT.601 luma weights.
pub const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VideoShape {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl VideoShape {
    pub fn new(frames: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.frames * self.frame_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 1 {
            return Err(Error::Shape("video needs at least one frame".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Shape(format!(
                "channel count must be 1 or 3, got {}",
                self.channels
            )));
        }
        if self.height < MIN_SPATIAL || self.width < MIN_SPATIAL {
            return Err(Error::Shape(format!(
                "spatial size {}x{} below minimum {MIN_SPATIAL}x{MIN_SPATIAL}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for VideoShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}",
            self.frames, self.channels, self.height, self.width
        )
    }
}

fn check_unit_range(data: &[f32]) -> Result<()> {
    match data.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(i) => Err(Error::InvalidArgument(format!(
            "pixel {i} = {} lies outside [0, 1]",
            data[i]
        ))),
        None => Ok(()),
    }
}

/// A `T×C×H×W` pixel volume with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    shape: VideoShape,
    data: Vec<f32>,
}

impl VideoTensor {
    pub fn new(shape: VideoShape, data: Vec<f32>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "buffer of {} values does not match shape {shape}",
                data.len()
            )));
        }
        check_unit_range(&data)?;
        Ok(Self { shape, data })
    }

    pub fn filled(shape: VideoShape, value: f32) -> Result<Self> {
        Self::new(shape, vec![value; shape.len()])
    }

    pub fn zeros(shape: VideoShape) -> Result<Self> {
        Self::filled(shape, 0.0)
    }

    pub fn from_frames(frames: &[Frame]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Shape("no frames given".into()))?;
        let shape = VideoShape::new(frames.len(), first.channels, first.height, first.width);
        let mut data = Vec::with_capacity(shape.len());
        for (i, f) in frames.iter().enumerate() {
            if (f.channels, f.height, f.width) != (first.channels, first.height, first.width) {
                return Err(Error::Shape(format!(
                    "frame {i} is {}x{}x{}, expected {}x{}x{}",
                    f.channels, f.height, f.width, first.channels, first.height, first.width
                )));
            }
            data.extend_from_slice(&f.data);
        }
        Self::new(shape, data)
    }

    pub fn shape(&self) -> VideoShape {
        self.shape
    }

    pub fn frames(&self) -> usize {
        self.shape.frames
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn frame_data(&self, t: usize) -> &[f32] {
        let n = self.shape.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame(&self, t: usize) -> Frame {
        Frame {
            channels: self.shape.channels,
            height: self.shape.height,
            width: self.shape.width,
            data: self.frame_data(t).to_vec(),
        }
    }

    pub fn get(&self, t: usize, c: usize, y: usize, x: usize) -> f32 {
        let s = self.shape;
        self.data[((t * s.channels + c) * s.height + y) * s.width + x]
    }

    /// Reorders frames; `order[i]` is the source index of output frame `i`.
    pub fn reorder_frames(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.frames() || order.iter().any(|&i| i >= self.frames()) {
            return Err(Error::InvalidArgument("bad frame order".into()));
        }
        let mut data = Vec::with_capacity(self.data.len());
        for &i in order {
            data.extend_from_slice(self.frame_data(i));
        }
        Ok(Self {
            shape: self.shape,
            data,
        })
    }

    /// Bilinearly resizes every frame to `height×width`.
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        if (height, width) == (self.height(), self.width()) {
            return Ok(self.clone());
        }
        let frames = (0..self.frames())
            .map(|t| self.frame(t).resize_bilinear(height, width))
            .collect::<Vec<_>>();
        Self::from_frames(&frames)
    }

    /// Converts to one channel with BT.601 weights (no-op for gray video).
    pub fn to_gray_video(&self) -> Result<Self> {
        if self.channels() == 1 {
            return Ok(self.clone());
        }
        let frames = (0..self.frames())
            .map(|t| Frame::from_gray(&to_grayscale(&self.frame(t))))
            .collect::<Vec<_>>();
        Self::from_frames(&frames)
    }
}

/// One `C×H×W` frame with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "buffer of {} values does not match frame {channels}x{height}x{width}",
                data.len()
            )));
        }
        check_unit_range(&data)?;
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_gray(g: &GrayFrame) -> Self {
        Self {
            channels: 1,
            height: g.height,
            width: g.width,
            data: g.data.clone(),
        }
    }

    pub fn plane(&self, c: usize) -> GrayFrame {
        let n = self.height * self.width;
        GrayFrame {
            height: self.height,
            width: self.width,
            data: self.data[c * n..(c + 1) * n].to_vec(),
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn resize_bilinear(&self, height: usize, width: usize) -> Frame {
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            data.extend(self.plane(c).resize_bilinear(height, width).data);
        }
        Frame {
            channels: self.channels,
            height,
            width,
            data,
        }
    }
}

/// A single-channel `H×W` frame with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayFrame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl GrayFrame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "buffer of {} values does not match {height}x{width}",
                data.len()
            )));
        }
        check_unit_range(&data)?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    /// Builds a frame from a pixel function `f(x, y)`, clamping into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 1.0) as f32);
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Bilinear sample at continuous position, clamping to the nearest edge.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let xmax = (self.width - 1) as f64;
        let ymax = (self.height - 1) as f64;
        let x = x.clamp(0.0, xmax);
        let y = y.clamp(0.0, ymax);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let p = |xx: usize, yy: usize| self.at(xx, yy) as f64;
        let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
        let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Align-corners bilinear resize.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> GrayFrame {
        let sy = if height > 1 {
            (self.height - 1) as f64 / (height - 1) as f64
        } else {
            0.0
        };
        let sx = if width > 1 {
            (self.width - 1) as f64 / (width - 1) as f64
        } else {
            0.0
        };
        GrayFrame::from_fn(height, width, |x, y| self.sample(x as f64 * sx, y as f64 * sy))
    }
}

/// Per-pixel injection scale and ℓ∞ cap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBudget {
    pub alpha: f32,
    pub epsilon: f32,
}

impl PerturbationBudget {
    /// Checks `0 ≤ alpha ≤ 1` and `0 ≤ epsilon ≤ 1`.
    ///
    /// `epsilon = 0` is accepted as the null attack.
    pub fn new(alpha: f32, epsilon: f32) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!(
                "alpha must lie in [0, 1], got {alpha}"
            )));
        }
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must lie in [0, 1], got {epsilon}"
            )));
        }
        Ok(Self { alpha, epsilon })
    }
}

impl Default for PerturbationBudget {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            epsilon: 0.5,
        }
    }
}

pub fn to_grayscale(f: &Frame) -> GrayFrame {
    let n = f.height * f.width;
    let data = match f.channels {
        1 => f.data.clone(),
        3 => (0..n)
            .map(|i| {
                let v = LUMA_WEIGHTS[0] * f.data[i]
                    + LUMA_WEIGHTS[1] * f.data[n + i]
                    + LUMA_WEIGHTS[2] * f.data[2 * n + i];
                v.clamp(0.0, 1.0)
            })
            .collect(),
        c => panic!("frame with {c} channels"),
    };
    GrayFrame {
        height: f.height,
        width: f.width,
        data,
    }
}

/// 2×2 box-mean downsampling; a trailing odd row or column is dropped.
pub fn downsample_half(g: &GrayFrame) -> Result<GrayFrame> {
    if g.height < 2 || g.width < 2 {
        return Err(Error::Shape(format!(
            "cannot halve a {}x{} frame",
            g.height, g.width
        )));
    }
    let (h, w) = (g.height / 2, g.width / 2);
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let s = g.at(2 * x, 2 * y) as f64
                + g.at(2 * x + 1, 2 * y) as f64
                + g.at(2 * x, 2 * y + 1) as f64
                + g.at(2 * x + 1, 2 * y + 1) as f64;
            data.push((s / 4.0) as f32);
        }
    }
    Ok(GrayFrame {
        height: h,
        width: w,
        data,
    })
}

/// Clamps a raw buffer into `[0, 1]` and wraps it as a tensor.
pub fn clip_unit(shape: VideoShape, mut raw: Vec<f32>) -> Result<VideoTensor> {
    for v in raw.iter_mut() {
        if v.is_nan() {
            return Err(Error::NonFinite("NaN pixel before clipping".into()));
        }
        *v = v.clamp(0.0, 1.0);
    }
    VideoTensor::new(shape, raw)
}

/// Replicates `g` along the temporal axis `t` times.
pub fn broadcast_temporal(g: &Frame, t: usize) -> Result<VideoTensor> {
    let shape = VideoShape::new(t, g.channels, g.height, g.width);
    let mut data = Vec::with_capacity(shape.len());
    for _ in 0..t {
        data.extend_from_slice(&g.data);
    }
    VideoTensor::new(shape, data)
}

/// `.vten` bytes for any finite payload; signed data such as additive
/// patterns use this directly.
pub fn encode_vten(shape: VideoShape, data: &[f32]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(VTEN_HEADER_LEN + 4 * data.len());
    buf.extend_from_slice(VTEN_MAGIC);
    for x in [VTEN_VERSION, shape.frames as u32, shape.channels as u32, shape.height as u32, shape.width as u32] {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    for x in data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf
}

pub fn save_video(v: &VideoTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_vten(v.shape(), v.data())).map_err(|e| Error::io(path, e))
}

/// Loads a `.vten` file, or a directory of P5/P6 frames in lexicographic order.
pub fn load_video(path: impl AsRef<Path>) -> Result<VideoTensor> {
    let path = path.as_ref();
    if path.is_dir() {
        load_frame_dir(path)
    } else {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        decode_vten(&bytes).map_err(|reason| Error::format(path, reason))
    }
}

fn decode_vten(bytes: &[u8]) -> std::result::Result<VideoTensor, String> {
    let (shape, data) = decode_vten_raw(bytes)?;
    VideoTensor::new(shape, data).map_err(|e| e.to_string())
}

/// Header-checked `.vten` payload without the `[0, 1]` range check.
pub fn decode_vten_raw(bytes: &[u8]) -> std::result::Result<(VideoShape, Vec<f32>), String> {
    if bytes.len() < VTEN_HEADER_LEN {
        return Err("truncated header".into());
    }
    if &bytes[..4] != VTEN_MAGIC {
        return Err("bad magic".into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    if word(0) != VTEN_VERSION {
        return Err(format!("unsupported version {}", word(0)));
    }
    let shape = VideoShape::new(
        word(1) as usize,
        word(2) as usize,
        word(3) as usize,
        word(4) as usize,
    );
    let payload = &bytes[VTEN_HEADER_LEN..];
    if payload.len() != 4 * shape.len() {
        return Err(format!(
            "payload is {} bytes, shape {shape} needs {}",
            payload.len(),
            4 * shape.len()
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect::<Vec<f32>>();
    shape.validate().map_err(|e| e.to_string())?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err("non-finite payload value".into());
    }
    Ok((shape, data))
}

fn load_frame_dir(dir: &Path) -> Result<VideoTensor> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect::<Vec<_>>();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::format(dir, "empty frame directory"));
    }
    let frames = entries
        .iter()
        .map(read_pnm)
        .collect::<Result<Vec<_>>>()?;
    VideoTensor::from_frames(&frames).map_err(|e| Error::format(dir, e.to_string()))
}

/// Reads a binary P5 (gray) or P6 (color) file with maxval 255.
pub fn read_pnm(path: impl AsRef<Path>) -> Result<Frame> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|reason| Error::format(path, reason))
}

fn decode_pnm(bytes: &[u8]) -> std::result::Result<Frame, String> {
    let mut pos = 0usize;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let channels = match tokens[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(format!("unsupported magic {other:?}")),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {s:?}"));
    let width = parse(&tokens[1])?;
    let height = parse(&tokens[2])?;
    if parse(&tokens[3])? != 255 {
        return Err("only maxval 255 is supported".into());
    }
    let n = width * height * channels;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| "truncated raster".to_string())?;
    // interleaved RGB -> planar
    let plane = width * height;
    let mut data = vec![0.0f32; n];
    for (i, &b) in raster.iter().enumerate() {
        let (pix, c) = (i / channels, i % channels);
        data[c * plane + pix] = b as f32 / 255.0;
    }
    Frame::new(channels, height, width, data).map_err(|e| e.to_string())
}

pub fn encode_pnm(f: &Frame) -> Vec<u8> {
    let magic = if f.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", f.width, f.height).into_bytes();
    let plane = f.width * f.height;
    for pix in 0..plane {
        for c in 0..f.channels {
            out.push((f.data[c * plane + pix].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

pub fn write_pnm(f: &Frame, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pnm(f)).map_err(|e| Error::io(path, e))
}

/// Writes each frame as `frame_0000.pgm`/`.ppm` under `dir`.
pub fn save_frame_dir(v: &VideoTensor, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ext = if v.channels() == 1 { "pgm" } else { "ppm" };
    for t in 0..v.frames() {
        write_pnm(&v.frame(t), dir.join(format!("frame_{t:04}.{ext}")))?;
    }
    Ok(())
}
