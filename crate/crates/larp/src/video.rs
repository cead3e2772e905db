//! Synthetic labeled clips, raw video I/O, and the patch layout mapping
//! between videos and patch-embedding sequences.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::ops::{Op, OpCtx};
use crate::tensor::{io as tio, Buf, Tensor};

/// Dense T x H x W x 3 clip with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl VideoTensor {
    pub fn new(frames: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != frames * height * width * 3 {
            return Err(Error::Data(format!(
                "video: {frames}x{height}x{width}x3 needs {} values, got {}",
                frames * height * width * 3,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v) || !v.is_finite()) {
            return Err(Error::Data(format!("video: value {v} outside [0, 1]")));
        }
        Ok(VideoTensor { frames, height, width, values })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        VideoTensor { frames, height, width, values: vec![0.0; frames * height * width * 3] }
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.frames, self.height, self.width, 3]
    }

    pub fn pixel_count(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn at(&self, t: usize, y: usize, x: usize, ch: usize) -> f64 {
        self.values[((t * self.height + y) * self.width + x) * 3 + ch]
    }

    #[inline]
    pub fn at_mut(&mut self, t: usize, y: usize, x: usize, ch: usize) -> &mut f64 {
        &mut self.values[((t * self.height + y) * self.width + x) * 3 + ch]
    }

    /// Clip containing only the first `k` frames.
    pub fn first_frames(&self, k: usize) -> Result<VideoTensor> {
        if k == 0 || k > self.frames {
            return Err(Error::Data(format!("cannot take {k} frames of a {}-frame clip", self.frames)));
        }
        let frame_len = self.height * self.width * 3;
        Ok(VideoTensor {
            frames: k,
            height: self.height,
            width: self.width,
            values: self.values[..k * frame_len].to_vec(),
        })
    }

    /// Mirror along the width axis.
    pub fn hflip(&self) -> VideoTensor {
        let mut out = self.clone();
        for t in 0..self.frames {
            for y in 0..self.height {
                for x in 0..self.width {
                    for ch in 0..3 {
                        *out.at_mut(t, y, x, ch) = self.at(t, y, self.width - 1 - x, ch);
                    }
                }
            }
        }
        out
    }

    pub fn same_extents(&self, other: &VideoTensor) -> bool {
        self.frames == other.frames && self.height == other.height && self.width == other.width
    }
}

/// Peak signal-to-noise ratio in dB over the `[0, 1]` domain; identical
/// inputs report `f64::INFINITY`.
pub fn psnr(a: &VideoTensor, b: &VideoTensor) -> Result<f64> {
    if !a.same_extents(b) {
        return Err(Error::shape("psnr", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mse = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.values.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

// ── patch layout ─────────────────────────────────────────────────────

/// Spatiotemporal patch grid for fixed video extents. Flattening is
/// time-major, then rows, then columns; within a patch the order is
/// (dt, dy, dx, channel) row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchLayout {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub f_t: usize,
    pub f_h: usize,
    pub f_w: usize,
}

impl PatchLayout {
    pub fn new(frames: usize, height: usize, width: usize, f_t: usize, f_h: usize, f_w: usize) -> Result<Self> {
        if f_t == 0 || f_h == 0 || f_w == 0 {
            return Err(Error::Config("patch factors must be positive".into()));
        }
        if frames % f_t != 0 || height % f_h != 0 || width % f_w != 0 {
            return Err(Error::Data(format!(
                "extents {frames}x{height}x{width} not divisible by patch factors {f_t}x{f_h}x{f_w}"
            )));
        }
        Ok(PatchLayout { frames, height, width, f_t, f_h, f_w })
    }

    /// Number of patches m.
    pub fn patch_count(&self) -> usize {
        (self.frames / self.f_t) * (self.height / self.f_h) * (self.width / self.f_w)
    }

    /// Flattened pixel values per patch.
    pub fn patch_dim(&self) -> usize {
        self.f_t * self.f_h * self.f_w * 3
    }

    fn grid(&self) -> (usize, usize, usize) {
        (self.frames / self.f_t, self.height / self.f_h, self.width / self.f_w)
    }

    /// Source pixel index for element `q` of patch `j`.
    #[inline]
    fn src_index(&self, j: usize, q: usize) -> usize {
        let (_, gh, gw) = self.grid();
        let bw = j % gw;
        let bh = (j / gw) % gh;
        let bt = j / (gw * gh);
        let ch = q % 3;
        let rest = q / 3;
        let dx = rest % self.f_w;
        let rest = rest / self.f_w;
        let dy = rest % self.f_h;
        let dt = rest / self.f_h;
        let t = bt * self.f_t + dt;
        let y = bh * self.f_h + dy;
        let x = bw * self.f_w + dx;
        ((t * self.height + y) * self.width + x) * 3 + ch
    }

    pub fn matches(&self, v: &VideoTensor) -> bool {
        v.frames == self.frames && v.height == self.height && v.width == self.width
    }
}

/// Raw patch extraction: video values to an m x p matrix (no projection).
pub fn extract_patch_values(v: &VideoTensor, layout: &PatchLayout) -> Result<Vec<f64>> {
    if !layout.matches(v) {
        return Err(Error::shape(
            "extract_patches",
            format!("video {:?} vs layout {}x{}x{}", v.shape(), layout.frames, layout.height, layout.width),
        ));
    }
    let (m, p) = (layout.patch_count(), layout.patch_dim());
    let mut out = Vec::with_capacity(m * p);
    for j in 0..m {
        for q in 0..p {
            out.push(v.values[layout.src_index(j, q)]);
        }
    }
    Ok(out)
}

/// Exact inverse of [`extract_patch_values`].
pub fn unpatchify_values(patches: &[f64], layout: &PatchLayout) -> Result<VideoTensor> {
    let (m, p) = (layout.patch_count(), layout.patch_dim());
    if patches.len() != m * p {
        return Err(Error::shape(
            "unpatchify",
            format!("{} values vs {m} patches x {p}", patches.len()),
        ));
    }
    let mut values = vec![0.0; layout.frames * layout.height * layout.width * 3];
    for j in 0..m {
        for q in 0..p {
            values[layout.src_index(j, q)] = patches[j * p + q];
        }
    }
    Ok(VideoTensor { frames: layout.frames, height: layout.height, width: layout.width, values })
}

#[derive(Debug)]
struct PatchExtract {
    layout: PatchLayout,
}

/// Differentiable patch extraction from a rank-4 video node to `[m, p]`.
pub fn patch_extract_op(video: &Tensor, layout: &PatchLayout) -> Result<Tensor> {
    let vb = video.buf();
    let want = vec![layout.frames, layout.height, layout.width, 3];
    if vb.shape != want {
        return Err(Error::shape("patch_extract", format!("{:?} vs {:?}", vb.shape, want)));
    }
    let (m, p) = (layout.patch_count(), layout.patch_dim());
    let mut out = Vec::with_capacity(m * p);
    for j in 0..m {
        for q in 0..p {
            out.push(vb.values[layout.src_index(j, q)]);
        }
    }
    Ok(video
        .tape()
        .push_op(Box::new(PatchExtract { layout: *layout }), &[video], Buf::new(vec![m, p], out)))
}

impl Op for PatchExtract {
    fn name(&self) -> &'static str {
        "patch_extract"
    }

    fn backward(&self, ctx: &OpCtx) -> Vec<Option<Vec<f64>>> {
        let (m, p) = (self.layout.patch_count(), self.layout.patch_dim());
        vec![ctx.needs[0].then(|| {
            let mut d = vec![0.0; ctx.inputs[0].len()];
            for j in 0..m {
                for q in 0..p {
                    d[self.layout.src_index(j, q)] = ctx.out_grad[j * p + q];
                }
            }
            d
        })]
    }
}

// ── frame padding ────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    /// Frames 0..T0, then the last frame repeated.
    LastFrame,
    /// The whole clip tiled cyclically.
    Cyclic,
}

/// Extend a clip of `T0` frames to `target` frames.
pub fn repeat_pad(clip: &VideoTensor, target: usize, mode: PadMode) -> Result<VideoTensor> {
    let t0 = clip.frames;
    if t0 == 0 || t0 > target {
        return Err(Error::Data(format!("repeat_pad: {t0} source frames for target {target}")));
    }
    let frame_len = clip.height * clip.width * 3;
    let mut values = Vec::with_capacity(target * frame_len);
    for t in 0..target {
        let src = match mode {
            PadMode::LastFrame => t.min(t0 - 1),
            PadMode::Cyclic => t % t0,
        };
        values.extend_from_slice(&clip.values[src * frame_len..(src + 1) * frame_len]);
    }
    Ok(VideoTensor { frames: target, height: clip.height, width: clip.width, values })
}

// ── synthetic dataset ────────────────────────────────────────────────

/// A clip with its class label.
#[derive(Clone, Debug)]
pub struct LabeledClip {
    pub video: VideoTensor,
    pub class_id: usize,
}

const SHAPE_KINDS: usize = 4;

/// Deterministic synthetic dataset: class `k` draws shape kind `k % 4`
/// moving with a class-determined velocity; classes are assigned
/// round-robin. Identical arguments give bitwise identical output.
pub fn synth_dataset(
    seed: u64,
    classes: usize,
    count: usize,
    layout: &PatchLayout,
) -> Result<Vec<LabeledClip>> {
    if classes < 2 {
        return Err(Error::Config(format!("synthetic dataset needs >= 2 classes, got {classes}")));
    }
    let mut rng = Rng::new(seed);
    let mut clips = Vec::with_capacity(count);
    for i in 0..count {
        let class_id = i % classes;
        let video = synth_clip(&mut rng, class_id, classes, layout.frames, layout.height, layout.width);
        clips.push(LabeledClip { video, class_id });
    }
    Ok(clips)
}

fn synth_clip(rng: &mut Rng, class_id: usize, classes: usize, t: usize, h: usize, w: usize) -> VideoTensor {
    // Per-clip randomness: background, shape color, start position.
    let bg: [f64; 3] = [0.05 + rng.uniform() * 0.2, 0.05 + rng.uniform() * 0.2, 0.05 + rng.uniform() * 0.2];
    let fg: [f64; 3] = [0.6 + rng.uniform() * 0.4, 0.6 + rng.uniform() * 0.4, 0.6 + rng.uniform() * 0.4];
    let mut cx = rng.uniform() * w as f64;
    let mut cy = rng.uniform() * h as f64;
    // Class-determined motion: direction from the class angle, speed cycles
    // through three magnitudes.
    let angle = std::f64::consts::TAU * class_id as f64 / classes as f64;
    let speed = 1.0 + (class_id % 3) as f64;
    let (vx, vy) = (angle.cos() * speed, angle.sin() * speed);
    let kind = class_id % SHAPE_KINDS;
    let radius = (h.min(w) as f64 / 6.0).max(2.0);

    let mut video = VideoTensor::zeros(t, h, w);
    for frame in 0..t {
        for y in 0..h {
            for x in 0..w {
                let dx = wrapped_dist(x as f64, cx, w as f64);
                let dy = wrapped_dist(y as f64, cy, h as f64);
                let inside = match kind {
                    0 => dx <= radius && dy <= radius,
                    1 => dx * dx + dy * dy <= radius * radius,
                    2 => (dx <= radius / 2.5 && dy <= radius) || (dy <= radius / 2.5 && dx <= radius),
                    _ => {
                        let r2 = dx * dx + dy * dy;
                        r2 <= radius * radius && r2 >= (radius * 0.5) * (radius * 0.5)
                    }
                };
                for ch in 0..3 {
                    *video.at_mut(frame, y, x, ch) = if inside { fg[ch] } else { bg[ch] };
                }
            }
        }
        cx = (cx + vx).rem_euclid(w as f64);
        cy = (cy + vy).rem_euclid(h as f64);
    }
    video
}

#[inline]
fn wrapped_dist(a: f64, b: f64, span: f64) -> f64 {
    let d = (a - b).abs();
    d.min(span - d)
}

// ── clip I/O ─────────────────────────────────────────────────────────

/// Write clips as DT01 tensors plus a `manifest.tsv` of
/// `path<TAB>class_id` lines.
pub fn save_clips(dir: &Path, clips: &[LabeledClip]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, clip) in clips.iter().enumerate() {
        let name = format!("clip_{i:05}.dt01");
        tio::write_dt01_file(&dir.join(&name), &clip.video.shape(), &clip.video.values)?;
        manifest.push_str(&format!("{name}\t{}\n", clip.class_id));
    }
    std::fs::write(dir.join("manifest.tsv"), manifest)?;
    Ok(())
}

/// Load clips listed in `dir/manifest.tsv`.
pub fn load_clips(dir: &Path) -> Result<Vec<LabeledClip>> {
    let manifest_path = dir.join("manifest.tsv");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", manifest_path.display())))?;
    let mut clips = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (path, class) = line
            .split_once('\t')
            .ok_or_else(|| Error::Data(format!("manifest line {} has no tab", lineno + 1)))?;
        let class_id: usize = class
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("manifest line {}: bad class id {class:?}", lineno + 1)))?;
        let buf = tio::read_dt01_file(&dir.join(path))?;
        let video = match buf.shape.as_slice() {
            [t, h, w, 3] => VideoTensor::new(*t, *h, *w, buf.values.as_ref().clone())?,
            other => {
                return Err(Error::Data(format!("{path}: expected a TxHxWx3 tensor, got {other:?}")));
            }
        };
        clips.push(LabeledClip { video, class_id });
    }
    Ok(clips)
}

/// One frame as a binary P6 PPM image.
pub fn frame_to_ppm(v: &VideoTensor, frame: usize) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", v.width, v.height).into_bytes();
    for y in 0..v.height {
        for x in 0..v.width {
            for ch in 0..3 {
                out.push((v.at(frame, y, x, ch).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

pub fn write_ppm_frames(dir: &Path, stem: &str, v: &VideoTensor) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for t in 0..v.frames {
        let mut f = std::fs::File::create(dir.join(format!("{stem}_f{t:02}.ppm")))?;
        f.write_all(&frame_to_ppm(v, t))?;
    }
    Ok(())
}
