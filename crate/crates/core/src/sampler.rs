//! One-second clip sampling: six frames spread over `[t, t + 1)`, channel
//! groups stacked into a single tensor, and the labels of the window.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{ActionLabel, Dataset, DatasetMeta, Video, VideoId};
use crate::error::{AfnError, Result};
use crate::tensor::{Real, Tensor};

pub const FRAMES_PER_CLIP: usize = 6;

/// Train-mode resampling budget for clips straddling two actions.
pub const MAX_STRADDLE_REJECTIONS: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Clips per batch.
    pub batch_size: usize,
    /// Randomise each frame's offset inside its sixth of the second.
    pub jitter: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            batch_size: 25,
            jitter: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Uniform `t`; straddling windows are rejected and redrawn.
    Train,
    /// Fixed `t`; straddling windows are returned flagged.
    InferenceAt(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipSample<F> {
    /// `[6, channels, height, width]`
    pub x: Tensor<F>,
    pub t: usize,
    pub video: VideoId,
    pub activity: usize,
    pub y_current: ActionLabel,
    /// Following action, or the END label.
    pub y_next: ActionLabel,
    pub straddle: bool,
    /// `(segment_end - t) / segment_length` of the segment containing `t`.
    pub horizon_fraction: f64,
    /// Seconds from `t` to the start of the next segment.
    pub time_to_next_start: f64,
    pub segment_index: usize,
}

/// Indices of every segment that intersects `[start, start + 1)`.
pub fn window_segments(video: &Video, start: f64) -> Vec<usize> {
    let end = start + 1.0;
    video
        .segments
        .iter()
        .enumerate()
        .filter(|(_, s)| s.start < end && start < s.end)
        .map(|(i, _)| i)
        .collect()
}

/// True when the window `[start, start + 1)` covers two or more segments.
pub fn straddles(video: &Video, start: f64) -> bool {
    window_segments(video, start).len() >= 2
}

/// Concatenates channel groups, each `[6, C_g, H, W]`, along the channel axis.
pub fn stack_channels<F: Real>(groups: &[Tensor<F>], group_sizes: &[usize]) -> Result<Tensor<F>> {
    if groups.len() != group_sizes.len() {
        return Err(AfnError::Sampling(format!(
            "expected {} channel groups, got {}",
            group_sizes.len(),
            groups.len()
        )));
    }
    let first = groups[0].shape();
    if first.len() != 4 {
        return Err(AfnError::dim("stack_channels", first, &[FRAMES_PER_CLIP, 0, 0, 0]));
    }
    let (frames, h, w) = (first[0], first[2], first[3]);
    for (g, &c) in groups.iter().zip(group_sizes) {
        if g.shape() != [frames, c, h, w] {
            return Err(AfnError::dim("stack_channels", g.shape(), &[frames, c, h, w]));
        }
    }
    let channels: usize = group_sizes.iter().sum();
    let plane = h * w;
    let mut data = Vec::with_capacity(frames * channels * plane);
    for f in 0..frames {
        for (g, &c) in groups.iter().zip(group_sizes) {
            data.extend_from_slice(&g.data()[f * c * plane..(f + 1) * c * plane]);
        }
    }
    Tensor::new(&[frames, channels, h, w], data)
}

/// Inverse of [`stack_channels`].
pub fn unstack_channels<F: Real>(x: &Tensor<F>, group_sizes: &[usize]) -> Result<Vec<Tensor<F>>> {
    let s = x.shape();
    if s.len() != 4 || s[1] != group_sizes.iter().sum::<usize>() {
        return Err(AfnError::dim("unstack_channels", s, group_sizes));
    }
    let (frames, channels, plane) = (s[0], s[1], s[2] * s[3]);
    let mut offset = 0;
    let mut out = Vec::with_capacity(group_sizes.len());
    for &c in group_sizes {
        let mut data = Vec::with_capacity(frames * c * plane);
        for f in 0..frames {
            let base = (f * channels + offset) * plane;
            data.extend_from_slice(&x.data()[base..base + c * plane]);
        }
        out.push(Tensor::new(&[frames, c, s[2], s[3]], data)?);
        offset += c;
    }
    Ok(out)
}

fn frame_indices<R: Rng + ?Sized>(video: &Video, framerate: u32, t: usize, jitter: bool, rng: &mut R) -> Vec<usize> {
    let last = video.frame_count(framerate).saturating_sub(1);
    (0..FRAMES_PER_CLIP)
        .map(|k| {
            let u = if jitter { rng.random::<f64>() } else { 0.0 };
            let time = t as f64 + (k as f64 + u) / FRAMES_PER_CLIP as f64;
            ((time * framerate as f64).floor() as usize).min(last)
        })
        .collect()
}

fn gather<F: Real>(video: &Video, meta: &DatasetMeta, indices: &[usize]) -> Result<Tensor<F>> {
    let frame_len = meta.frame_len();
    let plane = meta.height * meta.width;
    let mut offset = 0;
    let mut groups = Vec::with_capacity(meta.channel_groups.len());
    for &c in &meta.channel_groups {
        let mut data = Vec::with_capacity(FRAMES_PER_CLIP * c * plane);
        for &i in indices {
            let frame = video.frame(i, frame_len);
            data.extend(frame[offset * plane..(offset + c) * plane].iter().map(|&v| F::of(v as f64)));
        }
        groups.push(Tensor::new(&[FRAMES_PER_CLIP, c, meta.height, meta.width], data)?);
        offset += c;
    }
    stack_channels(&groups, &meta.channel_groups)
}

/// Labels of the window starting at second `t`.
fn label_window(video: &Video, t: usize) -> Result<(usize, bool)> {
    let covering = window_segments(video, t as f64);
    let first = *covering
        .first()
        .ok_or_else(|| AfnError::Sampling(format!("second {t} outside video {}", video.id)))?;
    Ok((first, covering.len() >= 2))
}

pub fn sample_clip<F: Real, R: Rng + ?Sized>(
    video: &Video,
    meta: &DatasetMeta,
    mode: SampleMode,
    jitter: bool,
    rng: &mut R,
) -> Result<ClipSample<F>> {
    if video.duration < 2.0 {
        return Err(AfnError::Sampling(format!(
            "video {} is {:.2} s long; at least 2 s are required",
            video.id, video.duration
        )));
    }
    let seconds = video.seconds();
    let end_label = meta.end_label();
    let (t, seg, straddle) = match mode {
        SampleMode::InferenceAt(t) => {
            if t >= seconds {
                return Err(AfnError::Lookup(format!("second {t} out of range for video {}", video.id)));
            }
            let (seg, straddle) = label_window(video, t)?;
            (t, seg, straddle)
        }
        SampleMode::Train => {
            let mut attempt = 0;
            loop {
                let t = rng.random_range(0..seconds);
                let (seg, straddle) = label_window(video, t)?;
                if !straddle {
                    break (t, seg, false);
                }
                attempt += 1;
                if attempt > MAX_STRADDLE_REJECTIONS {
                    return Err(AfnError::Sampling(format!(
                        "video {}: more than {MAX_STRADDLE_REJECTIONS} straddling draws",
                        video.id
                    )));
                }
            }
        }
    };
    let segment = video.segments[seg];
    let y_next = video.segments.get(seg + 1).map_or(end_label, |s| s.label);
    let indices = frame_indices(video, meta.framerate, t, jitter, rng);
    Ok(ClipSample {
        x: gather(video, meta, &indices)?,
        t,
        video: video.id,
        activity: video.activity,
        y_current: segment.label,
        y_next,
        straddle,
        horizon_fraction: (segment.end - t as f64) / segment.length(),
        time_to_next_start: segment.end - t as f64,
        segment_index: seg,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch<F> {
    pub clips: Vec<ClipSample<F>>,
    /// Distinct activities present, ascending.
    pub activities: Vec<usize>,
}

/// `batch_size` videos drawn with replacement from `ids`, one train-mode
/// clip each.
pub fn assemble_batch<F: Real, R: Rng + ?Sized>(
    dataset: &Dataset,
    ids: &[VideoId],
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<Batch<F>> {
    if ids.is_empty() {
        return Err(AfnError::Sampling("cannot sample a batch from an empty split".into()));
    }
    if config.batch_size == 0 {
        return Err(AfnError::config("sampler.batch_size", "must be at least 1"));
    }
    let mut clips = Vec::with_capacity(config.batch_size);
    for _ in 0..config.batch_size {
        let id = ids[rng.random_range(0..ids.len())];
        let video = dataset.video(id)?;
        clips.push(sample_clip(video, &dataset.meta, SampleMode::Train, config.jitter, rng)?);
    }
    let activities: BTreeSet<usize> = clips.iter().map(|c| c.activity).collect();
    Ok(Batch {
        clips,
        activities: activities.into_iter().collect(),
    })
}
