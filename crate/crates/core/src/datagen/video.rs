use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::grammar::{ActionLabel, ActivityGrammar};
use crate::error::{AfnError, Result};

pub type VideoId = u32;

/// Longest walk a synthesized video may take, in seconds.
pub const MAX_VIDEO_SECONDS: f64 = 600.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub label: ActionLabel,
    pub start: f64,
    pub end: f64,
}

impl Segment {
    pub fn length(&self) -> f64 {
        self.end - self.start
    }
}

/// Shape and naming information shared by every video of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub action_names: Vec<String>,
    pub activity_names: Vec<String>,
    pub channel_groups: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub framerate: u32,
}

impl DatasetMeta {
    pub fn from_grammar(grammar: &ActivityGrammar, framerate: u32) -> Self {
        DatasetMeta {
            action_names: grammar.action_names.clone(),
            activity_names: grammar.activities.iter().map(|a| a.name.clone()).collect(),
            channel_groups: grammar.channel_groups.clone(),
            height: grammar.height,
            width: grammar.width,
            framerate,
        }
    }

    pub fn num_actions(&self) -> usize {
        self.action_names.len()
    }

    pub fn end_label(&self) -> ActionLabel {
        self.action_names.len()
    }

    pub fn num_activities(&self) -> usize {
        self.activity_names.len()
    }

    pub fn channels(&self) -> usize {
        self.channel_groups.iter().sum()
    }

    pub fn frame_len(&self) -> usize {
        self.channels() * self.height * self.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: VideoId,
    pub activity: usize,
    pub segments: Vec<Segment>,
    /// Duration in seconds; equals the end of the last segment.
    pub duration: f64,
    /// `frame_count() * frame_len` values, frame-major.
    pub frames: Vec<f32>,
}

impl Video {
    pub fn frame_count(&self, framerate: u32) -> usize {
        (self.duration * framerate as f64).round() as usize
    }

    /// Number of whole one-second windows, i.e. valid values of `t`.
    pub fn seconds(&self) -> usize {
        self.duration.floor() as usize
    }

    pub fn frame(&self, index: usize, frame_len: usize) -> &[f32] {
        &self.frames[index * frame_len..(index + 1) * frame_len]
    }

    /// Index of the segment covering time `x` (half-open segments).
    pub fn segment_at(&self, x: f64) -> Option<usize> {
        self.segments.iter().position(|s| s.start <= x && x < s.end)
    }

    /// Segments tile `[0, duration)` contiguously and in order.
    pub fn check_segments(&self) -> Result<()> {
        let bad = |msg: &str| Err(AfnError::Invalid(format!("video {}: {msg}", self.id)));
        let Some(first) = self.segments.first() else {
            return bad("no segments");
        };
        if first.start != 0.0 {
            return bad("first segment does not start at 0");
        }
        for pair in self.segments.windows(2) {
            if pair[0].end != pair[1].start {
                return bad("segments are not contiguous");
            }
        }
        if self.segments.iter().any(|s| s.end <= s.start) {
            return bad("empty or reversed segment");
        }
        if self.segments.last().map(|s| s.end) != Some(self.duration) {
            return bad("last segment does not end at the video duration");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub videos: Vec<Video>,
}

impl Dataset {
    pub fn video(&self, id: VideoId) -> Result<&Video> {
        self.videos
            .iter()
            .find(|v| v.id == id)
            .ok_or_else(|| AfnError::Lookup(format!("unknown video {id}")))
    }

    pub fn mean_length(&self) -> f64 {
        self.videos.iter().map(|v| v.duration).sum::<f64>() / self.videos.len().max(1) as f64
    }
}

/// Walks the activity's transition matrix until END.
fn walk(grammar: &ActivityGrammar, activity: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Segment>> {
    let act = grammar.activity(activity)?;
    let end = act.end_state();
    let mut state = sample_index(&act.start, rng);
    let mut t = 0.0;
    let mut segments = Vec::new();
    while state != end {
        let (lo, hi) = act.durations[state];
        let d = rng.random_range(lo..=hi) as f64;
        segments.push(Segment {
            label: act.actions[state],
            start: t,
            end: t + d,
        });
        t += d;
        if t > MAX_VIDEO_SECONDS {
            return Err(AfnError::Generation(format!(
                "walk in activity `{}` exceeded {MAX_VIDEO_SECONDS} s",
                act.name
            )));
        }
        state = sample_index(&act.transitions[state], rng);
    }
    Ok(segments)
}

fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let x: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if x < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Walks the grammar and renders frames: every frame is its action's
/// prototype plus the activity background plus Gaussian noise; the flow
/// group, when present, holds the difference to the previous frame.
pub fn synthesize_video(
    grammar: &ActivityGrammar,
    activity: usize,
    id: VideoId,
    framerate: u32,
    sigma: f64,
    seed: u64,
) -> Result<Video> {
    if framerate == 0 {
        return Err(AfnError::config("framerate", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let segments = walk(grammar, activity, &mut rng)?;
    let duration = segments.last().map_or(0.0, |s| s.end);
    let n_frames = (duration * framerate as f64).round() as usize;
    let frame_len = grammar.frame_len();
    let plane = grammar.height * grammar.width;
    let flow_range = grammar.flow_group.map(|g| {
        let start: usize = grammar.channel_groups[..g].iter().sum::<usize>() * plane;
        start..start + grammar.channel_groups[g] * plane
    });
    let noise = Normal::new(0.0, sigma.max(0.0)).map_err(|e| AfnError::config("sigma", e.to_string()))?;
    let background = &grammar.activity_prototypes[activity];
    let gain = grammar.activity_gain as f32;

    let mut frames = Vec::with_capacity(n_frames * frame_len);
    let mut prev_base: Option<Vec<f32>> = None;
    let mut seg = 0;
    for f in 0..n_frames {
        let time = f as f64 / framerate as f64;
        while time >= segments[seg].end {
            seg += 1;
        }
        let proto = &grammar.action_prototypes[segments[seg].label];
        let base: Vec<f32> = proto
            .iter()
            .zip(background)
            .map(|(&p, &b)| {
                let n = if sigma > 0.0 { noise.sample(&mut rng) as f32 } else { 0.0 };
                p + gain * b + n
            })
            .collect();
        let mut frame = base.clone();
        if let Some(range) = &flow_range {
            let prev = prev_base.as_ref().unwrap_or(&base);
            for i in range.clone() {
                frame[i] = base[i] - prev[i];
            }
        }
        frames.extend_from_slice(&frame);
        prev_base = Some(base);
    }
    Ok(Video {
        id,
        activity,
        segments,
        duration,
        frames,
    })
}

/// `per_activity` videos of every activity; ids are assigned in order and
/// each video gets its own seed-derived stream.
pub fn generate_dataset(
    grammar: &ActivityGrammar,
    per_activity: usize,
    framerate: u32,
    sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    use rayon::prelude::*;

    let jobs: Vec<(usize, VideoId)> = (0..grammar.num_activities())
        .flat_map(|a| (0..per_activity).map(move |k| (a, (a * per_activity + k) as VideoId)))
        .collect();
    let videos = jobs
        .par_iter()
        .map(|&(a, id)| {
            let video_seed = seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(id as u64 + 1);
            synthesize_video(grammar, a, id, framerate, sigma, video_seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        meta: DatasetMeta::from_grammar(grammar, framerate),
        videos,
    })
}

#[cfg(test)]
mod tests {
    use super::super::grammar::{chain_activity, chain_grammar, generate_grammar, GrammarConfig, GrammarSpec};
    use super::*;

    fn ab_grammar() -> ActivityGrammar {
        let spec = GrammarSpec {
            action_names: vec!["a".into(), "b".into()],
            activities: vec![chain_activity("ab".into(), vec![0, 1], vec![(3, 3), (3, 3)])],
            channel_groups: vec![3, 1, 1, 2],
            flow_group: Some(3),
            height: 2,
            width: 2,
            activity_gain: 1.0,
        };
        ActivityGrammar::from_spec(spec, 5).unwrap()
    }

    #[test]
    fn chain_video_is_forced() {
        let g = ab_grammar();
        let v = synthesize_video(&g, 0, 0, 4, 0.1, 1).unwrap();
        assert_eq!(v.frame_count(4), 24);
        assert_eq!(v.frames.len(), 24 * g.frame_len());
        let segs: Vec<_> = v.segments.iter().map(|s| (s.label, s.start, s.end)).collect();
        assert_eq!(segs, vec![(0, 0.0, 3.0), (1, 3.0, 6.0)]);
        v.check_segments().unwrap();
    }

    #[test]
    fn noiseless_frames_equal_prototypes() {
        let g = ab_grammar();
        let v = synthesize_video(&g, 0, 0, 4, 0.0, 1).unwrap();
        let len = g.frame_len();
        let flow_start = 5 * 4;
        for f in 0..24 {
            let seg = if f < 12 { 0 } else { 1 };
            let frame = v.frame(f, len);
            for i in 0..flow_start {
                let expect = g.action_prototypes[seg][i] + g.activity_prototypes[0][i];
                assert_eq!(frame[i], expect);
            }
            // Flow is zero inside a segment and a jump at the boundary.
            let flow = &frame[flow_start..];
            if f == 12 {
                assert!(flow.iter().any(|&x| x != 0.0));
            } else {
                assert!(flow.iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn walk_cap_is_enforced() {
        let spec = GrammarSpec {
            action_names: vec!["a".into()],
            activities: vec![super::super::grammar::ActivitySpec {
                name: "loop".into(),
                actions: vec![0],
                start: vec![1.0],
                transitions: vec![vec![1.0 - 1e-12, 1e-12]],
                durations: vec![(10, 10)],
            }],
            channel_groups: vec![1],
            flow_group: None,
            height: 1,
            width: 1,
            activity_gain: 0.0,
        };
        let g = ActivityGrammar::from_spec(spec, 0).unwrap();
        assert!(matches!(synthesize_video(&g, 0, 0, 1, 0.0, 3), Err(AfnError::Generation(_))));
    }

    #[test]
    fn generated_dataset_is_deterministic_and_tiled() {
        let g = generate_grammar(&GrammarConfig::default(), 3).unwrap();
        let a = generate_dataset(&g, 3, 4, 0.2, 9).unwrap();
        let b = generate_dataset(&g, 3, 4, 0.2, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.videos.len(), 12);
        for v in &a.videos {
            v.check_segments().unwrap();
            assert_eq!(v.frames.len(), v.frame_count(4) * g.frame_len());
        }
    }

    #[test]
    fn chain_grammar_shape() {
        let g = chain_grammar(2, 4, 2, 0).unwrap();
        assert_eq!(g.num_actions(), 8);
        let v = synthesize_video(&g, 1, 0, 4, 0.0, 0).unwrap();
        let labels: Vec<_> = v.segments.iter().map(|s| s.label).collect();
        assert_eq!(labels, vec![4, 5, 6, 7]);
    }
}
