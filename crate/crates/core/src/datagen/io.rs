//! Line-delimited JSON dataset files.
//!
//! Record 0 is the header; every following line is one video:
//!
//! ```text
//! {"record":"header","format":"afn-dataset","version":1,"action_names":[..],
//!  "activity_names":[..],"channel_groups":[3,1,1,2],"height":8,"width":8,"framerate":4}
//! {"record":"video","id":0,"activity":1,"segments":[{"label":2,"start":0.0,"end":3.0},..],
//!  "frames_b64":"<little-endian f32>"}
//! ```
//!
//! A video may carry `"frames": [..]` (plain numbers) instead of
//! `frames_b64`, which is the form external feature extractors usually emit.
//! Frames are stored frame-major, channel groups in header order, each
//! channel as a row-major `height x width` plane.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::video::{Dataset, DatasetMeta, Segment, Video, VideoId};
use crate::error::{AfnError, Result};

pub const DATASET_FORMAT: &str = "afn-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase", deny_unknown_fields)]
enum Record {
    Header {
        format: String,
        version: u32,
        action_names: Vec<String>,
        activity_names: Vec<String>,
        channel_groups: Vec<usize>,
        height: usize,
        width: usize,
        framerate: u32,
    },
    Video {
        id: VideoId,
        activity: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        duration: Option<f64>,
        segments: Vec<Segment>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        frames_b64: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        frames: Option<Vec<f32>>,
    },
}

pub fn encode_frames(frames: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(frames.len() * 4);
    for x in frames {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_frames(text: &str) -> std::result::Result<Vec<f32>, String> {
    let bytes = STANDARD.decode(text).map_err(|e| e.to_string())?;
    if bytes.len() % 4 != 0 {
        return Err(format!("{} bytes is not a whole number of f32 values", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| AfnError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut emit = |record: &Record| -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| AfnError::Invalid(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| AfnError::io(path, e))
    };
    let m = &dataset.meta;
    emit(&Record::Header {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        action_names: m.action_names.clone(),
        activity_names: m.activity_names.clone(),
        channel_groups: m.channel_groups.clone(),
        height: m.height,
        width: m.width,
        framerate: m.framerate,
    })?;
    for v in &dataset.videos {
        emit(&Record::Video {
            id: v.id,
            activity: v.activity,
            duration: Some(v.duration),
            segments: v.segments.clone(),
            frames_b64: Some(encode_frames(&v.frames)),
            frames: None,
        })?;
    }
    out.flush().map_err(|e| AfnError::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| AfnError::io(path, e))?;
    parse_dataset(BufReader::new(file))
}

pub fn parse_dataset(reader: impl BufRead) -> Result<Dataset> {
    let mut meta: Option<DatasetMeta> = None;
    let mut videos = Vec::new();
    let mut index = 0;
    for line in reader.lines() {
        let line = line.map_err(|e| AfnError::Parse {
            record: index,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |reason: String| AfnError::Parse { record: index, reason };
        let record: Record = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
        match (record, &meta) {
            (
                Record::Header {
                    format,
                    version,
                    action_names,
                    activity_names,
                    channel_groups,
                    height,
                    width,
                    framerate,
                },
                None,
            ) => {
                let m = DatasetMeta {
                    action_names,
                    activity_names,
                    channel_groups,
                    height,
                    width,
                    framerate,
                };
                if format != DATASET_FORMAT {
                    return Err(fail(format!("unexpected format `{format}`")));
                }
                if version != DATASET_VERSION {
                    return Err(AfnError::Version {
                        found: version,
                        expected: DATASET_VERSION,
                    });
                }
                if m.framerate == 0 || m.height == 0 || m.width == 0 || m.channel_groups.contains(&0) {
                    return Err(fail("header extents must be positive".into()));
                }
                meta = Some(m);
            }
            (Record::Header { .. }, Some(_)) => return Err(fail("duplicate header".into())),
            (Record::Video { .. }, None) => return Err(fail("video record before header".into())),
            (
                Record::Video {
                    id,
                    activity,
                    duration,
                    segments,
                    frames_b64,
                    frames,
                },
                Some(m),
            ) => {
                let frames = match (frames_b64, frames) {
                    (Some(b64), None) => decode_frames(&b64).map_err(fail)?,
                    (None, Some(list)) => list,
                    _ => return Err(fail("exactly one of `frames_b64` and `frames` is required".into())),
                };
                let duration = duration.or(segments.last().map(|s| s.end)).unwrap_or(0.0);
                let video = Video {
                    id,
                    activity,
                    segments,
                    duration,
                    frames,
                };
                video.check_segments().map_err(|e| fail(e.to_string()))?;
                if activity >= m.num_activities() {
                    return Err(fail(format!("activity {activity} not in header")));
                }
                if video.segments.iter().any(|s| s.label >= m.num_actions()) {
                    return Err(fail("segment label not in header".into()));
                }
                let expected = video.frame_count(m.framerate) * m.frame_len();
                if video.frames.len() != expected {
                    return Err(fail(format!(
                        "expected {expected} frame values, found {}",
                        video.frames.len()
                    )));
                }
                if videos.iter().any(|v: &Video| v.id == id) {
                    return Err(fail(format!("duplicate video id {id}")));
                }
                videos.push(video);
            }
        }
        index += 1;
    }
    let meta = meta.ok_or(AfnError::Parse {
        record: 0,
        reason: "missing header".into(),
    })?;
    Ok(Dataset { meta, videos })
}
