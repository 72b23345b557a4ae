use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::metrics::PredictionRecord;
use crate::datagen::{oracle_prediction, ActivityGrammar, Dataset, DatasetMeta, Video, VideoId};
use crate::error::Result;
use crate::ism::MemoryBank;
use crate::model::{AfnModel, Mode};
use crate::protonet::{predict_activity, Prototype};
use crate::sampler::{sample_clip, ClipSample, SampleMode};
use crate::tensor::{argmax, Real};

/// Predictions for one second.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub current: usize,
    pub next: usize,
    pub activity: Option<usize>,
}

/// Anything that labels the seconds of a video in order.
pub trait Predictor<F: Real>: Sync {
    /// Called with the clips of seconds `0..T` of one video, in order.
    fn predict_video(&self, clips: &[ClipSample<F>]) -> Result<Vec<Prediction>>;
}

/// The network, run with a fresh memory per video and a sequential cursor.
pub struct ModelPredictor<'m, F> {
    pub model: &'m AfnModel<F>,
    pub prototypes: Option<&'m [Prototype<F>]>,
}

impl<F: Real> Predictor<F> for ModelPredictor<'_, F> {
    fn predict_video(&self, clips: &[ClipSample<F>]) -> Result<Vec<Prediction>> {
        let Some(first) = clips.first() else { return Ok(Vec::new()) };
        let mut bank = MemoryBank::new(self.model.state_width());
        bank.register(first.video, clips.len());
        // Inference draws nothing from the generator.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut out = Vec::with_capacity(clips.len());
        for t in bank.sequential_cursor(first.video)? {
            let clip = &clips[t];
            let trace = self.model.forward(clip, &bank, Mode::Inference, &mut rng)?;
            bank.write_state(clip.video, t, trace.s_new.data())?;
            let activity = match self.prototypes {
                Some(p) => Some(predict_activity(trace.u.data(), p)?),
                None => None,
            };
            out.push(Prediction {
                current: argmax(trace.y_now.data()),
                next: argmax(trace.y_next.data()),
                activity,
            });
        }
        Ok(out)
    }
}

/// Bayes oracle told the true activity and current action.
pub struct OraclePredictor<'g> {
    pub grammar: &'g ActivityGrammar,
}

impl<F: Real> Predictor<F> for OraclePredictor<'_> {
    fn predict_video(&self, clips: &[ClipSample<F>]) -> Result<Vec<Prediction>> {
        clips
            .iter()
            .map(|c| {
                Ok(Prediction {
                    current: c.y_current,
                    next: oracle_prediction(self.grammar, c.activity, c.y_current)?,
                    activity: Some(c.activity),
                })
            })
            .collect()
    }
}

/// Inference-mode clips of every second of a video.
pub fn video_clips<F: Real>(video: &Video, meta: &DatasetMeta) -> Result<Vec<ClipSample<F>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    (0..video.seconds())
        .map(|t| sample_clip(video, meta, SampleMode::InferenceAt(t), false, &mut rng))
        .collect()
}

/// One record per second of every video in `ids`, in id order then time.
/// Straddling seconds carry no predictions.
pub fn evaluate<F: Real, P: Predictor<F>>(predictor: &P, dataset: &Dataset, ids: &[VideoId]) -> Result<Vec<PredictionRecord>> {
    let per_video: Vec<Vec<PredictionRecord>> = ids
        .par_iter()
        .map(|&id| {
            let video = dataset.video(id)?;
            let clips = video_clips::<F>(video, &dataset.meta)?;
            let preds = predictor.predict_video(&clips)?;
            Ok(clips
                .iter()
                .zip(preds)
                .map(|(c, p)| PredictionRecord {
                    video: c.video,
                    t: c.t,
                    activity: c.activity,
                    pred_activity: if c.straddle { None } else { p.activity },
                    y_current: c.y_current,
                    pred_current: (!c.straddle).then_some(p.current),
                    y_next: c.y_next,
                    pred_next: (!c.straddle).then_some(p.next),
                    straddle: c.straddle,
                    horizon_fraction: c.horizon_fraction,
                    time_to_next_start: c.time_to_next_start,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_video.into_iter().flatten().collect())
}
