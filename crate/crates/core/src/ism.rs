//! Internal state memory: one recurrent state `s(t) = (h(t), c(t))` per
//! video and per second, with a counter of completed writes per slot.
//!
//! Reading the state that precedes second `t` returns the latest write to
//! slot `t - 1`, or zeros when `t = 0` or that slot was never written.
//! Only the latest version of a slot is kept.

use std::collections::BTreeMap;

use crate::datagen::VideoId;
use crate::error::{AfnError, Result};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
struct VideoStates<F> {
    rows: Vec<F>,
    counts: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank<F> {
    width: usize,
    videos: BTreeMap<VideoId, VideoStates<F>>,
}

impl<F: Real> MemoryBank<F> {
    /// `width` is `2H`: hidden and cell state side by side.
    pub fn new(width: usize) -> Self {
        MemoryBank {
            width,
            videos: BTreeMap::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Adds a video with `seconds` slots; re-registering keeps its contents.
    pub fn register(&mut self, video: VideoId, seconds: usize) {
        let width = self.width;
        self.videos.entry(video).or_insert_with(|| VideoStates {
            rows: vec![F::zero(); seconds * width],
            counts: vec![0; seconds],
        });
    }

    pub fn contains(&self, video: VideoId) -> bool {
        self.videos.contains_key(&video)
    }

    pub fn videos(&self) -> impl Iterator<Item = VideoId> + '_ {
        self.videos.keys().copied()
    }

    pub fn seconds(&self, video: VideoId) -> Result<usize> {
        Ok(self.slots(video)?.counts.len())
    }

    fn slots(&self, video: VideoId) -> Result<&VideoStates<F>> {
        self.videos
            .get(&video)
            .ok_or_else(|| AfnError::Lookup(format!("video {video} is not registered in the memory bank")))
    }

    fn check_t(&self, video: VideoId, t: usize) -> Result<&VideoStates<F>> {
        let slots = self.slots(video)?;
        if t >= slots.counts.len() {
            return Err(AfnError::Lookup(format!(
                "second {t} out of range for video {video} ({} s)",
                slots.counts.len()
            )));
        }
        Ok(slots)
    }

    /// State preceding second `t`.
    pub fn read_prev(&self, video: VideoId, t: usize) -> Result<Vec<F>> {
        let slots = self.check_t(video, t)?;
        if t == 0 || slots.counts[t - 1] == 0 {
            return Ok(vec![F::zero(); self.width]);
        }
        Ok(slots.rows[(t - 1) * self.width..t * self.width].to_vec())
    }

    /// Overwrites slot `t` and increments its counter.
    pub fn write_state(&mut self, video: VideoId, t: usize, state: &[F]) -> Result<()> {
        if state.len() != self.width {
            return Err(AfnError::dim("write_state", &[state.len()], &[self.width]));
        }
        self.check_t(video, t)?;
        let width = self.width;
        let slots = self.videos.get_mut(&video).expect("checked above");
        slots.rows[t * width..(t + 1) * width].copy_from_slice(state);
        slots.counts[t] += 1;
        Ok(())
    }

    /// Number of completed writes to slot `t`.
    pub fn count(&self, video: VideoId, t: usize) -> Result<u32> {
        Ok(self.check_t(video, t)?.counts[t])
    }

    /// Seconds `0..T` of a registered video, in order.
    pub fn sequential_cursor(&self, video: VideoId) -> Result<std::ops::Range<usize>> {
        Ok(0..self.seconds(video)?)
    }

    /// Zeroes every slot and counter, keeping registrations.
    pub fn reset(&mut self) {
        for slots in self.videos.values_mut() {
            slots.rows.iter_mut().for_each(|x| *x = F::zero());
            slots.counts.iter_mut().for_each(|c| *c = 0);
        }
    }

    /// Flat export for checkpoints: `(video, counts, rows)` per video.
    pub fn export(&self) -> Vec<(VideoId, Vec<u32>, Vec<F>)> {
        self.videos
            .iter()
            .map(|(&id, s)| (id, s.counts.clone(), s.rows.clone()))
            .collect()
    }

    pub fn import(width: usize, entries: Vec<(VideoId, Vec<u32>, Vec<F>)>) -> Result<Self> {
        let mut bank = MemoryBank::new(width);
        for (id, counts, rows) in entries {
            if rows.len() != counts.len() * width {
                return Err(AfnError::dim("memory import", &[rows.len()], &[counts.len() * width]));
            }
            bank.videos.insert(id, VideoStates { rows, counts });
        }
        Ok(bank)
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use proptest::prelude::*;

    use super::*;

    #[test]
    fn fresh_bank_reads_zero() {
        let mut bank = MemoryBank::<f64>::new(4);
        bank.register(1, 5);
        for t in 0..5 {
            assert_eq!(bank.read_prev(1, t).unwrap(), vec![0.0; 4]);
            assert_eq!(bank.count(1, t).unwrap(), 0);
        }
    }

    #[test]
    fn write_then_read_next_second() {
        let mut bank = MemoryBank::<f64>::new(2);
        bank.register(1, 8);
        bank.write_state(1, 4, &[1.0, 2.0]).unwrap();
        assert_eq!(bank.read_prev(1, 5).unwrap(), vec![1.0, 2.0]);
        assert_eq!(bank.read_prev(1, 4).unwrap(), vec![0.0, 0.0]);
        assert_eq!(bank.count(1, 4).unwrap(), 1);
        bank.write_state(1, 4, &[3.0, 4.0]).unwrap();
        assert_eq!(bank.read_prev(1, 5).unwrap(), vec![3.0, 4.0]);
        assert_eq!(bank.count(1, 4).unwrap(), 2);
    }

    #[test]
    fn errors() {
        let mut bank = MemoryBank::<f64>::new(2);
        bank.register(1, 3);
        assert!(bank.read_prev(2, 0).is_err());
        assert!(bank.read_prev(1, 3).is_err());
        assert!(bank.write_state(1, 0, &[1.0]).is_err());
        assert!(bank.write_state(1, 3, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn cursor_and_counts() {
        let mut bank = MemoryBank::<f64>::new(1);
        bank.register(9, 3);
        assert_eq!(bank.sequential_cursor(9).unwrap().collect::<Vec<_>>(), vec![0, 1, 2]);
        for pass in 1..=2 {
            for t in bank.sequential_cursor(9).unwrap() {
                let prev = bank.read_prev(9, t).unwrap();
                bank.write_state(9, t, &[prev[0] + 1.0]).unwrap();
            }
            for t in 0..3 {
                assert_eq!(bank.count(9, t).unwrap(), pass);
            }
        }
    }

    #[test]
    fn reset_matches_fresh_bank() {
        let mut bank = MemoryBank::<f64>::new(2);
        bank.register(1, 3);
        bank.register(2, 4);
        let fresh = bank.clone();
        bank.write_state(1, 0, &[1.0, 1.0]).unwrap();
        bank.write_state(2, 3, &[5.0, 1.0]).unwrap();
        bank.reset();
        assert_eq!(bank, fresh);
        bank.reset();
        assert_eq!(bank, fresh);
        assert_eq!(bank.read_prev(1, 1).unwrap(), vec![0.0, 0.0]);
    }

    #[derive(Clone, Debug)]
    enum Op {
        Write(VideoId, usize, f64),
        Read(VideoId, usize),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0u32..3, 0usize..4, -5.0f64..5.0).prop_map(|(v, t, x)| Op::Write(v, t, x)),
            (0u32..3, 0usize..4).prop_map(|(v, t)| Op::Read(v, t)),
        ]
    }

    proptest! {
        #[test]
        fn matches_shadow_map(ops in proptest::collection::vec(op(), 1..200)) {
            let mut bank = MemoryBank::<f64>::new(2);
            for v in 0..3 {
                bank.register(v, 4);
            }
            let mut shadow: HashMap<(VideoId, usize), [f64; 2]> = HashMap::new();
            for op in ops {
                match op {
                    Op::Write(v, t, x) => {
                        bank.write_state(v, t, &[x, -x]).unwrap();
                        shadow.insert((v, t), [x, -x]);
                    }
                    Op::Read(v, t) => {
                        let expect = if t == 0 { [0.0; 2] } else { shadow.get(&(v, t - 1)).copied().unwrap_or([0.0; 2]) };
                        prop_assert_eq!(bank.read_prev(v, t).unwrap(), expect.to_vec());
                    }
                }
            }
        }
    }
}
