//! Binary frame × class activity matrices.

use crate::error::{Error, Result};
use crate::tensor::Real;

/// A contiguous run of activity for one class, in frames (`offset` exclusive).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct FrameEvent {
    pub class: usize,
    pub onset: usize,
    pub offset: usize,
}

/// Binary `[T × C]` activity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRoll {
    frames: usize,
    classes: usize,
    hop: f64,
    active: Vec<bool>,
}

impl EventRoll {
    pub fn new(frames: usize, classes: usize, hop: f64) -> Self {
        EventRoll {
            frames,
            classes,
            hop,
            active: vec![false; frames * classes],
        }
    }

    /// Builds a roll from `0/1` values; anything else is rejected.
    pub fn from_binary<T: Real>(frames: usize, classes: usize, hop: f64, values: &[T]) -> Result<Self> {
        if values.len() != frames * classes {
            return Err(Error::Validation(format!(
                "roll of {frames}×{classes} needs {} values, got {}",
                frames * classes,
                values.len()
            )));
        }
        let mut active = Vec::with_capacity(values.len());
        for (i, &v) in values.iter().enumerate() {
            if v == T::one() {
                active.push(true);
            } else if v == T::zero() {
                active.push(false);
            } else {
                return Err(Error::Validation(format!(
                    "activity at frame {} class {} is {v}, expected 0 or 1",
                    i / classes,
                    i % classes
                )));
            }
        }
        Ok(EventRoll {
            frames,
            classes,
            hop,
            active,
        })
    }

    /// `values >= threshold` becomes active.
    pub fn from_threshold<T: Real>(frames: usize, classes: usize, hop: f64, values: &[T], threshold: f64) -> Self {
        assert_eq!(values.len(), frames * classes);
        let th = T::lit(threshold);
        EventRoll {
            frames,
            classes,
            hop,
            active: values.iter().map(|&v| v >= th).collect(),
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Seconds between consecutive frames.
    pub fn hop(&self) -> f64 {
        self.hop
    }

    pub fn get(&self, t: usize, c: usize) -> bool {
        self.active[t * self.classes + c]
    }

    pub fn set(&mut self, t: usize, c: usize, on: bool) {
        self.active[t * self.classes + c] = on;
    }

    pub fn row(&self, t: usize) -> &[bool] {
        &self.active[t * self.classes..(t + 1) * self.classes]
    }

    pub fn active_count(&self, t: usize) -> usize {
        self.row(t).iter().filter(|&&a| a).count()
    }

    pub fn max_polyphony(&self) -> usize {
        (0..self.frames).map(|t| self.active_count(t)).max().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        !self.active.iter().any(|&a| a)
    }

    pub fn to_values<T: Real>(&self) -> Vec<T> {
        self.active
            .iter()
            .map(|&a| if a { T::one() } else { T::zero() })
            .collect()
    }

    /// Maximal runs of activity, ordered by onset then class.
    pub fn events(&self) -> Vec<FrameEvent> {
        let mut out = Vec::new();
        for c in 0..self.classes {
            let mut start = None;
            for t in 0..=self.frames {
                let on = t < self.frames && self.get(t, c);
                match (on, start) {
                    (true, None) => start = Some(t),
                    (false, Some(s)) => {
                        out.push(FrameEvent {
                            class: c,
                            onset: s,
                            offset: t,
                        });
                        start = None;
                    }
                    _ => {}
                }
            }
        }
        out.sort_by_key(|e| (e.onset, e.class, e.offset));
        out
    }

    /// Rows `start..end` as a new roll.
    pub fn slice(&self, start: usize, end: usize) -> EventRoll {
        EventRoll {
            frames: end - start,
            classes: self.classes,
            hop: self.hop,
            active: self.active[start * self.classes..end * self.classes].to_vec(),
        }
    }

    /// Permutes the class axis: class `c` moves to `perm[c]`.
    pub fn permute_classes(&self, perm: &[usize]) -> EventRoll {
        let mut out = EventRoll::new(self.frames, self.classes, self.hop);
        for t in 0..self.frames {
            for c in 0..self.classes {
                out.set(t, perm[c], self.get(t, c));
            }
        }
        out
    }
}
