//! Frame-based F1 and error rate.
//!
//! Every frame is compared class by class. Per frame, substitutions pair
//! up misses with false alarms: `S = min(FN, FP)`, `D = FN - S`,
//! `I = FP - S`. Totals are sums over the valid frames, and F1 is
//! micro-averaged over all frames and classes.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::roll::EventRoll;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FrameCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub substitutions: u64,
    pub deletions: u64,
    pub insertions: u64,
    /// Active reference (frame, class) pairs.
    pub n_ref: u64,
    pub frames: u64,
}

impl FrameCounts {
    pub fn merge(&mut self, other: &FrameCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.n_ref += other.n_ref;
        self.frames += other.frames;
    }

    /// Counts for one frame from its reference and predicted activity rows.
    pub fn from_frame(reference: &[bool], prediction: &[bool]) -> FrameCounts {
        let (mut tp, mut fp, mut fn_, mut n) = (0u64, 0u64, 0u64, 0u64);
        for (&r, &p) in reference.iter().zip(prediction) {
            match (r, p) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => {}
            }
            n += r as u64;
        }
        let s = fn_.min(fp);
        FrameCounts {
            tp,
            fp,
            fn_,
            substitutions: s,
            deletions: fn_ - s,
            insertions: fp - s,
            n_ref: n,
            frames: 1,
        }
    }
}

/// Sums frame counts over the frames where `mask` (if given) is true.
pub fn accumulate(reference: &EventRoll, prediction: &EventRoll, mask: Option<&[bool]>) -> Result<FrameCounts> {
    if reference.frames() != prediction.frames() || reference.classes() != prediction.classes() {
        return Err(Error::Validation(format!(
            "reference is {}×{} but prediction is {}×{}",
            reference.frames(),
            reference.classes(),
            prediction.frames(),
            prediction.classes()
        )));
    }
    if let Some(m) = mask {
        if m.len() != reference.frames() {
            return Err(Error::Validation(format!(
                "mask has {} entries for {} frames",
                m.len(),
                reference.frames()
            )));
        }
    }
    let mut total = FrameCounts::default();
    for t in 0..reference.frames() {
        if mask.is_some_and(|m| !m[t]) {
            continue;
        }
        total.merge(&FrameCounts::from_frame(reference.row(t), prediction.row(t)));
    }
    Ok(total)
}

/// `2TP / (2TP + FP + FN)`, or 0 when nothing was active or predicted.
pub fn f1(c: &FrameCounts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * c.tp) as f64 / denom as f64
    }
}

/// `(S + D + I) / N`. With no active reference, 0 if nothing was inserted
/// and `+∞` otherwise; [`ScoreReport`] flags the latter.
pub fn error_rate(c: &FrameCounts) -> f64 {
    if c.n_ref == 0 {
        if c.insertions == 0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (c.substitutions + c.deletions + c.insertions) as f64 / c.n_ref as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreReport {
    pub f1: f64,
    pub error_rate: f64,
    /// Set when the reference had no active frames but predictions did.
    pub er_undefined: bool,
    pub counts: FrameCounts,
}

impl ScoreReport {
    pub fn from_counts(counts: FrameCounts) -> Self {
        let er = error_rate(&counts);
        ScoreReport {
            f1: f1(&counts),
            error_rate: er,
            er_undefined: er.is_infinite(),
            counts,
        }
    }

    /// Aligned two-column table.
    pub fn to_table(&self) -> String {
        let c = &self.counts;
        let rows: [(&str, String); 11] = [
            ("F1", format!("{:.4}", self.f1)),
            (
                "ER",
                if self.er_undefined {
                    "undefined (no reference activity)".into()
                } else {
                    format!("{:.4}", self.error_rate)
                },
            ),
            ("TP", c.tp.to_string()),
            ("FP", c.fp.to_string()),
            ("FN", c.fn_.to_string()),
            ("S", c.substitutions.to_string()),
            ("D", c.deletions.to_string()),
            ("I", c.insertions.to_string()),
            ("N", c.n_ref.to_string()),
            ("frames", c.frames.to_string()),
            ("er_undefined", self.er_undefined.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<14}{v:>12}");
        }
        out
    }

    /// `metric=value` lines.
    pub fn to_kv(&self) -> String {
        let c = &self.counts;
        format!(
            "f1={}\ner={}\ner_undefined={}\ntp={}\nfp={}\nfn={}\nsubstitutions={}\ndeletions={}\ninsertions={}\nn_ref={}\nframes={}\n",
            self.f1,
            self.error_rate,
            self.er_undefined,
            c.tp,
            c.fp,
            c.fn_,
            c.substitutions,
            c.deletions,
            c.insertions,
            c.n_ref,
            c.frames
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub f1_mean: f64,
    pub f1_std: f64,
    pub er_mean: f64,
    pub er_std: f64,
    pub repeats: usize,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Unweighted mean over folds (or scenes) within each repeat, then
/// mean and population standard deviation across repeats.
pub fn aggregate(repeats: &[Vec<ScoreReport>]) -> Result<Aggregate> {
    if repeats.is_empty() || repeats.iter().any(|r| r.is_empty()) {
        return Err(Error::Usage("aggregate needs at least one report per repeat".into()));
    }
    let per_repeat = |pick: fn(&ScoreReport) -> f64| -> Vec<f64> {
        repeats
            .iter()
            .map(|folds| folds.iter().map(pick).sum::<f64>() / folds.len() as f64)
            .collect()
    };
    let (f1_mean, f1_std) = mean_std(&per_repeat(|r| r.f1));
    let (er_mean, er_std) = mean_std(&per_repeat(|r| r.error_rate));
    Ok(Aggregate {
        f1_mean,
        f1_std,
        er_mean,
        er_std,
        repeats: repeats.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roll(frames: &[&[usize]], classes: usize) -> EventRoll {
        let mut r = EventRoll::new(frames.len(), classes, 0.02);
        for (t, act) in frames.iter().enumerate() {
            for &c in *act {
                r.set(t, c, true);
            }
        }
        r
    }

    #[test]
    fn identical_rolls_are_perfect() {
        let r = roll(&[&[0, 1], &[1], &[]], 3);
        let c = accumulate(&r, &r, None).unwrap();
        assert_eq!((c.fp, c.fn_, c.substitutions, c.deletions, c.insertions), (0, 0, 0, 0, 0));
        assert_eq!(f1(&c), 1.0);
        assert_eq!(error_rate(&c), 0.0);
    }

    #[test]
    fn worked_example() {
        // A=0, B=1, C=2
        let reference = roll(&[&[0, 1], &[0]], 3);
        let prediction = roll(&[&[0, 2], &[]], 3);
        let c = accumulate(&reference, &prediction, None).unwrap();
        assert_eq!(
            (c.tp, c.fp, c.fn_, c.substitutions, c.deletions, c.insertions, c.n_ref),
            (1, 1, 2, 1, 1, 0, 3)
        );
        assert!((error_rate(&c) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1(&c), 0.4);
    }

    #[test]
    fn empty_reference_flags_undefined_error_rate() {
        let reference = roll(&[&[], &[]], 2);
        let prediction = roll(&[&[1], &[]], 2);
        let report = ScoreReport::from_counts(accumulate(&reference, &prediction, None).unwrap());
        assert!(report.er_undefined);
        assert!(report.error_rate.is_infinite());
        assert!(report.to_kv().contains("er_undefined=true"));
        let silent = ScoreReport::from_counts(accumulate(&reference, &reference, None).unwrap());
        assert!(!silent.er_undefined);
        assert_eq!(silent.error_rate, 0.0);
        assert_eq!(silent.f1, 0.0);
    }

    #[test]
    fn mask_excludes_frames_and_shapes_must_match() {
        let reference = roll(&[&[0], &[0]], 2);
        let prediction = roll(&[&[0], &[1]], 2);
        let c = accumulate(&reference, &prediction, Some(&[true, false])).unwrap();
        assert_eq!(f1(&c), 1.0);
        assert_eq!(c.frames, 1);
        let other = roll(&[&[0]], 2);
        assert!(accumulate(&reference, &other, None).is_err());
    }

    #[test]
    fn doubling_counts_is_scale_invariant() {
        let c = FrameCounts {
            tp: 3,
            fp: 2,
            fn_: 4,
            substitutions: 2,
            deletions: 2,
            insertions: 0,
            n_ref: 7,
            frames: 5,
        };
        let mut d = c;
        d.merge(&c);
        assert_eq!(f1(&c), f1(&d));
        assert_eq!(error_rate(&c), error_rate(&d));
    }

    fn report(f1: f64, er: f64) -> ScoreReport {
        ScoreReport {
            f1,
            error_rate: er,
            er_undefined: false,
            counts: FrameCounts::default(),
        }
    }

    #[test]
    fn aggregation() {
        let single = aggregate(&[vec![report(0.5, 0.7)]]).unwrap();
        assert_eq!((single.f1_mean, single.f1_std), (0.5, 0.0));

        let folds = aggregate(&[vec![report(0.2, 1.0), report(0.4, 0.5)]]).unwrap();
        assert!((folds.f1_mean - 0.3).abs() < 1e-15);

        // Hand-computed: values 0.1, 0.2, 0.3, 0.6 have mean 0.3 and
        // population variance (0.04 + 0.01 + 0 + 0.09) / 4 = 0.035.
        let reps: Vec<_> = [0.1, 0.2, 0.3, 0.6].iter().map(|&v| vec![report(v, v)]).collect();
        let a = aggregate(&reps).unwrap();
        assert!((a.f1_mean - 0.3).abs() < 1e-12);
        assert!((a.f1_std - 0.035f64.sqrt()).abs() < 1e-12);
        assert_eq!(a.repeats, 4);

        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn table_lists_metrics_and_counts() {
        let r = report(0.25, 0.5);
        let table = r.to_table();
        assert!(table.contains("F1") && table.contains("0.2500") && table.contains("TP"));
    }
}
