//! Synthetic corpora with and without temporal structure, and DCASE-style
//! annotation files.
//!
//! A structured sequence is a walk over an [`EventGrammar`]: each event's
//! class is drawn from the transition row of the previous one, may trigger
//! co-occurring events, and may repeat. An unstructured sequence places the
//! same kind of events independently and uniformly. Features are rendered
//! directly in the mel domain from per-class spectral templates.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{read_feature_cache, write_feature_cache, FeatureMatrix, N_MELS};
use crate::rng::{stream, Stream};
use crate::roll::EventRoll;

/// Energy added before log compression of rendered features.
pub const RENDER_FLOOR: f64 = 1e-3;

const STREET_LABELS: [&str; 6] = [
    "brakes_squeaking",
    "car",
    "children",
    "large_vehicle",
    "people_speaking",
    "people_walking",
];

pub fn default_labels(n_classes: usize) -> Vec<String> {
    if n_classes == STREET_LABELS.len() {
        STREET_LABELS.iter().map(|s| s.to_string()).collect()
    } else {
        (0..n_classes).map(|c| format!("class_{c}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventGrammar {
    pub n_classes: usize,
    /// Row-stochastic: `transition[a][b]` is the chance that `b` follows `a`.
    pub transition: Vec<Vec<f64>>,
    /// Symmetric chance that class `b` starts alongside class `a`.
    pub cooccurrence: Vec<Vec<f64>>,
    /// Inclusive event length range in frames, per class.
    pub durations: Vec<(usize, usize)>,
    /// Chance that an event is immediately followed by another of its class.
    pub repetition: Vec<f64>,
    /// Inclusive range of silent frames between successive events. With a
    /// minimum of 0 a repeat can merge into the event before it.
    pub gap: (usize, usize),
    pub max_polyphony: usize,
}

impl Default for EventGrammar {
    fn default() -> Self {
        EventGrammar::street(0.7)
    }
}

impl EventGrammar {
    /// Six classes where each class is followed by the next one (cyclically)
    /// with probability `strength`, the remainder spread evenly. The two
    /// "people" classes tend to co-occur.
    pub fn street(strength: f64) -> Self {
        let c = 6;
        let rest = (1.0 - strength) / (c - 1) as f64;
        let transition = (0..c)
            .map(|a| (0..c).map(|b| if b == (a + 1) % c { strength } else { rest }).collect())
            .collect();
        let mut cooccurrence = vec![vec![0.0; c]; c];
        cooccurrence[4][5] = 0.5;
        cooccurrence[5][4] = 0.5;
        EventGrammar {
            n_classes: c,
            transition,
            cooccurrence,
            durations: vec![(8, 32); c],
            repetition: vec![0.2; c],
            gap: (1, 6),
            max_polyphony: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.n_classes;
        let bad = |msg: String| Err(Error::Config(format!("event grammar: {msg}")));
        if c == 0 {
            return bad("needs at least one class".into());
        }
        if self.transition.len() != c || self.transition.iter().any(|r| r.len() != c) {
            return bad(format!("transition matrix must be {c}×{c}"));
        }
        for (a, row) in self.transition.iter().enumerate() {
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return bad(format!("transition row {a} has an entry outside [0, 1]"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return bad(format!("transition row {a} sums to {s}, not 1"));
            }
        }
        if self.cooccurrence.len() != c || self.cooccurrence.iter().any(|r| r.len() != c) {
            return bad(format!("co-occurrence matrix must be {c}×{c}"));
        }
        for a in 0..c {
            for b in 0..c {
                let p = self.cooccurrence[a][b];
                if !(0.0..=1.0).contains(&p) {
                    return bad(format!("co-occurrence ({a}, {b}) = {p} is outside [0, 1]"));
                }
                if p != self.cooccurrence[b][a] {
                    return bad(format!("co-occurrence is not symmetric at ({a}, {b})"));
                }
            }
        }
        if self.durations.len() != c || self.durations.iter().any(|&(lo, hi)| lo == 0 || lo > hi) {
            return bad(format!("needs {c} duration ranges with 1 <= min <= max"));
        }
        if self.repetition.len() != c || self.repetition.iter().any(|&p| !(0.0..1.0).contains(&p)) {
            return bad(format!("needs {c} repetition probabilities in [0, 1)"));
        }
        if self.gap.0 > self.gap.1 {
            return bad("gap range must satisfy min <= max".into());
        }
        if self.max_polyphony == 0 {
            return bad("max polyphony must be at least 1".into());
        }
        Ok(())
    }

    fn duration_span(&self) -> (usize, usize) {
        let lo = self.durations.iter().map(|d| d.0).min().unwrap_or(1);
        let hi = self.durations.iter().map(|d| d.1).max().unwrap_or(1);
        (lo, hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    /// Drawn from the transition chain.
    Chain,
    /// A repeat of the preceding chain event's class.
    Repeat,
    /// Started alongside a chain event.
    Cooccurring,
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlacedEvent {
    pub class: usize,
    pub onset: usize,
    /// Exclusive, clipped to the sequence length.
    pub offset: usize,
    pub placement: Placement,
}

/// Tracks per-frame activity counts so placements respect the polyphony cap.
struct Occupancy {
    counts: Vec<usize>,
    cap: usize,
    events: Vec<PlacedEvent>,
}

impl Occupancy {
    fn new(frames: usize, cap: usize) -> Self {
        Occupancy {
            counts: vec![0; frames],
            cap,
            events: Vec::new(),
        }
    }

    fn try_place(&mut self, class: usize, onset: usize, len: usize, placement: Placement) -> bool {
        let frames = self.counts.len();
        if onset >= frames {
            return false;
        }
        let offset = (onset + len).min(frames);
        if self.counts[onset..offset].iter().any(|&n| n >= self.cap) {
            return false;
        }
        for n in &mut self.counts[onset..offset] {
            *n += 1;
        }
        self.events.push(PlacedEvent {
            class,
            onset,
            offset,
            placement,
        });
        true
    }
}

fn categorical(row: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

/// A structured draw: the placed events and the class chain that produced
/// them, including chain events that could not be placed.
#[derive(Debug, Clone)]
pub struct StructuredDraw {
    pub events: Vec<PlacedEvent>,
    pub chain: Vec<usize>,
}

pub fn sample_structured_events(grammar: &EventGrammar, frames: usize, rng: &mut ChaCha8Rng) -> StructuredDraw {
    let c = grammar.n_classes;
    let mut occ = Occupancy::new(frames, grammar.max_polyphony);
    let mut chain = Vec::new();
    let draw_len = |class: usize, rng: &mut ChaCha8Rng| {
        let (lo, hi) = grammar.durations[class];
        rng.random_range(lo..=hi)
    };
    let draw_gap = |rng: &mut ChaCha8Rng| rng.random_range(grammar.gap.0..=grammar.gap.1);

    let mut cursor = rng.random_range(0..=grammar.gap.1);
    let mut class = rng.random_range(0..c);
    while cursor < frames {
        chain.push(class);
        let len = draw_len(class, rng);
        occ.try_place(class, cursor, len, Placement::Chain);
        for other in 0..c {
            let p = grammar.cooccurrence[class][other];
            if other != class && p > 0.0 && rng.random_bool(p) {
                let lag = rng.random_range(0..=2);
                let other_len = draw_len(other, rng);
                occ.try_place(other, cursor + lag, other_len, Placement::Cooccurring);
            }
        }
        let mut end = cursor + len;
        while grammar.repetition[class] > 0.0 && rng.random_bool(grammar.repetition[class]) {
            let start = end + draw_gap(rng);
            let rep_len = draw_len(class, rng);
            occ.try_place(class, start, rep_len, Placement::Repeat);
            end = start + rep_len;
        }
        cursor = end + draw_gap(rng);
        class = categorical(&grammar.transition[class], rng);
    }
    StructuredDraw {
        events: occ.events,
        chain,
    }
}

fn rasterize(events: &[PlacedEvent], frames: usize, classes: usize, hop: f64) -> EventRoll {
    let mut roll = EventRoll::new(frames, classes, hop);
    for e in events {
        for t in e.onset..e.offset {
            roll.set(t, e.class, true);
        }
    }
    roll
}

pub fn sample_structured(grammar: &EventGrammar, frames: usize, hop: f64, rng: &mut ChaCha8Rng) -> EventRoll {
    let draw = sample_structured_events(grammar, frames, rng);
    rasterize(&draw.events, frames, grammar.n_classes, hop)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnstructuredParams {
    pub n_classes: usize,
    pub expected_events: f64,
    pub durations: (usize, usize),
    pub max_polyphony: usize,
}

/// Poisson-many events with uniform class, onset and length. Events that
/// would exceed the polyphony cap are dropped.
pub fn sample_unstructured_events(p: &UnstructuredParams, frames: usize, rng: &mut ChaCha8Rng) -> Vec<PlacedEvent> {
    let n = if p.expected_events > 0.0 {
        Poisson::new(p.expected_events).map(|d| d.sample(rng) as usize).unwrap_or(0)
    } else {
        0
    };
    let mut occ = Occupancy::new(frames, p.max_polyphony);
    for _ in 0..n {
        let class = rng.random_range(0..p.n_classes);
        let onset = rng.random_range(0..frames.max(1));
        let len = rng.random_range(p.durations.0..=p.durations.1);
        occ.try_place(class, onset, len, Placement::Independent);
    }
    occ.events.sort_by_key(|e| e.onset);
    occ.events
}

pub fn sample_unstructured(p: &UnstructuredParams, frames: usize, hop: f64, rng: &mut ChaCha8Rng) -> EventRoll {
    let events = sample_unstructured_events(p, frames, rng);
    rasterize(&events, frames, p.n_classes, hop)
}

/// Spectral template of one class in the mel-band domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassPattern {
    /// Band index of the peak (fractional allowed).
    pub center_band: f64,
    /// Gaussian width in bands.
    pub bandwidth: f64,
    pub amplitude: f64,
    /// Level the envelope decays to, relative to the onset.
    pub sustain: f64,
    /// Envelope decay time constant in frames; 0 means flat.
    pub decay: f64,
}

impl ClassPattern {
    fn band_energy(&self, band: usize) -> f64 {
        let z = (band as f64 - self.center_band) / self.bandwidth;
        self.amplitude * (-0.5 * z * z).exp()
    }

    fn envelope(&self, frames_since_onset: usize) -> f64 {
        if self.decay <= 0.0 {
            1.0
        } else {
            self.sustain + (1.0 - self.sustain) * (-(frames_since_onset as f64) / self.decay).exp()
        }
    }
}

/// Evenly spaced templates across the mel range.
pub fn default_patterns(n_classes: usize) -> Vec<ClassPattern> {
    (0..n_classes)
        .map(|c| {
            let center = if n_classes == 1 {
                N_MELS as f64 / 2.0
            } else {
                4.0 + c as f64 * (N_MELS as f64 - 8.0) / (n_classes - 1) as f64
            };
            ClassPattern {
                center_band: center,
                bandwidth: 2.5,
                amplitude: 1.0,
                sustain: 0.6,
                decay: 6.0,
            }
        })
        .collect()
}

/// Sum of active templates plus squared Gaussian noise, log-compressed.
pub fn render_features(
    roll: &EventRoll,
    patterns: &[ClassPattern],
    noise_level: f64,
    rng: &mut ChaCha8Rng,
) -> Result<FeatureMatrix> {
    if patterns.len() < roll.classes() {
        return Err(Error::Config(format!(
            "{} classes need as many patterns, got {}",
            roll.classes(),
            patterns.len()
        )));
    }
    let frames = roll.frames();
    let mut energy = vec![0.0f64; frames * N_MELS];
    for ev in roll.events() {
        let pat = &patterns[ev.class];
        for t in ev.onset..ev.offset {
            let env = pat.envelope(t - ev.onset);
            for (b, e) in energy[t * N_MELS..(t + 1) * N_MELS].iter_mut().enumerate() {
                *e += env * pat.band_energy(b);
            }
        }
    }
    let values = energy
        .into_iter()
        .map(|e| {
            let n: f64 = if noise_level > 0.0 {
                noise_level * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            (e + n * n + RENDER_FLOOR).ln() as f32
        })
        .collect();
    FeatureMatrix::new(frames, N_MELS, values, roll.hop())
}

pub fn format_annotations(roll: &EventRoll, labels: &[String]) -> Result<String> {
    if labels.len() < roll.classes() {
        return Err(Error::Config(format!(
            "{} classes need as many labels, got {}",
            roll.classes(),
            labels.len()
        )));
    }
    let hop = roll.hop();
    let mut out = String::new();
    for ev in roll.events() {
        let _ = writeln!(
            out,
            "{:.6}\t{:.6}\t{}",
            ev.onset as f64 * hop,
            ev.offset as f64 * hop,
            labels[ev.class]
        );
    }
    Ok(out)
}

pub fn write_annotations(roll: &EventRoll, labels: &[String], path: &Path) -> Result<()> {
    fs::write(path, format_annotations(roll, labels)?).map_err(|e| Error::io(path, e))
}

/// Marks frame `t` active when its center `(t + 0.5) · hop` lies in
/// `[onset, offset)`.
pub fn parse_annotations(text: &str, frames: usize, hop: f64, labels: &[String], context: &str) -> Result<EventRoll> {
    let mut roll = EventRoll::new(frames, labels.len(), hop);
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |msg: String| Error::parse(context, format!("line {line_no}"), msg);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(format!("expected onset<TAB>offset<TAB>label, found {} fields", fields.len())));
        }
        let time = |s: &str, what: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v >= 0.0)
                .ok_or_else(|| err(format!("{what} {s:?} is not a non-negative number")))
        };
        let onset = time(fields[0], "onset")?;
        let offset = time(fields[1], "offset")?;
        if onset >= offset {
            return Err(err(format!("onset {onset} is not before offset {offset}")));
        }
        let label = fields[2].trim();
        let class = labels.iter().position(|l| l == label).ok_or_else(|| {
            Error::Validation(format!(
                "{context} line {line_no}: unknown label {label:?}; known labels are {}",
                labels.join(", ")
            ))
        })?;
        let first = ((onset / hop) - 0.5).ceil().max(0.0) as usize;
        for t in first..frames {
            let center = (t as f64 + 0.5) * hop;
            if center >= offset {
                break;
            }
            if center >= onset {
                roll.set(t, class, true);
            }
        }
    }
    Ok(roll)
}

pub fn read_annotations(path: &Path, frames: usize, hop: f64, labels: &[String]) -> Result<EventRoll> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, frames, hop, labels, &path.display().to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    Structured,
    Unstructured,
}

impl std::str::FromStr for CorpusKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "structured" => Ok(CorpusKind::Structured),
            "unstructured" => Ok(CorpusKind::Unstructured),
            other => Err(Error::Usage(format!(
                "unknown corpus kind {other:?}; expected structured or unstructured"
            ))),
        }
    }
}

impl std::fmt::Display for CorpusKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CorpusKind::Structured => "structured",
            CorpusKind::Unstructured => "unstructured",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Usage(format!("unknown split {other:?}; expected train, val or test"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusParams {
    pub n_sequences: usize,
    pub frames: usize,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub hop_seconds: f64,
    pub noise_level: f64,
    pub grammar: EventGrammar,
    /// Defaults to [`default_patterns`].
    pub patterns: Option<Vec<ClassPattern>>,
    /// Mean events per unstructured sequence; by default matched to the
    /// grammar's event count so both kinds have equal density.
    pub unstructured_events: Option<f64>,
}

impl Default for CorpusParams {
    fn default() -> Self {
        CorpusParams {
            n_sequences: 100,
            frames: 128,
            split: [0.6, 0.2, 0.2],
            hop_seconds: 0.011,
            noise_level: 0.3,
            grammar: EventGrammar::default(),
            patterns: None,
            unstructured_events: None,
        }
    }
}

impl CorpusParams {
    pub fn n_classes(&self) -> usize {
        self.grammar.n_classes
    }

    pub fn patterns(&self) -> Vec<ClassPattern> {
        self.patterns.clone().unwrap_or_else(|| default_patterns(self.n_classes()))
    }

    /// `(train, val, test)` sequence counts.
    pub fn split_counts(&self) -> Result<(usize, usize, usize)> {
        let s: f64 = self.split.iter().sum();
        if self.split.iter().any(|&r| r <= 0.0) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios {:?} must be positive and sum to 1",
                self.split
            )));
        }
        let n = self.n_sequences;
        let train = (self.split[0] * n as f64).round() as usize;
        let val = (self.split[1] * n as f64).round() as usize;
        let test = n.saturating_sub(train + val);
        if train == 0 || val == 0 || test == 0 {
            return Err(Error::Config(format!(
                "{n} sequences cannot fill three non-empty splits at {:?}",
                self.split
            )));
        }
        Ok((train, val, test))
    }

    /// Unstructured sampling parameters at the same event density as the
    /// grammar.
    pub fn unstructured(&self) -> UnstructuredParams {
        let expected_events = self
            .unstructured_events
            .unwrap_or_else(|| matched_event_count(&self.grammar, self.frames));
        UnstructuredParams {
            n_classes: self.n_classes(),
            expected_events,
            durations: self.grammar.duration_span(),
            max_polyphony: self.grammar.max_polyphony,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grammar.validate()?;
        self.split_counts()?;
        if self.frames == 0 {
            return Err(Error::Config("corpus sequences need at least one frame".into()));
        }
        if !(self.hop_seconds > 0.0) || !(self.noise_level >= 0.0) {
            return Err(Error::Config("hop must be positive and noise level non-negative".into()));
        }
        if self.patterns().len() != self.n_classes() {
            return Err(Error::Config(format!(
                "{} classes need as many patterns, got {}",
                self.n_classes(),
                self.patterns().len()
            )));
        }
        Ok(())
    }
}

/// Mean number of placed events per structured sequence, from a fixed
/// calibration sample independent of any corpus seed.
pub fn matched_event_count(grammar: &EventGrammar, frames: usize) -> f64 {
    const DRAWS: u64 = 256;
    let total: usize = (0..DRAWS)
        .map(|i| sample_structured_events(grammar, frames, &mut stream(0, Stream::Data, i)).events.len())
        .sum();
    total as f64 / DRAWS as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub features: FeatureMatrix,
    pub roll: EventRoll,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub kind: Option<CorpusKind>,
    pub labels: Vec<String>,
    pub hop_seconds: f64,
    pub train: Vec<Sequence>,
    pub val: Vec<Sequence>,
    pub test: Vec<Sequence>,
}

impl Corpus {
    pub fn n_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn split(&self, split: Split) -> &[Sequence] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Generates a corpus. Sequence `i` draws its activity and its noise from
/// streams derived from `(seed, i)`, so splits never share draws.
pub fn make_corpus(kind: CorpusKind, params: &CorpusParams, seed: u64) -> Result<Corpus> {
    params.validate()?;
    let (n_train, n_val, _) = params.split_counts()?;
    let patterns = params.patterns();
    let unstructured = params.unstructured();
    let mut seqs = Vec::with_capacity(params.n_sequences);
    for i in 0..params.n_sequences {
        let mut rng = stream(seed, Stream::Data, i as u64);
        let roll = match kind {
            CorpusKind::Structured => sample_structured(&params.grammar, params.frames, params.hop_seconds, &mut rng),
            CorpusKind::Unstructured => sample_unstructured(&unstructured, params.frames, params.hop_seconds, &mut rng),
        };
        let features = render_features(
            &roll,
            &patterns,
            params.noise_level,
            &mut stream(seed, Stream::Noise, i as u64),
        )?;
        seqs.push((features, roll));
    }
    let mut named = seqs.into_iter().enumerate().map(|(i, (features, roll))| {
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Validation
        } else {
            Split::Test
        };
        (split, Sequence {
            name: format!("{}_{i:04}", split.name()),
            features,
            roll,
        })
    });
    let mut corpus = Corpus {
        kind: Some(kind),
        labels: default_labels(params.n_classes()),
        hop_seconds: params.hop_seconds,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (split, seq) in named.by_ref() {
        match split {
            Split::Train => corpus.train.push(seq),
            Split::Validation => corpus.val.push(seq),
            Split::Test => corpus.test.push(seq),
        }
    }
    Ok(corpus)
}

pub const MANIFEST_NAME: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "# sedtk corpus v1";

/// One manifest row: paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub features: PathBuf,
    pub annotations: PathBuf,
    pub split: Split,
}

/// Writes `manifest.tsv`, `features/*.sedf` and `annotations/*.tsv`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    for sub in ["features", "annotations"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = String::new();
    let _ = writeln!(manifest, "{MANIFEST_HEADER}");
    if let Some(kind) = corpus.kind {
        let _ = writeln!(manifest, "# kind={kind}");
    }
    let _ = writeln!(manifest, "# hop_seconds={}", corpus.hop_seconds);
    let _ = writeln!(manifest, "# labels={}", corpus.labels.join(","));
    let _ = writeln!(
        manifest,
        "# counts train={} val={} test={}",
        corpus.train.len(),
        corpus.val.len(),
        corpus.test.len()
    );
    for split in [Split::Train, Split::Validation, Split::Test] {
        for seq in corpus.split(split) {
            let feat = format!("features/{}.sedf", seq.name);
            let ann = format!("annotations/{}.tsv", seq.name);
            write_feature_cache(&dir.join(&feat), &seq.features)?;
            write_annotations(&seq.roll, &corpus.labels, &dir.join(&ann))?;
            let _ = writeln!(manifest, "{feat}\t{ann}\t{}", split.name());
        }
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// Reads a corpus from a directory holding `manifest.tsv`.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let ctx = path.display().to_string();
    let mut kind = None;
    let mut hop = None;
    let mut labels: Option<Vec<String>> = None;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let loc = format!("line {}", i + 1);
        if let Some(meta) = line.strip_prefix('#') {
            let meta = meta.trim();
            if let Some(v) = meta.strip_prefix("kind=") {
                kind = Some(v.parse::<CorpusKind>().map_err(|e| Error::parse(&ctx, &loc, e.to_string()))?);
            } else if let Some(v) = meta.strip_prefix("hop_seconds=") {
                hop = Some(
                    v.parse::<f64>()
                        .ok()
                        .filter(|h| *h > 0.0)
                        .ok_or_else(|| Error::parse(&ctx, &loc, format!("bad hop {v:?}")))?,
                );
            } else if let Some(v) = meta.strip_prefix("labels=") {
                labels = Some(v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect());
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(Error::parse(&ctx, &loc, "expected features<TAB>annotations<TAB>split"));
        }
        let split = f[2].trim().parse::<Split>().map_err(|e| Error::parse(&ctx, &loc, e.to_string()))?;
        entries.push(ManifestEntry {
            features: PathBuf::from(f[0]),
            annotations: PathBuf::from(f[1]),
            split,
        });
    }
    let hop = hop.ok_or_else(|| Error::parse(&ctx, "header", "missing '# hop_seconds=' line"))?;
    let labels = labels
        .filter(|l| !l.is_empty())
        .ok_or_else(|| Error::parse(&ctx, "header", "missing '# labels=' line"))?;
    let mut corpus = Corpus {
        kind,
        labels,
        hop_seconds: hop,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for e in entries {
        let features = read_feature_cache(&dir.join(&e.features), hop)?;
        let roll = read_annotations(&dir.join(&e.annotations), features.frames(), hop, &corpus.labels)?;
        let name = e
            .features
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let seq = Sequence { name, features, roll };
        match e.split {
            Split::Train => corpus.train.push(seq),
            Split::Validation => corpus.val.push(seq),
            Split::Test => corpus.test.push(seq),
        }
    }
    Ok(corpus)
}

/// Plug-in mutual information, in nats, between the activity of every class
/// at frame `t` and every class at frame `t + 1`, summed over class pairs.
pub fn adjacent_label_information(rolls: &[EventRoll]) -> f64 {
    let Some(first) = rolls.first() else { return 0.0 };
    let c = first.classes();
    // counts[i][j][a][b]: class i in state a at t, class j in state b at t+1
    let mut counts = vec![[[0u64; 2]; 2]; c * c];
    let mut pairs = 0u64;
    for r in rolls {
        for t in 0..r.frames().saturating_sub(1) {
            pairs += 1;
            for i in 0..c {
                let a = r.get(t, i) as usize;
                for j in 0..c {
                    counts[i * c + j][a][r.get(t + 1, j) as usize] += 1;
                }
            }
        }
    }
    if pairs == 0 {
        return 0.0;
    }
    let n = pairs as f64;
    counts
        .iter()
        .map(|tab| {
            let row = [tab[0][0] + tab[0][1], tab[1][0] + tab[1][1]];
            let col = [tab[0][0] + tab[1][0], tab[0][1] + tab[1][1]];
            let mut mi = 0.0;
            for a in 0..2 {
                for b in 0..2 {
                    let joint = tab[a][b] as f64;
                    if joint > 0.0 {
                        mi += joint / n * (joint * n / (row[a] as f64 * col[b] as f64)).ln();
                    }
                }
            }
            mi
        })
        .sum()
}
