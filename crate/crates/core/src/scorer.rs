//! Segment scoring and candidate generation.
//!
//! A candidate covers `[trigger_start, trigger_end]`; scoring with post
//! context `c` runs the model over `[trigger_start, trigger_end + c]`,
//! clipped to the audio, and reduces the positive-class posteriors of the
//! discriminative head to one number.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::s;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, AudioBuffer};
use crate::checkpoint::ModelCheckpoint;
use crate::error::{Error, Result};
use crate::frontend::{stack_and_downsample, MelFrontend};
use crate::model::POSITIVE;
use crate::synthgen::{CorpusManifest, Label, Split};
use crate::util::fmt_sig9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateSource {
    Annotation,
    StubDetector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerCandidate {
    pub utterance_id: String,
    pub trigger_start: f64,
    pub trigger_end: f64,
    pub source: CandidateSource,
}

impl TriggerCandidate {
    pub fn validate(&self) -> Result<()> {
        if !(self.trigger_start >= 0.0 && self.trigger_start < self.trigger_end) {
            return Err(Error::EmptySegment {
                start: self.trigger_start,
                end: self.trigger_end,
            });
        }
        Ok(())
    }

    /// Row key in score exports. Stub candidates carry their start time so
    /// several candidates from one recording stay distinct.
    pub fn key(&self) -> String {
        match self.source {
            CandidateSource::Annotation => self.utterance_id.clone(),
            CandidateSource::StubDetector => format!("{}@{:.3}", self.utterance_id, self.trigger_start),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRequest {
    pub candidate: TriggerCandidate,
    pub post_context: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Max,
    Mean,
}

pub struct Scorer {
    ckpt: ModelCheckpoint,
    frontend: MelFrontend,
    pub aggregation: Aggregation,
}

impl Scorer {
    pub fn new(ckpt: ModelCheckpoint, aggregation: Aggregation) -> Result<Self> {
        let frontend = MelFrontend::new(ckpt.frontend.clone())?;
        Ok(Self {
            ckpt,
            frontend,
            aggregation,
        })
    }

    pub fn checkpoint(&self) -> &ModelCheckpoint {
        &self.ckpt
    }

    fn segment_end(audio: &AudioBuffer, cand: &TriggerCandidate, post_context: f64) -> Result<f64> {
        cand.validate()?;
        if !(post_context >= 0.0) {
            return Err(Error::OutOfRange {
                bound: "post_context",
                value: post_context,
                duration: audio.duration(),
            });
        }
        Ok((cand.trigger_end + post_context).min(audio.duration()))
    }

    fn reduce(&self, windows: ndarray::ArrayView2<f32>) -> Result<f64> {
        let post = self.ckpt.model.forward(windows)?.posteriors();
        let col = post.discriminative.column(POSITIVE);
        Ok(match self.aggregation {
            Aggregation::Max => col.iter().cloned().fold(0.0, f64::max),
            Aggregation::Mean => col.sum() / col.len() as f64,
        })
    }

    /// Score of `[trigger_start, trigger_end + post_context]`, clipped to
    /// the audio.
    pub fn score_segment(&self, audio: &AudioBuffer, req: &ScoreRequest) -> Result<f64> {
        let end = Self::segment_end(audio, &req.candidate, req.post_context)?;
        let segment = audio.extract_segment(req.candidate.trigger_start, end)?;
        let features = self
            .frontend
            .features(&segment, Some(&self.ckpt.normalizer), req.candidate.trigger_start)?;
        self.reduce(features.windows.view())
    }

    /// Scores for several post contexts of one candidate. Mel frames are
    /// computed once over the longest segment; each context then uses the
    /// frames of its own prefix, so results equal independent
    /// [`Scorer::score_segment`] calls.
    pub fn score_contexts(&self, audio: &AudioBuffer, cand: &TriggerCandidate, contexts: &[f64]) -> Result<Vec<f64>> {
        if contexts.is_empty() {
            return Ok(Vec::new());
        }
        let ends = contexts
            .iter()
            .map(|&c| Self::segment_end(audio, cand, c))
            .collect::<Result<Vec<f64>>>()?;
        let longest = ends.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let segment = audio.extract_segment(cand.trigger_start, longest)?;
        let mut mel = self.frontend.mel_frames(&segment)?;
        self.ckpt.normalizer.apply(&mut mel);
        let cfg = self.frontend.config();
        let rate = audio.sample_rate as f64;
        ends.iter()
            .map(|&end| {
                let samples = (((end - cand.trigger_start) * rate).round() as usize).min(segment.len());
                let frames = cfg.num_frames(samples);
                if frames < cfg.stack_size {
                    return Err(Error::SegmentTooShort {
                        frames,
                        required: cfg.stack_size,
                    });
                }
                let seq = stack_and_downsample(mel.slice(s![..frames, ..]), cfg.stack_size, cfg.downsample, 0.0)?;
                self.reduce(seq.windows.view())
            })
            .collect()
    }

    /// `(early, late)` scores, each computed from scratch.
    pub fn score_pair(&self, audio: &AudioBuffer, cand: &TriggerCandidate, early_context: f64, late_context: f64) -> Result<(f64, f64)> {
        let early = self.score_segment(
            audio,
            &ScoreRequest {
                candidate: cand.clone(),
                post_context: early_context,
            },
        )?;
        let late = self.score_segment(
            audio,
            &ScoreRequest {
                candidate: cand.clone(),
                post_context: late_context,
            },
        )?;
        Ok((early, late))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StubConfig {
    /// Energy frame length in seconds.
    pub frame: f64,
    /// Frames with RMS above this level (dBFS) are active.
    pub threshold_db: f64,
    /// Active runs separated by less than this are merged.
    pub merge_gap: f64,
    /// Shortest burst that produces a candidate.
    pub min_burst: f64,
    /// Candidate length from burst onset, roughly one trigger phrase.
    pub candidate_length: f64,
    /// Largest allowed overlap between consecutive candidates, in seconds.
    pub max_overlap: f64,
}

impl Default for StubConfig {
    fn default() -> Self {
        Self {
            frame: 0.01,
            threshold_db: -45.0,
            merge_gap: 0.4,
            min_burst: 0.1,
            candidate_length: 0.8,
            max_overlap: 0.0,
        }
    }
}

/// Energy segmenter standing in for an always-on first-pass detector.
pub fn stub_first_pass(audio: &AudioBuffer, utterance_id: &str, cfg: &StubConfig) -> Vec<TriggerCandidate> {
    let rate = audio.sample_rate as f64;
    let hop = ((cfg.frame * rate).round() as usize).max(1);
    let threshold = 10f64.powf(cfg.threshold_db / 20.0);
    let active: Vec<bool> = audio
        .samples
        .chunks(hop)
        .map(|c| {
            let e = c.iter().map(|&s| (s as f64 / 32768.0).powi(2)).sum::<f64>() / c.len() as f64;
            e.sqrt() > threshold
        })
        .collect();

    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < active.len() {
        if !active[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < active.len() && active[i] {
            i += 1;
        }
        runs.push((start, i));
    }
    let gap_frames = (cfg.merge_gap / cfg.frame).round() as usize;
    let mut merged: Vec<(usize, usize)> = Vec::new();
    for run in runs {
        match merged.last_mut() {
            Some(last) if run.0 - last.1 < gap_frames => last.1 = run.1,
            _ => merged.push(run),
        }
    }

    let duration = audio.duration();
    let frame_sec = hop as f64 / rate;
    let mut out: Vec<TriggerCandidate> = Vec::new();
    for (a, b) in merged {
        if ((b - a) as f64) * frame_sec < cfg.min_burst {
            continue;
        }
        let start = a as f64 * frame_sec;
        let end = (start + cfg.candidate_length).min(duration);
        if end <= start {
            continue;
        }
        if let Some(prev) = out.last() {
            if prev.trigger_end - start > cfg.max_overlap {
                continue;
            }
        }
        out.push(TriggerCandidate {
            utterance_id: utterance_id.to_string(),
            trigger_start: start,
            trigger_end: end,
            source: CandidateSource::StubDetector,
        });
    }
    out
}

/// Where a scored candidate came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Utterance,
    Timeline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub key: String,
    pub label: Label,
    pub origin: Origin,
    /// One score per entry of [`ScoreTable::contexts`].
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub contexts: Vec<f64>,
    pub rows: Vec<ScoredCandidate>,
}

/// Candidate for a manifest utterance: the annotation for positives, the
/// first stub candidate for negatives.
pub fn utterance_candidate(
    id: &str,
    audio: &AudioBuffer,
    trigger: Option<(f64, f64)>,
    stub: &StubConfig,
) -> TriggerCandidate {
    if let Some((start, end)) = trigger {
        return TriggerCandidate {
            utterance_id: id.to_string(),
            trigger_start: start,
            trigger_end: end,
            source: CandidateSource::Annotation,
        };
    }
    let mut cand = stub_first_pass(audio, id, stub).into_iter().next().unwrap_or(TriggerCandidate {
        utterance_id: id.to_string(),
        trigger_start: 0.0,
        trigger_end: stub.candidate_length.min(audio.duration()),
        source: CandidateSource::StubDetector,
    });
    cand.source = CandidateSource::Annotation;
    cand
}

/// Score every utterance of `split` (optionally only `ids`) and every stub
/// candidate on the negative timeline.
pub fn score_manifest(
    scorer: &Scorer,
    manifest: &CorpusManifest,
    split: Split,
    ids: Option<&[String]>,
    include_timeline: bool,
    contexts: &[f64],
    stub: &StubConfig,
) -> Result<ScoreTable> {
    let entries: Vec<_> = match ids {
        None => manifest.split(split).collect(),
        Some(ids) => ids
            .iter()
            .map(|id| {
                manifest
                    .get(id)
                    .ok_or_else(|| Error::EmptyDataset(format!("unknown utterance id {id}")))
            })
            .collect::<Result<_>>()?,
    };
    let mut rows: Vec<ScoredCandidate> = entries
        .par_iter()
        .map(|e| {
            let audio = read_wav(&manifest.resolve(&e.path))?;
            let trigger = match (e.trigger_start, e.spec.trigger_end) {
                (Some(s), Some(t)) => Some((s, t)),
                _ => None,
            };
            let cand = utterance_candidate(&e.id, &audio, trigger, stub);
            Ok(ScoredCandidate {
                key: cand.key(),
                label: e.spec.label,
                origin: Origin::Utterance,
                scores: scorer.score_contexts(&audio, &cand, contexts)?,
            })
        })
        .collect::<Result<_>>()?;

    if include_timeline {
        for chunk in &manifest.timeline {
            let audio = read_wav(&manifest.resolve(&chunk.path))?;
            let cands = stub_first_pass(&audio, &chunk.id, stub);
            let scored: Vec<ScoredCandidate> = cands
                .par_iter()
                .map(|c| {
                    Ok(ScoredCandidate {
                        key: c.key(),
                        label: Label::Negative,
                        origin: Origin::Timeline,
                        scores: scorer.score_contexts(&audio, c, contexts)?,
                    })
                })
                .collect::<Result<_>>()?;
            rows.extend(scored);
        }
    }
    Ok(ScoreTable {
        contexts: contexts.to_vec(),
        rows,
    })
}

pub const SCORES_HEADER: &str = "utterance_id,label,post_context,score";
pub const PAIRS_HEADER: &str = "utterance_id,label,early,late";

impl ScoreTable {
    fn column(&self, context: f64) -> Result<usize> {
        self.contexts
            .iter()
            .position(|&c| c == context)
            .ok_or_else(|| Error::Config(format!("context {context} s was not scored")))
    }

    pub fn scores_at(&self, context: f64, label: Label, origin: Option<Origin>) -> Result<Vec<f64>> {
        let j = self.column(context)?;
        Ok(self
            .rows
            .iter()
            .filter(|r| r.label == label && origin.is_none_or(|o| r.origin == o))
            .map(|r| r.scores[j])
            .collect())
    }

    /// `(key, label, origin, early, late)` for every row.
    pub fn pairs(&self, early: f64, late: f64) -> Result<Vec<(String, Label, Origin, f64, f64)>> {
        let (je, jl) = (self.column(early)?, self.column(late)?);
        Ok(self
            .rows
            .iter()
            .map(|r| (r.key.clone(), r.label, r.origin, r.scores[je], r.scores[jl]))
            .collect())
    }

    pub fn scores_csv(&self) -> String {
        let mut out = format!("{SCORES_HEADER}\n");
        for r in &self.rows {
            for (c, s) in self.contexts.iter().zip(&r.scores) {
                let _ = writeln!(out, "{},{},{},{}", r.key, r.label.as_str(), fmt_sig9(*c), fmt_sig9(*s));
            }
        }
        out
    }

    pub fn pairs_csv(&self, early: f64, late: f64) -> Result<String> {
        let mut out = format!("{PAIRS_HEADER}\n");
        for (key, label, _, e, l) in self.pairs(early, late)? {
            let _ = writeln!(out, "{key},{},{},{}", label.as_str(), fmt_sig9(e), fmt_sig9(l));
        }
        Ok(out)
    }

    /// Parse a score export. Rows keyed `chunk@start` are timeline
    /// candidates.
    pub fn parse_scores_csv(text: &str, path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Record {
            utterance_id: String,
            label: Label,
            post_context: f64,
            score: f64,
        }
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| Error::format(path, e))?.clone();
        if header.iter().collect::<Vec<_>>().join(",") != SCORES_HEADER {
            return Err(Error::format(path, format!("expected header {SCORES_HEADER}")));
        }
        let mut contexts: Vec<f64> = Vec::new();
        let mut rows: Vec<ScoredCandidate> = Vec::new();
        for (n, rec) in reader.deserialize::<Record>().enumerate() {
            let bad = |m: String| Error::format(path, format!("record {}: {m}", n + 1));
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let j = match contexts.iter().position(|&c| c == rec.post_context) {
                Some(j) => j,
                None if rows.len() <= 1 => {
                    contexts.push(rec.post_context);
                    contexts.len() - 1
                }
                None => return Err(bad("context list must be complete for the first row".into())),
            };
            match rows.last_mut() {
                Some(r) if r.key == rec.utterance_id && r.scores.len() == j => r.scores.push(rec.score),
                _ if j != 0 => return Err(bad("rows must list contexts in order".into())),
                _ => rows.push(ScoredCandidate {
                    origin: if rec.utterance_id.contains('@') {
                        Origin::Timeline
                    } else {
                        Origin::Utterance
                    },
                    key: rec.utterance_id,
                    label: rec.label,
                    scores: vec![rec.score],
                }),
            }
        }
        if rows.iter().any(|r| r.scores.len() != contexts.len()) {
            return Err(Error::format(path, "incomplete score rows"));
        }
        Ok(Self { contexts, rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::FrontendConfig;
    use crate::model::ModelConfig;

    fn small_ckpt() -> ModelCheckpoint {
        let model = ModelConfig {
            num_layers: 1,
            hidden_per_direction: 8,
            ..ModelConfig::default()
        };
        ModelCheckpoint::init(model, FrontendConfig::default(), 11).unwrap()
    }

    fn noise(seconds: f64, seed: u64) -> AudioBuffer {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = (seconds * 16000.0) as usize;
        AudioBuffer::new((0..n).map(|_| rng.random_range(-3000..3000)).collect(), 16000)
    }

    fn cand(start: f64, end: f64) -> TriggerCandidate {
        TriggerCandidate {
            utterance_id: "u".into(),
            trigger_start: start,
            trigger_end: end,
            source: CandidateSource::Annotation,
        }
    }

    fn req(c: TriggerCandidate, post: f64) -> ScoreRequest {
        ScoreRequest {
            candidate: c,
            post_context: post,
        }
    }

    #[test]
    fn constant_posterior_scores_its_value() {
        let mut ck = small_ckpt();
        let w = ck.model.layout.find("head.disc.w").unwrap().range();
        let b = ck.model.layout.find("head.disc.b").unwrap().range();
        ck.model.params[w].iter_mut().for_each(|v| *v = 0.0);
        ck.model.params[b.start] = 0.0;
        ck.model.params[b.start + 1] = (0.7f64 / 0.3).ln() as f32;
        let scorer = Scorer::new(ck, Aggregation::Max).unwrap();
        let audio = noise(2.0, 1);
        let s = scorer.score_segment(&audio, &req(cand(0.2, 1.0), 0.3)).unwrap();
        assert!((s - 0.7).abs() < 1e-6, "{s}");
    }

    #[test]
    fn context_past_end_is_clipped() {
        let scorer = Scorer::new(small_ckpt(), Aggregation::Max).unwrap();
        let audio = noise(1.5, 2);
        let long = scorer.score_segment(&audio, &req(cand(0.1, 1.0), 2.0)).unwrap();
        let exact = scorer.score_segment(&audio, &req(cand(0.1, 1.0), 0.5)).unwrap();
        assert_eq!(long.to_bits(), exact.to_bits());
    }

    #[test]
    fn early_equals_late_when_audio_ends_at_early_context() {
        let scorer = Scorer::new(small_ckpt(), Aggregation::Max).unwrap();
        let audio = noise(1.3, 3);
        let (e, l) = scorer.score_pair(&audio, &cand(0.0, 1.0), 0.3, 2.0).unwrap();
        assert_eq!(e.to_bits(), l.to_bits());
    }

    #[test]
    fn shared_mel_matches_independent_segments() {
        let scorer = Scorer::new(small_ckpt(), Aggregation::Max).unwrap();
        let audio = noise(4.0, 4);
        let c = cand(0.37, 1.21);
        let contexts = [0.3, 0.5, 1.0, 1.5, 2.0];
        let shared = scorer.score_contexts(&audio, &c, &contexts).unwrap();
        for (ctx, s) in contexts.iter().zip(&shared) {
            let single = scorer.score_segment(&audio, &req(c.clone(), *ctx)).unwrap();
            assert_eq!(s.to_bits(), single.to_bits(), "context {ctx}");
            assert!((0.0..=1.0).contains(s));
        }
    }

    #[test]
    fn mean_aggregation_is_not_above_max() {
        let audio = noise(2.0, 5);
        let max = Scorer::new(small_ckpt(), Aggregation::Max).unwrap();
        let mean = Scorer::new(small_ckpt(), Aggregation::Mean).unwrap();
        let r = req(cand(0.0, 1.0), 0.5);
        assert!(mean.score_segment(&audio, &r).unwrap() <= max.score_segment(&audio, &r).unwrap());
    }

    #[test]
    fn too_short_segment_errors() {
        let scorer = Scorer::new(small_ckpt(), Aggregation::Max).unwrap();
        let audio = noise(2.0, 6);
        let err = scorer.score_segment(&audio, &req(cand(0.0, 0.05), 0.0)).unwrap_err();
        assert!(err.to_string().contains("segment too short"), "{err}");
        let err = scorer.score_contexts(&audio, &cand(0.0, 0.05), &[0.0]).unwrap_err();
        assert!(err.to_string().contains("segment too short"), "{err}");
    }

    #[test]
    fn deterministic_bits() {
        let scorer = Scorer::new(small_ckpt(), Aggregation::Max).unwrap();
        let audio = noise(3.0, 7);
        let r = req(cand(0.5, 1.3), 1.0);
        let a = scorer.score_segment(&audio, &r).unwrap();
        let b = scorer.score_segment(&audio, &r).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn silence_has_no_candidates() {
        let audio = AudioBuffer::new(vec![0; 16000 * 5], 16000);
        assert!(stub_first_pass(&audio, "t", &StubConfig::default()).is_empty());
    }

    #[test]
    fn separated_bursts_give_one_candidate_each() {
        let bursts = [(0.5, 0.9), (2.0, 2.6), (3.7, 4.0), (5.5, 6.5)];
        let mut samples = vec![0i16; 16000 * 8];
        for (k, &(a, b)) in bursts.iter().enumerate() {
            let burst = noise(b - a, 20 + k as u64);
            let off = (a * 16000.0) as usize;
            samples[off..off + burst.len()].copy_from_slice(&burst.samples);
        }
        let audio = AudioBuffer::new(samples, 16000);
        let cands = stub_first_pass(&audio, "t", &StubConfig::default());
        assert_eq!(cands.len(), bursts.len());
        for (c, &(a, _)) in cands.iter().zip(&bursts) {
            assert!((c.trigger_start - a).abs() < 0.011, "{c:?}");
            assert_eq!(c.key(), format!("t@{:.3}", c.trigger_start));
        }
    }

    #[test]
    fn close_bursts_respect_max_overlap() {
        let cfg = StubConfig {
            merge_gap: 0.05,
            max_overlap: 0.1,
            ..StubConfig::default()
        };
        let mut samples = vec![0i16; 16000 * 4];
        for k in 0..6 {
            let burst = noise(0.15, 40 + k);
            let off = (0.3 * (k as f64 + 1.0) * 16000.0) as usize;
            samples[off..off + burst.len()].copy_from_slice(&burst.samples);
        }
        let cands = stub_first_pass(&AudioBuffer::new(samples, 16000), "t", &cfg);
        assert!(cands.len() >= 2);
        for w in cands.windows(2) {
            assert!(w[0].trigger_end - w[1].trigger_start <= cfg.max_overlap + 1e-12);
        }
    }

    #[test]
    fn score_csv_round_trips() {
        let table = ScoreTable {
            contexts: vec![0.3, 2.0],
            rows: vec![
                ScoredCandidate {
                    key: "pos-00001".into(),
                    label: Label::Positive,
                    origin: Origin::Utterance,
                    scores: vec![0.25, 0.875],
                },
                ScoredCandidate {
                    key: "timeline-000@1.230".into(),
                    label: Label::Negative,
                    origin: Origin::Timeline,
                    scores: vec![0.125, 0.0625],
                },
            ],
        };
        let text = table.scores_csv();
        assert_eq!(text.lines().count(), 1 + 2 * 2);
        let back = ScoreTable::parse_scores_csv(&text, Path::new("s.csv")).unwrap();
        assert_eq!(back, table);
        assert_eq!(table.pairs_csv(0.3, 2.0).unwrap().lines().count(), 3);
        assert!(table.pairs(0.3, 1.0).is_err());
    }
}
