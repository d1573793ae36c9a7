//! Synthetic labeled corpus for trigger detection experiments.
//!
//! Audio is produced by a parallel formant synthesizer: every phone is a
//! pulse-train (voiced) or white-noise (unvoiced) source passed through a
//! bank of two-pole resonators. Positives are the canonical trigger phrase
//! followed by payload words from the "directed" vocabulary; negatives are
//! either confusables (the trigger with one or two phones swapped for their
//! acoustically nearest neighbour) or plain speech, and are always followed
//! by words from a disjoint "background" vocabulary. The two vocabularies
//! draw on different phone groups, so post-trigger audio carries evidence
//! about the label that accumulates with every phone heard.
//!
//! Some positives are "slurred": one trigger phone is morphed toward its
//! nearest neighbour, which makes the trigger region alone ambiguous for
//! those examples.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, AudioBuffer, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::util::{derive_seed, derive_seed_indexed};

pub const WORD_BOUNDARY: &str = "<wb>";
pub const SENTENCE_BOUNDARY: &str = "<sb>";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Formant {
    pub freq: f64,
    pub bandwidth: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhonePrototype {
    pub symbol: String,
    pub formants: Vec<Formant>,
    pub voiced: bool,
    /// Duration range in seconds.
    pub duration: (f64, f64),
}

/// Phone inventory plus the two boundary markers.
///
/// Output-layer indices for CTC: blank is 0, phones are `1..=P`, the word
/// boundary is `P + 1` and the sentence boundary `P + 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhoneAlphabet {
    pub phones: Vec<PhonePrototype>,
}

impl Default for PhoneAlphabet {
    fn default() -> Self {
        fn v(sym: &str, f: [f64; 3], dur: (f64, f64)) -> PhonePrototype {
            PhonePrototype {
                symbol: sym.to_string(),
                formants: vec![
                    Formant { freq: f[0], bandwidth: 80.0, gain: 1.0 },
                    Formant { freq: f[1], bandwidth: 110.0, gain: 0.6 },
                    Formant { freq: f[2], bandwidth: 160.0, gain: 0.3 },
                ],
                voiced: true,
                duration: dur,
            }
        }
        fn u(sym: &str, f: [(f64, f64); 2], dur: (f64, f64)) -> PhonePrototype {
            PhonePrototype {
                symbol: sym.to_string(),
                formants: f
                    .iter()
                    .map(|&(freq, bandwidth)| Formant { freq, bandwidth, gain: 1.0 })
                    .collect(),
                voiced: false,
                duration: dur,
            }
        }
        let vowel = (0.07, 0.13);
        let cons = (0.05, 0.10);
        Self {
            phones: vec![
                v("iy", [270.0, 2290.0, 3010.0], vowel),
                v("ih", [390.0, 1990.0, 2550.0], vowel),
                v("eh", [530.0, 1840.0, 2480.0], vowel),
                v("ae", [660.0, 1720.0, 2410.0], vowel),
                v("aa", [730.0, 1090.0, 2440.0], vowel),
                v("ao", [570.0, 840.0, 2410.0], vowel),
                v("uh", [440.0, 1020.0, 2240.0], vowel),
                v("uw", [300.0, 870.0, 2240.0], vowel),
                v("ah", [520.0, 1190.0, 2390.0], vowel),
                v("er", [490.0, 1350.0, 1690.0], vowel),
                v("m", [250.0, 1000.0, 2200.0], cons),
                v("n", [250.0, 1500.0, 2500.0], cons),
                v("l", [360.0, 1300.0, 2700.0], cons),
                v("r", [420.0, 1300.0, 1600.0], cons),
                v("w", [290.0, 610.0, 2150.0], cons),
                v("y", [260.0, 2070.0, 3020.0], cons),
                u("s", [(4500.0, 900.0), (6500.0, 1200.0)], cons),
                u("sh", [(2500.0, 600.0), (4000.0, 900.0)], cons),
                u("f", [(1500.0, 1500.0), (7000.0, 1500.0)], cons),
                u("hh", [(600.0, 300.0), (1600.0, 500.0)], cons),
            ],
        }
    }
}

impl PhoneAlphabet {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.phones {
            if p.symbol == WORD_BOUNDARY || p.symbol == SENTENCE_BOUNDARY {
                return Err(Error::Config(format!("{} is reserved", p.symbol)));
            }
            if !seen.insert(p.symbol.as_str()) {
                return Err(Error::Config(format!("duplicate phone {}", p.symbol)));
            }
            if p.duration.0 <= 0.0 || p.duration.1 < p.duration.0 {
                return Err(Error::Config(format!("bad duration range for {}", p.symbol)));
            }
        }
        if self.phones.len() < 2 {
            return Err(Error::Config("alphabet needs at least two phones".into()));
        }
        Ok(())
    }

    pub fn blank_index(&self) -> usize {
        0
    }

    /// Size of the phonetic output layer: phones + 2 boundaries + blank.
    pub fn num_classes(&self) -> usize {
        self.phones.len() + 3
    }

    pub fn phone_index(&self, symbol: &str) -> Option<usize> {
        self.phones.iter().position(|p| p.symbol == symbol)
    }

    /// Output-layer class for a phone or boundary symbol.
    pub fn class_index(&self, symbol: &str) -> Result<usize> {
        match symbol {
            WORD_BOUNDARY => Ok(self.phones.len() + 1),
            SENTENCE_BOUNDARY => Ok(self.phones.len() + 2),
            s => self
                .phone_index(s)
                .map(|i| i + 1)
                .ok_or_else(|| Error::UnknownPhone(s.to_string())),
        }
    }

    /// The acoustically closest other phone: same voicing preferred, then
    /// smallest distance between log formant frequencies.
    pub fn nearest_neighbor(&self, index: usize) -> usize {
        let p = &self.phones[index];
        let dist = |q: &PhonePrototype| -> f64 {
            let voicing = if q.voiced == p.voiced { 0.0 } else { 10.0 };
            let n = p.formants.len().max(q.formants.len());
            let mut d = 0.0;
            for k in 0..n {
                let a = p.formants.get(k).or(p.formants.last()).unwrap().freq.ln();
                let b = q.formants.get(k).or(q.formants.last()).unwrap().freq.ln();
                d += (a - b).powi(2);
            }
            voicing + d
        };
        (0..self.phones.len())
            .filter(|&j| j != index)
            .min_by(|&a, &b| dist(&self.phones[a]).total_cmp(&dist(&self.phones[b])))
            .expect("alphabet has at least two phones")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
        }
    }
}

/// One phone rendered part of the way toward another prototype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slur {
    /// Position in `phone_sequence`.
    pub index: usize,
    pub toward: String,
    /// 0 = canonical, 1 = indistinguishable from `toward`.
    pub amount: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceSpec {
    pub phone_sequence: Vec<String>,
    /// Seconds from utterance start to the end of the trigger phrase.
    pub trigger_end: Option<f64>,
    pub label: Label,
    /// Directed-vocabulary words have ids `< vocab_size`; background words
    /// are offset by `vocab_size`.
    pub payload_words: Vec<u32>,
    pub snr_db: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slur: Option<Slur>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhoneSpan {
    pub symbol: String,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone)]
pub struct Synthesized {
    pub audio: AudioBuffer,
    /// Exact timing of every sounding phone (boundaries excluded).
    pub phones: Vec<PhoneSpan>,
    pub trigger_start: Option<f64>,
    pub trigger_end: Option<f64>,
}

/// Silence and pacing ranges used between phones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimingConfig {
    pub lead_in: (f64, f64),
    pub word_gap: (f64, f64),
    pub post_trigger_pause: (f64, f64),
    pub trailing: (f64, f64),
    pub f0: (f64, f64),
    /// Per-speaker formant scale (vocal tract length).
    pub formant_scale: (f64, f64),
    /// Relative per-phone formant jitter.
    pub formant_jitter: f64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            lead_in: (0.0, 0.02),
            word_gap: (0.02, 0.06),
            post_trigger_pause: (0.05, 0.35),
            trailing: (0.10, 0.25),
            f0: (90.0, 230.0),
            formant_scale: (0.92, 1.08),
            formant_jitter: 0.04,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Synthesizer {
    pub alphabet: PhoneAlphabet,
    pub trigger: Vec<String>,
    pub timing: TimingConfig,
    pub sample_rate: u32,
}

const SPEECH_RMS: f64 = 0.1;

impl Synthesizer {
    pub fn new(alphabet: PhoneAlphabet, trigger: Vec<String>, timing: TimingConfig) -> Result<Self> {
        alphabet.validate()?;
        if trigger.is_empty() {
            return Err(Error::Config("trigger phrase is empty".into()));
        }
        for s in &trigger {
            alphabet.class_index(s)?;
        }
        Ok(Self {
            alphabet,
            trigger,
            timing,
            sample_rate: DEFAULT_SAMPLE_RATE,
        })
    }

    /// Render an utterance. Deterministic in `(spec, seed)`.
    pub fn synthesize(&self, spec: &UtteranceSpec, seed: u64) -> Result<Synthesized> {
        if spec.phone_sequence.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut protos = Vec::with_capacity(spec.phone_sequence.len());
        for sym in &spec.phone_sequence {
            if sym == WORD_BOUNDARY || sym == SENTENCE_BOUNDARY {
                protos.push(None);
            } else {
                let idx = self
                    .alphabet
                    .phone_index(sym)
                    .ok_or_else(|| Error::UnknownPhone(sym.clone()))?;
                protos.push(Some(idx));
            }
        }
        let trigger_len = if spec.label.is_positive() {
            if !spec.phone_sequence.starts_with(&self.trigger) {
                return Err(Error::Config(
                    "positive utterance must start with the trigger phrase".into(),
                ));
            }
            Some(self.trigger.len())
        } else {
            None
        };
        if let Some(slur) = &spec.slur {
            if slur.index >= spec.phone_sequence.len() || protos[slur.index].is_none() {
                return Err(Error::Config(format!("slur index {} is not a phone", slur.index)));
            }
            if self.alphabet.phone_index(&slur.toward).is_none() {
                return Err(Error::UnknownPhone(slur.toward.clone()));
            }
        }

        let sr = self.sample_rate as f64;
        let t = &self.timing;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f0 = uniform(&mut rng, t.f0);
        let scale = uniform(&mut rng, t.formant_scale);

        let secs = |s: f64| (s * sr).round() as usize;
        let mut signal: Vec<f64> = vec![0.0; secs(uniform(&mut rng, t.lead_in))];
        let mut spans = Vec::new();
        let mut trigger_start = None;
        let mut trigger_end = None;
        let mut phase = 0.0;
        for (pos, proto) in protos.iter().enumerate() {
            let after_trigger = trigger_len == Some(pos);
            if after_trigger {
                signal.extend(std::iter::repeat_n(
                    0.0,
                    secs(uniform(&mut rng, t.post_trigger_pause)),
                ));
            }
            let Some(idx) = proto else {
                if spec.phone_sequence[pos] == WORD_BOUNDARY && !after_trigger {
                    signal.extend(std::iter::repeat_n(0.0, secs(uniform(&mut rng, t.word_gap))));
                }
                continue;
            };
            let p = &self.alphabet.phones[*idx];
            let n = secs(uniform(&mut rng, p.duration)).max(1);
            let (formants, voiced) = match &spec.slur {
                Some(slur) if slur.index == pos => {
                    let q = &self.alphabet.phones[self.alphabet.phone_index(&slur.toward).unwrap()];
                    let voiced = if slur.amount >= 0.5 { q.voiced } else { p.voiced };
                    (blend_formants(&p.formants, &q.formants, slur.amount), voiced)
                }
                _ => (p.formants.clone(), p.voiced),
            };
            let formants: Vec<Formant> = formants
                .iter()
                .map(|f| {
                    let jitter = 1.0 + t.formant_jitter * (2.0 * rng.random::<f64>() - 1.0);
                    Formant {
                        freq: (f.freq * scale * jitter).min(0.45 * sr),
                        ..*f
                    }
                })
                .collect();
            let start = signal.len();
            signal.extend(render_phone(&formants, voiced, f0, n, sr, &mut phase, &mut rng));
            let span = PhoneSpan {
                symbol: spec.phone_sequence[pos].clone(),
                start: start as f64 / sr,
                end: signal.len() as f64 / sr,
            };
            if let Some(tl) = trigger_len {
                if trigger_start.is_none() {
                    trigger_start = Some(span.start);
                }
                if pos < tl {
                    trigger_end = Some(span.end);
                }
            }
            spans.push(span);
        }
        signal.extend(std::iter::repeat_n(0.0, secs(uniform(&mut rng, t.trailing))));

        let noise_rms = SPEECH_RMS / 10f64.powf(spec.snr_db / 20.0);
        let samples = signal
            .iter()
            .map(|&x| {
                let noise: f64 = rng.sample(StandardNormal);
                let v = (x + noise * noise_rms) * 32768.0;
                v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
            })
            .collect();
        Ok(Synthesized {
            audio: AudioBuffer::new(samples, self.sample_rate),
            phones: spans,
            trigger_start,
            trigger_end,
        })
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.1 <= range.0 {
        range.0
    } else {
        range.0 + (range.1 - range.0) * rng.random::<f64>()
    }
}

fn blend_formants(a: &[Formant], b: &[Formant], amount: f64) -> Vec<Formant> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|k| {
            let fa = a.get(k).or(a.last()).unwrap();
            let fb = b.get(k).or(b.last()).unwrap();
            let mix = |x: f64, y: f64| (x.ln() * (1.0 - amount) + y.ln() * amount).exp();
            Formant {
                freq: mix(fa.freq, fb.freq),
                bandwidth: mix(fa.bandwidth, fb.bandwidth),
                gain: fa.gain * (1.0 - amount) + fb.gain * amount,
            }
        })
        .collect()
}

/// One phone: source excitation through parallel two-pole resonators,
/// normalized to a fixed RMS with 5 ms raised-cosine edges.
fn render_phone(
    formants: &[Formant],
    voiced: bool,
    f0: f64,
    n: usize,
    sr: f64,
    phase: &mut f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut source = vec![0.0; n];
    if voiced {
        let mut tilt = 0.0;
        for s in source.iter_mut() {
            *phase += f0 / sr;
            let pulse = if *phase >= 1.0 {
                *phase -= 1.0;
                1.0
            } else {
                0.0
            };
            let aspiration: f64 = 0.02 * rng.sample::<f64, _>(StandardNormal);
            tilt = 0.9 * tilt + pulse;
            *s = tilt + aspiration;
        }
    } else {
        for s in source.iter_mut() {
            *s = rng.sample(StandardNormal);
        }
    }
    let mut out = vec![0.0; n];
    for f in formants {
        let c = -(-2.0 * std::f64::consts::PI * f.bandwidth / sr).exp();
        let b = 2.0 * (-std::f64::consts::PI * f.bandwidth / sr).exp()
            * (2.0 * std::f64::consts::PI * f.freq / sr).cos();
        let a = 1.0 - b - c;
        let (mut y1, mut y2) = (0.0, 0.0);
        for (o, &x) in out.iter_mut().zip(&source) {
            let y = a * x + b * y1 + c * y2;
            y2 = y1;
            y1 = y;
            *o += f.gain * y;
        }
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let target = if voiced { SPEECH_RMS } else { 0.5 * SPEECH_RMS };
    let gain = if rms > 0.0 { target / rms } else { 0.0 };
    let ramp = ((0.005 * sr) as usize).min(n / 2);
    for (i, o) in out.iter_mut().enumerate() {
        let edge = i.min(n - 1 - i);
        let w = if edge < ramp {
            0.5 - 0.5 * (std::f64::consts::PI * edge as f64 / ramp as f64).cos()
        } else {
            1.0
        };
        *o *= gain * w;
    }
    out
}

/// Calibrated Zipf-Mandelbrot sampler for the first payload word.
///
/// Rank `k` (1-based) has weight `(k + q)^-s`; the offset `q` is solved by
/// bisection so the ten most likely words carry `TOP10_TARGET` of the mass.
#[derive(Debug, Clone)]
pub struct PayloadSampler {
    weights: Vec<f64>,
    index: WeightedIndex<f64>,
}

pub const TOP10_TARGET: f64 = 0.80;
pub const MIN_VOCAB: usize = 20;

impl PayloadSampler {
    pub fn new(vocab_size: usize, zipf_s: f64) -> Result<Self> {
        if vocab_size < MIN_VOCAB {
            return Err(Error::VocabTooSmall {
                size: vocab_size,
                min: MIN_VOCAB,
            });
        }
        if !(zipf_s > 0.0) {
            return Err(Error::Config("zipf exponent must be positive".into()));
        }
        let top10 = |q: f64| {
            let w = Self::raw_weights(vocab_size, zipf_s, q);
            w[..10].iter().sum::<f64>() / w.iter().sum::<f64>()
        };
        // top-10 mass decreases as q grows.
        let (mut lo, mut hi) = (-0.999_f64, 1000.0_f64);
        if top10(lo) < TOP10_TARGET || top10(hi) > TOP10_TARGET {
            return Err(Error::Config(format!(
                "cannot reach top-10 mass {TOP10_TARGET} with {vocab_size} words and s = {zipf_s}"
            )));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if top10(mid) > TOP10_TARGET {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let raw = Self::raw_weights(vocab_size, zipf_s, 0.5 * (lo + hi));
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let index = WeightedIndex::new(&weights).expect("positive weights");
        Ok(Self { weights, index })
    }

    fn raw_weights(n: usize, s: f64, q: f64) -> Vec<f64> {
        (1..=n).map(|k| (k as f64 + q).powf(-s)).collect()
    }

    /// Probability of each word id (ids are ranks, most likely first).
    pub fn probabilities(&self) -> &[f64] {
        &self.weights
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.index.sample(rng)
    }
}

/// Draw a payload of word ids: the first from the calibrated Zipf law, the
/// remaining `len - 1` uniformly.
pub fn sample_payload(rng_seed: u64, zipf_s: f64, vocab: &[String], len: usize) -> Result<Vec<usize>> {
    let sampler = PayloadSampler::new(vocab.len(), zipf_s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok(draw_payload(&sampler, vocab.len(), len, &mut rng))
}

fn draw_payload<R: Rng + ?Sized>(sampler: &PayloadSampler, vocab: usize, len: usize, rng: &mut R) -> Vec<usize> {
    let mut words = Vec::with_capacity(len);
    if len > 0 {
        words.push(sampler.sample(rng));
    }
    for _ in 1..len {
        words.push(rng.random_range(0..vocab));
    }
    words
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub seed: u64,
    pub n_positive: usize,
    pub n_negative: usize,
    pub test_fraction: f64,
    /// Fraction of negatives (and timeline utterances) built on a confusable.
    pub confusable_fraction: f64,
    /// Fraction of positives with one slurred trigger phone.
    pub slur_fraction: f64,
    pub slur_amount: (f64, f64),
    pub negative_timeline_hours: f64,
    pub timeline_chunk_seconds: f64,
    pub timeline_gap: (f64, f64),
    /// Background noise RMS on the timeline between utterances (dBFS).
    pub timeline_floor_db: f64,
    pub snr_db: (f64, f64),
    pub vocab_size: usize,
    pub zipf_s: f64,
    pub payload_len: (usize, usize),
    pub word_len: (usize, usize),
    /// Probability that a payload phone comes from its vocabulary's own
    /// group rather than the shared group.
    pub payload_bias: f64,
    pub directed_phones: Vec<String>,
    pub background_phones: Vec<String>,
    pub shared_phones: Vec<String>,
    pub trigger: Vec<String>,
    pub alphabet: PhoneAlphabet,
    pub timing: TimingConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        let strs = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        Self {
            seed: 1,
            n_positive: 2000,
            n_negative: 600,
            test_fraction: 0.2,
            confusable_fraction: 0.5,
            slur_fraction: 0.3,
            slur_amount: (0.6, 1.0),
            negative_timeline_hours: 2.0,
            timeline_chunk_seconds: 600.0,
            timeline_gap: (0.5, 1.5),
            timeline_floor_db: -60.0,
            snr_db: (5.0, 30.0),
            vocab_size: 50,
            zipf_s: 1.5,
            payload_len: (3, 5),
            word_len: (2, 4),
            payload_bias: 0.8,
            directed_phones: strs(&["iy", "ih", "eh", "ae", "s", "n", "y", "er"]),
            background_phones: strs(&["aa", "ao", "uw", "uh", "sh", "f", "w", "m"]),
            shared_phones: strs(&["ah", "l", "r", "hh"]),
            trigger: strs(&["hh", "eh", "l", WORD_BOUNDARY, "m", "aa", "r", "uw"]),
            alphabet: PhoneAlphabet::default(),
            timing: TimingConfig::default(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("gen: {m}")));
        self.alphabet.validate()?;
        for s in self
            .directed_phones
            .iter()
            .chain(&self.background_phones)
            .chain(&self.shared_phones)
        {
            if self.alphabet.phone_index(s).is_none() {
                return Err(Error::UnknownPhone(s.clone()));
            }
        }
        if self.directed_phones.is_empty() || self.background_phones.is_empty() {
            return bad("payload phone groups must be non-empty".into());
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad(format!("test_fraction {} not in [0, 1)", self.test_fraction));
        }
        for (name, v) in [
            ("confusable_fraction", self.confusable_fraction),
            ("slur_fraction", self.slur_fraction),
            ("payload_bias", self.payload_bias),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} not in [0, 1]"));
            }
        }
        if self.payload_len.0 == 0 || self.payload_len.1 < self.payload_len.0 {
            return bad("payload_len must be a non-empty range of positive lengths".into());
        }
        if self.word_len.0 == 0 || self.word_len.1 < self.word_len.0 {
            return bad("word_len must be a non-empty range of positive lengths".into());
        }
        if self.negative_timeline_hours < 0.0 || !(self.timeline_chunk_seconds > 5.0) {
            return bad("timeline hours must be >= 0 and chunks longer than 5 s".into());
        }
        if self.vocab_size < MIN_VOCAB {
            return Err(Error::VocabTooSmall {
                size: self.vocab_size,
                min: MIN_VOCAB,
            });
        }
        Ok(())
    }

    pub fn synthesizer(&self) -> Result<Synthesizer> {
        Synthesizer::new(self.alphabet.clone(), self.trigger.clone(), self.timing.clone())
    }
}

/// Directed and background vocabularies as phone sequences.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    pub directed: Vec<Vec<String>>,
    pub background: Vec<Vec<String>>,
}

impl Vocabulary {
    /// Build two disjoint vocabularies of `cfg.vocab_size` words each.
    pub fn build(cfg: &GenConfig) -> Vocabulary {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "vocabulary"));
        let mut seen = std::collections::BTreeSet::new();
        let mut make = |own: &[String], rng: &mut ChaCha8Rng| -> Vec<Vec<String>> {
            let mut words = Vec::new();
            while words.len() < cfg.vocab_size {
                let len = rng.random_range(cfg.word_len.0..=cfg.word_len.1);
                let word: Vec<String> = (0..len)
                    .map(|_| {
                        let group = if cfg.shared_phones.is_empty() || rng.random::<f64>() < cfg.payload_bias {
                            own
                        } else {
                            &cfg.shared_phones[..]
                        };
                        group[rng.random_range(0..group.len())].clone()
                    })
                    .collect();
                if seen.insert(word.clone()) {
                    words.push(word);
                }
            }
            words
        };
        let directed = make(&cfg.directed_phones, &mut rng);
        let background = make(&cfg.background_phones, &mut rng);
        Vocabulary { directed, background }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Path relative to the manifest directory.
    pub path: String,
    pub split: Split,
    pub spec: UtteranceSpec,
    pub duration: f64,
    /// Start of the trigger phrase (positives only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger_start: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineChunk {
    pub id: String,
    pub path: String,
    pub duration: f64,
    pub utterances: usize,
}

/// One line of `manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ManifestLine {
    Utterance(ManifestEntry),
    Timeline(TimelineChunk),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorpusManifest {
    /// Directory holding the manifest; entry paths are relative to it.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub timeline: Vec<TimelineChunk>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl CorpusManifest {
    pub fn negative_timeline_hours(&self) -> f64 {
        self.timeline.iter().map(|c| c.duration).sum::<f64>() / 3600.0
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        let lines = self
            .entries
            .iter()
            .cloned()
            .map(ManifestLine::Utterance)
            .chain(self.timeline.iter().cloned().map(ManifestLine::Timeline));
        for line in lines {
            let json = serde_json::to_string(&line).map_err(|e| Error::format(&path, e))?;
            writeln!(w, "{json}").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Load `manifest.jsonl` from a corpus directory (or the file itself).
    pub fn load(path: &Path) -> Result<Self> {
        let (file_path, root) = if path.is_dir() {
            (path.join(MANIFEST_FILE), path.to_path_buf())
        } else {
            (
                path.to_path_buf(),
                path.parent().map(Path::to_path_buf).unwrap_or_default(),
            )
        };
        let file = File::open(&file_path).map_err(|e| Error::io(&file_path, e))?;
        let mut manifest = CorpusManifest {
            root,
            ..Default::default()
        };
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&file_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ManifestLine = serde_json::from_str(&line)
                .map_err(|e| Error::format(&file_path, format!("line {}: {e}", lineno + 1)))?;
            match parsed {
                ManifestLine::Utterance(e) => manifest.entries.push(e),
                ManifestLine::Timeline(c) => manifest.timeline.push(c),
            }
        }
        Ok(manifest)
    }
}

/// Everything needed to build utterance specs from a config.
pub struct CorpusBuilder<'a> {
    cfg: &'a GenConfig,
    vocab: Vocabulary,
    payload: PayloadSampler,
    synth: Synthesizer,
    trigger_phone_positions: Vec<usize>,
}

impl<'a> CorpusBuilder<'a> {
    pub fn new(cfg: &'a GenConfig) -> Result<Self> {
        cfg.validate()?;
        let synth = cfg.synthesizer()?;
        let trigger_phone_positions = cfg
            .trigger
            .iter()
            .enumerate()
            .filter(|(_, s)| cfg.alphabet.phone_index(s).is_some())
            .map(|(i, _)| i)
            .collect();
        Ok(Self {
            cfg,
            vocab: Vocabulary::build(cfg),
            payload: PayloadSampler::new(cfg.vocab_size, cfg.zipf_s)?,
            synth,
            trigger_phone_positions,
        })
    }

    pub fn synthesizer(&self) -> &Synthesizer {
        &self.synth
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn push_words(&self, seq: &mut Vec<String>, words: &[Vec<String>]) {
        for w in words {
            seq.push(WORD_BOUNDARY.to_string());
            seq.extend(w.iter().cloned());
        }
    }

    fn confusable_prefix(&self, rng: &mut ChaCha8Rng) -> Vec<String> {
        let mut seq = self.cfg.trigger.clone();
        let n_sub = rng.random_range(1..=2usize).min(self.trigger_phone_positions.len());
        let mut positions = self.trigger_phone_positions.clone();
        positions.shuffle(rng);
        for &pos in &positions[..n_sub] {
            let idx = self.cfg.alphabet.phone_index(&seq[pos]).unwrap();
            seq[pos] = self.cfg.alphabet.phones[self.cfg.alphabet.nearest_neighbor(idx)]
                .symbol
                .clone();
        }
        seq
    }

    fn snr(&self, rng: &mut ChaCha8Rng) -> f64 {
        uniform(rng, self.cfg.snr_db)
    }

    /// A positive: trigger, then a directed payload whose first word follows
    /// the calibrated Zipf law.
    pub fn positive_spec(&self, seed: u64) -> UtteranceSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = rng.random_range(self.cfg.payload_len.0..=self.cfg.payload_len.1);
        let ids = draw_payload(&self.payload, self.vocab.directed.len(), len, &mut rng);
        let words: Vec<Vec<String>> = ids.iter().map(|&i| self.vocab.directed[i].clone()).collect();
        let mut seq = self.cfg.trigger.clone();
        self.push_words(&mut seq, &words);
        seq.push(SENTENCE_BOUNDARY.to_string());
        let slur = if rng.random::<f64>() < self.cfg.slur_fraction && !self.trigger_phone_positions.is_empty() {
            let pos = self.trigger_phone_positions[rng.random_range(0..self.trigger_phone_positions.len())];
            let idx = self.cfg.alphabet.phone_index(&seq[pos]).unwrap();
            Some(Slur {
                index: pos,
                toward: self.cfg.alphabet.phones[self.cfg.alphabet.nearest_neighbor(idx)].symbol.clone(),
                amount: uniform(&mut rng, self.cfg.slur_amount),
            })
        } else {
            None
        };
        UtteranceSpec {
            phone_sequence: seq,
            trigger_end: None,
            label: Label::Positive,
            payload_words: ids.iter().map(|&i| i as u32).collect(),
            snr_db: self.snr(&mut rng),
            slur,
        }
    }

    /// A negative: a confusable (with probability `confusable_fraction`)
    /// or plain background speech, followed by background words.
    pub fn negative_spec(&self, seed: u64) -> UtteranceSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let confusable = rng.random::<f64>() < self.cfg.confusable_fraction;
        let mut seq = if confusable {
            self.confusable_prefix(&mut rng)
        } else {
            Vec::new()
        };
        let extra = if confusable { 0 } else { 2 };
        let len = rng.random_range(self.cfg.payload_len.0..=self.cfg.payload_len.1) + extra;
        let ids: Vec<usize> = (0..len)
            .map(|_| rng.random_range(0..self.vocab.background.len()))
            .collect();
        let words: Vec<Vec<String>> = ids.iter().map(|&i| self.vocab.background[i].clone()).collect();
        self.push_words(&mut seq, &words);
        if !confusable {
            seq.remove(0);
        }
        seq.push(SENTENCE_BOUNDARY.to_string());
        UtteranceSpec {
            phone_sequence: seq,
            trigger_end: None,
            label: Label::Negative,
            payload_words: ids.iter().map(|&i| (i + self.cfg.vocab_size) as u32).collect(),
            snr_db: self.snr(&mut rng),
            slur: None,
        }
    }

    /// Render one manifest utterance; fills in `trigger_end` for positives.
    pub fn render(&self, label: Label, index: usize) -> Result<(UtteranceSpec, Synthesized)> {
        let tag = label.as_str();
        let spec_seed = derive_seed_indexed(self.cfg.seed, &format!("{tag}-spec"), index as u64);
        let audio_seed = derive_seed_indexed(self.cfg.seed, &format!("{tag}-audio"), index as u64);
        let mut spec = match label {
            Label::Positive => self.positive_spec(spec_seed),
            Label::Negative => self.negative_spec(spec_seed),
        };
        let synth = self.synth.synthesize(&spec, audio_seed)?;
        spec.trigger_end = synth.trigger_end;
        Ok((spec, synth))
    }

    /// Render a timeline chunk: background-level noise with negative
    /// utterances separated by random gaps. Never contains the trigger.
    pub fn render_timeline_chunk(&self, index: usize) -> Result<(AudioBuffer, usize)> {
        let sr = self.synth.sample_rate as f64;
        let total = (self.cfg.timeline_chunk_seconds * sr).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(self.cfg.seed, "timeline", index as u64));
        let floor = 10f64.powf(self.cfg.timeline_floor_db / 20.0) * 32768.0;
        let mut samples: Vec<i16> = Vec::with_capacity(total);
        let mut count = 0;
        loop {
            let gap = (uniform(&mut rng, self.cfg.timeline_gap) * sr).round() as usize;
            let seed = rng.random::<u64>();
            let spec = self.negative_spec(seed);
            let utt = self.synth.synthesize(&spec, rng.random::<u64>())?;
            if samples.len() + gap + utt.audio.len() > total {
                break;
            }
            for _ in 0..gap {
                let n: f64 = rng.sample(StandardNormal);
                samples.push((n * floor).round() as i16);
            }
            samples.extend_from_slice(&utt.audio.samples);
            count += 1;
        }
        while samples.len() < total {
            let n: f64 = rng.sample(StandardNormal);
            samples.push((n * floor).round() as i16);
        }
        Ok((AudioBuffer::new(samples, self.synth.sample_rate), count))
    }
}

fn split_assignment(n: usize, fraction: f64, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (n as f64 * fraction).round() as usize;
    let mut out = vec![Split::Train; n];
    for &i in &order[..n_test] {
        out[i] = Split::Test;
    }
    out
}

/// Generate WAVs plus `manifest.jsonl` under `out_dir`.
///
/// Every utterance derives its seeds from `(cfg.seed, label, index)`, so the
/// output is identical whether generation runs serially or in parallel.
pub fn generate_corpus(cfg: &GenConfig, out_dir: &Path) -> Result<CorpusManifest> {
    let builder = CorpusBuilder::new(cfg)?;
    for sub in ["positive", "negative", "timeline"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let pos_split = split_assignment(cfg.n_positive, cfg.test_fraction, derive_seed(cfg.seed, "split-positive"));
    let neg_split = split_assignment(cfg.n_negative, cfg.test_fraction, derive_seed(cfg.seed, "split-negative"));
    let jobs: Vec<(Label, usize, Split)> = pos_split
        .iter()
        .enumerate()
        .map(|(i, &s)| (Label::Positive, i, s))
        .chain(neg_split.iter().enumerate().map(|(i, &s)| (Label::Negative, i, s)))
        .collect();
    let entries = jobs
        .par_iter()
        .map(|&(label, index, split)| -> Result<ManifestEntry> {
            let (spec, synth) = builder.render(label, index)?;
            let prefix = match label {
                Label::Positive => "pos",
                Label::Negative => "neg",
            };
            let id = format!("{prefix}-{index:05}");
            let rel = format!("{}/{id}.wav", label.as_str());
            write_wav(&out_dir.join(&rel), &synth.audio)?;
            Ok(ManifestEntry {
                id,
                path: rel,
                split,
                duration: synth.audio.duration(),
                trigger_start: synth.trigger_start,
                spec,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let n_chunks = (cfg.negative_timeline_hours * 3600.0 / cfg.timeline_chunk_seconds).ceil() as usize;
    let timeline = (0..n_chunks)
        .into_par_iter()
        .map(|i| -> Result<TimelineChunk> {
            let (audio, utterances) = builder.render_timeline_chunk(i)?;
            let id = format!("timeline-{i:03}");
            let rel = format!("timeline/{id}.wav");
            write_wav(&out_dir.join(&rel), &audio)?;
            Ok(TimelineChunk {
                id,
                path: rel,
                duration: audio.duration(),
                utterances,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = CorpusManifest {
        root: out_dir.to_path_buf(),
        entries,
        timeline,
    };
    manifest.write(out_dir)?;
    let cfg_path = out_dir.join("gen_config.json");
    let json = serde_json::to_string_pretty(cfg).map_err(|e| Error::format(&cfg_path, e))?;
    fs::write(&cfg_path, json + "\n").map_err(|e| Error::io(&cfg_path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> GenConfig {
        GenConfig {
            n_positive: 6,
            n_negative: 4,
            negative_timeline_hours: 20.0 / 3600.0,
            timeline_chunk_seconds: 10.0,
            ..GenConfig::default()
        }
    }

    #[test]
    fn default_output_layer_has_23_units() {
        let a = PhoneAlphabet::default();
        assert_eq!(a.num_classes(), 23);
        assert_eq!(a.class_index(WORD_BOUNDARY).unwrap(), 21);
        assert_eq!(a.class_index(SENTENCE_BOUNDARY).unwrap(), 22);
        assert!(a.class_index("zz").is_err());
    }

    #[test]
    fn neighbours_share_voicing() {
        let a = PhoneAlphabet::default();
        for i in 0..a.phones.len() {
            let j = a.nearest_neighbor(i);
            assert_ne!(i, j);
            assert_eq!(a.phones[i].voiced, a.phones[j].voiced);
        }
    }

    #[test]
    fn synthesis_is_deterministic() {
        let cfg = small_cfg();
        let b = CorpusBuilder::new(&cfg).unwrap();
        let spec = b.positive_spec(3);
        let x = b.synthesizer().synthesize(&spec, 11).unwrap();
        let y = b.synthesizer().synthesize(&spec, 11).unwrap();
        assert_eq!(x.audio, y.audio);
        assert_eq!(x.phones, y.phones);
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let synth = GenConfig::default().synthesizer().unwrap();
        let spec = UtteranceSpec {
            phone_sequence: vec![],
            trigger_end: None,
            label: Label::Negative,
            payload_words: vec![],
            snr_db: 20.0,
            slur: None,
        };
        assert_eq!(synth.synthesize(&spec, 0).unwrap_err().to_string(), "empty sequence");
    }

    #[test]
    fn unknown_phone_is_named() {
        let synth = GenConfig::default().synthesizer().unwrap();
        let spec = UtteranceSpec {
            phone_sequence: vec!["aa".into(), "qq".into()],
            trigger_end: None,
            label: Label::Negative,
            payload_words: vec![],
            snr_db: 20.0,
            slur: None,
        };
        assert!(synth.synthesize(&spec, 0).unwrap_err().to_string().contains("qq"));
    }

    #[test]
    fn trigger_end_matches_duration_log() {
        let cfg = small_cfg();
        let b = CorpusBuilder::new(&cfg).unwrap();
        let n_trigger_phones = cfg.trigger.iter().filter(|s| *s != WORD_BOUNDARY).count();
        for i in 0..5 {
            let (spec, synth) = b.render(Label::Positive, i).unwrap();
            // independent reconstruction: lead-in + phone durations + the
            // word gap inside the trigger, all read from the timing log
            let spans = &synth.phones[..n_trigger_phones];
            let sounding: f64 = spans.iter().map(|s| s.end - s.start).sum();
            let gaps: f64 = spans.windows(2).map(|w| w[1].start - w[0].end).sum();
            let expected = spans[0].start + sounding + gaps;
            let period = 1.0 / 16000.0;
            assert!((spec.trigger_end.unwrap() - expected).abs() <= period);
            assert!(spec.trigger_end.unwrap() > 0.0);
        }
    }

    #[test]
    fn payload_sampler_rejects_small_vocab() {
        let vocab: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
        assert!(matches!(
            sample_payload(1, 1.5, &vocab, 3),
            Err(Error::VocabTooSmall { .. })
        ));
    }

    #[test]
    fn payload_is_seed_deterministic() {
        let vocab: Vec<String> = (0..50).map(|i| format!("w{i}")).collect();
        let a = sample_payload(9, 1.5, &vocab, 5).unwrap();
        assert_eq!(a, sample_payload(9, 1.5, &vocab, 5).unwrap());
        assert_eq!(a.len(), 5);
    }

    #[test]
    fn payload_masses_match_targets_analytically() {
        let s = PayloadSampler::new(50, 1.5).unwrap();
        let p = s.probabilities();
        let top10: f64 = p[..10].iter().sum();
        let top20: f64 = p[..20].iter().sum();
        assert!((top10 - 0.80).abs() < 1e-9);
        assert!((0.85..=0.95).contains(&top20), "{top20}");
        assert!(p.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn vocabularies_are_disjoint() {
        let v = Vocabulary::build(&GenConfig::default());
        for w in &v.directed {
            assert!(!v.background.contains(w));
        }
    }

    fn edit_distance(a: &[String], b: &[String]) -> usize {
        let mut prev: Vec<usize> = (0..=b.len()).collect();
        for (i, x) in a.iter().enumerate() {
            let mut cur = vec![i + 1; b.len() + 1];
            for (j, y) in b.iter().enumerate() {
                cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
            }
            prev = cur;
        }
        prev[b.len()]
    }

    #[test]
    fn confusables_can_be_disabled() {
        let cfg = GenConfig {
            confusable_fraction: 0.0,
            ..small_cfg()
        };
        let b = CorpusBuilder::new(&cfg).unwrap();
        for i in 0..200 {
            let seq = b.negative_spec(i).phone_sequence;
            let prefix = &seq[..seq.len().min(cfg.trigger.len())];
            assert!(edit_distance(prefix, &cfg.trigger) > 2, "{seq:?}");
        }
        let default_cfg = small_cfg();
        let with = CorpusBuilder::new(&default_cfg).unwrap();
        let close = (0..200)
            .filter(|&i| {
                let seq = with.negative_spec(i).phone_sequence;
                edit_distance(&seq[..cfg.trigger.len()], &cfg.trigger) <= 2
            })
            .count();
        assert!(close > 50, "{close}");
    }

    #[test]
    fn split_is_a_partition() {
        let s = split_assignment(100, 0.2, 5);
        assert_eq!(s.iter().filter(|&&x| x == Split::Test).count(), 20);
    }
}
