//! Multi-task training.
//!
//! Every batch mixes phonetic items (whole utterances with their phone
//! sequence, CTC on the phonetic head) and discriminative items (truncated
//! views of positives and whole negatives, on the two-unit head) at a 1:1
//! item ratio. Each epoch of the discriminative stream visits every view of
//! every positive once, with negatives resampled to
//! `negatives_per_positive` items per positive view (by default two).
//!
//! The data order is a pure function of `(seed, step)`, so a run resumed from
//! a checkpoint reproduces the uninterrupted run exactly. Per-item gradients
//! are computed in parallel and summed in batch order, which keeps the
//! result independent of the thread count.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, AudioBuffer};
use crate::checkpoint::{AdamState, ModelCheckpoint};
use crate::error::{Error, Result};
use crate::frontend::{stack_and_downsample, FeatureSequence, FrontendConfig, MelFrontend, Normalizer};
use crate::losses::{item_loss, LabelSequence, Target, TaskWeights};
use crate::model::{Model, ModelConfig, POSITIVE};
use crate::synthgen::{CorpusManifest, Label, ManifestEntry, PhoneAlphabet, Split};
use crate::util::{derive_seed, derive_seed_indexed, fmt_sig9};

/// End point of a training view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewLength {
    /// Seconds of audio kept after the trigger end.
    Post(f64),
    Whole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub lambda_disc: f64,
    pub view_lengths: Vec<ViewLength>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Fraction of training utterances held out for the accuracy check.
    pub holdout_fraction: f64,
    pub accuracy_floor: Option<f64>,
    /// Negative items per positive view in the discriminative stream;
    /// `None` keeps the corpus' negative to positive utterance ratio.
    pub negatives_per_positive: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.0008,
            clip_norm: 20.0,
            batch_size: 16,
            max_steps: 3000,
            seed: 1,
            lambda_disc: 1.0,
            view_lengths: vec![
                ViewLength::Post(0.0),
                ViewLength::Post(0.5),
                ViewLength::Post(1.0),
                ViewLength::Post(1.5),
                ViewLength::Post(2.0),
                ViewLength::Whole,
            ],
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            holdout_fraction: 0.05,
            accuracy_floor: None,
            negatives_per_positive: Some(2.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return bad(format!("clip_norm must be > 0, got {}", self.clip_norm));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if self.lambda_disc < 0.0 {
            return bad("lambda_disc must be >= 0".into());
        }
        if self.view_lengths.is_empty() {
            return bad("view_lengths is empty".into());
        }
        if self.view_lengths.iter().any(|v| matches!(v, ViewLength::Post(x) if !(*x >= 0.0))) {
            return bad("view lengths must be >= 0".into());
        }
        if self.negatives_per_positive.is_some_and(|r| !(r > 0.0 && r.is_finite())) {
            return bad("negatives_per_positive must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad(format!("holdout_fraction {} not in [0, 1)", self.holdout_fraction));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("adam betas must be in [0, 1) and epsilon > 0".into());
        }
        Ok(())
    }

    fn disc_per_batch(&self) -> usize {
        self.batch_size / 2
    }

    fn phonetic_per_batch(&self) -> usize {
        self.batch_size - self.disc_per_batch()
    }
}

/// View end points in samples, clipped to the utterance and deduplicated,
/// in the order of `views`. Negatives yield the whole utterance only.
pub fn view_ends(entry: &ManifestEntry, n_samples: usize, sample_rate: u32, views: &[ViewLength]) -> Result<Vec<usize>> {
    if entry.spec.label == Label::Negative {
        return Ok(vec![n_samples]);
    }
    let trigger_end = entry.spec.trigger_end.ok_or_else(|| {
        Error::InvalidLabels(format!("positive utterance {} has no trigger_end", entry.id))
    })?;
    let mut ends: Vec<usize> = Vec::with_capacity(views.len());
    for v in views {
        let end = match *v {
            ViewLength::Whole => n_samples,
            ViewLength::Post(x) => (((trigger_end + x) * sample_rate as f64).round() as usize).min(n_samples),
        };
        if !ends.contains(&end) {
            ends.push(end);
        }
    }
    Ok(ends)
}

#[derive(Debug, Clone)]
pub struct View {
    /// Seconds from utterance start to the end of the view.
    pub end: f64,
    pub features: FeatureSequence,
    pub target: Target,
}

/// Discriminative training views of one utterance, each computed from the
/// audio up to its end point.
pub fn make_views(
    entry: &ManifestEntry,
    audio: &AudioBuffer,
    frontend: &MelFrontend,
    normalizer: Option<&Normalizer>,
    views: &[ViewLength],
) -> Result<Vec<View>> {
    let positive = entry.spec.label.is_positive();
    let ends = view_ends(entry, audio.len(), audio.sample_rate, views)?;
    let rate = audio.sample_rate as f64;
    ends.into_iter()
        .map(|end| {
            let clip = AudioBuffer::new(audio.samples[..end].to_vec(), audio.sample_rate);
            Ok(View {
                end: end as f64 / rate,
                features: frontend.features(&clip, normalizer, 0.0)?,
                target: Target::Discriminative { positive },
            })
        })
        .collect()
}

/// Phone sequence as phonetic-head class indices.
pub fn phonetic_labels(alphabet: &PhoneAlphabet, phones: &[String]) -> Result<LabelSequence> {
    let symbols = phones
        .iter()
        .map(|p| alphabet.class_index(p))
        .collect::<Result<Vec<_>>>()?;
    LabelSequence::new(symbols, alphabet.blank_index())
}

/// Global L2 norm, accumulated in double precision.
pub fn global_norm(grads: &[f32]) -> f64 {
    grads.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt()
}

/// Scale `grads` in place so that its global norm is at most `clip_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [f32], clip_norm: f64) -> f64 {
    let norm = global_norm(grads);
    let mut current = norm;
    let mut shrink = 1.0;
    // f32 rounding can leave the scaled norm a hair above the bound.
    while current > clip_norm {
        let scale = (clip_norm / current * shrink) as f32;
        shrink = 1.0 - 1e-7;
        for g in grads.iter_mut() {
            *g *= scale;
        }
        current = global_norm(grads);
    }
    norm
}

/// Clip, then apply one Adam update. Returns the pre-clip gradient norm.
pub fn adam_step(model: &mut Model<f32>, grads: &mut [f32], state: &mut AdamState, cfg: &TrainConfig) -> Result<f64> {
    let n = model.num_params();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Shape {
            what: "gradient buffer",
            expected: vec![n],
            actual: vec![grads.len()],
        });
    }
    for t in &model.layout.tensors {
        if grads[t.range()].iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(t.name.clone()));
        }
    }
    let norm = clip_global_norm(grads, cfg.clip_norm);
    state.step += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    for i in 0..n {
        let g = grads[i] as f64;
        let m = b1 * state.m[i] as f64 + (1.0 - b1) * g;
        let v = b2 * state.v[i] as f64 + (1.0 - b2) * g * g;
        state.m[i] = m as f32;
        state.v[i] = v as f32;
        let update = cfg.learning_rate * (m / bc1) / ((v / bc2).sqrt() + cfg.epsilon);
        model.params[i] = (model.params[i] as f64 - update) as f32;
    }
    Ok(norm)
}

/// One training utterance with its normalized mel frames.
#[derive(Debug, Clone)]
struct CachedUtterance {
    mel: Array2<f32>,
    positive: bool,
    /// Mel-frame counts of the usable discriminative views.
    view_frames: Vec<usize>,
    phonetic: Option<LabelSequence>,
}

/// Training and holdout utterances in memory.
#[derive(Debug, Clone)]
pub struct TrainingData {
    utterances: Vec<CachedUtterance>,
    holdout: Vec<CachedUtterance>,
    pub normalizer: Normalizer,
    /// Utterances dropped from the phonetic stream because their label
    /// sequence cannot fit the available frames.
    pub phonetic_skipped: usize,
    stack: usize,
    factor: usize,
}

impl TrainingData {
    /// Load the training split. With `normalizer` absent, one is estimated
    /// from the non-holdout utterances.
    pub fn load(
        manifest: &CorpusManifest,
        frontend: &FrontendConfig,
        alphabet: &PhoneAlphabet,
        cfg: &TrainConfig,
        normalizer: Option<&Normalizer>,
    ) -> Result<Self> {
        let entries: Vec<&ManifestEntry> = manifest.split(Split::Train).collect();
        if entries.is_empty() {
            return Err(Error::EmptyDataset("no training utterances in manifest".into()));
        }
        let fe = MelFrontend::new(frontend.clone())?;
        let loaded: Vec<(Array2<f32>, Vec<usize>)> = entries
            .par_iter()
            .map(|e| {
                let audio = read_wav(&manifest.resolve(&e.path))?;
                let mel = fe.mel_frames(&audio)?;
                let ends = view_ends(e, audio.len(), audio.sample_rate, &cfg.view_lengths)?;
                let frames = ends.into_iter().map(|n| frontend.num_frames(n)).collect();
                Ok((mel, frames))
            })
            .collect::<Result<_>>()?;

        let mut order: Vec<usize> = (0..entries.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "holdout")));
        let n_holdout = ((entries.len() as f64) * cfg.holdout_fraction).round() as usize;
        let mut is_holdout = vec![false; entries.len()];
        for &i in &order[..n_holdout.min(entries.len().saturating_sub(1))] {
            is_holdout[i] = true;
        }

        let normalizer = match normalizer {
            Some(n) => n.clone(),
            None => Normalizer::estimate(
                loaded
                    .iter()
                    .zip(&is_holdout)
                    .filter(|(_, h)| !**h)
                    .map(|((m, _), _)| m.view()),
            )?,
        };

        let mut data = TrainingData {
            utterances: Vec::new(),
            holdout: Vec::new(),
            normalizer,
            phonetic_skipped: 0,
            stack: frontend.stack_size,
            factor: frontend.downsample,
        };
        for ((entry, (mut mel, frames)), holdout) in entries.iter().zip(loaded).zip(is_holdout) {
            data.normalizer.apply(&mut mel);
            let view_frames: Vec<usize> = frames.into_iter().filter(|&f| f >= frontend.stack_size).collect();
            let labels = phonetic_labels(alphabet, &entry.spec.phone_sequence)?;
            let t_down = frontend.num_windows(mel.nrows());
            let phonetic = if t_down >= labels.min_frames() {
                Some(labels)
            } else {
                data.phonetic_skipped += 1;
                None
            };
            let utt = CachedUtterance {
                mel,
                positive: entry.spec.label.is_positive(),
                view_frames,
                phonetic,
            };
            if holdout {
                data.holdout.push(utt);
            } else {
                data.utterances.push(utt);
            }
        }
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn holdout_len(&self) -> usize {
        self.holdout.len()
    }

    fn windows(&self, utt: &CachedUtterance, frames: usize) -> Result<Array2<f32>> {
        Ok(stack_and_downsample(utt.mel.slice(s![..frames, ..]), self.stack, self.factor, 0.0)?.windows)
    }
}

/// `(utterance, view)` pairs of one pass over the discriminative stream.
fn disc_pool(data: &TrainingData, per_positive: Option<f64>) -> Result<Vec<(usize, usize)>> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, u) in data.utterances.iter().enumerate() {
        for v in 0..u.view_frames.len() {
            if u.positive {
                pos.push((i, v));
            } else {
                neg.push((i, v));
            }
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::EmptyDataset(
            "discriminative task needs both positive and negative training utterances".into(),
        ));
    }
    let n_pos_utt = data.utterances.iter().filter(|u| u.positive).count() as f64;
    let n_neg_utt = data.utterances.len() as f64 - n_pos_utt;
    let ratio = per_positive.unwrap_or(n_neg_utt / n_pos_utt);
    let target_neg = ((pos.len() as f64) * ratio).round().max(1.0) as usize;
    let mut pool = pos;
    pool.extend((0..target_neg).map(|k| neg[k % neg.len()]));
    Ok(pool)
}

/// Item `k` of an endless stream that reshuffles `pool` every epoch.
struct EpochStream {
    len: usize,
    seed: u64,
    label: &'static str,
    cached_epoch: Option<(u64, Vec<usize>)>,
}

impl EpochStream {
    fn new(len: usize, seed: u64, label: &'static str) -> Self {
        Self {
            len,
            seed,
            label,
            cached_epoch: None,
        }
    }

    fn get(&mut self, k: u64) -> usize {
        let epoch = k / self.len as u64;
        if self.cached_epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.len).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed_indexed(self.seed, self.label, epoch)));
            self.cached_epoch = Some((epoch, perm));
        }
        self.cached_epoch.as_ref().unwrap().1[(k % self.len as u64) as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub phonetic_loss: f64,
    pub disc_loss: f64,
    pub grad_norm_preclip: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,phonetic_loss,disc_loss,grad_norm_preclip\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.step,
                fmt_sig9(r.phonetic_loss),
                fmt_sig9(r.disc_loss),
                fmt_sig9(r.grad_norm_preclip)
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: ModelCheckpoint,
    pub log: TrainLog,
    /// Whole-utterance accuracy (max positive posterior ≥ 0.5) on the
    /// holdout slice; absent when the slice is empty.
    pub holdout_accuracy: Option<f64>,
}

impl TrainOutput {
    pub fn check_floor(&self, floor: Option<f64>) -> Result<()> {
        match (floor, self.holdout_accuracy) {
            (Some(floor), Some(accuracy)) if accuracy < floor => Err(Error::BelowAccuracyFloor { accuracy, floor }),
            _ => Ok(()),
        }
    }
}

/// Fresh checkpoint for `data`, seeded from the training seed.
pub fn init_checkpoint(model: ModelConfig, frontend: FrontendConfig, data: &TrainingData, cfg: &TrainConfig) -> Result<ModelCheckpoint> {
    let mut ckpt = ModelCheckpoint::init(model, frontend, derive_seed(cfg.seed, "model-init"))?;
    ckpt.normalizer = data.normalizer.clone();
    Ok(ckpt)
}

/// Run training from `start` up to `cfg.max_steps` total steps.
pub fn train_from(start: ModelCheckpoint, data: &TrainingData, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset("no training utterances after holdout".into()));
    }
    let mut ckpt = start;
    let mut log = TrainLog::default();
    if ckpt.step < cfg.max_steps {
        let disc = disc_pool(data, cfg.negatives_per_positive)?;
        let phon: Vec<usize> = (0..data.len()).filter(|&i| data.utterances[i].phonetic.is_some()).collect();
        if phon.is_empty() {
            return Err(Error::EmptyDataset("no utterance fits its phonetic labels".into()));
        }
        let mut disc_stream = EpochStream::new(disc.len(), cfg.seed, "disc-epoch");
        let mut phon_stream = EpochStream::new(phon.len(), cfg.seed, "phonetic-epoch");
        let mut state = ckpt
            .optimizer
            .take()
            .unwrap_or_else(|| AdamState::new(ckpt.model.num_params()));
        let (nd, np) = (cfg.disc_per_batch(), cfg.phonetic_per_batch());
        let mut last_good = ckpt.step;

        while ckpt.step < cfg.max_steps {
            let step = ckpt.step;
            let mut items: Vec<(usize, usize, Target)> = Vec::with_capacity(cfg.batch_size);
            for j in 0..nd {
                let (u, v) = disc[disc_stream.get(step * nd as u64 + j as u64)];
                let utt = &data.utterances[u];
                items.push((u, utt.view_frames[v], Target::Discriminative { positive: utt.positive }));
            }
            for j in 0..np {
                let u = phon[phon_stream.get(step * np as u64 + j as u64)];
                let utt = &data.utterances[u];
                items.push((u, utt.mel.nrows(), Target::Phonetic(utt.phonetic.clone().unwrap())));
            }
            let weights = TaskWeights::for_batch(items.iter().map(|i| &i.2), cfg.lambda_disc)?;
            let model = &ckpt.model;
            let results: Vec<(f64, Vec<f32>)> = items
                .par_iter()
                .map(|(u, frames, target)| {
                    let x = data.windows(&data.utterances[*u], *frames)?;
                    let (logits, cache) = model.forward_train(x.view())?;
                    let to64 = |a: &Array2<f32>| a.mapv(|v| v as f64);
                    let out = item_loss(
                        to64(&logits.phonetic).view(),
                        to64(&logits.discriminative).view(),
                        target,
                        weights.weight(target),
                    )?;
                    let to32 = |a: &Array2<f64>| a.mapv(|v| v as f32);
                    let grads = model.backward(&cache, to32(&out.d_phonetic).view(), to32(&out.d_disc).view())?;
                    Ok((out.loss, grads))
                })
                .collect::<Result<_>>()?;

            let (mut sum_p, mut sum_d) = (0.0, 0.0);
            let mut grads = vec![0f32; ckpt.model.num_params()];
            for ((_, _, target), (loss, g)) in items.iter().zip(&results) {
                if target.is_phonetic() {
                    sum_p += loss;
                } else {
                    sum_d += loss;
                }
                for (a, b) in grads.iter_mut().zip(g) {
                    *a += b;
                }
            }
            let phonetic_loss = sum_p / np as f64;
            let disc_loss = sum_d / nd as f64;
            if !phonetic_loss.is_finite() || !disc_loss.is_finite() {
                return Err(Error::Diverged { step: step + 1, last_good });
            }
            let norm = adam_step(&mut ckpt.model, &mut grads, &mut state, cfg)?;
            ckpt.step += 1;
            last_good = ckpt.step;
            log.rows.push(LogRow {
                step: ckpt.step,
                phonetic_loss,
                disc_loss,
                grad_norm_preclip: norm,
            });
        }
        ckpt.optimizer = Some(state);
    }
    let holdout_accuracy = holdout_accuracy(&ckpt.model, data)?;
    Ok(TrainOutput {
        checkpoint: ckpt,
        log,
        holdout_accuracy,
    })
}

fn holdout_accuracy(model: &Model<f32>, data: &TrainingData) -> Result<Option<f64>> {
    let usable: Vec<&CachedUtterance> = data.holdout.iter().filter(|u| u.mel.nrows() >= data.stack).collect();
    if usable.is_empty() {
        return Ok(None);
    }
    let correct: Vec<bool> = usable
        .par_iter()
        .map(|u| {
            let x = data.windows(u, u.mel.nrows())?;
            let post = model.forward(x.view())?.posteriors();
            let score = max_positive(post.discriminative.view());
            Ok((score >= 0.5) == u.positive)
        })
        .collect::<Result<_>>()?;
    Ok(Some(correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64))
}

fn max_positive(disc: ArrayView2<f64>) -> f64 {
    disc.column(POSITIVE).iter().cloned().fold(0.0, f64::max)
}

/// Load the training split and train a fresh model.
pub fn train(
    manifest: &CorpusManifest,
    model: ModelConfig,
    frontend: FrontendConfig,
    alphabet: &PhoneAlphabet,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let data = TrainingData::load(manifest, &frontend, alphabet, cfg, None)?;
    let start = init_checkpoint(model, frontend, &data, cfg)?;
    train_from(start, &data, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_corpus, GenConfig};

    fn entry(label: Label, trigger_end: Option<f64>) -> ManifestEntry {
        ManifestEntry {
            id: "u".into(),
            path: "u.wav".into(),
            split: Split::Train,
            spec: crate::synthgen::UtteranceSpec {
                phone_sequence: vec!["m".into()],
                trigger_end,
                label,
                payload_words: vec![],
                snr_db: 20.0,
                slur: None,
            },
            duration: 0.0,
            trigger_start: None,
        }
    }

    #[test]
    fn six_views_when_audio_runs_long() {
        let e = entry(Label::Positive, Some(1.0));
        let ends = view_ends(&e, 64_000, 16_000, &TrainConfig::default().view_lengths).unwrap();
        assert_eq!(ends, vec![16_000, 24_000, 32_000, 40_000, 48_000, 64_000]);
    }

    #[test]
    fn short_tail_collapses_to_trigger_and_whole() {
        let e = entry(Label::Positive, Some(1.0));
        let ends = view_ends(&e, 19_200, 16_000, &TrainConfig::default().view_lengths).unwrap();
        assert_eq!(ends, vec![16_000, 19_200]);
    }

    #[test]
    fn negatives_have_one_view_and_positives_need_trigger_end() {
        let views = TrainConfig::default().view_lengths;
        assert_eq!(view_ends(&entry(Label::Negative, None), 5000, 16_000, &views).unwrap(), vec![5000]);
        assert!(view_ends(&entry(Label::Positive, None), 5000, 16_000, &views).is_err());
    }

    #[test]
    fn clipping_halves_a_norm_40_gradient() {
        let mut g = vec![0f32; 16];
        g[0] = 24.0;
        g[5] = -32.0;
        let pre = clip_global_norm(&mut g, 20.0);
        assert_eq!(pre, 40.0);
        assert_eq!(g[0], 12.0);
        assert_eq!(g[5], -16.0);
        let mut small = vec![3.0f32, 4.0];
        assert_eq!(clip_global_norm(&mut small, 20.0), 5.0);
        assert_eq!(small, vec![3.0, 4.0]);
    }

    fn tiny_model() -> Model<f32> {
        let cfg = ModelConfig {
            num_layers: 1,
            hidden_per_direction: 3,
            input_dim: 4,
            phonetic_classes: 4,
            discriminative_classes: 2,
        };
        Model::init(cfg, 3).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_decays_moments() {
        let mut model = tiny_model();
        let before = model.params.clone();
        let n = model.num_params();
        let mut state = AdamState::new(n);
        state.v = vec![1.0; n];
        let cfg = TrainConfig::default();
        adam_step(&mut model, &mut vec![0.0; n], &mut state, &cfg).unwrap();
        assert_eq!(model.params, before);
        assert!(state.v.iter().all(|&v| (v - 0.999).abs() < 1e-7));
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_adam_step_moves_each_parameter_by_lr() {
        let mut model = tiny_model();
        let before = model.params.clone();
        let n = model.num_params();
        let mut grads: Vec<f32> = (0..n).map(|i| if i % 2 == 0 { 0.5 } else { -0.25 }).collect();
        let mut state = AdamState::new(n);
        adam_step(&mut model, &mut grads, &mut state, &TrainConfig::default()).unwrap();
        for i in 0..n {
            let delta = before[i] as f64 - model.params[i] as f64;
            let expected = if i % 2 == 0 { 0.0008 } else { -0.0008 };
            assert!((delta - expected).abs() < 1e-6, "param {i}: {delta}");
        }
    }

    #[test]
    fn non_finite_gradient_names_the_tensor() {
        let mut model = tiny_model();
        let n = model.num_params();
        let mut grads = vec![0f32; n];
        let t = model.layout.find("head.disc.b").unwrap().clone();
        grads[t.offset] = f32::NAN;
        let err = adam_step(&mut model, &mut grads, &mut AdamState::new(n), &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref name) if name == "head.disc.b"));
    }

    fn toy_corpus(dir: &Path) -> CorpusManifest {
        let cfg = GenConfig {
            seed: 5,
            n_positive: 6,
            n_negative: 4,
            test_fraction: 0.2,
            negative_timeline_hours: 0.0,
            ..GenConfig::default()
        };
        generate_corpus(&cfg, dir).unwrap()
    }

    fn toy_model() -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            hidden_per_direction: 16,
            ..ModelConfig::default()
        }
    }

    fn toy_train_cfg(steps: u64) -> TrainConfig {
        TrainConfig {
            max_steps: steps,
            batch_size: 4,
            holdout_fraction: 0.0,
            learning_rate: 0.005,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn make_views_match_cached_prefixes() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = toy_corpus(dir.path());
        let fcfg = FrontendConfig::default();
        let cfg = toy_train_cfg(0);
        let data = TrainingData::load(&manifest, &fcfg, &PhoneAlphabet::default(), &cfg, None).unwrap();
        let fe = MelFrontend::new(fcfg).unwrap();
        let train: Vec<&ManifestEntry> = manifest.split(Split::Train).collect();
        for (e, utt) in train.iter().zip(&data.utterances) {
            let audio = read_wav(&manifest.resolve(&e.path)).unwrap();
            let views = make_views(e, &audio, &fe, Some(&data.normalizer), &cfg.view_lengths).unwrap();
            assert_eq!(views.len(), utt.view_frames.len());
            for (v, &frames) in views.iter().zip(&utt.view_frames) {
                assert!(v.end <= audio.duration() + 1e-12);
                assert_eq!(v.features.windows, data.windows(utt, frames).unwrap());
            }
        }
    }

    #[test]
    fn zero_steps_returns_init_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = toy_corpus(dir.path());
        let cfg = toy_train_cfg(0);
        let out = train(&manifest, toy_model(), FrontendConfig::default(), &PhoneAlphabet::default(), &cfg).unwrap();
        let init = Model::<f32>::init(toy_model(), derive_seed(cfg.seed, "model-init")).unwrap();
        assert_eq!(out.checkpoint.model, init);
        assert_eq!(out.checkpoint.step, 0);
        assert!(out.log.rows.is_empty());
    }

    #[test]
    fn toy_run_reduces_loss() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = toy_corpus(dir.path());
        let out = train(
            &manifest,
            toy_model(),
            FrontendConfig::default(),
            &PhoneAlphabet::default(),
            &toy_train_cfg(50),
        )
        .unwrap();
        let first = &out.log.rows[0];
        let last = &out.log.rows[49];
        assert_eq!(last.step, 50);
        assert!(
            last.phonetic_loss + last.disc_loss < first.phonetic_loss + first.disc_loss,
            "{first:?} -> {last:?}"
        );
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = toy_corpus(dir.path());
        let fcfg = FrontendConfig::default();
        let alphabet = PhoneAlphabet::default();
        let full = train(&manifest, toy_model(), fcfg.clone(), &alphabet, &toy_train_cfg(6)).unwrap();

        let first = train(&manifest, toy_model(), fcfg.clone(), &alphabet, &toy_train_cfg(3)).unwrap();
        let path = dir.path().join("mid.ckpt");
        first.checkpoint.save(&path).unwrap();
        let restored = ModelCheckpoint::load(&path).unwrap();
        let cfg = toy_train_cfg(6);
        let data = TrainingData::load(&manifest, &fcfg, &alphabet, &cfg, Some(&restored.normalizer)).unwrap();
        let resumed = train_from(restored, &data, &cfg).unwrap();

        assert_eq!(resumed.checkpoint, full.checkpoint);
        assert_eq!(resumed.log.rows[..], full.log.rows[3..]);
    }
}
