//! Training objectives.
//!
//! Every loss here takes per-frame log-posteriors (log-softmax outputs) and
//! returns the loss together with its gradient with respect to the
//! pre-softmax logits, the convention expected by
//! [`Model::backward`](crate::model::Model::backward).
//!
//! * [`ctc_loss`]: connectionist temporal classification via the
//!   forward-backward recursion in log space.
//! * [`discriminative_positive_loss`]: CTC of the one-symbol sequence
//!   `[positive]` on the two-unit head, with the negative unit acting as the
//!   blank. Valid alignments are `neg* pos+ neg*`.
//! * [`discriminative_negative_loss`]: `-ln(mean_t y_t^n)`.
//! * [`mtl_loss`]: mean phonetic loss plus `lambda` times mean
//!   discriminative loss over a batch.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::model::{NEGATIVE, POSITIVE};
use crate::util::{log_add_exp, log_softmax_rows};

/// Guard for `y^n -> 0` in the negative loss.
pub const NEGATIVE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSequence {
    symbols: Vec<usize>,
    blank: usize,
}

impl LabelSequence {
    pub fn new(symbols: Vec<usize>, blank: usize) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::InvalidLabels("label sequence is empty".into()));
        }
        if symbols.contains(&blank) {
            return Err(Error::InvalidLabels(format!("label sequence contains the blank {blank}")));
        }
        Ok(Self { symbols, blank })
    }

    pub fn symbols(&self) -> &[usize] {
        &self.symbols
    }

    pub fn blank(&self) -> usize {
        self.blank
    }

    /// Fewest frames that can carry this sequence: one per label plus a
    /// separating blank between every pair of equal neighbours.
    pub fn min_frames(&self) -> usize {
        let repeats = self.symbols.windows(2).filter(|w| w[0] == w[1]).count();
        self.symbols.len() + repeats
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// Gradient w.r.t. logits, same shape as the input.
    pub grad: Array2<f64>,
}

pub fn ctc_loss(log_probs: ArrayView2<f64>, labels: &LabelSequence) -> Result<LossOutput> {
    let (t_len, k) = log_probs.dim();
    if let Some(&bad) = labels.symbols.iter().chain([&labels.blank]).find(|&&s| s >= k) {
        return Err(Error::InvalidLabels(format!("class {bad} outside {k} outputs")));
    }
    let required = labels.min_frames();
    if t_len < required {
        return Err(Error::AlignmentImpossible {
            frames: t_len,
            labels: labels.symbols.len(),
            required,
        });
    }

    let blank = labels.blank;
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(labels.symbols.iter().flat_map(|&l| [l, blank]))
        .collect();
    let n = ext.len();
    let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let neg_inf = f64::NEG_INFINITY;

    let mut alpha = Array2::<f64>::from_elem((t_len, n), neg_inf);
    alpha[[0, 0]] = log_probs[[0, ext[0]]];
    alpha[[0, 1]] = log_probs[[0, ext[1]]];
    for t in 1..t_len {
        for s in 0..n {
            let mut a = alpha[[t - 1, s]];
            if s >= 1 {
                a = log_add_exp(a, alpha[[t - 1, s - 1]]);
            }
            if skip_ok(s) {
                a = log_add_exp(a, alpha[[t - 1, s - 2]]);
            }
            if a > neg_inf {
                alpha[[t, s]] = a + log_probs[[t, ext[s]]];
            }
        }
    }

    // beta excludes the emission at t, so alpha + beta is the log mass of
    // all paths through (t, s).
    let mut beta = Array2::<f64>::from_elem((t_len, n), neg_inf);
    beta[[t_len - 1, n - 1]] = 0.0;
    beta[[t_len - 1, n - 2]] = 0.0;
    for t in (0..t_len - 1).rev() {
        for s in 0..n {
            let mut b = beta[[t + 1, s]] + log_probs[[t + 1, ext[s]]];
            if s + 1 < n {
                b = log_add_exp(b, beta[[t + 1, s + 1]] + log_probs[[t + 1, ext[s + 1]]]);
            }
            if s + 2 < n && skip_ok(s + 2) {
                b = log_add_exp(b, beta[[t + 1, s + 2]] + log_probs[[t + 1, ext[s + 2]]]);
            }
            beta[[t, s]] = b;
        }
    }

    let log_p = log_add_exp(alpha[[t_len - 1, n - 1]], alpha[[t_len - 1, n - 2]]);
    if !log_p.is_finite() {
        return Err(Error::AlignmentImpossible {
            frames: t_len,
            labels: labels.symbols.len(),
            required,
        });
    }

    let mut grad = log_probs.mapv(f64::exp);
    for t in 0..t_len {
        let mut occupancy = vec![neg_inf; k];
        for s in 0..n {
            let g = alpha[[t, s]] + beta[[t, s]];
            occupancy[ext[s]] = log_add_exp(occupancy[ext[s]], g);
        }
        for (c, occ) in occupancy.iter().enumerate() {
            if *occ > neg_inf {
                grad[[t, c]] -= (occ - log_p).exp();
            }
        }
    }
    Ok(LossOutput {
        loss: (-log_p).max(0.0),
        grad,
    })
}

fn check_disc(log_probs: &ArrayView2<f64>) -> Result<()> {
    if log_probs.ncols() != 2 || log_probs.nrows() == 0 {
        return Err(Error::Shape {
            what: "discriminative log-posteriors",
            expected: vec![log_probs.nrows().max(1), 2],
            actual: vec![log_probs.nrows(), log_probs.ncols()],
        });
    }
    Ok(())
}

/// The positive-class label sequence over the discriminative head.
pub fn positive_labels() -> LabelSequence {
    LabelSequence::new(vec![POSITIVE], NEGATIVE).expect("static labels")
}

pub fn discriminative_positive_loss(disc_log_probs: ArrayView2<f64>) -> Result<LossOutput> {
    check_disc(&disc_log_probs)?;
    ctc_loss(disc_log_probs, &positive_labels())
}

pub fn discriminative_negative_loss(disc_log_probs: ArrayView2<f64>) -> Result<LossOutput> {
    check_disc(&disc_log_probs)?;
    let t_len = disc_log_probs.nrows() as f64;
    let y = disc_log_probs.mapv(f64::exp);
    let mean = y.column(NEGATIVE).sum() / t_len;
    let guarded = mean.max(NEGATIVE_FLOOR);
    let loss = (-guarded.ln()).max(0.0);
    let dy = -1.0 / (t_len * guarded);
    let mut grad = Array2::<f64>::zeros(y.raw_dim());
    for (t, row) in y.rows().into_iter().enumerate() {
        let yn = row[NEGATIVE];
        for j in 0..2 {
            let delta = if j == NEGATIVE { 1.0 } else { 0.0 };
            grad[[t, j]] = dy * yn * (delta - row[j]);
        }
    }
    Ok(LossOutput { loss, grad })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Phonetic(LabelSequence),
    Discriminative { positive: bool },
}

impl Target {
    pub fn is_phonetic(&self) -> bool {
        matches!(self, Target::Phonetic(_))
    }
}

/// One batch item: both heads' logits for a sequence and its task.
#[derive(Debug, Clone)]
pub struct MtlItem {
    pub phonetic_logits: Array2<f64>,
    pub disc_logits: Array2<f64>,
    pub target: Target,
}

/// Per-item scaling so that the batch total is
/// `mean(phonetic) + lambda * mean(discriminative)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskWeights {
    pub phonetic: f64,
    pub discriminative: f64,
    pub n_phonetic: usize,
    pub n_discriminative: usize,
}

impl TaskWeights {
    pub fn for_batch<'a>(targets: impl IntoIterator<Item = &'a Target>, lambda: f64) -> Result<Self> {
        let (mut np, mut nd) = (0usize, 0usize);
        for t in targets {
            if t.is_phonetic() {
                np += 1;
            } else {
                nd += 1;
            }
        }
        if np + nd == 0 {
            return Err(Error::EmptyBatch);
        }
        Ok(Self {
            phonetic: if np > 0 { 1.0 / np as f64 } else { 0.0 },
            discriminative: if nd > 0 { lambda / nd as f64 } else { 0.0 },
            n_phonetic: np,
            n_discriminative: nd,
        })
    }

    pub fn weight(&self, target: &Target) -> f64 {
        if target.is_phonetic() {
            self.phonetic
        } else {
            self.discriminative
        }
    }
}

/// Unweighted loss of one item and its weighted logit gradients.
#[derive(Debug, Clone)]
pub struct ItemLoss {
    pub loss: f64,
    pub d_phonetic: Array2<f64>,
    pub d_disc: Array2<f64>,
}

pub fn item_loss(
    phonetic_logits: ArrayView2<f64>,
    disc_logits: ArrayView2<f64>,
    target: &Target,
    weight: f64,
) -> Result<ItemLoss> {
    let mut d_phonetic = Array2::<f64>::zeros(phonetic_logits.raw_dim());
    let mut d_disc = Array2::<f64>::zeros(disc_logits.raw_dim());
    let out = match target {
        Target::Phonetic(labels) => {
            let out = ctc_loss(log_softmax_rows(phonetic_logits).view(), labels)?;
            d_phonetic.scaled_add(weight, &out.grad);
            out
        }
        Target::Discriminative { positive } => {
            let lp = log_softmax_rows(disc_logits);
            let out = if *positive {
                discriminative_positive_loss(lp.view())?
            } else {
                discriminative_negative_loss(lp.view())?
            };
            d_disc.scaled_add(weight, &out.grad);
            out
        }
    };
    Ok(ItemLoss {
        loss: out.loss,
        d_phonetic,
        d_disc,
    })
}

#[derive(Debug, Clone)]
pub struct MtlOutput {
    pub total: f64,
    /// Mean phonetic loss, absent when the batch has no phonetic items.
    pub phonetic: Option<f64>,
    /// Mean discriminative loss (before `lambda`).
    pub discriminative: Option<f64>,
    /// Per-item `(d_phonetic_logits, d_disc_logits)`.
    pub grads: Vec<(Array2<f64>, Array2<f64>)>,
}

pub fn mtl_loss(batch: &[MtlItem], lambda: f64) -> Result<MtlOutput> {
    let weights = TaskWeights::for_batch(batch.iter().map(|b| &b.target), lambda)?;
    let (mut sum_p, mut sum_d) = (0.0, 0.0);
    let mut grads = Vec::with_capacity(batch.len());
    for item in batch {
        let out = item_loss(
            item.phonetic_logits.view(),
            item.disc_logits.view(),
            &item.target,
            weights.weight(&item.target),
        )?;
        if item.target.is_phonetic() {
            sum_p += out.loss;
        } else {
            sum_d += out.loss;
        }
        grads.push((out.d_phonetic, out.d_disc));
    }
    let phonetic = (weights.n_phonetic > 0).then(|| sum_p / weights.n_phonetic as f64);
    let discriminative = (weights.n_discriminative > 0).then(|| sum_d / weights.n_discriminative as f64);
    Ok(MtlOutput {
        total: phonetic.unwrap_or(0.0) + lambda * discriminative.unwrap_or(0.0),
        phonetic,
        discriminative,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Sum over all K^T frame paths whose collapse equals `labels`.
    fn brute_force_ctc(log_probs: &Array2<f64>, labels: &[usize], blank: usize) -> f64 {
        let (t_len, k) = log_probs.dim();
        let mut total = 0.0;
        let mut path = vec![0usize; t_len];
        loop {
            let mut collapsed = Vec::new();
            let mut prev = None;
            for &p in &path {
                if Some(p) != prev && p != blank {
                    collapsed.push(p);
                }
                prev = Some(p);
            }
            if collapsed == labels {
                total += path.iter().enumerate().map(|(t, &p)| log_probs[[t, p]]).sum::<f64>().exp();
            }
            let mut i = 0;
            loop {
                if i == t_len {
                    return -total.ln();
                }
                path[i] += 1;
                if path[i] < k {
                    break;
                }
                path[i] = 0;
                i += 1;
            }
        }
    }

    fn random_log_probs(t: usize, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let logits = Array2::from_shape_fn((t, k), |_| rng.random_range(-2.0..2.0));
        log_softmax_rows(logits.view())
    }

    #[test]
    fn two_frames_uniform() {
        let lp = Array2::from_elem((2, 2), 0.5f64.ln());
        let labels = LabelSequence::new(vec![0], 1).unwrap();
        let out = ctc_loss(lp.view(), &labels).unwrap();
        assert!((out.loss - (-(0.75f64).ln())).abs() < 1e-12);
        assert!((out.loss - 0.2877).abs() < 1e-4);
    }

    #[test]
    fn certain_single_step() {
        let lp = array![[0.0, f64::NEG_INFINITY]];
        let out = ctc_loss(lp.view(), &LabelSequence::new(vec![0], 1).unwrap()).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn repeats_need_a_blank() {
        let lp = Array2::from_elem((2, 2), 0.5f64.ln());
        let labels = LabelSequence::new(vec![0, 0], 1).unwrap();
        assert_eq!(labels.min_frames(), 3);
        let err = ctc_loss(lp.view(), &labels).unwrap_err();
        assert!(err.to_string().starts_with("alignment impossible"), "{err}");
    }

    #[test]
    fn label_sequence_validation() {
        assert!(LabelSequence::new(vec![], 0).is_err());
        assert!(LabelSequence::new(vec![1, 0], 0).is_err());
    }

    #[test]
    fn matches_brute_force_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut checked = 0;
        while checked < 50 {
            let t = rng.random_range(1..=6);
            let k = rng.random_range(2..=3);
            let blank = rng.random_range(0..k);
            let len = rng.random_range(1..=3);
            let symbols: Vec<usize> = (0..len)
                .map(|_| {
                    let s = rng.random_range(0..k - 1);
                    if s >= blank { s + 1 } else { s }
                })
                .collect();
            let labels = LabelSequence::new(symbols.clone(), blank).unwrap();
            if labels.min_frames() > t {
                continue;
            }
            let lp = random_log_probs(t, k, &mut rng);
            let fast = ctc_loss(lp.view(), &labels).unwrap().loss;
            let slow = brute_force_ctc(&lp, &symbols, blank);
            assert!((fast - slow).abs() < 1e-10, "T={t} K={k} {symbols:?}: {fast} vs {slow}");
            checked += 1;
        }
    }

    fn check_logit_gradient(
        f: impl Fn(ArrayView2<f64>) -> Result<LossOutput>,
        logits: &Array2<f64>,
        tol: f64,
    ) {
        let analytic = f(log_softmax_rows(logits.view()).view()).unwrap().grad;
        let eps = 1e-6;
        for idx in ndarray::indices_of(logits) {
            let mut plus = logits.clone();
            plus[idx] += eps;
            let mut minus = logits.clone();
            minus[idx] -= eps;
            let lp = f(log_softmax_rows(plus.view()).view()).unwrap().loss;
            let lm = f(log_softmax_rows(minus.view()).view()).unwrap().loss;
            let numeric = (lp - lm) / (2.0 * eps);
            let a = analytic[idx];
            let rel = (a - numeric).abs() / (a.abs() + 1e-8);
            assert!(rel < tol || (a - numeric).abs() < 1e-9, "{idx:?}: {a} vs {numeric}");
        }
    }

    #[test]
    fn ctc_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let logits = Array2::from_shape_fn((5, 4), |_| rng.random_range(-2.0..2.0));
            let labels = LabelSequence::new(vec![1, 2, 2], 0).unwrap();
            check_logit_gradient(|lp| ctc_loss(lp, &labels), &logits, 1e-5);
        }
    }

    #[test]
    fn positive_loss_examples() {
        let lp = array![[0.1f64.ln(), 0.9f64.ln()]];
        let out = discriminative_positive_loss(lp.view()).unwrap();
        assert!((out.loss + 0.9f64.ln()).abs() < 1e-12);

        let lp = Array2::from_elem((2, 2), 0.5f64.ln());
        let out = discriminative_positive_loss(lp.view()).unwrap();
        assert!((out.loss + 0.75f64.ln()).abs() < 1e-12);

        let lp = array![[f64::NEG_INFINITY, 0.0], [f64::NEG_INFINITY, 0.0], [f64::NEG_INFINITY, 0.0]];
        assert_eq!(discriminative_positive_loss(lp.view()).unwrap().loss, 0.0);
    }

    #[test]
    fn positive_loss_is_two_class_ctc() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in 1..=6 {
            let lp = random_log_probs(t, 2, &mut rng);
            let a = discriminative_positive_loss(lp.view()).unwrap();
            let b = ctc_loss(lp.view(), &LabelSequence::new(vec![POSITIVE], NEGATIVE).unwrap()).unwrap();
            assert_eq!(a, b);
            let slow = brute_force_ctc(&lp, &[POSITIVE], NEGATIVE);
            assert!((a.loss - slow).abs() < 1e-10);
        }
    }

    #[test]
    fn negative_loss_examples() {
        let lp = array![[0.0, f64::NEG_INFINITY], [0.0, f64::NEG_INFINITY]];
        assert_eq!(discriminative_negative_loss(lp.view()).unwrap().loss, 0.0);

        let lp = Array2::from_elem((2, 2), 0.5f64.ln());
        let out = discriminative_negative_loss(lp.view()).unwrap();
        assert!((out.loss - 0.6931).abs() < 1e-4);

        let lp = array![[-200.0, 0.0], [-300.0, 0.0]];
        let out = discriminative_negative_loss(lp.view()).unwrap();
        assert!((out.loss + NEGATIVE_FLOOR.ln()).abs() < 1e-9);
        assert!(out.grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn discriminative_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = Array2::from_shape_fn((5, 2), |_| rng.random_range(-2.0..2.0));
        check_logit_gradient(discriminative_positive_loss, &logits, 1e-5);
        check_logit_gradient(discriminative_negative_loss, &logits, 1e-5);
    }

    fn item(rng: &mut ChaCha8Rng, target: Target) -> MtlItem {
        MtlItem {
            phonetic_logits: Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0)),
            disc_logits: Array2::from_shape_fn((4, 2), |_| rng.random_range(-1.0..1.0)),
            target,
        }
    }

    #[test]
    fn mtl_phonetic_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let labels = LabelSequence::new(vec![1, 2], 0).unwrap();
        let batch = vec![item(&mut rng, Target::Phonetic(labels.clone()))];
        let out = mtl_loss(&batch, 1.0).unwrap();
        let direct = ctc_loss(log_softmax_rows(batch[0].phonetic_logits.view()).view(), &labels).unwrap();
        assert_eq!(out.total, direct.loss);
        assert!(out.discriminative.is_none());
    }

    #[test]
    fn mtl_lambda_zero_silences_discriminative_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let labels = LabelSequence::new(vec![1], 0).unwrap();
        let batch = vec![
            item(&mut rng, Target::Phonetic(labels)),
            item(&mut rng, Target::Discriminative { positive: true }),
        ];
        let out = mtl_loss(&batch, 0.0).unwrap();
        assert!(out.grads.iter().all(|(_, d)| d.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn mtl_total_is_sum_of_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels = LabelSequence::new(vec![2, 1], 0).unwrap();
        let batch = vec![
            item(&mut rng, Target::Phonetic(labels.clone())),
            item(&mut rng, Target::Discriminative { positive: false }),
        ];
        let out = mtl_loss(&batch, 1.0).unwrap();
        let p = ctc_loss(log_softmax_rows(batch[0].phonetic_logits.view()).view(), &labels).unwrap().loss;
        let d = discriminative_negative_loss(log_softmax_rows(batch[1].disc_logits.view()).view())
            .unwrap()
            .loss;
        assert!((out.total - (p + d)).abs() < 1e-9);
    }

    #[test]
    fn mtl_rejects_empty_batch() {
        assert!(matches!(mtl_loss(&[], 1.0), Err(Error::EmptyBatch)));
    }

    #[test]
    fn losses_are_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for t in 1..8 {
            let lp = random_log_probs(t, 2, &mut rng);
            assert!(discriminative_positive_loss(lp.view()).unwrap().loss >= 0.0);
            assert!(discriminative_negative_loss(lp.view()).unwrap().loss >= 0.0);
        }
    }
}
