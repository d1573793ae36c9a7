//! Two-head bidirectional LSTM.
//!
//! A stack of bidirectional LSTM layers feeds two affine+softmax heads from
//! the top layer: a phonetic head (CTC classes) and a two-unit
//! discriminative head (column 0 = negative class, column 1 = positive).
//!
//! All parameters live in one flat buffer described by a [`ParamLayout`];
//! gradients use the same layout, which keeps the optimizer, clipping,
//! serialization and finite-difference checks uniform.
//!
//! Gradient convention: [`Model::backward`] takes gradients with respect to
//! the pre-softmax logits of each head.

use std::fmt::Debug;
use std::ops::AddAssign;

use ndarray::linalg::general_mat_vec_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::log_softmax_rows;

pub trait Real:
    LinalgScalar + ScalarOperand + Float + FromPrimitive + Debug + Send + Sync + AddAssign + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_per_direction: usize,
    pub input_dim: usize,
    pub phonetic_classes: usize,
    pub discriminative_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            hidden_per_direction: 64,
            input_dim: 280,
            phonetic_classes: 23,
            discriminative_classes: 2,
        }
    }
}

impl ModelConfig {
    /// The four-layer, 256-unit configuration.
    pub fn full_scale(phonetic_classes: usize) -> Self {
        Self {
            num_layers: 4,
            hidden_per_direction: 256,
            input_dim: 280,
            phonetic_classes,
            discriminative_classes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0
            || self.hidden_per_direction == 0
            || self.input_dim == 0
            || self.phonetic_classes == 0
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.discriminative_classes != 2 {
            return Err(Error::Config("discriminative head must have exactly 2 classes".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Tensor directory over the flat parameter buffer.
///
/// Order: for each layer, forward then backward direction, each as
/// `w_x [4H × in]`, `w_h [4H × H]`, `b [4H]` with gates packed
/// input, forget, cell, output; then `head.phonetic.{w,b}` and
/// `head.disc.{w,b}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub tensors: Vec<TensorSpec>,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let h = cfg.hidden_per_direction;
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let spec = TensorSpec { name, shape, offset };
            offset += spec.len();
            tensors.push(spec);
        };
        for l in 0..cfg.num_layers {
            let input = if l == 0 { cfg.input_dim } else { 2 * h };
            for dir in ["fwd", "bwd"] {
                push(format!("lstm.{l}.{dir}.w_x"), vec![4 * h, input]);
                push(format!("lstm.{l}.{dir}.w_h"), vec![4 * h, h]);
                push(format!("lstm.{l}.{dir}.b"), vec![4 * h]);
            }
        }
        push("head.phonetic.w".into(), vec![cfg.phonetic_classes, 2 * h]);
        push("head.phonetic.b".into(), vec![cfg.phonetic_classes]);
        push("head.disc.w".into(), vec![cfg.discriminative_classes, 2 * h]);
        push("head.disc.b".into(), vec![cfg.discriminative_classes]);
        Self {
            total: offset,
            tensors,
        }
    }

    pub fn find(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn lstm(&self, layer: usize, dir: usize) -> [&TensorSpec; 3] {
        let base = (layer * 2 + dir) * 3;
        [&self.tensors[base], &self.tensors[base + 1], &self.tensors[base + 2]]
    }

    fn head(&self, disc: bool) -> [&TensorSpec; 2] {
        let n = self.tensors.len();
        let base = if disc { n - 2 } else { n - 4 };
        [&self.tensors[base], &self.tensors[base + 1]]
    }
}

fn view2<'a, F>(data: &'a [F], t: &TensorSpec) -> ArrayView2<'a, F> {
    ArrayView2::from_shape((t.shape[0], t.shape[1]), &data[t.range()]).expect("layout shape")
}

fn view1<'a, F>(data: &'a [F], t: &TensorSpec) -> ArrayView1<'a, F> {
    ArrayView1::from_shape(t.shape[0], &data[t.range()]).expect("layout shape")
}

fn view2_mut<'a, F>(data: &'a mut [F], t: &TensorSpec) -> ArrayViewMut2<'a, F> {
    ArrayViewMut2::from_shape((t.shape[0], t.shape[1]), &mut data[t.range()]).expect("layout shape")
}

fn view1_mut<'a, F>(data: &'a mut [F], t: &TensorSpec) -> ArrayViewMut1<'a, F> {
    ArrayViewMut1::from_shape(t.shape[0], &mut data[t.range()]).expect("layout shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub params: Vec<F>,
}

/// Head logits for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadLogits<F> {
    /// `[T × phonetic_classes]`
    pub phonetic: Array2<F>,
    /// `[T × 2]`
    pub discriminative: Array2<F>,
}

/// Per-frame softmax outputs of both heads, in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePosteriors {
    pub phonetic: Array2<f64>,
    /// Column [`NEGATIVE`] holds `y_t^n`, column [`POSITIVE`] holds `y_t^p`.
    pub discriminative: Array2<f64>,
}

pub const NEGATIVE: usize = 0;
pub const POSITIVE: usize = 1;

impl<F: Real> HeadLogits<F> {
    pub fn posteriors(&self) -> FramePosteriors {
        let to64 = |a: &Array2<F>| a.mapv(|v| v.to_f64().unwrap());
        FramePosteriors {
            phonetic: log_softmax_rows(to64(&self.phonetic).view()).mapv(f64::exp),
            discriminative: log_softmax_rows(to64(&self.discriminative).view()).mapv(f64::exp),
        }
    }
}

#[derive(Debug, Clone)]
struct DirectionCache<F> {
    /// Activated gates `[T × 4H]`: i, f, g, o.
    gates: Array2<F>,
    cell: Array2<F>,
    tanh_cell: Array2<F>,
    hidden: Array2<F>,
}

#[derive(Debug, Clone)]
struct LayerCache<F> {
    input: Array2<F>,
    dirs: [DirectionCache<F>; 2],
}

/// Activations saved by [`Model::forward_train`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    layers: Vec<LayerCache<F>>,
    top: Array2<F>,
}

impl<F: Real> Model<F> {
    /// Glorot-uniform weights, zero biases except forget gates at 1.0.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut params = vec![F::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden_per_direction;
        for t in &layout.tensors {
            let slot = &mut params[t.range()];
            if t.shape.len() == 2 {
                let (fan_out, fan_in) = (t.shape[0], t.shape[1]);
                let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for p in slot.iter_mut() {
                    *p = F::from_f64(rng.random_range(-r..r)).unwrap();
                }
            } else if t.name.starts_with("lstm.") {
                for p in &mut slot[h..2 * h] {
                    *p = F::one();
                }
            }
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<F>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.total {
            return Err(Error::Shape {
                what: "parameter buffer",
                expected: vec![layout.total],
                actual: vec![params.len()],
            });
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self
                .params
                .iter()
                .map(|v| G::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn tensor(&self, name: &str) -> Option<ndarray::ArrayViewD<'_, F>> {
        let t = self.layout.find(name)?;
        Some(ndarray::ArrayViewD::from_shape(t.shape.clone(), &self.params[t.range()]).unwrap())
    }

    fn check_input(&self, x: &ArrayView2<F>) -> Result<()> {
        if x.ncols() != self.config.input_dim || x.nrows() == 0 {
            return Err(Error::Shape {
                what: "model input",
                expected: vec![x.nrows().max(1), self.config.input_dim],
                actual: vec![x.nrows(), x.ncols()],
            });
        }
        Ok(())
    }

    /// Inference-mode forward pass.
    pub fn forward(&self, x: ArrayView2<F>) -> Result<HeadLogits<F>> {
        self.forward_train(x).map(|(out, _)| out)
    }

    /// Forward pass that also returns the activations needed by
    /// [`Model::backward`].
    pub fn forward_train(&self, x: ArrayView2<F>) -> Result<(HeadLogits<F>, ForwardCache<F>)> {
        self.check_input(&x)?;
        let h = self.config.hidden_per_direction;
        let t_len = x.nrows();
        let mut layers = Vec::with_capacity(self.config.num_layers);
        let mut input = x.to_owned();
        for l in 0..self.config.num_layers {
            let fwd = self.run_direction(input.view(), l, 0);
            let bwd = self.run_direction(input.view(), l, 1);
            let mut out = Array2::<F>::zeros((t_len, 2 * h));
            out.slice_mut(s![.., ..h]).assign(&fwd.hidden);
            out.slice_mut(s![.., h..]).assign(&bwd.hidden);
            layers.push(LayerCache {
                input,
                dirs: [fwd, bwd],
            });
            input = out;
        }
        let top = input;
        let head = |disc: bool| {
            let [w, b] = self.layout.head(disc);
            let mut logits = top.dot(&view2(&self.params, w).t());
            logits += &view1(&self.params, b);
            logits
        };
        let logits = HeadLogits {
            phonetic: head(false),
            discriminative: head(true),
        };
        Ok((logits, ForwardCache { layers, top }))
    }

    fn run_direction(&self, x: ArrayView2<F>, layer: usize, dir: usize) -> DirectionCache<F> {
        let [wx, wh, b] = self.layout.lstm(layer, dir);
        let (wx, wh, b) = (view2(&self.params, wx), view2(&self.params, wh), view1(&self.params, b));
        let h = self.config.hidden_per_direction;
        let t_len = x.nrows();
        let mut pre = x.dot(&wx.t());
        pre += &b;
        let mut gates = Array2::<F>::zeros((t_len, 4 * h));
        let mut cell = Array2::<F>::zeros((t_len, h));
        let mut tanh_cell = Array2::<F>::zeros((t_len, h));
        let mut hidden = Array2::<F>::zeros((t_len, h));
        let mut h_prev = Array1::<F>::zeros(h);
        let mut c_prev = Array1::<F>::zeros(h);
        for step in 0..t_len {
            let t = if dir == 0 { step } else { t_len - 1 - step };
            let mut a = pre.row(t).to_owned();
            general_mat_vec_mul(F::one(), &wh, &h_prev, F::one(), &mut a);
            let mut g_row = gates.row_mut(t);
            for k in 0..h {
                let i = sigmoid(a[k]);
                let f = sigmoid(a[h + k]);
                let g = a[2 * h + k].tanh();
                let o = sigmoid(a[3 * h + k]);
                let c = f * c_prev[k] + i * g;
                let tc = c.tanh();
                g_row[k] = i;
                g_row[h + k] = f;
                g_row[2 * h + k] = g;
                g_row[3 * h + k] = o;
                cell[[t, k]] = c;
                tanh_cell[[t, k]] = tc;
                hidden[[t, k]] = o * tc;
            }
            h_prev.assign(&hidden.row(t));
            c_prev.assign(&cell.row(t));
        }
        DirectionCache {
            gates,
            cell,
            tanh_cell,
            hidden,
        }
    }

    /// Parameter gradients given gradients w.r.t. both heads' logits.
    pub fn backward(
        &self,
        cache: &ForwardCache<F>,
        d_phonetic: ArrayView2<F>,
        d_discriminative: ArrayView2<F>,
    ) -> Result<Vec<F>> {
        let mut grads = vec![F::zero(); self.layout.total];
        self.backward_into(cache, d_phonetic, d_discriminative, &mut grads)?;
        Ok(grads)
    }

    /// Like [`Model::backward`] but accumulates into `grads`.
    pub fn backward_into(
        &self,
        cache: &ForwardCache<F>,
        d_phonetic: ArrayView2<F>,
        d_discriminative: ArrayView2<F>,
        grads: &mut [F],
    ) -> Result<()> {
        let t_len = cache.top.nrows();
        let expect = |what: &'static str, g: &ArrayView2<F>, cols: usize| -> Result<()> {
            if g.dim() != (t_len, cols) {
                return Err(Error::Shape {
                    what,
                    expected: vec![t_len, cols],
                    actual: vec![g.nrows(), g.ncols()],
                });
            }
            Ok(())
        };
        expect("phonetic logit gradient", &d_phonetic, self.config.phonetic_classes)?;
        expect("discriminative logit gradient", &d_discriminative, self.config.discriminative_classes)?;
        if grads.len() != self.layout.total {
            return Err(Error::Shape {
                what: "gradient buffer",
                expected: vec![self.layout.total],
                actual: vec![grads.len()],
            });
        }

        let mut d_top = Array2::<F>::zeros(cache.top.raw_dim());
        for (disc, d_logits) in [(false, d_phonetic), (true, d_discriminative)] {
            let [w, b] = self.layout.head(disc);
            view2_mut(grads, w).scaled_add(F::one(), &d_logits.t().dot(&cache.top));
            view1_mut(grads, b).scaled_add(F::one(), &d_logits.sum_axis(Axis(0)));
            d_top.scaled_add(F::one(), &d_logits.dot(&view2(&self.params, w)));
        }

        let h = self.config.hidden_per_direction;
        let mut d_out = d_top;
        for l in (0..self.config.num_layers).rev() {
            let layer = &cache.layers[l];
            let mut d_input = Array2::<F>::zeros(layer.input.raw_dim());
            for dir in 0..2 {
                let d_hidden = if dir == 0 {
                    d_out.slice(s![.., ..h])
                } else {
                    d_out.slice(s![.., h..])
                };
                self.backward_direction(l, dir, &layer.input, &layer.dirs[dir], d_hidden, grads, &mut d_input);
            }
            d_out = d_input;
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_direction(
        &self,
        layer: usize,
        dir: usize,
        input: &Array2<F>,
        cache: &DirectionCache<F>,
        d_hidden: ArrayView2<F>,
        grads: &mut [F],
        d_input: &mut Array2<F>,
    ) {
        let [wx_spec, wh_spec, b_spec] = self.layout.lstm(layer, dir);
        let wx = view2(&self.params, wx_spec);
        let wh = view2(&self.params, wh_spec);
        let h = self.config.hidden_per_direction;
        let t_len = input.nrows();
        let one = F::one();

        let mut d_pre = Array2::<F>::zeros((t_len, 4 * h));
        let mut h_prev_mat = Array2::<F>::zeros((t_len, h));
        let mut dh_next = Array1::<F>::zeros(h);
        let mut dc_next = Array1::<F>::zeros(h);
        for step in (0..t_len).rev() {
            let t = if dir == 0 { step } else { t_len - 1 - step };
            let prev = if step == 0 {
                None
            } else if dir == 0 {
                Some(t - 1)
            } else {
                Some(t + 1)
            };
            if let Some(p) = prev {
                h_prev_mat.row_mut(t).assign(&cache.hidden.row(p));
            }
            let gates = cache.gates.row(t);
            let mut row = d_pre.row_mut(t);
            for k in 0..h {
                let (i, f, g, o) = (gates[k], gates[h + k], gates[2 * h + k], gates[3 * h + k]);
                let tc = cache.tanh_cell[[t, k]];
                let c_prev = prev.map_or(F::zero(), |p| cache.cell[[p, k]]);
                let dh = d_hidden[[t, k]] + dh_next[k];
                let d_o = dh * tc;
                let dc = dh * o * (one - tc * tc) + dc_next[k];
                dc_next[k] = dc * f;
                row[k] = dc * g * i * (one - i);
                row[h + k] = dc * c_prev * f * (one - f);
                row[2 * h + k] = dc * i * (one - g * g);
                row[3 * h + k] = d_o * o * (one - o);
            }
            dh_next.fill(F::zero());
            general_mat_vec_mul(one, &wh.t(), &d_pre.row(t), F::zero(), &mut dh_next);
        }
        view2_mut(grads, wx_spec).scaled_add(one, &d_pre.t().dot(input));
        view2_mut(grads, wh_spec).scaled_add(one, &d_pre.t().dot(&h_prev_mat));
        view1_mut(grads, b_spec).scaled_add(one, &d_pre.sum_axis(Axis(0)));
        d_input.scaled_add(one, &d_pre.dot(&wx));
    }
}

#[inline]
fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}
