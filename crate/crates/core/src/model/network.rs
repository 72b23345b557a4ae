use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{padding, Init, ModelConfig, ShapePlan};
use crate::autodiff::{dropout_mask, lstm_bias, lstm_cell, uniform_init, BoundParams, Graph, LstmVars, ParamId, ParamSet, Var};
use crate::error::{AfnError, Result};
use crate::ism::MemoryBank;
use crate::sampler::ClipSample;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Parameter ids of every component, resolved once by name.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamIds {
    /// Per group, per layer.
    pub conv: Vec<Vec<DenseIds>>,
    pub reduce: [DenseIds; 2],
    pub embed: [DenseIds; 2],
    pub lstm_w_ih: ParamId,
    pub lstm_w_hh: ParamId,
    pub lstm_bias: ParamId,
    pub advisory: DenseIds,
    pub b_now: ParamId,
    pub b_next: ParamId,
    pub now: DenseIds,
    pub next: DenseIds,
    pub aux: [DenseIds; 3],
}

impl ParamIds {
    fn resolve<F: Real>(config: &ModelConfig, params: &ParamSet<F>) -> Result<Self> {
        let id = |name: &str| {
            params
                .id(name)
                .ok_or_else(|| AfnError::Lookup(format!("parameter `{name}` missing")))
        };
        let dense = |name: &str| -> Result<DenseIds> {
            Ok(DenseIds {
                weight: id(&format!("{name}.weight"))?,
                bias: id(&format!("{name}.bias"))?,
            })
        };
        let conv = config
            .conv_groups
            .iter()
            .enumerate()
            .map(|(gi, g)| (0..g.widths.len()).map(|li| dense(&format!("conv{gi}.{li}"))).collect())
            .collect::<Result<_>>()?;
        Ok(ParamIds {
            conv,
            reduce: [dense("reduce.0")?, dense("reduce.1")?],
            embed: [dense("embed.0")?, dense("embed.1")?],
            lstm_w_ih: id("lstm.w_ih")?,
            lstm_w_hh: id("lstm.w_hh")?,
            lstm_bias: id("lstm.bias")?,
            advisory: dense("advisory")?,
            b_now: id("b_now")?,
            b_next: id("b_next")?,
            now: dense("now")?,
            next: dense("next")?,
            aux: [dense("aux.0")?, dense("aux.1")?, dense("aux.2")?],
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub weight: Var,
    pub bias: Var,
}

impl Dense {
    fn apply<F: Real>(self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        g.linear(x, self.weight, self.bias)
    }
}

/// The model's parameters bound into one graph.
#[derive(Clone, Debug)]
pub struct ModelVars<'c> {
    config: &'c ModelConfig,
    pub conv: Vec<Vec<Dense>>,
    pub reduce: [Dense; 2],
    pub embed: [Dense; 2],
    pub lstm: LstmVars,
    pub advisory: Dense,
    pub b_now: Var,
    pub b_next: Var,
    pub now: Dense,
    pub next: Dense,
    pub aux: [Dense; 3],
}

impl<'c> ModelVars<'c> {
    pub fn new(config: &'c ModelConfig, ids: &ParamIds, bound: &BoundParams) -> Self {
        let d = |x: DenseIds| Dense {
            weight: bound.var(x.weight),
            bias: bound.var(x.bias),
        };
        ModelVars {
            config,
            conv: ids.conv.iter().map(|g| g.iter().map(|&x| d(x)).collect()).collect(),
            reduce: ids.reduce.map(d),
            embed: ids.embed.map(d),
            lstm: LstmVars {
                w_ih: bound.var(ids.lstm_w_ih),
                w_hh: bound.var(ids.lstm_w_hh),
                bias: bound.var(ids.lstm_bias),
            },
            advisory: d(ids.advisory),
            b_now: bound.var(ids.b_now),
            b_next: bound.var(ids.b_next),
            now: d(ids.now),
            next: d(ids.next),
            aux: ids.aux.map(d),
        }
    }

    /// `X [6, C, H, W]` to the feature map `M [C', D, h, w]`. `masks` holds
    /// one dropout mask per convolution output.
    pub fn features<F: Real>(&self, g: &mut Graph<'_, F>, x: Var, masks: Option<&[Tensor<F>]>) -> Result<Var> {
        let expect = [crate::sampler::FRAMES_PER_CLIP, self.config.input_channels, self.config.height, self.config.width];
        if g.shape(x) != expect {
            return Err(AfnError::dim("features", g.shape(x), &expect));
        }
        let mut cur = g.permute(x, &[1, 0, 2, 3])?;
        let mut layer = 0;
        for (group, layers) in self.config.conv_groups.iter().zip(&self.conv) {
            for conv in layers {
                cur = g.conv3d(cur, conv.weight, conv.bias, padding(group.kernel))?;
                cur = g.relu(cur)?;
                if let Some(masks) = masks {
                    cur = g.dropout(cur, &masks[layer])?;
                }
                layer += 1;
            }
            if let Some(window) = group.pool {
                cur = g.max_pool3d(cur, window)?;
            }
        }
        Ok(cur)
    }

    /// Two dense layers with a rectifier between: `M → L`.
    pub fn reduce<F: Real>(&self, g: &mut Graph<'_, F>, m: Var) -> Result<Var> {
        let flat = g.reshape(m, &[g.value(m).len()])?;
        let a = self.reduce[0].apply(g, flat)?;
        let a = g.relu(a)?;
        self.reduce[1].apply(g, a)
    }

    /// Activity embedding `u` of the reduced feature.
    pub fn embed<F: Real>(&self, g: &mut Graph<'_, F>, l: Var) -> Result<Var> {
        let a = self.embed[0].apply(g, l)?;
        let a = g.relu(a)?;
        self.embed[1].apply(g, a)
    }

    /// One LSTM step from `s_prev = [h; c]`. Returns `(h, c)`.
    pub fn recurrent_step<F: Real>(&self, g: &mut Graph<'_, F>, l: Var, s_prev: Var) -> Result<(Var, Var)> {
        let h = self.config.hidden;
        if g.value(s_prev).len() != 2 * h {
            return Err(AfnError::dim("recurrent_step", g.shape(s_prev), &[2 * h]));
        }
        let h_prev = g.slice(s_prev, 0, h)?;
        let c_prev = g.slice(s_prev, h, h)?;
        lstm_cell(g, l, h_prev, c_prev, self.lstm)
    }

    /// `W = vec⁻¹(fc([L, s_prev, u]))`, an `H x H` matrix.
    pub fn advisory<F: Real>(&self, g: &mut Graph<'_, F>, l: Var, s_prev: Var, u: Var) -> Result<Var> {
        let input = g.concat(&[l, s_prev, u])?;
        let v = self.advisory.apply(g, input)?;
        vec_inv(g, v, self.config.hidden)
    }

    /// `w = W h`.
    pub fn modulate<F: Real>(&self, g: &mut Graph<'_, F>, w_mat: Var, h: Var) -> Result<Var> {
        modulate(g, w_mat, h)
    }

    /// Current-action distribution.
    pub fn head_now<F: Real>(&self, g: &mut Graph<'_, F>, w: Var) -> Result<Var> {
        let shifted = g.add(w, self.b_now)?;
        let r = g.relu(shifted)?;
        let z = self.now.apply(g, r)?;
        g.softmax(z)
    }

    /// Next-action distribution over actions and END.
    pub fn head_next<F: Real>(&self, g: &mut Graph<'_, F>, w: Var, y_now: Var) -> Result<Var> {
        let shifted = g.add(w, self.b_next)?;
        let r = g.relu(shifted)?;
        let input = g.concat(&[r, y_now])?;
        let z = self.next.apply(g, input)?;
        g.softmax(z)
    }

    /// Direct classification of the feature map: three dense layers.
    pub fn head_aux<F: Real>(&self, g: &mut Graph<'_, F>, m: Var) -> Result<Var> {
        let mut a = g.reshape(m, &[g.value(m).len()])?;
        for (i, layer) in self.aux.iter().enumerate() {
            a = layer.apply(g, a)?;
            if i < 2 {
                a = g.relu(a)?;
            }
        }
        g.softmax(a)
    }

    /// The whole network for one clip.
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var, s_prev: Var, masks: Option<&[Tensor<F>]>) -> Result<ClipVars> {
        let m = self.features(g, x, masks)?;
        let l = self.reduce(g, m)?;
        let u = self.embed(g, l)?;
        let u_adv = if self.config.detach_embedding { g.detach(u) } else { u };
        let (h, c) = self.recurrent_step(g, l, s_prev)?;
        let s_new = g.concat(&[h, c])?;
        let w_mat = self.advisory(g, l, s_prev, u_adv)?;
        let w = self.modulate(g, w_mat, h)?;
        let y_now = self.head_now(g, w)?;
        let y_next = self.head_next(g, w, y_now)?;
        let aux = self.head_aux(g, m)?;
        Ok(ClipVars {
            x,
            m,
            l,
            u,
            s_prev,
            h,
            c,
            s_new,
            w_mat,
            w,
            y_now,
            y_next,
            aux,
        })
    }
}

/// Column-major inverse vectorisation: `W[r][c] = v[c * n + r]`.
pub fn vec_inv<F: Real>(g: &mut Graph<'_, F>, v: Var, n: usize) -> Result<Var> {
    let by_column = g.reshape(v, &[n, n])?;
    g.permute(by_column, &[1, 0])
}

pub fn modulate<F: Real>(g: &mut Graph<'_, F>, w_mat: Var, h: Var) -> Result<Var> {
    let n = g.value(h).len();
    let col = g.reshape(h, &[n, 1])?;
    let w = g.matmul(w_mat, col)?;
    g.reshape(w, &[n])
}

/// Graph handles of one clip's forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ClipVars {
    pub x: Var,
    pub m: Var,
    pub l: Var,
    pub u: Var,
    pub s_prev: Var,
    pub h: Var,
    pub c: Var,
    pub s_new: Var,
    pub w_mat: Var,
    pub w: Var,
    pub y_now: Var,
    pub y_next: Var,
    pub aux: Var,
}

/// Values of one clip's forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<F> {
    pub m: Tensor<F>,
    pub l: Tensor<F>,
    pub u: Tensor<F>,
    pub s_prev: Tensor<F>,
    pub s_new: Tensor<F>,
    pub w_mat: Tensor<F>,
    pub w: Tensor<F>,
    pub y_now: Tensor<F>,
    pub y_next: Tensor<F>,
    pub aux: Tensor<F>,
}

impl<F: Real> ForwardTrace<F> {
    pub fn from_graph(g: &Graph<'_, F>, v: &ClipVars) -> Self {
        ForwardTrace {
            m: g.value(v.m).clone(),
            l: g.value(v.l).clone(),
            u: g.value(v.u).clone(),
            s_prev: g.value(v.s_prev).clone(),
            s_new: g.value(v.s_new).clone(),
            w_mat: g.value(v.w_mat).clone(),
            w: g.value(v.w).clone(),
            y_now: g.value(v.y_now).clone(),
            y_next: g.value(v.y_next).clone(),
            aux: g.value(v.aux).clone(),
        }
    }

    /// `(min, max)` over every traced tensor, for numeric diagnostics.
    pub fn extrema(&self) -> Vec<(&'static str, f64, f64)> {
        let all = [
            ("M", &self.m),
            ("L", &self.l),
            ("u", &self.u),
            ("s_prev", &self.s_prev),
            ("s_new", &self.s_new),
            ("W", &self.w_mat),
            ("w", &self.w),
            ("y_now", &self.y_now),
            ("y_next", &self.y_next),
            ("aux", &self.aux),
        ];
        all.iter()
            .map(|(name, t)| {
                let xs = t.to_f64();
                let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (*name, lo, hi)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

/// Parameters and layout of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct AfnModel<F> {
    pub config: ModelConfig,
    pub params: ParamSet<F>,
    pub ids: ParamIds,
}

impl<F: Real> AfnModel<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let plan = config.shape_plan()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for p in &plan.params {
            let value = match p.init {
                Init::Uniform(fan_in) => uniform_init(&p.shape, fan_in, &mut rng),
                Init::Zeros => Tensor::zeros(&p.shape),
                Init::LstmBias => lstm_bias(config.hidden),
                Init::Identity => Tensor::eye(config.hidden).reshape(&p.shape)?,
            };
            params.add(p.name.clone(), value);
        }
        Self::from_params(config, params)
    }

    /// Wraps existing parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamSet<F>) -> Result<Self> {
        config.validate()?;
        let plan = config.shape_plan()?;
        if plan.params.len() != params.len() {
            return Err(AfnError::Invalid(format!(
                "expected {} parameter tensors, found {}",
                plan.params.len(),
                params.len()
            )));
        }
        for (spec, (name, value)) in plan.params.iter().zip(params.iter()) {
            if spec.name != name || spec.shape != value.shape() {
                return Err(AfnError::Invalid(format!(
                    "parameter `{name}` {:?} does not match `{}` {:?}",
                    value.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        let ids = ParamIds::resolve(&config, &params)?;
        Ok(AfnModel { config, params, ids })
    }

    pub fn shape_plan(&self) -> ShapePlan {
        self.config.shape_plan().expect("validated at construction")
    }

    pub fn state_width(&self) -> usize {
        2 * self.config.hidden
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a, F>) -> (ModelVars<'a>, BoundParams) {
        let bound = self.params.bind(g);
        (ModelVars::new(&self.config, &self.ids, &bound), bound)
    }

    /// One dropout mask per convolution output, or `None` when dropout is
    /// off.
    pub fn dropout_masks<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Option<Vec<Tensor<F>>>> {
        if self.config.dropout == 0.0 {
            return Ok(None);
        }
        let plan = self.shape_plan();
        plan.conv_outputs
            .iter()
            .map(|shape| dropout_mask(shape, self.config.dropout, rng))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Previous state for a clip: zero when memory is disabled.
    pub fn read_state(&self, clip: &ClipSample<F>, ism: &MemoryBank<F>) -> Result<Vec<F>> {
        if self.config.memory {
            ism.read_prev(clip.video, clip.t)
        } else {
            Ok(vec![F::zero(); self.state_width()])
        }
    }

    /// Forward pass of one clip without gradient bookkeeping by the caller.
    /// The new state is returned in the trace; writing it back is the
    /// caller's job.
    pub fn forward<R: Rng + ?Sized>(&self, clip: &ClipSample<F>, ism: &MemoryBank<F>, mode: Mode, rng: &mut R) -> Result<ForwardTrace<F>> {
        let s_prev = self.read_state(clip, ism)?;
        self.forward_with_state(&clip.x, s_prev, mode, rng)
    }

    pub fn forward_with_state<R: Rng + ?Sized>(&self, x: &Tensor<F>, s_prev: Vec<F>, mode: Mode, rng: &mut R) -> Result<ForwardTrace<F>> {
        let masks = match mode {
            Mode::Train => self.dropout_masks(rng)?,
            Mode::Inference => None,
        };
        let mut g = Graph::new();
        let (vars, _) = self.bind(&mut g);
        let x = g.input(x.clone());
        let s = g.input(Tensor::vector(s_prev));
        let clip = vars.forward(&mut g, x, s, masks.as_deref())?;
        Ok(ForwardTrace::from_graph(&g, &clip))
    }

    /// Copy at another precision.
    pub fn cast<G: Real>(&self) -> AfnModel<G> {
        let mut params = ParamSet::new();
        for (name, value) in self.params.iter() {
            params.add(name, value.cast());
        }
        AfnModel {
            config: self.config.clone(),
            params,
            ids: self.ids.clone(),
        }
    }
}
