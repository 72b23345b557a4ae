use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv3dGeometry, PoolGeometry};
use crate::error::{AfnError, Result};
use crate::sampler::FRAMES_PER_CLIP;

/// Consecutive 3-D convolutions (each followed by a rectifier) and an
/// optional max pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvGroupConfig {
    /// Output channels of each convolution in the group.
    pub widths: Vec<usize>,
    /// `[depth, height, width]`; padding is `kernel / 2` on every axis.
    pub kernel: [usize; 3],
    pub pool: Option<[usize; 3]>,
}

impl ConvGroupConfig {
    pub fn new(widths: &[usize], pool: Option<[usize; 3]>) -> Self {
        ConvGroupConfig {
            widths: widths.to_vec(),
            kernel: [3, 3, 3],
            pool,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub height: usize,
    pub width: usize,
    pub conv_groups: Vec<ConvGroupConfig>,
    /// Width of the first reducer layer.
    pub reduce_hidden: usize,
    /// `D_L`, width of the reduced feature.
    pub latent: usize,
    /// `H`, recurrent width.
    pub hidden: usize,
    pub embed_hidden: usize,
    /// `E`, width of the activity embedding.
    pub embed: usize,
    pub aux_hidden: [usize; 2],
    /// Number of action classes, END excluded.
    pub actions: usize,
    /// Dropout on the convolutional activations during training.
    pub dropout: f64,
    /// When false the previous state is always read as zero.
    pub memory: bool,
    /// Stops gradients of the main loss from reaching the embedder.
    pub detach_embedding: bool,
}

impl ModelConfig {
    /// Desk profile: 16x16 input, two conv groups ending in 64 channels on
    /// a 2x2 grid.
    pub fn desk(actions: usize) -> Self {
        ModelConfig {
            input_channels: 7,
            height: 16,
            width: 16,
            conv_groups: vec![
                ConvGroupConfig::new(&[32], Some([2, 2, 2])),
                ConvGroupConfig::new(&[64], Some([3, 4, 4])),
            ],
            reduce_hidden: 128,
            latent: 64,
            hidden: 32,
            embed_hidden: 32,
            embed: 16,
            aux_hidden: [128, 64],
            actions,
            dropout: 0.6,
            memory: true,
            detach_embedding: false,
        }
    }

    /// Full-size layout: 112x112x7 input through a C3D-like conv/pool
    /// schedule to 7x7x512. Only used for shape planning.
    pub fn paper_shape(actions: usize) -> Self {
        ModelConfig {
            input_channels: 7,
            height: 112,
            width: 112,
            conv_groups: vec![
                ConvGroupConfig::new(&[64], Some([1, 2, 2])),
                ConvGroupConfig::new(&[128], Some([2, 2, 2])),
                ConvGroupConfig::new(&[256, 256], Some([2, 2, 2])),
                ConvGroupConfig::new(&[512, 512], Some([1, 2, 2])),
                ConvGroupConfig::new(&[512, 512], None),
            ],
            reduce_hidden: 2048,
            latent: 512,
            hidden: 256,
            embed_hidden: 256,
            embed: 64,
            aux_hidden: [2048, 512],
            actions,
            dropout: 0.6,
            memory: true,
            detach_embedding: false,
        }
    }

    /// Small layout for quick learning runs on `height x width` frames
    /// (both even): the feature map collapses to a single cell.
    pub fn compact(input_channels: usize, height: usize, width: usize, actions: usize) -> Self {
        ModelConfig {
            input_channels,
            height,
            width,
            conv_groups: vec![
                ConvGroupConfig::new(&[4], Some([2, 2, 2])),
                ConvGroupConfig::new(&[16], Some([3, (height / 2).max(1), (width / 2).max(1)])),
            ],
            reduce_hidden: 32,
            latent: 24,
            hidden: 16,
            embed_hidden: 16,
            embed: 8,
            aux_hidden: [32, 16],
            actions,
            dropout: 0.0,
            memory: true,
            detach_embedding: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.input_channels", self.input_channels),
            ("model.height", self.height),
            ("model.width", self.width),
            ("model.reduce_hidden", self.reduce_hidden),
            ("model.latent", self.latent),
            ("model.hidden", self.hidden),
            ("model.embed_hidden", self.embed_hidden),
            ("model.embed", self.embed),
            ("model.aux_hidden", self.aux_hidden[0].min(self.aux_hidden[1])),
            ("model.actions", self.actions),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(AfnError::config(field, "must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(AfnError::config("model.dropout", "must be in [0, 1)"));
        }
        if self.conv_groups.is_empty() || self.conv_groups.iter().any(|g| g.widths.is_empty() || g.widths.contains(&0)) {
            return Err(AfnError::config("model.conv_groups", "need at least one group of positive widths"));
        }
        self.shape_plan().map(|_| ())
    }

    /// Propagates shapes through the whole network without allocating any
    /// parameter or activation.
    pub fn shape_plan(&self) -> Result<ShapePlan> {
        let x = vec![FRAMES_PER_CLIP, self.input_channels, self.height, self.width];
        let mut cur = vec![self.input_channels, FRAMES_PER_CLIP, self.height, self.width];
        let mut conv_outputs = Vec::new();
        let mut params = Vec::new();
        for (gi, group) in self.conv_groups.iter().enumerate() {
            for (li, &w) in group.widths.iter().enumerate() {
                let k = group.kernel;
                let weight = [w, cur[0], k[0], k[1], k[2]];
                let geom = Conv3dGeometry::new(&cur, &weight, &[w], padding(k))
                    .map_err(|_| AfnError::config("model.conv_groups", format!("group {gi} does not fit {cur:?}")))?;
                params.push(ParamShape::new(format!("conv{gi}.{li}.weight"), &weight, Init::Uniform(cur[0] * k.iter().product::<usize>())));
                params.push(ParamShape::new(format!("conv{gi}.{li}.bias"), &[w], Init::Zeros));
                cur = geom.output_shape();
                conv_outputs.push(cur.clone());
            }
            if let Some(window) = group.pool {
                let geom = PoolGeometry::new(&cur, window)
                    .map_err(|_| AfnError::config("model.conv_groups", format!("pool of group {gi} empties {cur:?}")))?;
                cur = geom.output_shape();
            }
        }
        let flat: usize = cur.iter().product();
        let (h, dl, e) = (self.hidden, self.latent, self.embed);
        let k = self.actions;
        let mut dense = |name: &str, n_in: usize, n_out: usize| {
            params.push(ParamShape::new(format!("{name}.weight"), &[n_out, n_in], Init::Uniform(n_in)));
            params.push(ParamShape::new(format!("{name}.bias"), &[n_out], Init::Zeros));
        };
        dense("reduce.0", flat, self.reduce_hidden);
        dense("reduce.1", self.reduce_hidden, dl);
        dense("embed.0", dl, self.embed_hidden);
        dense("embed.1", self.embed_hidden, e);
        dense("now", h, k);
        dense("next", h + k, k + 1);
        dense("aux.0", flat, self.aux_hidden[0]);
        dense("aux.1", self.aux_hidden[0], self.aux_hidden[1]);
        dense("aux.2", self.aux_hidden[1], k);
        params.push(ParamShape::new("lstm.w_ih", &[4 * h, dl], Init::Uniform(dl)));
        params.push(ParamShape::new("lstm.w_hh", &[4 * h, h], Init::Uniform(h)));
        params.push(ParamShape::new("lstm.bias", &[4 * h], Init::LstmBias));
        let advisory_in = dl + 2 * h + e;
        params.push(ParamShape::new("advisory.weight", &[h * h, advisory_in], Init::Zeros));
        params.push(ParamShape::new("advisory.bias", &[h * h], Init::Identity));
        params.push(ParamShape::new("b_now", &[h], Init::Zeros));
        params.push(ParamShape::new("b_next", &[h], Init::Zeros));
        Ok(ShapePlan {
            x,
            conv_outputs,
            m: cur,
            flat,
            latent: dl,
            hidden: h,
            state_width: 2 * h,
            embed: e,
            advisory_in,
            w_matrix: [h, h],
            y_now: k,
            y_next: k + 1,
            aux: k,
            params,
        })
    }
}

pub(crate) fn padding(kernel: [usize; 3]) -> [usize; 3] {
    [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2]
}

/// Initialisation rule of one parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    Uniform(usize),
    Zeros,
    /// Forget-gate slice 1, the rest 0.
    LstmBias,
    /// Column-major vectorisation of the identity.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamShape {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamShape {
    fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamShape {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

/// Every tensor shape of one forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapePlan {
    /// `[6, C, H, W]`
    pub x: Vec<usize>,
    /// `[C, D, H, W]` after each convolution, before pooling.
    pub conv_outputs: Vec<Vec<usize>>,
    /// Feature map `[C, D, h, w]`.
    pub m: Vec<usize>,
    pub flat: usize,
    pub latent: usize,
    pub hidden: usize,
    pub state_width: usize,
    pub embed: usize,
    pub advisory_in: usize,
    pub w_matrix: [usize; 2],
    pub y_now: usize,
    pub y_next: usize,
    pub aux: usize,
    pub params: Vec<ParamShape>,
}

impl ShapePlan {
    /// Feature map as `[h, w, channels]`, folding any remaining depth into
    /// the channels.
    pub fn m_hwc(&self) -> [usize; 3] {
        [self.m[2], self.m[3], self.m[0] * self.m[1]]
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }
}
