//! The text-conditioned 3D U-Net denoiser and the convolutional autoencoder
//! for the latent path.
//!
//! The U-Net follows a three-level layout with a deepened bottleneck
//! (2 + `bottleneck_extra_blocks` residual blocks), dropout restricted to
//! spatial extents at or below `dropout_min_resolution`, and cross-attention
//! against the prompt embedding at every configured resolution. Residual
//! blocks are norm -> SiLU -> conv, twice, with the timestep embedding added
//! after the first conv. Convolutions carry no bias; the shift of the
//! following normalization covers it.

use crate::conditioning::Vocabulary;
use crate::error::{Error, Result};
use crate::optim::{BoundParams, ParamStore};
use crate::rng::CounterRng;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

/// Sinusoidal timestep embedding: interleaved sin/cos at geometrically spaced
/// frequencies. Injective over [0,1] because the lowest-frequency cosine is
/// monotone there.
pub fn timestep_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::invalid(format!(
            "timestep_embedding: dim {dim} must be even and positive"
        )));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let exponent = if half > 1 {
            i as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let omega = std::f64::consts::PI * 1000f64.powf(exponent);
        out[2 * i] = (t * omega).sin();
        out[2 * i + 1] = (t * omega).cos();
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He-style fan-in scaling for convs feeding nonlinearities.
    Conv,
    /// 1/sqrt(fan_in) for projections.
    Proj,
    /// Small nonzero scale for the output conv: keeps the initial prediction
    /// near zero without severing gradient flow.
    SmallOutput,
    Ones,
    Zeros,
    /// Unit normal rows for the embedding table.
    Embedding,
    Const(f64),
    /// Bias ladder -gain*(i+0.5)/n: with a constant-gain 1x1 conv in front,
    /// the following nonlinearity turns the channels into soft intensity
    /// bins.
    ThresholdLadder(f64),
    /// Paired bias ladder for unit-height ramp indicators: channel 2j gets
    /// -gain*t_j and channel 2j+1 gets -gain*t_j - 1, with thresholds
    /// t_j = top*(j+1)/(n/2). Differencing the pair after a ReLU yields
    /// min(relu(gain*(v - t_j)), 1), a per-voxel indicator that is
    /// insensitive to how far the intensity sits above the threshold.
    PairedThresholdLadder { gain: f64, top: f64 },
    /// Conv kernel whose first cin output channels sum their matching input
    /// channel over the window (mass-preserving pooling); remaining output
    /// channels get fan-in-scaled random weights.
    ConvBoxPassthrough,
    /// Conv kernel whose first cin/2 output channels sum the difference of
    /// input pair (2j, 2j+1) over the window, turning paired ramp channels
    /// into windowed indicator counts; remaining channels are random.
    ConvBoxCount,
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn init_tensor(spec: &ParamSpec, rng: &mut CounterRng) -> Tensor {
    let numel: usize = spec.shape.iter().product();
    match spec.init {
        Init::Ones => Tensor::full(&spec.shape, 1.0),
        Init::Zeros => Tensor::zeros(&spec.shape),
        Init::Const(v) => Tensor::full(&spec.shape, v),
        Init::ThresholdLadder(gain) => Tensor::from_fn(&spec.shape, |i| {
            -gain * (i as f64 + 0.5) / numel as f64
        }),
        Init::PairedThresholdLadder { gain, top } => {
            let pairs = numel / 2;
            Tensor::from_fn(&spec.shape, |i| {
                let t = top * ((i / 2) as f64 + 1.0) / pairs as f64;
                -gain * t - if i % 2 == 1 { 1.0 } else { 0.0 }
            })
        }
        Init::Embedding => Tensor::new(&spec.shape, rng.normal_vec(numel)).unwrap(),
        Init::ConvBoxCount => {
            let (cout, cin, k) = (spec.shape[0], spec.shape[1], spec.shape[2]);
            let taps = k * k * k;
            let pairs = cin / 2;
            let fan_in = cin * taps;
            let std = (2.0 / fan_in as f64).sqrt();
            let mut data = vec![0.0; numel];
            for co in 0..cout {
                if co < pairs {
                    for t in 0..taps {
                        data[(co * cin + 2 * co) * taps + t] = 1.0;
                        data[(co * cin + 2 * co + 1) * taps + t] = -1.0;
                    }
                } else {
                    for ci in 0..cin {
                        for t in 0..taps {
                            data[(co * cin + ci) * taps + t] = std * rng.normal();
                        }
                    }
                }
            }
            Tensor::new(&spec.shape, data).unwrap()
        }
        Init::ConvBoxPassthrough => {
            let (cout, cin, k) = (spec.shape[0], spec.shape[1], spec.shape[2]);
            let taps = k * k * k;
            let fan_in = cin * taps;
            let std = (2.0 / fan_in as f64).sqrt();
            let mut data = vec![0.0; numel];
            for co in 0..cout {
                if co < cin {
                    for t in 0..taps {
                        data[(co * cin + co) * taps + t] = 1.0;
                    }
                } else {
                    for ci in 0..cin {
                        for t in 0..taps {
                            data[(co * cin + ci) * taps + t] = std * rng.normal();
                        }
                    }
                }
            }
            Tensor::new(&spec.shape, data).unwrap()
        }
        Init::Conv | Init::Proj | Init::SmallOutput => {
            let fan_in: usize = spec.shape[1..].iter().product::<usize>().max(1);
            let std = match spec.init {
                Init::Conv => (2.0 / fan_in as f64).sqrt(),
                Init::Proj => (1.0 / fan_in as f64).sqrt(),
                Init::SmallOutput => 0.01,
                _ => unreachable!(),
            };
            let data = rng.normal_vec(numel).iter().map(|v| v * std).collect();
            Tensor::new(&spec.shape, data).unwrap()
        }
    }
}

/// Initialize a parameter store from specs, in spec order, from one stream.
pub fn init_params(specs: &[ParamSpec], seed: u64) -> ParamStore {
    let mut rng = CounterRng::new(seed).split(0x494E4954); // "INIT"
    let mut store = ParamStore::new();
    for spec in specs {
        store.insert(spec.name.clone(), init_tensor(spec, &mut rng));
    }
    store
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Cubic spatial extent of the operating space.
    pub input_extent: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub bottleneck_extra_blocks: usize,
    pub dropout_rate: f64,
    /// Dropout applies only at spatial extents <= this.
    pub dropout_min_resolution: usize,
    pub cross_attention_resolutions: Vec<usize>,
    pub embed_dim: usize,
}

impl UNetConfig {
    /// Defaults for the wavelet path: an 8-subband 16^3 stack.
    pub fn wavelet_space(source_channels: usize) -> Self {
        UNetConfig {
            in_channels: 8 * source_channels,
            input_extent: 16,
            ..Self::base()
        }
    }

    /// Defaults for the latent path: a 4-channel 8^3 grid.
    pub fn latent_space(latent_channels: usize) -> Self {
        UNetConfig {
            in_channels: latent_channels,
            input_extent: 8,
            ..Self::base()
        }
    }

    fn base() -> Self {
        UNetConfig {
            in_channels: 1,
            input_extent: 16,
            base_channels: 16,
            channel_mults: vec![1, 2, 4],
            bottleneck_extra_blocks: 2,
            dropout_rate: 0.1,
            dropout_min_resolution: 8,
            cross_attention_resolutions: vec![8, 4],
            embed_dim: 32,
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    /// Spatial extents realized by the level structure.
    pub fn realized_resolutions(&self) -> Vec<usize> {
        (0..self.levels()).map(|i| self.input_extent >> i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::invalid("unet: channel counts must be >= 1"));
        }
        if self.channel_mults.is_empty() || self.channel_mults.iter().any(|&m| m == 0) {
            return Err(Error::invalid("unet: channel_mults must be nonempty positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!(
                "unet: dropout_rate {} not in [0,1)",
                self.dropout_rate
            )));
        }
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return Err(Error::invalid("unet: embed_dim must be even and positive"));
        }
        let down_factor = 1usize << (self.levels() - 1);
        if self.input_extent % down_factor != 0 || self.input_extent >> (self.levels() - 1) == 0 {
            return Err(Error::shape(format!(
                "unet: input extent {} not divisible by 2^{}",
                self.input_extent,
                self.levels() - 1
            )));
        }
        let realized = self.realized_resolutions();
        for &r in &self.cross_attention_resolutions {
            if !realized.contains(&r) {
                return Err(Error::invalid(format!(
                    "unet: cross-attention resolution {r} not among realized resolutions {realized:?}"
                )));
            }
        }
        Ok(())
    }

    fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    fn attends_at(&self, resolution: usize) -> bool {
        self.cross_attention_resolutions.contains(&resolution)
    }

    fn dropout_at(&self, resolution: usize) -> bool {
        self.dropout_rate > 0.0 && resolution <= self.dropout_min_resolution
    }
}

/// Execution record used by tests to verify dropout locality, attention
/// placement and bottleneck depth.
#[derive(Debug, Default, Clone)]
pub struct ForwardTrace {
    pub dropout_resolutions: Vec<usize>,
    pub attention_resolutions: Vec<usize>,
    pub bottleneck_blocks: usize,
}

pub struct UNet {
    pub config: UNetConfig,
}

fn resblock_specs(specs: &mut Vec<ParamSpec>, name: &str, cin: usize, cout: usize, embed: usize) {
    let mut push = |suffix: &str, shape: Vec<usize>, init: Init| {
        specs.push(ParamSpec {
            name: format!("{name}.{suffix}"),
            shape,
            init,
        })
    };
    push("norm1.g", vec![cin], Init::Ones);
    push("norm1.b", vec![cin], Init::Zeros);
    push("conv1.w", vec![cout, cin, 3, 3, 3], Init::Conv);
    push("emb.w", vec![embed, cout], Init::Proj);
    push("emb.b", vec![cout], Init::Zeros);
    push("norm2.g", vec![cout], Init::Ones);
    push("norm2.b", vec![cout], Init::Zeros);
    push("conv2.w", vec![cout, cout, 3, 3, 3], Init::Conv);
    if cin != cout {
        push("skip.w", vec![cout, cin, 1, 1, 1], Init::Proj);
    }
}

fn attn_specs(specs: &mut Vec<ParamSpec>, name: &str, c: usize, e: usize) {
    let mut push = |suffix: &str, shape: Vec<usize>, init: Init| {
        specs.push(ParamSpec {
            name: format!("{name}.{suffix}"),
            shape,
            init,
        })
    };
    push("norm.g", vec![c], Init::Ones);
    push("norm.b", vec![c], Init::Zeros);
    push("q.w", vec![c, e], Init::Proj);
    push("k.w", vec![e, e], Init::Proj);
    push("k.b", vec![e], Init::Zeros);
    push("v.w", vec![e, e], Init::Proj);
    push("v.b", vec![e], Init::Zeros);
    push("out.w", vec![e, c], Init::Proj);
}

impl UNet {
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        Ok(UNet { config })
    }

    /// Number of residual blocks in the bottleneck.
    pub fn bottleneck_blocks(&self) -> usize {
        2 + self.config.bottleneck_extra_blocks
    }

    /// Full parameter layout. A pure function of the config.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let cfg = &self.config;
        let levels = cfg.levels();
        let embed = cfg.embed_dim;
        let mut specs = Vec::new();

        // Timestep embedding MLP shared across blocks.
        specs.push(ParamSpec {
            name: "time.fc1.w".into(),
            shape: vec![embed, embed],
            init: Init::Proj,
        });
        specs.push(ParamSpec {
            name: "time.fc1.b".into(),
            shape: vec![embed],
            init: Init::Zeros,
        });
        specs.push(ParamSpec {
            name: "time.fc2.w".into(),
            shape: vec![embed, embed],
            init: Init::Proj,
        });
        specs.push(ParamSpec {
            name: "time.fc2.b".into(),
            shape: vec![embed],
            init: Init::Zeros,
        });

        specs.push(ParamSpec {
            name: "stem.w".into(),
            shape: vec![cfg.level_channels(0), cfg.in_channels, 3, 3, 3],
            init: Init::Conv,
        });

        for i in 0..levels - 1 {
            let c = cfg.level_channels(i);
            let r = cfg.input_extent >> i;
            resblock_specs(&mut specs, &format!("down{i}.res"), c, c, embed);
            if cfg.attends_at(r) {
                attn_specs(&mut specs, &format!("down{i}.attn"), c, embed);
            }
            specs.push(ParamSpec {
                name: format!("down{i}.down.w"),
                shape: vec![cfg.level_channels(i + 1), c, 3, 3, 3],
                init: Init::Conv,
            });
        }

        let cb = cfg.level_channels(levels - 1);
        let rb = cfg.input_extent >> (levels - 1);
        for j in 0..self.bottleneck_blocks() {
            resblock_specs(&mut specs, &format!("mid{j}.res"), cb, cb, embed);
            if j == 0 && cfg.attends_at(rb) {
                attn_specs(&mut specs, "mid.attn", cb, embed);
            }
        }

        for i in (0..levels - 1).rev() {
            let c = cfg.level_channels(i);
            let c_above = cfg.level_channels(i + 1);
            let r = cfg.input_extent >> i;
            specs.push(ParamSpec {
                name: format!("up{i}.up.w"),
                shape: vec![c, c_above, 3, 3, 3],
                init: Init::Conv,
            });
            resblock_specs(&mut specs, &format!("up{i}.res"), 2 * c, c, embed);
            if cfg.attends_at(r) {
                attn_specs(&mut specs, &format!("up{i}.attn"), c, embed);
            }
        }

        specs.push(ParamSpec {
            name: "out.norm.g".into(),
            shape: vec![cfg.level_channels(0)],
            init: Init::Ones,
        });
        specs.push(ParamSpec {
            name: "out.norm.b".into(),
            shape: vec![cfg.level_channels(0)],
            init: Init::Zeros,
        });
        specs.push(ParamSpec {
            name: "out.conv.w".into(),
            shape: vec![cfg.in_channels, cfg.level_channels(0), 3, 3, 3],
            init: Init::SmallOutput,
        });
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }

    fn resblock(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        name: &str,
        x: ValueId,
        emb: ValueId,
        cin: usize,
        cout: usize,
        resolution: usize,
        training: bool,
        rng: &mut CounterRng,
        trace: &mut ForwardTrace,
    ) -> Result<ValueId> {
        let cfg = &self.config;
        let p = |s: &str| bound.id(&format!("{name}.{s}"));
        let mut h = tape.channel_norm(x, p("norm1.g"), p("norm1.b"), 1e-5)?;
        h = tape.silu(h);
        h = tape.conv3d(h, p("conv1.w"), 1, 1)?;
        let embp = tape.linear(emb, p("emb.w"), p("emb.b"))?;
        let embp = tape.reshape(embp, &[cout])?;
        h = tape.add_channel_bias(h, embp)?;
        h = tape.channel_norm(h, p("norm2.g"), p("norm2.b"), 1e-5)?;
        h = tape.silu(h);
        if training && cfg.dropout_at(resolution) {
            trace.dropout_resolutions.push(resolution);
            h = tape.dropout(h, cfg.dropout_rate, rng, true)?;
        }
        h = tape.conv3d(h, p("conv2.w"), 1, 1)?;
        let skip = if cin == cout {
            x
        } else {
            tape.conv3d(x, p("skip.w"), 1, 0)?
        };
        tape.add(h, skip)
    }

    fn attn_block(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        name: &str,
        x: ValueId,
        cond: ValueId,
        resolution: usize,
        trace: &mut ForwardTrace,
    ) -> Result<ValueId> {
        let p = |s: &str| bound.id(&format!("{name}.{s}"));
        let (batch, ..) = tape.value(x).dims5()?;
        let h = tape.channel_norm(x, p("norm.g"), p("norm.b"), 1e-5)?;
        let q = tape.proj_channels_to_seq(h, p("q.w"))?;
        let condb = tape.broadcast_to_batch(cond, batch)?;
        let k = tape.linear(condb, p("k.w"), p("k.b"))?;
        let v = tape.linear(condb, p("v.w"), p("v.b"))?;
        let a = tape.attention(q, k, v)?;
        let o = tape.proj_seq_to_channels(a, p("out.w"), [resolution, resolution, resolution])?;
        trace.attention_resolutions.push(resolution);
        tape.add(x, o)
    }

    /// Run the denoiser on a tape. `x` is [B, in_channels, r, r, r] with
    /// r == input_extent; `cond` is an embedding sequence [L, embed_dim];
    /// `t` is the normalized time in [0, 1]. Returns a same-shape prediction.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: ValueId,
        t: f64,
        cond: ValueId,
        training: bool,
        rng: &mut CounterRng,
        mut trace: Option<&mut ForwardTrace>,
    ) -> Result<ValueId> {
        let cfg = &self.config;
        let (_, c, d, h, w) = tape.value(x).dims5()?;
        if c != cfg.in_channels {
            return Err(Error::shape(format!(
                "denoise: {c} input channels, model expects {}",
                cfg.in_channels
            )));
        }
        if d != cfg.input_extent || h != cfg.input_extent || w != cfg.input_extent {
            return Err(Error::shape(format!(
                "denoise: spatial extents {d}x{h}x{w}, model operates at {0}^3",
                cfg.input_extent
            )));
        }
        let down_factor = 1usize << (cfg.levels() - 1);
        if d % down_factor != 0 {
            return Err(Error::shape(format!(
                "denoise: extent {d} not divisible by {down_factor}"
            )));
        }
        let (le, e) = tape.value(cond).dims2()?;
        if e != cfg.embed_dim {
            return Err(Error::shape(format!(
                "denoise: condition width {e}, model expects {}",
                cfg.embed_dim
            )));
        }
        debug_assert!(le >= 1);

        let mut local_trace = ForwardTrace::default();
        let tr = &mut local_trace;

        // Timestep embedding -> small MLP.
        let temb = Tensor::new(&[1, cfg.embed_dim], timestep_embedding(t, cfg.embed_dim)?)?;
        let temb = tape.leaf(temb);
        let temb = tape.linear(temb, bound.id("time.fc1.w"), bound.id("time.fc1.b"))?;
        let temb = tape.silu(temb);
        let emb = tape.linear(temb, bound.id("time.fc2.w"), bound.id("time.fc2.b"))?;

        let levels = cfg.levels();
        let mut hcur = tape.conv3d(x, bound.id("stem.w"), 1, 1)?;
        let mut skips: Vec<ValueId> = Vec::new();

        for i in 0..levels - 1 {
            let cch = cfg.level_channels(i);
            let r = cfg.input_extent >> i;
            hcur = self.resblock(
                tape,
                bound,
                &format!("down{i}.res"),
                hcur,
                emb,
                cch,
                cch,
                r,
                training,
                rng,
                tr,
            )?;
            if cfg.attends_at(r) {
                hcur = self.attn_block(tape, bound, &format!("down{i}.attn"), hcur, cond, r, tr)?;
            }
            skips.push(hcur);
            hcur = tape.conv3d(hcur, bound.id(&format!("down{i}.down.w")), 2, 1)?;
        }

        let cb = cfg.level_channels(levels - 1);
        let rb = cfg.input_extent >> (levels - 1);
        for j in 0..self.bottleneck_blocks() {
            hcur = self.resblock(
                tape,
                bound,
                &format!("mid{j}.res"),
                hcur,
                emb,
                cb,
                cb,
                rb,
                training,
                rng,
                tr,
            )?;
            tr.bottleneck_blocks += 1;
            if j == 0 && cfg.attends_at(rb) {
                hcur = self.attn_block(tape, bound, "mid.attn", hcur, cond, rb, tr)?;
            }
        }

        for i in (0..levels - 1).rev() {
            let cch = cfg.level_channels(i);
            let r = cfg.input_extent >> i;
            hcur = tape.upsample2x(hcur)?;
            hcur = tape.conv3d(hcur, bound.id(&format!("up{i}.up.w")), 1, 1)?;
            hcur = tape.concat_channels(hcur, skips[i])?;
            hcur = self.resblock(
                tape,
                bound,
                &format!("up{i}.res"),
                hcur,
                emb,
                2 * cch,
                cch,
                r,
                training,
                rng,
                tr,
            )?;
            if cfg.attends_at(r) {
                hcur = self.attn_block(tape, bound, &format!("up{i}.attn"), hcur, cond, r, tr)?;
            }
        }

        let mut out = tape.channel_norm(hcur, bound.id("out.norm.g"), bound.id("out.norm.b"), 1e-5)?;
        out = tape.silu(out);
        out = tape.conv3d(out, bound.id("out.conv.w"), 1, 1)?;

        if let Some(t) = trace.as_deref_mut() {
            *t = local_trace;
        }
        Ok(out)
    }
}

/// The denoiser plus its prompt machinery: one trainable unit whose
/// parameters include the token embedding table.
pub struct DenoiserModel {
    pub unet: UNet,
    pub vocab: Vocabulary,
}

pub const TEXT_EMBED: &str = "text.embed";

impl DenoiserModel {
    pub fn new(config: UNetConfig, vocab: Vocabulary) -> Result<Self> {
        Ok(DenoiserModel {
            unet: UNet::new(config)?,
            vocab,
        })
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.unet.param_specs();
        specs.push(ParamSpec {
            name: TEXT_EMBED.into(),
            shape: vec![self.vocab.len(), self.unet.config.embed_dim],
            init: Init::Embedding,
        });
        specs
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        init_params(&self.param_specs(), seed)
    }

    /// Single inference forward pass: a pure function of
    /// (params, x_t, t, cond) when `training` is false.
    pub fn denoise(
        &self,
        params: &ParamStore,
        x_t: &Tensor,
        t: f64,
        cond: &crate::conditioning::ConditionEmbedding,
        training: bool,
        rng: &mut CounterRng,
    ) -> Result<Tensor> {
        self.denoise_traced(params, x_t, t, cond, training, rng, None)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn denoise_traced(
        &self,
        params: &ParamStore,
        x_t: &Tensor,
        t: f64,
        cond: &crate::conditioning::ConditionEmbedding,
        training: bool,
        rng: &mut CounterRng,
        trace: Option<&mut ForwardTrace>,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let x = tape.leaf(x_t.clone());
        let cond_id = tape.leaf(cond.vectors.clone());
        let out = self
            .unet
            .forward(&mut tape, &bound, x, t, cond_id, training, rng, trace)?;
        Ok(tape.value(out).clone())
    }
}

/// Plain reconstruction autoencoder for the latent path: two stride-2 stages
/// (downsample factor 4), trained with MSE only.
#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderConfig {
    pub in_channels: usize,
    pub hidden: usize,
    pub latent_channels: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig {
            in_channels: 1,
            hidden: 16,
            latent_channels: 4,
        }
    }
}

pub const AE_DOWN_FACTOR: usize = 4;

pub struct Autoencoder {
    pub config: AutoencoderConfig,
}

impl Autoencoder {
    pub fn new(config: AutoencoderConfig) -> Self {
        Autoencoder { config }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let c = &self.config;
        let (h, h2) = (c.hidden, 2 * c.hidden);
        let dec3 = (c.hidden / 4).max(2);
        let mut specs = Vec::new();
        let mut conv = |name: &str, cout: usize, cin: usize| {
            specs.push(ParamSpec {
                name: format!("ae.{name}.w"),
                shape: vec![cout, cin, 3, 3, 3],
                init: Init::Conv,
            });
            specs.push(ParamSpec {
                name: format!("ae.{name}.b"),
                shape: vec![cout],
                init: Init::Zeros,
            });
        };
        conv("enc1", h, c.in_channels);
        conv("enc2", h2, h);
        conv("enc3", c.latent_channels, h2);
        conv("dec1", h2, c.latent_channels);
        conv("dec2", h, h2);
        conv("dec3", dec3, h);
        conv("dec4", c.in_channels, dec3);
        specs
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        init_params(&self.param_specs(), seed)
    }

    fn conv_bias(
        tape: &mut Tape,
        bound: &BoundParams,
        name: &str,
        x: ValueId,
        stride: usize,
    ) -> Result<ValueId> {
        let h = tape.conv3d(x, bound.id(&format!("ae.{name}.w")), stride, 1)?;
        tape.add_channel_bias(h, bound.id(&format!("ae.{name}.b")))
    }

    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: ValueId,
    ) -> Result<ValueId> {
        let (_, c, d, h, w) = tape.value(x).dims5()?;
        if c != self.config.in_channels {
            return Err(Error::shape(format!(
                "ae_encode: {c} channels, expected {}",
                self.config.in_channels
            )));
        }
        for (axis, ext) in [("depth", d), ("height", h), ("width", w)] {
            if ext % AE_DOWN_FACTOR != 0 {
                return Err(Error::shape(format!(
                    "ae_encode: {axis} extent {ext} not divisible by {AE_DOWN_FACTOR}"
                )));
            }
        }
        let h1 = Self::conv_bias(tape, bound, "enc1", x, 2)?;
        let h1 = tape.silu(h1);
        let h2 = Self::conv_bias(tape, bound, "enc2", h1, 2)?;
        let h2 = tape.silu(h2);
        Self::conv_bias(tape, bound, "enc3", h2, 1)
    }

    pub fn decode_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        z: ValueId,
    ) -> Result<ValueId> {
        let (_, c, ..) = tape.value(z).dims5()?;
        if c != self.config.latent_channels {
            return Err(Error::shape(format!(
                "ae_decode: {c} latent channels, expected {}",
                self.config.latent_channels
            )));
        }
        let h = Self::conv_bias(tape, bound, "dec1", z, 1)?;
        let h = tape.silu(h);
        let h = tape.upsample2x(h)?;
        let h = Self::conv_bias(tape, bound, "dec2", h, 1)?;
        let h = tape.silu(h);
        let h = tape.upsample2x(h)?;
        let h = Self::conv_bias(tape, bound, "dec3", h, 1)?;
        let h = tape.silu(h);
        Self::conv_bias(tape, bound, "dec4", h, 1)
    }

    /// Pure encode: [B,C,D,H,W] -> [B,latent,D/4,H/4,W/4].
    pub fn encode(&self, params: &ParamStore, volume: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let x = tape.leaf(volume.clone());
        let z = self.encode_on_tape(&mut tape, &bound, x)?;
        Ok(tape.value(z).clone())
    }

    /// Pure decode: inverse shape map of `encode`.
    pub fn decode(&self, params: &ParamStore, latent: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let z = tape.leaf(latent.clone());
        let x = self.decode_on_tape(&mut tape, &bound, z)?;
        Ok(tape.value(x).clone())
    }
}
