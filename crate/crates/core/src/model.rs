//! Content encoder, style encoder and decoder, and their composition into the
//! timbre-transfer autoencoder.
//!
//! All convolutions run along time with frequency bins as channels. Every
//! layer except the first layer of each network is preceded by batch
//! normalization and a leaky ReLU ([`PreAct`]).
//!
//! ```text
//! content: conv[4,2] -> conv[4,2] -> +conv[1,1] -> VQ
//! style:   conv[4,2] -> +conv[1,1] -> GRU (final state = s)
//! decoder: 2 x (conv[1,1] on [h; s] -> +GRU -> convT[4,2]) -> conv[1,1] -> +GRU -> max(0, .)
//! ```

use ndarray::{s, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::nn::{
    leaky_relu, leaky_relu_backward, BatchNorm1d, BatchNormCache, Conv1d, ConvTranspose1d, Gru,
    GruCache, Param,
};
use crate::spectral::{self, GriffinLimConfig, Spectrogram, StftConfig};
use crate::vq::{
    self, CodeSequence, Codebook, ContentLatent, LossBreakdown, VqLossGrads,
};

/// Temporal reduction of the content encoder (two stride-2 layers).
pub const DOWNSAMPLE_FACTOR: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub freq_bins: usize,
    pub codebook_size: usize,
    pub leaky_relu_slope: f64,
    pub batchnorm_eps: f64,
}

impl ModelConfig {
    /// 1024 channels, 1025 bins, 2048 codes.
    pub fn paper_scale() -> Self {
        Self {
            channels: 1024,
            freq_bins: 1025,
            codebook_size: 2048,
            leaky_relu_slope: 0.01,
            batchnorm_eps: 1e-5,
        }
    }

    pub fn toy() -> Self {
        Self {
            channels: 64,
            freq_bins: 257,
            codebook_size: 64,
            ..Self::paper_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.freq_bins == 0 || self.codebook_size == 0 {
            return Err(Error::Config(
                "channels, freq_bins and codebook_size must be positive".into(),
            ));
        }
        if !(self.leaky_relu_slope >= 0.0) || !(self.batchnorm_eps > 0.0) {
            return Err(Error::Config("invalid leaky ReLU slope or batchnorm eps".into()));
        }
        Ok(())
    }

    pub fn downsample_factor(&self) -> usize {
        DOWNSAMPLE_FACTOR
    }

    /// Embedding width of the codebook; equal to the channel count.
    pub fn embedding_dim(&self) -> usize {
        self.channels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleEmbedding {
    pub values: Vec<f64>,
}

/// Batch normalization followed by a leaky ReLU.
#[derive(Clone, Debug)]
pub struct PreAct {
    pub bn: BatchNorm1d,
    slope: f64,
}

pub struct PreActCache {
    bn: BatchNormCache,
    normalized: Array3<f64>,
}

impl PreAct {
    fn new(channels: usize, cfg: &ModelConfig) -> Self {
        Self {
            bn: BatchNorm1d::new(channels, cfg.batchnorm_eps),
            slope: cfg.leaky_relu_slope,
        }
    }

    fn forward(&self, x: &Array3<f64>, train: bool) -> (Array3<f64>, PreActCache) {
        let (normalized, bn) = self.bn.forward(x, train);
        let y = leaky_relu(&normalized, self.slope);
        (y, PreActCache { bn, normalized })
    }

    fn backward(&mut self, cache: &PreActCache, dy: &Array3<f64>) -> Array3<f64> {
        let d = leaky_relu_backward(&cache.normalized, dy, self.slope);
        self.bn.backward(&cache.bn, &d)
    }

    fn update_running(&mut self, cache: &PreActCache) {
        self.bn.update_running(&cache.bn);
    }
}

type Named<'a> = Vec<(String, &'a mut Param)>;

fn extend<'a>(out: &mut Named<'a>, prefix: &str, params: Vec<(&'static str, &'a mut Param)>) {
    for (name, p) in params {
        out.push((format!("{prefix}.{name}"), p));
    }
}

#[derive(Clone, Debug)]
pub struct ContentEncoder {
    pub down1: Conv1d,
    pub pre2: PreAct,
    pub down2: Conv1d,
    pub pre3: PreAct,
    pub mix: Conv1d,
}

pub struct ContentCache {
    x: Array3<f64>,
    p2: PreActCache,
    l2: Array3<f64>,
    p3: PreActCache,
    l3: Array3<f64>,
}

impl ContentEncoder {
    fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.channels;
        Self {
            down1: Conv1d::new(cfg.freq_bins, c, 4, 2, 1, rng),
            pre2: PreAct::new(c, cfg),
            down2: Conv1d::new(c, c, 4, 2, 1, rng),
            pre3: PreAct::new(c, cfg),
            mix: Conv1d::new(c, c, 1, 1, 0, rng),
        }
    }

    fn forward(&self, x: &Array3<f64>, train: bool) -> (Array3<f64>, ContentCache) {
        let h1 = self.down1.forward(x);
        let (l2, p2) = self.pre2.forward(&h1, train);
        let h2 = self.down2.forward(&l2);
        let (l3, p3) = self.pre3.forward(&h2, train);
        let out = &h2 + &self.mix.forward(&l3);
        let cache = ContentCache {
            x: x.clone(),
            p2,
            l2,
            p3,
            l3,
        };
        (out, cache)
    }

    fn backward(&mut self, cache: &ContentCache, d_out: &Array3<f64>) {
        let dl3 = self.mix.backward(&cache.l3, d_out);
        let dh2 = d_out + &self.pre3.backward(&cache.p3, &dl3);
        let dl2 = self.down2.backward(&cache.l2, &dh2);
        let dh1 = self.pre2.backward(&cache.p2, &dl2);
        self.down1.backward(&cache.x, &dh1);
    }

    fn update_running(&mut self, cache: &ContentCache) {
        self.pre2.update_running(&cache.p2);
        self.pre3.update_running(&cache.p3);
    }

    fn named_params<'a>(&'a mut self, out: &mut Named<'a>) {
        extend(out, "content.down1", self.down1.params_mut());
        extend(out, "content.pre2", self.pre2.bn.params_mut());
        extend(out, "content.down2", self.down2.params_mut());
        extend(out, "content.pre3", self.pre3.bn.params_mut());
        extend(out, "content.mix", self.mix.params_mut());
    }

    fn batchnorms(&mut self) -> Vec<(&'static str, &mut BatchNorm1d)> {
        vec![
            ("content.pre2", &mut self.pre2.bn),
            ("content.pre3", &mut self.pre3.bn),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct StyleEncoder {
    pub down: Conv1d,
    pub pre_mix: PreAct,
    pub mix: Conv1d,
    pub pre_rnn: PreAct,
    pub rnn: Gru,
}

pub struct StyleCache {
    y: Array3<f64>,
    p_mix: PreActCache,
    l_mix: Array3<f64>,
    p_rnn: PreActCache,
    rnn_in: Array3<f64>,
    rnn: GruCache,
}

impl StyleEncoder {
    fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.channels;
        Self {
            down: Conv1d::new(cfg.freq_bins, c, 4, 2, 1, rng),
            pre_mix: PreAct::new(c, cfg),
            mix: Conv1d::new(c, c, 1, 1, 0, rng),
            pre_rnn: PreAct::new(c, cfg),
            rnn: Gru::new(c, c, rng),
        }
    }

    /// Returns the final recurrent state `[batch, channels]`.
    fn forward(&self, y: &Array3<f64>, train: bool) -> (Array2<f64>, StyleCache) {
        let h1 = self.down.forward(y);
        let (l_mix, p_mix) = self.pre_mix.forward(&h1, train);
        let h2 = &h1 + &self.mix.forward(&l_mix);
        let (rnn_in, p_rnn) = self.pre_rnn.forward(&h2, train);
        let (seq, rnn) = self.rnn.forward(&rnn_in);
        let last = seq.len_of(Axis(2)) - 1;
        let s = seq.index_axis(Axis(2), last).to_owned();
        let cache = StyleCache {
            y: y.clone(),
            p_mix,
            l_mix,
            p_rnn,
            rnn_in,
            rnn,
        };
        (s, cache)
    }

    fn backward(&mut self, cache: &StyleCache, d_style: &Array2<f64>) {
        let (b, c, t) = cache.rnn_in.dim();
        let mut d_seq = Array3::zeros((b, c, t));
        d_seq.index_axis_mut(Axis(2), t - 1).assign(d_style);
        let d_rnn_in = self.rnn.backward(&cache.rnn_in, &cache.rnn, &d_seq);
        let dh2 = self.pre_rnn.backward(&cache.p_rnn, &d_rnn_in);
        let dl_mix = self.mix.backward(&cache.l_mix, &dh2);
        let dh1 = &dh2 + &self.pre_mix.backward(&cache.p_mix, &dl_mix);
        self.down.backward(&cache.y, &dh1);
    }

    fn update_running(&mut self, cache: &StyleCache) {
        self.pre_mix.update_running(&cache.p_mix);
        self.pre_rnn.update_running(&cache.p_rnn);
    }

    fn named_params<'a>(&'a mut self, out: &mut Named<'a>) {
        extend(out, "style.down", self.down.params_mut());
        extend(out, "style.pre_mix", self.pre_mix.bn.params_mut());
        extend(out, "style.mix", self.mix.params_mut());
        extend(out, "style.pre_rnn", self.pre_rnn.bn.params_mut());
        extend(out, "style.rnn", self.rnn.params_mut());
    }

    fn batchnorms(&mut self) -> Vec<(&'static str, &mut BatchNorm1d)> {
        vec![
            ("style.pre_mix", &mut self.pre_mix.bn),
            ("style.pre_rnn", &mut self.pre_rnn.bn),
        ]
    }
}

/// Appends the style vector to every time step: `[b, c, t] + [b, s] -> [b, c + s, t]`.
fn concat_style(h: &Array3<f64>, style: &Array2<f64>) -> Array3<f64> {
    let (b, c, t) = h.dim();
    let sd = style.ncols();
    let mut out = Array3::zeros((b, c + sd, t));
    out.slice_mut(s![.., ..c, ..]).assign(h);
    for j in 0..b {
        for k in 0..sd {
            out.slice_mut(s![j, c + k, ..]).fill(style[[j, k]]);
        }
    }
    out
}

/// Splits a gradient of [`concat_style`] into its feature and style parts.
fn split_style_grad(d: &Array3<f64>, channels: usize) -> (Array3<f64>, Array2<f64>) {
    let dh = d.slice(s![.., ..channels, ..]).to_owned();
    let ds = d.slice(s![.., channels.., ..]).sum_axis(Axis(2));
    (dh, ds)
}

/// `conv[1,1]` on `[h; s]`, a residual GRU, then a stride-2 transposed conv.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    /// Absent on the first block, whose input is the quantized code sequence.
    pub pre_cond: Option<PreAct>,
    pub cond: Conv1d,
    pub pre_rnn: PreAct,
    pub rnn: Gru,
    pub pre_up: PreAct,
    pub up: ConvTranspose1d,
}

pub struct DecoderBlockCache {
    p_cond: Option<PreActCache>,
    cond_in: Array3<f64>,
    p_rnn: PreActCache,
    rnn_in: Array3<f64>,
    rnn: GruCache,
    p_up: PreActCache,
    up_in: Array3<f64>,
}

impl DecoderBlock {
    fn new(input: usize, first: bool, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.channels;
        Self {
            pre_cond: (!first).then(|| PreAct::new(input, cfg)),
            cond: Conv1d::new(input + c, c, 1, 1, 0, rng),
            pre_rnn: PreAct::new(c, cfg),
            rnn: Gru::new(c, c, rng),
            pre_up: PreAct::new(c, cfg),
            up: ConvTranspose1d::new(c, c, 4, 2, 1, rng),
        }
    }

    fn forward(
        &self,
        h: &Array3<f64>,
        style: &Array2<f64>,
        train: bool,
    ) -> (Array3<f64>, DecoderBlockCache) {
        let (activated, p_cond) = match &self.pre_cond {
            Some(pre) => {
                let (a, c) = pre.forward(h, train);
                (a, Some(c))
            }
            None => (h.clone(), None),
        };
        let cond_in = concat_style(&activated, style);
        let a = self.cond.forward(&cond_in);
        let (rnn_in, p_rnn) = self.pre_rnn.forward(&a, train);
        let (seq, rnn) = self.rnn.forward(&rnn_in);
        let b = &a + &seq;
        let (up_in, p_up) = self.pre_up.forward(&b, train);
        let out = self.up.forward(&up_in);
        (
            out,
            DecoderBlockCache {
                p_cond,
                cond_in,
                p_rnn,
                rnn_in,
                rnn,
                p_up,
                up_in,
            },
        )
    }

    fn backward(&mut self, cache: &DecoderBlockCache, d_out: &Array3<f64>) -> (Array3<f64>, Array2<f64>) {
        let d_up_in = self.up.backward(&cache.up_in, d_out);
        let db = self.pre_up.backward(&cache.p_up, &d_up_in);
        let d_rnn_in = self.rnn.backward(&cache.rnn_in, &cache.rnn, &db);
        let da = &db + &self.pre_rnn.backward(&cache.p_rnn, &d_rnn_in);
        let d_cond_in = self.cond.backward(&cache.cond_in, &da);
        // the style vector has `channels` entries, like the block output
        let input_channels = self.cond.in_channels - self.cond.out_channels;
        let (d_act, d_style) = split_style_grad(&d_cond_in, input_channels);
        let dh = match (&mut self.pre_cond, &cache.p_cond) {
            (Some(pre), Some(c)) => pre.backward(c, &d_act),
            _ => d_act,
        };
        (dh, d_style)
    }

    fn update_running(&mut self, cache: &DecoderBlockCache) {
        if let (Some(pre), Some(c)) = (&mut self.pre_cond, &cache.p_cond) {
            pre.update_running(c);
        }
        self.pre_rnn.update_running(&cache.p_rnn);
        self.pre_up.update_running(&cache.p_up);
    }

    fn named_params<'a>(&'a mut self, prefix: &str, out: &mut Named<'a>) {
        if let Some(pre) = &mut self.pre_cond {
            extend(out, &format!("{prefix}.pre_cond"), pre.bn.params_mut());
        }
        extend(out, &format!("{prefix}.cond"), self.cond.params_mut());
        extend(out, &format!("{prefix}.pre_rnn"), self.pre_rnn.bn.params_mut());
        extend(out, &format!("{prefix}.rnn"), self.rnn.params_mut());
        extend(out, &format!("{prefix}.pre_up"), self.pre_up.bn.params_mut());
        extend(out, &format!("{prefix}.up"), self.up.params_mut());
    }

    fn batchnorms(&mut self, prefix: &'static str) -> Vec<(String, &mut BatchNorm1d)> {
        let mut v = Vec::new();
        if let Some(pre) = &mut self.pre_cond {
            v.push((format!("{prefix}.pre_cond"), &mut pre.bn));
        }
        v.push((format!("{prefix}.pre_rnn"), &mut self.pre_rnn.bn));
        v.push((format!("{prefix}.pre_up"), &mut self.pre_up.bn));
        v
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub block1: DecoderBlock,
    pub block2: DecoderBlock,
    pub pre_out: PreAct,
    pub out: Conv1d,
    pub pre_rnn: PreAct,
    pub rnn: Gru,
}

pub struct DecoderCache {
    b1: DecoderBlockCache,
    b2: DecoderBlockCache,
    p_out: PreActCache,
    out_in: Array3<f64>,
    p_rnn: PreActCache,
    rnn_in: Array3<f64>,
    rnn: GruCache,
    pre_relu: Array3<f64>,
}

impl Decoder {
    fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (c, f) = (cfg.channels, cfg.freq_bins);
        Self {
            block1: DecoderBlock::new(cfg.embedding_dim(), true, cfg, rng),
            block2: DecoderBlock::new(c, false, cfg, rng),
            pre_out: PreAct::new(c, cfg),
            out: Conv1d::new(c, f, 1, 1, 0, rng),
            pre_rnn: PreAct::new(f, cfg),
            rnn: Gru::new(f, f, rng),
        }
    }

    fn forward(
        &self,
        codes: &Array3<f64>,
        style: &Array2<f64>,
        train: bool,
    ) -> (Array3<f64>, DecoderCache) {
        let (h1, b1) = self.block1.forward(codes, style, train);
        let (h2, b2) = self.block2.forward(&h1, style, train);
        let (out_in, p_out) = self.pre_out.forward(&h2, train);
        let g = self.out.forward(&out_in);
        let (rnn_in, p_rnn) = self.pre_rnn.forward(&g, train);
        let (seq, rnn) = self.rnn.forward(&rnn_in);
        let pre_relu = &g + &seq;
        let output = pre_relu.mapv(|v| v.max(0.0));
        (
            output,
            DecoderCache {
                b1,
                b2,
                p_out,
                out_in,
                p_rnn,
                rnn_in,
                rnn,
                pre_relu,
            },
        )
    }

    fn backward(&mut self, cache: &DecoderCache, d_out: &Array3<f64>) -> (Array3<f64>, Array2<f64>) {
        let mut dh = d_out.clone();
        ndarray::Zip::from(&mut dh)
            .and(&cache.pre_relu)
            .for_each(|d, &v| {
                if v <= 0.0 {
                    *d = 0.0;
                }
            });
        let d_rnn_in = self.rnn.backward(&cache.rnn_in, &cache.rnn, &dh);
        let dg = &dh + &self.pre_rnn.backward(&cache.p_rnn, &d_rnn_in);
        let d_out_in = self.out.backward(&cache.out_in, &dg);
        let dh2 = self.pre_out.backward(&cache.p_out, &d_out_in);
        let (dh1, ds2) = self.block2.backward(&cache.b2, &dh2);
        let (d_codes, ds1) = self.block1.backward(&cache.b1, &dh1);
        (d_codes, ds1 + ds2)
    }

    fn update_running(&mut self, cache: &DecoderCache) {
        self.block1.update_running(&cache.b1);
        self.block2.update_running(&cache.b2);
        self.pre_out.update_running(&cache.p_out);
        self.pre_rnn.update_running(&cache.p_rnn);
    }

    fn named_params<'a>(&'a mut self, out: &mut Named<'a>) {
        self.block1.named_params("decoder.block1", out);
        self.block2.named_params("decoder.block2", out);
        extend(out, "decoder.pre_out", self.pre_out.bn.params_mut());
        extend(out, "decoder.out", self.out.params_mut());
        extend(out, "decoder.pre_rnn", self.pre_rnn.bn.params_mut());
        extend(out, "decoder.rnn", self.rnn.params_mut());
    }

    fn batchnorms(&mut self) -> Vec<(String, &mut BatchNorm1d)> {
        let mut v = self.block1.batchnorms("decoder.block1");
        v.extend(self.block2.batchnorms("decoder.block2"));
        v.push(("decoder.pre_out".into(), &mut self.pre_out.bn));
        v.push(("decoder.pre_rnn".into(), &mut self.pre_rnn.bn));
        v
    }
}

/// Training-time (batch statistics) or inference-time (running statistics)
/// normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Stop-gradient quantities pinned to their values at a reference point.
///
/// Evaluating the loss with a frozen bottleneck gives a smooth function whose
/// true gradient equals the straight-through gradient at the reference point,
/// which is what finite-difference checks need.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBottleneck {
    pub indices: Vec<usize>,
    pub latent: Array2<f64>,
    pub quantized: Array2<f64>,
}

#[derive(Clone, Copy, Debug)]
pub enum Bottleneck<'a> {
    Nearest,
    Frozen(&'a FrozenBottleneck),
}

/// Everything produced by one pass over a batch.
pub struct ForwardPass {
    pub output: Array3<f64>,
    pub losses: LossBreakdown,
    /// Encoder output, one row per latent frame (item-major).
    pub latent: Array2<f64>,
    pub codes: CodeSequence,
    pub style: Array2<f64>,
    target: Array3<f64>,
    bottleneck_residual: Array2<f64>,
    frozen_reference: Option<Array2<f64>>,
    content_cache: ContentCache,
    style_cache: StyleCache,
    decoder_cache: DecoderCache,
}

impl ForwardPass {
    pub fn frozen(&self) -> FrozenBottleneck {
        FrozenBottleneck {
            indices: self.codes.indices.clone(),
            latent: self.latent.clone(),
            quantized: self.codes.quantized.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub content: ContentEncoder,
    pub style: StyleEncoder,
    pub decoder: Decoder,
    pub codebook: Codebook,
}

fn to_rows(x: &Array3<f64>) -> Array2<f64> {
    let (b, d, l) = x.dim();
    let mut rows = Array2::zeros((b * l, d));
    for (j, item) in x.outer_iter().enumerate() {
        rows.slice_mut(s![j * l..(j + 1) * l, ..]).assign(&item.t());
    }
    rows
}

fn from_rows(rows: &Array2<f64>, batch: usize) -> Array3<f64> {
    let (n, d) = rows.dim();
    let l = n / batch;
    let mut x = Array3::zeros((batch, d, l));
    for (j, mut item) in x.outer_iter_mut().enumerate() {
        item.assign(&rows.slice(s![j * l..(j + 1) * l, ..]).t());
    }
    x
}

/// `[T, F]` spectrogram frames to a `[1, F, T']` batch, zero-padding time to
/// a multiple of `multiple`.
fn spectrogram_batch(s: &Spectrogram, multiple: usize) -> Array3<f64> {
    let (t, f) = s.frames.dim();
    let padded = t.div_ceil(multiple).max(1) * multiple;
    let mut x = Array3::zeros((1, f, padded));
    x.slice_mut(s![0, .., ..t]).assign(&s.frames.t());
    x
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            content: ContentEncoder::new(&config, &mut rng),
            style: StyleEncoder::new(&config, &mut rng),
            decoder: Decoder::new(&config, &mut rng),
            codebook: Codebook::new(config.codebook_size, config.embedding_dim(), &mut rng),
            config,
        })
    }

    /// Every learnable tensor with a stable dotted name, in a fixed order.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        self.content.named_params(&mut out);
        self.style.named_params(&mut out);
        self.decoder.named_params(&mut out);
        out.push(("codebook".into(), &mut self.codebook.vectors));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.named_params_mut().into_iter().map(|(_, p)| p).collect()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    /// Batch normalization layers with names, in a fixed order.
    pub fn batchnorms_mut(&mut self) -> Vec<(String, &mut BatchNorm1d)> {
        let mut v: Vec<(String, &mut BatchNorm1d)> = self
            .content
            .batchnorms()
            .into_iter()
            .map(|(n, b)| (n.to_string(), b))
            .collect();
        v.extend(
            self.style
                .batchnorms()
                .into_iter()
                .map(|(n, b)| (n.to_string(), b)),
        );
        v.extend(self.decoder.batchnorms());
        v
    }

    fn check_input(&self, x: &Array3<f64>, what: &str) -> Result<()> {
        if x.dim().1 != self.config.freq_bins {
            return Err(Error::Shape(format!(
                "{what} has {} bins, model expects {}",
                x.dim().1,
                self.config.freq_bins
            )));
        }
        Ok(())
    }

    /// Full pass over a batch of content inputs `x` and style inputs `y`,
    /// both `[batch, bins, time]`. The content length must be a multiple of
    /// [`DOWNSAMPLE_FACTOR`]; the style length must be at least 2.
    pub fn forward(
        &self,
        x: &Array3<f64>,
        y: &Array3<f64>,
        beta: f64,
        mode: Mode,
        bottleneck: Bottleneck<'_>,
    ) -> Result<ForwardPass> {
        self.check_input(x, "content input")?;
        self.check_input(y, "style input")?;
        let (batch, _, t) = x.dim();
        if t == 0 || t % DOWNSAMPLE_FACTOR != 0 {
            return Err(Error::Shape(format!(
                "content length {t} is not a positive multiple of {DOWNSAMPLE_FACTOR}"
            )));
        }
        if y.dim().2 < 2 {
            return Err(Error::Shape("style input needs at least 2 frames".into()));
        }
        if y.dim().0 != batch {
            return Err(Error::Shape("content and style batch sizes differ".into()));
        }
        let train = mode == Mode::Train;
        let (encoded, content_cache) = self.content.forward(x, train);
        let latent = to_rows(&encoded);
        let (codes, decoder_rows, codebook_loss, commit_loss, frozen_reference) = match bottleneck {
            Bottleneck::Nearest => {
                let codes = vq::quantize(&ContentLatent { frames: latent.clone() }, &self.codebook)?;
                let lb = vq::vq_losses(&ContentLatent { frames: latent.clone() }, &codes, beta)?;
                let rows = vq::straight_through(&ContentLatent { frames: latent.clone() }, &codes)?.frames;
                (codes, rows, lb.codebook, lb.commit, None)
            }
            Bottleneck::Frozen(frozen) => {
                if frozen.latent.dim() != latent.dim() {
                    return Err(Error::Shape("frozen bottleneck does not match batch".into()));
                }
                let n = latent.len() as f64;
                let live = self.codebook.vectors.value.select(Axis(0), &frozen.indices);
                let cbk = (&live - &frozen.latent).mapv(|v| v * v).sum() / n;
                let cmt = (&frozen.quantized - &latent).mapv(|v| v * v).sum() / n;
                let rows = &latent + &(&frozen.quantized - &frozen.latent);
                let codes = CodeSequence {
                    indices: frozen.indices.clone(),
                    quantized: live,
                };
                (codes, rows, cbk, cmt, Some(frozen.latent.clone()))
            }
        };
        let (style, style_cache) = self.style.forward(y, train);
        let (output, decoder_cache) =
            self.decoder
                .forward(&from_rows(&decoder_rows, batch), &style, train);
        let recon = (&output - x).mapv(|v| v * v).mean().unwrap_or(0.0);
        let losses = LossBreakdown::new(recon, codebook_loss, commit_loss, beta);
        let bottleneck_residual = match bottleneck {
            Bottleneck::Frozen(f) => &latent - &f.quantized,
            Bottleneck::Nearest => &latent - &codes.quantized,
        };
        Ok(ForwardPass {
            output,
            losses,
            latent,
            codes,
            style,
            target: x.clone(),
            bottleneck_residual,
            frozen_reference,
            content_cache,
            style_cache,
            decoder_cache,
        })
    }

    /// Accumulates gradients of the pass's total loss into every parameter.
    pub fn backward(&mut self, pass: &ForwardPass) {
        let n_out = pass.output.len() as f64;
        let d_output = (&pass.output - &pass.target).mapv(|v| 2.0 * v / n_out);
        let (d_codes, d_style) = self.decoder.backward(&pass.decoder_cache, &d_output);
        self.style.backward(&pass.style_cache, &d_style);

        let k = self.codebook.size();
        let routed = vq::straight_through_backward(&to_rows(&d_codes), k);
        // Codebook term: residual against the stop-gradient encoder output.
        let cbk_reference = pass.frozen_reference.as_ref().unwrap_or(&pass.latent);
        let cbk_rows = ContentLatent {
            frames: cbk_reference.clone(),
        };
        let VqLossGrads { codebook: d_cbk, .. } = vq::vq_loss_gradients(&cbk_rows, &pass.codes, 0.0, k);
        // Commitment term: residual against the stop-gradient quantized value.
        let n_lat = pass.latent.len().max(1) as f64;
        let d_commit = pass
            .bottleneck_residual
            .mapv(|r| pass.losses.beta * 2.0 * r / n_lat);
        let d_latent = routed.latent + d_commit;
        self.codebook.vectors.grad += &(d_cbk + routed.codebook);
        let batch = pass.output.dim().0;
        self.content
            .backward(&pass.content_cache, &from_rows(&d_latent, batch));
    }

    /// Folds the batch statistics of a training pass into the running
    /// normalization statistics.
    pub fn update_running_stats(&mut self, pass: &ForwardPass) {
        self.content.update_running(&pass.content_cache);
        self.style.update_running(&pass.style_cache);
        self.decoder.update_running(&pass.decoder_cache);
    }

    /// Encoder output for one spectrogram (inference mode). Time is
    /// zero-padded to a multiple of the downsampling factor.
    pub fn content_encode(&self, x: &Spectrogram) -> Result<ContentLatent> {
        let batch = spectrogram_batch(x, DOWNSAMPLE_FACTOR);
        self.check_input(&batch, "content input")?;
        let (encoded, _) = self.content.forward(&batch, false);
        Ok(ContentLatent {
            frames: to_rows(&encoded),
        })
    }

    pub fn quantize(&self, latent: &ContentLatent) -> Result<CodeSequence> {
        vq::quantize(latent, &self.codebook)
    }

    pub fn style_encode(&self, y: &Spectrogram) -> Result<StyleEmbedding> {
        if y.num_frames() < 2 {
            return Err(Error::InvalidInput(
                "style input needs at least 2 frames".into(),
            ));
        }
        let batch = spectrogram_batch(y, 1);
        self.check_input(&batch, "style input")?;
        let (s, _) = self.style.forward(&batch, false);
        Ok(StyleEmbedding {
            values: s.row(0).to_vec(),
        })
    }

    /// Decodes a code sequence under a style embedding (inference mode).
    pub fn decode(&self, codes: &CodeSequence, style: &StyleEmbedding, hop_seconds: f64, sample_rate: u32) -> Result<Spectrogram> {
        if codes.quantized.ncols() != self.config.embedding_dim() {
            return Err(Error::Shape(format!(
                "codes are {}-d, decoder expects {}-d",
                codes.quantized.ncols(),
                self.config.embedding_dim()
            )));
        }
        if style.values.len() != self.config.channels {
            return Err(Error::Shape(format!(
                "style is {}-d, decoder expects {}-d",
                style.values.len(),
                self.config.channels
            )));
        }
        if codes.is_empty() {
            return Err(Error::InvalidInput("empty code sequence".into()));
        }
        let s = Array2::from_shape_vec((1, style.values.len()), style.values.clone())
            .expect("style row");
        let (out, _) = self.decoder.forward(&from_rows(&codes.quantized, 1), &s, false);
        Ok(Spectrogram {
            frames: out.index_axis(Axis(0), 0).t().to_owned(),
            hop_seconds,
            sample_rate,
        })
    }

    /// Content spectrogram rendered in the style of another (inference mode).
    /// The output has exactly as many frames as `content`.
    pub fn transfer_spectrogram(&self, content: &Spectrogram, style: &Spectrogram) -> Result<Spectrogram> {
        let latent = self.content_encode(content)?;
        let codes = self.quantize(&latent)?;
        let s = self.style_encode(style)?;
        let mut out = self.decode(&codes, &s, content.hop_seconds, content.sample_rate)?;
        out.frames = out.frames.slice(s![..content.num_frames(), ..]).to_owned();
        Ok(out)
    }
}

/// Renders the pitch content of `content` with the timbre of `style`. The
/// result has the length of `content`.
pub fn transfer(
    content: &Waveform,
    style: &Waveform,
    model: &Model,
    frontend: StftConfig,
    gl: GriffinLimConfig,
) -> Result<Waveform> {
    if frontend.bins() != model.config.freq_bins {
        return Err(Error::Config(format!(
            "front-end yields {} bins but the model expects {}",
            frontend.bins(),
            model.config.freq_bins
        )));
    }
    let min_len = DOWNSAMPLE_FACTOR * frontend.hop_samples;
    if content.len() < min_len {
        return Err(Error::InvalidInput(format!(
            "content input is shorter than one latent frame ({min_len} samples)"
        )));
    }
    if style.len() < 2 * frontend.hop_samples {
        return Err(Error::InvalidInput("style input is too short".into()));
    }
    let x = spectral::spectrogram(content, frontend)?;
    let y = spectral::spectrogram(style, frontend)?;
    let out = model.transfer_spectrogram(&x, &y)?;
    Ok(spectral::griffin_lim(&out, frontend, gl)?.fit_to(content.len()))
}
