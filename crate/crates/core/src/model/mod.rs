//! Segmentation network with attribute-guided fusion and attribute heads.

mod aica;
mod heads;
mod text;
mod unet;

pub use aica::{attention_map, project_attributes, Aica, AttributeProjection};
pub use heads::{masked_features, prediction_gate, AttributeHeads};
pub use text::{FrozenTextEncoder, LookupTextEncoder, PAD, UNK};
pub use unet::{level_width, Decoder, DoubleConv, Encoder};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attr_text::{tokenize, AttributeTaxonomy};
use crate::data::ImageTextSample;
use crate::error::{Error, Result};
use crate::nn::{Param, Parameters};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    /// Channels of the first UNet level; level `l` has `base_width << l`.
    pub base_width: usize,
    /// Number of down blocks; `h = H / 2^depth`.
    pub depth: usize,
    pub norm_groups: usize,
    pub text_dim: usize,
    pub text_len: usize,
    pub head_hidden: usize,
    pub use_aica: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 224,
            width: 224,
            in_channels: 1,
            base_width: 16,
            depth: 4,
            norm_groups: 8,
            text_dim: 32,
            text_len: 24,
            head_hidden: 64,
            use_aica: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn channels(&self) -> usize {
        level_width(self.base_width, self.depth)
    }

    pub fn feature_size(&self) -> (usize, usize) {
        (self.height >> self.depth, self.width >> self.depth)
    }

    pub fn validate(&self) -> Result<()> {
        let factor = 1usize << self.depth;
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(factor)
            || !self.width.is_multiple_of(factor)
        {
            return Err(Error::Config(format!(
                "image size {}x{} must be a positive multiple of 2^depth = {factor}",
                self.height, self.width
            )));
        }
        let positive = [
            ("in_channels", self.in_channels),
            ("base_width", self.base_width),
            ("norm_groups", self.norm_groups),
            ("text_dim", self.text_dim),
            ("text_len", self.text_len),
            ("head_hidden", self.head_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Every intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct PredictionBundle {
    pub x_i: Tensor,
    pub x_a: Tensor,
    /// Absent when the fusion module is disabled.
    pub x_pro_a: Option<Tensor>,
    pub s: Option<Tensor>,
    pub x_ai: Tensor,
    /// Pre-sigmoid mask logits `1×H×W`.
    pub p: Tensor,
    pub attr_logits: Vec<Vec<f64>>,
    pub x_mi: Tensor,
    /// The detached `h×w` gate used for `x_mi`.
    pub gate: Vec<f64>,
}

pub struct ForwardCache {
    encoder: unet::EncoderCache,
    decoder: unet::DecoderCache,
    projection: Option<aica::ProjectionCache>,
    aica: Option<aica::AicaCache>,
    heads: heads::HeadsCache,
    gate: Vec<f64>,
    feature_dims: (usize, usize, usize),
}

#[derive(Clone, Debug)]
pub struct SegModel {
    config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub projection: AttributeProjection,
    pub aica: Aica,
    pub heads: AttributeHeads,
    text: LookupTextEncoder,
}

impl SegModel {
    pub fn new(config: ModelConfig, taxonomy: &AttributeTaxonomy) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = config.channels();
        let (h, w) = config.feature_size();
        let (b, depth, g) = (config.base_width, config.depth, config.norm_groups);
        let encoder = Encoder::new(&mut rng, config.in_channels, b, depth, g);
        let decoder = Decoder::new(&mut rng, b, depth, g);
        let projection =
            AttributeProjection::new(&mut rng, config.text_dim, config.text_len, c, h, w);
        let aica = Aica::new(&mut rng, c);
        let heads = AttributeHeads::new(&mut rng, c, config.head_hidden, &taxonomy.sizes());
        let text = LookupTextEncoder::new(taxonomy, config.text_dim, config.text_len, config.seed);
        Ok(SegModel {
            config,
            encoder,
            decoder,
            projection,
            aica,
            heads,
            text,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn text_encoder(&self) -> &LookupTextEncoder {
        &self.text
    }

    pub fn set_text_encoder(&mut self, text: LookupTextEncoder) -> Result<()> {
        if text.dim() != self.config.text_dim || text.max_len() != self.config.text_len {
            return Err(Error::shape(
                "text encoder",
                format!("d={} L={}", self.config.text_dim, self.config.text_len),
                format!("d={} L={}", text.dim(), text.max_len()),
            ));
        }
        self.text = text;
        Ok(())
    }

    /// Tokens fed to the text encoder: the attribute description, or the raw
    /// clinical sentence when `use_attribute_text` is off.
    pub fn tokens_for(sample: &ImageTextSample, use_attribute_text: bool) -> Vec<String> {
        if use_attribute_text {
            sample.attr_description.tokens.clone()
        } else {
            tokenize(&sample.raw_text)
        }
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let want = [
            self.config.in_channels,
            self.config.height,
            self.config.width,
        ];
        if image.shape() != want {
            return Err(Error::shape(
                "model input",
                format!("{want:?}"),
                format!("{:?}", image.shape()),
            ));
        }
        Ok(())
    }

    pub fn encode_image(&self, image: &Tensor) -> Result<Tensor> {
        self.check_image(image)?;
        let (mut feats, _) = self.encoder.forward(image)?;
        Ok(feats.pop().expect("bottleneck"))
    }

    pub fn encode_attributes(&self, tokens: &[String]) -> Result<Tensor> {
        self.text.encode(tokens)
    }

    pub fn forward(
        &self,
        image: &Tensor,
        tokens: &[String],
        alpha: f64,
    ) -> Result<(PredictionBundle, ForwardCache)> {
        self.check_image(image)?;
        let (mut feats, encoder) = self.encoder.forward(image)?;
        let x_i = feats.pop().expect("bottleneck");
        let x_a = self.text.encode(tokens)?;
        let (x_pro_a, s, x_ai, projection, aica) = if self.config.use_aica {
            let (x_pro_a, pc) = self.projection.forward(&x_a)?;
            let (s, x_ai, ac) = self.aica.forward(&x_i, &x_pro_a)?;
            (Some(x_pro_a), Some(s), x_ai, Some(pc), Some(ac))
        } else {
            (None, None, x_i.clone(), None, None)
        };
        let (p, decoder) = self.decoder.forward(&x_ai, &feats)?;
        let (x_mi, gate) = masked_features(&x_i, &p, alpha)?;
        let (attr_logits, heads) = self.heads.forward(&x_mi)?;
        let feature_dims = x_i.dims3()?;
        let bundle = PredictionBundle {
            x_i,
            x_a,
            x_pro_a,
            s,
            x_ai,
            p,
            attr_logits,
            x_mi,
            gate: gate.clone(),
        };
        let cache = ForwardCache {
            encoder,
            decoder,
            projection,
            aica,
            heads,
            gate,
            feature_dims,
        };
        Ok((bundle, cache))
    }

    /// Mask logits only.
    pub fn predict(&self, image: &Tensor, tokens: &[String]) -> Result<Tensor> {
        Ok(self.forward(image, tokens, 0.5)?.0.p)
    }

    /// Accumulates gradients of a loss with `∂L/∂P = dp` and
    /// `∂L/∂logits = dlogits` into every trainable parameter.
    pub fn backward(&mut self, cache: &ForwardCache, dp: &Tensor, dlogits: Option<&[Vec<f64>]>) {
        let (c, h, w) = cache.feature_dims;
        let hw = h * w;
        let (dx_ai, mut dfeats) = self.decoder.backward(&cache.decoder, dp);
        let mut dx_i = match (&cache.aica, &cache.projection) {
            (Some(ac), Some(pc)) => {
                let (dx_i, dpro) = self.aica.backward(ac, &dx_ai);
                self.projection.backward(pc, &dpro);
                dx_i
            }
            _ => dx_ai,
        };
        if let Some(dl) = dlogits {
            let dx_mi = self.heads.backward(&cache.heads, dl, h, w);
            for (i, (g, d)) in dx_i.data_mut().iter_mut().zip(dx_mi.data()).enumerate() {
                *g += d * cache.gate[i % hw];
            }
        }
        debug_assert_eq!(dx_i.len(), c * hw);
        dfeats.push(dx_i);
        self.encoder.backward(&cache.encoder, dfeats);
    }

    pub fn zero_grad(&mut self) {
        let mut params = Vec::new();
        self.visit_mut("", &mut params);
        for (_, p) in params {
            p.zero_grad();
        }
    }

    pub fn trainable_parameters(&mut self) -> Vec<(String, &mut Param)> {
        let mut params = Vec::new();
        self.visit_mut("", &mut params);
        params
    }

    pub fn named_parameters(&self) -> Vec<(String, &Param)> {
        let mut params = Vec::new();
        self.visit("", &mut params);
        params
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, p)| p.numel()).sum()
    }
}

impl Parameters for SegModel {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.encoder.visit(&crate::nn::join(prefix, "encoder"), out);
        self.decoder.visit(&crate::nn::join(prefix, "decoder"), out);
        if self.config.use_aica {
            self.projection.visit(&crate::nn::join(prefix, "proj"), out);
            self.aica.visit(&crate::nn::join(prefix, "aica"), out);
        }
        self.heads
            .visit(&crate::nn::join(prefix, "classifier"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.encoder
            .visit_mut(&crate::nn::join(prefix, "encoder"), out);
        self.decoder
            .visit_mut(&crate::nn::join(prefix, "decoder"), out);
        if self.config.use_aica {
            self.projection
                .visit_mut(&crate::nn::join(prefix, "proj"), out);
            self.aica.visit_mut(&crate::nn::join(prefix, "aica"), out);
        }
        self.heads
            .visit_mut(&crate::nn::join(prefix, "classifier"), out);
    }
}
