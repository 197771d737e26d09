use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    concat_channels, join, max_pool2, max_pool2_backward, relu, relu_backward, split_channels,
    Conv2d, Conv2dCache, GroupNorm, GroupNormCache, Param, Parameters, UpConv2x2, UpConvCache,
};
use crate::tensor::Tensor;

/// conv3×3 → GroupNorm → ReLU, twice.
#[derive(Clone, Debug)]
pub struct DoubleConv {
    conv1: Conv2d,
    norm1: GroupNorm,
    conv2: Conv2d,
    norm2: GroupNorm,
}

pub struct DoubleConvCache {
    c1: Conv2dCache,
    n1: GroupNormCache,
    a1: Tensor,
    c2: Conv2dCache,
    n2: GroupNormCache,
    a2: Tensor,
}

impl DoubleConv {
    pub fn new(rng: &mut impl Rng, cin: usize, cout: usize, groups: usize) -> Self {
        DoubleConv {
            conv1: Conv2d::new(rng, cin, cout, 3),
            norm1: GroupNorm::new(cout, groups),
            conv2: Conv2d::new(rng, cout, cout, 3),
            norm2: GroupNorm::new(cout, groups),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, DoubleConvCache)> {
        let (y, c1) = self.conv1.forward(x)?;
        let (y, n1) = self.norm1.forward(&y)?;
        let a1 = relu(&y);
        let (y, c2) = self.conv2.forward(&a1)?;
        let (y, n2) = self.norm2.forward(&y)?;
        let a2 = relu(&y);
        let out = a2.clone();
        Ok((
            out,
            DoubleConvCache {
                c1,
                n1,
                a1,
                c2,
                n2,
                a2,
            },
        ))
    }

    pub fn backward(
        &mut self,
        cache: &DoubleConvCache,
        dy: &Tensor,
        want_dx: bool,
    ) -> Option<Tensor> {
        let d = relu_backward(&cache.a2, dy);
        let d = self.norm2.backward(&cache.n2, &d);
        let d = self
            .conv2
            .backward(&cache.c2, &d, true)
            .expect("requested dx");
        let d = relu_backward(&cache.a1, &d);
        let d = self.norm1.backward(&cache.n1, &d);
        self.conv1.backward(&cache.c1, &d, want_dx)
    }
}

impl Parameters for DoubleConv {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.conv1.visit(&join(prefix, "conv1"), out);
        self.norm1.visit(&join(prefix, "norm1"), out);
        self.conv2.visit(&join(prefix, "conv2"), out);
        self.norm2.visit(&join(prefix, "norm2"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.conv1.visit_mut(&join(prefix, "conv1"), out);
        self.norm1.visit_mut(&join(prefix, "norm1"), out);
        self.conv2.visit_mut(&join(prefix, "conv2"), out);
        self.norm2.visit_mut(&join(prefix, "norm2"), out);
    }
}

/// Channel width at each resolution level.
pub fn level_width(base: usize, level: usize) -> usize {
    base << level
}

/// UNet contracting path `1×H×W → c×(H/2^depth)×(W/2^depth)`.
#[derive(Clone, Debug)]
pub struct Encoder {
    inc: DoubleConv,
    downs: Vec<DoubleConv>,
    in_channels: usize,
}

pub struct EncoderCache {
    inc: DoubleConvCache,
    downs: Vec<(Vec<usize>, Vec<usize>, DoubleConvCache)>,
}

impl Encoder {
    pub fn new(
        rng: &mut impl Rng,
        in_channels: usize,
        base: usize,
        depth: usize,
        groups: usize,
    ) -> Self {
        let inc = DoubleConv::new(rng, in_channels, base, groups);
        let downs = (1..=depth)
            .map(|l| DoubleConv::new(rng, level_width(base, l - 1), level_width(base, l), groups))
            .collect();
        Encoder {
            inc,
            downs,
            in_channels,
        }
    }

    /// Returns the per-level features; the last one is the bottleneck.
    pub fn forward(&self, image: &Tensor) -> Result<(Vec<Tensor>, EncoderCache)> {
        let (c, h, w) = image.dims3()?;
        let factor = 1 << self.downs.len();
        if c != self.in_channels || h % factor != 0 || w % factor != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "encoder input",
                format!("{}xHxW with H, W multiples of {factor}", self.in_channels),
                format!("{c}x{h}x{w}"),
            ));
        }
        let (x, inc) = self.inc.forward(image)?;
        let mut feats = vec![x];
        let mut downs = Vec::with_capacity(self.downs.len());
        for block in &self.downs {
            let prev = feats.last().expect("non-empty");
            let (pooled, argmax) = max_pool2(prev)?;
            let (y, cache) = block.forward(&pooled)?;
            downs.push((prev.shape().to_vec(), argmax, cache));
            feats.push(y);
        }
        Ok((feats, EncoderCache { inc, downs }))
    }

    /// `dfeats[l]` is the gradient reaching level `l` (skip or bottleneck).
    pub fn backward(&mut self, cache: &EncoderCache, mut dfeats: Vec<Tensor>) {
        for l in (0..self.downs.len()).rev() {
            let (shape, argmax, c) = &cache.downs[l];
            let d = self.downs[l]
                .backward(c, &dfeats[l + 1], true)
                .expect("requested dx");
            let d = max_pool2_backward(shape, argmax, &d);
            dfeats[l].add_assign(&d);
        }
        self.inc.backward(&cache.inc, &dfeats[0], false);
    }
}

impl Parameters for Encoder {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.inc.visit(&join(prefix, "inc"), out);
        for (i, d) in self.downs.iter().enumerate() {
            d.visit(&join(prefix, &format!("down{}", i + 1)), out);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.inc.visit_mut(&join(prefix, "inc"), out);
        for (i, d) in self.downs.iter_mut().enumerate() {
            d.visit_mut(&join(prefix, &format!("down{}", i + 1)), out);
        }
    }
}

/// UNet expanding path with skip connections from the encoder levels.
#[derive(Clone, Debug)]
pub struct Decoder {
    ups: Vec<(UpConv2x2, DoubleConv)>,
    head: Conv2d,
    bottleneck_channels: usize,
}

pub struct DecoderCache {
    ups: Vec<(UpConvCache, DoubleConvCache)>,
    head: Conv2dCache,
}

impl Decoder {
    pub fn new(rng: &mut impl Rng, base: usize, depth: usize, groups: usize) -> Self {
        // Built top-down from the bottleneck.
        let ups = (0..depth)
            .rev()
            .map(|l| {
                let cin = level_width(base, l + 1);
                let cout = level_width(base, l);
                (
                    UpConv2x2::new(rng, cin, cout),
                    DoubleConv::new(rng, 2 * cout, cout, groups),
                )
            })
            .collect();
        Decoder {
            ups,
            head: Conv2d::new(rng, base, 1, 1),
            bottleneck_channels: level_width(base, depth),
        }
    }

    /// `skips` are the encoder features below the bottleneck (finest first).
    pub fn forward(&self, x: &Tensor, skips: &[Tensor]) -> Result<(Tensor, DecoderCache)> {
        let (c, _, _) = x.dims3()?;
        if c != self.bottleneck_channels {
            return Err(Error::shape(
                "decoder input channels",
                self.bottleneck_channels,
                c,
            ));
        }
        if skips.len() != self.ups.len() {
            return Err(Error::shape(
                "decoder skip count",
                self.ups.len(),
                skips.len(),
            ));
        }
        let mut y = x.clone();
        let mut ups = Vec::with_capacity(self.ups.len());
        for (i, (up, block)) in self.ups.iter().enumerate() {
            let (u, uc) = up.forward(&y)?;
            let skip = &skips[skips.len() - 1 - i];
            let cat = concat_channels(skip, &u)?;
            let (z, bc) = block.forward(&cat)?;
            ups.push((uc, bc));
            y = z;
        }
        let (p, head) = self.head.forward(&y)?;
        Ok((p, DecoderCache { ups, head }))
    }

    /// Returns the gradient for the decoder input and for each skip
    /// (finest first).
    pub fn backward(&mut self, cache: &DecoderCache, dp: &Tensor) -> (Tensor, Vec<Tensor>) {
        let mut d = self
            .head
            .backward(&cache.head, dp, true)
            .expect("requested dx");
        let n = self.ups.len();
        let mut dskips = vec![Tensor::zeros(&[0]); n];
        for i in (0..n).rev() {
            let (up, block) = &mut self.ups[i];
            let (uc, bc) = &cache.ups[i];
            let dcat = block.backward(bc, &d, true).expect("requested dx");
            let skip_channels = dcat.shape()[0] / 2;
            let (dskip, du) = split_channels(&dcat, skip_channels);
            dskips[n - 1 - i] = dskip;
            d = up.backward(uc, &du);
        }
        (d, dskips)
    }
}

impl Parameters for Decoder {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        for (i, (u, b)) in self.ups.iter().enumerate() {
            u.visit(&join(prefix, &format!("up{}.upconv", i + 1)), out);
            b.visit(&join(prefix, &format!("up{}.block", i + 1)), out);
        }
        self.head.visit(&join(prefix, "head"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        for (i, (u, b)) in self.ups.iter_mut().enumerate() {
            u.visit_mut(&join(prefix, &format!("up{}.upconv", i + 1)), out);
            b.visit_mut(&join(prefix, &format!("up{}.block", i + 1)), out);
        }
        self.head.visit_mut(&join(prefix, "head"), out);
    }
}
