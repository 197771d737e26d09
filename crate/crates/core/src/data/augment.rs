use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ImageTextSample, Mask};
use crate::attr_text::{AttributeLabels, AttributeParser, LEFT, RIGHT};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Rotation angle is drawn uniformly from `[-max, +max]` degrees.
    pub max_rotation_deg: f64,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_rotation_deg: 15.0,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            max_rotation_deg: 0.0,
            hflip_prob: 0.0,
            vflip_prob: 0.0,
        }
    }
}

/// Inverse-maps output pixel centres to source coordinates.
fn source_coord(
    y: usize,
    x: usize,
    h: usize,
    w: usize,
    cos: f64,
    sin: f64,
    hflip: bool,
    vflip: bool,
) -> (f64, f64) {
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
    // Output = flip(rotate(input)); undo the flip then rotate back.
    let dx = if hflip { -dx } else { dx };
    let dy = if vflip { -dy } else { dy };
    let sx = cos * dx + sin * dy;
    let sy = -sin * dx + cos * dy;
    (sy + cy - 0.5, sx + cx - 0.5)
}

fn bilinear(img: &[f64], h: usize, w: usize, sy: f64, sx: f64) -> f64 {
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
    let at = |y: usize, x: usize| img[y * w + x];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
        + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

fn nearest(h: usize, w: usize, sy: f64, sx: f64) -> (usize, usize) {
    (
        (sy.round().max(0.0) as usize).min(h - 1),
        (sx.round().max(0.0) as usize).min(w - 1),
    )
}

/// Remaps zone categories so labels describe the flipped anatomy.
fn flip_labels(
    parser: &AttributeParser,
    labels: &AttributeLabels,
    hflip: bool,
    vflip: bool,
) -> AttributeLabels {
    let tax = parser.taxonomy();
    let mut out = *labels;
    if vflip {
        for m in [LEFT, RIGHT] {
            let mirrored = match tax.value(m, out.categories[m]) {
                "upper" => "lower",
                "lower" => "upper",
                "upper middle" => "middle lower",
                "middle lower" => "upper middle",
                v => v,
            };
            if let Some(c) = tax.index_of(m, mirrored) {
                out.categories[m] = c;
            }
        }
    }
    if hflip {
        out.categories.swap(LEFT, RIGHT);
    }
    out
}

/// Randomly rotates and flips image and masks together, keeping the
/// attribute targets and both text renderings consistent with the result.
pub fn augment(
    sample: &ImageTextSample,
    config: &AugmentConfig,
    parser: &AttributeParser,
    rng: &mut impl Rng,
) -> Result<ImageTextSample> {
    let (h, w) = (sample.height(), sample.width());
    let angle = if config.max_rotation_deg > 0.0 {
        rng.random_range(-config.max_rotation_deg..=config.max_rotation_deg)
            .to_radians()
    } else {
        0.0
    };
    let hflip = config.hflip_prob > 0.0 && rng.random_bool(config.hflip_prob.min(1.0));
    let vflip = config.vflip_prob > 0.0 && rng.random_bool(config.vflip_prob.min(1.0));
    if angle == 0.0 && !hflip && !vflip {
        return Ok(sample.clone());
    }
    let (sin, cos) = angle.sin_cos();
    let coords: Vec<(f64, f64)> = (0..h * w)
        .map(|i| source_coord(i / w, i % w, h, w, cos, sin, hflip, vflip))
        .collect();

    let src = sample.image.data();
    let image = Tensor::from_vec(
        &[1, h, w],
        coords
            .iter()
            .map(|&(sy, sx)| bilinear(src, h, w, sy, sx))
            .collect(),
    )?;
    let warp = |m: &Mask| {
        Mask::from_fn(h, w, |y, x| {
            let (sy, sx) = coords[y * w + x];
            let (ny, nx) = nearest(h, w, sy, sx);
            m.get(ny, nx)
        })
    };

    let mut out = sample.clone();
    out.image = image;
    out.coarse_mask = warp(&sample.coarse_mask);
    out.gt_mask = sample.gt_mask.as_ref().map(warp);
    if hflip || vflip {
        let labels = flip_labels(parser, &sample.attr_labels, hflip, vflip);
        if labels != sample.attr_labels {
            out.attr_labels = labels;
            out.attr_description = parser.to_attribute_description(&labels)?;
            out.raw_text = parser.render_sentence(&labels)?;
        }
    }
    Ok(out)
}
