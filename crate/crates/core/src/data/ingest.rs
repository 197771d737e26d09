use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use super::imageio::{read_gray_png, read_mask_png};
use super::saliency::{coarse_mask, SaliencyBackend};
use super::ImageTextSample;
use crate::attr_text::{read_text_tsv, AttributeParser};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct IngestOptions {
    pub height: usize,
    pub width: usize,
    pub tau: f64,
    /// Ground-truth masks for evaluation; looked up as `{id}.png` or
    /// `mask_{id}.png`.
    pub mask_dir: Option<PathBuf>,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            height: 224,
            width: 224,
            tau: 0.5,
            mask_dir: None,
        }
    }
}

fn find_file(dir: &Path, id: &str, prefixes: &[&str]) -> Result<PathBuf> {
    for prefix in prefixes {
        let p = dir.join(format!("{prefix}{id}.png"));
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::MissingFile(dir.join(format!("{id}.png"))))
}

fn dir_is_empty(dir: &Path) -> Result<bool> {
    Ok(!dir.exists() || std::fs::read_dir(dir)?.next().is_none())
}

/// Loads a directory of grayscale images plus a `sample_id<TAB>raw_text` file.
///
/// Attribute labels come from parsing each text row; coarse masks from the
/// supplied saliency backend. An empty image directory without a text file
/// yields an empty dataset.
pub fn ingest_qata(
    image_dir: &Path,
    text_tsv: &Path,
    parser: &AttributeParser,
    backend: &dyn SaliencyBackend,
    options: &IngestOptions,
) -> Result<Vec<ImageTextSample>> {
    if !text_tsv.exists() {
        if dir_is_empty(image_dir)? {
            return Ok(Vec::new());
        }
        return Err(Error::MissingFile(text_tsv.to_path_buf()));
    }
    let rows = read_text_tsv(BufReader::new(File::open(text_tsv)?))?;
    let size = Some((options.height, options.width));
    let mut samples = Vec::with_capacity(rows.len());
    for row in rows {
        let attr_labels = parser
            .parse(&row.raw_text)
            .map_err(|source| Error::SampleParse {
                sample_id: row.sample_id.clone(),
                source,
            })?;
        let attr_description = parser.to_attribute_description(&attr_labels)?;
        let image = read_gray_png(&find_file(image_dir, &row.sample_id, &[""])?, size)?;
        let coarse = coarse_mask(&image, backend, options.tau)?;
        let gt_mask = match &options.mask_dir {
            Some(dir) => Some(read_mask_png(
                &find_file(dir, &row.sample_id, &["", "mask_"])?,
                size,
            )?),
            None => None,
        };
        samples.push(ImageTextSample {
            id: row.sample_id,
            image,
            raw_text: row.raw_text,
            attr_description,
            attr_labels,
            coarse_mask: coarse,
            gt_mask,
        });
    }
    Ok(samples)
}
