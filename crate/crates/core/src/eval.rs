//! Overlap metrics, dataset evaluation and the ablation sweep driver.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{ImageTextSample, Mask};
use crate::error::{Error, Result};
use crate::model::SegModel;
use crate::plot::{line_plot, Series};
use crate::trainer::Trainer;

fn overlap(a: &Mask, b: &Mask) -> Result<(usize, usize, usize)> {
    if !a.same_shape(b) {
        return Err(Error::shape(
            "metric inputs",
            format!("{}x{}", a.height(), a.width()),
            format!("{}x{}", b.height(), b.width()),
        ));
    }
    let inter = a
        .bits()
        .iter()
        .zip(b.bits())
        .filter(|(x, y)| **x != 0 && **y != 0)
        .count();
    Ok((inter, a.count(), b.count()))
}

/// `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
pub fn dice_metric(pred: &Mask, gt: &Mask) -> Result<f64> {
    let (i, a, b) = overlap(pred, gt)?;
    Ok(if a + b == 0 {
        1.0
    } else {
        2.0 * i as f64 / (a + b) as f64
    })
}

/// `|A∩B| / |A∪B|`; two empty masks score 1.
pub fn jaccard_metric(pred: &Mask, gt: &Mask) -> Result<f64> {
    let (i, a, b) = overlap(pred, gt)?;
    let union = a + b - i;
    Ok(if union == 0 {
        1.0
    } else {
        i as f64 / union as f64
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub dice: f64,
    pub jaccard: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub dice: f64,
    pub jaccard: f64,
    pub n_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_sample: Option<Vec<SampleMetrics>>,
}

fn summarize(metrics: Vec<SampleMetrics>, keep: bool) -> EvalResult {
    let n = metrics.len();
    // Sorted accumulation keeps the mean independent of dataset order.
    let mean = |f: fn(&SampleMetrics) -> f64| {
        let mut v: Vec<f64> = metrics.iter().map(f).collect();
        v.sort_by(f64::total_cmp);
        if n == 0 {
            0.0
        } else {
            v.iter().sum::<f64>() / n as f64
        }
    };
    EvalResult {
        dice: mean(|m| m.dice),
        jaccard: mean(|m| m.jaccard),
        n_samples: n,
        per_sample: keep.then_some(metrics),
    }
}

fn gt_of(sample: &ImageTextSample) -> Result<&Mask> {
    sample
        .gt_mask
        .as_ref()
        .ok_or_else(|| Error::MissingGroundTruth(sample.id.clone()))
}

/// Scores arbitrary predicted masks against each sample's ground truth.
pub fn evaluate_masks(
    dataset: &[ImageTextSample],
    preds: &[Mask],
    keep_per_sample: bool,
) -> Result<EvalResult> {
    if dataset.len() != preds.len() {
        return Err(Error::shape("predictions", dataset.len(), preds.len()));
    }
    let metrics = dataset
        .iter()
        .zip(preds)
        .map(|(s, p)| {
            let gt = gt_of(s)?;
            Ok(SampleMetrics {
                id: s.id.clone(),
                dice: dice_metric(p, gt)?,
                jaccard: jaccard_metric(p, gt)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(metrics, keep_per_sample))
}

/// The coarse masks themselves scored as predictions.
pub fn evaluate_coarse(dataset: &[ImageTextSample], keep_per_sample: bool) -> Result<EvalResult> {
    let preds: Vec<Mask> = dataset.iter().map(|s| s.coarse_mask.clone()).collect();
    evaluate_masks(dataset, &preds, keep_per_sample)
}

pub fn predict_mask(
    model: &SegModel,
    sample: &ImageTextSample,
    alpha: f64,
    use_attribute_text: bool,
) -> Result<Mask> {
    let tokens = SegModel::tokens_for(sample, use_attribute_text);
    let p = model.predict(&sample.image, &tokens)?;
    Mask::threshold(&p.map(crate::tensor::sigmoid), alpha)
}

/// Binarizes `σ(P) > alpha` per sample and averages Dice and Jaccard.
pub fn evaluate(
    model: &SegModel,
    dataset: &[ImageTextSample],
    alpha: f64,
    use_attribute_text: bool,
    keep_per_sample: bool,
) -> Result<EvalResult> {
    for s in dataset {
        gt_of(s)?;
    }
    let preds = dataset
        .iter()
        .map(|s| predict_mask(model, s, alpha, use_attribute_text))
        .collect::<Result<Vec<_>>>()?;
    evaluate_masks(dataset, &preds, keep_per_sample)
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// One swept key and its candidate values.
#[derive(Clone, Debug, PartialEq)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<String>,
}

impl std::str::FromStr for GridAxis {
    type Err = Error;

    /// `key=v1,v2,...`
    fn from_str(s: &str) -> Result<Self> {
        let (key, vals) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid axis {s:?} must look like key=v1,v2")))?;
        let values: Vec<String> = vals
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        if key.trim().is_empty() || values.is_empty() {
            return Err(Error::Config(format!(
                "grid axis {s:?} needs a key and at least one value"
            )));
        }
        Ok(GridAxis {
            key: key.trim().to_string(),
            values,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub assignments: Vec<(String, String)>,
    pub result: EvalResult,
    /// `result` scores the final model; this is the best epoch's Dice.
    pub best_dice: Option<f64>,
}

/// Cartesian product of the axes, first axis varying slowest.
pub fn grid_cells(axes: &[GridAxis]) -> Vec<Vec<(String, String)>> {
    let mut cells = vec![Vec::new()];
    for axis in axes {
        cells = cells
            .into_iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut cell = prefix.clone();
                    cell.push((axis.key.clone(), v.clone()));
                    cell
                })
            })
            .collect();
    }
    cells
}

/// Trains one model per grid cell from the shared base configuration and
/// evaluates each on `test`.
pub fn ablation_sweep(
    base: &RunConfig,
    axes: &[GridAxis],
    train: &[ImageTextSample],
    test: &[ImageTextSample],
) -> Result<Vec<SweepRow>> {
    grid_cells(axes)
        .into_iter()
        .map(|cell| {
            let mut cfg = base.clone();
            for (k, v) in &cell {
                cfg.set(k, v)?;
            }
            let (result, best_dice) = train_and_evaluate(&cfg, train, test)?;
            Ok(SweepRow {
                assignments: cell,
                result,
                best_dice,
            })
        })
        .collect()
}

/// Fits a fresh model for `cfg` and returns its final test metrics.
pub fn train_and_evaluate(
    cfg: &RunConfig,
    train: &[ImageTextSample],
    test: &[ImageTextSample],
) -> Result<(EvalResult, Option<f64>)> {
    let model = SegModel::new(
        cfg.model_config(),
        &crate::attr_text::AttributeTaxonomy::default(),
    )?;
    let tc = cfg.train_config();
    let mut trainer = Trainer::new(model, tc.clone())?;
    let history = trainer.fit(train, Some(test))?;
    let result = match history.epochs.last().and_then(|e| e.eval.clone()) {
        Some(r) => r,
        None => evaluate(
            &trainer.model,
            test,
            tc.weights.alpha,
            tc.use_attribute_text,
            false,
        )?,
    };
    Ok((result, history.best_dice))
}

pub fn write_results_tsv(mut w: impl Write, rows: &[SweepRow]) -> Result<()> {
    let keys: Vec<&str> = rows
        .first()
        .map(|r| r.assignments.iter().map(|(k, _)| k.as_str()).collect())
        .unwrap_or_default();
    let mut header: Vec<&str> = keys.clone();
    header.extend(["dice", "jaccard", "n_samples"]);
    writeln!(w, "{}", header.join("\t"))?;
    for r in rows {
        let mut cols: Vec<String> = r.assignments.iter().map(|(_, v)| v.clone()).collect();
        cols.push(format!("{:.6}", r.result.dice));
        cols.push(format!("{:.6}", r.result.jaccard));
        cols.push(r.result.n_samples.to_string());
        writeln!(w, "{}", cols.join("\t"))?;
    }
    Ok(())
}

pub fn write_results_markdown(mut w: impl Write, rows: &[SweepRow]) -> Result<()> {
    let keys: Vec<String> = rows
        .first()
        .map(|r| r.assignments.iter().map(|(k, _)| k.clone()).collect())
        .unwrap_or_default();
    let mut header = keys.clone();
    header.extend(["Dice (%)".to_string(), "Jaccard (%)".to_string()]);
    writeln!(w, "| {} |", header.join(" | "))?;
    writeln!(w, "|{}", "---|".repeat(header.len()))?;
    for r in rows {
        let mut cols: Vec<String> = r.assignments.iter().map(|(_, v)| v.clone()).collect();
        cols.push(format!("{:.2}", 100.0 * r.result.dice));
        cols.push(format!("{:.2}", 100.0 * r.result.jaccard));
        writeln!(w, "| {} |", cols.join(" | "))?;
    }
    Ok(())
}

/// Dice against the first swept key, one line per combination of the
/// remaining keys. Non-numeric values are plotted at their index.
pub fn plot_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let Some(first) = rows.first() else {
        return Err(Error::Config("nothing to plot".into()));
    };
    let x_key = first
        .assignments
        .first()
        .map(|(k, _)| k.clone())
        .unwrap_or_else(|| "run".into());
    let mut x_values: Vec<String> = Vec::new();
    for r in rows {
        let v = r
            .assignments
            .first()
            .map(|(_, v)| v.clone())
            .unwrap_or_default();
        if !x_values.contains(&v) {
            x_values.push(v);
        }
    }
    let numeric = x_values.iter().all(|v| v.parse::<f64>().is_ok());
    let mut series: Vec<Series> = Vec::new();
    for r in rows {
        let label = r
            .assignments
            .iter()
            .skip(1)
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(", ");
        let label = if label.is_empty() {
            "Dice".to_string()
        } else {
            label
        };
        let xv = r.assignments.first().map(|(_, v)| v.as_str()).unwrap_or("");
        let x = if numeric {
            xv.parse::<f64>().expect("checked numeric")
        } else {
            x_values.iter().position(|v| v == xv).unwrap_or(0) as f64
        };
        match series.iter_mut().find(|s| s.label == label) {
            Some(s) => s.points.push((x, 100.0 * r.result.dice)),
            None => series.push(Series {
                label,
                points: vec![(x, 100.0 * r.result.dice)],
            }),
        }
    }
    line_plot(
        path,
        &format!("Dice vs {x_key}"),
        &x_key,
        "Dice (%)",
        &series,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_and_jaccard_count_oracles() {
        let a = Mask::from_fn(10, 20, |y, _| y < 5);
        let b = Mask::from_fn(10, 20, |_, x| x < 10);
        assert_eq!(a.count(), 100);
        assert_eq!(b.count(), 100);
        assert!((dice_metric(&a, &b).unwrap() - 0.5).abs() < 1e-12);
        assert!((jaccard_metric(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(dice_metric(&a, &a).unwrap(), 1.0);
        let empty = Mask::zeros(10, 20);
        assert_eq!(dice_metric(&empty, &empty).unwrap(), 1.0);
        assert_eq!(jaccard_metric(&empty, &empty).unwrap(), 1.0);
        let c = Mask::from_fn(10, 20, |y, _| y >= 5);
        assert_eq!(dice_metric(&a, &c).unwrap(), 0.0);
        assert!(dice_metric(&a, &Mask::zeros(3, 3)).is_err());
    }

    #[test]
    fn grid_axes_parse_and_expand() {
        let a: GridAxis = "delta=0.5,0.7,0.9".parse().unwrap();
        let b: GridAxis = "use_aica=true,false".parse().unwrap();
        assert_eq!(a.values.len(), 3);
        let cells = grid_cells(&[a, b]);
        assert_eq!(cells.len(), 6);
        assert_eq!(
            cells[1],
            vec![
                ("delta".into(), "0.5".into()),
                ("use_aica".into(), "false".into())
            ]
        );
        assert!("delta".parse::<GridAxis>().is_err());
        assert!("delta=".parse::<GridAxis>().is_err());
    }

    #[test]
    fn reports_are_written() {
        let row = |d: &str, dice: f64| SweepRow {
            assignments: vec![("delta".into(), d.into())],
            result: EvalResult {
                dice,
                jaccard: dice / (2.0 - dice),
                n_samples: 4,
                per_sample: None,
            },
            best_dice: None,
        };
        let rows = vec![row("0.5", 0.4), row("0.7", 0.5), row("0.9", 0.45)];
        let mut tsv = Vec::new();
        write_results_tsv(&mut tsv, &rows).unwrap();
        let tsv = String::from_utf8(tsv).unwrap();
        assert_eq!(tsv.lines().count(), 4);
        assert!(tsv.starts_with("delta\tdice\tjaccard\tn_samples\n"));
        let mut md = Vec::new();
        write_results_markdown(&mut md, &rows).unwrap();
        assert!(String::from_utf8(md).unwrap().contains("| 0.7 | 50.00 |"));
        let dir = tempfile::tempdir().unwrap();
        let png = dir.path().join("sweep.png");
        plot_sweep(&png, &rows).unwrap();
        assert!(std::fs::metadata(&png).unwrap().len() > 0);
    }
}
