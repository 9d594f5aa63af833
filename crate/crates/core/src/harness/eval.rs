//! Whole-image evaluation, per-dataset aggregation and CSV reports.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::image_io::{list_images, load_grayscale};
use crate::harness::metrics::{average_report, psnr, ssim};
use crate::pipeline::CsFormer;
use crate::tensor::Tensor;

const MEAN_ROW: &str = "__mean__";
const DIRECT_ROW: &str = "__direct__";
const WEIGHTED_ROW: &str = "__weighted__";

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub dataset: String,
    pub image: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSummary {
    pub name: String,
    pub count: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-image scores, per-dataset means and the direct / size-weighted
/// cross-dataset averages, each as `(psnr, ssim)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub ratio: f64,
    pub images: Vec<ImageScore>,
    pub datasets: Vec<DatasetSummary>,
    pub direct: (f64, f64),
    pub weighted: (f64, f64),
}

impl MetricReport {
    /// Aggregates per-image scores; datasets keep their first-seen order.
    pub fn from_scores(ratio: f64, images: Vec<ImageScore>) -> Result<Self> {
        let mut datasets: Vec<DatasetSummary> = Vec::new();
        for s in &images {
            match datasets.iter_mut().find(|d| d.name == s.dataset) {
                Some(d) => {
                    d.count += 1;
                    d.psnr += s.psnr;
                    d.ssim += s.ssim;
                }
                None => datasets.push(DatasetSummary { name: s.dataset.clone(), count: 1, psnr: s.psnr, ssim: s.ssim }),
            }
        }
        for d in &mut datasets {
            d.psnr /= d.count as f64;
            d.ssim /= d.count as f64;
        }
        let (dp, wp) = average_report(&datasets.iter().map(|d| (d.psnr, d.count)).collect::<Vec<_>>())?;
        let (ds, ws) = average_report(&datasets.iter().map(|d| (d.ssim, d.count)).collect::<Vec<_>>())?;
        Ok(MetricReport { ratio, images, datasets, direct: (dp, ds), weighted: (wp, ws) })
    }

    /// Columns `dataset,image,ratio,psnr_db,ssim`: one row per image, then a
    /// `__mean__` row per dataset and the `__direct__` / `__weighted__` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let fail = |e: csv::Error| Error::Usage(format!("cannot write CSV: {e}"));
        w.write_record(["dataset", "image", "ratio", "psnr_db", "ssim"]).map_err(fail)?;
        let ratio = self.ratio.to_string();
        let mut row = |a: &str, b: &str, p: f64, s: f64| w.write_record([a, b, &ratio, &p.to_string(), &s.to_string()]);
        for s in &self.images {
            row(&s.dataset, &s.image, s.psnr, s.ssim).map_err(fail)?;
        }
        for d in &self.datasets {
            row(&d.name, MEAN_ROW, d.psnr, d.ssim).map_err(fail)?;
        }
        row(DIRECT_ROW, "", self.direct.0, self.direct.1).map_err(fail)?;
        row(WEIGHTED_ROW, "", self.weighted.0, self.weighted.1).map_err(fail)?;
        w.flush().map_err(|e| Error::Usage(format!("cannot write CSV: {e}")))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file)
    }

    /// Re-reads the per-image rows of a CSV written by [`write_csv`] and
    /// recomputes every aggregate. Aggregate rows in the file are ignored.
    ///
    /// [`write_csv`]: MetricReport::write_csv
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let bad = |msg: String| Error::Usage(format!("malformed metrics CSV: {msg}"));
        let mut images = Vec::new();
        let mut ratio = None;
        for rec in r.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            if rec.len() != 5 {
                return Err(bad(format!("expected 5 columns, got {}", rec.len())));
            }
            let num = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(format!("not a number: {}", &rec[i])));
            ratio.get_or_insert(num(2)?);
            if rec[0].starts_with("__") || &rec[1] == MEAN_ROW {
                continue;
            }
            images.push(ImageScore {
                dataset: rec[0].to_string(),
                image: rec[1].to_string(),
                psnr: num(3)?,
                ssim: num(4)?,
            });
        }
        Self::from_scores(ratio.ok_or_else(|| bad("no rows".into()))?, images)
    }
}

/// Scores named images grouped into datasets.
pub fn evaluate_images(model: &CsFormer, datasets: &[(String, Vec<(String, Tensor)>)]) -> Result<MetricReport> {
    let mut scores = Vec::new();
    for (name, images) in datasets {
        for (image, truth) in images {
            let rec = model.reconstruct(truth)?;
            scores.push(ImageScore {
                dataset: name.clone(),
                image: image.clone(),
                psnr: psnr(&rec.image, truth, 1.0)?,
                ssim: ssim(&rec.image, truth)?,
            });
        }
    }
    MetricReport::from_scores(model.config().ratio, scores)
}

/// Evaluates every image directory; a directory's name is its dataset name.
/// When `expected_ratio` is given it must match the model's ratio.
pub fn evaluate(model: &CsFormer, dirs: &[PathBuf], expected_ratio: Option<f64>) -> Result<MetricReport> {
    if let Some(r) = expected_ratio {
        if (r - model.config().ratio).abs() > 1e-12 {
            return Err(Error::Usage(format!(
                "checkpoint was trained at ratio {}, evaluation asked for {r}",
                model.config().ratio
            )));
        }
    }
    let mut datasets = Vec::new();
    for dir in dirs {
        let name =
            dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string());
        let mut images = Vec::new();
        for path in list_images(dir)? {
            let stem = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            images.push((stem, load_grayscale(&path)?));
        }
        if images.is_empty() {
            return Err(Error::Usage(format!("{}: no images found", dir.display())));
        }
        datasets.push((name, images));
    }
    evaluate_images(model, &datasets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score(d: &str, i: &str, p: f64, s: f64) -> ImageScore {
        ImageScore { dataset: d.into(), image: i.into(), psnr: p, ssim: s }
    }

    #[test]
    fn equal_dataset_means_make_direct_equal_weighted() {
        let mut scores = Vec::new();
        for (k, n) in [1, 3, 2, 5, 4].iter().enumerate() {
            for i in 0..*n {
                scores.push(score(&format!("d{k}"), &format!("{i}"), 31.25, 0.875));
            }
        }
        let r = MetricReport::from_scores(0.1, scores).unwrap();
        assert_eq!(r.direct, r.weighted);
        assert_eq!(r.datasets.len(), 5);
    }

    #[test]
    fn csv_reaggregation_is_exact() {
        let scores = vec![
            score("a", "x.png", 30.123456789, 0.91),
            score("a", "y.png", 28.1, 0.8000000001),
            score("b", "z.pgm", f64::INFINITY, 1.0),
            score("c", "w.png", 1.0 / 3.0, -0.25),
        ];
        let r = MetricReport::from_scores(0.25, scores).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let back = MetricReport::from_csv(buf.as_slice()).unwrap();
        assert_eq!(back, r);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("dataset,image,ratio,psnr_db,ssim\n"));
        assert!(text.contains("__weighted__"));
    }
}
