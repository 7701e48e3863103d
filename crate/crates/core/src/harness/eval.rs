//! Full-reference evaluation of a directory of predictions against ground truth.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

use super::io::{list_images, read_image};
use super::metrics::{psnr_flagged, ssim_image};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalLine {
    pub file: String,
    pub psnr: f64,
    pub ssim: f64,
    /// PSNR is the identical-image sentinel.
    pub identical: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirEvaluation {
    pub lines: Vec<EvalLine>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Files present on only one side, skipped.
    pub missing: Vec<String>,
}

impl DirEvaluation {
    /// CSV with columns `file,psnr,ssim,identical` and a final `mean` row.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let err = |e: csv::Error| Error::Format {
            path: "<csv>".into(),
            detail: e.to_string(),
        };
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["file", "psnr", "ssim", "identical"])
            .map_err(err)?;
        for l in &self.lines {
            out.write_record([
                l.file.clone(),
                format!("{:.6}", l.psnr),
                format!("{:.6}", l.ssim),
                l.identical.to_string(),
            ])
            .map_err(err)?;
        }
        let all_identical = self.lines.iter().all(|l| l.identical);
        out.write_record([
            "mean".to_string(),
            format!("{:.6}", self.mean_psnr),
            format!("{:.6}", self.mean_ssim),
            all_identical.to_string(),
        ])
        .map_err(err)?;
        out.flush().map_err(|e| Error::Format {
            path: "<csv>".into(),
            detail: e.to_string(),
        })
    }
}

fn file_names(dir: &Path) -> Result<Vec<String>> {
    Ok(list_images(dir)?
        .into_iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect())
}

/// Scores every file name present in both directories.
pub fn eval_dirs(pred_dir: &Path, gt_dir: &Path) -> Result<DirEvaluation> {
    let pred = file_names(pred_dir)?;
    let gt = file_names(gt_dir)?;
    let common: Vec<&String> = pred.iter().filter(|p| gt.contains(p)).collect();
    let mut missing: Vec<String> = pred
        .iter()
        .chain(&gt)
        .filter(|n| !(pred.contains(n) && gt.contains(n)))
        .cloned()
        .collect();
    missing.sort();
    if common.is_empty() {
        return Err(Error::Contract(format!(
            "no file names shared between {} and {}",
            pred_dir.display(),
            gt_dir.display()
        )));
    }
    let mut lines = Vec::with_capacity(common.len());
    for name in common {
        let (p, g) = (
            read_image(&pred_dir.join(name))?,
            read_image(&gt_dir.join(name))?,
        );
        let (psnr, identical) = psnr_flagged(&p, &g)?;
        lines.push(EvalLine {
            file: name.clone(),
            psnr,
            ssim: ssim_image(&p, &g)?,
            identical,
        });
    }
    let n = lines.len() as f64;
    Ok(DirEvaluation {
        mean_psnr: lines.iter().map(|l| l.psnr).sum::<f64>() / n,
        mean_ssim: lines.iter().map(|l| l.ssim).sum::<f64>() / n,
        lines,
        missing,
    })
}
