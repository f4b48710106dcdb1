//! Editing benchmark: 8 editing features by 8 object/value classes, each
//! record swept over an editing-degree ladder with background preservation,
//! structural similarity, target score, and non-target preservation.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::ems::{edit, EditRequest, EmsConfig, Pipeline};
use crate::error::{Error, Result};
use crate::eval::metrics::{psnr, spearman, ssim};
use crate::toyworld::{render, AttributeSchema, EditRecord, MaskPair};

#[derive(Clone, Debug, Serialize)]
pub struct BenchConfig {
    pub alpha_ladder: Vec<f64>,
    pub ems: EmsConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { alpha_ladder: vec![0.0, 0.25, 0.5, 0.75, 1.0], ems: EmsConfig::default() }
    }
}

/// One CSV row of the report.
#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub record_id: String,
    pub alpha: f64,
    pub psnr_bg: f64,
    pub ssim: f64,
    pub attr_score: f64,
    pub preserved: bool,
    pub path: String,
}

#[derive(Clone, Debug, Serialize, Default)]
pub struct GroupSummary {
    pub rows: usize,
    pub preservation_rate: f64,
    pub mean_attr_score_at_full_degree: f64,
    pub mean_monotonicity: f64,
    pub monotone_records: usize,
    pub records: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub backend: String,
    pub alpha_ladder: Vec<f64>,
    pub rows: Vec<BenchRow>,
    pub per_feature: std::collections::BTreeMap<String, GroupSummary>,
    pub per_class: std::collections::BTreeMap<String, GroupSummary>,
    pub overall_preservation_rate: f64,
    pub mean_monotonicity: f64,
    pub min_monotonicity: f64,
    pub failures: usize,
}

/// 8 editing features x 8 object/value classes at toy scale. Sources are
/// bumped away from the target value so every record is a real edit.
pub fn generate_benchmark(schema: &AttributeSchema) -> Vec<EditRecord> {
    let features: [(usize, usize); 8] =
        [(0, 1), (0, 3), (1, 2), (1, 3), (2, 0), (2, 2), (3, 0), (3, 2)];
    let mut records = Vec::with_capacity(64);
    for (fi, &(attr, target)) in features.iter().enumerate() {
        for class in 0..8usize {
            let mut values = vec![
                class % schema.value_count(0),
                (class + 1) % schema.value_count(1),
                class % schema.value_count(2),
                (class + 2) % schema.value_count(3),
            ];
            if values[attr] == target {
                values[attr] = (target + 1) % schema.value_count(attr);
            }
            let source = crate::toyworld::SemanticTuple::new(values);
            records.push(EditRecord::build(
                schema,
                format!("f{fi}_c{class}"),
                &source,
                attr,
                target,
            ));
        }
    }
    records
}

/// Run every record over the ladder; records evaluate in parallel and the
/// report keeps record order, so output is deterministic.
pub fn run_benchmark(
    pipe: &Pipeline,
    records: &[EditRecord],
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    let per_record: Result<Vec<(Vec<BenchRow>, Option<f64>, bool)>> = records
        .par_iter()
        .enumerate()
        .map(|(ri, record)| {
            let source = record.source_tuple(pipe.schema)?;
            let (attr, target) = record.feature(pipe.schema)?;
            let (src_img, _) = render(pipe.schema, &source);
            let masks = MaskPair::from_rows(&record.background.iter().map(|r| r.iter().map(|b| !b).collect()).collect::<Vec<_>>());
            let mut rows = Vec::with_capacity(cfg.alpha_ladder.len());
            let mut scores = Vec::with_capacity(cfg.alpha_ladder.len());
            let mut any_failure = false;
            for &alpha in &cfg.alpha_ladder {
                let mut ems = cfg.ems.clone();
                ems.seed = cfg.ems.seed.wrapping_add(ri as u64);
                let req = EditRequest::single(src_img.clone(), attr, target, alpha);
                let out = edit(pipe, &req, &ems)?;
                if !out.success {
                    any_failure = true;
                }
                let decoded = pipe.protos.classify(&out.image);
                let preserved = (0..pipe.schema.attr_count())
                    .filter(|&a| a != attr)
                    .all(|a| decoded.values[a] == source.values[a]);
                let attr_score = pipe.protos.attribute_score(&out.image, attr, target);
                scores.push(attr_score);
                rows.push(BenchRow {
                    record_id: record.id.clone(),
                    alpha,
                    psnr_bg: psnr(&src_img, &out.image, Some(&masks.background))?,
                    ssim: ssim(&src_img, &out.image)?,
                    attr_score,
                    preserved,
                    path: out.trace.path_taken.to_string(),
                });
            }
            let rho = spearman(&cfg.alpha_ladder, &scores);
            Ok((rows, rho, any_failure))
        })
        .collect();

    let per_record = per_record?;
    let mut rows = Vec::new();
    let mut rhos = Vec::new();
    let mut failures = 0usize;
    for (r, rho, failed) in &per_record {
        rows.extend(r.iter().cloned());
        if let Some(rho) = rho {
            rhos.push(*rho);
        }
        if *failed {
            failures += 1;
        }
    }

    let mut per_feature = std::collections::BTreeMap::new();
    let mut per_class = std::collections::BTreeMap::new();
    for (record, (rrows, rho, _)) in records.iter().zip(&per_record) {
        for (key, map) in [
            (record.editing_feature.clone(), &mut per_feature),
            (record.object_class.clone(), &mut per_class),
        ] {
            let entry: &mut GroupSummary = map.entry(key).or_default();
            entry.records += 1;
            entry.rows += rrows.len();
            entry.preservation_rate +=
                rrows.iter().filter(|r| r.preserved).count() as f64 / rrows.len() as f64;
            if let Some(last) = rrows.last() {
                entry.mean_attr_score_at_full_degree += last.attr_score;
            }
            match rho {
                Some(r) => {
                    entry.mean_monotonicity += r;
                    entry.monotone_records += 1;
                }
                // Constant score ladders are trivially monotone.
                None => {
                    entry.mean_monotonicity += 1.0;
                    entry.monotone_records += 1;
                }
            }
        }
    }
    for map in [&mut per_feature, &mut per_class] {
        for entry in map.values_mut() {
            let n = entry.records as f64;
            entry.preservation_rate /= n;
            entry.mean_attr_score_at_full_degree /= n;
            entry.mean_monotonicity /= entry.monotone_records as f64;
        }
    }

    let preserved_rows = rows.iter().filter(|r| r.preserved).count();
    Ok(BenchReport {
        backend: pipe.backend.label(),
        alpha_ladder: cfg.alpha_ladder.clone(),
        overall_preservation_rate: preserved_rows as f64 / rows.len() as f64,
        mean_monotonicity: if rhos.is_empty() {
            1.0
        } else {
            rhos.iter().sum::<f64>() / rhos.len() as f64
        },
        min_monotonicity: rhos.iter().cloned().fold(f64::INFINITY, f64::min),
        rows,
        per_feature,
        per_class,
        failures,
    })
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

/// CSV: record-id, alpha, psnr_bg, ssim, attr_score, preserved, path.
pub fn write_report_csv(report: &BenchReport, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "record-id,alpha,psnr_bg,ssim,attr_score,preserved,path")?;
    for r in &report.rows {
        writeln!(
            f,
            "{},{},{},{:.6},{:.6},{},{}",
            r.record_id,
            r.alpha,
            fmt_db(r.psnr_bg),
            r.ssim,
            r.attr_score,
            r.preserved,
            r.path
        )?;
    }
    Ok(())
}

/// JSON summary without the row dump.
pub fn write_summary_json(report: &BenchReport, path: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Summary<'a> {
        backend: &'a str,
        alpha_ladder: &'a [f64],
        rows: usize,
        overall_preservation_rate: f64,
        mean_monotonicity: f64,
        min_monotonicity: f64,
        failures: usize,
        per_feature: &'a std::collections::BTreeMap<String, GroupSummary>,
        per_class: &'a std::collections::BTreeMap<String, GroupSummary>,
    }
    let s = Summary {
        backend: &report.backend,
        alpha_ladder: &report.alpha_ladder,
        rows: report.rows.len(),
        overall_preservation_rate: report.overall_preservation_rate,
        mean_monotonicity: report.mean_monotonicity,
        min_monotonicity: report.min_monotonicity,
        failures: report.failures,
        per_feature: &report.per_feature,
        per_class: &report.per_class,
    };
    std::fs::write(
        path,
        serde_json::to_string_pretty(&s).map_err(|e| Error::Format { context: e.to_string() })?,
    )?;
    Ok(())
}
