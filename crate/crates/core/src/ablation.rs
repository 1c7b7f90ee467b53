//! Configuration sweeps over the training choices.
//!
//! Each table varies one aspect of the default configuration. Every cell is
//! trained from scratch on the same data and evaluated on the same
//! evaluation set, giving one comparison row.

use crate::config::{hex, Config};
use crate::dataset::split_by_kind;
use crate::error::Result;
use crate::geometry::{partition, ProposalRecord};
use crate::harness::evaluate_params;
use crate::prompt::ClassTokenTable;
use crate::scalar::Scalar;
use crate::trainer::{build_encoder, init_params, train_all};
use std::fmt::Write as _;

/// Table names accepted by [`cells`].
pub const TABLES: [&str; 7] = ["baseline", "bg_mode", "neg_fraction", "data_sources", "grading", "context_len", "position"];

/// One configuration of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub table: &'static str,
    pub label: String,
    /// Overrides applied on top of the base configuration.
    pub settings: Vec<(&'static str, String)>,
    /// Evaluate the initial context without training.
    pub untrained: bool,
}

fn cell(table: &'static str, label: impl Into<String>, settings: &[(&'static str, &str)]) -> AblationCell {
    AblationCell {
        table,
        label: label.into(),
        settings: settings.iter().map(|&(k, v)| (k, v.to_string())).collect(),
        untrained: false,
    }
}

/// All cells of the named tables, in table order.
pub fn cells(tables: &[&str]) -> Vec<AblationCell> {
    let mut out = Vec::new();
    for &t in TABLES.iter().filter(|t| tables.contains(t)) {
        match t {
            "baseline" => out.push(AblationCell {
                untrained: true,
                ..cell("baseline", "untrained", &[])
            }),
            "bg_mode" => {
                for m in ["no_bg", "learnable_bg", "soft_bg"] {
                    out.push(cell("bg_mode", m, &[("bg_mode", m)]));
                }
            }
            "neg_fraction" => {
                for f in ["0.1", "0.3", "0.5", "1.0"] {
                    out.push(cell("neg_fraction", f, &[("neg_fraction", f)]));
                }
            }
            "data_sources" => {
                for (label, fg, bg) in [("gt", false, false), ("gt+fg", true, false), ("gt+bg", false, true), ("gt+fg+bg", true, true)] {
                    let mut c = cell(
                        "data_sources",
                        label,
                        &[("use_gt", "true"), ("use_fg", if fg { "true" } else { "false" }), ("use_bg", if bg { "true" } else { "false" })],
                    );
                    if !bg {
                        c.settings.push(("bg_mode", "no_bg".into()));
                    }
                    out.push(c);
                }
            }
            "grading" => {
                for lo in ["0.5", "0.6", "0.7", "0.8", "0.9"] {
                    let hi = format!("{:.1}", lo.parse::<f64>().unwrap_or(0.5) + 0.1);
                    out.push(cell("grading", format!("range {lo}-{hi}"), &[("grade_lo", lo), ("grade_hi", &hi), ("grade_step", "0.1")]));
                }
                for lo in ["0.5", "0.6", "0.7", "0.8"] {
                    let step = format!("{:.1}", 1.0 - lo.parse::<f64>().unwrap_or(0.5));
                    out.push(cell("grading", format!("range {lo}-1.0"), &[("grade_lo", lo), ("grade_hi", "1.0"), ("grade_step", &step)]));
                }
                for lo in ["0.5", "0.6", "0.7", "0.8"] {
                    out.push(cell("grading", format!("ensemble ({lo}:1.0:0.1)"), &[("grade_lo", lo), ("grade_hi", "1.0"), ("grade_step", "0.1")]));
                }
            }
            "context_len" => {
                for l in ["4", "8", "16"] {
                    out.push(cell("context_len", l, &[("context_len", l)]));
                }
            }
            "position" => {
                for p in ["front", "middle", "end"] {
                    out.push(cell("position", p, &[("token_position", p)]));
                }
            }
            _ => {}
        }
    }
    out
}

/// Metrics of one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub table: &'static str,
    pub label: String,
    pub base_top1: f64,
    pub novel_top1: f64,
    pub novel_top5: f64,
    pub neg_max_prob: f64,
    pub neg_entropy: f64,
    pub groups: usize,
    pub config_hash: String,
}

/// Trains and evaluates one cell.
pub fn run_cell<T: Scalar>(
    base: &Config,
    cell: &AblationCell,
    train: &[ProposalRecord<T>],
    eval: &[ProposalRecord<T>],
    tokens: &ClassTokenTable<T>,
) -> Result<AblationRow> {
    let mut config = base.clone();
    for (k, v) in &cell.settings {
        config.set(k, v)?;
    }
    config.train.validate()?;
    let t = &config.train;
    let encoder = build_encoder::<T>(t);
    let hash = config.hash();
    let groups = if cell.untrained {
        vec![init_params::<T>(t)?]
    } else {
        let (gts, props) = split_by_kind(train.to_vec());
        let part = partition(&props, &gts, T::lit(t.iou_threshold))?;
        let run = train_all(&part, t, &encoder, tokens)?;
        run.groups.into_iter().map(|g| g.params).collect()
    };
    let report = evaluate_params(eval, &groups, &encoder, tokens, t, &hash)?;
    Ok(AblationRow {
        table: cell.table,
        label: cell.label.clone(),
        base_top1: report.base.top1,
        novel_top1: report.novel.top1,
        novel_top5: report.novel.top5,
        neg_max_prob: report.neg_max_prob,
        neg_entropy: report.neg_entropy,
        groups: groups.len(),
        config_hash: hex(&hash),
    })
}

/// Runs every cell of the named tables.
pub fn run_ablation<T: Scalar>(
    base: &Config,
    tables: &[&str],
    train: &[ProposalRecord<T>],
    eval: &[ProposalRecord<T>],
    tokens: &ClassTokenTable<T>,
) -> Result<Vec<AblationRow>> {
    cells(tables)
        .iter()
        .map(|c| run_cell(base, c, train, eval, tokens))
        .collect()
}

/// Tab-separated comparison table with a header line.
pub fn format_rows(rows: &[AblationRow]) -> String {
    let mut s = String::from("table\tcell\tbase_top1\tnovel_top1\tnovel_top5\tneg_max_prob\tneg_entropy\tgroups\tconfig_hash\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}\t{}",
            r.table,
            r.label,
            r.base_top1,
            r.novel_top1,
            r.novel_top5,
            r.neg_max_prob,
            r.neg_entropy,
            r.groups,
            &r.config_hash[..16]
        );
    }
    s
}
