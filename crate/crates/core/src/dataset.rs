//! Line-delimited JSON proposal files.
//!
//! One record per line:
//!
//! ```text
//! {"id":"p7","image_id":"img3","box":[0.0,0.0,10.0,10.0],"kind":"region_proposal",
//!  "label":null,"split":"base","embedding":[0.1, ...]}
//! ```
//!
//! Numbers are parsed as `f64` and written with the shortest representation
//! that reads back to the same bits. Unknown fields are rejected.

use crate::error::{Error, Result};
use crate::geometry::{BBox, ClassId, ProposalKind, ProposalRecord, Split};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    id: String,
    image_id: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    kind: KindTag,
    label: Option<String>,
    split: SplitTag,
    embedding: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum KindTag {
    GroundTruth,
    RegionProposal,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum SplitTag {
    Base,
    Novel,
}

/// Parses one record. `max_iou` is set to 1 for ground truths and 0
/// otherwise; [`crate::geometry::partition`] recomputes it.
pub fn parse_record<T: Scalar>(line: &str) -> Result<ProposalRecord<T>> {
    let l: Line = serde_json::from_str(line).map_err(|e| Error::data(e.to_string()))?;
    let [x1, y1, x2, y2] = l.bbox.map(T::lit);
    let bbox = BBox::new(x1, y1, x2, y2).map_err(|e| Error::data(format!("{}: {e}", l.id)))?;
    let kind = match l.kind {
        KindTag::GroundTruth => ProposalKind::GroundTruth,
        KindTag::RegionProposal => ProposalKind::RegionProposal,
    };
    if kind == ProposalKind::GroundTruth && l.label.is_none() {
        return Err(Error::data(format!("ground truth {} has no label", l.id)));
    }
    let embedding = match l.embedding {
        Some(v) => {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::data(format!("{}: non-finite embedding", l.id)));
            }
            Some(v.into_iter().map(T::lit).collect())
        }
        None => None,
    };
    Ok(ProposalRecord {
        id: l.id,
        image_id: l.image_id,
        bbox,
        kind,
        label: l.label.map(ClassId),
        split: match l.split {
            SplitTag::Base => Split::Base,
            SplitTag::Novel => Split::Novel,
        },
        max_iou: if kind == ProposalKind::GroundTruth {
            T::one()
        } else {
            T::zero()
        },
        embedding,
    })
}

/// Serializes one record as a single JSON line (without the newline).
pub fn format_record<T: Scalar>(r: &ProposalRecord<T>) -> String {
    let line = Line {
        id: r.id.clone(),
        image_id: r.image_id.clone(),
        bbox: [r.bbox.x1, r.bbox.y1, r.bbox.x2, r.bbox.y2].map(|v| v.to_f64_lossless()),
        kind: match r.kind {
            ProposalKind::GroundTruth => KindTag::GroundTruth,
            ProposalKind::RegionProposal => KindTag::RegionProposal,
        },
        label: r.label.as_ref().map(|c| c.0.clone()),
        split: match r.split {
            Split::Base => SplitTag::Base,
            Split::Novel => SplitTag::Novel,
        },
        embedding: r
            .embedding
            .as_ref()
            .map(|v| v.iter().map(|x| x.to_f64_lossless()).collect()),
    };
    serde_json::to_string(&line).expect("record serialization cannot fail")
}

/// Reads a whole file. Blank lines are skipped; every embedding must have
/// the same length.
pub fn read_records<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<ProposalRecord<T>>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut dim: Option<usize> = None;
    let mut ids = std::collections::HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ProposalRecord<T> = parse_record(&line)
            .map_err(|e| Error::data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if let Some(e) = &rec.embedding {
            match dim {
                None => dim = Some(e.len()),
                Some(d) if d != e.len() => {
                    return Err(Error::data(format!(
                        "{}:{}: embedding has {} values, earlier records have {d}",
                        path.display(),
                        i + 1,
                        e.len()
                    )))
                }
                _ => {}
            }
        }
        if !ids.insert(rec.id.clone()) {
            return Err(Error::data(format!(
                "{}:{}: duplicate id {}",
                path.display(),
                i + 1,
                rec.id
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records<T: Scalar>(path: impl AsRef<Path>, records: &[ProposalRecord<T>]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        writeln!(w, "{}", format_record(r)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Splits records into (ground truths, region proposals).
pub fn split_by_kind<T: Scalar>(
    records: Vec<ProposalRecord<T>>,
) -> (Vec<ProposalRecord<T>>, Vec<ProposalRecord<T>>) {
    records.into_iter().partition(|r| r.is_ground_truth())
}
