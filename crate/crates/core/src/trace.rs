//! Per-layer routing traces and their CSV form.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{LayerRole, RouterRecord};

pub const CSV_HEADER: &str = "layer_index,layer_role,sample_id,true_label,chosen_expert,logits";

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub layer_index: usize,
    pub layer_role: LayerRole,
    pub sample_id: usize,
    pub true_label: Option<usize>,
    pub chosen_expert: usize,
    pub logits: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoutingTrace {
    pub rows: Vec<TraceRow>,
}

impl RoutingTrace {
    /// Append the routers of one forward pass; `sample_offset` shifts the
    /// batch-local sample indices.
    pub fn extend_from(&mut self, routers: &[RouterRecord], sample_offset: usize) {
        for r in routers {
            for d in &r.decisions {
                self.rows.push(TraceRow {
                    layer_index: r.layer,
                    layer_role: r.role,
                    sample_id: sample_offset + d.sample_index,
                    true_label: d.true_label,
                    chosen_expert: d.chosen_expert,
                    logits: d.logits.clone(),
                });
            }
        }
    }

    /// Rows ordered by layer then sample.
    pub fn sorted(&self) -> Vec<&TraceRow> {
        let mut v: Vec<&TraceRow> = self.rows.iter().collect();
        v.sort_by_key(|r| (r.layer_index, r.sample_id));
        v
    }

    pub fn layer_count(&self) -> usize {
        self.rows
            .iter()
            .map(|r| r.layer_index + 1)
            .max()
            .unwrap_or(0)
    }

    /// CSV text; `comment` becomes a leading `# ` line.
    pub fn to_csv(&self, comment: Option<&str>) -> String {
        let mut s = String::new();
        if let Some(c) = comment {
            writeln!(s, "# {c}").expect("string write");
        }
        writeln!(s, "{CSV_HEADER}").expect("string write");
        for r in self.sorted() {
            let logits: Vec<String> = r.logits.iter().map(|v| v.to_string()).collect();
            writeln!(
                s,
                "{},{},{},{},{},{}",
                r.layer_index,
                r.layer_role.as_str(),
                r.sample_id,
                r.true_label.map_or(String::new(), |l| l.to_string()),
                r.chosen_expert,
                logits.join(";")
            )
            .expect("string write");
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |i: usize, m: &str| Error::Data(format!("trace line {}: {m}", i + 1));
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty());
        match lines.next() {
            Some((_, h)) if h.trim() == CSV_HEADER => {}
            _ => return Err(Error::Data("trace: missing header".into())),
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(i, "expected 6 fields"));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(i, "bad integer"));
            rows.push(TraceRow {
                layer_index: num(f[0])?,
                layer_role: f[1].parse()?,
                sample_id: num(f[2])?,
                true_label: if f[3].is_empty() {
                    None
                } else {
                    Some(num(f[3])?)
                },
                chosen_expert: num(f[4])?,
                logits: f[5]
                    .split(';')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<f64>().map_err(|_| bad(i, "bad logit")))
                    .collect::<Result<_>>()?,
            });
        }
        Ok(Self { rows })
    }
}
