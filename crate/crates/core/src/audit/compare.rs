//! Factor deltas between report rows.

use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::report::{AuditReport, ReportRow, RunKey, TASKS};
use crate::embedding_store::Attribute;
use crate::error::{Error, Result};
use crate::metrics::{factor_deltas, SkewDelta};
use crate::num::mean;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Factor {
    Size,
    DataSize,
    Source,
}

impl Factor {
    pub const ALL: [Factor; 3] = [Factor::Size, Factor::DataSize, Factor::Source];

    fn field(self, k: &RunKey) -> &str {
        match self {
            Factor::Size => &k.size,
            Factor::DataSize => &k.data_size,
            Factor::Source => &k.model,
        }
    }

    /// Keys agree everywhere except this factor's field.
    fn varies_only(self, a: &RunKey, b: &RunKey) -> bool {
        a.dataset == b.dataset
            && a.debias == b.debias
            && (self == Factor::Size || a.size == b.size)
            && (self == Factor::DataSize || a.data_size == b.data_size)
            && (self == Factor::Source || a.model == b.model)
            && self.field(a) != self.field(b)
    }

    /// Which side of a pair comes first: smaller encoder, smaller corpus,
    /// open-data source.
    fn order(self, a: &str, b: &str) -> Ordering {
        match self {
            Factor::Size => size_rank(a).cmp(&size_rank(b)).then_with(|| a.cmp(b)),
            Factor::DataSize => match (parse_corpus_size(a), parse_corpus_size(b)) {
                (Some(x), Some(y)) => x.total_cmp(&y),
                (Some(_), None) => Ordering::Less,
                (None, Some(_)) => Ordering::Greater,
                (None, None) => a.cmp(b),
            },
            Factor::Source => source_rank(a).cmp(&source_rank(b)).then_with(|| a.cmp(b)),
        }
    }

    fn controlled(self, k: &RunKey) -> String {
        match self {
            Factor::Size => format!("{}@{}", k.model, k.data_size),
            Factor::DataSize => format!("{} {}", k.model, k.size),
            Factor::Source => format!("{}@{}", k.size, k.data_size),
        }
    }
}

impl std::fmt::Display for Factor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Factor::Size => "size",
            Factor::DataSize => "data-size",
            Factor::Source => "source",
        })
    }
}

fn size_rank(s: &str) -> usize {
    const KNOWN: [&str; 5] = ["B/32", "B/16", "L/14", "L/14@336", "H/14"];
    KNOWN.iter().position(|k| k.eq_ignore_ascii_case(s)).unwrap_or(KNOWN.len())
}

fn source_rank(s: &str) -> usize {
    match s.to_ascii_lowercase().as_str() {
        "openclip" | "oclip" => 0,
        _ => 1,
    }
}

/// "400M" -> 4e8, "2B" -> 2e9.
fn parse_corpus_size(s: &str) -> Option<f64> {
    let s = s.trim();
    let (num, mult) = match s.chars().last()? {
        'K' | 'k' => (&s[..s.len() - 1], 1e3),
        'M' | 'm' => (&s[..s.len() - 1], 1e6),
        'B' | 'b' | 'G' | 'g' => (&s[..s.len() - 1], 1e9),
        _ => (s, 1.0),
    };
    num.parse::<f64>().ok().map(|v| v * mult)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    /// Row `k` of the first report against row `k` of the second.
    Identity,
    Factor(Factor),
    /// All three factors over the union of both reports.
    Auto,
}

impl std::str::FromStr for Pairing {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Pairing::Identity),
            "size" => Ok(Pairing::Factor(Factor::Size)),
            "data-size" => Ok(Pairing::Factor(Factor::DataSize)),
            "source" => Ok(Pairing::Factor(Factor::Source)),
            "auto" => Ok(Pairing::Auto),
            other => Err(Error::Config(format!("unknown pairing {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factor: Option<Factor>,
    pub dataset: String,
    pub controlled: String,
    pub pair: String,
    pub first: RunKey,
    pub second: RunKey,
    pub attribute: Attribute,
    pub deltas: Vec<SkewDelta>,
    /// Mean of the defined task deltas.
    pub average: Option<f64>,
}

impl DeltaRow {
    pub fn delta(&self, task: &str) -> Option<f64> {
        self.deltas.iter().find(|d| d.task == task).and_then(|d| d.delta)
    }
}

fn delta_rows(
    factor: Option<Factor>,
    first: &ReportRow,
    second: &ReportRow,
) -> Result<Vec<DeltaRow>> {
    let (controlled, pair) = match factor {
        Some(f) => (
            f.controlled(&first.key),
            format!("{} vs {}", f.field(&first.key), f.field(&second.key)),
        ),
        None => (first.key.label(), format!("{} vs {}", first.key.label(), second.key.label())),
    };
    let mut out = Vec::new();
    for attribute in [Attribute::Gender, Attribute::Race] {
        let mut deltas = Vec::new();
        for a in first.skews.iter().filter(|s| s.attribute == attribute) {
            if let Some(b) = second.skew(attribute, &a.task) {
                deltas.push(factor_deltas(a, b)?);
            }
        }
        if deltas.is_empty() {
            continue;
        }
        deltas.sort_by_key(|d| TASKS.iter().position(|t| *t == d.task).unwrap_or(TASKS.len()));
        let defined: Vec<f64> = deltas.iter().filter_map(|d| d.delta).collect();
        out.push(DeltaRow {
            factor,
            dataset: first.key.dataset.clone(),
            controlled: controlled.clone(),
            pair: pair.clone(),
            first: first.key.clone(),
            second: second.key.clone(),
            attribute,
            average: mean(&defined),
            deltas,
        });
    }
    Ok(out)
}

fn factor_pairs(factor: Factor, rows: &[&ReportRow]) -> Result<Vec<DeltaRow>> {
    let mut out = Vec::new();
    for x in rows {
        for y in rows {
            if factor.varies_only(&x.key, &y.key)
                && factor.order(factor.field(&x.key), factor.field(&y.key)) == Ordering::Less
            {
                out.extend(delta_rows(Some(factor), x, y)?);
            }
        }
    }
    out.sort_by(|a, b| {
        (&a.dataset, &a.controlled, &a.first, &a.second, a.attribute)
            .cmp(&(&b.dataset, &b.controlled, &b.first, &b.second, b.attribute))
    });
    Ok(out)
}

/// Signed deltas `first - second` per attribute and task.
pub fn compare_runs(a: &AuditReport, b: &AuditReport, pairing: Pairing) -> Result<Vec<DeltaRow>> {
    let out = match pairing {
        Pairing::Identity => {
            let mut out = Vec::new();
            for ra in &a.rows {
                if let Some(rb) = b.row(&ra.key) {
                    out.extend(delta_rows(None, ra, rb)?);
                }
            }
            if out.is_empty() {
                return Err(Error::Mismatch(
                    "reports share no run with overlapping probes".into(),
                ));
            }
            out
        }
        Pairing::Factor(_) | Pairing::Auto => {
            let mut pool: Vec<&ReportRow> = a.rows.iter().collect();
            for r in &b.rows {
                if !pool.iter().any(|p| p.key == r.key) {
                    pool.push(r);
                }
            }
            let factors: &[Factor] = match &pairing {
                Pairing::Factor(f) => std::slice::from_ref(f),
                _ => &Factor::ALL,
            };
            let mut out = Vec::new();
            for f in factors {
                out.extend(factor_pairs(*f, &pool)?);
            }
            out
        }
    };
    Ok(out)
}

fn signed(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{:+.4}", v + 0.0))
}

pub fn write_deltas_csv<W: Write>(rows: &[DeltaRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "factor", "dataset", "controlled", "pair", "attribute", "crime", "comm", "agency", "average",
    ])?;
    for r in rows {
        w.write_record([
            r.factor.map_or_else(|| "identity".to_string(), |f| f.to_string()),
            r.dataset.clone(),
            r.controlled.clone(),
            r.pair.clone(),
            r.attribute.to_string(),
            signed(r.delta("crime")),
            signed(r.delta("comm")),
            signed(r.delta("agency")),
            signed(r.average),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
