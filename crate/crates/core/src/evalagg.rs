//! Mean-rank tables from per-comparison ranking records.
//!
//! Input is line-delimited JSON, one record per (object, view, criterion):
//!
//! ```json
//! {"object_id": "chair_07", "view_id": "front", "criterion": "fidelity",
//!  "ranks": {"ours": 1, "baseline": 2, "other": 3}}
//! ```
//!
//! Mean ranks average first over the views of each object, then over
//! objects. A record that does not rank a method does not count toward that
//! method's mean.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::io::BufRead;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Fidelity,
    Clarity,
    Integration,
    Quality,
    Adaptation,
    Overall,
}

impl Criterion {
    pub const ALL: [Criterion; 6] = [
        Self::Fidelity,
        Self::Clarity,
        Self::Integration,
        Self::Quality,
        Self::Adaptation,
        Self::Overall,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Fidelity => "fidelity",
            Self::Clarity => "clarity",
            Self::Integration => "integration",
            Self::Quality => "quality",
            Self::Adaptation => "adaptation",
            Self::Overall => "overall",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown criterion {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingRecord {
    pub object_id: String,
    pub view_id: String,
    pub criterion: Criterion,
    pub ranks: BTreeMap<String, u32>,
}

impl RankingRecord {
    /// Ranks must be exactly `1..=M` for the `M` methods in the record.
    pub fn validate(&self, line: usize) -> Result<()> {
        let m = self.ranks.len();
        let mut seen = vec![false; m];
        for &r in self.ranks.values() {
            let idx = (r as usize).wrapping_sub(1);
            if idx >= m || seen[idx] {
                return Err(Error::NotAPermutation { line, methods: m });
            }
            seen[idx] = true;
        }
        if m == 0 {
            return Err(Error::NotAPermutation { line, methods: 0 });
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct ParsedRecords {
    pub records: Vec<RankingRecord>,
    /// Rejected lines (1-based) with the reason, in lenient mode.
    pub rejected: Vec<(usize, Error)>,
}

/// Reads line-delimited records. Blank lines are ignored.
///
/// In strict mode the first bad line is an error, and so is a stream with no
/// records. Otherwise bad lines are collected in
/// [`ParsedRecords::rejected`].
pub fn parse_records(reader: impl BufRead, strict: bool) -> Result<ParsedRecords> {
    let mut out = ParsedRecords::default();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::ParseError {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<RankingRecord>(&line)
            .map_err(|e| Error::ParseError {
                line: line_no,
                message: e.to_string(),
            })
            .and_then(|r| r.validate(line_no).map(|()| r));
        match parsed {
            Ok(r) => out.records.push(r),
            Err(e) if strict => return Err(e),
            Err(e) => out.rejected.push((line_no, e)),
        }
    }
    if strict && out.records.is_empty() {
        return Err(Error::ParseError {
            line: 0,
            message: "no records in stream".into(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Averaging {
    /// Mean over views within each object, then over objects.
    #[default]
    ViewThenObject,
    /// Plain mean over records.
    Flat,
}

/// Mean rank of every method for one criterion.
pub fn aggregate(records: &[RankingRecord], criterion: Criterion, averaging: Averaging) -> Result<BTreeMap<String, f64>> {
    let relevant: Vec<&RankingRecord> = records.iter().filter(|r| r.criterion == criterion).collect();
    if relevant.is_empty() {
        return Err(Error::NoRecords(criterion.to_string()));
    }
    // method -> object -> (rank sum, count); integer sums keep the result
    // independent of record order
    let mut sums: BTreeMap<&str, BTreeMap<&str, (u64, u64)>> = BTreeMap::new();
    for r in relevant {
        for (method, &rank) in &r.ranks {
            let object = match averaging {
                Averaging::ViewThenObject => r.object_id.as_str(),
                Averaging::Flat => "",
            };
            let e = sums.entry(method).or_default().entry(object).or_default();
            e.0 += u64::from(rank);
            e.1 += 1;
        }
    }
    Ok(sums
        .into_iter()
        .map(|(method, per_object)| {
            let mean = match averaging {
                Averaging::ViewThenObject => {
                    let total: f64 = per_object.values().map(|&(s, n)| s as f64 / n as f64).sum();
                    total / per_object.len() as f64
                }
                Averaging::Flat => {
                    let (s, n) = per_object[""];
                    s as f64 / n as f64
                }
            };
            (method.to_string(), mean)
        })
        .collect())
}

/// Two decimals, as ranks appear in result tables.
pub fn format_rank(value: f64) -> String {
    format!("{value:.2}")
}

/// Mean ranks for every criterion present in a record set.
#[derive(Debug, Clone, PartialEq)]
pub struct RankTable {
    pub criteria: Vec<Criterion>,
    pub methods: Vec<String>,
    /// `cells[method][criterion]`; `None` where a method was never ranked.
    pub cells: Vec<Vec<Option<f64>>>,
}

impl RankTable {
    pub fn build(records: &[RankingRecord], averaging: Averaging) -> Result<Self> {
        let criteria: Vec<Criterion> = Criterion::ALL
            .into_iter()
            .filter(|c| records.iter().any(|r| r.criterion == *c))
            .collect();
        if criteria.is_empty() {
            return Err(Error::NoRecords("any criterion".into()));
        }
        let columns = criteria
            .iter()
            .map(|&c| aggregate(records, c, averaging))
            .collect::<Result<Vec<_>>>()?;
        let mut methods: Vec<String> = columns.iter().flat_map(|c| c.keys().cloned()).collect();
        methods.sort();
        methods.dedup();
        let cells = methods
            .iter()
            .map(|m| columns.iter().map(|c| c.get(m).copied()).collect())
            .collect();
        Ok(Self {
            criteria,
            methods,
            cells,
        })
    }

    /// Space-aligned text table.
    pub fn render_text(&self) -> String {
        let header: Vec<String> = std::iter::once("method".to_string())
            .chain(self.criteria.iter().map(|c| c.to_string()))
            .collect();
        let rows: Vec<Vec<String>> = self
            .methods
            .iter()
            .zip(&self.cells)
            .map(|(m, cells)| {
                std::iter::once(m.clone())
                    .chain(cells.iter().map(|c| c.map_or("-".into(), format_rank)))
                    .collect()
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| {
                rows.iter()
                    .map(|r| r[i].len())
                    .chain(std::iter::once(header[i].len()))
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        for row in std::iter::once(&header).chain(&rows) {
            let line: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(i, cell)| {
                    if i == 0 {
                        format!("{cell:<w$}", w = widths[i])
                    } else {
                        format!("{cell:>w$}", w = widths[i])
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", line.join("  "));
        }
        out
    }

    pub fn render_csv(&self) -> String {
        let mut out = String::from("method");
        for c in &self.criteria {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
        for (m, cells) in self.methods.iter().zip(&self.cells) {
            out.push_str(&csv_field(m));
            for c in cells {
                out.push(',');
                if let Some(v) = c {
                    out.push_str(&format_rank(*v));
                }
            }
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(object: &str, view: &str, ranks: &[(&str, u32)]) -> RankingRecord {
        RankingRecord {
            object_id: object.into(),
            view_id: view.into(),
            criterion: Criterion::Fidelity,
            ranks: ranks.iter().map(|(m, r)| (m.to_string(), *r)).collect(),
        }
    }

    #[test]
    fn parse_valid_and_invalid() {
        let ok = r#"{"object_id":"o","view_id":"v","criterion":"overall","ranks":{"A":1,"B":2,"C":3}}"#;
        let dup = r#"{"object_id":"o","view_id":"v","criterion":"overall","ranks":{"A":1,"B":1,"C":3}}"#;
        let parsed = parse_records(ok.as_bytes(), true).unwrap();
        assert_eq!(parsed.records.len(), 1);
        assert_eq!(parsed.records[0].criterion, Criterion::Overall);

        let text = format!("{ok}\n\n{dup}\nnot json\n");
        assert!(matches!(
            parse_records(text.as_bytes(), true),
            Err(Error::NotAPermutation { line: 3, methods: 3 })
        ));
        let lenient = parse_records(text.as_bytes(), false).unwrap();
        assert_eq!(lenient.records.len(), 1);
        let lines: Vec<usize> = lenient.rejected.iter().map(|(l, _)| *l).collect();
        assert_eq!(lines, vec![3, 4]);
        assert!(matches!(lenient.rejected[1].1, Error::ParseError { line: 4, .. }));

        assert!(parse_records("".as_bytes(), false).unwrap().records.is_empty());
        assert!(parse_records("".as_bytes(), true).is_err());
    }

    #[test]
    fn one_method_three_objects() {
        let records = vec![
            rec("a", "v", &[("m", 1), ("n", 2), ("o", 3)]),
            rec("b", "v", &[("m", 2), ("n", 1), ("o", 3)]),
            rec("c", "v", &[("m", 3), ("n", 2), ("o", 1)]),
        ];
        let means = aggregate(&records, Criterion::Fidelity, Averaging::ViewThenObject).unwrap();
        assert_eq!(means["m"], 2.0);
        assert!(matches!(
            aggregate(&records, Criterion::Clarity, Averaging::ViewThenObject),
            Err(Error::NoRecords(_))
        ));
    }

    #[test]
    fn views_average_before_objects() {
        let records = vec![
            rec("a", "front", &[("m", 1), ("n", 2), ("o", 3)]),
            rec("a", "back", &[("m", 3), ("n", 2), ("o", 1)]),
            rec("b", "front", &[("m", 2), ("n", 1), ("o", 3)]),
        ];
        let two = aggregate(&records, Criterion::Fidelity, Averaging::ViewThenObject).unwrap();
        assert_eq!(two["m"], 2.0);
        // flat mean weights object a twice: (1 + 3 + 1)/3 for method n... and
        // (3 + 1 + 3)/3 for o, against per-object (2 + 3)/2
        let flat = aggregate(&records, Criterion::Fidelity, Averaging::Flat).unwrap();
        assert_eq!(two["o"], 2.5);
        assert!((flat["o"] - 7.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn missing_method_is_excluded() {
        let records = vec![rec("a", "v", &[("m", 1), ("n", 2)]), rec("b", "v", &[("m", 1)])];
        let means = aggregate(&records, Criterion::Fidelity, Averaging::ViewThenObject).unwrap();
        assert_eq!(means["n"], 2.0);
        assert_eq!(means["m"], 1.0);
    }

    #[test]
    fn table_rendering() {
        assert_eq!(format_rank(1.89), "1.89");
        assert_eq!(format_rank(2.0), "2.00");
        let records = vec![rec("a", "v", &[("ours", 1), ("base,x", 2)])];
        let t = RankTable::build(&records, Averaging::ViewThenObject).unwrap();
        assert_eq!(t.render_csv(), "method,fidelity\n\"base,x\",2.00\nours,1.00\n");
        assert_eq!(t.render_text(), "method  fidelity\nbase,x      2.00\nours        1.00\n");
    }
}
