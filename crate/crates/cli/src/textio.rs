//! Columnar text artifacts shared between commands: the learned-basis file,
//! key-value summaries, and plot-data tables. Every file starts with `#`
//! comment lines carrying the config hash and seed manifest; numeric payloads
//! that downstream commands reconstruct exactly use 17 fractional digits.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use probgain::behavior::{BehaviorBasis, SignalLayout};

use crate::error::{internal, parse_err, CliError};

/// Writes `# `-prefixed comments followed by the body.
pub fn write_with_comments(path: &Path, comments: &[String], body: &str) -> Result<(), CliError> {
    let mut out = String::new();
    for c in comments {
        let _ = writeln!(out, "# {c}");
    }
    out.push_str(body);
    std::fs::write(path, out).map_err(internal)
}

fn payload_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

/// Serializes an orthonormal window basis with its layout.
pub fn save_basis(
    path: &Path,
    basis: &BehaviorBasis,
    spectral_gap: Option<f64>,
    gap_warning: bool,
    comments: &[String],
) -> Result<(), CliError> {
    let layout = basis.layout();
    let mut body = String::new();
    let _ = writeln!(
        body,
        "layout {} {} {} {} {}",
        layout.p, layout.m, layout.q, layout.lag, layout.n_state
    );
    match spectral_gap {
        Some(g) => {
            let _ = writeln!(body, "spectral_gap {g:.17e}");
        }
        None => {
            let _ = writeln!(body, "spectral_gap none");
        }
    }
    let _ = writeln!(body, "gap_warning {}", u8::from(gap_warning));
    let f = basis.f();
    let _ = writeln!(body, "matrix f {} {}", f.nrows(), f.ncols());
    for r in 0..f.nrows() {
        let cells: Vec<String> = (0..f.ncols()).map(|c| format!("{:.17e}", f[(r, c)])).collect();
        let _ = writeln!(body, "{}", cells.join(" "));
    }
    write_with_comments(path, comments, &body)
}

pub fn load_basis(path: &Path) -> Result<BehaviorBasis, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| parse_err(path, e))?;
    let mut lines = payload_lines(&text);
    let bad = |line: usize, reason: &str| parse_err(path, format!("line {line}: {reason}"));

    let (ln, layout_line) =
        lines.next().ok_or_else(|| parse_err(path, "missing layout line"))?;
    let toks: Vec<&str> = layout_line.split_whitespace().collect();
    if toks.len() != 6 || toks[0] != "layout" {
        return Err(bad(ln, "expected `layout p m q lag n_state`"));
    }
    let nums: Vec<usize> = toks[1..]
        .iter()
        .map(|t| t.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| bad(ln, &e.to_string()))?;
    let layout = SignalLayout::new(nums[0], nums[1], nums[2], nums[3], nums[4])
        .map_err(|e| bad(ln, &e.to_string()))?;

    let mut f: Option<DMatrix<f64>> = None;
    while let Some((ln, line)) = lines.next() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks[0] {
            "spectral_gap" | "gap_warning" => continue,
            "matrix" => {
                if toks.len() != 4 || toks[1] != "f" {
                    return Err(bad(ln, "expected `matrix f rows cols`"));
                }
                let rows: usize = toks[2].parse().map_err(|e| bad(ln, &format!("{e}")))?;
                let cols: usize = toks[3].parse().map_err(|e| bad(ln, &format!("{e}")))?;
                let mut m = DMatrix::zeros(rows, cols);
                for r in 0..rows {
                    let (ln, line) = lines
                        .next()
                        .ok_or_else(|| parse_err(path, format!("matrix f truncated at row {r}")))?;
                    let cells: Vec<&str> = line.split_whitespace().collect();
                    if cells.len() != cols {
                        return Err(bad(ln, &format!("expected {cols} columns")));
                    }
                    for (c, cell) in cells.iter().enumerate() {
                        m[(r, c)] =
                            cell.parse::<f64>().map_err(|e| bad(ln, &format!("{e}")))?;
                    }
                }
                f = Some(m);
            }
            other => return Err(bad(ln, &format!("unknown field {other}"))),
        }
    }
    let f = f.ok_or_else(|| parse_err(path, "missing matrix f"))?;
    BehaviorBasis::new(layout, f).map_err(|e| parse_err(path, e))
}

/// Writes `key value` lines; values may contain spaces.
pub fn write_summary(
    path: &Path,
    entries: &[(String, String)],
    comments: &[String],
) -> Result<(), CliError> {
    let mut body = String::new();
    for (k, v) in entries {
        let _ = writeln!(body, "{k} {v}");
    }
    write_with_comments(path, comments, &body)
}

/// Parses `key value` lines into a map; the value is the line remainder.
pub fn parse_summary(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| parse_err(path, e))?;
    let mut map = BTreeMap::new();
    for (ln, line) in payload_lines(&text) {
        let (key, value) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| parse_err(path, format!("line {ln}: expected `key value`")))?;
        map.insert(key.to_string(), value.trim().to_string());
    }
    if map.is_empty() {
        return Err(parse_err(path, "summary carries no fields"));
    }
    Ok(map)
}

/// A whitespace-separated numeric table under a named-column header row.
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, name: &str, path: &Path) -> Result<Vec<f64>, CliError> {
        let idx = self
            .columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| parse_err(path, format!("missing column {name}")))?;
        Ok(self.rows.iter().map(|r| r[idx]).collect())
    }
}

pub fn read_table(path: &Path) -> Result<Table, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| parse_err(path, e))?;
    let mut lines = payload_lines(&text);
    let (_, header) = lines.next().ok_or_else(|| parse_err(path, "missing header row"))?;
    let columns: Vec<String> = header.split_whitespace().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (ln, line) in lines {
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| parse_err(path, format!("line {ln}: {e}")))?;
        if row.len() != columns.len() {
            return Err(parse_err(
                path,
                format!("line {ln}: {} cells under {} columns", row.len(), columns.len()),
            ));
        }
        rows.push(row);
    }
    Ok(Table { columns, rows })
}

pub fn write_table(
    path: &Path,
    comments: &[String],
    columns: &[String],
    rows: &[Vec<f64>],
) -> Result<(), CliError> {
    let mut body = String::new();
    let _ = writeln!(body, "{}", columns.join(" "));
    for row in rows {
        debug_assert_eq!(row.len(), columns.len());
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.12e}")).collect();
        let _ = writeln!(body, "{}", cells.join(" "));
    }
    write_with_comments(path, comments, &body)
}
