//! Reading data tables and vectors, writing numbers at full precision.

use std::fs;
use std::io::Write;
use std::path::Path;

use debias_core::model::Dataset;
use ndarray::Array2;

use crate::error::CliError;

/// 17 significant digits: enough to reproduce any `f64` exactly.
pub fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.to_ascii_lowercase().as_str(), "" | "na" | "nan")
}

struct Layout {
    y: usize,
    r: usize,
    /// Column of `X1`, `X2`, ... in order.
    x: Vec<usize>,
}

fn layout(header: &csv::StringRecord) -> Result<Layout, CliError> {
    let (mut y, mut r) = (None, None);
    let mut x: Vec<(usize, usize)> = Vec::new();
    for (col, name) in header.iter().enumerate() {
        let name = name.trim();
        let dup = |what: &str| CliError::input(format!("line 1: column {what} appears more than once"));
        match name {
            "Y" => {
                if y.replace(col).is_some() {
                    return Err(dup("Y"));
                }
            }
            "R" => {
                if r.replace(col).is_some() {
                    return Err(dup("R"));
                }
            }
            _ => match name.strip_prefix('X').and_then(|k| k.parse::<usize>().ok()) {
                Some(k) if k >= 1 => x.push((k, col)),
                _ => {
                    return Err(CliError::input(format!(
                        "line 1: unrecognized column {name:?}; expected Y, R, X1, X2, ..."
                    )))
                }
            },
        }
    }
    let y = y.ok_or_else(|| CliError::input("line 1: no Y column"))?;
    let r = r.ok_or_else(|| CliError::input("line 1: no R column"))?;
    x.sort_unstable();
    if x.is_empty() {
        return Err(CliError::input("line 1: no covariate columns X1, X2, ..."));
    }
    for (expect, &(k, _)) in (1..).zip(&x) {
        if k != expect {
            return Err(CliError::input(format!(
                "line 1: covariate columns must be X1..X{} without gaps or repeats; found X{k} where X{expect} was expected",
                x.len()
            )));
        }
    }
    Ok(Layout {
        y,
        r,
        x: x.into_iter().map(|(_, c)| c).collect(),
    })
}

/// Parses a comma-separated table with a header naming `Y`, `R` and
/// `X1..Xd` (any column order). `Y` may be empty, `NA` or `NaN` where `R = 0`.
pub fn parse_dataset(text: &str) -> Result<Dataset, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| CliError::input(format!("line 1: {e}")))?
        .clone();
    let layout = layout(&header)?;
    let d = layout.x.len();

    let mut y = Vec::new();
    let mut r = Vec::new();
    let mut x = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            CliError::input(format!("line {line}: {e}"))
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(CliError::input(format!(
                "line {line}: expected {} fields, found {}",
                header.len(),
                record.len()
            )));
        }
        let observed = match &record[layout.r] {
            "1" => true,
            "0" => false,
            other => {
                return Err(CliError::input(format!("line {line}: R must be 0 or 1, found {other:?}")));
            }
        };
        let y_cell = &record[layout.y];
        let yi = if is_missing(y_cell) {
            if observed {
                return Err(CliError::input(format!("line {line}: Y is missing but R = 1")));
            }
            f64::NAN
        } else {
            let v: f64 = y_cell
                .parse()
                .map_err(|_| CliError::input(format!("line {line}: Y is not a number: {y_cell:?}")))?;
            if !v.is_finite() {
                return Err(CliError::input(format!("line {line}: Y is not finite")));
            }
            v
        };
        for (k, &col) in layout.x.iter().enumerate() {
            let cell = &record[col];
            let v: f64 = cell.parse().map_err(|_| {
                CliError::input(format!("line {line}: X{} is not a number: {cell:?}", k + 1))
            })?;
            if !v.is_finite() {
                return Err(CliError::input(format!("line {line}: X{} is not finite", k + 1)));
            }
            x.push(v);
        }
        y.push(yi);
        r.push(observed);
    }
    if y.is_empty() {
        return Err(CliError::input("the table has no data rows"));
    }
    let n = y.len();
    let x = Array2::from_shape_vec((n, d), x).expect("row lengths checked");
    Dataset::new(y, r, x).map_err(CliError::from)
}

pub fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    let text = read_text(path)?;
    parse_dataset(&text).map_err(|e| e.in_file(path))
}

/// Writes `Y,R,X1..Xd` with missing outcomes left empty.
pub fn format_dataset(data: &Dataset) -> String {
    let d = data.d();
    let mut out = String::from("Y,R");
    for k in 1..=d {
        out.push_str(&format!(",X{k}"));
    }
    out.push('\n');
    let x = data.covariates();
    for i in 0..data.n() {
        let observed = data.observed()[i];
        if observed {
            out.push_str(&num(data.outcomes()[i]));
        }
        out.push_str(if observed { ",1" } else { ",0" });
        for k in 0..d {
            out.push(',');
            out.push_str(&num(x[[i, k]]));
        }
        out.push('\n');
    }
    out
}

/// Numbers separated by commas, whitespace or newlines; `#` starts a comment
/// and a leading header line of names is skipped.
pub fn parse_vector(text: &str) -> Result<Vec<f64>, CliError> {
    let mut values = Vec::new();
    let mut first = true;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()).collect();
        let header = first && tokens.iter().all(|t| t.starts_with(|c: char| c.is_ascii_alphabetic()) && t.parse::<f64>().is_err());
        first = false;
        if header {
            continue;
        }
        for t in tokens {
            let v: f64 = t
                .parse()
                .map_err(|_| CliError::input(format!("line {}: not a number: {t:?}", idx + 1)))?;
            if !v.is_finite() {
                return Err(CliError::input(format!("line {}: value is not finite", idx + 1)));
            }
            values.push(v);
        }
    }
    if values.is_empty() {
        return Err(CliError::input("no values found"));
    }
    Ok(values)
}

pub fn read_vector(path: &Path) -> Result<Vec<f64>, CliError> {
    let text = read_text(path)?;
    parse_vector(&text).map_err(|e| e.in_file(path))
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Writes to `path`, or to stdout when there is none.
pub fn emit(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| CliError::io(p, e)),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| CliError::io(Path::new("<stdout>"), e))
        }
    }
}
