//! File formats: dataset and covariate CSVs, curve CSVs, grid specs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use odesurv::model::{Dataset, Observation};

pub const VERSION: &str = concat!("odesurv ", env!("CARGO_PKG_VERSION"));

/// Round-trip exact text for an `f64`.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Column {
    Time,
    Status,
    X(String),
    Z(String),
    Id,
}

fn parse_header(header: &csv::StringRecord, need_outcome: bool) -> Result<Vec<Column>> {
    let mut cols = Vec::with_capacity(header.len());
    for name in header.iter() {
        let name = name.trim();
        let col = match name {
            "time" => Column::Time,
            "status" => Column::Status,
            "id" => Column::Id,
            _ => match name.split_once(':') {
                Some(("x", n)) if !n.is_empty() => Column::X(n.to_string()),
                Some(("z", n)) if !n.is_empty() => Column::Z(n.to_string()),
                _ => bail!("unrecognised column '{name}' (expected time, status, x:<name> or z:<name>)"),
            },
        };
        if cols.contains(&col) {
            bail!("duplicate column '{name}'");
        }
        cols.push(col);
    }
    if need_outcome && !(cols.contains(&Column::Time) && cols.contains(&Column::Status)) {
        bail!("data needs 'time' and 'status' columns");
    }
    Ok(cols)
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))
}

fn field(rec: &csv::StringRecord, k: usize, line: usize, what: &str) -> Result<f64> {
    let s = rec.get(k).unwrap_or("");
    let v: f64 = s.parse().with_context(|| format!("line {line}: {what} '{s}' is not a number"))?;
    if !v.is_finite() {
        bail!("line {line}: {what} must be finite");
    }
    Ok(v)
}

/// Reads `time,status,x:<name>...,z:<name>...`; `#` lines are comments.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut rdr = reader(path)?;
    let cols = parse_header(rdr.headers()?, true)?;
    let x_names: Vec<String> = cols.iter().filter_map(|c| if let Column::X(n) = c { Some(n.clone()) } else { None }).collect();
    let z_names: Vec<String> = cols.iter().filter_map(|c| if let Column::Z(n) = c { Some(n.clone()) } else { None }).collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(i + 2, |p| p.line() as usize);
        if rec.len() != cols.len() {
            bail!("line {line}: expected {} fields, found {}", cols.len(), rec.len());
        }
        let mut obs = Observation { y: 0.0, delta: false, x: Vec::new(), z: Vec::new() };
        for (k, c) in cols.iter().enumerate() {
            match c {
                Column::Time => {
                    obs.y = field(&rec, k, line, "time")?;
                    if obs.y < 0.0 {
                        bail!("line {line}: time must be nonnegative");
                    }
                }
                Column::Status => {
                    obs.delta = match &rec[k] {
                        "1" => true,
                        "0" => false,
                        other => bail!("line {line}: status must be 0 or 1, got '{other}'"),
                    }
                }
                Column::X(_) => obs.x.push(field(&rec, k, line, "covariate")?),
                Column::Z(_) => obs.z.push(field(&rec, k, line, "covariate")?),
                Column::Id => {}
            }
        }
        rows.push(obs);
    }
    if rows.is_empty() {
        bail!("{} has no data rows", path.display());
    }
    Ok(Dataset::new(rows, x_names, z_names)?)
}

pub fn write_dataset(path: &Path, data: &Dataset, comments: &[String]) -> Result<()> {
    let mut out = create(path)?;
    writeln!(out, "# {VERSION}")?;
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    let mut header = vec!["time".to_string(), "status".to_string()];
    header.extend(data.x_names.iter().map(|n| format!("x:{n}")));
    header.extend(data.z_names.iter().map(|n| format!("z:{n}")));
    writeln!(out, "{}", header.join(","))?;
    for o in &data.observations {
        let mut fields = vec![num(o.y), if o.delta { "1" } else { "0" }.to_string()];
        fields.extend(o.x.iter().chain(&o.z).map(|&v| num(v)));
        writeln!(out, "{}", fields.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// One covariate profile for prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub id: String,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
}

/// Reads `x:<name>` and `z:<name>` columns (any order, optional `id`) and
/// aligns them with the fitted names.
pub fn read_profiles(path: &Path, x_names: &[String], z_names: &[String]) -> Result<Vec<Profile>> {
    let mut rdr = reader(path)?;
    let cols = parse_header(rdr.headers()?, false)?;
    let pos = |want: &Column| cols.iter().position(|c| c == want);
    let x_pos = x_names
        .iter()
        .map(|n| pos(&Column::X(n.clone())).with_context(|| format!("covariates lack column x:{n}")))
        .collect::<Result<Vec<_>>>()?;
    let z_pos = z_names
        .iter()
        .map(|n| pos(&Column::Z(n.clone())).with_context(|| format!("covariates lack column z:{n}")))
        .collect::<Result<Vec<_>>>()?;
    let id_pos = pos(&Column::Id);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(i + 2, |p| p.line() as usize);
        if rec.len() != cols.len() {
            bail!("line {line}: expected {} fields, found {}", cols.len(), rec.len());
        }
        out.push(Profile {
            id: id_pos.map_or_else(|| (i + 1).to_string(), |k| rec[k].to_string()),
            x: x_pos.iter().map(|&k| field(&rec, k, line, "covariate")).collect::<Result<_>>()?,
            z: z_pos.iter().map(|&k| field(&rec, k, line, "covariate")).collect::<Result<_>>()?,
        });
    }
    if out.is_empty() {
        bail!("{} has no covariate rows", path.display());
    }
    Ok(out)
}

/// `lo:step:hi`, inclusive of `hi` up to rounding, or a comma-separated list.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').map(str::trim).collect();
    let grid = match parts.as_slice() {
        [lo, step, hi] => {
            let (lo, step, hi): (f64, f64, f64) = (
                lo.parse().with_context(|| format!("bad grid start '{lo}'"))?,
                step.parse().with_context(|| format!("bad grid step '{step}'"))?,
                hi.parse().with_context(|| format!("bad grid end '{hi}'"))?,
            );
            if !(lo.is_finite() && hi.is_finite() && step > 0.0 && step.is_finite() && hi >= lo) {
                bail!("grid '{spec}' needs finite lo <= hi and a positive step");
            }
            let n = ((hi - lo) / step + 1e-9).floor() as usize;
            if n > 1_000_000 {
                bail!("grid '{spec}' has too many points");
            }
            (0..=n).map(|k| lo + k as f64 * step).collect()
        }
        [_] => spec
            .split(',')
            .map(|s| s.trim().parse::<f64>().with_context(|| format!("bad grid point '{s}'")))
            .collect::<Result<Vec<_>>>()?,
        _ => bail!("grid '{spec}' must be lo:step:hi or a comma-separated list"),
    };
    if grid.is_empty() || grid.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        bail!("grid '{spec}' must hold finite nonnegative points");
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        bail!("grid '{spec}' must be nondecreasing");
    }
    Ok(grid)
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

/// CSV with a version comment; cells are written as given.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = create(path)?;
    writeln!(out, "# {VERSION}")?;
    writeln!(out, "{}", header.join(","))?;
    for r in rows {
        writeln!(out, "{}", r.join(","))?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_range_includes_end() {
        let g = parse_grid("0:0.02:2").unwrap();
        assert_eq!(g.len(), 101);
        assert!((g[100] - 2.0).abs() < 1e-12);
        assert_eq!(parse_grid("0.5, 1, 3").unwrap(), vec![0.5, 1.0, 3.0]);
    }

    #[test]
    fn grid_rejects_bad_specs() {
        for bad in ["", "0:0:1", "1:0.1:0", "a:1:2", "0:1", "2,1", "-1:1:2"] {
            assert!(parse_grid(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, 1.0 / 3.0, 1e-300, 123456.789, -2.5e17] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v);
        }
    }
}
