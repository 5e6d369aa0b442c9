//! CSV and JSON import/export.
//!
//! Floats are written as `{:.16e}` (17 significant digits, exact round trip).
//! Kernel files start with one `# {json}` line carrying the grid, followed by
//! one row of kernel values per node.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::chain::ChainState;
use crate::error::{invalid, Error, Result};
use crate::field::FieldSample;
use crate::operator::{Grid, KernelGrid};
use crate::posterior::TrainingSet;

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// A table cell.
#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => fmt_f64(*v),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

/// Long-format table; an empty table still writes its header.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<Cell>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        if row.len() != header.len() {
            return Err(invalid(format!("row has {} cells, header has {}", row.len(), header.len())));
        }
        w.write_record(row.iter().map(Cell::render))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct GridHeader {
    dim: usize,
    nodes: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

pub fn write_kernel_csv(path: &Path, k: &KernelGrid) -> Result<()> {
    let header = GridHeader { dim: k.grid.dim(), nodes: k.grid.nodes().to_vec(), weights: k.grid.weights().to_vec() };
    let mut out = String::new();
    out.push_str("# ");
    out.push_str(&serde_json::to_string(&header)?);
    out.push('\n');
    for row in k.values.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_kernel_csv(path: &Path) -> Result<KernelGrid> {
    let file = fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let first = lines.next().ok_or_else(|| invalid("empty kernel file"))??;
    let json = first.strip_prefix('#').ok_or_else(|| invalid("kernel file must start with a '# {json}' grid line"))?;
    let header: GridHeader = serde_json::from_str(json.trim())?;
    let grid = Arc::new(Grid::new(header.nodes, header.weights)?);
    if grid.dim() != header.dim {
        return Err(invalid("grid header dim does not match its nodes"));
    }
    let n = grid.len();
    let mut values = Vec::with_capacity(n * n);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        for cell in line.split(',') {
            values.push(cell.trim().parse::<f64>().map_err(|e| invalid(format!("bad kernel value '{cell}': {e}")))?);
        }
    }
    if values.len() != n * n {
        return Err(invalid(format!("kernel file has {} values, expected {}", values.len(), n * n)));
    }
    KernelGrid::new(grid, DMatrix::from_row_slice(n, n, &values))
}

/// Rows are samples, columns grid nodes.
pub fn write_field_csv(path: &Path, s: &FieldSample) -> Result<()> {
    let header: Vec<String> = (0..s.values.ncols()).map(|j| format!("node_{j}")).collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<Cell>> = s.values.row_iter().map(|r| r.iter().map(|v| Cell::Float(*v)).collect()).collect();
    write_table(path, &header_refs, &rows)
}

#[derive(Serialize)]
struct ChainMeta<'a> {
    n: usize,
    seed: crate::rng::SeedSpec,
    config: &'a crate::chain::NetworkConfig,
    widths: Vec<usize>,
    files: Vec<String>,
}

/// `layer_<ℓ>.csv` kernels for `ℓ = 1..L+1` plus `chain.json`.
pub fn write_chain_state(dir: &Path, state: &ChainState) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for l in 1..=state.config.depth + 1 {
        let name = format!("layer_{l}.csv");
        write_kernel_csv(&dir.join(&name), &state.layer(l).expect("layer in range").kernel())?;
        files.push(name);
    }
    let meta = ChainMeta { n: state.n, seed: state.seed, config: &state.config, widths: state.config.widths(state.n), files: files.clone() };
    write_json(&dir.join("chain.json"), &meta)?;
    files.push("chain.json".into());
    Ok(files)
}

/// Training data with a header row: columns named `x…` are input
/// coordinates, columns named `y…` responses, in file order.
pub fn read_training_csv(path: &Path, beta: f64) -> Result<TrainingSet> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header = r.headers()?.clone();
    let kinds: Vec<char> = header.iter().map(|h| h.chars().next().unwrap_or(' ').to_ascii_lowercase()).collect();
    if let Some(h) = header.iter().zip(&kinds).find(|(_, k)| **k != 'x' && **k != 'y') {
        return Err(invalid(format!("training column '{}' must start with x or y", h.0)));
    }
    let mut inputs = Vec::new();
    let mut responses = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (cell, kind) in rec.iter().zip(&kinds) {
            let v: f64 = cell.parse().map_err(|e| invalid(format!("bad training value '{cell}': {e}")))?;
            if *kind == 'x' {
                x.push(v);
            } else {
                y.push(v);
            }
        }
        inputs.push(x);
        responses.push(y);
    }
    TrainingSet::new(inputs, responses, beta)
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Write `contents` as UTF-8 text.
pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(Error::from)?;
    f.write_all(contents.as_bytes())?;
    Ok(())
}
