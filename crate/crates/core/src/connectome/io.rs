use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;

use super::{
    Connectome, ConnectomeError, ConnectomeKind, EndpointRow, EndpointTable, Hemisphere,
    Parcellation, Result,
};

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(input)
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|source| ConnectomeError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn line_of(record: &csv::StringRecord) -> usize {
    record.position().map_or(0, |p| p.line() as usize)
}

/// Parses `name,hemisphere` lines. A first row of `name,hemisphere` is
/// treated as a header.
pub fn parse_parcellation<R: Read>(id: &str, input: R) -> Result<Parcellation> {
    let mut entries = Vec::new();
    for (n, record) in reader(input).records().enumerate() {
        let record = record?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        if n == 0
            && record.get(0).is_some_and(|s| s.eq_ignore_ascii_case("name"))
            && record.get(1).is_some_and(|s| s.eq_ignore_ascii_case("hemisphere"))
        {
            continue;
        }
        if record.len() != 2 {
            return Err(ConnectomeError::Parse {
                line: line_of(&record),
                message: format!("expected `name,hemisphere`, got {} fields", record.len()),
            });
        }
        let hemisphere: Hemisphere = record[1].parse()?;
        entries.push((record[0].to_string(), hemisphere));
    }
    Parcellation::new(id, entries)
}

/// Loads a parcellation file; its id is the file stem.
pub fn load_parcellation(path: impl AsRef<Path>) -> Result<Parcellation> {
    let path = path.as_ref();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_parcellation(&id, open(path)?)
}

/// Parses `region_a,region_b,count` rows (header optional).
pub fn parse_endpoints<R: Read>(input: R) -> Result<EndpointTable> {
    let mut rows = Vec::new();
    for (n, record) in reader(input).records().enumerate() {
        let record = record?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        if record.len() != 3 {
            return Err(ConnectomeError::Parse {
                line: line_of(&record),
                message: format!("expected `region_a,region_b,count`, got {} fields", record.len()),
            });
        }
        let count = match record[2].parse::<u64>() {
            Ok(c) => c,
            Err(_) if n == 0 => continue,
            Err(_) => {
                return Err(ConnectomeError::Parse {
                    line: line_of(&record),
                    message: format!("invalid streamline count `{}`", &record[2]),
                })
            }
        };
        rows.push(EndpointRow {
            region_a: record[0].to_string(),
            region_b: record[1].to_string(),
            count,
        });
    }
    Ok(rows)
}

pub fn load_endpoints(path: impl AsRef<Path>) -> Result<EndpointTable> {
    parse_endpoints(open(path.as_ref())?)
}

/// Reads a header-labelled dense matrix. Rows and columns may be in any
/// order but must name exactly the parcellation's regions.
pub fn read_connectome<R: Read>(
    input: R,
    parcellation: Arc<Parcellation>,
    kind: ConnectomeKind,
) -> Result<Connectome> {
    let n = parcellation.len();
    let mut records = reader(input).into_records();
    let header = loop {
        match records.next() {
            Some(r) => {
                let r = r?;
                if !r.iter().all(str::is_empty) {
                    break r;
                }
            }
            None => return Err(ConnectomeError::Empty),
        }
    };
    let columns: Vec<usize> = header
        .iter()
        .skip(1)
        .map(|name| {
            parcellation
                .index_of(name)
                .ok_or_else(|| ConnectomeError::UnknownRegion(name.to_string()))
        })
        .collect::<Result<_>>()?;
    if columns.len() != n {
        return Err(ConnectomeError::Dimension {
            rows: n,
            cols: columns.len(),
            expected: n,
        });
    }
    let mut weights = DMatrix::zeros(n, n);
    let mut seen = vec![false; n];
    let mut col_seen = vec![false; n];
    for &c in &columns {
        if std::mem::replace(&mut col_seen[c], true) {
            return Err(ConnectomeError::DuplicateRegion(
                parcellation.regions()[c].name.clone(),
            ));
        }
    }
    for record in records {
        let record = record?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        let line = line_of(&record);
        let row = parcellation
            .index_of(&record[0])
            .ok_or_else(|| ConnectomeError::UnknownRegion(record[0].to_string()))?;
        if std::mem::replace(&mut seen[row], true) {
            return Err(ConnectomeError::DuplicateRegion(record[0].to_string()));
        }
        if record.len() != n + 1 {
            return Err(ConnectomeError::Parse {
                line,
                message: format!("expected {} values, got {}", n, record.len() - 1),
            });
        }
        for (cell, &col) in record.iter().skip(1).zip(&columns) {
            weights[(row, col)] = cell.parse::<f64>().map_err(|_| ConnectomeError::Parse {
                line,
                message: format!("invalid number `{cell}`"),
            })?;
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(ConnectomeError::Parse {
            line: 0,
            message: format!("missing row for `{}`", parcellation.regions()[missing].name),
        });
    }
    Connectome::new(parcellation, weights, kind)
}

/// Writes any per-region square matrix with a labelled header row and column.
pub fn write_matrix_csv<W: Write, T: ToString>(
    out: W,
    parcellation: &Parcellation,
    cell: impl Fn(usize, usize) -> T,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let names = parcellation.regions().iter().map(|r| r.name.as_str());
    w.write_record(std::iter::once("region").chain(names))?;
    for (i, region) in parcellation.regions().iter().enumerate() {
        let mut row = vec![region.name.clone()];
        row.extend((0..parcellation.len()).map(|j| cell(i, j).to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|source| ConnectomeError::Io {
        path: "<csv>".into(),
        source,
    })
}

pub fn write_connectome<W: Write>(out: W, c: &Connectome) -> Result<()> {
    write_matrix_csv(out, c.parcellation(), |i, j| c.weight(i, j))
}
