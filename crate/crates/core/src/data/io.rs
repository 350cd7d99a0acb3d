//! Three-file CSV layout for one watershed:
//!
//! - `grids.csv`: `grid_id,x,y,dist_to_river`
//! - `series.csv`: `date,grid_id,precip_mm,runoff_mm`, exactly one row per grid per date
//! - `discharge.csv`: `date,discharge_m3s`, one row per date, same dates as `series.csv`

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;

use super::{DataError, GridCell, WatershedDataset};

const GRIDS_HEADER: [&str; 4] = ["grid_id", "x", "y", "dist_to_river"];
const SERIES_HEADER: [&str; 4] = ["date", "grid_id", "precip_mm", "runoff_mm"];
const DISCHARGE_HEADER: [&str; 2] = ["date", "discharge_m3s"];
const DATE_FORMAT: &str = "%Y-%m-%d";

struct CsvFile {
    path: PathBuf,
    reader: csv::Reader<fs::File>,
}

impl CsvFile {
    fn open(dir: &Path, name: &str, header: &[&str]) -> Result<Self, DataError> {
        let path = dir.join(name);
        let file = fs::File::open(&path).map_err(|source| DataError::Io {
            path: path.clone(),
            source,
        })?;
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
        let found = reader.headers().map_err(|e| DataError::Parse {
            file: path.clone(),
            line: 1,
            message: e.to_string(),
        })?;
        if found.iter().collect::<Vec<_>>() != header {
            return Err(DataError::Parse {
                file: path,
                line: 1,
                message: format!("expected header `{}`, found `{}`", header.join(","), found.iter().collect::<Vec<_>>().join(",")),
            });
        }
        Ok(Self { path, reader })
    }

    fn for_each_row(
        &mut self,
        mut f: impl FnMut(&csv::StringRecord, &Path, u64) -> Result<(), DataError>,
    ) -> Result<(), DataError> {
        let mut record = csv::StringRecord::new();
        loop {
            let more = self.reader.read_record(&mut record).map_err(|e| DataError::Parse {
                file: self.path.clone(),
                line: e.position().map(|p| p.line()).unwrap_or(0),
                message: e.to_string(),
            })?;
            if !more {
                return Ok(());
            }
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            f(&record, &self.path, line)?;
        }
    }
}

fn field<T: std::str::FromStr>(record: &csv::StringRecord, i: usize, name: &str, file: &Path, line: u64) -> Result<T, DataError> {
    let raw = record.get(i).ok_or_else(|| DataError::Parse {
        file: file.to_path_buf(),
        line,
        message: format!("missing field `{name}`"),
    })?;
    raw.trim().parse().map_err(|_| DataError::Parse {
        file: file.to_path_buf(),
        line,
        message: format!("cannot parse `{name}` from `{raw}`"),
    })
}

fn date_field(record: &csv::StringRecord, file: &Path, line: u64) -> Result<NaiveDate, DataError> {
    let raw = record.get(0).unwrap_or("");
    NaiveDate::parse_from_str(raw.trim(), DATE_FORMAT).map_err(|_| DataError::Parse {
        file: file.to_path_buf(),
        line,
        message: format!("cannot parse date `{raw}` (expected YYYY-MM-DD)"),
    })
}

fn finite(v: f64, name: &str, file: &Path, line: u64, non_negative: bool) -> Result<f64, DataError> {
    if !v.is_finite() || (non_negative && v < 0.0) {
        let rule = if non_negative { "finite and non-negative" } else { "finite" };
        return Err(DataError::Parse {
            file: file.to_path_buf(),
            line,
            message: format!("`{name}` = {v} must be {rule}"),
        });
    }
    Ok(v)
}

fn check_consecutive(dates: &[NaiveDate], file: &Path) -> Result<(), DataError> {
    for pair in dates.windows(2) {
        if pair[0].succ_opt() != Some(pair[1]) {
            return Err(DataError::DateGap {
                file: file.to_path_buf(),
                after: pair[0],
                next: pair[1],
            });
        }
    }
    Ok(())
}

/// Reads and validates a watershed directory; the dataset takes the directory's name.
pub fn load_watershed(dir: impl AsRef<Path>) -> Result<WatershedDataset, DataError> {
    let dir = dir.as_ref();
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "watershed".to_string());

    let mut grids = Vec::new();
    let mut grid_index: HashMap<u32, usize> = HashMap::new();
    CsvFile::open(dir, "grids.csv", &GRIDS_HEADER)?.for_each_row(|r, file, line| {
        let grid_id: u32 = field(r, 0, "grid_id", file, line)?;
        let x = finite(field(r, 1, "x", file, line)?, "x", file, line, false)?;
        let y = finite(field(r, 2, "y", file, line)?, "y", file, line, false)?;
        let dist = finite(field(r, 3, "dist_to_river", file, line)?, "dist_to_river", file, line, true)?;
        if grid_index.insert(grid_id, grids.len()).is_some() {
            return Err(DataError::Parse {
                file: file.to_path_buf(),
                line,
                message: format!("duplicate grid_id {grid_id}"),
            });
        }
        grids.push(GridCell { grid_id, x, y, dist_to_river: dist });
        Ok(())
    })?;
    let l = grids.len();
    if l == 0 {
        return Err(DataError::Invalid(format!("{}: no grids", dir.join("grids.csv").display())));
    }

    let mut series: BTreeMap<NaiveDate, Vec<Option<(f64, f64)>>> = BTreeMap::new();
    let series_path = dir.join("series.csv");
    CsvFile::open(dir, "series.csv", &SERIES_HEADER)?.for_each_row(|r, file, line| {
        let date = date_field(r, file, line)?;
        let grid_id: u32 = field(r, 1, "grid_id", file, line)?;
        let p = finite(field(r, 2, "precip_mm", file, line)?, "precip_mm", file, line, true)?;
        let q = finite(field(r, 3, "runoff_mm", file, line)?, "runoff_mm", file, line, true)?;
        let &g = grid_index.get(&grid_id).ok_or_else(|| DataError::Parse {
            file: file.to_path_buf(),
            line,
            message: format!("grid_id {grid_id} is not listed in grids.csv"),
        })?;
        let slot = &mut series.entry(date).or_insert_with(|| vec![None; l])[g];
        if slot.is_some() {
            return Err(DataError::Parse {
                file: file.to_path_buf(),
                line,
                message: format!("duplicate row for grid_id {grid_id} on {date}"),
            });
        }
        *slot = Some((p, q));
        Ok(())
    })?;
    let dates: Vec<NaiveDate> = series.keys().copied().collect();
    if dates.is_empty() {
        return Err(DataError::Invalid(format!("{}: no rows", series_path.display())));
    }
    check_consecutive(&dates, &series_path)?;
    let mut precip = vec![Vec::with_capacity(dates.len()); l];
    let mut runoff = vec![Vec::with_capacity(dates.len()); l];
    for (date, row) in &series {
        for (g, cell) in row.iter().enumerate() {
            let (p, q) = cell.ok_or_else(|| {
                DataError::Invalid(format!(
                    "{}: grid_id {} has no row on {date} (expected {l} rows per date)",
                    series_path.display(),
                    grids[g].grid_id
                ))
            })?;
            precip[g].push(p);
            runoff[g].push(q);
        }
    }

    let mut discharge_rows: Vec<(NaiveDate, f64, u64)> = Vec::with_capacity(dates.len());
    let discharge_path = dir.join("discharge.csv");
    CsvFile::open(dir, "discharge.csv", &DISCHARGE_HEADER)?.for_each_row(|r, file, line| {
        let date = date_field(r, file, line)?;
        let q = finite(field(r, 1, "discharge_m3s", file, line)?, "discharge_m3s", file, line, false)?;
        discharge_rows.push((date, q, line));
        Ok(())
    })?;
    discharge_rows.sort_by_key(|(d, _, _)| *d);
    if let Some(w) = discharge_rows.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(DataError::Parse {
            file: discharge_path,
            line: w[1].2,
            message: format!("duplicate row for {}", w[1].0),
        });
    }
    let discharge_dates: Vec<NaiveDate> = discharge_rows.iter().map(|(d, _, _)| *d).collect();
    check_consecutive(&discharge_dates, &discharge_path)?;
    if discharge_dates != dates {
        return Err(DataError::Invalid(format!(
            "{} covers {} days from {:?}, series.csv covers {} days from {}",
            discharge_path.display(),
            discharge_dates.len(),
            discharge_dates.first(),
            dates.len(),
            dates[0]
        )));
    }
    let discharge = discharge_rows.into_iter().map(|(_, q, _)| q).collect();

    WatershedDataset::new(name, grids, dates, precip, runoff, discharge)
}

/// Writes the three CSV files into `dir`, creating it if needed.
pub fn write_watershed(dataset: &WatershedDataset, dir: impl AsRef<Path>) -> Result<(), DataError> {
    let dir = dir.as_ref();
    let io_err = |path: PathBuf| move |source| DataError::Io { path, source };
    fs::create_dir_all(dir).map_err(io_err(dir.to_path_buf()))?;

    let mut grids = String::from("grid_id,x,y,dist_to_river\n");
    for g in dataset.grids() {
        grids.push_str(&format!("{},{},{},{}\n", g.grid_id, g.x, g.y, g.dist_to_river));
    }
    let mut series = String::from("date,grid_id,precip_mm,runoff_mm\n");
    let mut discharge = String::from("date,discharge_m3s\n");
    for (t, date) in dataset.dates().iter().enumerate() {
        let d = date.format(DATE_FORMAT).to_string();
        for (g, cell) in dataset.grids().iter().enumerate() {
            series.push_str(&format!(
                "{d},{},{},{}\n",
                cell.grid_id,
                dataset.precip()[g][t],
                dataset.runoff()[g][t]
            ));
        }
        discharge.push_str(&format!("{d},{}\n", dataset.discharge()[t]));
    }
    for (name, body) in [("grids.csv", grids), ("series.csv", series), ("discharge.csv", discharge)] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(io_err(path.clone()))?;
    }
    Ok(())
}
