//! Dataset directories:
//!
//! - `meta.json`: name, sample period, channel names and dimensions
//! - `values.csv`: T rows, one column `n{i}_c{j}` per node/channel, empty or `nan` = missing
//! - `mask.csv`: same layout, 1 = observed
//! - `eval_truth.csv`: `node,timestep,channel,value` for withheld entries
//! - `edges.csv`: `src,dst,weight`

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetMeta, SpatioTemporalDataset};
use crate::error::{Error, Result};
use crate::graphpart::SensorGraph;

pub const META_FILE: &str = "meta.json";
pub const VALUES_FILE: &str = "values.csv";
pub const MASK_FILE: &str = "mask.csv";
pub const TRUTH_FILE: &str = "eval_truth.csv";
pub const EDGES_FILE: &str = "edges.csv";

#[derive(Serialize, Deserialize)]
struct MetaFile {
    #[serde(flatten)]
    meta: DatasetMeta,
    num_nodes: usize,
    num_timesteps: usize,
    num_channels: usize,
}

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::Reader::from_path(path).map_err(|e| csv_err(path, e))
}

fn parse_f64(path: &Path, field: &str) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Data(format!("{}: cannot parse {field:?} as a number", path.display())))
}

fn parse_usize(path: &Path, field: &str) -> Result<usize> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Data(format!("{}: cannot parse {field:?} as an index", path.display())))
}

pub fn save_dataset(dir: &Path, ds: &SpatioTemporalDataset) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (n, t_len, c_len) = (ds.num_nodes, ds.num_timesteps, ds.num_channels);

    let meta = MetaFile {
        meta: ds.meta.clone(),
        num_nodes: n,
        num_timesteps: t_len,
        num_channels: c_len,
    };
    let path = dir.join(META_FILE);
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;

    let header: Vec<String> = (0..n)
        .flat_map(|i| (0..c_len).map(move |j| format!("n{i}_c{j}")))
        .collect();
    let values_path = dir.join(VALUES_FILE);
    let mask_path = dir.join(MASK_FILE);
    let mut wv = writer(&values_path)?;
    let mut wm = writer(&mask_path)?;
    wv.write_record(&header).map_err(|e| csv_err(&values_path, e))?;
    wm.write_record(&header).map_err(|e| csv_err(&mask_path, e))?;
    for t in 0..t_len {
        let mut vrow = Vec::with_capacity(n * c_len);
        let mut mrow = Vec::with_capacity(n * c_len);
        for node in 0..n {
            for c in 0..c_len {
                let i = ds.index(node, t, c);
                vrow.push(if ds.mask[i] { fmt_f64(ds.values[i]) } else { String::new() });
                mrow.push(if ds.mask[i] { "1" } else { "0" });
            }
        }
        wv.write_record(&vrow).map_err(|e| csv_err(&values_path, e))?;
        wm.write_record(&mrow).map_err(|e| csv_err(&mask_path, e))?;
    }
    wv.flush().map_err(|e| Error::io(&values_path, e))?;
    wm.flush().map_err(|e| Error::io(&mask_path, e))?;

    let path = dir.join(TRUTH_FILE);
    let mut w = writer(&path)?;
    w.write_record(["node", "timestep", "channel", "value"]).map_err(|e| csv_err(&path, e))?;
    for node in 0..n {
        for t in 0..t_len {
            for c in 0..c_len {
                if let Some(v) = ds.eval_truth[ds.index(node, t, c)] {
                    w.write_record([node.to_string(), t.to_string(), c.to_string(), fmt_f64(v)])
                        .map_err(|e| csv_err(&path, e))?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join(EDGES_FILE);
    let mut w = writer(&path)?;
    w.write_record(["src", "dst", "weight"]).map_err(|e| csv_err(&path, e))?;
    for (&(a, b), &wt) in ds.graph.edges().iter().zip(ds.graph.weights()) {
        w.write_record([a.to_string(), b.to_string(), fmt_f64(wt)])
            .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<SpatioTemporalDataset> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: MetaFile = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    let (n, t_len, c_len) = (meta.num_nodes, meta.num_timesteps, meta.num_channels);
    let total = n * t_len * c_len;
    let idx = |node: usize, t: usize, c: usize| (node * t_len + t) * c_len + c;

    let mut values = vec![f64::NAN; total];
    let mut mask = vec![false; total];
    let mut present = vec![false; total];

    let path = dir.join(VALUES_FILE);
    let mut rows = 0;
    for (t, rec) in reader(&path)?.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(&path, e))?;
        if t >= t_len || rec.len() != n * c_len {
            return Err(Error::Data(format!(
                "{}: expected {t_len} rows of {} columns",
                path.display(),
                n * c_len
            )));
        }
        for (col, field) in rec.iter().enumerate() {
            let f = field.trim();
            if f.is_empty() || f.eq_ignore_ascii_case("nan") {
                continue;
            }
            let i = idx(col / c_len, t, col % c_len);
            values[i] = parse_f64(&path, f)?;
            present[i] = true;
        }
        rows += 1;
    }
    if rows != t_len {
        return Err(Error::Data(format!("{}: {rows} rows, expected {t_len}", path.display())));
    }

    let mask_path = dir.join(MASK_FILE);
    if mask_path.exists() {
        let mut rows = 0;
        for (t, rec) in reader(&mask_path)?.records().enumerate() {
            let rec = rec.map_err(|e| csv_err(&mask_path, e))?;
            if t >= t_len || rec.len() != n * c_len {
                return Err(Error::Data(format!("{}: shape does not match values", mask_path.display())));
            }
            for (col, field) in rec.iter().enumerate() {
                let i = idx(col / c_len, t, col % c_len);
                mask[i] = match field.trim() {
                    "1" => true,
                    "0" => false,
                    other => {
                        return Err(Error::Data(format!("{}: bad mask entry {other:?}", mask_path.display())))
                    }
                };
                if mask[i] && !present[i] {
                    return Err(Error::Data(format!(
                        "{}: entry ({}, {t}, {}) is marked observed but has no value",
                        mask_path.display(),
                        col / c_len,
                        col % c_len
                    )));
                }
            }
            rows += 1;
        }
        if rows != t_len {
            return Err(Error::Data(format!("{}: {rows} rows, expected {t_len}", mask_path.display())));
        }
    } else {
        mask = present;
    }
    for i in 0..total {
        if !mask[i] {
            values[i] = f64::NAN;
        }
    }

    let mut eval_truth = vec![None; total];
    let path = dir.join(TRUTH_FILE);
    if path.exists() {
        for rec in reader(&path)?.records() {
            let rec = rec.map_err(|e| csv_err(&path, e))?;
            if rec.len() != 4 {
                return Err(Error::Data(format!("{}: expected 4 columns", path.display())));
            }
            let (node, t, c) = (
                parse_usize(&path, &rec[0])?,
                parse_usize(&path, &rec[1])?,
                parse_usize(&path, &rec[2])?,
            );
            if node >= n || t >= t_len || c >= c_len {
                return Err(Error::Data(format!("{}: entry ({node}, {t}, {c}) out of range", path.display())));
            }
            eval_truth[idx(node, t, c)] = Some(parse_f64(&path, &rec[3])?);
        }
    }

    let path = dir.join(EDGES_FILE);
    let mut edges = Vec::new();
    for rec in reader(&path)?.records() {
        let rec = rec.map_err(|e| csv_err(&path, e))?;
        if rec.len() != 3 {
            return Err(Error::Data(format!("{}: expected src,dst,weight", path.display())));
        }
        edges.push((
            parse_usize(&path, &rec[0])?,
            parse_usize(&path, &rec[1])?,
            parse_f64(&path, &rec[2])?,
        ));
    }
    let graph = SensorGraph::new(n, edges).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;

    let ds = SpatioTemporalDataset {
        num_nodes: n,
        num_timesteps: t_len,
        num_channels: c_len,
        values,
        mask,
        eval_truth,
        graph,
        meta: meta.meta,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::{generate_mso, inject_point, MsoConfig};

    fn same(a: &SpatioTemporalDataset, b: &SpatioTemporalDataset) {
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.eval_truth, b.eval_truth);
        assert_eq!(a.graph, b.graph);
        assert_eq!(a.meta, b.meta);
        for i in 0..a.len() {
            if a.mask[i] {
                assert_eq!(a.values[i].to_bits(), b.values[i].to_bits());
            } else {
                assert!(b.values[i].is_nan());
            }
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let ds = inject_point(&generate_mso(&MsoConfig { steps: 60, ..Default::default() }).unwrap(), 0.3, 4).unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        same(&ds, &back);
        let header = fs::read_to_string(dir.path().join(VALUES_FILE)).unwrap();
        assert!(header.starts_with("n0_c0,n1_c0,"));
    }

    #[test]
    fn mask_file_is_optional_and_nan_means_missing() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_mso(&MsoConfig { steps: 12, ..Default::default() }).unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        fs::remove_file(dir.path().join(MASK_FILE)).unwrap();
        let p = dir.path().join(VALUES_FILE);
        let text = fs::read_to_string(&p).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut cells: Vec<&str> = lines[3].split(',').collect();
        cells[2] = "nan";
        lines[3] = cells.join(",");
        fs::write(&p, lines.join("\n") + "\n").unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert!(!back.mask[back.index(2, 2, 0)]);
        assert_eq!(back.observed_count(), ds.len() - 1);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_mso(&MsoConfig { steps: 12, ..Default::default() }).unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let p = dir.path().join(EDGES_FILE);
        fs::write(&p, "src,dst,weight\n0,99,1.0\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Data(_))));
        assert!(load_dataset(&dir.path().join("missing")).is_err());
    }
}
