//! Trajectory files: one CSV per field with columns
//! `index,time,station,value,units` plus `manifest.json` holding the grid,
//! station positions and run metadata.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Field, SimError, TrajectoryField};
use crate::potentials::Experiment;

pub const MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct FieldEntry {
    file: String,
    units: String,
    positions: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    experiment: Experiment,
    n_x: usize,
    dx: f64,
    times: Vec<f64>,
    fields: BTreeMap<String, FieldEntry>,
    meta: serde_json::Map<String, serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct Row {
    index: usize,
    time: f64,
    station: usize,
    value: f64,
    units: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SimError + '_ {
    move |source| SimError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn fmt_err(path: &Path, msg: impl ToString) -> SimError {
    SimError::Format {
        path: path.display().to_string(),
        msg: msg.to_string(),
    }
}

pub fn write_trajectory(tf: &TrajectoryField, dir: &Path) -> Result<(), SimError> {
    tf.check_consistent()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = BTreeMap::new();
    for (name, field) in &tf.fields {
        let file = format!("{name}.csv");
        let path = dir.join(&file);
        let mut w = csv::Writer::from_path(&path).map_err(|e| fmt_err(&path, e))?;
        for n in 0..field.n_times() {
            for (station, &value) in field.row(n).iter().enumerate() {
                w.serialize(Row {
                    index: n,
                    time: tf.times[n],
                    station,
                    value,
                    units: field.units.clone(),
                })
                .map_err(|e| fmt_err(&path, e))?;
            }
        }
        w.flush().map_err(io_err(&path))?;
        entries.insert(
            name.clone(),
            FieldEntry {
                file,
                units: field.units.clone(),
                positions: field.positions.clone(),
            },
        );
    }
    let manifest = Manifest {
        experiment: tf.experiment,
        n_x: tf.n_x,
        dx: tf.dx,
        times: tf.times.clone(),
        fields: entries,
        meta: tf.meta.clone(),
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| fmt_err(&path, e))?;
    fs::write(&path, text).map_err(io_err(&path))
}

pub fn read_trajectory(dir: &Path) -> Result<TrajectoryField, SimError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| fmt_err(&path, e))?;
    let mut tf = TrajectoryField::new(manifest.experiment, manifest.n_x, manifest.dx);
    tf.times = manifest.times;
    tf.meta = manifest.meta;
    for (name, entry) in manifest.fields {
        let path = dir.join(&entry.file);
        let mut field = Field::new(&entry.units, entry.positions);
        let s = field.stations();
        let mut r = csv::Reader::from_path(&path).map_err(|e| fmt_err(&path, e))?;
        for (k, row) in r.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| fmt_err(&path, e))?;
            if row.index != k / s || row.station != k % s {
                return Err(fmt_err(&path, format!("row {k} out of order")));
            }
            field.values.push(row.value);
        }
        tf.fields.insert(name, field);
    }
    tf.check_consistent()?;
    Ok(tf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut tf = TrajectoryField::new(Experiment::Phase, 2, 0.5);
        tf.times = vec![0.0, 0.1 + 0.2];
        let mut f = Field::new("1", vec![0.25, 0.75]);
        f.push_row(&[1.0 / 3.0, -2e-300]);
        f.push_row(&[std::f64::consts::PI, 7.0]);
        tf.fields.insert("strain".into(), f);
        tf.set_meta("scheme", "test");
        let dir = tempfile::tempdir().unwrap();
        write_trajectory(&tf, dir.path()).unwrap();
        let back = read_trajectory(dir.path()).unwrap();
        assert_eq!(back, tf);
        let head = fs::read_to_string(dir.path().join("strain.csv")).unwrap();
        assert!(head.starts_with("index,time,station,value,units\n"));
    }

    #[test]
    fn truncated_file_rejected() {
        let mut tf = TrajectoryField::new(Experiment::Phase, 2, 0.5);
        tf.times = vec![0.0];
        let mut f = Field::new("1", vec![0.25, 0.75]);
        f.push_row(&[1.0, 2.0]);
        tf.fields.insert("strain".into(), f);
        let dir = tempfile::tempdir().unwrap();
        write_trajectory(&tf, dir.path()).unwrap();
        let p = dir.path().join("strain.csv");
        let text = fs::read_to_string(&p).unwrap();
        let cut: Vec<&str> = text.lines().take(2).collect();
        fs::write(&p, cut.join("\n") + "\n").unwrap();
        assert!(read_trajectory(dir.path()).is_err());
    }
}
