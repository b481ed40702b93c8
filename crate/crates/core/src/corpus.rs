//! On-disk corpus layout.
//!
//! A corpus directory holds `manifest.json` plus one `shot_<id>.csv` per
//! shot with header `time_ms,f_000..f_<in-1>,q_000..q_<out-1>`; values are
//! doubles printed with 17 significant digits so they round-trip exactly.
//! `split.json` lists (shot_id, index) pairs per partition.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{SampleRef, ShotSeries, Split};
use crate::error::{Error, Result};
use crate::synth::SynthSpec;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShotEntry {
    pub id: String,
    pub samples: usize,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub in_dim: usize,
    pub out_dim: usize,
    pub dt_ms: f64,
    pub seed: u64,
    /// Present when the corpus was synthesized; absent for ingested data.
    pub generator: Option<SynthSpec>,
    pub shots: Vec<ShotEntry>,
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn shot_file_name(id: &str) -> String {
    format!("shot_{id}.csv")
}

pub fn write_corpus(
    dir: &Path,
    shots: &[ShotSeries],
    dt_ms: f64,
    seed: u64,
    generator: Option<SynthSpec>,
) -> Result<Manifest> {
    let first = shots.first().ok_or_else(|| Error::Data("corpus: no shots".into()))?;
    let in_dim = first.inputs.first().map_or(0, Vec::len);
    let out_dim = first.targets.first().map_or(0, Vec::len);
    fs::create_dir_all(dir)?;

    let mut entries = Vec::with_capacity(shots.len());
    for shot in shots {
        shot.validate()?;
        let file = shot_file_name(&shot.shot_id);
        let mut w = BufWriter::new(fs::File::create(dir.join(&file))?);
        write!(w, "time_ms")?;
        for i in 0..in_dim {
            write!(w, ",f_{i:03}")?;
        }
        for i in 0..out_dim {
            write!(w, ",q_{i:03}")?;
        }
        writeln!(w)?;
        for t in 0..shot.len() {
            write!(w, "{}", fmt17(shot.timestamps_ms[t]))?;
            for v in &shot.inputs[t] {
                write!(w, ",{}", fmt17(*v))?;
            }
            for v in &shot.targets[t] {
                write!(w, ",{}", fmt17(*v))?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        entries.push(ShotEntry { id: shot.shot_id.clone(), samples: shot.len(), file });
    }

    let manifest = Manifest { in_dim, out_dim, dt_ms, seed, generator, shots: entries };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| Error::Data(format!("cannot read manifest in {dir:?}: {e}")))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_corpus(dir: &Path) -> Result<(Manifest, Vec<ShotSeries>)> {
    let manifest = read_manifest(dir)?;
    let mut shots = Vec::with_capacity(manifest.shots.len());
    for entry in &manifest.shots {
        let path = dir.join(&entry.file);
        let reader = BufReader::new(
            fs::File::open(&path).map_err(|e| Error::Data(format!("cannot open {path:?}: {e}")))?,
        );
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Data(format!("{path:?}: empty file")))??;
        let cols = header.split(',').count();
        let expect = 1 + manifest.in_dim + manifest.out_dim;
        if cols != expect {
            return Err(Error::Data(format!(
                "{path:?}: header has {cols} columns, manifest expects {expect}"
            )));
        }
        let mut shot = ShotSeries {
            shot_id: entry.id.clone(),
            timestamps_ms: Vec::with_capacity(entry.samples),
            inputs: Vec::with_capacity(entry.samples),
            targets: Vec::with_capacity(entry.samples),
        };
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut values = Vec::with_capacity(expect);
            for cell in line.split(',') {
                values.push(cell.parse::<f64>().map_err(|e| {
                    Error::Data(format!("{path:?} line {}: bad float {cell:?}: {e}", lineno + 2))
                })?);
            }
            if values.len() != expect {
                return Err(Error::Data(format!(
                    "{path:?} line {}: {} columns, expected {expect}",
                    lineno + 2,
                    values.len()
                )));
            }
            shot.timestamps_ms.push(values[0]);
            shot.inputs.push(values[1..1 + manifest.in_dim].to_vec());
            shot.targets.push(values[1 + manifest.in_dim..].to_vec());
        }
        if shot.len() != entry.samples {
            return Err(Error::Data(format!(
                "{path:?}: {} rows, manifest says {}",
                shot.len(),
                entry.samples
            )));
        }
        shot.validate()?;
        shots.push(shot);
    }
    Ok((manifest, shots))
}

/// `split.json` contents; shots are referenced by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub test_ratio: f64,
    pub seed: u64,
    /// History length whose leading indices the block placement avoided.
    pub guard: usize,
    pub train: Vec<(String, usize)>,
    pub test: Vec<(String, usize)>,
}

impl SplitFile {
    pub fn from_split(split: &Split, shots: &[ShotSeries], test_ratio: f64, seed: u64, guard: usize) -> Self {
        let name = |r: &SampleRef| (shots[r.shot].shot_id.clone(), r.index);
        SplitFile {
            test_ratio,
            seed,
            guard,
            train: split.train.iter().map(name).collect(),
            test: split.test.iter().map(name).collect(),
        }
    }

    /// Maps shot ids back to corpus positions.
    pub fn resolve(&self, shots: &[ShotSeries]) -> Result<Split> {
        let lookup = |(id, index): &(String, usize)| -> Result<SampleRef> {
            let shot = shots
                .iter()
                .position(|s| &s.shot_id == id)
                .ok_or_else(|| Error::Data(format!("split references unknown shot {id:?}")))?;
            if *index >= shots[shot].len() {
                return Err(Error::Data(format!(
                    "split references index {index} beyond shot {id:?} length {}",
                    shots[shot].len()
                )));
            }
            Ok(SampleRef { shot, index: *index })
        };
        Ok(Split {
            train: self.train.iter().map(lookup).collect::<Result<_>>()?,
            test: self.test.iter().map(lookup).collect::<Result<_>>()?,
            skipped_shots: Vec::new(),
        })
    }
}

pub fn write_split(path: &Path, split: &SplitFile) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(split)?)?;
    Ok(())
}

pub fn read_split(path: &Path) -> Result<SplitFile> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read split {path:?}: {e}")))?;
    Ok(serde_json::from_str(&text)?)
}
