//! The five pipeline commands: gen, train, eval, ablate, sweep.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use qdist_core::corpus::{read_corpus, write_corpus, write_split, SplitFile};
use qdist_core::data::{build_windows, split_contiguous, standardize_corpus, SampleWindow, Standardizer};
use qdist_core::model::{count_params, AblationFlags};
use qdist_core::synth::{synth_generate, SynthSpec};
use qdist_core::train::{evaluate, load_checkpoint_for, train, TrainReport};
use qdist_core::{Error, Result};

use crate::runspec::{Resolved, RunSpec};

/// Refuses to write into an existing non-empty directory unless forced.
pub fn guard_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && dir.read_dir()?.next().is_some() {
        if !force {
            return Err(Error::Data(format!(
                "output directory {dir:?} is not empty; pass --force to overwrite"
            )));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

pub struct GenParams {
    pub out: PathBuf,
    pub spec: SynthSpec,
    pub test_ratio: f64,
    pub guard: usize,
    pub force: bool,
}

pub fn cmd_gen(p: &GenParams) -> Result<()> {
    guard_out_dir(&p.out, p.force)?;
    let shots = synth_generate(&p.spec)?;
    write_corpus(&p.out, &shots, p.spec.dt_ms, p.spec.seed, Some(p.spec.clone()))?;
    let split = split_contiguous(&shots, p.test_ratio, p.guard, p.spec.seed)?;
    for id in &split.skipped_shots {
        eprintln!("warning: shot {id} too short for a test block; kept in training split");
    }
    let split_file = SplitFile::from_split(&split, &shots, p.test_ratio, p.spec.seed, p.guard);
    write_split(&p.out.join("split.json"), &split_file)?;
    println!(
        "{}",
        json!({
            "corpus": p.out,
            "shots": shots.len(),
            "samples": shots.iter().map(|s| s.len()).sum::<usize>(),
            "train": split.train.len(),
            "test": split.test.len(),
        })
    );
    Ok(())
}

pub struct LoadedData {
    pub train_windows: Vec<SampleWindow>,
    pub test_windows: Vec<SampleWindow>,
    pub standardizer: Standardizer,
}

/// Reads the corpus and split, standardizes on train statistics, and
/// resolves history windows for both partitions.
pub fn load_dataset(
    corpus_dir: &Path,
    split_path: &Path,
    n_history: usize,
    gap_ms: f64,
) -> Result<LoadedData> {
    let (_manifest, mut shots) = read_corpus(corpus_dir)?;
    if !split_path.exists() {
        return Err(Error::Data(format!(
            "split file {split_path:?} not found; generate the corpus first"
        )));
    }
    let split = qdist_core::corpus::read_split(split_path)?.resolve(&shots)?;
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::Data("split has an empty partition".into()));
    }
    let standardizer = standardize_corpus(&mut shots, &split)?;
    let train_windows = build_windows(&shots, &split.train, n_history, gap_ms)?;
    let test_windows = build_windows(&shots, &split.test, n_history, gap_ms)?;
    Ok(LoadedData { train_windows, test_windows, standardizer })
}

/// Trains one resolved configuration into `out`: resolved_config.json,
/// metrics.jsonl (with timing), report.json (timing-free, byte-stable),
/// standardizer.json, and the best checkpoint.
pub fn run_training(
    spec: &RunSpec,
    resolved: &Resolved,
    data: &LoadedData,
    out: &Path,
    echo: bool,
) -> Result<TrainReport> {
    fs::create_dir_all(out)?;
    let doc = spec.resolved_document(resolved)?;
    fs::write(out.join("resolved_config.json"), serde_json::to_string_pretty(&doc)?)?;
    fs::write(
        out.join("standardizer.json"),
        serde_json::to_string_pretty(&data.standardizer)?,
    )?;

    let mut metrics = std::io::BufWriter::new(fs::File::create(out.join("metrics.jsonl"))?);
    let ckpt = out.join("checkpoint");
    let (report, _store) = train(
        &resolved.model,
        &data.train_windows,
        &data.test_windows,
        &resolved.train,
        Some(&ckpt),
        |record| {
            let line = serde_json::to_string(record).expect("epoch records serialize");
            let _ = writeln!(metrics, "{line}");
            if echo {
                println!("{line}");
            }
        },
    )?;
    metrics.flush()?;
    fs::write(out.join("report.json"), report.to_json()?)?;
    Ok(report)
}

pub struct TrainParams {
    pub spec: RunSpec,
    pub out: PathBuf,
    pub force: bool,
}

pub fn cmd_train(p: &TrainParams) -> Result<()> {
    guard_out_dir(&p.out, p.force)?;
    let corpus = p.spec.corpus_dir()?.to_path_buf();
    let manifest = qdist_core::corpus::read_manifest(&corpus)?;
    let resolved = p.spec.resolve(manifest.in_dim, manifest.out_dim, manifest.dt_ms)?;
    let data = load_dataset(
        &corpus,
        &p.spec.split_path()?,
        resolved.model.n_history,
        resolved.gap_ms,
    )?;
    let report = run_training(&p.spec, &resolved, &data, &p.out, true)?;
    println!(
        "{}",
        json!({
            "out": p.out,
            "epochs": report.records.len(),
            "best_test_mse": report.summary.best_test_mse,
            "best_epoch": report.summary.best_epoch,
            "param_count": report.summary.param_count,
        })
    );
    Ok(())
}

pub struct EvalParams {
    pub run: PathBuf,
    /// Overrides the corpus recorded in the run's resolved config.
    pub corpus: Option<PathBuf>,
    pub partition: Partition,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Train,
    Test,
}

pub fn cmd_eval(p: &EvalParams) -> Result<()> {
    let spec_path = p.run.join("resolved_config.json");
    let mut spec = RunSpec::load(&spec_path)?;
    if let Some(corpus) = &p.corpus {
        spec.data.corpus = Some(corpus.clone());
        spec.data.split = Some(corpus.join("split.json"));
    }
    let corpus = spec.corpus_dir()?.to_path_buf();
    let manifest = qdist_core::corpus::read_manifest(&corpus)?;
    let resolved = spec.resolve(manifest.in_dim, manifest.out_dim, manifest.dt_ms)?;
    let data = load_dataset(&corpus, &spec.split_path()?, resolved.model.n_history, resolved.gap_ms)?;
    let store = load_checkpoint_for(&p.run.join("checkpoint"), &resolved.model)?;
    let windows = match p.partition {
        Partition::Train => &data.train_windows,
        Partition::Test => &data.test_windows,
    };
    let mse = evaluate(&resolved.model, &store, windows, p.batch_size)?;
    println!(
        "{}",
        json!({
            "run": p.run,
            "partition": match p.partition { Partition::Train => "train", Partition::Test => "test" },
            "samples": windows.len(),
            "mse": mse,
        })
    );
    Ok(())
}

pub struct MultiRunParams {
    pub spec: RunSpec,
    pub out: PathBuf,
    pub force: bool,
    pub parallel: bool,
}

#[derive(Debug, Clone, Serialize)]
struct AblateRow {
    no: usize,
    name: String,
    mlp: u8,
    hopfield: u8,
    position: u8,
    lparam: u8,
    param_count: usize,
    test_mse: f64,
}

/// The five component-analysis configurations, trained with a shared seed.
pub fn cmd_ablate(p: &MultiRunParams) -> Result<()> {
    guard_out_dir(&p.out, p.force)?;
    let rows: Vec<(&str, AblationFlags)> = vec![
        ("mlp", AblationFlags::all_off()),
        ("hopfield", AblationFlags { use_hopfield: true, use_posenc: false, use_lparam: false }),
        ("hopfield_pos", AblationFlags { use_hopfield: true, use_posenc: true, use_lparam: false }),
        ("mlp_lparam", AblationFlags { use_hopfield: false, use_posenc: false, use_lparam: true }),
        ("full", AblationFlags::all_on()),
    ];

    let corpus = p.spec.corpus_dir()?.to_path_buf();
    let manifest = qdist_core::corpus::read_manifest(&corpus)?;
    let jobs: Vec<(String, RunSpec, Resolved, PathBuf)> = rows
        .iter()
        .enumerate()
        .map(|(i, (name, flags))| {
            let mut spec = p.spec.clone();
            spec.model.ablation = Some(*flags);
            let resolved = spec.resolve(manifest.in_dim, manifest.out_dim, manifest.dt_ms)?;
            let dir = p.out.join(format!("row{}_{name}", i + 1));
            Ok((name.to_string(), spec, resolved, dir))
        })
        .collect::<Result<_>>()?;

    // every row sees the same split and standardization
    let data = load_dataset(
        &corpus,
        &p.spec.split_path()?,
        jobs[0].2.model.n_history,
        jobs[0].2.gap_ms,
    )?;
    let reports = run_jobs(&jobs, &data, p.parallel)?;

    let mut table = Vec::with_capacity(rows.len());
    for (i, ((name, _, resolved, _), report)) in jobs.iter().zip(&reports).enumerate() {
        let flags = resolved.model.ablation;
        table.push(AblateRow {
            no: i + 1,
            name: name.clone(),
            mlp: 1,
            hopfield: flags.use_hopfield as u8,
            position: flags.use_posenc as u8,
            lparam: flags.use_lparam as u8,
            param_count: count_params(&resolved.model)?,
            test_mse: report.summary.best_test_mse,
        });
    }
    let mut csv = String::from("no,name,mlp,hopfield,position,lparam,param_count,test_mse\n");
    for row in &table {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            row.no, row.name, row.mlp, row.hopfield, row.position, row.lparam,
            row.param_count, row.test_mse
        ));
    }
    fs::write(p.out.join("table.csv"), &csv)?;
    fs::write(p.out.join("table.json"), serde_json::to_string_pretty(&table)?)?;
    print!("{csv}");
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Hidden,
    Heads,
    Layers,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Hidden => "hidden",
            SweepAxis::Heads => "heads",
            SweepAxis::Layers => "layers",
        }
    }
}

pub struct SweepParams {
    pub base: MultiRunParams,
    pub axis: SweepAxis,
    pub values: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
struct SweepRow {
    value: usize,
    test_mse: f64,
    param_count: usize,
}

/// One training run per axis value, fixed seed; emits plot-ready value→MSE.
pub fn cmd_sweep(p: &SweepParams) -> Result<()> {
    guard_out_dir(&p.base.out, p.base.force)?;
    let corpus = p.base.spec.corpus_dir()?.to_path_buf();
    let manifest = qdist_core::corpus::read_manifest(&corpus)?;
    let jobs: Vec<(String, RunSpec, Resolved, PathBuf)> = p
        .values
        .iter()
        .map(|&v| {
            let mut spec = p.base.spec.clone();
            match p.axis {
                SweepAxis::Hidden => spec.model.feat_dim = Some(v),
                SweepAxis::Heads => spec.model.n_heads = Some(v),
                SweepAxis::Layers => spec.model.n_layers = Some(v),
            }
            let resolved = spec.resolve(manifest.in_dim, manifest.out_dim, manifest.dt_ms)?;
            let dir = p.base.out.join(format!("{}_{v}", p.axis.name()));
            Ok((format!("{v}"), spec, resolved, dir))
        })
        .collect::<Result<_>>()?;

    let data = load_dataset(
        &corpus,
        &p.base.spec.split_path()?,
        jobs[0].2.model.n_history,
        jobs[0].2.gap_ms,
    )?;
    let reports = run_jobs(&jobs, &data, p.base.parallel)?;

    let mut table = Vec::with_capacity(jobs.len());
    for ((_, _, resolved, _), report) in jobs.iter().zip(&reports) {
        table.push(SweepRow {
            value: match p.axis {
                SweepAxis::Hidden => resolved.model.feat_dim,
                SweepAxis::Heads => resolved.model.hist_hopfield.n_heads,
                SweepAxis::Layers => resolved.model.hist_hopfield.n_layers,
            },
            test_mse: report.summary.best_test_mse,
            param_count: count_params(&resolved.model)?,
        });
    }
    let mut csv = format!("{},test_mse,param_count\n", p.axis.name());
    for row in &table {
        csv.push_str(&format!("{},{},{}\n", row.value, row.test_mse, row.param_count));
    }
    fs::write(p.base.out.join("table.csv"), &csv)?;
    fs::write(p.base.out.join("table.json"), serde_json::to_string_pretty(&table)?)?;
    print!("{csv}");
    Ok(())
}

/// Runs each (spec, resolved, dir) job; sequential by default, optionally one
/// thread per job. Results come back in job order either way, and every run
/// is seeded independently of scheduling.
fn run_jobs(
    jobs: &[(String, RunSpec, Resolved, PathBuf)],
    data: &LoadedData,
    parallel: bool,
) -> Result<Vec<TrainReport>> {
    if !parallel {
        return jobs
            .iter()
            .map(|(_, spec, resolved, dir)| run_training(spec, resolved, data, dir, false))
            .collect();
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|(_, spec, resolved, dir)| {
                scope.spawn(move || run_training(spec, resolved, data, dir, false))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    })
}
