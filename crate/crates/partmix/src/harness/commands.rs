//! The six experiment commands behind the CLI: train, eval, ablate,
//! compare, gradcheck, oracle. Sweeps run their independent runs in
//! parallel; every output file is a pure function of (config, seed).

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::data::{generate_dataset, load_dataset, save_dataset, DatasetSplit};
use crate::encoder::ModelState;
use crate::error::{Error, Result};
use crate::eval::{run_protocol, write_metrics, MetricsReport, RetrievalProtocol};
use crate::harness::config::{ExperimentConfig, Regularizer};
use crate::harness::trainer::{train_on_split, write_losses_csv, RunRecord, DEFAULT_RANKS};
use crate::rng::SeedTree;

/// Builds or loads the dataset a config names. The generation seed is the
/// `data` child of the config seed, so model/batch streams never disturb it.
pub fn resolve_dataset(config: &ExperimentConfig) -> Result<DatasetSplit> {
    if let Some(dir) = &config.dataset_dir {
        let split = load_dataset(Path::new(dir))?;
        if split.spec != config.dataset {
            return Err(Error::Config {
                field: "dataset_dir".into(),
                message: "on-disk dataset spec differs from the config's dataset section".into(),
            });
        }
        Ok(split)
    } else {
        generate_dataset(&config.dataset, SeedTree::new(config.seed).child("data").seed())
    }
}

fn write_resolved_config(out: &Path, config: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.resolved.json"), config.to_json())?;
    Ok(())
}

/// Full training run: writes config.resolved.json, losses.csv, metrics.csv,
/// metrics.json, params.bin, run.json, optionally mixes.jsonl and dataset/.
pub fn cmd_train(config: &ExperimentConfig, out: &Path, dump_mixes: bool) -> Result<RunRecord> {
    config.validate()?;
    write_resolved_config(out, config)?;
    let split = resolve_dataset(config)?;
    if config.persist_dataset {
        save_dataset(&out.join("dataset"), &split)?;
    }
    let mut dump_lines: Vec<String> = Vec::new();
    let dump = if dump_mixes { Some(&mut dump_lines) } else { None };
    let (model, record) = train_on_split(config, &split, config.seed, dump)?;

    write_losses_csv(&out.join("losses.csv"), &record.epochs)?;
    write_metrics(out, &record.reports)?;
    model.save(&out.join("params.bin"))?;
    fs::write(out.join("run.json"), serde_json::to_string_pretty(&record)?)?;
    if dump_mixes {
        fs::write(out.join("mixes.jsonl"), dump_lines.join("\n") + "\n")?;
    }
    Ok(record)
}

/// Evaluates a parameter snapshot on the config's dataset under the four
/// default protocols and writes metrics files.
pub fn cmd_eval(
    config: &ExperimentConfig,
    params_path: &Path,
    out: &Path,
) -> Result<Vec<MetricsReport>> {
    config.validate()?;
    let model = ModelState::load(params_path)?;
    let expect = (
        config.dataset.channels,
        config.model.feat_dim,
        config.model.num_parts,
        config.dataset.num_train_ids,
    );
    let got = (model.dims.channels, model.dims.feat_dim, model.dims.num_parts, model.dims.num_ids);
    if expect != got {
        return Err(Error::ShapeMismatch {
            expected: format!("snapshot dims {expect:?}"),
            got: format!("{got:?}"),
        });
    }
    let split = resolve_dataset(config)?;
    let protocol_seed = SeedTree::new(config.seed).child("protocol").seed();
    let reports = RetrievalProtocol::defaults(DEFAULT_RANKS.to_vec())
        .iter()
        .map(|p| run_protocol(&model, &split, p, protocol_seed))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out)?;
    write_metrics(out, &reports)?;
    Ok(reports)
}

/// Which hyper-parameter an ablation sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    /// Number of mixed parts.
    B,
    /// Number of part maps; B follows as max(1, round(M/3)).
    M,
    /// Contrastive temperature.
    Tau,
}

impl SweepParam {
    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "b" => Ok(SweepParam::B),
            "m" => Ok(SweepParam::M),
            "tau" => Ok(SweepParam::Tau),
            other => Err(Error::Config {
                field: "sweep.param".into(),
                message: format!("unknown sweep parameter `{other}` (expected b, m, or tau)"),
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::B => "B",
            SweepParam::M => "M",
            SweepParam::Tau => "tau",
        }
    }
}

/// The paper's rule for the M sweep, clamped so mixing stays active.
pub fn mixed_parts_for(num_parts: usize) -> usize {
    (((num_parts as f64) / 3.0).round() as usize).clamp(1, num_parts)
}

fn apply_sweep(config: &ExperimentConfig, param: SweepParam, value: f64) -> Result<ExperimentConfig> {
    let mut c = config.clone();
    match param {
        SweepParam::B => {
            c.mix.num_mixed_parts = value as usize;
        }
        SweepParam::M => {
            c.model.num_parts = value as usize;
            c.mix.num_mixed_parts = mixed_parts_for(c.model.num_parts);
        }
        SweepParam::Tau => {
            c.loss.temperature = value;
        }
    }
    c.validate()?;
    Ok(c)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct AblationRow {
    pub param: &'static str,
    pub value: f64,
    pub protocol: String,
    pub shot_mode: String,
    pub map: f64,
    pub cmc_at_1: f64,
}

/// One full train+eval per swept value over a shared dataset; per-value
/// model seeds come from the `ablate` stream.
pub fn cmd_ablate(
    config: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
    out: &Path,
) -> Result<Vec<AblationRow>> {
    config.validate()?;
    let split = resolve_dataset(config)?;
    let runs: Vec<(usize, ExperimentConfig)> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| Ok((i, apply_sweep(config, param, v)?)))
        .collect::<Result<_>>()?;

    let records: Vec<(usize, RunRecord)> = runs
        .into_par_iter()
        .map(|(i, run_config)| {
            let run_seed = SeedTree::new(config.seed).child("ablate").index(i as u64).seed();
            let (_, record) = train_on_split(&run_config, &split, run_seed, None)?;
            Ok((i, record))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut ordered = records;
    ordered.sort_by_key(|(i, _)| *i);
    for (i, record) in ordered {
        for report in &record.reports {
            rows.push(AblationRow {
                param: param.name(),
                value: values[i],
                protocol: report.protocol_name.clone(),
                shot_mode: report.shot_mode.name().to_string(),
                map: report.map_score,
                cmc_at_1: report.cmc_at(1).unwrap_or(f64::NAN),
            });
        }
    }

    fs::create_dir_all(out)?;
    let mut csv = String::from("param,value,protocol,shot_mode,mAP,cmc_at_1\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.param, r.value, r.protocol, r.shot_mode, r.map, r.cmc_at_1
        ));
    }
    fs::write(out.join("ablation.csv"), csv)?;
    Ok(rows)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ComparisonRow {
    pub regularizer: &'static str,
    pub seed: u64,
    pub protocol: String,
    pub shot_mode: String,
    pub map: f64,
    pub cmc_at_1: f64,
}

/// Trains every regularizer over the same dataset and the same per-seed
/// model/batch streams, so rows differ only in the regularizer itself.
pub fn cmd_compare(
    config: &ExperimentConfig,
    regularizers: &[Regularizer],
    seeds: &[u64],
    out: &Path,
) -> Result<Vec<ComparisonRow>> {
    config.validate()?;
    let split = resolve_dataset(config)?;
    let mut jobs = Vec::new();
    for &reg in regularizers {
        for &seed in seeds {
            let mut c = config.clone();
            c.regularizer = reg;
            c.validate()?;
            jobs.push((reg, seed, c));
        }
    }

    let records: Vec<(Regularizer, u64, RunRecord)> = jobs
        .into_par_iter()
        .map(|(reg, seed, run_config)| {
            let (_, record) = train_on_split(&run_config, &split, seed, None)?;
            Ok((reg, seed, record))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for &reg in regularizers {
        for &seed in seeds {
            let record = records
                .iter()
                .find(|(r, s, _)| *r == reg && *s == seed)
                .expect("every job produced a record");
            for report in &record.2.reports {
                rows.push(ComparisonRow {
                    regularizer: reg.name(),
                    seed,
                    protocol: report.protocol_name.clone(),
                    shot_mode: report.shot_mode.name().to_string(),
                    map: report.map_score,
                    cmc_at_1: report.cmc_at(1).unwrap_or(f64::NAN),
                });
            }
        }
    }

    fs::create_dir_all(out)?;
    let mut csv = String::from("regularizer,seed,protocol,shot_mode,mAP,cmc_at_1\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.regularizer, r.seed, r.protocol, r.shot_mode, r.map, r.cmc_at_1
        ));
    }
    fs::write(out.join("comparison.csv"), csv)?;
    Ok(rows)
}

/// Mean mAP per regularizer under one protocol/shot filter; used by the
/// acceptance suite and handy for quick reads of comparison.csv.
pub fn mean_map(rows: &[ComparisonRow], regularizer: Regularizer, protocol: &str, shot: &str) -> f64 {
    let picked: Vec<f64> = rows
        .iter()
        .filter(|r| r.regularizer == regularizer.name() && r.protocol == protocol && r.shot_mode == shot)
        .map(|r| r.map)
        .collect();
    picked.iter().sum::<f64>() / picked.len() as f64
}
