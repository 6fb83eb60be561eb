//! Ablation runs: the same configuration trained with different blocks
//! switched on, averaged over seeds.

use std::time::Instant;

use serde::Serialize;

use crate::config::{ablation_row, RunConfig};
use crate::error::Result;
use crate::synth::{generate_split, SceneSample};
use crate::train::{train, RunDir};

#[derive(Clone, Debug, Serialize)]
pub struct AblationRun {
    pub row: String,
    pub seed: u64,
    pub map: f64,
    pub final_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RowSummary {
    pub row: String,
    pub mean_map: f64,
    pub runs: Vec<AblationRun>,
}

/// Synthetic train and test splits for one seed.
pub fn seed_data(cfg: &RunConfig, seed: u64) -> Result<(Vec<SceneSample>, Vec<SceneSample>)> {
    let mut synth = cfg.data.synth.clone();
    synth.seed = seed;
    Ok((generate_split(&synth, 0, cfg.data.train_images)?, generate_split(&synth, 1, cfg.data.test_images)?))
}

/// Trains every `(row, seed)` pair. Each seed regenerates its own dataset and
/// initializes every row from that seed. `out` receives one run directory per
/// pair, named `{row}_s{seed}`.
pub fn run_ablation(
    cfg: &RunConfig,
    rows: &[&str],
    seeds: &[u64],
    out: Option<&std::path::Path>,
    mut progress: impl FnMut(&AblationRun),
) -> Result<Vec<RowSummary>> {
    let blocks = rows.iter().map(|r| ablation_row(r)).collect::<Result<Vec<_>>>()?;
    let mut summaries: Vec<RowSummary> =
        rows.iter().map(|r| RowSummary { row: r.to_string(), mean_map: 0.0, runs: Vec::new() }).collect();
    for &seed in seeds {
        let (train_set, test_set) = seed_data(cfg, seed)?;
        for (summary, &b) in summaries.iter_mut().zip(&blocks) {
            let mut c = cfg.with_blocks(b);
            c.train.seed = seed;
            c.data.synth.seed = seed;
            let dir = out.map(|o| RunDir(o.join(format!("{}_s{seed}", summary.row))));
            let t0 = Instant::now();
            let (_, m) = train(&c, &train_set, Some(&test_set), dir.as_ref())?;
            let run = AblationRun {
                row: summary.row.clone(),
                seed,
                map: m.map.unwrap_or(0.0),
                final_loss: m.epochs.last().map_or(f64::NAN, |e| e.loss),
                seconds: t0.elapsed().as_secs_f64(),
            };
            progress(&run);
            summary.runs.push(run);
        }
    }
    for s in &mut summaries {
        s.mean_map = s.runs.iter().map(|r| r.map).sum::<f64>() / s.runs.len().max(1) as f64;
    }
    Ok(summaries)
}
