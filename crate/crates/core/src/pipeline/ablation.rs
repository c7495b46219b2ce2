//! Sweeps over the DPO knobs with a score-distribution table per setting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{info, warn};

use super::{
    create_dir, generate, guard_output, io_at, load_checkpoint, make_prompts, mine, run_dpo, Checkpoint, PipelineError,
    PromptKind, RunConfig, ABLATION_TABLE, SALT_EVAL,
};
use crate::preference::{score_sample, WinnerSource};
use crate::synth::Dataset;

/// Share of scores in `[1, 2)`, `[2, 3)`, `[3, 4)` and `[4, 5]`, plus the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreDistribution {
    pub bins: [f64; 4],
    pub mean: f64,
    pub n: usize,
}

impl ScoreDistribution {
    pub fn from_scores(scores: &[f64]) -> Self {
        let mut counts = [0usize; 4];
        for &s in scores {
            counts[((s.floor() as i64 - 1).clamp(0, 3)) as usize] += 1;
        }
        let n = scores.len();
        let share = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
        Self {
            bins: counts.map(share),
            mean: if n == 0 { f64::NAN } else { scores.iter().sum::<f64>() / n as f64 },
            n,
        }
    }

    /// Share of scores in `[3, 5]`.
    pub fn upper_share(&self) -> f64 {
        self.bins[2] + self.bins[3]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub axis: String,
    pub setting: String,
    pub pairs: usize,
    pub dist: ScoreDistribution,
}

const HEADER: &str = "axis\tsetting\tpairs\t[1-2) %\t[2-3) %\t[3-4) %\t[4-5] %\tmean\t[3-5] %";

impl AblationRow {
    pub fn tsv_line(&self) -> String {
        let d = &self.dist;
        let pct = |v: f64| format!("{:.1}", 100.0 * v);
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.4}\t{}",
            self.axis,
            self.setting,
            self.pairs,
            pct(d.bins[0]),
            pct(d.bins[1]),
            pct(d.bins[2]),
            pct(d.bins[3]),
            d.mean,
            pct(d.upper_share())
        )
    }
}

pub fn render_table(rows: &[AblationRow]) -> String {
    let mut s = String::from(HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.tsv_line());
    }
    s
}

fn winner_name(w: WinnerSource) -> &'static str {
    match w {
        WinnerSource::Generated => "generated",
        WinnerSource::GroundTruth => "ground-truth",
    }
}

/// Candidates are mined once from the checkpoint. Each setting builds its own
/// pairs, runs DPO from the checkpoint, and scores `n_samples` fresh samples
/// drawn on the same prompts and seeds. The first row is the untuned model.
pub fn ablate_stage(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<Vec<AblationRow>, PipelineError> {
    create_dir(out)?;
    let table = out.join(ABLATION_TABLE);
    guard_output(&table, &[checkpoint, data])?;
    let ckpt = load_checkpoint(cfg, checkpoint)?;
    let dataset = Dataset::load(data)?;
    let rows = ablate(cfg, &ckpt, &dataset)?;
    fs::write(&table, render_table(&rows)).map_err(io_at(&table))?;
    Ok(rows)
}

pub fn ablate(cfg: &RunConfig, ckpt: &Checkpoint, dataset: &Dataset) -> Result<Vec<AblationRow>, PipelineError> {
    let scorer = cfg.scorer();
    let prompts = make_prompts(cfg, PromptKind::Open, cfg.n_samples, SALT_EVAL);
    let sample = cfg.sample_config();
    let distribution = |c: &Checkpoint| -> Result<ScoreDistribution, PipelineError> {
        let xs = generate(cfg, c, &prompts, &sample)?;
        let scores = xs.iter().map(|x| score_sample(&scorer, x, None).map(|s| s.value)).collect::<Result<Vec<_>, _>>()?;
        Ok(ScoreDistribution::from_scores(&scores))
    };
    let baseline = distribution(ckpt)?;
    let mined = mine(cfg, ckpt)?;

    let base = cfg.dpo_config();
    let mut settings = Vec::new();
    for &gap in &cfg.ablate_gaps {
        settings.push(("gap", format!("{gap}"), gap, base.epochs, base.winner_source));
    }
    for &epochs in &cfg.ablate_epochs {
        settings.push(("dpo_epochs", format!("{epochs}"), base.gap, epochs, base.winner_source));
    }
    for w in [WinnerSource::Generated, WinnerSource::GroundTruth] {
        settings.push(("winner", winner_name(w).to_string(), base.gap, base.epochs, w));
    }

    let mut rows = vec![AblationRow { axis: "baseline".into(), setting: "no-dpo".into(), pairs: 0, dist: baseline.clone() }];
    let mut cache: BTreeMap<(u64, usize, &str), (usize, ScoreDistribution)> = BTreeMap::new();
    for (axis, setting, gap, epochs, winner) in settings {
        let key = (gap.to_bits(), epochs, winner_name(winner));
        let (pairs, dist) = match cache.get(&key) {
            Some(hit) => hit.clone(),
            None => {
                let dpo = crate::preference::DpoConfig { gap, epochs, winner_source: winner, ..base.clone() };
                let gt = (winner == WinnerSource::GroundTruth).then_some(dataset);
                let result = match run_dpo(cfg, ckpt, &mined, &dpo, gt) {
                    Ok((tuned, pairs, _)) => (pairs.len(), distribution(&tuned)?),
                    Err(PipelineError::NoPairs) => {
                        warn!("{axis}={setting}: no pairs passed the thresholds, model left untuned");
                        (0, baseline.clone())
                    }
                    Err(e) => return Err(e),
                };
                cache.insert(key, result.clone());
                result
            }
        };
        info!("{axis}={setting}: {pairs} pairs, mean score {:.4}", dist.mean);
        rows.push(AblationRow { axis: axis.into(), setting, pairs, dist });
    }
    Ok(rows)
}
