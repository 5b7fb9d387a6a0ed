//! End-to-end runs: training, evaluation, ablation grids and their reports.

use std::fmt::Write as _;

use crate::checkpoint::Checkpoint;
use crate::config::{EvalConfig, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{descriptor, distance_matrix, evaluate, EvalProtocol, EvalReport};
use crate::model::{embed, ModelParams};
use crate::synthdata::{Dataset, ImageSample};
use crate::trainer::{EpochStats, MixtureKeys, Trainer};

pub const METRICS_HEADER: &str = "epoch,phase,loss_global,loss_local,loss_total";

pub fn metrics_row(s: &EpochStats) -> String {
    format!(
        "{},{},{},{},{}",
        s.epoch,
        s.phase.as_str(),
        s.loss_global,
        s.loss_local,
        s.loss_total
    )
}

pub fn metrics_csv(stats: &[EpochStats]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for s in stats {
        out.push_str(&metrics_row(s));
        out.push('\n');
    }
    out
}

/// Trains from scratch, or continues `resume`, until `stop_after` epochs
/// (or the configured total) are complete.
pub fn train(
    cfg: &RunConfig,
    data: &Dataset,
    resume: Option<Checkpoint>,
    stop_after: Option<usize>,
    mut on_epoch: impl FnMut(&EpochStats, &Trainer) -> Result<()>,
) -> Result<Trainer> {
    cfg.validate()?;
    if data.train.len() != cfg.data.train_len() {
        log::warn!(
            "dataset has {} training images, config describes {}",
            data.train.len(),
            cfg.data.train_len()
        );
    }
    let cameras = data.train_cameras();
    let mut trainer = match resume {
        Some(ck) => {
            if ck.config.model != cfg.model || ck.config.train != cfg.train {
                return Err(Error::config(
                    "checkpoint was written with a different model or train configuration",
                ));
            }
            ck.into_trainer(cameras)?
        }
        None => Trainer::new(&cfg.model, &cfg.train, cameras)?,
    };
    let last = stop_after.unwrap_or(cfg.train.epochs).min(cfg.train.epochs);
    while trainer.epoch < last {
        let stats = trainer.run_epoch(&data.train)?;
        log::info!(
            "epoch {} [{}] loss {:.5}",
            stats.epoch,
            stats.phase.as_str(),
            stats.loss_total
        );
        on_epoch(&stats, &trainer)?;
    }
    Ok(trainer)
}

fn features(params: &ModelParams, samples: &[ImageSample], eval: &EvalConfig) -> Result<Vec<Vec<f64>>> {
    let images: Vec<&[f32]> = samples.iter().map(|s| s.pixels.as_slice()).collect();
    Ok(embed(params, &images)?
        .iter()
        .map(|k| descriptor(k, eval.feature))
        .collect())
}

pub fn evaluate_model(params: &ModelParams, data: &Dataset, eval: &EvalConfig) -> Result<EvalReport> {
    if data.query.is_empty() || data.gallery.is_empty() {
        return Err(Error::config("dataset has no query or gallery images"));
    }
    let q = features(params, &data.query, eval)?;
    let g = features(params, &data.gallery, eval)?;
    if let Some(i) = q.iter().chain(&g).position(|v| v.iter().any(|x| !x.is_finite())) {
        return Err(Error::non_finite(format!("evaluation feature {i}")));
    }
    let dists = distance_matrix(&q, &g)?;
    let proto = EvalProtocol {
        query_ids: data.query.iter().map(|s| s.hidden_identity()).collect(),
        query_cams: data.query.iter().map(|s| s.camera).collect(),
        gallery_ids: data.gallery.iter().map(|s| s.hidden_identity()).collect(),
        gallery_cams: data.gallery.iter().map(|s| s.camera).collect(),
        exclude_same_camera: eval.exclude_same_camera,
    };
    evaluate(&dists, &proto)
}

/// Pretty JSON with a trailing newline.
pub fn report_json(report: &EvalReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

/// Parameters an ablation grid can sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationParam {
    LambdaC,
    LambdaT,
    NPlus,
    NMinus,
    Tau,
    Beta,
    LambdaP,
}

impl AblationParam {
    pub const ALL: [AblationParam; 7] = [
        Self::LambdaC,
        Self::LambdaT,
        Self::NPlus,
        Self::NMinus,
        Self::Tau,
        Self::Beta,
        Self::LambdaP,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::LambdaC => "lambda_c",
            Self::LambdaT => "lambda_t",
            Self::NPlus => "n_plus",
            Self::NMinus => "n_minus",
            Self::Tau => "tau",
            Self::Beta => "beta",
            Self::LambdaP => "lambda_p",
        }
    }

    fn apply(self, cfg: &mut RunConfig, value: f64) -> Result<()> {
        let count = |v: f64| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 && v.is_finite() {
                Ok(v as usize)
            } else {
                Err(Error::config(format!("{} needs a whole number, got {v}", self.name())))
            }
        };
        let t = &mut cfg.train;
        match self {
            Self::LambdaC => t.similarity.lambda_c = value,
            Self::LambdaT => t.loss.lambda_t = value,
            Self::NPlus => t.similarity.n_plus = count(value)?,
            Self::NMinus => t.similarity.n_minus = count(value)?,
            Self::Tau => t.loss.tau = value,
            Self::Beta => t.similarity.beta = value,
            Self::LambdaP => t.loss.lambda_p = value,
        }
        Ok(())
    }
}

impl std::str::FromStr for AblationParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|p| p.name()).collect();
                Error::config(format!("unknown parameter `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationSetting {
    pub label: String,
    pub config: RunConfig,
}

/// One setting per value of `param`, all other fields from `base`.
pub fn sweep(base: &RunConfig, param: AblationParam, values: &[f64]) -> Result<Vec<AblationSetting>> {
    values
        .iter()
        .map(|&v| {
            let mut config = base.clone();
            param.apply(&mut config, v)?;
            config.validate()?;
            Ok(AblationSetting {
                label: format!("{}={v}", param.name()),
                config,
            })
        })
        .collect()
}

/// Named scenario grids: `table4` compares global-only, local-only and
/// joint training; `table5` compares the sampling sizes. Every setting keeps
/// the base evaluation protocol.
pub fn preset(base: &RunConfig, name: &str) -> Result<Vec<AblationSetting>> {
    let with = |label: &str, f: &dyn Fn(&mut RunConfig)| -> Result<AblationSetting> {
        let mut config = base.clone();
        f(&mut config);
        config.validate()?;
        Ok(AblationSetting {
            label: label.to_string(),
            config,
        })
    };
    match name {
        "table4" => Ok(vec![
            with("global-only", &|c| {
                c.train.similarity.beta = 1.0;
                c.train.loss.lambda_p = 0.0;
                c.train.mixture_keys = MixtureKeys::Global;
            })?,
            with("local-only", &|c| {
                c.train.similarity.beta = 0.0;
                c.train.loss.lambda_p = 1.0;
                c.train.mixture_keys = MixtureKeys::Local;
            })?,
            with("joint", &|_| {})?,
        ]),
        "table5" => {
            let n = base.data.train_len();
            let all = |n_plus: usize| n.saturating_sub(n_plus + 1);
            Ok(vec![
                with("n_plus=1,n_minus=all", &|c| {
                    c.train.similarity.n_plus = 1;
                    c.train.similarity.n_minus = all(1);
                })?,
                with("n_plus=7,n_minus=all", &|c| {
                    c.train.similarity.n_plus = 7;
                    c.train.similarity.n_minus = all(7);
                })?,
                with("n_plus=7,n_minus=500", &|c| {
                    c.train.similarity.n_plus = 7;
                    c.train.similarity.n_minus = 500;
                })?,
            ])
        }
        other => Err(Error::config(format!("unknown preset `{other}` (expected table4 or table5)"))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub per_seed: Vec<(u64, EvalReport)>,
}

impl AblationRow {
    pub fn mean_map(&self) -> f64 {
        mean(self.per_seed.iter().map(|(_, r)| r.map))
    }

    pub fn mean_rank1(&self) -> f64 {
        mean(self.per_seed.iter().map(|(_, r)| r.rank1))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = it.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Trains and evaluates every setting once per seed.
pub fn run_ablation(
    settings: &[AblationSetting],
    data: &Dataset,
    seeds: &[u64],
    mut on_result: impl FnMut(&str, u64, &EvalReport),
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::config("ablation needs at least one seed"));
    }
    let mut rows = Vec::with_capacity(settings.len());
    for s in settings {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = s.config.clone();
            cfg.train.seed = seed;
            let trainer = train(&cfg, data, None, None, |_, _| Ok(()))?;
            let report = evaluate_model(&trainer.params, data, &cfg.eval)?;
            on_result(&s.label, seed, &report);
            per_seed.push((seed, report));
        }
        rows.push(AblationRow {
            label: s.label.clone(),
            per_seed,
        });
    }
    Ok(rows)
}

pub const ABLATION_HEADER: &str = "setting,seeds,rank1,mAP";

/// One line per setting with seed-mean rank-1 and mAP.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for r in rows {
        let seeds: Vec<String> = r.per_seed.iter().map(|(s, _)| s.to_string()).collect();
        let _ = writeln!(
            out,
            "\"{}\",{},{},{}",
            r.label,
            seeds.join(" "),
            r.mean_rank1(),
            r.mean_map()
        );
    }
    out
}
