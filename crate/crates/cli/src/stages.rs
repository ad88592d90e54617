//! Stage execution: declared inputs, outputs under `out/{stage}/`, and reports
//! under `out/reports/`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Instant;

use harforge_core::align::{align_cohort, read_aligned, read_profiles, write_aligned, write_profiles, AlignedDay};
use harforge_core::dataset::{build_dataset, read_windows, write_windows, Normalizer, SplitManifest, SplitSpec};
use harforge_core::domain::validate_day_series;
use harforge_core::eval::{evaluate_run, write_confusion_csv, write_trend_csv};
use harforge_core::impute::{impute_cohort, write_stats_csv};
use harforge_core::ingest::{
    parse_activity_blocks, parse_hr_stream, parse_schedule, parse_sleep_segments, write_activity, write_hr,
    write_schedule, write_sleep, RawStreams,
};
use harforge_core::model::{train, Checkpoint, EncodedSet, ModelParams};
use harforge_core::synth::{generate_cohort, mask_report, read_truth, write_cohort, COHORT_FILES};
use harforge_core::viz::{cohort_charts, write_charts, write_index};
use log::info;
use serde_json::json;

use crate::config::PipelineConfig;
use crate::error::CliError;
use crate::report::{self, StageReport};
use crate::Stage;

const STREAMS: [&str; 4] = ["hr", "activity", "sleep", "schedule"];

pub struct Context {
    pub out: PathBuf,
    pub config: PipelineConfig,
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    UpToDate,
}

struct Produced {
    outputs: Vec<PathBuf>,
    counts: BTreeMap<String, u64>,
    details: serde_json::Value,
}

impl Context {
    fn dir(&self, stage: Stage) -> PathBuf {
        self.out.join(stage.as_str())
    }

    fn width_dir(&self, stage: Stage, width: usize) -> PathBuf {
        self.dir(stage).join(format!("w{width}"))
    }

    fn stream_input(&self, name: &str) -> PathBuf {
        self.config
            .path(&format!("input.{name}"))
            .unwrap_or_else(|| self.dir(Stage::Synth).join(format!("{name}.csv")))
    }

    /// Ground truth is read from the configured path, or from the synth stage
    /// when the streams themselves came from it.
    fn truth_input(&self) -> Option<PathBuf> {
        match self.config.path("input.truth") {
            Some(p) => Some(p),
            None if self.config.path("input.hr").is_none() => Some(self.dir(Stage::Synth).join("truth.csv")),
            None => None,
        }
    }

    /// Required and optional inputs of a stage.
    fn inputs(&self, stage: Stage) -> Result<(Vec<PathBuf>, Vec<PathBuf>), CliError> {
        let ingest = self.dir(Stage::Ingest);
        let align = self.dir(Stage::Align);
        let impute = self.dir(Stage::Impute);
        let widths = self.config.widths()?;
        let required = match stage {
            Stage::Synth | Stage::Pipeline => vec![],
            Stage::Ingest => STREAMS.iter().map(|s| self.stream_input(s)).collect(),
            Stage::Align => STREAMS.iter().map(|s| ingest.join(format!("{s}.csv"))).collect(),
            Stage::Impute => vec![align.join("aligned.csv"), align.join("profiles.csv")],
            Stage::Dataset | Stage::Viz => vec![impute.join("imputed.csv"), impute.join("profiles.csv")],
            Stage::Train => widths
                .iter()
                .flat_map(|&w| {
                    let d = self.width_dir(Stage::Dataset, w);
                    [d.join("windows.jsonl"), d.join("split.json"), d.join("normalizer.json")]
                })
                .collect(),
            Stage::Eval => widths
                .iter()
                .flat_map(|&w| {
                    let d = self.width_dir(Stage::Dataset, w);
                    [
                        self.width_dir(Stage::Train, w).join("checkpoint.json"),
                        d.join("windows.jsonl"),
                        d.join("split.json"),
                        d.join("spec.json"),
                    ]
                })
                .collect(),
        };
        let optional = match stage {
            Stage::Impute => self.truth_input().into_iter().collect(),
            _ => vec![],
        };
        Ok((required, optional))
    }
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|_| CliError::MissingInput(path.to_path_buf()))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    Ok(serde_json::from_reader(open(path)?)?)
}

/// Runs one stage, or every stage in order for `pipeline`.
pub fn run(ctx: &Context, stage: Stage) -> Result<Vec<(Stage, Outcome)>, CliError> {
    if stage != Stage::Pipeline {
        return Ok(vec![(stage, run_stage(ctx, stage)?)]);
    }
    let mut outcomes = Vec::new();
    for s in Stage::ORDER {
        if s == Stage::Synth && ctx.config.path("input.hr").is_some() {
            continue;
        }
        outcomes.push((s, run_stage(ctx, s)?));
    }
    Ok(outcomes)
}

pub fn run_stage(ctx: &Context, stage: Stage) -> Result<Outcome, CliError> {
    let name = stage.as_str();
    let (required, optional) = ctx.inputs(stage)?;
    if let Some(missing) = required.iter().find(|p| !p.is_file()) {
        return Err(CliError::MissingInput(missing.clone()));
    }
    let present: Vec<PathBuf> = required
        .into_iter()
        .chain(optional.into_iter().filter(|p| p.is_file()))
        .collect();
    let inputs = report::digests(&ctx.out, &present)?;
    let config_hash = ctx.config.stage_hash(stage);
    let report_path = report::report_path(&ctx.out, name);

    if let Some(prev) = report::read_report(&report_path)? {
        if prev.config_hash != config_hash {
            if !ctx.force {
                return Err(CliError::ConfigMismatch { stage: name.into() });
            }
        } else if prev.inputs == inputs && report::outputs_intact(&ctx.out, &prev) {
            info!("{name}: up to date");
            return Ok(Outcome::UpToDate);
        }
    }

    let started = Instant::now();
    let dir = ctx.dir(stage);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    }
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let produced = match stage {
        Stage::Synth => synth(ctx, &dir)?,
        Stage::Ingest => ingest(ctx, &present, &dir)?,
        Stage::Align => align(ctx, &dir)?,
        Stage::Impute => impute(ctx, &present, &dir)?,
        Stage::Dataset => dataset(ctx)?,
        Stage::Train => train_stage(ctx)?,
        Stage::Eval => eval(ctx, &dir)?,
        Stage::Viz => viz(ctx, &dir)?,
        Stage::Pipeline => unreachable!("pipeline expands to stages"),
    };
    let report = StageReport {
        stage: name.into(),
        config_hash,
        inputs,
        outputs: report::digests(&ctx.out, &produced.outputs)?,
        counts: produced.counts,
        details: produced.details,
    };
    report::write_json(&report_path, &report)?;
    let seconds = started.elapsed().as_secs_f64();
    report::write_json(
        &report::timing_path(&ctx.out, name),
        &json!({ "stage": name, "seconds": seconds }),
    )?;
    info!("{name}: done in {seconds:.2}s");
    Ok(Outcome::Ran)
}

fn counts<const N: usize>(pairs: [(&str, usize); N]) -> BTreeMap<String, u64> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v as u64)).collect()
}

fn synth(ctx: &Context, dir: &Path) -> Result<Produced, CliError> {
    let cohort = generate_cohort(&ctx.config.cohort()?, ctx.config.taxonomy())?;
    write_cohort(&cohort, dir)?;
    let s = &cohort.streams;
    Ok(Produced {
        outputs: COHORT_FILES.iter().map(|f| dir.join(f)).collect(),
        counts: counts([
            ("user_days", cohort.truth.len()),
            ("hr_samples", s.hr.len()),
            ("activity_blocks", s.activity.len()),
            ("sleep_segments", s.sleep.len()),
            ("schedule_blocks", s.schedule.len()),
        ]),
        details: serde_json::Value::Null,
    })
}

fn read_streams(paths: &[PathBuf], ctx: &Context) -> Result<RawStreams, CliError> {
    Ok(RawStreams {
        hr: parse_hr_stream(open(&paths[0])?)?,
        activity: parse_activity_blocks(open(&paths[1])?)?,
        sleep: parse_sleep_segments(open(&paths[2])?)?,
        schedule: parse_schedule(open(&paths[3])?, ctx.config.taxonomy())?,
    })
}

fn ingest(ctx: &Context, inputs: &[PathBuf], dir: &Path) -> Result<Produced, CliError> {
    let s = read_streams(inputs, ctx)?;
    let outputs: Vec<PathBuf> = STREAMS.iter().map(|n| dir.join(format!("{n}.csv"))).collect();
    write_hr(create(&outputs[0])?, &s.hr)?;
    write_activity(create(&outputs[1])?, &s.activity)?;
    write_sleep(create(&outputs[2])?, &s.sleep)?;
    write_schedule(create(&outputs[3])?, &s.schedule)?;
    let mut users: Vec<&str> = s.hr.iter().map(|r| &*r.user).collect();
    users.extend(s.activity.iter().map(|r| &*r.user));
    users.sort_unstable();
    users.dedup();
    Ok(Produced {
        outputs,
        counts: counts([
            ("users", users.len()),
            ("hr_samples", s.hr.len()),
            ("activity_blocks", s.activity.len()),
            ("sleep_segments", s.sleep.len()),
            ("schedule_blocks", s.schedule.len()),
        ]),
        details: serde_json::Value::Null,
    })
}

fn align(ctx: &Context, dir: &Path) -> Result<Produced, CliError> {
    let ingest = ctx.dir(Stage::Ingest);
    let paths: Vec<PathBuf> = STREAMS.iter().map(|s| ingest.join(format!("{s}.csv"))).collect();
    let streams = read_streams(&paths, ctx)?;
    let days = align_cohort(&streams, &ctx.config.align()?)?;
    let aligned = dir.join("aligned.csv");
    let profiles = dir.join("profiles.csv");
    write_aligned(create(&aligned)?, &days, false)?;
    write_profiles(create(&profiles)?, &days)?;
    let findings: usize = days.iter().map(|d| validate_day_series(&d.minutes).findings.len()).sum();
    let low_confidence = days
        .iter()
        .filter(|d| d.profile.is_some_and(|p| p.low_confidence))
        .count();
    Ok(Produced {
        outputs: vec![aligned, profiles],
        counts: counts([
            ("user_days", days.len()),
            ("days_without_profile", days.iter().filter(|d| d.profile.is_none()).count()),
            ("low_confidence_profiles", low_confidence),
            ("validation_findings", findings),
        ]),
        details: serde_json::Value::Null,
    })
}

fn load_days(ctx: &Context, stage: Stage, file: &str) -> Result<Vec<AlignedDay>, CliError> {
    let dir = ctx.dir(stage);
    let profiles = read_profiles(open(&dir.join("profiles.csv"))?)?;
    Ok(read_aligned(open(&dir.join(file))?, ctx.config.taxonomy(), &profiles)?)
}

fn impute(ctx: &Context, inputs: &[PathBuf], dir: &Path) -> Result<Produced, CliError> {
    let days = load_days(ctx, Stage::Align, "aligned.csv")?;
    let (days, stats) = impute_cohort(days, &ctx.config.impute()?);
    let imputed = dir.join("imputed.csv");
    let profiles = dir.join("profiles.csv");
    let stats_csv = dir.join("stats.csv");
    write_aligned(create(&imputed)?, &days, true)?;
    write_profiles(create(&profiles)?, &days)?;
    write_stats_csv(create(&stats_csv)?, &stats)?;
    let sum = |f: fn(&harforge_core::impute::ImputationStats) -> u64| stats.iter().map(f).sum::<u64>() as usize;
    let mut details = serde_json::Map::new();
    let truth = ctx.truth_input().filter(|p| inputs.contains(p));
    if let Some(path) = truth {
        let truth = read_truth(open(&path)?, ctx.config.taxonomy())?;
        details.insert("mask".into(), serde_json::to_value(mask_report(&truth, &days)?)?);
    }
    Ok(Produced {
        outputs: vec![imputed, profiles, stats_csv],
        counts: counts([
            ("minutes", sum(|s| s.total_min())),
            ("unknown_pre", sum(|s| s.pre.unknown)),
            ("unknown_post", sum(|s| s.post.unknown)),
            ("rule1_minutes", sum(|s| s.rule1_min)),
            ("rule2_minutes", sum(|s| s.rule2_min)),
            ("rule3_minutes", sum(|s| s.rule3_min)),
            ("skipped_days", sum(|s| s.skipped_days.len() as u64)),
        ]),
        details: if details.is_empty() {
            serde_json::Value::Null
        } else {
            details.into()
        },
    })
}

fn dataset(ctx: &Context) -> Result<Produced, CliError> {
    let days = load_days(ctx, Stage::Impute, "imputed.csv")?;
    let (dcfg, spec) = (ctx.config.dataset()?, ctx.config.split()?);
    let mut outputs = Vec::new();
    let mut count_map = BTreeMap::new();
    let mut flagged = serde_json::Map::new();
    for w in ctx.config.widths()? {
        let ds = build_dataset(&days, w, &dcfg, &spec, ctx.config.taxonomy())?;
        let wdir = ctx.width_dir(Stage::Dataset, w);
        std::fs::create_dir_all(&wdir).map_err(|e| CliError::io(&wdir, e))?;
        let windows_path = wdir.join("windows.jsonl");
        let mut out = create(&windows_path)?;
        for split in [&ds.splits.train, &ds.splits.val, &ds.splits.test] {
            write_windows(&mut out, split)?;
        }
        drop(out);
        let split_path = wdir.join("split.json");
        let norm_path = wdir.join("normalizer.json");
        let spec_path = wdir.join("spec.json");
        report::write_json(&split_path, &SplitManifest::of(&ds.splits))?;
        report::write_json(&norm_path, &ds.normalizer)?;
        report::write_json(&spec_path, &spec)?;
        outputs.extend([windows_path, split_path, norm_path, spec_path]);
        for (k, v) in [
            ("labelled", ds.labelled),
            ("sampled", ds.sampled),
            ("train", ds.splits.train.len()),
            ("train_synthetic", ds.splits.train.iter().filter(|x| x.synthetic).count()),
            ("val", ds.splits.val.len()),
            ("test", ds.splits.test.len()),
        ] {
            count_map.insert(format!("w{w}.{k}"), v as u64);
        }
        if !ds.flagged_users.is_empty() {
            let users: Vec<&str> = ds.flagged_users.iter().map(|u| &**u).collect();
            flagged.insert(format!("w{w}"), json!(users));
        }
    }
    Ok(Produced {
        outputs,
        counts: count_map,
        details: if flagged.is_empty() {
            serde_json::Value::Null
        } else {
            json!({ "flagged_users": flagged })
        },
    })
}

fn load_splits(ctx: &Context, width: usize) -> Result<harforge_core::dataset::Splits, CliError> {
    let wdir = ctx.width_dir(Stage::Dataset, width);
    let manifest: SplitManifest = read_json(&wdir.join("split.json"))?;
    let windows = read_windows(open(&wdir.join("windows.jsonl"))?)?;
    Ok(manifest.resolve(windows)?)
}

fn train_stage(ctx: &Context) -> Result<Produced, CliError> {
    let (model_cfg, train_cfg, loss_cfg) = (ctx.config.model()?, ctx.config.train()?, ctx.config.loss()?);
    let taxonomy = ctx.config.taxonomy();
    let mut outputs = Vec::new();
    let mut count_map = BTreeMap::new();
    for w in ctx.config.widths()? {
        let mut splits = load_splits(ctx, w)?;
        let normalizer: Normalizer = read_json(&ctx.width_dir(Stage::Dataset, w).join("normalizer.json"))?;
        normalizer.apply(&mut splits.train);
        normalizer.apply(&mut splits.val);
        let train_set = EncodedSet::from_windows(&splits.train, taxonomy)?;
        let val_set = EncodedSet::from_windows(&splits.val, taxonomy)?;
        let init = ModelParams::init(model_cfg, train_cfg.seed)?;
        info!("train: width {w}, {} train / {} val windows", train_set.len(), val_set.len());
        let outcome = train(&train_set, &val_set, init, &train_cfg, &loss_cfg)?;
        let wdir = ctx.width_dir(Stage::Train, w);
        std::fs::create_dir_all(&wdir).map_err(|e| CliError::io(&wdir, e))?;
        let ckpt_path = wdir.join("checkpoint.json");
        Checkpoint::new(&outcome.params, train_cfg, loss_cfg, taxonomy.hash(), Some(normalizer))
            .write(create(&ckpt_path)?)?;
        let history_path = wdir.join("history.csv");
        let mut hw = csv::Writer::from_writer(create(&history_path)?);
        for rec in &outcome.history {
            hw.serialize(rec).map_err(harforge_core::Error::from)?;
        }
        hw.flush().map_err(|e| CliError::io(&history_path, e))?;
        outputs.extend([ckpt_path, history_path]);
        count_map.insert(format!("w{w}.epochs"), outcome.history.len() as u64);
        count_map.insert(format!("w{w}.best_epoch"), outcome.best_epoch.unwrap_or(0) as u64);
        count_map.insert(format!("w{w}.parameters"), outcome.params.parameter_count() as u64);
    }
    Ok(Produced {
        outputs,
        counts: count_map,
        details: serde_json::Value::Null,
    })
}

fn eval(ctx: &Context, dir: &Path) -> Result<Produced, CliError> {
    let taxonomy = ctx.config.taxonomy();
    let mut modes = Vec::new();
    let mut outputs = Vec::new();
    let mut count_map = BTreeMap::new();
    let mut summary = serde_json::Map::new();
    let mut reports = Vec::new();
    for w in ctx.config.widths()? {
        let ckpt_path = ctx.width_dir(Stage::Train, w).join("checkpoint.json");
        let ckpt_hash = report::sha256_file(&ckpt_path)?;
        let ckpt = Checkpoint::read(open(&ckpt_path)?)?;
        if ckpt.taxonomy_hash != taxonomy.hash() {
            return Err(CliError::Validation(format!(
                "{} was trained with a different taxonomy",
                ckpt_path.display()
            )));
        }
        let params = ckpt.params()?;
        let splits = load_splits(ctx, w)?;
        let spec: SplitSpec = read_json(&ctx.width_dir(Stage::Dataset, w).join("spec.json"))?;
        let mode = spec.mode;
        if !modes.contains(&mode) {
            modes.push(mode);
        }
        let mut r = evaluate_run(&params, &splits.test, ckpt.normalizer.as_ref(), taxonomy, mode, w)?;
        r.checkpoint_hash = Some(ckpt_hash.clone());
        let wdir = ctx.width_dir(Stage::Eval, w);
        std::fs::create_dir_all(&wdir).map_err(|e| CliError::io(&wdir, e))?;
        let report_path = wdir.join("report.json");
        let c1 = wdir.join("confusion_l1.csv");
        let c2 = wdir.join("confusion_l2.csv");
        report::write_json(&report_path, &r)?;
        write_confusion_csv(create(&c1)?, &r.confusion_l1, &r.labels_l1)?;
        write_confusion_csv(create(&c2)?, &r.confusion_l2, &r.labels_l2)?;
        outputs.extend([report_path, c1, c2]);
        count_map.insert(format!("w{w}.windows"), r.windows as u64);
        summary.insert(
            format!("w{w}"),
            json!({
                "checkpoint_hash": ckpt_hash,
                "accuracy_l1": r.accuracy_l1,
                "f1_l1": r.f1_l1,
                "auc_l1": r.auc_l1,
                "accuracy_l2": r.accuracy_l2,
                "f1_l2": r.f1_l2,
                "auc_l2": r.auc_l2,
            }),
        );
        reports.push(r);
    }
    let trend = dir.join("trend.csv");
    write_trend_csv(create(&trend)?, &reports)?;
    outputs.push(trend);
    Ok(Produced {
        outputs,
        counts: count_map,
        details: json!({
            "split_modes": modes.iter().map(|m| m.as_str()).collect::<Vec<_>>(),
            "widths": summary,
        }),
    })
}

fn viz(ctx: &Context, dir: &Path) -> Result<Produced, CliError> {
    let days = load_days(ctx, Stage::Impute, "imputed.csv")?;
    let charts = cohort_charts(&days, ctx.config.taxonomy(), ctx.config.band()?);
    let names = write_charts(&charts, dir)?;
    let index = dir.join("index.csv");
    write_index(create(&index)?, &charts, &names)?;
    let mut outputs: Vec<PathBuf> = names.iter().map(|n| dir.join(n)).collect();
    outputs.push(index);
    Ok(Produced {
        outputs,
        counts: counts([("charts", charts.len())]),
        details: serde_json::Value::Null,
    })
}
