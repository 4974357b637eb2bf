//! Stage orchestration over an output directory.
//!
//! ```text
//! <out>/config.resolved.json
//! <out>/data/{source,target}/            gen-data
//! <out>/checkpoints/pretrain.json         pretrain
//! <out>/division/{passes.jsonl,records.json}   divide
//! <out>/checkpoints/align{,_teacher}.json      align
//! <out>/checkpoints/finetune{,_teacher}.json   finetune
//! <out>/reports/metrics.json              eval
//! <out>/reports/ablation.{json,csv}       eval --ablation
//! <out>/reports/correlation.{json,csv}    correlate
//! <out>/logs/*.jsonl                     training logs
//! ```
//!
//! Stages after pretraining never open the source dataset: every dataset read
//! goes through a guard that refuses source data, and every file a stage opens
//! is recorded in the run summary.

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::StageConfig;
use crate::dataset::{gen_source, gen_target, read_json, write_json, Dataset, DatasetInfo, Domain};
use crate::detector::{detect_all, init_params, mc_predict_all, Checkpoint, DetectorConfig};
use crate::dump::{import_prediction_dump, write_dump, Duplicated};
use crate::error::{Error, Result};
use crate::metrics::{
    correlation_csv, mean_average_precision, recall_at, variance_group_correlation, ImageGt,
    MetricsReport, Prediction,
};
use crate::numerics::{derive_seed, ParamSet};
use crate::scenes::ImageSample;
use crate::trainer::{run_align, run_finetune, run_pretrain, LogRecord, TrainerState};
use crate::variance::{
    image_variance, rank_and_divide, split_ids, AlignedPasses, Combine, Subset, VarianceRecord,
};

const INIT_STREAM: u64 = 0x1d;
const MC_STREAM: u64 = 0x3c;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    Pretrain,
    Divide,
    Align,
    Finetune,
    Eval,
    Correlate,
    RunAll,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::GenData,
        Stage::Pretrain,
        Stage::Divide,
        Stage::Align,
        Stage::Finetune,
        Stage::Eval,
        Stage::Correlate,
        Stage::RunAll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Pretrain => "pretrain",
            Stage::Divide => "divide",
            Stage::Align => "align",
            Stage::Finetune => "finetune",
            Stage::Eval => "eval",
            Stage::Correlate => "correlate",
            Stage::RunAll => "run-all",
        }
    }

    /// Whether the stage may read source-domain data.
    pub fn may_read_source(self) -> bool {
        matches!(self, Stage::GenData | Stage::Pretrain)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Options {
    /// Also train the mean-teacher-only variant and report the three-way table.
    pub ablation: bool,
}

/// Files a stage opened or produced.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Access {
    pub stage: Stage,
    pub path: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Summary {
    pub reads: Vec<Access>,
    pub writes: Vec<Access>,
    pub metrics: Option<MetricsReport>,
    pub correlation: Option<MetricsReport>,
    pub ablation: Option<AblationReport>,
}

/// Output of the divide stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Division {
    pub sigma: f64,
    pub mc_passes: usize,
    pub combine: Combine,
    pub similar: usize,
    pub dissimilar: usize,
    /// Entries filled in by the IoU matcher when a pass had no counterpart.
    pub duplicated: Vec<Duplicated>,
    pub records: Vec<VarianceRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub map50: f64,
    pub recall_conf05: f64,
}

/// Agreement of the division at a different pass count with the configured one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mc_passes: usize,
    pub same_subset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
    pub mc_sweep: Vec<SweepRow>,
}

impl AblationReport {
    pub fn map_of(&self, variant: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variant == variant)
            .map(|r| r.map50)
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<10} {:>8} {:>10}\n", "variant", "mAP@0.5", "recall@0.5");
        for r in &self.rows {
            writeln!(
                out,
                "{:<10} {:>8.4} {:>10.4}",
                r.variant, r.map50, r.recall_conf05
            )
            .expect("string write");
        }
        out
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("variant,map50,recall_conf05\n");
        for r in &self.rows {
            writeln!(out, "{},{},{}", r.variant, r.map50, r.recall_conf05).expect("string write");
        }
        out
    }
}

pub const BASELINE: &str = "baseline";
pub const PLUS_MT: &str = "+MT";
pub const PLUS_MT_TSD: &str = "+MT+TSD";

/// Output locations under the run directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub out: PathBuf,
}

impl Layout {
    pub fn new(out: &Path) -> Self {
        Layout {
            out: out.to_path_buf(),
        }
    }

    pub fn resolved_config(&self) -> PathBuf {
        self.out.join("config.resolved.json")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.out.join("checkpoints").join(format!("{name}.json"))
    }

    pub fn passes(&self) -> PathBuf {
        self.out.join("division/passes.jsonl")
    }

    pub fn division(&self) -> PathBuf {
        self.out.join("division/records.json")
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.out.join("logs").join(format!("{name}.jsonl"))
    }

    pub fn report(&self, file: &str) -> PathBuf {
        self.out.join("reports").join(file)
    }
}

struct Ctx<'a> {
    cfg: &'a StageConfig,
    layout: Layout,
    stage: Stage,
    summary: Summary,
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Absolute form of `p` with symlinks resolved as far as the path exists.
fn resolve(p: &Path) -> PathBuf {
    if let Ok(c) = p.canonicalize() {
        return c;
    }
    match (p.parent(), p.file_name()) {
        (Some(parent), Some(name)) if !parent.as_os_str().is_empty() => resolve(parent).join(name),
        _ => std::env::current_dir()
            .map(|d| d.join(p))
            .unwrap_or_else(|_| p.to_path_buf()),
    }
}

impl<'a> Ctx<'a> {
    fn read(&mut self, path: &Path) {
        self.summary.reads.push(Access {
            stage: self.stage,
            path: path.to_path_buf(),
        });
    }

    fn wrote(&mut self, path: &Path) {
        self.summary.writes.push(Access {
            stage: self.stage,
            path: path.to_path_buf(),
        });
    }

    fn write_text(&mut self, path: &Path, text: &str) -> Result<()> {
        ensure_parent(path)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        self.wrote(path);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, path: &Path, value: &T) -> Result<()> {
        ensure_parent(path)?;
        write_json(path, value)?;
        self.wrote(path);
        Ok(())
    }

    fn source_free_violation(&self, path: &Path) -> Error {
        Error::SourceFree {
            stage: self.stage.name().into(),
            path: path.to_path_buf(),
        }
    }

    fn read_dataset(&mut self, domain: Domain) -> Result<Dataset> {
        let dir = match domain {
            Domain::Source => self.cfg.source_dir(),
            Domain::Target => self.cfg.target_dir(),
        };
        if !self.stage.may_read_source() {
            let src = resolve(&self.cfg.source_dir());
            if domain == Domain::Source || resolve(&dir).starts_with(&src) {
                return Err(self.source_free_violation(&dir));
            }
        }
        let header = dir.join("dataset.json");
        if !header.exists() {
            return Err(Error::Prerequisite {
                path: header,
                hint: "generate the datasets with `sfodlab gen-data`".into(),
            });
        }
        self.read(&header);
        let info: DatasetInfo = read_json(&header)?;
        if info.domain != domain {
            if info.domain == Domain::Source && !self.stage.may_read_source() {
                return Err(self.source_free_violation(&dir));
            }
            return Err(Error::Config {
                key: format!(
                    "data.{}_dir",
                    if domain == Domain::Source {
                        "source"
                    } else {
                        "target"
                    }
                ),
                msg: format!("{} holds a {:?} dataset", dir.display(), info.domain),
            });
        }
        self.read(&dir);
        let ds = Dataset::read(&dir)?;
        let scene = &self.cfg.data.scene;
        if (ds.info.height, ds.info.width, ds.info.num_classes)
            != (scene.height, scene.width, scene.num_classes)
        {
            return Err(Error::Prerequisite {
                path: dir,
                hint: "dataset does not match the configured scene; re-run `sfodlab gen-data`"
                    .into(),
            });
        }
        Ok(ds)
    }

    fn load_checkpoint(&mut self, name: &str, producer: Stage) -> Result<ParamSet> {
        let path = self.layout.checkpoint(name);
        if !path.exists() {
            return Err(Error::Prerequisite {
                path,
                hint: format!("run `sfodlab {producer}` first"),
            });
        }
        self.read(&path);
        let ck = Checkpoint::load(&path)?;
        if ck.config() != self.cfg.detector {
            return Err(Error::Prerequisite {
                path,
                hint: format!("checkpoint was built for another detector configuration; re-run `sfodlab {producer}`"),
            });
        }
        Ok(ck.params)
    }

    fn save_checkpoint(&mut self, name: &str, params: ParamSet) -> Result<()> {
        let path = self.layout.checkpoint(name);
        ensure_parent(&path)?;
        Checkpoint::new(&self.cfg.detector, params).save(&path)?;
        self.wrote(&path);
        Ok(())
    }

    fn load_division(&mut self) -> Result<Division> {
        let path = self.layout.division();
        if !path.exists() {
            return Err(Error::Prerequisite {
                path,
                hint: "run `sfodlab divide` first".into(),
            });
        }
        self.read(&path);
        read_json(&path)
    }

    fn write_log(&mut self, name: &str, records: &[LogRecord]) -> Result<()> {
        let mut text = String::new();
        for r in records {
            text.push_str(&serde_json::to_string(r).expect("log record serializes"));
            text.push('\n');
        }
        let path = self.layout.log(name);
        self.write_text(&path, &text)
    }
}

fn det(cfg: &StageConfig) -> &DetectorConfig {
    &cfg.detector
}

fn predictions(
    params: &ParamSet,
    cfg: &StageConfig,
    images: &[ImageSample],
) -> Result<Vec<Prediction>> {
    let dets = detect_all(params, det(cfg), images, cfg.eval.conf, cfg.eval.nms_iou)?;
    Ok(images
        .iter()
        .zip(dets)
        .flat_map(|(img, ds)| {
            ds.into_iter().map(move |d| Prediction {
                image_id: img.id,
                anchor_id: d.anchor_id,
                bbox: d.bbox,
                class: d.class(),
                confidence: d.confidence,
            })
        })
        .collect())
}

fn ground_truth(images: &[ImageSample]) -> Vec<ImageGt> {
    images
        .iter()
        .map(|i| ImageGt {
            image_id: i.id,
            boxes: i.boxes.clone(),
        })
        .collect()
}

fn metrics_for(preds: &[Prediction], gts: &[ImageGt], cfg: &StageConfig) -> MetricsReport {
    let k = cfg.detector.num_classes;
    let m = mean_average_precision(preds, gts, k, cfg.eval.iou);
    MetricsReport {
        per_class_ap: m.per_class_ap,
        map50: m.map,
        recall_conf05: recall_at(preds, gts, k, cfg.eval.recall_conf, cfg.eval.iou),
        correlation: None,
    }
}

/// Evaluates `params` on `images` with the configured thresholds.
pub fn evaluate(
    params: &ParamSet,
    cfg: &StageConfig,
    images: &[ImageSample],
) -> Result<MetricsReport> {
    let preds = predictions(params, cfg, images)?;
    Ok(metrics_for(&preds, &ground_truth(images), cfg))
}

fn collecting_log(records: &mut Vec<LogRecord>) -> impl FnMut(LogRecord) -> Result<()> + '_ {
    move |r| {
        if !(r.l_mt.is_finite()) {
            return Err(Error::Contract(format!(
                "{} loss diverged at iteration {}",
                r.stage, r.iter
            )));
        }
        records.push(r);
        Ok(())
    }
}

fn gen_data(ctx: &mut Ctx) -> Result<()> {
    let spec = ctx.cfg.dataset_spec();
    let source = gen_source(&spec);
    let target = gen_target(&spec)?;
    let (sdir, tdir) = (ctx.cfg.source_dir(), ctx.cfg.target_dir());
    source.write(&sdir)?;
    ctx.wrote(&sdir);
    target.write(&tdir)?;
    ctx.wrote(&tdir);
    eprintln!(
        "gen-data: {} source, {} target images",
        source.len(),
        target.len()
    );
    Ok(())
}

fn pretrain(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let source = ctx.read_dataset(Domain::Source)?;
    let init = init_params(det(cfg), derive_seed(cfg.seed, &[INIT_STREAM]))?;
    let mut log = Vec::new();
    let theta = run_pretrain(
        det(cfg),
        &cfg.train,
        init,
        &source.samples,
        cfg.seed,
        &mut collecting_log(&mut log),
    )?;
    ctx.write_log("pretrain", &log)?;
    ctx.save_checkpoint("pretrain", theta)?;
    eprintln!(
        "pretrain: {} iterations, final loss {:.4}",
        log.len(),
        log.last().map_or(f64::NAN, |r| r.l_mt)
    );
    Ok(())
}

fn mc_passes(
    cfg: &StageConfig,
    theta: &ParamSet,
    target: &Dataset,
    m: usize,
) -> Result<Vec<AlignedPasses>> {
    mc_predict_all(
        theta,
        det(cfg),
        &target.samples,
        m,
        derive_seed(cfg.seed, &[MC_STREAM]),
        cfg.division.tau_det,
    )
}

fn divide_passes(
    cfg: &StageConfig,
    passes: &[AlignedPasses],
    duplicated: Vec<Duplicated>,
) -> Result<Division> {
    let variances = passes
        .iter()
        .map(|p| image_variance(p, cfg.division.combine))
        .collect::<Result<Vec<_>>>()?;
    let records = rank_and_divide(&variances, cfg.division.sigma)?;
    let similar = records
        .iter()
        .filter(|r| r.subset == Subset::Similar)
        .count();
    Ok(Division {
        sigma: cfg.division.sigma,
        mc_passes: passes
            .first()
            .map_or(cfg.division.mc_passes, AlignedPasses::num_passes),
        combine: cfg.division.combine,
        similar,
        dissimilar: records.len() - similar,
        duplicated,
        records,
    })
}

fn divide(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let target = ctx.read_dataset(Domain::Target)?;
    let (passes, duplicated) = match &cfg.division.dump {
        Some(path) => {
            if !path.exists() {
                return Err(Error::Prerequisite {
                    path: path.clone(),
                    hint: "division.dump names a prediction dump that does not exist".into(),
                });
            }
            ctx.read(path);
            let imported = import_prediction_dump(path, cfg.division.matching)?;
            let mut ids: Vec<u64> = imported.images.iter().map(|p| p.id).collect();
            ids.sort_unstable();
            let expected: Vec<u64> = target.samples.iter().map(|s| s.id).collect();
            if ids != expected {
                return Err(Error::Config {
                    key: "division.dump".into(),
                    msg: "the dump must hold exactly one line per target image".into(),
                });
            }
            (imported.images, imported.duplicated)
        }
        None => {
            let theta = ctx.load_checkpoint("pretrain", Stage::Pretrain)?;
            (
                mc_passes(cfg, &theta, &target, cfg.division.mc_passes)?,
                Vec::new(),
            )
        }
    };
    let path = ctx.layout.passes();
    ensure_parent(&path)?;
    write_dump(&path, &passes)?;
    ctx.wrote(&path);
    let division = divide_passes(cfg, &passes, duplicated)?;
    eprintln!(
        "divide: {} similar, {} dissimilar",
        division.similar, division.dissimilar
    );
    let path = ctx.layout.division();
    ctx.write_json(&path, &division)
}

fn subsets<'d>(
    division: &Division,
    target: &'d Dataset,
) -> Result<(Vec<&'d ImageSample>, Vec<&'d ImageSample>)> {
    let (s, d) = split_ids(&division.records);
    let lookup = |ids: Vec<u64>| {
        ids.into_iter()
            .map(|id| {
                target
                    .samples
                    .iter()
                    .find(|x| x.id == id)
                    .ok_or_else(|| Error::Prerequisite {
                        path: PathBuf::from("division/records.json"),
                        hint: format!(
                            "image {id} is not in the target set; re-run `sfodlab divide`"
                        ),
                    })
            })
            .collect::<Result<Vec<_>>>()
    };
    Ok((lookup(s)?, lookup(d)?))
}

fn save_state(ctx: &mut Ctx, name: &str, state: TrainerState) -> Result<()> {
    ctx.save_checkpoint(&format!("{name}_teacher"), state.teacher)?;
    ctx.save_checkpoint(name, state.student)
}

fn align(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let target = ctx.read_dataset(Domain::Target)?;
    let theta = ctx.load_checkpoint("pretrain", Stage::Pretrain)?;
    let division = ctx.load_division()?;
    let (similar, dissimilar) = subsets(&division, &target)?;
    let mut log = Vec::new();
    let state = run_align(
        det(cfg),
        &cfg.train,
        theta,
        &similar,
        &dissimilar,
        true,
        cfg.seed,
        &mut collecting_log(&mut log),
    )?;
    ctx.write_log("align", &log)?;
    eprintln!("align: {} iterations", log.len());
    save_state(ctx, "align", state)
}

fn finetune_from(
    ctx: &mut Ctx,
    init: ParamSet,
    target: &Dataset,
    log_name: &str,
) -> Result<TrainerState> {
    let cfg = ctx.cfg;
    let mut log = Vec::new();
    let state = run_finetune(
        det(cfg),
        &cfg.train,
        init,
        &target.samples,
        cfg.seed,
        &mut collecting_log(&mut log),
    )?;
    ctx.write_log(log_name, &log)?;
    eprintln!("{log_name}: {} iterations", log.len());
    Ok(state)
}

fn finetune(ctx: &mut Ctx) -> Result<()> {
    let target = ctx.read_dataset(Domain::Target)?;
    let init = ctx.load_checkpoint("align", Stage::Align)?;
    let state = finetune_from(ctx, init, &target, "finetune")?;
    save_state(ctx, "finetune", state)
}

fn eval(ctx: &mut Ctx, opts: &Options) -> Result<()> {
    let cfg = ctx.cfg;
    let target = ctx.read_dataset(Domain::Target)?;
    let full = ctx.load_checkpoint("finetune", Stage::Finetune)?;
    let report = evaluate(&full, cfg, &target.samples)?;
    eprintln!(
        "eval: mAP@0.5 {:.4}, recall {:.4}",
        report.map50, report.recall_conf05
    );
    let path = ctx.layout.report("metrics.json");
    ctx.write_json(&path, &report)?;
    if opts.ablation {
        let theta = ctx.load_checkpoint("pretrain", Stage::Pretrain)?;
        let division = ctx.load_division()?;
        let mt_only = finetune_from(ctx, theta.clone(), &target, "ablation_mt")?.student;
        ctx.save_checkpoint("ablation_mt", mt_only.clone())?;
        let row = |variant: &str, m: &MetricsReport| AblationRow {
            variant: variant.into(),
            map50: m.map50,
            recall_conf05: m.recall_conf05,
        };
        let rows = vec![
            row(BASELINE, &evaluate(&theta, cfg, &target.samples)?),
            row(PLUS_MT, &evaluate(&mt_only, cfg, &target.samples)?),
            row(PLUS_MT_TSD, &report),
        ];
        let mut mc_sweep = Vec::new();
        if cfg.division.dump.is_none() {
            for &m in &cfg.division.mc_sweep {
                let other = divide_passes(cfg, &mc_passes(cfg, &theta, &target, m)?, Vec::new())?;
                let same = division
                    .records
                    .iter()
                    .filter(|r| {
                        other
                            .records
                            .iter()
                            .any(|o| o.id == r.id && o.subset == r.subset)
                    })
                    .count();
                mc_sweep.push(SweepRow {
                    mc_passes: m,
                    same_subset: same as f64 / division.records.len() as f64,
                });
            }
        }
        let ablation = AblationReport {
            seed: cfg.seed,
            rows,
            mc_sweep,
        };
        print!("{}", ablation.table());
        let (json, csv) = (
            ctx.layout.report("ablation.json"),
            ctx.layout.report("ablation.csv"),
        );
        ctx.write_json(&json, &ablation)?;
        ctx.write_text(&csv, &ablation.csv())?;
        ctx.summary.ablation = Some(ablation);
    }
    ctx.summary.metrics = Some(report);
    Ok(())
}

fn correlate(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let target = ctx.read_dataset(Domain::Target)?;
    let theta = ctx.load_checkpoint("pretrain", Stage::Pretrain)?;
    let division = ctx.load_division()?;
    let preds = predictions(&theta, cfg, &target.samples)?;
    let gts = ground_truth(&target.samples);
    let corr = variance_group_correlation(
        &division.records,
        &preds,
        &gts,
        cfg.detector.num_classes,
        cfg.eval.groups,
        cfg.eval.recall_conf,
        cfg.eval.iou,
    )?;
    let csv = correlation_csv(&corr);
    eprintln!("correlate: r = {:.4}, R^2 = {:.4}", corr.pearson_r, corr.r2);
    let mut report = metrics_for(&preds, &gts, cfg);
    report.correlation = Some(corr);
    let (json, csv_path) = (
        ctx.layout.report("correlation.json"),
        ctx.layout.report("correlation.csv"),
    );
    ctx.write_json(&json, &report)?;
    ctx.write_text(&csv_path, &csv)?;
    ctx.summary.correlation = Some(report);
    Ok(())
}

fn run_one(ctx: &mut Ctx, stage: Stage, opts: &Options) -> Result<()> {
    ctx.stage = stage;
    match stage {
        Stage::GenData => gen_data(ctx),
        Stage::Pretrain => pretrain(ctx),
        Stage::Divide => divide(ctx),
        Stage::Align => align(ctx),
        Stage::Finetune => finetune(ctx),
        Stage::Eval => eval(ctx, opts),
        Stage::Correlate => correlate(ctx),
        Stage::RunAll => {
            for s in &Stage::ALL[..7] {
                run_one(ctx, *s, opts)?;
            }
            Ok(())
        }
    }
}

/// Runs `stage` (all stages in order for [`Stage::RunAll`]) with the output
/// directory taken from `cfg.out_dir`.
pub fn run(stage: Stage, cfg: &StageConfig, opts: &Options) -> Result<Summary> {
    cfg.validate()?;
    let mut ctx = Ctx {
        cfg,
        layout: Layout::new(&cfg.out_dir),
        stage,
        summary: Summary::default(),
    };
    let resolved = ctx.layout.resolved_config();
    ctx.write_text(&resolved, &cfg.resolved_json())?;
    run_one(&mut ctx, stage, opts)?;
    Ok(ctx.summary)
}

/// Worker count requested through `SFODLAB_THREADS`, if any.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var("SFODLAB_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config {
                key: "SFODLAB_THREADS".into(),
                msg: format!("`{v}` is not a positive integer"),
            }),
        },
    }
}
