//! End-to-end run: calibrate, label, augment, train, evaluate.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::{self, CalibrationOptions, CalibrationResult, RiskBudget};
use crate::cbm::{self, CbmModel, TrainConfig, TrainingLog};
use crate::concept_sets::{build_concept_set, Criterion};
use crate::dataset::{
    augment_dataset, build_vocabulary, label_dataset, AugmentationConfig, AugmentationSummary,
    ConceptLabeledSample, ConceptVocabulary,
};
use crate::error::{Error, Result};
use crate::evaluation::{self, EvalConfig, EvalReport};
use crate::io::{self, Checkpoint};
use crate::synth::split_train_cal;
use crate::types::{AnnotatedSample, ConceptCatalog};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelinePaths {
    /// Training pool. Split into train and calibration parts unless `cal`
    /// is given.
    pub train: PathBuf,
    pub cal: Option<PathBuf>,
    pub test: PathBuf,
    pub catalog: PathBuf,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: PipelinePaths,
    pub budget: RiskBudget,
    pub calibration: CalibrationOptions,
    pub augmentation: AugmentationConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub split: SplitConfig,
    /// NEC values for the CCA curve.
    pub nec_curve: Vec<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: PipelinePaths::default(),
            budget: RiskBudget::default(),
            calibration: CalibrationOptions::default(),
            augmentation: AugmentationConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            split: SplitConfig::default(),
            nec_curve: (1..=10).collect(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        io::read_json(path)
    }

    pub fn validate(&self) -> Result<()> {
        self.budget.validate()?;
        self.calibration.grid_steps()?;
        self.augmentation.validate()?;
        self.train.validate()?;
        if self.eval.nec == 0 || self.nec_curve.contains(&0) {
            return Err(Error::InvalidConfig("nec must be at least 1".into()));
        }
        let f = self.split.train_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::InvalidConfig(format!("train_fraction {f} outside (0, 1)")));
        }
        Ok(())
    }
}

/// Mean loss of the calibrated sets `C_lambda_hat` on a held-out split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOutRisk {
    pub lambda_hat: f64,
    pub n: usize,
    pub loss_dis: f64,
    pub loss_cov: f64,
    pub loss_div: f64,
    pub mean_set_size: f64,
}

impl HeldOutRisk {
    pub fn loss(&self, c: Criterion) -> f64 {
        match c {
            Criterion::Dis => self.loss_dis,
            Criterion::Cov => self.loss_cov,
            Criterion::Div => self.loss_div,
        }
    }
}

pub fn held_out_risk(samples: &[AnnotatedSample], catalog: &ConceptCatalog, lambda_hat: f64) -> Result<HeldOutRisk> {
    if samples.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let risk = |c| calibration::empirical_risk(c, lambda_hat, samples, catalog);
    let mut size = 0usize;
    for s in samples {
        size += build_concept_set(s, lambda_hat)?.len();
    }
    Ok(HeldOutRisk {
        lambda_hat,
        n: samples.len(),
        loss_dis: risk(Criterion::Dis)?,
        loss_cov: risk(Criterion::Cov)?,
        loss_div: risk(Criterion::Div)?,
        mean_set_size: size as f64 / samples.len() as f64,
    })
}

#[derive(Debug, Clone)]
pub struct PipelineOutputs {
    pub calibration: CalibrationResult,
    pub vocabulary: ConceptVocabulary,
    pub train_set: Vec<ConceptLabeledSample>,
    pub augmentation: AugmentationSummary,
    pub model: CbmModel,
    pub training_log: TrainingLog,
    pub eval: EvalReport,
    pub held_out: HeldOutRisk,
    pub cca_curve: Vec<(usize, f64)>,
}

/// Runs every stage in memory. Errors carry the failing stage's name.
pub fn run_stages(
    train_pool: &[AnnotatedSample],
    cal: Option<&[AnnotatedSample]>,
    test: &[AnnotatedSample],
    catalog: &ConceptCatalog,
    config: &PipelineConfig,
) -> Result<PipelineOutputs> {
    config.validate().map_err(|e| e.in_stage("config"))?;
    let split;
    let (train, cal) = match cal {
        Some(cal) => (train_pool, cal),
        None => {
            split = split_train_cal(train_pool, config.split.train_fraction, config.split.seed)
                .map_err(|e| e.in_stage("split"))?;
            (&split.0[..], &split.1[..])
        }
    };
    log::info!("train {} / calibration {} / test {}", train.len(), cal.len(), test.len());

    let calibration = calibration::calibrate(&config.budget, cal, catalog, &config.calibration)
        .map_err(|e| e.in_stage("calibrate"))?;
    let lambda_hat = calibration.lambda_hat;
    log::info!(
        "lambda_hat = {lambda_hat} (dis {}, cov {}, div {})",
        calibration.lambda_dis,
        calibration.lambda_cov,
        calibration.lambda_div
    );

    let vocabulary = build_vocabulary(train, catalog, lambda_hat).map_err(|e| e.in_stage("build"))?;
    let mut train_set = label_dataset(train, &vocabulary, lambda_hat).map_err(|e| e.in_stage("build"))?;

    let augmentation = augment_dataset(&mut train_set, &vocabulary, lambda_hat, catalog, &config.augmentation)
        .map_err(|e| e.in_stage("augment"))?;

    let (model, training_log) = cbm::train(&train_set, &vocabulary, catalog.num_classes(), &config.train)
        .map_err(|e| e.in_stage("train"))?;

    let eval = evaluation::accuracy_report(&model, test, &vocabulary, catalog, &config.eval)
        .map_err(|e| e.in_stage("evaluate"))?;
    let cca_curve = evaluation::cca_curve(&model, test, &vocabulary, catalog, &config.eval.budget, &config.nec_curve)
        .map_err(|e| e.in_stage("evaluate"))?;
    let held_out = held_out_risk(test, catalog, lambda_hat).map_err(|e| e.in_stage("evaluate"))?;

    Ok(PipelineOutputs {
        calibration,
        vocabulary,
        train_set,
        augmentation,
        model,
        training_log,
        eval,
        held_out,
        cca_curve,
    })
}

pub const CALIBRATION_FILE: &str = "calibration.json";
pub const VOCABULARY_FILE: &str = "vocabulary.json";
pub const TRAIN_SET_FILE: &str = "train_augmented.ndjson";
pub const AUGMENTATION_FILE: &str = "augmentation.json";
pub const MODEL_FILE: &str = "model.json";
pub const TRAINING_LOG_FILE: &str = "training_log.csv";
pub const EVAL_FILE: &str = "eval_report.json";
pub const INDICATORS_FILE: &str = "indicators.csv";
pub const HELD_OUT_FILE: &str = "held_out_risk.json";
pub const RISK_CURVES_FILE: &str = "risk_curves.dat";
pub const CCA_CURVE_FILE: &str = "cca_vs_nec.dat";
pub const SUMMARY_FILE: &str = "summary.txt";

/// Risk curves as a table `lambda dis cov div`.
pub fn write_risk_curves(path: &Path, result: &CalibrationResult) -> Result<()> {
    let curves: Vec<_> = Criterion::ALL
        .into_iter()
        .map(|c| {
            result
                .curve(c)
                .ok_or_else(|| Error::InvalidConfig(format!("no {c} curve in calibration result")))
        })
        .collect::<Result<_>>()?;
    let rows: Vec<Vec<f64>> = (0..curves[0].grid.len())
        .map(|i| {
            let mut row = vec![curves[0].grid[i]];
            row.extend(curves.iter().map(|c| c.risks[i]));
            row
        })
        .collect();
    io::write_dat(path, &["lambda", "risk_dis", "risk_cov", "risk_div"], &rows)
}

pub fn write_cca_curve(path: &Path, curve: &[(usize, f64)]) -> Result<()> {
    let rows: Vec<Vec<f64>> = curve.iter().map(|&(n, c)| vec![n as f64, c]).collect();
    io::write_dat(path, &["nec", "cca"], &rows)
}

pub fn summary_text(out: &PipelineOutputs) -> String {
    let mut s = String::new();
    let c = &out.calibration;
    let _ = writeln!(s, "calibration samples   {}", c.n_cal);
    let _ = writeln!(
        s,
        "lambda dis/cov/div    {:.3} / {:.3} / {:.3}",
        c.lambda_dis, c.lambda_cov, c.lambda_div
    );
    let _ = writeln!(s, "lambda_hat            {:.3}", c.lambda_hat);
    let _ = writeln!(s, "vocabulary size       {}", out.vocabulary.len());
    let _ = writeln!(
        s,
        "training samples      {} ({} augmented)",
        out.train_set.len(),
        out.augmentation.augmented_len - out.augmentation.original_len
    );
    let e = &out.eval;
    let _ = writeln!(s, "overall accuracy      {:.4}", e.overall_accuracy);
    let _ = writeln!(s, "worst-class accuracy  {:.4}", e.worst_class_accuracy);
    let _ = writeln!(s, "CCA (nec = {:>3})       {:.4}", e.config.nec, e.cca);
    let h = &out.held_out;
    let _ = writeln!(
        s,
        "held-out risk         dis {:.4}  cov {:.4}  div {:.4}  (|C| = {:.2})",
        h.loss_dis, h.loss_cov, h.loss_div, h.mean_set_size
    );
    s
}

pub fn write_artifacts(dir: &Path, out: &PipelineOutputs, config: &PipelineConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    io::write_json(&dir.join(CALIBRATION_FILE), &out.calibration)?;
    io::write_json(&dir.join(VOCABULARY_FILE), &out.vocabulary)?;
    io::save_labeled(&dir.join(TRAIN_SET_FILE), &out.train_set)?;
    io::write_json(&dir.join(AUGMENTATION_FILE), &out.augmentation)?;
    io::save_checkpoint(
        &dir.join(MODEL_FILE),
        &Checkpoint {
            model: out.model.clone(),
            vocabulary: out.vocabulary.clone(),
            config: config.train,
        },
    )?;
    io::write_training_log(&dir.join(TRAINING_LOG_FILE), &out.training_log)?;
    io::write_json(&dir.join(EVAL_FILE), &out.eval)?;
    io::write_indicators_csv(&dir.join(INDICATORS_FILE), &out.eval)?;
    io::write_json(&dir.join(HELD_OUT_FILE), &out.held_out)?;
    write_risk_curves(&dir.join(RISK_CURVES_FILE), &out.calibration)?;
    write_cca_curve(&dir.join(CCA_CURVE_FILE), &out.cca_curve)?;
    let summary = summary_text(out);
    let path = dir.join(SUMMARY_FILE);
    fs::write(&path, summary).map_err(|e| Error::io(path, e))
}

/// Loads the configured files, runs every stage and writes the artifacts.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineOutputs> {
    let p = &config.paths;
    if p.output_dir.as_os_str().is_empty() {
        return Err(Error::InvalidConfig("output_dir is required".into()));
    }
    let catalog = io::load_catalog(&p.catalog).map_err(|e| e.in_stage("catalog"))?;
    let train = io::load_dataset(&p.train, &catalog).map_err(|e| e.in_stage("load train"))?;
    let cal = match &p.cal {
        Some(path) => Some(io::load_dataset(path, &catalog).map_err(|e| e.in_stage("load cal"))?),
        None => None,
    };
    let test = io::load_dataset(&p.test, &catalog).map_err(|e| e.in_stage("load test"))?;
    let out = run_stages(&train, cal.as_deref(), &test, &catalog, config)?;
    write_artifacts(&p.output_dir, &out, config).map_err(|e| e.in_stage("write"))?;
    Ok(out)
}
