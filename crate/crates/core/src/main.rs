use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use concept_crc::calibration::{self, CalibrationResult, CoverageReport, GuaranteeConfig, SearchMode};
use concept_crc::cbm;
use concept_crc::dataset::{augment_dataset, build_vocabulary, label_dataset, ConceptVocabulary};
use concept_crc::evaluation;
use concept_crc::io::{self, Checkpoint};
use concept_crc::pipeline::{self, PipelineConfig};
use concept_crc::synth::{SyntheticSpec, SyntheticWorld};
use concept_crc::types::validate_dataset;
use concept_crc::{Error, Result};

#[derive(Parser)]
#[command(name = "concept-crc", version, about = "Risk-controlled concept annotation and concept bottleneck training")]
struct Cli {
    /// JSON pipeline configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a sample file against a catalog.
    Validate {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
    },
    /// Choose the concept-set threshold on a calibration file.
    Calibrate {
        #[arg(long)]
        cal: PathBuf,
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[command(flatten)]
        budget: BudgetArgs,
        #[command(flatten)]
        search: SearchArgs,
        /// Output JSON; risk curves go next to it as risk_curves.dat.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the vocabulary and concept labels for a training file.
    Build {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long)]
        calibration: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        vocab_out: PathBuf,
    },
    /// Top up sparse concepts with copy-paste composites.
    Augment {
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        calibration: PathBuf,
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[command(flatten)]
        aug: AugmentArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Train the concept bottleneck model.
    Train {
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Accuracy, worst-class accuracy and CCA on a test file.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[command(flatten)]
        budget: BudgetArgs,
        #[arg(long)]
        nec: Option<usize>,
        /// Output directory for the report, indicators and CCA-vs-NEC table.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run every stage and write all artifacts.
    Pipeline {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        cal: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        train_fraction: Option<f64>,
        #[arg(long)]
        split_seed: Option<u64>,
        #[arg(long)]
        nec: Option<usize>,
        #[command(flatten)]
        budget: BudgetArgs,
        #[command(flatten)]
        search: SearchArgs,
        #[command(flatten)]
        aug: AugmentArgs,
        #[command(flatten)]
        train_args: TrainArgs,
    },
    /// Write a synthetic catalog, training pool, test set and config.
    Synth {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long, default_value_t = 50)]
        test_per_class: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Monte Carlo check of the finite-sample risk guarantee.
    CrcCheck {
        #[command(flatten)]
        spec: SpecArgs,
        #[command(flatten)]
        budget: BudgetArgs,
        #[command(flatten)]
        search: SearchArgs,
        #[arg(long, default_value_t = 100)]
        n_cal: usize,
        #[arg(long, default_value_t = 2000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        trial_seed: u64,
        #[arg(long, default_value_t = 0.01)]
        slack: f64,
        /// Scale present-concept confidences of target draws only.
        #[arg(long)]
        shift: Option<f64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Args, Clone, Default)]
struct BudgetArgs {
    #[arg(long)]
    alpha_dis: Option<f64>,
    #[arg(long)]
    alpha_cov: Option<f64>,
    #[arg(long)]
    alpha_div: Option<f64>,
}

#[derive(Args, Clone, Default)]
struct SearchArgs {
    #[arg(long)]
    resolution: Option<f64>,
    /// Search the exact confidence breakpoints instead of the grid.
    #[arg(long)]
    exact: bool,
}

#[derive(Args, Clone, Default)]
struct AugmentArgs {
    #[arg(long)]
    min_count: Option<usize>,
    #[arg(long)]
    max_placement_attempts: Option<usize>,
    #[arg(long)]
    aug_seed: Option<u64>,
}

#[derive(Args, Clone, Default)]
struct TrainArgs {
    #[arg(long)]
    gamma1: Option<f64>,
    #[arg(long)]
    gamma2: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    train_seed: Option<u64>,
    #[arg(long)]
    proximal: bool,
}

#[derive(Args, Clone)]
struct SpecArgs {
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 6)]
    concepts_per_class: usize,
    #[arg(long, default_value_t = 50)]
    samples_per_class: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_pixels: bool,
}

impl SpecArgs {
    fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.classes,
            concepts_per_class: self.concepts_per_class,
            samples_per_class: self.samples_per_class,
            d: self.dim,
            noise: self.noise,
            seed: self.seed,
            with_pixels: !self.no_pixels,
            ..Default::default()
        }
    }
}

fn set<T: Copy>(target: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *target = v;
    }
}

impl BudgetArgs {
    fn apply(&self, cfg: &mut PipelineConfig) {
        set(&mut cfg.budget.alpha_dis, self.alpha_dis);
        set(&mut cfg.budget.alpha_cov, self.alpha_cov);
        set(&mut cfg.budget.alpha_div, self.alpha_div);
        cfg.eval.budget = cfg.budget;
    }
}

impl SearchArgs {
    fn apply(&self, cfg: &mut PipelineConfig) {
        set(&mut cfg.calibration.resolution, self.resolution);
        if self.exact {
            cfg.calibration.mode = SearchMode::Exact;
        }
    }
}

impl AugmentArgs {
    fn apply(&self, cfg: &mut PipelineConfig) {
        let a = &mut cfg.augmentation;
        set(&mut a.min_count, self.min_count);
        set(&mut a.max_placement_attempts, self.max_placement_attempts);
        set(&mut a.rng_seed, self.aug_seed);
    }
}

impl TrainArgs {
    fn apply(&self, cfg: &mut PipelineConfig) {
        let t = &mut cfg.train;
        set(&mut t.gamma1, self.gamma1);
        set(&mut t.gamma2, self.gamma2);
        set(&mut t.beta, self.beta);
        set(&mut t.learning_rate, self.learning_rate);
        set(&mut t.epochs, self.epochs);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.momentum, self.momentum);
        set(&mut t.rng_seed, self.train_seed);
        if self.proximal {
            t.l1_mode = cbm::L1Mode::Proximal;
        }
    }
}

fn pick(flag: &Option<PathBuf>, from_config: &Path, what: &str) -> Result<PathBuf> {
    match flag {
        Some(p) => Ok(p.clone()),
        None if !from_config.as_os_str().is_empty() => Ok(from_config.to_path_buf()),
        None => Err(Error::InvalidConfig(format!("--{what} is required"))),
    }
}

fn load_catalog(flag: &Option<PathBuf>, cfg: &PipelineConfig) -> Result<concept_crc::types::ConceptCatalog> {
    let path = pick(flag, &cfg.paths.catalog, "catalog")?;
    io::load_catalog(&path).map_err(|e| e.in_stage("catalog"))
}

fn coverage_table(report: &CoverageReport) -> Vec<Vec<f64>> {
    report
        .trials
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut row = vec![i as f64, t.lambda_hat];
            row.extend(t.target_losses);
            row.push(t.target_set_size as f64);
            row
        })
        .collect()
}

fn print_coverage(report: &CoverageReport) {
    println!(
        "trials {}  n_cal {}  exchangeable {}",
        report.config.n_trials, report.config.n_cal, report.exchangeable
    );
    for c in &report.criteria {
        println!(
            "{:<4} alpha {:.3}  mean target loss {:.4}  (se {:.4})  {}",
            c.criterion.name(),
            c.alpha,
            c.mean_target_loss,
            c.std_error,
            if c.within_slack { "ok" } else { "EXCEEDED" }
        );
    }
    println!(
        "mean lambda_hat {:.4}  mean |C| {:.3}  verdict {:?}",
        report.mean_lambda_hat, report.mean_set_size, report.verdict
    );
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).map_err(|e| e.in_stage("config"))?,
        None => PipelineConfig::default(),
    };
    match cli.command {
        Command::Validate { samples, catalog } => {
            let catalog = io::load_catalog(&catalog).map_err(|e| e.in_stage("catalog"))?;
            let samples = io::read_samples(&samples)?;
            let violations = validate_dataset(&samples, &catalog);
            for v in &violations {
                println!("{v}");
            }
            if !violations.is_empty() {
                return Err(Error::Validation(violations));
            }
            println!("{} samples, no violations", samples.len());
        }
        Command::Calibrate {
            cal,
            catalog,
            budget,
            search,
            out,
        } => {
            budget.apply(&mut cfg);
            search.apply(&mut cfg);
            let catalog = load_catalog(&catalog, &cfg)?;
            let cal = io::load_dataset(&cal, &catalog)?;
            let result = calibration::calibrate(&cfg.budget, &cal, &catalog, &cfg.calibration)?;
            io::write_json(&out, &result)?;
            pipeline::write_risk_curves(&out.with_file_name(pipeline::RISK_CURVES_FILE), &result)?;
            println!(
                "lambda_hat {} (dis {}, cov {}, div {})",
                result.lambda_hat, result.lambda_dis, result.lambda_cov, result.lambda_div
            );
        }
        Command::Build {
            train,
            catalog,
            calibration,
            out,
            vocab_out,
        } => {
            let catalog = load_catalog(&catalog, &cfg)?;
            let train = io::load_dataset(&train, &catalog)?;
            let cal: CalibrationResult = io::read_json(&calibration)?;
            let vocab = build_vocabulary(&train, &catalog, cal.lambda_hat)?;
            let labeled = label_dataset(&train, &vocab, cal.lambda_hat)?;
            io::save_labeled(&out, &labeled)?;
            io::write_json(&vocab_out, &vocab)?;
            println!("{} samples, vocabulary of {}", labeled.len(), vocab.len());
        }
        Command::Augment {
            labeled,
            vocab,
            calibration,
            catalog,
            aug,
            out,
            summary,
        } => {
            aug.apply(&mut cfg);
            let catalog = load_catalog(&catalog, &cfg)?;
            let mut data = io::load_labeled(&labeled)?;
            let vocab: ConceptVocabulary = io::read_json(&vocab)?;
            let cal: CalibrationResult = io::read_json(&calibration)?;
            let s = augment_dataset(&mut data, &vocab, cal.lambda_hat, &catalog, &cfg.augmentation)?;
            io::save_labeled(&out, &data)?;
            if let Some(p) = summary {
                io::write_json(&p, &s)?;
            }
            for o in &s.outcomes {
                println!(
                    "concept {}: {} -> {} ({:?})",
                    o.concept, o.initial_count, o.final_count, o.status
                );
            }
            println!("{} -> {} samples", s.original_len, s.augmented_len);
        }
        Command::Train {
            labeled,
            vocab,
            catalog,
            train,
            out,
            log,
        } => {
            train.apply(&mut cfg);
            let catalog = load_catalog(&catalog, &cfg)?;
            let data = io::load_labeled(&labeled)?;
            let vocab: ConceptVocabulary = io::read_json(&vocab)?;
            let (model, tlog) = cbm::train(&data, &vocab, catalog.num_classes(), &cfg.train)?;
            io::save_checkpoint(
                &out,
                &Checkpoint {
                    model,
                    vocabulary: vocab,
                    config: cfg.train,
                },
            )?;
            if let Some(p) = log {
                io::write_training_log(&p, &tlog)?;
            }
            if let Some(last) = tlog.epochs.last() {
                println!("epoch {}: objective {}", last.epoch, last.terms.total);
            }
        }
        Command::Evaluate {
            model,
            test,
            catalog,
            budget,
            nec,
            out_dir,
        } => {
            budget.apply(&mut cfg);
            set(&mut cfg.eval.nec, nec);
            let catalog = load_catalog(&catalog, &cfg)?;
            let test = io::load_dataset(&pick(&test, &cfg.paths.test, "test")?, &catalog)?;
            let ckpt = io::load_checkpoint(&model)?;
            let report = evaluation::accuracy_report(&ckpt.model, &test, &ckpt.vocabulary, &catalog, &cfg.eval)?;
            let curve = evaluation::cca_curve(
                &ckpt.model,
                &test,
                &ckpt.vocabulary,
                &catalog,
                &cfg.eval.budget,
                &cfg.nec_curve,
            )?;
            io::write_json(&out_dir.join(pipeline::EVAL_FILE), &report)?;
            io::write_indicators_csv(&out_dir.join(pipeline::INDICATORS_FILE), &report)?;
            pipeline::write_cca_curve(&out_dir.join(pipeline::CCA_CURVE_FILE), &curve)?;
            println!(
                "overall {:.4}  worst-class {:.4}  CCA {:.4} (nec {})",
                report.overall_accuracy, report.worst_class_accuracy, report.cca, cfg.eval.nec
            );
        }
        Command::Pipeline {
            train,
            cal,
            test,
            catalog,
            output_dir,
            train_fraction,
            split_seed,
            nec,
            budget,
            search,
            aug,
            train_args,
        } => {
            let p = &mut cfg.paths;
            set_path(&mut p.train, train);
            if cal.is_some() {
                p.cal = cal;
            }
            set_path(&mut p.test, test);
            set_path(&mut p.catalog, catalog);
            set_path(&mut p.output_dir, output_dir);
            set(&mut cfg.split.train_fraction, train_fraction);
            set(&mut cfg.split.seed, split_seed);
            set(&mut cfg.eval.nec, nec);
            budget.apply(&mut cfg);
            search.apply(&mut cfg);
            aug.apply(&mut cfg);
            train_args.apply(&mut cfg);
            if cfg.paths.catalog.as_os_str().is_empty() {
                return Err(Error::InvalidConfig("catalog path is required".into()));
            }
            let out = pipeline::run_pipeline(&cfg)?;
            print!("{}", pipeline::summary_text(&out));
        }
        Command::Synth {
            spec,
            test_per_class,
            out_dir,
        } => {
            let spec = spec.spec();
            let world = SyntheticWorld::new(spec)?;
            let train = world.generate(spec.samples_per_class, spec.seed, "s")?;
            let test = world.generate(test_per_class, spec.seed.wrapping_add(1), "t")?;
            io::save_catalog(&out_dir.join("catalog.json"), world.catalog())?;
            io::save_samples(&out_dir.join("train.ndjson"), &train)?;
            io::save_samples(&out_dir.join("test.ndjson"), &test)?;
            let abs = |name: &str| std::path::absolute(out_dir.join(name)).unwrap_or_else(|_| out_dir.join(name));
            let mut pc = PipelineConfig::default();
            pc.paths.train = abs("train.ndjson");
            pc.paths.test = abs("test.ndjson");
            pc.paths.catalog = abs("catalog.json");
            pc.paths.output_dir = abs("run");
            io::write_json(&out_dir.join("config.json"), &pc)?;
            println!(
                "{} training and {} test samples over {} classes",
                train.len(),
                test.len(),
                spec.classes
            );
        }
        Command::CrcCheck {
            spec,
            budget,
            search,
            n_cal,
            trials,
            trial_seed,
            slack,
            shift,
            out_dir,
        } => {
            budget.apply(&mut cfg);
            search.apply(&mut cfg);
            let mut world = SyntheticWorld::new(SyntheticSpec {
                with_pixels: false,
                ..spec.spec()
            })?;
            if let Some(s) = shift {
                world = world.shifted(s);
            }
            let gc = GuaranteeConfig {
                n_cal,
                n_trials: trials,
                seed: trial_seed,
                slack,
                options: cfg.calibration,
            };
            let report = calibration::validate_guarantee(&cfg.budget, &world, &gc)?;
            print_coverage(&report);
            if let Some(dir) = out_dir {
                io::write_json(&dir.join("coverage.json"), &report)?;
                io::write_dat(
                    &dir.join("coverage.dat"),
                    &["trial", "lambda_hat", "loss_dis", "loss_cov", "loss_div", "set_size"],
                    &coverage_table(&report),
                )?;
            }
        }
    }
    Ok(())
}

fn set_path(target: &mut PathBuf, value: Option<PathBuf>) {
    if let Some(v) = value {
        *target = v;
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
