use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use rgwm::config::PerturbationChoice;
use rgwm::evaluate::{evaluate, results_csv};
use rgwm::manifest::RunManifest;
use rgwm::pipeline::cluster_table;
use rgwm::prefix_tuner::{report_csv, summary_json, tune_prefix, TuneRequest};
use rgwm::train::train_cc;
use rgwm::{CliError, CliResult, Config, Pipeline};
use rgwm_core::classifier::{cc_grad_check, CcModel};
use rgwm_core::codebook::{sample_codebook, ClusterTable, Codebook};
use rgwm_core::perturb::{apply, NamedPerturbation, PerturbSpec};
use rgwm_core::pixelcodec::{decode, read_ppm, write_ppm};
use rgwm_core::verifier::{verify_image, VerifyMode};
use rgwm_core::SplitMix64;

#[derive(Parser)]
#[command(name = "rgwm", version, about = "Red-green watermarking for toy VQ image generators")]
struct Cli {
    /// JSON configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Increase log verbosity.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Overrides {
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    vocab_size: Option<usize>,
    #[arg(long, global = true)]
    patch_size: Option<usize>,
    #[arg(long, global = true)]
    n_modes: Option<usize>,
    #[arg(long, global = true)]
    spread: Option<f64>,
    /// Number of token clusters.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Use one cluster per token.
    #[arg(long, global = true)]
    identity: bool,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    kappa: Option<u64>,
    #[arg(long, global = true)]
    gamma: Option<f64>,
    #[arg(long, global = true)]
    delta: Option<f64>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    #[arg(long, global = true)]
    top_k: Option<usize>,
    #[arg(long, global = true)]
    top_p: Option<f64>,
    #[arg(long = "class", global = true)]
    class_id: Option<usize>,
    #[arg(long, global = true)]
    h: Option<usize>,
    #[arg(long, global = true)]
    w: Option<usize>,
}

#[derive(Args)]
struct Artifacts {
    /// Codebook file; sampled from the configuration when absent.
    #[arg(long)]
    codebook: Option<PathBuf>,
    /// Cluster table JSON; computed from the configuration when absent.
    #[arg(long)]
    clusters: Option<PathBuf>,
}

#[derive(Args)]
struct PerturbChoiceArgs {
    /// Built-in perturbation set: A, B or train.
    #[arg(long)]
    perturb_set: Option<String>,
    /// Perturbation as kind=value; repeatable.
    #[arg(long = "perturb")]
    perturb: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic codebook.
    MakeCodebook {
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster a codebook with k-means.
    Cluster {
        #[arg(long)]
        codebook: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate one image, watermarked unless --no-wm.
    Generate {
        #[command(flatten)]
        artifacts: Artifacts,
        #[arg(long)]
        no_wm: bool,
        #[arg(long)]
        out: PathBuf,
        /// Also write the token grid as JSON.
        #[arg(long)]
        tokens_out: Option<PathBuf>,
    },
    /// Apply perturbations to an image in order.
    Perturb {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "perturb", required = true)]
        perturb: Vec<String>,
    },
    /// Verify one image and print a JSON report.
    Verify {
        #[command(flatten)]
        artifacts: Artifacts,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "vq")]
        mode: VerifyMode,
        #[arg(long)]
        cc_model: Option<PathBuf>,
        /// p-value threshold for the decision.
        #[arg(long, default_value_t = 0.01)]
        rho: f64,
    },
    /// Run the watermarked versus unwatermarked evaluation protocol.
    Evaluate {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        n_images: Option<usize>,
        #[command(flatten)]
        perturbations: PerturbChoiceArgs,
        /// Verification modes; repeatable.
        #[arg(long = "mode")]
        modes: Vec<VerifyMode>,
        #[arg(long)]
        cc_model: Option<PathBuf>,
        /// Repeat the run recorded in a manifest.
        #[arg(long)]
        from_manifest: Option<PathBuf>,
    },
    /// Search hash prefixes for robustness.
    TunePrefix {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_delimiter = ',')]
        candidates: Vec<u64>,
        #[arg(long)]
        n_images: Option<usize>,
        #[command(flatten)]
        perturbations: PerturbChoiceArgs,
        #[arg(long)]
        mode: Option<VerifyMode>,
        #[arg(long)]
        cc_model: Option<PathBuf>,
    },
    /// Train the cluster classifier.
    TrainCc {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_images: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Compare classifier gradients with central differences.
    GradCheck {
        #[arg(long, default_value_t = 10)]
        models: usize,
        #[arg(long, default_value_t = 100)]
        params: usize,
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
    },
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(err) = run(cli) {
        eprintln!("rgwm: {err}");
        std::process::exit(err.exit_code());
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot start {jobs} workers: {e}")))?;
    }
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    apply_overrides(&mut cfg, &cli.overrides);

    match cli.command {
        Command::MakeCodebook { out } => {
            cfg.validate()?;
            let cb = &cfg.codebook;
            let codebook = sample_codebook(cfg.seed("codebook"), cb.vocab_size, cb.patch_size, cb.n_modes, cb.spread)?;
            codebook.save(&out)?;
            info!("wrote {}", out.display());
        }
        Command::Cluster { codebook, out } => {
            cfg.validate()?;
            let codebook = load_or_sample_codebook(&cfg, codebook.as_deref())?;
            let table = cluster_table(&cfg, &codebook)?;
            info!("k = {}, inertia = {}", table.k, table.inertia);
            fs::write(&out, table.to_json()?)?;
        }
        Command::Generate { artifacts, no_wm, out, tokens_out } => {
            let pipeline = pipeline_from(&cfg, &artifacts)?;
            let watermark = pipeline.watermark(&cfg, cfg.watermark.kappa)?;
            let grid = pipeline.generate(&cfg, (!no_wm).then_some(&watermark), cfg.generate.class_id, cfg.seed("generate/cli"))?;
            write_ppm(&decode(&grid, &pipeline.codebook)?, &out)?;
            if let Some(path) = tokens_out {
                fs::write(path, grid.to_json()?)?;
            }
        }
        Command::Perturb { input, out, perturb } => {
            let mut image = read_ppm(&input)?;
            let mut rng = SplitMix64::new(cfg.seed("perturb/cli"));
            for text in &perturb {
                let spec = parse_perturb(text)?.with_seed(rng.next_u64());
                image = apply(&image, &spec)?;
            }
            write_ppm(&image, &out)?;
        }
        Command::Verify { artifacts, image, mode, cc_model, rho } => {
            let pipeline = pipeline_from(&cfg, &artifacts)?;
            let watermark = pipeline.watermark(&cfg, cfg.watermark.kappa)?;
            let model = cc_model.map(CcModel::load).transpose()?;
            let img = read_ppm(&image)?;
            let report = verify_image(&img, &pipeline.codebook, &watermark, mode, model.as_ref())?;
            let value = serde_json::json!({
                "image": image.display().to_string(),
                "mode": report.mode,
                "green_count": report.green_count,
                "T": report.total,
                "green_fraction": report.green_fraction,
                "p_value": report.p_value,
                "watermarked": report.is_watermarked(rho),
            });
            println!("{}", serde_json::to_string_pretty(&value).expect("report serializes"));
        }
        Command::Evaluate { out_dir, n_images, perturbations, modes, cc_model, from_manifest } => {
            let cc_path = match from_manifest {
                Some(_) if cli.config.is_some() => {
                    return Err(CliError::Config("--from-manifest replaces --config; pass only one".into()));
                }
                Some(path) => {
                    let manifest = RunManifest::load(path)?;
                    cfg = manifest.config;
                    manifest.cc_model.map(PathBuf::from)
                }
                None => {
                    if let Some(n) = n_images {
                        cfg.evaluate.n_images = n;
                    }
                    if let Some(choice) = perturbation_choice(&perturbations)? {
                        cfg.evaluate.perturbations = choice;
                    }
                    if !modes.is_empty() {
                        cfg.evaluate.modes = modes;
                    }
                    cc_model
                }
            };
            let mut manifest = RunManifest::new("evaluate", &cfg, cc_path.as_ref().map(|p| p.display().to_string()));
            let model = cc_path.map(CcModel::load).transpose()?;
            let pipeline = Pipeline::build(&cfg)?;
            let evaluation = evaluate(&cfg, &pipeline, model.as_ref())?;
            fs::create_dir_all(&out_dir)?;
            let results = out_dir.join("results.csv");
            let summary = out_dir.join("summary.json");
            fs::write(&results, results_csv(&evaluation.rows))?;
            fs::write(&summary, serde_json::to_string_pretty(&evaluation.summary).expect("summary serializes"))?;
            for row in &evaluation.summary.rows {
                println!("{:<4} {:<12} {}", row.mode, row.perturbation, row.cell);
            }
            let manifest_path = out_dir.join("manifest.json");
            manifest.finish(vec![path_string(&results), path_string(&summary)]);
            manifest.save(&manifest_path)?;
        }
        Command::TunePrefix { out_dir, candidates, n_images, perturbations, mode, cc_model } => {
            let tp = &mut cfg.tune_prefix;
            if !candidates.is_empty() {
                tp.candidates = candidates;
            }
            if let Some(n) = n_images {
                tp.n_images = n;
            }
            if let Some(m) = mode {
                tp.mode = m;
            }
            if let Some(choice) = perturbation_choice(&perturbations)? {
                tp.perturbations = choice;
            }
            let mut manifest = RunManifest::new("tune-prefix", &cfg, cc_model.as_ref().map(|p| p.display().to_string()));
            let model = cc_model.map(CcModel::load).transpose()?;
            let pipeline = Pipeline::build(&cfg)?;
            let set = cfg.tune_prefix.perturbations.resolve()?;
            let request = TuneRequest {
                candidates: &cfg.tune_prefix.candidates,
                n_images: cfg.tune_prefix.n_images,
                perturbations: &set,
                mode: cfg.tune_prefix.mode,
                fpr: cfg.tune_prefix.fpr,
            };
            let report = tune_prefix(&cfg, &pipeline, &request, model.as_ref())?;
            fs::create_dir_all(&out_dir)?;
            let csv = out_dir.join("prefix_report.csv");
            let summary = out_dir.join("prefix_summary.json");
            fs::write(&csv, report_csv(&report))?;
            fs::write(&summary, summary_json(&report))?;
            println!("chosen kappa {} (mean TPR {:.4})", report.chosen_kappa, report.mean_tpr);
            manifest.finish(vec![path_string(&csv), path_string(&summary)]);
            manifest.save(out_dir.join("manifest.json"))?;
        }
        Command::TrainCc { out, n_images, epochs, learning_rate } => {
            let t = &mut cfg.train_cc;
            if let Some(n) = n_images {
                t.n_images = n;
            }
            if let Some(e) = epochs {
                t.epochs = e;
            }
            if let Some(lr) = learning_rate {
                t.learning_rate = lr;
            }
            let pipeline = Pipeline::build(&cfg)?;
            let outcome = train_cc(&cfg, &pipeline)?;
            outcome.model.save(&out)?;
            if let Some(last) = outcome.epoch_losses.last() {
                println!("final training loss {last:.6}");
            }
        }
        Command::GradCheck { models, params, step } => {
            cfg.validate()?;
            let p = cfg.codebook.patch_size;
            let mut worst: f64 = 0.0;
            let mut rng = SplitMix64::new(cfg.seed("grad-check"));
            for m in 0..models {
                let model = CcModel::random(p, 16, 8, rng.next_u64())?;
                let n = 6;
                let patches: Vec<f32> = (0..n * model.input_dim()).map(|_| rng.next_f64() as f32).collect();
                let labels: Vec<usize> = (0..n).map(|_| rng.below(model.k)).collect();
                let err = cc_grad_check(&model, &patches, &labels, step, params, rng.next_u64())?;
                info!("model {m}: max relative error {err:.3e}");
                worst = worst.max(err);
            }
            println!("max relative error {worst:.3e}");
        }
    }
    Ok(())
}

fn apply_overrides(cfg: &mut Config, o: &Overrides) {
    macro_rules! set {
        ($($field:ident => $target:expr),* $(,)?) => {
            $(if let Some(v) = o.$field { $target = v; })*
        };
    }
    set! {
        seed => cfg.master_seed,
        vocab_size => cfg.codebook.vocab_size,
        patch_size => cfg.codebook.patch_size,
        n_modes => cfg.codebook.n_modes,
        spread => cfg.codebook.spread,
        k => cfg.cluster.k,
        alpha => cfg.model.alpha,
        beta => cfg.model.beta,
        kappa => cfg.watermark.kappa,
        gamma => cfg.watermark.gamma,
        delta => cfg.watermark.delta,
        temperature => cfg.sampler.temperature,
        top_p => cfg.sampler.top_p,
        class_id => cfg.generate.class_id,
        h => cfg.generate.h,
        w => cfg.generate.w,
    }
    if o.top_k.is_some() {
        cfg.sampler.top_k = o.top_k;
    }
    if o.identity {
        cfg.cluster.identity = true;
    }
}

fn load_or_sample_codebook(cfg: &Config, path: Option<&Path>) -> CliResult<Codebook> {
    match path {
        Some(path) => Ok(Codebook::load(path)?),
        None => {
            let cb = &cfg.codebook;
            Ok(sample_codebook(cfg.seed("codebook"), cb.vocab_size, cb.patch_size, cb.n_modes, cb.spread)?)
        }
    }
}

fn pipeline_from(cfg: &Config, artifacts: &Artifacts) -> CliResult<Pipeline> {
    cfg.validate()?;
    let codebook = load_or_sample_codebook(cfg, artifacts.codebook.as_deref())?;
    let table = match &artifacts.clusters {
        Some(path) => ClusterTable::from_json(&fs::read_to_string(path)?)?,
        None => cluster_table(cfg, &codebook)?,
    };
    Pipeline::from_parts(cfg, codebook, table)
}

fn parse_perturb(text: &str) -> CliResult<PerturbSpec> {
    PerturbSpec::parse(text).map_err(|e| CliError::Config(e.to_string()))
}

fn perturbation_choice(args: &PerturbChoiceArgs) -> CliResult<Option<PerturbationChoice>> {
    match (&args.perturb_set, args.perturb.is_empty()) {
        (Some(_), false) => Err(CliError::Config("use either --perturb-set or --perturb, not both".into())),
        (Some(set), true) => Ok(Some(PerturbationChoice::Set(set.clone()))),
        (None, false) => {
            let list = args
                .perturb
                .iter()
                .map(|text| Ok(NamedPerturbation { name: text.clone(), spec: parse_perturb(text)? }))
                .collect::<CliResult<Vec<_>>>()?;
            Ok(Some(PerturbationChoice::List(list)))
        }
        (None, true) => Ok(None),
    }
}

fn path_string(path: &Path) -> String {
    path.display().to_string()
}
