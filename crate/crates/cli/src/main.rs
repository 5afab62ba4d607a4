//! `dfm` — fit subspace + density models on deep-feature dumps, score
//! test features for out-of-distribution detection, and evaluate the
//! resulting confidence scores.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dfm_core::config::{self, fit_config_from_kv};
use dfm_core::container::{load_model, save_model};
use dfm_core::density::ClassConditionalModel;
use dfm_core::error::{Error, ErrorClass};
use dfm_core::eval::{
    evaluate, export_histograms, write_hist_csv, write_metrics_file, write_pr_csv, write_roc_csv,
    ScoreTable,
};
use dfm_core::feature_store::{
    load_features, numerical_rank_opts, save_features, save_labels, FeatureFormat, FeatureSet,
};
use dfm_core::pipeline::{fit, score, ReducedDensity, ScoreFamily};
use dfm_core::synthbench::{generate, SynthSpec};
use dfm_core::tuning::{check_disjoint_from_holdout, sweep, write_manifest, write_sweep_csv, GridSpec};

#[derive(Parser)]
#[command(
    name = "dfm",
    version,
    about = "Subspace modeling and density estimation over deep features for OOD detection"
)]
struct Cli {
    /// Master random seed; overrides any seed from a config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker thread cap (0 = all cores). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct FeatureArgs {
    /// Feature file: DFM1 binary or numeric CSV (auto-detected by magic).
    #[arg(long)]
    features: PathBuf,

    /// Force the input format instead of sniffing the magic bytes.
    #[arg(long, default_value = "auto", value_parser = ["auto", "binary", "csv"])]
    format: String,

    /// Label file: DFM1 (cols=1, dtype=i32) or one integer per line.
    #[arg(long)]
    labels: Option<PathBuf>,

    /// Zero-based CSV column holding inline class labels.
    #[arg(long)]
    label_col: Option<usize>,
}

impl FeatureArgs {
    fn load(&self) -> Result<FeatureSet, Error> {
        load_feature_file(
            &self.features,
            &self.format,
            self.labels.as_deref(),
            self.label_col,
        )
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark (train / test_in / test_ood).
    Synth {
        /// key=value spec file.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Fit subspaces and densities on labeled training features.
    Fit {
        /// Training features (labels required, via --labels or --label-col).
        #[command(flatten)]
        train: FeatureArgs,
        /// key=value fit config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Inline config override, repeatable: --set key=value (wins over file).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Output model container (DFMM).
        #[arg(long)]
        out: PathBuf,
    },
    /// Score features against a fitted model container.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        features: FeatureArgs,
        /// Comma-separated subset of score columns (default: all in model).
        #[arg(long)]
        scores: Option<String>,
        /// Membership flag written to every row (1 = in-distribution).
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(0..=1))]
        membership: u8,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute AUROC/AUPR and curves from two score tables.
    Eval {
        /// Score table of in-distribution test samples.
        #[arg(long)]
        scores_in: PathBuf,
        /// Score table of OOD test samples.
        #[arg(long)]
        scores_ood: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Also export per-column histograms with this many bins.
        #[arg(long)]
        hist_bins: Option<usize>,
        /// Sweep manifest; eval fails if any scored sample was in the
        /// hyper-parameter hold-out set.
        #[arg(long)]
        holdout_manifest: Option<PathBuf>,
    },
    /// Report the numerical rank and PCA dimensions of a feature matrix.
    Rank {
        #[command(flatten)]
        features: FeatureArgs,
        /// Singular values below rel_tol * sigma_max count as zero.
        #[arg(long, default_value_t = 1e-6)]
        rel_tol: f64,
        /// Variance-retention levels for the "With PCA" rows.
        #[arg(long, default_value = "0.9,0.95,0.995")]
        variance: String,
        /// Skip column centering before the SVD.
        #[arg(long)]
        no_center: bool,
        /// Also write the report as a key=value file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid-search hyper-parameters on a hold-out auxiliary OOD set.
    Sweep {
        #[command(flatten)]
        train: FeatureArgs,
        #[arg(long)]
        holdout_in: PathBuf,
        #[arg(long)]
        holdout_ood: PathBuf,
        /// key=value grid file (defaults to the built-in coarse grid).
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();

    let threads = if cli.threads == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        cli.threads
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error kind=usage msg=\"cannot build thread pool: {e}\"");
            return ExitCode::from(2);
        }
    };

    match pool.install(|| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match e.class() {
                ErrorClass::Usage => "usage",
                ErrorClass::Data => "data",
                ErrorClass::Numerical => "numerical",
            };
            let msg = e.to_string().replace('"', "'").replace('\n', " ");
            eprintln!("error kind={kind} msg=\"{msg}\"");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numerical => 4,
            })
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth { spec, out_dir } => cmd_synth(&spec, &out_dir, cli.seed),
        Command::Fit {
            train,
            config,
            sets,
            out,
        } => cmd_fit(&train, config.as_deref(), &sets, &out, cli.seed),
        Command::Score {
            model,
            features,
            scores,
            membership,
            out,
        } => cmd_score(&model, &features, scores.as_deref(), membership, &out),
        Command::Eval {
            scores_in,
            scores_ood,
            out_dir,
            hist_bins,
            holdout_manifest,
        } => cmd_eval(
            &scores_in,
            &scores_ood,
            &out_dir,
            hist_bins,
            holdout_manifest.as_deref(),
        ),
        Command::Rank {
            features,
            rel_tol,
            variance,
            no_center,
            out,
        } => cmd_rank(&features, rel_tol, &variance, no_center, out.as_deref()),
        Command::Sweep {
            train,
            holdout_in,
            holdout_ood,
            grid,
            out_dir,
        } => cmd_sweep(
            &train,
            &holdout_in,
            &holdout_ood,
            grid.as_deref(),
            &out_dir,
            cli.seed,
        ),
    }
}

fn load_feature_file(
    path: &Path,
    format: &str,
    labels: Option<&Path>,
    label_col: Option<usize>,
) -> Result<FeatureSet, Error> {
    let resolved = match format {
        "binary" => FeatureFormat::Binary,
        "csv" => FeatureFormat::Csv { label_col },
        _ => {
            let mut head = [0u8; 4];
            use std::io::Read;
            let n = std::fs::File::open(path)?.read(&mut head)?;
            if n == 4 && &head == dfm_core::feature_store::FEATURE_MAGIC {
                FeatureFormat::Binary
            } else {
                FeatureFormat::Csv { label_col }
            }
        }
    };
    if matches!(resolved, FeatureFormat::Binary) && label_col.is_some() {
        return Err(Error::Config(
            "--label-col only applies to csv features".into(),
        ));
    }
    load_features(path, resolved, labels)
}

fn cmd_synth(spec_path: &Path, out_dir: &Path, seed: Option<u64>) -> Result<(), Error> {
    let mut spec = SynthSpec::from_kv(&config::parse_kv_file(spec_path)?)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    std::fs::create_dir_all(out_dir)?;
    let (train, test_in, test_ood) = generate(&spec)?;
    save_features(&train, out_dir.join("train.dfm"))?;
    save_labels(&train, out_dir.join("train.labels.dfm"))?;
    save_features(&test_in, out_dir.join("test_in.dfm"))?;
    save_labels(&test_in, out_dir.join("test_in.labels.dfm"))?;
    save_features(&test_ood, out_dir.join("test_ood.dfm"))?;
    println!(
        "synth: D={} d={} classes={} train={} test_in={} test_ood={} mode={} -> {}",
        spec.ambient_dim,
        spec.intrinsic_dim,
        spec.classes,
        train.num_samples(),
        test_in.num_samples(),
        test_ood.num_samples(),
        spec.ood_mode,
        out_dir.display()
    );
    Ok(())
}

fn cmd_fit(
    train_args: &FeatureArgs,
    config_path: Option<&Path>,
    sets: &[String],
    out: &Path,
    seed: Option<u64>,
) -> Result<(), Error> {
    let train = train_args.load()?;
    let mut pairs = match config_path {
        Some(p) => config::parse_kv_file(p)?,
        None => Vec::new(),
    };
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set needs key=value, got '{s}'")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut cfg = fit_config_from_kv(&pairs)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }

    let mut model = fit(&train, &cfg)?;
    if let Some(p) = config_path {
        model.manifest = Some(std::fs::read_to_string(p)?);
    }
    save_model(&model, out)?;

    println!("fit: layer={} seed={}", model.layer_id, model.seed);
    for (k, v) in &model.meta {
        if k != "layer_id" && k != "seed" {
            println!("  {k}={v}");
        }
    }
    print_bic_tables("ll", &model.ll_density);
    print_bic_tables("kll", &model.kll_density);
    println!("  families={}", join_families(&model.families()));
    println!("  out={}", out.display());
    Ok(())
}

fn print_bic_tables(label: &str, density: &Option<ReducedDensity>) {
    if let Some(ReducedDensity::Global(ClassConditionalModel::Gmm { meta, .. })) = density {
        for (class, gm) in meta {
            let table: Vec<String> = gm
                .bic_table
                .iter()
                .map(|(k, lnl, bic)| format!("k={k} lnL={lnl:.3} bic={bic:.3}"))
                .collect();
            println!(
                "  {label}.class{class}: selected_k={} [{}]",
                gm.selected_k,
                table.join("; ")
            );
        }
    }
}

fn join_families(fams: &[ScoreFamily]) -> String {
    fams.iter()
        .map(|f| f.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn cmd_score(
    model_path: &Path,
    feature_args: &FeatureArgs,
    scores: Option<&str>,
    membership: u8,
    out: &Path,
) -> Result<(), Error> {
    let model = load_model(model_path)?;
    let features = feature_args.load()?;
    let requested: Option<Vec<ScoreFamily>> = match scores {
        Some(s) => Some(
            s.split(',')
                .map(|t| t.trim().parse())
                .collect::<Result<Vec<_>, _>>()?,
        ),
        None => None,
    };
    let mut table = score(&model, &features, requested.as_deref())?;
    if membership == 0 {
        table = table.with_membership(false);
    }
    table.write_csv(out)?;
    println!(
        "score: {} samples x {} columns ({}) -> {}",
        table.len(),
        table.column_names().len(),
        table.column_names().join(","),
        out.display()
    );
    Ok(())
}

fn cmd_eval(
    scores_in: &Path,
    scores_ood: &Path,
    out_dir: &Path,
    hist_bins: Option<usize>,
    holdout_manifest: Option<&Path>,
) -> Result<(), Error> {
    let table_in = ScoreTable::read_csv(scores_in)?;
    let table_ood = ScoreTable::read_csv(scores_ood)?;

    if let Some(mp) = holdout_manifest {
        let manifest = config::parse_kv_file(mp)?;
        let mut ids: Vec<String> = table_in.sample_ids().to_vec();
        ids.extend(table_ood.sample_ids().iter().cloned());
        check_disjoint_from_holdout(&manifest, &ids)?;
    }

    let shared: Vec<String> = table_in
        .column_names()
        .into_iter()
        .filter(|c| table_ood.column(c).is_ok())
        .map(|s| s.to_string())
        .collect();
    if shared.is_empty() {
        return Err(Error::Config(
            "score tables share no columns to evaluate".into(),
        ));
    }

    std::fs::create_dir_all(out_dir)?;
    let mut metrics = Vec::new();
    for col in &shared {
        let pos = table_in.column(col)?.to_vec();
        let neg = table_ood.column(col)?.to_vec();
        let result = evaluate(&pos, &neg)?;
        write_roc_csv(out_dir.join(format!("{col}.roc.csv")), &result.roc)?;
        write_pr_csv(out_dir.join(format!("{col}.pr.csv")), &result.pr)?;
        println!("{col}.auroc={}", result.auroc);
        println!("{col}.aupr={}", result.aupr);
        metrics.push((col.clone(), result));
    }
    write_metrics_file(out_dir.join("metrics.txt"), &metrics)?;

    if let Some(bins) = hist_bins {
        let joint = table_in
            .with_membership(true)
            .concat(&table_ood.with_membership(false))?;
        for col in &shared {
            let hist = export_histograms(&joint, col, bins)?;
            write_hist_csv(out_dir.join(format!("{col}.hist.csv")), &hist)?;
        }
    }
    Ok(())
}

fn cmd_rank(
    feature_args: &FeatureArgs,
    rel_tol: f64,
    variance: &str,
    no_center: bool,
    out: Option<&Path>,
) -> Result<(), Error> {
    let features = feature_args.load()?;
    let levels = config::parse_f64_list(variance)?;
    let report = numerical_rank_opts(&features.x, rel_tol, &levels, !no_center);

    println!("{:<18} {}", "Dimension", report.dim);
    println!("{:<18} {}", "Rank", report.rank);
    for &(v, m) in &report.pca_dim_at {
        println!("{:<18} {}", format!("With {}% PCA", v * 100.0), m);
    }
    if let Some(p) = out {
        let mut s = format!("dim={}\nrank={}\n", report.dim, report.rank);
        for &(v, m) in &report.pca_dim_at {
            s.push_str(&format!("pca_dim.{v}={m}\n"));
        }
        std::fs::write(p, s)?;
    }
    Ok(())
}

fn cmd_sweep(
    train_args: &FeatureArgs,
    holdout_in: &Path,
    holdout_ood: &Path,
    grid_path: Option<&Path>,
    out_dir: &Path,
    seed: Option<u64>,
) -> Result<(), Error> {
    // Selection data must be distinct files from training data.
    let mut paths = BTreeSet::new();
    for p in [&train_args.features, &holdout_in.to_path_buf(), &holdout_ood.to_path_buf()] {
        let canon = p.canonicalize().unwrap_or_else(|_| p.clone());
        if !paths.insert(canon) {
            return Err(Error::Config(format!(
                "train/holdout paths must be distinct files, got {} twice",
                p.display()
            )));
        }
    }

    let train = train_args.load()?;
    let hin = load_feature_file(holdout_in, "auto", None, None)?;
    let hood = load_feature_file(holdout_ood, "auto", None, None)?;
    let grid = match grid_path {
        Some(p) => GridSpec::from_kv(&config::parse_kv_file(p)?)?,
        None => GridSpec::default(),
    };
    let result = sweep(&train, &hin, &hood, &grid, seed.unwrap_or(0))?;

    std::fs::create_dir_all(out_dir)?;
    write_sweep_csv(out_dir.join("sweep.csv"), &result)?;
    write_manifest(out_dir.join("selected.cfg"), &result)?;

    for (fam, &idx) in &result.selected {
        let r = &result.rows[idx];
        println!(
            "selected {fam}: mode={} auroc={} dim={}",
            r.mode,
            r.auroc.unwrap(),
            r.reduced_dim
        );
    }
    println!(
        "sweep: {} grid points -> {}",
        result.rows.len(),
        out_dir.display()
    );
    Ok(())
}
