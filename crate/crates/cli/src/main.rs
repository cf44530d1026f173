mod fetch;
mod plot;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use pcn::data::{load_dataset, LoadOptions};
use pcn::nn::{load_checkpoint_f64, save_checkpoint, Architecture, Checkpoint, Network, TensorRole};
use pcn::pca::CONV_SAMPLE_CAP;
use pcn::tensor::io as tensor_io;
use pcn::train::{
    measure_effective_dims, prepare_data, run, run_matrix, summarize, write_summary, DimRecord, RunConfig, RunRecord,
    TraceConfig,
};
use pcn::transform::{apply_plan, FitOptions, TransformPlan};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "pcn", version, about = "Train, compress and analyse principal component networks")]
struct Cli {
    /// Dataset root holding `mnist/` and `cifar-10-batches-bin/`.
    #[arg(long, global = true, env = "PCN_DATA_DIR", default_value = "data")]
    data_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a baseline network.
    Train(TrainArgs),
    /// Train, transform at the plan's epoch, and keep training.
    TrainPcn(TrainArgs),
    /// Effective dimensionality of layer inputs, per epoch or per width.
    AnalyzeDim(AnalyzeArgs),
    /// Print trainable and total parameter counts.
    CountParams(CountArgs),
    /// Apply a plan to a saved network.
    Transform(TransformArgs),
    /// Merge run records into one comparison table.
    Report(ReportArgs),
    /// Download MNIST or CIFAR-10 and verify SHA-256 digests.
    Fetch(fetch::FetchArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (TOML). Flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Transform plan (TOML), replacing any plan in the config.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    arch: Option<Architecture>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run each of these seeds and write a summary.
    #[arg(long, value_delimiter = ',', conflicts_with = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Print the effective configuration and exit.
    #[arg(long)]
    print_config: bool,
    /// Also write SVG charts next to the CSVs.
    #[arg(long)]
    plot: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long, default_value = "mlp-mnist-256")]
    arch: Architecture,
    /// Dataset; defaults to the one the architecture is shaped for.
    #[arg(long)]
    dataset: Option<String>,
    /// Layers whose inputs are analysed.
    #[arg(long, required = true, value_delimiter = ',')]
    layer: Vec<String>,
    #[arg(long, default_value_t = 0.1)]
    tau: f64,
    /// Training epochs (0 analyses the untrained network).
    #[arg(long, default_value_t = 0)]
    epochs: usize,
    /// Sweep the hidden width of mlp-mnist instead of tracing epochs.
    #[arg(long, value_delimiter = ',')]
    widths: Vec<usize>,
    /// Training images used for each PCA.
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    /// Base configuration for the training part.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    plot: bool,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct CountSource {
    #[arg(long)]
    arch: Option<Architecture>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct CountArgs {
    #[command(flatten)]
    source: CountSource,
    /// Also list every layer.
    #[arg(long)]
    layers: bool,
}

#[derive(Args)]
struct TransformArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Dataset for the PCA samples; defaults by input shape.
    #[arg(long)]
    dataset: Option<String>,
    /// Training images used to fit the bases.
    #[arg(long, default_value_t = 5000)]
    samples: usize,
    /// Validation fraction held out before sampling, as in training.
    #[arg(long, default_value_t = 0.1)]
    validation_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write each layer's mean, variances and components as tensor files.
    #[arg(long)]
    dump_bases: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories, or directories holding run directories.
    #[arg(long, required = true, num_args = 1..)]
    runs: Vec<PathBuf>,
    /// Also write the summary as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.chain().find_map(|c| c.downcast_ref::<pcn::Error>()).map_or(1, |e| e.exit_code());
            ExitCode::from(code as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a, false, &cli.data_dir),
        Command::TrainPcn(a) => cmd_train(a, true, &cli.data_dir),
        Command::AnalyzeDim(a) => cmd_analyze_dim(a, &cli.data_dir),
        Command::CountParams(a) => cmd_count_params(a),
        Command::Transform(a) => cmd_transform(a, &cli.data_dir),
        Command::Report(a) => cmd_report(a),
        Command::Fetch(a) => fetch::run(a, &cli.data_dir),
    }
}

fn base_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn train_config(a: &TrainArgs, pcn: bool) -> Result<RunConfig> {
    let mut c = base_config(a.config.as_deref())?;
    if let Some(arch) = a.arch {
        c.architecture = arch;
    }
    if let Some(e) = a.epochs {
        c.epochs = e;
    }
    if let Some(s) = a.seed {
        c.seed = s;
    }
    if let Some(n) = &a.name {
        c.name = n.clone();
    }
    if let Some(p) = &a.plan {
        c.plan = Some(TransformPlan::load(p)?);
    }
    if pcn {
        if c.plan.is_none() {
            return Err(pcn::Error::Plan("train-pcn needs a plan (--plan or [plan] in the config)".into()).into());
        }
    } else if c.plan.take().is_some() {
        log::warn!("ignoring the plan for a baseline run; use train-pcn to apply it");
    }
    if let Some(p) = c.plan.as_ref().filter(|_| a.plan.is_some() && a.epochs.is_none() && a.config.is_none()) {
        c.epochs = p.transform_epoch + p.post_epochs;
    }
    c.validate()?;
    Ok(c)
}

fn cmd_train(a: TrainArgs, pcn: bool, data_dir: &Path) -> Result<()> {
    let config = train_config(&a, pcn)?;
    if a.print_config {
        print!("{}", config.to_toml()?);
        return Ok(());
    }
    if !a.seeds.is_empty() {
        let configs: Vec<RunConfig> = a
            .seeds
            .iter()
            .map(|&seed| {
                let name = if config.name.is_empty() { String::new() } else { format!("{}-s{seed}", config.name) };
                RunConfig { seed, name, ..config.clone() }
            })
            .collect();
        let (runs, summary) = run_matrix(&configs, data_dir, &a.out)?;
        print_summary(&summary);
        let mut failed = 0;
        for r in &runs {
            match &r.result {
                Ok(rec) => {
                    if a.plot {
                        plot::run_charts(rec, &a.out.join(&rec.run_id))?;
                    }
                }
                Err(e) => {
                    eprintln!("{}: {e}", r.run_id);
                    failed += 1;
                }
            }
        }
        if failed > 0 {
            let first = runs.into_iter().find_map(|r| r.result.err()).unwrap();
            return Err(anyhow::Error::new(first).context(format!("{failed} of {} runs failed", configs.len())));
        }
        return Ok(());
    }
    let data = prepare_data(&config, data_dir)?;
    let record = run(&config, &data, Some(&a.out))?;
    let dir = a.out.join(&record.run_id);
    if a.plot {
        plot::run_charts(&record, &dir)?;
    }
    if let Some(last) = record.final_epoch() {
        println!(
            "{}: test accuracy {:.4}, trainable parameters {}, total {} ({})",
            record.run_id,
            last.test_acc,
            last.trainable_params,
            last.total_params,
            dir.display()
        );
    }
    Ok(())
}

fn cmd_analyze_dim(a: AnalyzeArgs, data_dir: &Path) -> Result<()> {
    let trace = TraceConfig {
        layers: a.layer.clone(),
        tau: a.tau,
        samples: a.samples,
        initial: true,
    };
    let mut base = base_config(a.config.as_deref())?;
    base.architecture = a.arch;
    base.seed = a.seed;
    base.plan = None;
    base.checkpoints = false;
    if let Some(d) = &a.dataset {
        base.dataset = d.clone();
    }
    let archs: Vec<Architecture> = if a.widths.is_empty() {
        vec![a.arch]
    } else {
        if !matches!(a.arch, Architecture::MlpMnist { .. }) {
            bail!("--widths sweeps the hidden layer of mlp-mnist, not {}", a.arch);
        }
        a.widths.iter().map(|&hidden| Architecture::MlpMnist { hidden }).collect()
    };
    let mut rows: Vec<DimRecord> = Vec::new();
    let mut data = None;
    for arch in archs {
        let config = RunConfig {
            architecture: arch,
            epochs: a.epochs.max(1),
            trace: Some(trace.clone()),
            ..base.clone()
        };
        config.validate()?;
        if data.is_none() {
            data = Some(prepare_data(&config, data_dir)?);
        }
        let data = data.as_ref().unwrap();
        let dims = if a.epochs == 0 {
            let net: Network<f32> = arch.build(config.seed)?;
            let n = trace.samples.min(data.train.len());
            let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(config.seed), data.train.len(), n).into_vec();
            idx.sort_unstable();
            let images = data.train.images.select_rows(&idx)?;
            measure_effective_dims(&net, &trace, &images, config.eval_batch_size, config.seed)?
                .into_iter()
                .map(|(layer, width, effective_dim)| DimRecord {
                    epoch: 0,
                    layer,
                    width,
                    effective_dim,
                    train_acc: None,
                    val_acc: None,
                })
                .collect()
        } else {
            run(&config, data, None)?.dims
        };
        for d in &dims {
            info!("{arch} epoch {} {}: {} of {} dimensions", d.epoch, d.layer, d.effective_dim, d.width);
        }
        if a.widths.is_empty() {
            rows.extend(dims);
        } else {
            let last = dims.iter().map(|d| d.epoch).max().unwrap_or(0);
            rows.extend(dims.into_iter().filter(|d| d.epoch == last));
        }
    }
    write_dims(&rows, &a.out)?;
    if a.plot {
        plot::dim_chart(&rows, !a.widths.is_empty(), &a.out.with_extension("svg"))?;
    }
    println!("wrote {} rows to {}", rows.len(), a.out.display());
    Ok(())
}

fn write_dims(rows: &[DimRecord], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut text = String::from("epoch,layer,width,effective_dim,train_acc,val_acc\n");
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch,
            r.layer,
            r.width,
            r.effective_dim,
            opt(r.train_acc),
            opt(r.val_acc)
        ));
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_count_params(a: CountArgs) -> Result<()> {
    let net: Network<f64> = match (&a.source.arch, &a.source.checkpoint) {
        (Some(arch), _) => arch.build(0)?,
        (None, Some(path)) => load_checkpoint_f64(path)?,
        (None, None) => unreachable!("clap requires one source"),
    };
    if a.layers {
        for node in net.nodes() {
            let (trainable, total) = node.layer.tensors().iter().fold((0, 0), |(t, all), (_, role, x)| match role {
                TensorRole::Trainable => (t + x.numel(), all + x.numel()),
                TensorRole::Frozen => (t, all + x.numel()),
                TensorRole::Derived => (t, all),
            });
            if total > 0 {
                println!("{:<16} {:<12} {trainable:>10} {total:>10}", node.name, node.layer.kind());
            }
        }
    }
    let c = net.count_params();
    println!("trainable: {}", c.trainable);
    println!("total: {}", c.total);
    Ok(())
}

fn dataset_for(net: &Network<f32>) -> Result<&'static str> {
    match net.input_shape() {
        [28, 28, 1] => Ok("mnist"),
        [32, 32, 3] => Ok("cifar10"),
        s => bail!("no dataset matches input shape {s:?}; pass --dataset"),
    }
}

fn cmd_transform(a: TransformArgs, data_dir: &Path) -> Result<()> {
    let ckpt = Checkpoint::<f32>::load(&a.checkpoint)?;
    let plan = TransformPlan::load(&a.plan)?;
    pcn::transform::validate_plan(&ckpt.network, &plan)?;
    let name = match &a.dataset {
        Some(d) => d.clone(),
        None => dataset_for(&ckpt.network)?.to_string(),
    };
    let opts = LoadOptions {
        validation: a.validation_fraction,
        seed: a.seed,
    };
    let data = load_dataset::<f32>(&name, data_dir, &opts)?;
    let n = a.samples.min(data.train.len());
    let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(a.seed), data.train.len(), n).into_vec();
    idx.sort_unstable();
    let samples = data.train.images.select_rows(&idx)?;
    let fit = FitOptions {
        dense_budget: n,
        conv_cap: CONV_SAMPLE_CAP,
        batch_size: 250,
        seed: a.seed,
    };
    let t = apply_plan(&ckpt.network, &plan, &samples, &fit)?;
    let before = ckpt.network.count_params();
    let after = t.network.count_params();
    save_checkpoint(&t.network, &a.out)?;
    for (layer, me) in t.effective_dims() {
        println!("{layer}: {me} input dimensions");
    }
    for (layer, sel) in &t.selections {
        println!("{layer}: {} outputs kept", sel.len());
    }
    println!("trainable: {} -> {}", before.trainable, after.trainable);
    println!("total: {} -> {}", before.total, after.total);
    if let Some(dir) = &a.dump_bases {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (layer, b) in &t.bases {
            tensor_io::save(&b.mean_tensor::<f64>(), dir.join(format!("{layer}.mean.pcnt")))?;
            tensor_io::save(&pcn::Tensor::from_vec(b.variances.clone())?, dir.join(format!("{layer}.variances.pcnt")))?;
            tensor_io::save(&b.components, dir.join(format!("{layer}.components.pcnt")))?;
        }
    }
    Ok(())
}

fn collect_runs(paths: &[PathBuf]) -> Result<Vec<RunRecord>> {
    let mut dirs = Vec::new();
    for p in paths {
        if p.join("record.toml").exists() {
            dirs.push(p.clone());
            continue;
        }
        let entries = fs::read_dir(p).with_context(|| format!("reading {}", p.display()))?;
        let mut found: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|d| d.join("record.toml").exists())
            .collect();
        if found.is_empty() {
            bail!("{} holds no run records", p.display());
        }
        found.sort();
        dirs.extend(found);
    }
    dirs.iter().map(|d| RunRecord::load(d).map_err(Into::into)).collect()
}

fn print_summary(rows: &[pcn::train::SummaryRow]) {
    println!("{:<32} {:>4} {:>9} {:>17} {:>12} {:>12}", "group", "runs", "test acc", "spread", "trainable", "total");
    for r in rows {
        println!(
            "{:<32} {:>4} {:>8.2}% {:>17} {:>12} {:>12}",
            r.group,
            r.runs,
            100.0 * r.test_acc_mean,
            format!("(+{:.2}, -{:.2})", 100.0 * (r.test_acc_max - r.test_acc_mean), 100.0 * (r.test_acc_mean - r.test_acc_min)),
            r.trainable_params,
            r.total_params
        );
    }
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let records = collect_runs(&a.runs)?;
    let summary = summarize(&records);
    print_summary(&summary);
    let mut reductions: BTreeMap<String, f64> = BTreeMap::new();
    for r in records.iter().filter(|r| r.transform_epoch.is_some()) {
        if let (Some(first), Some(last)) = (r.epochs.first(), r.epochs.last()) {
            reductions.insert(r.run_id.clone(), first.trainable_params as f64 / last.trainable_params.max(1) as f64);
        }
    }
    for (id, x) in reductions {
        println!("{id}: trainable parameters reduced {x:.1}x");
    }
    if let Some(out) = &a.out {
        write_summary(&summary, out)?;
    }
    Ok(())
}
