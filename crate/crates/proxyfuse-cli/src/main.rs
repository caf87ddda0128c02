//! Experiment pipelines: data generation, training, method sweeps,
//! checkpoint analysis, and held-out evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use proxyfuse::checkpoint::load_checkpoint;
use proxyfuse::eval::{build_pairs, merge_quality, verification_accuracy, MergeQuality};
use proxyfuse::fusion::{build_merge_map, count_active, top1_report, FusionConfig};
use proxyfuse::shard_file::{read_shards, write_shards};
use proxyfuse::synthetic::{
    gen_identity_bank, sample_heldout, split_with_overlap, ShardSet, SplitSpec,
};
use proxyfuse::trainer::{run, run_from, Method, RunSink, TrainConfig, TrainState};

const OUT_ROOT_ENV: &str = "PROXYFUSE_OUT_ROOT";
const FORMAT_VERSION: u32 = 1;

#[derive(Parser)]
#[command(
    name = "proxyfuse",
    version,
    about = "Multi-dataset proxy-fusion training on synthetic identity data"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate an overlapping shard collection and its conflict manifest.
    GenData(GenDataArgs),
    /// Train one run from a config file and/or flags.
    Train(TrainArgs),
    /// Run a (method × r × seed) grid and assemble a results table.
    Sweep(SweepArgs),
    /// Similarity histogram and merge preview for a checkpoint, read-only.
    Analyze(AnalyzeArgs),
    /// Verification accuracy and merge quality for a checkpoint.
    Eval(EvalArgs),
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    match s {
        "naive" => Ok(Method::Naive),
        "dail" => Ok(Method::Dail),
        "facefusion" => Ok(Method::FaceFusion),
        other => Err(format!("unknown method {other:?}; use naive|dail|facefusion")),
    }
}

/// Resolves relative output paths against PROXYFUSE_OUT_ROOT when set.
fn resolve_out(path: &Path) -> PathBuf {
    if path.is_relative() {
        if let Ok(root) = std::env::var(OUT_ROOT_ENV) {
            return PathBuf::from(root).join(path);
        }
    }
    path.to_path_buf()
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of ground-truth identities.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Number of dataset shards.
    #[arg(long, default_value_t = 8)]
    k: usize,
    /// Identity overlap ratio in [0,1).
    #[arg(long, default_value_t = 0.2)]
    r: f64,
    /// Reuse the same image records for shared identities.
    #[arg(long)]
    duplicate_images: bool,
    /// Feature-space dimension of the identity bank.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 8)]
    images_per_identity: usize,
    #[arg(long, default_value_t = 0.3)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0.05)]
    domain_shift_mag: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output shard-set file; the conflict manifest lands next to it.
    #[arg(long)]
    out: PathBuf,
}

fn conflict_manifest(set: &ShardSet) -> String {
    let mut text = format!(
        "# conflict-manifest v{FORMAT_VERSION}\n# n={} k={} r={} duplicate_images={} seed={}\n# conflicts={}\n",
        set.spec.n_identities,
        set.spec.k,
        set.spec.r,
        set.spec.duplicate_images,
        set.spec.seed,
        set.conflicts.len()
    );
    text.push_str("# gt_identity shard_a class_a shard_b class_b\n");
    for c in &set.conflicts {
        text.push_str(&format!(
            "{} {} {} {} {}\n",
            c.gt_identity, c.shard_a, c.local_class_a, c.shard_b, c.local_class_b
        ));
    }
    text
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let spec = SplitSpec {
        n_identities: args.n,
        k: args.k,
        r: args.r,
        duplicate_images: args.duplicate_images,
        images_per_identity: args.images_per_identity,
        noise_sigma: args.noise_sigma,
        domain_shift_mag: args.domain_shift_mag,
        seed: args.seed,
    };
    let bank = gen_identity_bank(args.n, args.dim, args.seed)?;
    let set = split_with_overlap(&bank, &spec)?;
    let out = resolve_out(&args.out);
    ensure_parent(&out)?;
    write_shards(&set, &out)?;
    let manifest_path = out.with_extension("conflicts.txt");
    fs::write(&manifest_path, conflict_manifest(&set))?;
    println!(
        "wrote {} shards, {} classes total, {} planted conflicts",
        set.shards.len(),
        set.n_classes_total(),
        set.conflicts.len()
    );
    for shard in &set.shards {
        println!(
            "  shard {}: {} classes, {} samples",
            shard.dataset_id,
            shard.n_classes(),
            shard.samples.len()
        );
    }
    println!("data: {}", out.display());
    println!("manifest: {}", manifest_path.display());
    Ok(())
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config; flags override it unless --config-wins is set.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Give the config file precedence over conflicting flags.
    #[arg(long)]
    config_wins: bool,
    /// Resume from a checkpoint; its embedded config is authoritative.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "run_out")]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    total_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    t1: Option<f64>,
    #[arg(long)]
    t2: Option<f64>,
    #[arg(long)]
    lambda_da: Option<f64>,
    #[arg(long)]
    grl_active_after: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

fn merge_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let from_file = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            Some(TrainConfig::from_toml(&text)?)
        }
        None => None,
    };
    let mut cfg = from_file.clone().unwrap_or_default();
    // flags win by default; --config-wins keeps file values where both exist
    let flag_beats_file = !args.config_wins || from_file.is_none();
    macro_rules! take {
        ($field:expr, $flag:expr) => {
            if let Some(v) = $flag {
                if flag_beats_file {
                    $field = v;
                }
            }
        };
    }
    take!(cfg.method, args.method);
    take!(cfg.seed, args.seed);
    take!(cfg.total_steps, args.total_steps);
    take!(cfg.batch_size, args.batch_size);
    take!(cfg.base_lr, args.base_lr);
    take!(cfg.fusion.t1, args.t1);
    take!(cfg.fusion.t2, args.t2);
    take!(cfg.loss.lambda_da, args.lambda_da);
    if let Some(v) = args.grl_active_after {
        if flag_beats_file {
            cfg.loss.grl_active_after = Some(v);
        }
    }
    if let Some(v) = args.checkpoint_every {
        if flag_beats_file {
            cfg.checkpoint_every = Some(v);
        }
    }
    if let Some(data) = &args.data {
        if flag_beats_file || cfg.data.is_none() {
            cfg.data = Some(data.clone());
        }
    }
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let out_dir = resolve_out(&args.out_dir);
    let output = if let Some(ckpt) = &args.resume {
        let (state, echo) = load_checkpoint(ckpt)?;
        let cfg = TrainConfig::from_toml(&echo)?;
        let data_path = cfg
            .data
            .clone()
            .context("checkpoint config has no data path; cannot resume")?;
        let data = read_shards(&data_path)?;
        println!(
            "resuming {} at step {} of {}",
            cfg.method, state.step, cfg.total_steps
        );
        run_from(&cfg, &data, state, &RunSink { out_dir: Some(&out_dir) })?
    } else {
        let cfg = merge_train_config(&args)?;
        cfg.validate()?;
        let data_path = cfg
            .data
            .clone()
            .context("no data file: pass --data or set `data` in the config")?;
        let data = read_shards(&data_path)?;
        println!(
            "training {}: {} steps, batch {}, {} classes",
            cfg.method,
            cfg.total_steps,
            cfg.batch_size,
            data.n_classes_total()
        );
        run(&cfg, &data, &RunSink { out_dir: Some(&out_dir) })?
    };
    let last = output.metrics.last().context("run produced no metrics")?;
    println!(
        "done: step {} phase {} cls_loss {:.4} dom_loss {:.4} active_classes {}",
        last.step, last.phase, last.cls_loss, last.dom_loss, last.active_classes
    );
    for rep in &output.similarity_reports {
        println!(
            "similarity report at step {} ({} proxies)",
            rep.step,
            rep.entries.len()
        );
    }
    println!("outputs in {}", out_dir.display());
    Ok(())
}

/// The sweep grid: methods × overlap ratios × duplication modes × seeds,
/// every cell sharing one seed schedule so methods see identical data.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct SweepPlan {
    methods: Vec<Method>,
    r_values: Vec<f64>,
    duplicate_images: Vec<bool>,
    seeds: Vec<u64>,
    k: usize,
    dim: usize,
    n_identities: usize,
    images_per_identity: usize,
    noise_sigma: f64,
    domain_shift_mag: f64,
    data_seed: u64,
    n_pairs: usize,
    unseen_frac: f64,
    eval_per_identity: usize,
    eval_seed: u64,
    train: TrainConfig,
}

impl Default for SweepPlan {
    fn default() -> Self {
        SweepPlan {
            methods: vec![Method::Naive, Method::Dail, Method::FaceFusion],
            r_values: vec![0.0, 0.2, 0.4, 0.6],
            duplicate_images: vec![false],
            seeds: vec![1],
            k: 8,
            dim: 64,
            n_identities: 1000,
            images_per_identity: 8,
            noise_sigma: 0.3,
            domain_shift_mag: 0.05,
            data_seed: 7,
            n_pairs: 2000,
            unseen_frac: 0.2,
            eval_per_identity: 3,
            eval_seed: 9,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SweepRow {
    method: String,
    r: f64,
    duplicate_images: bool,
    seed: u64,
    accuracy: f64,
    merge_precision: f64,
    merge_recall: f64,
    active_classes: usize,
    conflicts: u64,
    merged_components: usize,
    naive_class_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn cell_name(method: Method, r: f64, dup: bool, seed: u64) -> String {
    format!(
        "cell_{method}_r{:03}_{}_s{seed}",
        (r * 100.0).round() as u32,
        if dup { "dup" } else { "dist" }
    )
}

fn cell_data_seed(plan: &SweepPlan, r_idx: usize, dup: bool, seed: u64) -> u64 {
    plan.data_seed
        .wrapping_add(1_000_003u64.wrapping_mul(seed))
        .wrapping_add(101 * r_idx as u64)
        .wrapping_add(u64::from(dup))
}

/// Held-out accuracy and merge quality for a trained state: fresh noise
/// draws of the training identities plus identities the run never saw.
fn evaluate_state(
    state: &TrainState,
    data: &ShardSet,
    n_pairs: usize,
    unseen_frac: f64,
    per_identity: usize,
    eval_seed: u64,
) -> Result<(f64, MergeQuality)> {
    let n = data.bank.len();
    let extra = ((n as f64) * unseen_frac / (1.0 - unseen_frac)).round() as usize;
    let bank = data.bank.extend_unseen(extra, eval_seed)?;
    let pool: Vec<u32> = (0..bank.len() as u32).collect();
    let heldout = sample_heldout(&bank, &pool, per_identity, data.spec.noise_sigma, eval_seed)?;
    let pairs = build_pairs(&heldout, n_pairs, eval_seed)?;
    let verif = verification_accuracy(&state.net, &pairs)?;
    let quality = merge_quality(&state.merge, &data.conflict_global_pairs());
    Ok((verif.accuracy, quality))
}

fn run_cell(
    plan: &SweepPlan,
    method: Method,
    r_idx: usize,
    dup: bool,
    seed: u64,
) -> Result<SweepRow> {
    let r = plan.r_values[r_idx];
    let spec = SplitSpec {
        n_identities: plan.n_identities,
        k: plan.k,
        r,
        duplicate_images: dup,
        images_per_identity: plan.images_per_identity,
        noise_sigma: plan.noise_sigma,
        domain_shift_mag: plan.domain_shift_mag,
        seed: cell_data_seed(plan, r_idx, dup, seed),
    };
    let bank = gen_identity_bank(plan.n_identities, plan.dim, spec.seed)?;
    let data = split_with_overlap(&bank, &spec)?;
    let mut cfg = plan.train.clone();
    cfg.method = method;
    cfg.seed = seed;
    cfg.data = None;
    cfg.validate()?;
    let out = run(&cfg, &data, &RunSink { out_dir: None })?;
    let (accuracy, quality) = evaluate_state(
        &out.state,
        &data,
        plan.n_pairs,
        plan.unseen_frac,
        plan.eval_per_identity,
        plan.eval_seed,
    )?;
    Ok(SweepRow {
        method: method.to_string(),
        r,
        duplicate_images: dup,
        seed,
        accuracy,
        merge_precision: quality.precision,
        merge_recall: quality.recall,
        active_classes: count_active(&out.state.proxies),
        conflicts: quality.conflict_pairs,
        merged_components: out.state.merge.merged_components().len(),
        naive_class_count: data.n_classes_total(),
        error: None,
    })
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep plan TOML; omit for the built-in default grid.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, default_value = "sweep_out")]
    out_dir: PathBuf,
    /// Only compute cells whose name contains this substring.
    #[arg(long)]
    only: Option<String>,
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let plan: SweepPlan = match &args.plan {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading plan {}", path.display()))?;
            toml::from_str(&text).context("parsing sweep plan")?
        }
        None => SweepPlan::default(),
    };
    plan.train.validate()?;
    let out_dir = resolve_out(&args.out_dir);
    let cells_dir = out_dir.join("cells");
    fs::create_dir_all(&cells_dir)?;

    let mut rows: Vec<SweepRow> = Vec::new();
    for &seed in &plan.seeds {
        for &dup in &plan.duplicate_images {
            for r_idx in 0..plan.r_values.len() {
                for &method in &plan.methods {
                    let r = plan.r_values[r_idx];
                    let name = cell_name(method, r, dup, seed);
                    if let Some(filter) = &args.only {
                        if !name.contains(filter.as_str()) {
                            continue;
                        }
                    }
                    let cell_path = cells_dir.join(format!("{name}.json"));
                    let row = if cell_path.exists() {
                        serde_json::from_str(&fs::read_to_string(&cell_path)?)
                            .with_context(|| format!("parsing cached cell {name}"))?
                    } else {
                        eprintln!("running {name} ...");
                        let row = match run_cell(&plan, method, r_idx, dup, seed) {
                            Ok(row) => row,
                            Err(e) => SweepRow {
                                method: method.to_string(),
                                r,
                                duplicate_images: dup,
                                seed,
                                accuracy: f64::NAN,
                                merge_precision: f64::NAN,
                                merge_recall: f64::NAN,
                                active_classes: 0,
                                conflicts: 0,
                                merged_components: 0,
                                naive_class_count: 0,
                                error: Some(e.to_string()),
                            },
                        };
                        fs::write(&cell_path, serde_json::to_string_pretty(&row)?)?;
                        row
                    };
                    rows.push(row);
                }
            }
        }
    }

    let mut table = String::new();
    let echo = serde_json::json!({
        "format_version": FORMAT_VERSION,
        "plan": toml::to_string_pretty(&plan)?,
    });
    table.push_str(&echo.to_string());
    table.push('\n');
    for row in &rows {
        table.push_str(&serde_json::to_string(row)?);
        table.push('\n');
    }
    fs::write(out_dir.join("results.jsonl"), &table)?;

    println!(
        "{:<11} {:>5} {:>5} {:>5} {:>9} {:>10} {:>8} {:>8}",
        "method", "r", "dup", "seed", "accuracy", "precision", "recall", "active"
    );
    for row in &rows {
        if let Some(err) = &row.error {
            println!(
                "{:<11} {:>5} {:>5} {:>5} FAILED: {err}",
                row.method, row.r, row.duplicate_images, row.seed
            );
        } else {
            println!(
                "{:<11} {:>5} {:>5} {:>5} {:>9.4} {:>10.4} {:>8.4} {:>8}",
                row.method,
                row.r,
                row.duplicate_images,
                row.seed,
                row.accuracy,
                row.merge_precision,
                row.merge_recall,
                row.active_classes
            );
        }
    }
    println!("results: {}", out_dir.join("results.jsonl").display());
    Ok(())
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Threshold for the hypothetical merge preview.
    #[arg(long, default_value_t = 0.7)]
    t1: f64,
    #[arg(long, default_value_t = true)]
    include_intra_dataset: bool,
    #[arg(long, default_value = "analyze_out")]
    out_dir: PathBuf,
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let (state, _echo) = load_checkpoint(&args.checkpoint)?;
    let out_dir = resolve_out(&args.out_dir);
    fs::create_dir_all(&out_dir)?;
    let report = top1_report(&state.proxies, state.step)?;
    let mut hist = Vec::new();
    report.write_histogram(&mut hist)?;
    fs::write(out_dir.join("analyze_hist.txt"), &hist)?;
    let mut raw = Vec::new();
    report.write_raw(&mut raw)?;
    fs::write(out_dir.join("analyze_raw.txt"), &raw)?;

    let cfg = FusionConfig {
        t1: args.t1,
        include_intra_dataset: args.include_intra_dataset,
        ..FusionConfig::default()
    };
    let preview = build_merge_map(&state.proxies, &cfg);
    let components = preview.merged_components();
    let active_now = count_active(&state.proxies);
    let merged_away: usize = components.iter().map(|g| g.len() - 1).sum();
    let mut text = format!(
        "# merge-preview v{FORMAT_VERSION} step={} t1={}\nactive_classes={}\nmerged_components={}\nmerged_pairs={}\npost_merge_active={}\n",
        state.step,
        args.t1,
        active_now,
        components.len(),
        preview.merged_pair_count(),
        active_now - merged_away,
    );
    for group in &components {
        let members: Vec<String> = group.iter().map(u32::to_string).collect();
        text.push_str(&format!("component {}\n", members.join(" ")));
    }
    fs::write(out_dir.join("analyze_preview.txt"), &text)?;
    print!("{text}");
    println!("outputs in {}", out_dir.display());
    Ok(())
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Shard-set file; defaults to the data path echoed in the checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    n_pairs: usize,
    /// Fraction of evaluation identities the run never trained on.
    #[arg(long, default_value_t = 0.2)]
    unseen_frac: f64,
    #[arg(long, default_value_t = 3)]
    per_identity: usize,
    #[arg(long, default_value_t = 9)]
    seed: u64,
    #[arg(long, default_value = "eval_report.jsonl")]
    out: PathBuf,
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (state, echo) = load_checkpoint(&args.checkpoint)?;
    let data_path = match &args.data {
        Some(p) => p.clone(),
        None => TrainConfig::from_toml(&echo)?
            .data
            .context("checkpoint config has no data path; pass --data")?,
    };
    let data = read_shards(&data_path)?;
    let (accuracy, quality) = evaluate_state(
        &state,
        &data,
        args.n_pairs,
        args.unseen_frac,
        args.per_identity,
        args.seed,
    )?;
    let record = serde_json::json!({
        "format_version": FORMAT_VERSION,
        "checkpoint_step": state.step,
        "n_pairs": args.n_pairs,
        "unseen_frac": args.unseen_frac,
        "eval_seed": args.seed,
        "accuracy": accuracy,
        "merge_precision": quality.precision,
        "merge_recall": quality.recall,
        "merge_precision_vacuous": quality.precision_vacuous,
        "merge_recall_vacuous": quality.recall_vacuous,
        "active_classes": count_active(&state.proxies),
        "conflict_pairs": quality.conflict_pairs,
    });
    let out = resolve_out(&args.out);
    ensure_parent(&out)?;
    fs::write(&out, format!("{record}\n"))?;
    println!("accuracy           {accuracy:.4}");
    println!(
        "merge precision    {:.4}{}",
        quality.precision,
        if quality.precision_vacuous { " (vacuous)" } else { "" }
    );
    println!(
        "merge recall       {:.4}{}",
        quality.recall,
        if quality.recall_vacuous { " (vacuous)" } else { "" }
    );
    println!("active classes     {}", count_active(&state.proxies));
    println!("report: {}", out.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenData(args) => cmd_gen_data(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Sweep(args) => cmd_sweep(args),
        Cmd::Analyze(args) => cmd_analyze(args),
        Cmd::Eval(args) => cmd_eval(args),
    }
}
