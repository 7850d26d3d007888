//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use intentflow::config::ExperimentConfig;
use intentflow::evalkit::{
    best_of_k_curve, diversity_report, export_analysis, held_out_eval, intent_match, AnalysisBundle, BonStrategy, HeldOutConfig,
};
use intentflow::flowpolicy::{load_checkpoint, save_checkpoint, train_sft, Checkpoint, PolicyParams, SftConfig};
use intentflow::grpo::{train_rl, Composition, FileSink, MetricsRecord, RlSink};
use intentflow::reward::rfs_standard;
use intentflow::scene::{generate_pool, load_pool, pool_stats, save_pool, select, split_pool, DatasetSplit, Layout, Scene};
use intentflow::{Adam, Scalar};

use crate::options::{or_default, resolve_config, user, Cli, CliError, CliResult, Command, Common};

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a.common),
        Command::Sft(a) => sft(&a.common, a.no_ordinary, a.log_every),
        Command::Rl(a) => rl(&a.common, a.init, a.composition, a.iterations, a.run_dir),
        Command::Eval(a) => eval(&a.common, a.checkpoint, a.ordinary, a.bon, a.diversity, a.export, a.run),
    }
}

fn setup(common: &Common) -> CliResult<ExperimentConfig> {
    let cfg = resolve_config(common)?;
    if cfg.workers > 0 {
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global();
    }
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::User(format!("{}: {e}", cfg.output_dir.display())))?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::User(format!("{}: {e}", path.display())))
}

struct Data {
    pool: Vec<Scene<f64>>,
    split: DatasetSplit,
}

impl Data {
    fn train(&self) -> CliResult<Vec<&Scene<f64>>> {
        Ok(select(&self.pool, &self.split.train_ids)?)
    }

    fn held(&self) -> CliResult<Vec<&Scene<f64>>> {
        Ok(select(&self.pool, &self.split.held_ids)?)
    }
}

fn load_data(cfg: &ExperimentConfig, pool_flag: &Option<PathBuf>) -> CliResult<Data> {
    let default = cfg.output_dir.join("pool.jsonl");
    let pool = match pool_flag {
        Some(path) => load_pool(path)?,
        None if default.exists() => load_pool(&default)?,
        None => generate_pool(cfg.pool.n_scenes, cfg.pool.seed),
    };
    let split = split_pool(&pool, cfg.pool.split_seed, cfg.pool.train_n, cfg.pool.held_n)?;
    Ok(Data { pool, split })
}

fn gen_data(common: &Common) -> CliResult<()> {
    let cfg = setup(common)?;
    let pool: Vec<Scene<f64>> = generate_pool(cfg.pool.n_scenes, cfg.pool.seed);
    let out = &cfg.output_dir;
    save_pool(&pool, &out.join("pool.jsonl"))?;
    let split = split_pool(&pool, cfg.pool.split_seed, cfg.pool.train_n, cfg.pool.held_n)?;
    let split_doc = serde_json::json!({
        "train_ids": split.train_ids,
        "held_ids": split.held_ids,
        "split_seed": split.split_seed,
        "pool_digest": format!("{:016x}", cfg.pool.digest()),
        "config_digest": format!("{:016x}", cfg.digest()),
    });
    write_text(&out.join("split.json"), &serde_json::to_string_pretty(&split_doc).expect("split json"))?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;

    let stats = pool_stats(&pool, |t, s| rfs_standard(t, s).as_f64());
    println!("pool: {} scenes -> {}", stats.n_scenes, out.join("pool.jsonl").display());
    println!("split: {} train / {} held-out (split_seed {})", split.train_ids.len(), split.held_ids.len(), split.split_seed);
    let hist = |name: &str, h: &BTreeMap<String, usize>| {
        let body: Vec<String> = h.iter().map(|(k, v)| format!("{k}={v}")).collect();
        println!("{name}: {}", body.join(" "));
    };
    hist("layouts", &stats.layout_histogram);
    hist("logged intents", &stats.logged_intent_histogram);
    hist("admissible intents", &stats.admissible_intent_histogram);
    hist("rater labels", &stats.rater_label_histogram);
    println!("logged standard RFS mean: {:.4}", stats.logged_mean_rfs);
    println!("max-rater ceiling mean: {:.4}", stats.ceiling_mean);
    println!("logged-vs-ceiling gap: {:.4}", stats.logged_vs_ceiling_gap);
    println!("logged intent is top-rated: {:.4}", stats.logged_is_top_fraction);
    Ok(())
}

fn checkpoint(stage: &str, params: PolicyParams<f64>, optimizer: Adam, cfg: &ExperimentConfig) -> Checkpoint<f64> {
    Checkpoint {
        stage: stage.into(),
        iteration: 0,
        params,
        optimizer,
        config_json: cfg.to_json(),
        config_digest: cfg.digest(),
    }
}

fn sft(common: &Common, no_ordinary: bool, log_every: usize) -> CliResult<()> {
    let cfg = setup(common)?;
    let data = load_data(&cfg, &common.pool)?;
    let train = data.train()?;
    let held = data.held()?;
    let out = &cfg.output_dir;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;

    let (params, opt, report) = train_sft(&train, cfg.arch, &cfg.sft, log_every)?;
    for (step, loss) in &report.loss_trace {
        eprintln!("sft step {step:>6}  loss {loss:.5}");
    }
    println!("sft loss: {:.5} -> {:.5}", report.initial_loss, report.final_loss);
    println!("classifier train accuracy: {:.4}", report.classifier.train_accuracy);
    let path = out.join("ckpt-sft");
    save_checkpoint(&checkpoint("sft", params.clone(), opt, &cfg), &path)?;
    println!("wrote {}", path.display());
    let report_json = serde_json::json!({
        "initial_loss": report.initial_loss,
        "final_loss": report.final_loss,
        "loss_trace": report.loss_trace,
        "classifier_train_accuracy": report.classifier.train_accuracy,
        "config_digest": format!("{:016x}", cfg.digest()),
    });
    write_text(&out.join("sft-report.json"), &serde_json::to_string_pretty(&report_json).expect("report json"))?;

    let heldout_cfg = &cfg.schedule.heldout;
    let intersections: Vec<&Scene<f64>> = held.iter().copied().filter(|s| s.layout == Layout::Intersection).collect();
    if !intersections.is_empty() {
        let m = intent_match(&params, &intersections, heldout_cfg)?;
        println!(
            "mode expansion: intent match on held-out intersection scenes {:.4} ({}/{})",
            m.rate, m.matched, m.total
        );
    }
    let m = intent_match(&params, &held, heldout_cfg)?;
    println!("mode expansion: intent match on all held-out scenes {:.4} ({}/{})", m.rate, m.matched, m.total);
    let h = held_out_eval(&params, &held, heldout_cfg)?;
    println!("held-out RFS {:.4}  TR {:.1}%", h.rfs_mean, 100.0 * h.trust_region_rate);

    if !no_ordinary {
        let base_cfg = SftConfig {
            unconditional: true,
            ..cfg.sft.clone()
        };
        let (base, base_opt, base_report) = train_sft(&train, cfg.arch, &base_cfg, 0)?;
        let path = out.join("ckpt-sft-ordinary");
        save_checkpoint(&checkpoint("sft-ordinary", base, base_opt, &cfg), &path)?;
        println!("ordinary baseline loss: {:.5} -> {:.5}", base_report.initial_loss, base_report.final_loss);
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Forwards to a file sink and echoes evaluation lines.
struct Progress(FileSink);

impl RlSink<f64> for Progress {
    fn record(&mut self, rec: &MetricsRecord) -> intentflow::Result<()> {
        if let (Some(h), Some(tr)) = (rec.heldout_rfs, rec.heldout_tr) {
            let gap = rec.diversity.map(|d| format!("  gap {:+.3}", d.gap)).unwrap_or_default();
            println!("iter {:>6}  held-out RFS {h:.4}  TR {:.1}%{gap}", rec.iteration, 100.0 * tr);
        }
        RlSink::<f64>::record(&mut self.0, rec)
    }

    fn timing(&mut self, iteration: usize, seconds: f64) -> intentflow::Result<()> {
        RlSink::<f64>::timing(&mut self.0, iteration, seconds)
    }

    fn checkpoint(&mut self, iteration: usize, params: &PolicyParams<f64>, opt: &Adam) -> intentflow::Result<()> {
        self.0.checkpoint(iteration, params, opt)
    }
}

fn rl(
    common: &Common,
    init: Option<PathBuf>,
    composition: Option<String>,
    iterations: Option<usize>,
    run_dir: Option<PathBuf>,
) -> CliResult<()> {
    let mut cfg = setup(common)?;
    if let Some(name) = composition {
        match Composition::parse(&name) {
            Some(c) => cfg.grpo.composition = c,
            None => return user(format!("unknown composition {name:?}")),
        }
    }
    if let Some(n) = iterations {
        cfg.schedule.iterations = n;
    }
    cfg.validate()?;
    let data = load_data(&cfg, &common.pool)?;
    let init_path = or_default(&init, &cfg.output_dir, "ckpt-sft");
    if !init_path.exists() {
        return user(format!("missing SFT checkpoint {} (run `intentflow sft` first)", init_path.display()));
    }
    let start = load_checkpoint::<f64>(&init_path, &cfg.arch)?;
    let dir = or_default(&run_dir, &cfg.output_dir, "rl");
    let mut sink = Progress(FileSink::create(&dir, cfg.to_json(), cfg.digest())?);
    write_text(&dir.join("config.toml"), &cfg.to_toml())?;
    println!(
        "rl: composition {} group {} lr {} for {} iterations -> {}",
        cfg.grpo.composition.name(),
        cfg.grpo.group_size(),
        cfg.grpo.learning_rate,
        cfg.schedule.iterations,
        dir.display()
    );
    let summary = train_rl(&start.params, &data.train()?, &data.held()?, &cfg.grpo, &cfg.schedule, &mut sink)?;
    println!(
        "init {:.4}  peak {:.4} at iteration {}  delta {:+.4}",
        summary.init_heldout,
        summary.peak_heldout,
        summary.peak_iteration,
        summary.peak_heldout - summary.init_heldout
    );
    Ok(())
}

/// Init-vs-peak numbers from an RL metrics log.
pub struct RunSummary {
    pub init: (f64, f64),
    pub peak_iteration: usize,
    pub peak: (f64, f64),
}

pub fn summarize_run(dir: &Path) -> CliResult<RunSummary> {
    let path = dir.join("metrics.jsonl");
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::User(format!("{}: {e}", path.display())))?;
    let mut evals = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let rec: MetricsRecord =
            serde_json::from_str(line).map_err(|e| CliError::User(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if let (Some(h), Some(tr)) = (rec.heldout_rfs, rec.heldout_tr) {
            evals.push((rec.iteration, h, tr));
        }
    }
    let Some(first) = evals.first().copied() else {
        return user(format!("{} has no evaluation records", path.display()));
    };
    let best = evals.iter().copied().fold(first, |b, e| if e.1 > b.1 { e } else { b });
    Ok(RunSummary {
        init: (first.1, first.2),
        peak_iteration: best.0,
        peak: (best.1, best.2),
    })
}

fn eval(
    common: &Common,
    checkpoint_flag: Option<PathBuf>,
    ordinary_flag: Option<PathBuf>,
    bon: bool,
    diversity: bool,
    export: Option<PathBuf>,
    run: Option<PathBuf>,
) -> CliResult<()> {
    let cfg = setup(common)?;
    let data = load_data(&cfg, &common.pool)?;
    let held = data.held()?;
    let ckpt = or_default(&checkpoint_flag, &cfg.output_dir, "ckpt-sft");
    if !ckpt.exists() {
        return user(format!("missing checkpoint {}", ckpt.display()));
    }
    let params = load_checkpoint::<f64>(&ckpt, &cfg.arch)?.params;
    let heldout_cfg: &HeldOutConfig = &cfg.schedule.heldout;
    let mut bundle = AnalysisBundle::default();
    bundle.metadata.insert("checkpoint".into(), ckpt.display().to_string());
    bundle.metadata.insert("config_digest".into(), format!("{:016x}", cfg.digest()));
    bundle.metadata.insert("pool_digest".into(), format!("{:016x}", cfg.pool.digest()));
    bundle.metadata.insert("preset".into(), cfg.preset.clone());

    let h = held_out_eval(&params, &held, heldout_cfg)?;
    println!("held-out RFS {:.4}  TR {:.1}%  ({} scenes)", h.rfs_mean, 100.0 * h.trust_region_rate, held.len());
    bundle.heldout.push(("policy".into(), h));

    if bon {
        let ordinary_path = or_default(&ordinary_flag, &cfg.output_dir, "ckpt-sft-ordinary");
        if !ordinary_path.exists() {
            return user(format!("--bon needs the ordinary baseline {}", ordinary_path.display()));
        }
        let ordinary = load_checkpoint::<f64>(&ordinary_path, &cfg.arch)?.params;
        bundle.metadata.insert("ordinary_checkpoint".into(), ordinary_path.display().to_string());
        let shown: Vec<usize> = [1, 2, 4, 8, 16, 32, 64, 128].into_iter().filter(|k| *k <= cfg.bon.k_max).collect();
        println!(
            "best-of-K     {}",
            shown.iter().map(|k| format!("{:>7}", format!("K={k}"))).collect::<String>()
        );
        for strategy in BonStrategy::ALL {
            let p = if strategy == BonStrategy::Ordinary { &ordinary } else { &params };
            let curve = best_of_k_curve(p, &held, strategy, &cfg.bon)?;
            let cells: String = shown
                .iter()
                .map(|k| curve.at(*k).map(|v| format!("{v:>7.3}")).unwrap_or_else(|| format!("{:>7}", "-")))
                .collect();
            println!("{:<14}{cells}", curve.strategy);
            bundle.curves.push((strategy.name().to_string(), curve));
        }
        if let Some((_, c)) = bundle.curves.first() {
            println!("logged demonstration mean {:.3}", c.logged_score);
        }
    }

    if diversity {
        let d = diversity_report(&params, &held, &cfg.schedule.diversity)?;
        println!(
            "diversity D1 {:.3} m  D2 {:.3}  D3@1 {:.3}  D3@16 {:.3}  gap {:+.3}",
            d.d1, d.d2, d.d3_1, d.d3_16, d.gap
        );
        bundle.diversity.push(("policy".into(), d));
    }

    let run_dir = run.or_else(|| Some(cfg.output_dir.join("rl")).filter(|d| d.join("metrics.jsonl").exists()));
    if let Some(dir) = run_dir {
        let s = summarize_run(&dir)?;
        println!("run {}", dir.display());
        println!("  {:<22}{:>10}{:>8}", "", "held RFS", "TR");
        println!("  {:<22}{:>10.4}{:>7.1}%", "init (iteration 0)", s.init.0, 100.0 * s.init.1);
        println!("  {:<22}{:>10.4}{:>7.1}%", format!("peak (iteration {})", s.peak_iteration), s.peak.0, 100.0 * s.peak.1);
        println!("  {:<22}{:>+10.4}", "delta", s.peak.0 - s.init.0);
        bundle.metadata.insert("run".into(), dir.display().to_string());
    }

    let export_dir = or_default(&export, &cfg.output_dir, "analysis");
    let manifest = export_analysis(&bundle, &export_dir)?;
    println!("exported {} files to {}", manifest.files.len(), export_dir.display());
    Ok(())
}
