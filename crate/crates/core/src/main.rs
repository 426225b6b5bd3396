//! Command-line orchestration: dataset generation, clean/backdoored
//! training, mitigation runs with metrics emission, the proposition-check
//! suite, and box-plot rendering over collected metrics files.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use backdoor_forge::advgen::AdvObjective;
use backdoor_forge::attack::{
    build_triggered_test, gen_dataset, poison, train_backdoored, train_clean_reference,
    AttackError, ImplantGate, PoisonMode,
};
use backdoor_forge::data::{load_dataset, save_dataset, Sample};
use backdoor_forge::defense::{ft_baseline, mitigate, MitigationOutcome, SelectionStrategy};
use backdoor_forge::detector::{
    load_checkpoint, save_checkpoint, CheckpointHeader, DetectorParams, TinyDetector,
};
use backdoor_forge::eval::{clean_map, evaluate, EvalMode};
use backdoor_forge::props;
use backdoor_forge::runconfig::{MetricsFile, RunConfig, RunLabel};

/// Gate floors the attack-side training must reach before a checkpoint is
/// accepted as "backdoored".
const RMA_IMPLANT_MIN_ASR: f64 = 0.8;
const ODA_IMPLANT_MIN_ASR: f64 = 0.7;

#[derive(Parser)]
#[command(
    name = "backdoor-forge",
    version,
    about = "Implant, mitigate, and measure object-detection backdoors on a tiny synthetic benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/test dataset directories.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a clean or backdoored detector checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "none")]
        poison: PoisonArg,
    },
    /// Run a mitigation method against the backdoored checkpoint.
    Mitigate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long, value_enum)]
        selection: Option<SelectionArg>,
        #[arg(long, value_enum)]
        def_loss: Option<OnOff>,
        /// Comma-separated seed sweep; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Run the proposition and corollary check suites.
    Props {
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        /// Also write the JSON-lines report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render ASR/TDR/RmAP box plots from collected metrics.json files.
    Plot {
        /// Directory or glob-like pattern to scan for metrics.json files.
        #[arg(long)]
        results: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum PoisonArg {
    None,
    Rma,
    Oda,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Sbm,
    Clm,
    Flm,
    Ft,
}

impl MethodArg {
    fn label(self) -> &'static str {
        match self {
            MethodArg::Sbm => "sbm",
            MethodArg::Clm => "clm",
            MethodArg::Flm => "flm",
            MethodArg::Ft => "ft",
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum SelectionArg {
    Rs,
    Fws,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

struct CliFailure {
    code: u8,
    message: String,
}

impl CliFailure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl<E: std::error::Error> From<E> for CliFailure {
    fn from(e: E) -> Self {
        CliFailure::new(1, e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliFailure> {
    match cli.command {
        Command::GenData { config } => cmd_gen_data(&config),
        Command::Train { config, poison } => cmd_train(&config, poison),
        Command::Mitigate {
            config,
            method,
            selection,
            def_loss,
            seeds,
        } => cmd_mitigate(&config, method, selection, def_loss, seeds),
        Command::Props { seed, out } => cmd_props(seed, out.as_deref()),
        Command::Plot { results, out_dir } => cmd_plot(&results, &out_dir),
    }
}

fn load_config(path: &Path) -> Result<RunConfig, CliFailure> {
    RunConfig::load(path).map_err(|e| CliFailure::new(2, e.to_string()))
}

/// Output root: `BF_RUN_DIR` overrides the configured one.
fn out_root(cfg: &RunConfig) -> PathBuf {
    std::env::var_os("BF_RUN_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(&cfg.paths.out_root))
}

fn run_dir(cfg: &RunConfig, label: &str) -> PathBuf {
    out_root(cfg).join(format!("{}-{label}", &cfg.digest()[..12]))
}

fn cmd_gen_data(config_path: &Path) -> Result<(), CliFailure> {
    let cfg = load_config(config_path)?;
    for w in cfg.defense_config().perturbation.warnings() {
        eprintln!("warning: {w}");
    }
    let data_dir = PathBuf::from(&cfg.paths.data_dir);
    let train = gen_dataset(cfg.scene.train_images, &cfg.scene_spec())
        .map_err(|e| CliFailure::new(2, e.to_string()))?;
    let test = gen_dataset(cfg.scene.test_images, &cfg.test_scene_spec())
        .map_err(|e| CliFailure::new(2, e.to_string()))?;
    for (split, samples, spec) in [
        ("train", &train, cfg.scene_spec()),
        ("test", &test, cfg.test_scene_spec()),
    ] {
        let manifest = serde_json::json!({
            "seed": spec.seed,
            "spec": spec,
            "poison": serde_json::Value::Null,
            "config_digest": cfg.digest(),
        });
        save_dataset(&data_dir.join(split), samples, &manifest)?;
    }
    println!(
        "wrote {} train + {} test images under {}",
        train.len(),
        test.len(),
        data_dir.display()
    );
    Ok(())
}

fn load_splits(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>), CliFailure> {
    let data_dir = PathBuf::from(&cfg.paths.data_dir);
    let load = |split: &str| -> Result<Vec<Sample>, CliFailure> {
        let dir = data_dir.join(split);
        if !dir.join("annotations.json").exists() {
            return Err(CliFailure::new(
                2,
                format!(
                    "dataset split missing at {}; run gen-data first",
                    dir.display()
                ),
            ));
        }
        Ok(load_dataset(&dir)?.0)
    };
    Ok((load("train")?, load("test")?))
}

/// The config a train invocation effectively runs under: the poison flag
/// overrides the mode, and `none` zeroes the ratio.
fn effective_train_config(cfg: &RunConfig, arg: PoisonArg) -> RunConfig {
    let mut eff = cfg.clone();
    match arg {
        PoisonArg::None => eff.poison.ratio = 0.0,
        PoisonArg::Rma => eff.poison.mode = PoisonMode::Rma,
        PoisonArg::Oda => eff.poison.mode = PoisonMode::Oda,
    }
    eff
}

fn train_dir(cfg: &RunConfig, arg: PoisonArg) -> PathBuf {
    let label = match arg {
        PoisonArg::None => "train-none",
        PoisonArg::Rma => "train-rma",
        PoisonArg::Oda => "train-oda",
    };
    run_dir(&effective_train_config(cfg, arg), label)
}

fn write_train_log(path: &Path, log: &backdoor_forge::detector::TrainLog) -> std::io::Result<()> {
    let mut csv = String::from("epoch,l_loc,l_cls,l_fb\n");
    for e in &log.epochs {
        csv.push_str(&format!("{},{},{},{}\n", e.epoch, e.l_loc, e.l_cls, e.l_fb));
    }
    fs::write(path, csv)
}

/// Ensures the clean reference checkpoint exists, training it when absent.
/// Returns its parameters and clean-test mAP.
fn ensure_clean_reference(
    cfg: &RunConfig,
    det: &TinyDetector,
    train: &[Sample],
    test: &[Sample],
) -> Result<(DetectorParams, f64), CliFailure> {
    let dir = train_dir(cfg, PoisonArg::None);
    let ckpt = dir.join("checkpoint.bfck");
    let summary_path = dir.join("summary.json");
    if ckpt.exists() && summary_path.exists() {
        let (params, _) = load_checkpoint(&ckpt)?;
        let summary: serde_json::Value = serde_json::from_slice(&fs::read(&summary_path)?)?;
        if let Some(map) = summary["clean_map"].as_f64() {
            return Ok((params, map));
        }
    }
    eprintln!("clean reference not found; training it first");
    let init = DetectorParams::init(cfg.scene.num_classes, cfg.seed);
    let (params, log, map) = train_clean_reference(
        det,
        &init,
        train,
        &cfg.train_hparams(),
        test,
        cfg.defense.tau,
        cfg.defense.nms_iou,
    )
    .map_err(|e| CliFailure::new(1, e.to_string()))?;
    fs::create_dir_all(&dir)?;
    save_checkpoint(
        &ckpt,
        &params,
        &CheckpointHeader::new(cfg.scene.num_classes, cfg.defense.tau),
    )?;
    write_train_log(&dir.join("training_log.csv"), &log)?;
    fs::write(
        &summary_path,
        serde_json::to_vec_pretty(&serde_json::json!({
            "clean_map": map,
            "poison": "none",
            "config_digest": effective_train_config(cfg, PoisonArg::None).digest(),
        }))?,
    )?;
    println!("clean reference mAP@0.5 = {map:.3}");
    Ok((params, map))
}

fn cmd_train(config_path: &Path, arg: PoisonArg) -> Result<(), CliFailure> {
    let cfg = load_config(config_path)?;
    let det = TinyDetector::new(cfg.scene.num_classes);
    let (train, test) = load_splits(&cfg)?;

    if arg == PoisonArg::None {
        let (_, map) = ensure_clean_reference(&cfg, &det, &train, &test)?;
        println!(
            "clean checkpoint ready at {} (mAP@0.5 = {map:.3})",
            train_dir(&cfg, arg).display()
        );
        return Ok(());
    }

    let (_, reference_map) = ensure_clean_reference(&cfg, &det, &train, &test)?;
    let eff = effective_train_config(&cfg, arg);
    let trig = eff.trigger_spec();
    let (poisoned, summary) = poison(&train, &eff.poison_config(), &trig, eff.seed)
        .map_err(|e| CliFailure::new(2, e.to_string()))?;
    let triggered = build_triggered_test(&test, &trig, eff.seed)
        .map_err(|e| CliFailure::new(1, e.to_string()))?;
    let (mode, min_asr) = match eff.poison.mode {
        PoisonMode::Rma => (
            EvalMode::Rma {
                target_class: eff.poison.rma_target_class,
            },
            RMA_IMPLANT_MIN_ASR,
        ),
        PoisonMode::Oda => (EvalMode::Oda, ODA_IMPLANT_MIN_ASR),
    };
    let gate = ImplantGate {
        clean_test: &test,
        triggered_test: &triggered,
        clean_reference_map: reference_map,
        mode,
        min_asr,
        tau: eff.defense.tau,
        nms_iou: eff.defense.nms_iou,
    };
    let init = DetectorParams::init(eff.scene.num_classes, eff.seed);
    let (params, log, implant) =
        match train_backdoored(&det, &init, &poisoned, &eff.train_hparams(), &gate) {
            Ok(v) => v,
            Err(AttackError::ImplantFailure(msg)) => {
                return Err(CliFailure::new(3, format!("implant gate: {msg}")))
            }
            Err(e) => return Err(CliFailure::new(1, e.to_string())),
        };

    let dir = train_dir(&cfg, arg);
    fs::create_dir_all(&dir)?;
    save_checkpoint(
        &dir.join("checkpoint.bfck"),
        &params,
        &CheckpointHeader::new(eff.scene.num_classes, eff.defense.tau),
    )?;
    write_train_log(&dir.join("training_log.csv"), &log)?;
    fs::write(
        dir.join("summary.json"),
        serde_json::to_vec_pretty(&serde_json::json!({
            "clean_map": implant.clean_map,
            "clean_reference_map": implant.clean_reference_map,
            "triggered_asr": implant.asr,
            "poison": summary,
            "mode": mode.name(),
            "config_digest": eff.digest(),
        }))?,
    )?;
    println!(
        "backdoored checkpoint at {} (ASR {:.3}, clean mAP {:.3})",
        dir.display(),
        implant.asr,
        implant.clean_map
    );
    Ok(())
}

/// Deterministic clean-subset selection for the defender.
fn defender_subset(train: &[Sample], fraction: f64, seed: u64) -> Vec<Sample> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x50b5_e700);
    order.shuffle(&mut rng);
    let count = ((fraction * train.len() as f64).ceil() as usize).clamp(1, train.len());
    order.truncate(count);
    order.sort_unstable();
    order.into_iter().map(|i| train[i].clone()).collect()
}

fn cmd_mitigate(
    config_path: &Path,
    method: MethodArg,
    selection: Option<SelectionArg>,
    def_loss: Option<OnOff>,
    seeds: Option<Vec<u64>>,
) -> Result<(), CliFailure> {
    let base = load_config(config_path)?;
    let det = TinyDetector::new(base.scene.num_classes);
    let (train, test) = load_splits(&base)?;

    // the backdoored checkpoint to repair, keyed by the poison mode in config
    let bd_arg = match base.poison.mode {
        PoisonMode::Rma => PoisonArg::Rma,
        PoisonMode::Oda => PoisonArg::Oda,
    };
    let bd_dir = train_dir(&base, bd_arg);
    let ckpt_path = bd_dir.join("checkpoint.bfck");
    if !ckpt_path.exists() {
        return Err(CliFailure::new(
            2,
            format!(
                "backdoored checkpoint missing at {}; run `train --poison {}` first",
                ckpt_path.display(),
                bd_arg_name(bd_arg)
            ),
        ));
    }
    let (theta_bd, _) = load_checkpoint(&ckpt_path)?;

    let eval_mode = match base.poison.mode {
        PoisonMode::Rma => EvalMode::Rma {
            target_class: base.poison.rma_target_class,
        },
        PoisonMode::Oda => EvalMode::Oda,
    };
    let trig = base.trigger_spec();
    let triggered = build_triggered_test(&test, &trig, base.seed)
        .map_err(|e| CliFailure::new(1, e.to_string()))?;
    let pre_map = clean_map(&det, &theta_bd, &test, base.defense.tau, base.defense.nms_iou)?;
    if pre_map <= 0.0 {
        return Err(CliFailure::new(
            2,
            "pre-mitigation mAP is zero; cannot form RmAP".to_string(),
        ));
    }

    let seed_list = seeds.unwrap_or_else(|| vec![base.seed]);
    for &seed in &seed_list {
        // the effective config of this run: overrides folded in
        let mut eff = base.clone();
        eff.seed = seed;
        match method {
            MethodArg::Sbm => eff.defense.objective = AdvObjective::Sbm,
            MethodArg::Clm => eff.defense.objective = AdvObjective::Clm,
            MethodArg::Flm => eff.defense.objective = AdvObjective::Flm,
            MethodArg::Ft => {}
        }
        if let Some(s) = selection {
            eff.defense.selection = match s {
                SelectionArg::Rs => SelectionStrategy::Rs,
                SelectionArg::Fws => SelectionStrategy::Fws,
            };
        }
        if let Some(d) = def_loss {
            eff.defense.use_def_loss = d == OnOff::On;
        }
        for w in eff.defense_config().perturbation.warnings() {
            eprintln!("warning: {w}");
        }

        let subset = defender_subset(&train, eff.defense.subset_fraction, seed);
        let dcfg = eff.defense_config();
        let outcome: MitigationOutcome = match method {
            MethodArg::Ft => ft_baseline(&det, &theta_bd, &subset, &dcfg),
            _ => mitigate(&det, &theta_bd, &subset, &dcfg),
        }
        .map_err(|e| CliFailure::new(1, e.to_string()))?;

        let report = evaluate(
            &det,
            &outcome.params,
            &test,
            &triggered,
            pre_map,
            eval_mode,
            eff.defense.tau,
            eff.defense.nms_iou,
        )?;

        let label = format!("mitigate-{}-s{seed}", method.label());
        let dir = run_dir(&eff, &label);
        fs::create_dir_all(&dir)?;
        save_checkpoint(
            &dir.join("mitigated.bfck"),
            &outcome.params,
            &CheckpointHeader::new(eff.scene.num_classes, eff.defense.tau),
        )?;
        let mut csv = String::from("epoch,l_od_clean,l_od_adv,l_def,gate_mean_g_rma\n");
        for e in &outcome.epochs {
            let gate = e
                .gate_mean_g_rma
                .map(|g| g.to_string())
                .unwrap_or_default();
            csv.push_str(&format!(
                "{},{},{},{},{gate}\n",
                e.epoch, e.lod_clean, e.lod_adv, e.l_def
            ));
        }
        fs::write(dir.join("epochs.csv"), csv)?;

        let metrics = MetricsFile {
            mode: report.mode.clone(),
            asr: report.asr,
            tdr: report.tdr,
            rmap: report.rmap,
            map50_clean: report.map50_clean,
            pre_mitigation_map: pre_map,
            config_digest: eff.digest(),
            seed,
            run: RunLabel {
                method: method.label().to_string(),
                selection: match eff.defense.selection {
                    SelectionStrategy::Rs => "rs".into(),
                    SelectionStrategy::Fws => "fws".into(),
                },
                def_loss: eff.defense.use_def_loss,
            },
        };
        fs::write(
            dir.join("metrics.json"),
            serde_json::to_vec_pretty(&metrics)?,
        )?;
        let tdr_str = report
            .tdr
            .map(|t| format!("{t:.3}"))
            .unwrap_or_else(|| "-".into());
        println!(
            "seed {seed}: {} ASR {:.3} TDR {tdr_str} RmAP {:.3} -> {}",
            method.label(),
            report.asr,
            report.rmap,
            dir.display()
        );
    }
    Ok(())
}

fn bd_arg_name(arg: PoisonArg) -> &'static str {
    match arg {
        PoisonArg::None => "none",
        PoisonArg::Rma => "rma",
        PoisonArg::Oda => "oda",
    }
}

fn cmd_props(seed: u64, out: Option<&Path>) -> Result<(), CliFailure> {
    let results = props::run_all(seed);
    let mut lines = String::new();
    let mut all_pass = true;
    for r in &results {
        let line = serde_json::to_string(r)?;
        println!("{line}");
        lines.push_str(&line);
        lines.push('\n');
        all_pass &= r.pass;
    }
    if let Some(path) = out {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, lines)?;
    }
    if all_pass {
        Ok(())
    } else {
        Err(CliFailure::new(4, "proposition check failed".to_string()))
    }
}

fn collect_metrics_files(results: &str) -> Vec<PathBuf> {
    let root = match results.find('*') {
        Some(pos) => {
            let prefix = &results[..pos];
            PathBuf::from(prefix.trim_end_matches('/').trim_end_matches('\\'))
        }
        None => PathBuf::from(results),
    };
    let mut found = Vec::new();
    let mut stack = vec![root];
    while let Some(dir) = stack.pop() {
        let Ok(entries) = fs::read_dir(&dir) else {
            continue;
        };
        for entry in entries.flatten() {
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == "metrics.json") {
                found.push(path);
            }
        }
    }
    found.sort();
    found
}

fn cmd_plot(results: &str, out_dir: &Path) -> Result<(), CliFailure> {
    let files = collect_metrics_files(results);
    if files.is_empty() {
        return Err(CliFailure::new(
            2,
            format!("no metrics.json files found under `{results}`"),
        ));
    }
    let mut runs = Vec::new();
    for f in &files {
        let m: MetricsFile = serde_json::from_slice(&fs::read(f)?)?;
        runs.push(m);
    }
    fs::create_dir_all(out_dir)?;

    let group_of = |m: &MetricsFile| -> String {
        if m.run.method == "ft" {
            "ft".to_string()
        } else {
            format!(
                "{}-{}{}",
                m.run.method,
                m.run.selection,
                if m.run.def_loss { "+def" } else { "-def" }
            )
        }
    };
    type Accessor = Box<dyn Fn(&MetricsFile) -> Option<f64>>;
    let metrics: [(&str, Accessor); 3] = [
        ("asr", Box::new(|m: &MetricsFile| Some(m.asr))),
        ("tdr", Box::new(|m: &MetricsFile| m.tdr)),
        ("rmap", Box::new(|m: &MetricsFile| Some(m.rmap))),
    ];
    for (metric, accessor) in metrics {
        let mut groups: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
        for m in &runs {
            if let Some(v) = accessor(m) {
                groups.entry(group_of(m)).or_default().push(v);
            }
        }
        let svg = render_box_plot(metric, &groups);
        fs::write(out_dir.join(format!("{metric}.svg")), svg)?;
    }
    println!("wrote 3 figures to {}", out_dir.display());
    Ok(())
}

fn quartiles(sorted: &[f64]) -> (f64, f64, f64) {
    let q = |p: f64| -> f64 {
        if sorted.len() == 1 {
            return sorted[0];
        }
        let idx = p * (sorted.len() - 1) as f64;
        let lo = idx.floor() as usize;
        let hi = idx.ceil() as usize;
        let frac = idx - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    };
    (q(0.25), q(0.5), q(0.75))
}

/// Minimal deterministic SVG box plot, one box per group.
fn render_box_plot(metric: &str, groups: &std::collections::BTreeMap<String, Vec<f64>>) -> String {
    let (w, h) = (640.0, 360.0);
    let (ml, mr, mt, mb) = (60.0, 20.0, 40.0, 70.0);
    let plot_w = w - ml - mr;
    let plot_h = h - mt - mb;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{metric}</text>\n",
        w / 2.0
    ));

    let max_v = groups
        .values()
        .flatten()
        .fold(0.0f64, |m, &v| m.max(v))
        .max(1.0);
    let y_of = |v: f64| mt + plot_h * (1.0 - v / max_v);

    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + plot_h
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + plot_h,
        w - mr,
        mt + plot_h
    ));
    for t in 0..=5 {
        let tick = max_v * t as f64 / 5.0;
        let y = y_of(tick);
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{ml}\" y2=\"{y}\" stroke=\"black\"/>\n",
            ml - 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{tick:.2}</text>\n",
            ml - 8.0,
            y + 4.0
        ));
    }

    if groups.is_empty() {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">no data</text>\n",
            w / 2.0,
            mt + plot_h / 2.0
        ));
        svg.push_str("</svg>\n");
        return svg;
    }

    let slot = plot_w / groups.len() as f64;
    for (gi, (name, values)) in groups.iter().enumerate() {
        let mut sorted = values.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (q1, med, q3) = quartiles(&sorted);
        let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
        let cx = ml + slot * (gi as f64 + 0.5);
        let bw = (slot * 0.5).min(60.0);
        svg.push_str(&format!(
            "<line x1=\"{cx}\" y1=\"{}\" x2=\"{cx}\" y2=\"{}\" stroke=\"black\"/>\n",
            y_of(lo),
            y_of(hi)
        ));
        for v in [lo, hi] {
            svg.push_str(&format!(
                "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
                cx - bw / 4.0,
                y_of(v),
                cx + bw / 4.0,
                y_of(v)
            ));
        }
        svg.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"{bw}\" height=\"{}\" fill=\"#9ecae1\" stroke=\"black\"/>\n",
            cx - bw / 2.0,
            y_of(q3),
            (y_of(q1) - y_of(q3)).max(0.5)
        ));
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\" stroke-width=\"2\"/>\n",
            cx - bw / 2.0,
            y_of(med),
            cx + bw / 2.0,
            y_of(med)
        ));
        svg.push_str(&format!(
            "<text x=\"{cx}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\" transform=\"rotate(30 {cx} {})\">{name}</text>\n",
            mt + plot_h + 18.0,
            mt + plot_h + 18.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
