use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use csim::autograd::Fault;
use csim::data::{generate_dataset, read_split, write_split, DatasetSpec, Split};
use csim::fusion::MatrixMode;
use csim::model::{checkpoint, AttentionKind, Model, ResidualKind, Topology, LEVELS};
use csim::report::{
    dataset_digest, heatmap_grid, pair_heatmaps, run_ablation, run_gradcheck_suite, split_digest, thread_cap,
    write_heatmaps, ExperimentMatrix, SuiteOptions,
};
use csim::train::{compare_cls_gap, evaluate, gap_csv, train, Distill, Metrics, TrainConfig, TrainLog};

/// Cross similarity training on synthetic confounded data.
#[derive(Parser)]
#[command(name = "csim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a train/test dataset pair.
    GenData(GenDataArgs),
    /// Train a model and write its checkpoint and step log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split.
    Eval(EvalArgs),
    /// Emit S and D attention heatmaps for image pairs.
    Heatmap(HeatmapArgs),
    /// Run an experiment matrix over several seeds.
    Ablate(AblateArgs),
    /// Check every backward rule and the full model against finite differences.
    Gradcheck(GradcheckArgs),
    /// Report the base-versus-cross loss gap per epoch from a step log.
    CompareGap(CompareGapArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for train.csim, test.csim and spec.toml.
    #[arg(long, default_value = "data")]
    out: PathBuf,
    /// TOML dataset spec; flags override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of classes.
    #[arg(long)]
    k: Option<usize>,
    /// Number of confound ids (defaults to k).
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    rho_train: Option<f64>,
    #[arg(long)]
    rho_test: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    cell: Option<usize>,
    #[arg(long)]
    signal_contrast: Option<f64>,
    #[arg(long)]
    confound_contrast: Option<f64>,
}

/// Flags shared by `train` and `ablate`; each overrides the config file.
#[derive(Args)]
struct ConfigArgs {
    /// TOML training config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long, value_enum)]
    topology: Option<TopologyArg>,
    #[arg(long, value_enum)]
    matrix: Option<MatrixArg>,
    #[arg(long, value_enum)]
    residual: Option<ResidualArg>,
    #[arg(long, value_enum)]
    distill: Option<DistillArg>,
    #[arg(long, value_enum)]
    attention: Option<AttentionArg>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Triplet control: stop gradient through the negative branch.
    #[arg(long)]
    freeze_negative: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TopologyArg {
    Baseline,
    Dcs,
    Qcs,
    TripletControl,
}

#[derive(Clone, Copy, ValueEnum)]
enum MatrixArg {
    S,
    D,
    Sd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ResidualArg {
    None,
    Gap,
    Bp,
    Vit,
}

#[derive(Clone, Copy, ValueEnum)]
enum DistillArg {
    None,
    Kl,
    L2,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttentionArg {
    Csa,
    Sdpa,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    Tanh,
    Matmul,
    Softmax,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (from gen-data) or a training split file.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint.json, train_log.csv and config.toml.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory or split file.
    #[arg(long)]
    data: PathBuf,
    /// Which split to read when --data is a directory.
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Write confusion.csv here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory or split file holding the images.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Image indices; the first is the key, each later one is paired with it as query.
    #[arg(long, value_delimiter = ',')]
    images: Vec<usize>,
    /// Also emit the class-by-class grid of key-side S maps.
    #[arg(long)]
    grid: bool,
    /// Level used for the class grid.
    #[arg(long, default_value_t = LEVELS - 1)]
    level: usize,
    /// Pixels per map cell in the PGM output.
    #[arg(long, default_value_t = 8)]
    scale: usize,
    #[arg(long, default_value = "heatmaps")]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Dataset directory from gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Experiment matrix: components, matrices, confound or baseline.
    #[arg(long, default_value = "matrices")]
    experiment: String,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    #[arg(long, default_value = "ablation")]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random instances per primitive.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Skip the full model check.
    #[arg(long)]
    no_model: bool,
    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<FaultArg>,
}

#[derive(Args)]
struct CompareGapArgs {
    /// Step log written by train.
    #[arg(long)]
    log: PathBuf,
    /// Write the gap table here instead of only printing it.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<csim::Error> for Failure {
    fn from(e: csim::Error) -> Self {
        match e {
            csim::Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Heatmap(a) => heatmap_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::CompareGap(a) => compare_gap_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn print_config(title: &str, body: &str) {
    println!("# effective {title}");
    print!("{body}");
    println!("# end {title}");
}

fn write_file(path: &Path, body: &[u8]) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, body).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn gen_data(a: GenDataArgs) -> Outcome {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
            DatasetSpec::from_toml(&text)?
        }
        None => DatasetSpec::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { spec.$f = v; })* };
    }
    set!(seed, k, n_train, n_test, rho_train, rho_test, noise_sigma, size, cell, signal_contrast, confound_contrast);
    spec.m = a.m.unwrap_or(if a.k.is_some() { spec.k } else { spec.m });
    spec.validate()?;
    print_config("dataset spec", &spec.to_toml());
    let data = generate_dataset(&spec)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Failure::Runtime(format!("{}: {e}", a.out.display())))?;
    write_split(&data.train, &a.out.join("train.csim"))?;
    write_split(&data.test, &a.out.join("test.csim"))?;
    write_file(&a.out.join("spec.toml"), spec.to_toml().as_bytes())?;
    println!("train {} images sha256 {}", data.train.len(), split_digest(&data.train));
    println!("test {} images sha256 {}", data.test.len(), split_digest(&data.test));
    println!("dataset sha256 {}", dataset_digest(&data));
    println!("wrote {}", a.out.display());
    Ok(())
}

fn split_path(data: &Path, which: SplitArg) -> PathBuf {
    if data.is_dir() {
        data.join(match which {
            SplitArg::Train => "train.csim",
            SplitArg::Test => "test.csim",
        })
    } else {
        data.to_path_buf()
    }
}

fn load_split(data: &Path, which: SplitArg) -> Result<Split, Failure> {
    let path = split_path(data, which);
    if !path.exists() {
        return Err(Failure::Runtime(format!("dataset file {} does not exist", path.display())));
    }
    Ok(read_split(&path)?)
}

fn build_config(a: &ConfigArgs, train_split: &Split) -> Result<TrainConfig, Failure> {
    let mut c = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($f:ident => $($path:ident).+),*) => { $(if let Some(v) = a.$f { c.$($path).+ = v; })* };
    }
    set!(seed => seed, epochs => epochs, batch_size => batch_size, steps_per_epoch => steps_per_epoch,
        lr_decay => lr_decay, patience => patience, val_fraction => val_fraction, lr => optimizer.lr,
        gamma => model.gamma, lambda1 => loss.lambda1, channels => model.channels, patch => model.patch,
        dropout => model.dropout);
    if let Some(ch) = a.channels {
        c.model.qk_dim = ch;
    }
    if let Some(t) = a.topology {
        c.model.topology = match t {
            TopologyArg::Baseline => Topology::Baseline,
            TopologyArg::Dcs => Topology::Dcs,
            TopologyArg::Qcs => Topology::Qcs,
            TopologyArg::TripletControl => Topology::TripletControl,
        };
        // dcs has no inter-class pairing, so only the S matrix applies
        if t == TopologyArg::Dcs && a.matrix.is_none() {
            c.model.matrix_mode = MatrixMode::S;
        }
    }
    if let Some(m) = a.matrix {
        c.model.matrix_mode = match m {
            MatrixArg::S => MatrixMode::S,
            MatrixArg::D => MatrixMode::D,
            MatrixArg::Sd => MatrixMode::SD,
        };
    }
    if let Some(r) = a.residual {
        c.model.residual = match r {
            ResidualArg::None => ResidualKind::None,
            ResidualArg::Gap => ResidualKind::Gap,
            ResidualArg::Bp => ResidualKind::Bp,
            ResidualArg::Vit => ResidualKind::Vit,
        };
    }
    if let Some(d) = a.distill {
        c.loss = c.loss.with_distill(match d {
            DistillArg::None => Distill::None,
            DistillArg::Kl => Distill::Kl,
            DistillArg::L2 => Distill::L2,
        });
    }
    if let Some(at) = a.attention {
        c.model.attention = match at {
            AttentionArg::Csa => AttentionKind::Csa,
            AttentionArg::Sdpa => AttentionKind::Sdpa,
        };
    }
    if a.freeze_negative {
        c.model.freeze_negative = true;
    }
    // image size and class count always follow the data
    c.model.image_size = train_split.size;
    c.model.num_classes = train_split.num_classes;
    c.validate()?;
    Ok(c)
}

fn print_metrics(label: &str, m: &Metrics) {
    println!("{label} accuracy {:.4}", m.accuracy);
    let per: Vec<String> = m
        .per_class
        .iter()
        .map(|a| a.map_or_else(|| "-".into(), |v| format!("{v:.3}")))
        .collect();
    println!("{label} per-class {}", per.join(" "));
}

fn confusion_csv(m: &Metrics) -> String {
    let k = m.confusion.len();
    let mut s = String::from("true");
    for p in 0..k {
        s.push_str(&format!(",pred_{p}"));
    }
    s.push('\n');
    for (t, row) in m.confusion.iter().enumerate() {
        s.push_str(&t.to_string());
        for n in row {
            s.push_str(&format!(",{n}"));
        }
        s.push('\n');
    }
    s
}

fn train_cmd(a: TrainArgs) -> Outcome {
    let train_split = load_split(&a.data, SplitArg::Train)?;
    let config = build_config(&a.config, &train_split)?;
    print_config("train config", &config.to_toml());
    let out = train(&config, &train_split)?;
    write_file(&a.out.join("config.toml"), config.to_toml().as_bytes())?;
    checkpoint::save(&out.model, &a.out.join("checkpoint.json"))?;
    out.log.write(&a.out.join("train_log.csv"))?;
    println!(
        "epochs run {}, selected epoch {}, validation accuracy {}",
        out.epochs_run,
        out.best_epoch,
        out.best_val_acc.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
    );
    if let Some(th) = out.log.records.last().map(|r| &r.theta).filter(|t| !t.is_empty()) {
        println!("final theta {th:?}");
    }
    let test_path = split_path(&a.data, SplitArg::Test);
    if a.data.is_dir() && test_path.exists() {
        let m = evaluate(&out.model, &read_split(&test_path)?)?;
        print_metrics("test", &m);
        write_file(&a.out.join("confusion.csv"), confusion_csv(&m).as_bytes())?;
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Outcome {
    let model = checkpoint::load(&a.checkpoint)?;
    let split = load_split(&a.data, a.split)?;
    let m = evaluate(&model, &split)?;
    print_metrics("eval", &m);
    print!("{}", confusion_csv(&m));
    if let Some(out) = a.out {
        write_file(&out.join("confusion.csv"), confusion_csv(&m).as_bytes())?;
    }
    Ok(())
}

fn heatmap_cmd(a: HeatmapArgs) -> Outcome {
    if a.images.len() < 2 && !a.grid {
        return Err(Failure::Usage("heatmap needs at least two image indices (--images KEY,QUERY[,...])".into()));
    }
    if a.scale == 0 || a.level >= LEVELS {
        return Err(Failure::Usage(format!("--scale must be positive and --level below {LEVELS}")));
    }
    let model: Model = checkpoint::load(&a.checkpoint)?;
    let split = load_split(&a.data, a.split)?;
    if let Some(&bad) = a.images.iter().find(|&&i| i >= split.len()) {
        return Err(Failure::Usage(format!("image index {bad} out of range for {} images", split.len())));
    }
    println!("# effective heatmap settings");
    println!("images = {:?}\ngrid = {}\nlevel = {}\nscale = {}\nnormalization = per-map min-max", a.images, a.grid, a.level, a.scale);
    if let Some((&key, queries)) = a.images.split_first() {
        for &q in queries {
            let maps = pair_heatmaps(&model, &split.images[key], &split.images[q])?;
            let files = write_heatmaps(&a.out, &format!("pair_{key}_{q}"), &maps, a.scale)?;
            println!("pair {key} {q}: {} files", files.len());
        }
    }
    if a.grid {
        let grid = heatmap_grid(&model, &split, a.level)?;
        grid.write(&a.out, a.scale)?;
        println!("grid {}x{} at level {}", grid.classes, grid.classes, a.level);
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> Outcome {
    let matrix = ExperimentMatrix::by_name(&a.experiment)?;
    let train_split = load_split(&a.data, SplitArg::Train)?;
    let test_split = load_split(&a.data, SplitArg::Test)?;
    let base = build_config(&a.config, &train_split)?;
    let spec_path = a.data.join("spec.toml");
    let spec = match std::fs::read_to_string(&spec_path) {
        Ok(text) => DatasetSpec::from_toml(&text)?,
        Err(_) => DatasetSpec::default(),
    };
    let data = csim::data::Dataset {
        spec,
        train: train_split,
        test: test_split,
    };
    let threads = thread_cap()?;
    print_config("base config", &base.to_toml());
    println!("matrix = {:?}\nseeds = {:?}\nthreads = {}", matrix.name, a.seeds, threads.map_or("all".into(), |n| n.to_string()));
    for row in &matrix.rows {
        let axes: Vec<String> = row.deltas.iter().map(|d| format!("{}={}", d.axis(), d.value())).collect();
        println!("row {} [{}]", row.id, axes.join(" "));
    }
    let res = run_ablation(&matrix, &base, &data, &a.seeds)?;
    res.write(&a.out)?;
    for r in &res.rows {
        let failed = r.runs.iter().filter(|x| x.error.is_some()).count();
        match (r.mean, r.sd) {
            (Some(m), Some(s)) => println!("{:<16} {m:.4} ± {s:.4}  ({} runs, {failed} failed)", r.id, r.runs.len()),
            (Some(m), None) => println!("{:<16} {m:.4}  ({} runs, {failed} failed)", r.id, r.runs.len()),
            _ => println!("{:<16} -  (all {} runs failed)", r.id, r.runs.len()),
        }
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Outcome {
    let fault = match a.inject_fault {
        None => Fault::None,
        Some(FaultArg::Tanh) => Fault::Tanh,
        Some(FaultArg::Matmul) => Fault::MatMul,
        Some(FaultArg::Softmax) => Fault::Softmax,
    };
    println!("# effective gradcheck settings\nseeds = {}\nmodel = {}", a.seeds, !a.no_model);
    let report = run_gradcheck_suite(SuiteOptions {
        seeds: a.seeds,
        model: !a.no_model,
        fault,
    })?;
    let mut worst: BTreeMap<&str, (f64, bool)> = BTreeMap::new();
    for e in &report.entries {
        let w = worst.entry(e.case.as_str()).or_insert((0.0, true));
        w.0 = w.0.max(e.report.max_rel_err());
        w.1 &= e.report.passed();
    }
    for (case, (err, ok)) in &worst {
        println!("{} {case:<24} max rel err {err:.2e}", if *ok { "PASS" } else { "FAIL" });
    }
    for (name, g) in &report.mode_s_theta_grad {
        let note = if *g == 0.0 { "exactly zero" } else { "NONZERO" };
        println!("theta gradient under matrix mode s: {name} = {g:e} ({note})");
    }
    println!("elapsed {:.1}s, max rel err {:.2e}", report.elapsed.as_secs_f64(), report.max_rel_err());
    let failures = report.failures();
    let theta_ok = report.mode_s_theta_grad.iter().all(|(_, g)| *g == 0.0);
    if failures.is_empty() && theta_ok {
        println!("gradcheck PASS");
        return Ok(());
    }
    for (case, seed, param, err) in &failures {
        println!("FAIL {case} seed {seed} parameter {param} rel err {err:.2e}");
    }
    Err(Failure::Runtime(format!(
        "gradcheck FAIL: {} offending parameter checks{}",
        failures.len(),
        if theta_ok { "" } else { ", nonzero theta gradient under mode s" }
    )))
}

fn compare_gap_cmd(a: CompareGapArgs) -> Outcome {
    let log = TrainLog::read(&a.log)?;
    let rows = compare_cls_gap(&log)?;
    let csv = gap_csv(&rows);
    print!("{csv}");
    if let Some(out) = a.out {
        write_file(&out, csv.as_bytes())?;
    }
    Ok(())
}
