//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. Every run writes
//! `config.echo`, a flag line that reproduces it.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{longtail_counts, synth_train_test, Dataset, SimilarityPair, SynthConfig};
use crate::error::{Error, Result};
use crate::reflect::spearman;
use crate::trainer::{ablation_grid, run_experiment, sibling_test_path, LtrLoss, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "reflearn", version, about = "Reflective learning for long-tail classification")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a long-tail training set and a balanced test set
    Synth(SynthArgs),
    /// Train one configuration and write metrics
    Train(TrainArgs),
    /// Run the 2x2x2 review/summary/correction grid over several seeds
    Ablate(AblateArgs),
    /// Summarise per-class adjacent-epoch KL of a finished run
    AnalyzeKl(AnalyzeKlArgs),
    /// Summarise per-layer gradient conflicts of a finished run
    AnalyzeConflicts(AnalyzeConflictsArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long = "n-max", default_value_t = 500)]
    pub n_max: usize,
    /// Imbalance factor n_max / n_min
    #[arg(long = "if", default_value_t = 100.0)]
    pub imbalance: f64,
    #[arg(long = "class-sep", default_value_t = 3.0)]
    pub class_sep: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    /// Number of head/tail pairs with overlapping centers
    #[arg(long, default_value_t = 4)]
    pub pairs: usize,
    #[arg(long, default_value_t = 0.8)]
    pub overlap: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "test-per-class", default_value_t = 100)]
    pub test_per_class: usize,
    /// Training file; the test set goes to <stem>.test.ltds alongside it
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LtrArg {
    Ce,
    Bsce,
}

#[derive(Debug, Clone, Args)]
pub struct CommonTrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Balanced test set (default: <data stem>.test.ltds)
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = LtrArg::Ce)]
    pub ltr: LtrArg,
    #[arg(long, default_value_t = 2.0)]
    pub tau: f64,
    #[arg(long, default_value_t = 0.9)]
    pub alpha: f64,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "sigma-aug", default_value_t = 0.5)]
    pub sigma_aug: f64,
    /// Hidden width; 0 trains a linear classifier
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    /// Rescale soft-label rows to sum to one
    #[arg(long = "normalize-soft-labels")]
    pub normalize_soft_labels: bool,
    /// Use the cosine-scaled projection coefficient
    #[arg(long = "literal-projection")]
    pub literal_projection: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonTrainArgs,
    /// Knowledge review (distillation from last epoch's correct predictions)
    #[arg(long)]
    pub kr: bool,
    /// Knowledge summary (class-similarity soft labels)
    #[arg(long)]
    pub ks: bool,
    /// Knowledge correction (gradient conflict projection)
    #[arg(long)]
    pub kc: bool,
    /// Review with logit MSE instead of distillation
    #[arg(long = "mse-ablation", conflicts_with = "kr")]
    pub mse_ablation: bool,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonTrainArgs,
    /// Seeds per cell, starting at --seed
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeKlArgs {
    /// Output directory of a finished train run
    #[arg(long)]
    pub run: PathBuf,
    /// Training set of that run (class counts define rarity)
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeConflictsArgs {
    #[arg(long)]
    pub run: PathBuf,
}

impl CommonTrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            ltr_loss: match self.ltr {
                LtrArg::Ce => LtrLoss::Ce,
                LtrArg::Bsce => LtrLoss::Bsce,
            },
            tau: self.tau,
            alpha: self.alpha,
            normalize_soft_labels: self.normalize_soft_labels,
            literal_projection: self.literal_projection,
            epochs: self.epochs,
            batch_size: self.batch,
            hidden_dim: self.hidden,
            lr: self.lr,
            momentum: self.momentum,
            sigma_aug: self.sigma_aug,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    fn test_path(&self) -> PathBuf {
        self.test.clone().unwrap_or_else(|| sibling_test_path(&self.data))
    }

    fn echo_into(&self, out: &mut Vec<String>) {
        let mut push = |k: &str, v: String| {
            out.push(k.to_string());
            out.push(v);
        };
        push("--data", quote(&self.data));
        push("--test", quote(&self.test_path()));
        push("--out", quote(&self.out));
        push("--ltr", self.ltr.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default());
        push("--tau", self.tau.to_string());
        push("--alpha", self.alpha.to_string());
        push("--epochs", self.epochs.to_string());
        push("--batch", self.batch.to_string());
        push("--lr", self.lr.to_string());
        push("--momentum", self.momentum.to_string());
        push("--seed", self.seed.to_string());
        push("--sigma-aug", self.sigma_aug.to_string());
        push("--hidden", self.hidden.to_string());
        if self.normalize_soft_labels {
            out.push("--normalize-soft-labels".into());
        }
        if self.literal_projection {
            out.push("--literal-projection".into());
        }
    }
}

fn quote(p: &Path) -> String {
    let s = p.display().to_string();
    if s.chars().any(|c| c.is_whitespace() || c == '\'' || c == '"') {
        format!("'{}'", s.replace('\'', r"'\''"))
    } else {
        s
    }
}

impl TrainArgs {
    pub fn config(&self) -> TrainConfig {
        TrainConfig {
            use_kr: self.kr,
            use_ks: self.ks,
            use_kc: self.kc,
            use_mse_ablation: self.mse_ablation,
            ..self.common.config()
        }
    }

    /// Fully resolved flag line that reproduces this run.
    pub fn echo(&self) -> String {
        let mut out = vec!["train".to_string()];
        self.common.echo_into(&mut out);
        for (on, flag) in [(self.kr, "--kr"), (self.ks, "--ks"), (self.kc, "--kc"), (self.mse_ablation, "--mse-ablation")] {
            if on {
                out.push(flag.into());
            }
        }
        out.join(" ")
    }
}

impl AblateArgs {
    pub fn echo(&self) -> String {
        let mut out = vec!["ablate".to_string()];
        self.common.echo_into(&mut out);
        out.push("--seeds".into());
        out.push(self.seeds.to_string());
        out.join(" ")
    }
}

impl SynthArgs {
    pub fn config(&self) -> Result<SynthConfig> {
        Ok(SynthConfig {
            dim: self.dim,
            counts: longtail_counts(self.classes, self.n_max, self.imbalance)?,
            class_sep: self.class_sep,
            noise_sigma: self.noise,
            pairs: SimilarityPair::mirrored(self.classes, self.pairs, self.overlap),
            seed: self.seed,
        })
    }

    pub fn echo(&self) -> String {
        format!(
            "synth --classes {} --dim {} --n-max {} --if {} --class-sep {} --noise {} --pairs {} --overlap {} --seed {} --test-per-class {} --out {}",
            self.classes,
            self.dim,
            self.n_max,
            self.imbalance,
            self.class_sep,
            self.noise,
            self.pairs,
            self.overlap,
            self.seed,
            self.test_per_class,
            quote(&self.out)
        )
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let cfg = args.config()?;
    let (train, test) = synth_train_test(&cfg, args.test_per_class)?;
    let test_path = sibling_test_path(&args.out);
    train.save(&args.out)?;
    test.save(&test_path)?;
    println!("{}", args.echo());
    println!(
        "wrote {} ({} samples, counts {:?}) and {} ({} samples)",
        args.out.display(),
        train.len(),
        train.class_counts(),
        test_path.display(),
        test.len()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = args.config();
    cfg.validate()?;
    let echo = args.echo();
    println!("{echo}");
    let summary = run_experiment(&cfg, &args.common.data, &args.common.test_path(), &args.common.out)?;
    write(&args.common.out.join("config.echo"), &(echo + "\n"))?;
    let m = &summary.final_metrics;
    println!(
        "epoch {}: all {:.4} many {:.4} medium {:.4} few {:.4}",
        m.epoch, m.acc_all, m.acc_many, m.acc_medium, m.acc_few
    );
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let base = args.common.config();
    base.validate()?;
    if args.seeds == 0 {
        return Err(Error::Parameter("--seeds must be positive".into()));
    }
    let echo = args.echo();
    println!("{echo}");
    let train = Dataset::load(&args.common.data)?;
    let test = Dataset::load(args.common.test_path())?;
    let jobs: Vec<(&Dataset, &Dataset, u64)> =
        (0..args.seeds).map(|k| (&train, &test, base.seed + k)).collect();
    let cells = ablation_grid(&base, &jobs)?;

    let mut csv = String::from("kr,ks,kc,acc_all,acc_many,acc_medium,acc_few\n");
    for c in &cells {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            u8::from(c.use_kr),
            u8::from(c.use_ks),
            u8::from(c.use_kc),
            c.acc_all,
            c.acc_many,
            c.acc_medium,
            c.acc_few
        );
        println!(
            "kr={} ks={} kc={}  all {:.4} many {:.4} medium {:.4} few {:.4}",
            u8::from(c.use_kr),
            u8::from(c.use_ks),
            u8::from(c.use_kc),
            c.acc_all,
            c.acc_many,
            c.acc_medium,
            c.acc_few
        );
    }
    let out = &args.common.out;
    write(&out.join("ablation.csv"), &csv)?;
    let json = serde_json::to_string_pretty(&cells)
        .map_err(|e| Error::State(format!("cannot serialise ablation: {e}")))?;
    write(&out.join("summary.json"), &(json + "\n"))?;
    write(&out.join("config.echo"), &(echo + "\n"))
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parameter(format!("{} is empty", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    Ok((header, rows))
}

fn cmd_analyze_kl(args: &AnalyzeKlArgs) -> Result<()> {
    let train = Dataset::load(&args.data)?;
    let path = args.run.join("class_kl.csv");
    let (header, rows) = read_csv(&path)?;
    let classes = header.len().saturating_sub(1);
    if classes != train.classes() {
        return Err(Error::Parameter(format!(
            "{} has {classes} classes but {} has {}",
            path.display(),
            args.data.display(),
            train.classes()
        )));
    }
    let mut sums = vec![0.0; classes];
    let mut counts = vec![0usize; classes];
    for row in &rows {
        for (c, cell) in row.iter().skip(1).enumerate().take(classes) {
            if cell.is_empty() {
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| {
                Error::Parameter(format!("{}: bad number {cell:?}", path.display()))
            })?;
            sums[c] += v;
            counts[c] += 1;
        }
    }
    let means: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| if n == 0 { f64::NAN } else { s / n as f64 })
        .collect();
    // rarity rank: fewer training samples = rarer
    let rarity: Vec<f64> = train.class_counts().iter().map(|&n| -(n as f64)).collect();
    let present: Vec<usize> = (0..classes).filter(|&c| counts[c] > 0).collect();
    let rho = spearman(
        &present.iter().map(|&c| rarity[c]).collect::<Vec<_>>(),
        &present.iter().map(|&c| means[c]).collect::<Vec<_>>(),
    );
    let mut csv = String::from("class,train_count,mean_kl\n");
    for c in 0..classes {
        let _ = writeln!(csv, "{c},{},{}", train.class_counts()[c], means[c]);
    }
    write(&args.run.join("kl_by_class.csv"), &csv)?;
    let overall = present.iter().map(|&c| means[c]).sum::<f64>() / present.len().max(1) as f64;
    println!("epochs {}  mean per-class KL {overall:.6}  spearman(KL, rarity) {rho:.4}", rows.len());
    Ok(())
}

fn cmd_analyze_conflicts(args: &AnalyzeConflictsArgs) -> Result<()> {
    let path = args.run.join("conflicts.csv");
    let (_, rows) = read_csv(&path)?;
    let mut layers: Vec<(String, usize, usize)> = Vec::new();
    let mut epochs: Vec<(String, f64)> = Vec::new();
    for row in &rows {
        if row.len() != 4 {
            return Err(Error::Parameter(format!("{}: malformed row {row:?}", path.display())));
        }
        let flag = row[2] == "1";
        match layers.iter_mut().find(|l| l.0 == row[1]) {
            Some(l) => {
                l.1 += usize::from(flag);
                l.2 += 1;
            }
            None => layers.push((row[1].clone(), usize::from(flag), 1)),
        }
        if epochs.last().map(|e| &e.0) != Some(&row[0]) {
            let f: f64 = row[3].parse().map_err(|_| {
                Error::Parameter(format!("{}: bad fraction {:?}", path.display(), row[3]))
            })?;
            epochs.push((row[0].clone(), f));
        }
    }
    let mut csv = String::from("layer_name,conflicted_epochs,epochs,rate\n");
    for (name, hits, total) in &layers {
        let _ = writeln!(csv, "{name},{hits},{total},{}", *hits as f64 / *total as f64);
        println!("{name:12} conflicted in {hits}/{total} epochs");
    }
    write(&args.run.join("conflict_summary.csv"), &csv)?;
    let nonzero = epochs.iter().filter(|e| e.1 > 0.0).count();
    println!("epochs with any layer conflict: {nonzero}/{}", epochs.len());
    Ok(())
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::AnalyzeKl(a) => cmd_analyze_kl(a),
        Command::AnalyzeConflicts(a) => cmd_analyze_conflicts(a),
    }
}

/// Parses `argv` (program name first) and runs the command.
pub fn parse_and_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e @ Error::Parameter(_)) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}
