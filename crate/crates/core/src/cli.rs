//! The `dien` command line.
//!
//! Settings resolve in this order, later winning: built-in defaults, the
//! config file's top (unsectioned) block, the file's section named after
//! the subcommand, then command-line flags. Every run writes the resolved
//! settings to `config.txt` in its output directory; passing that file back
//! with `--config` reproduces the run.
//!
//! Exit codes: 0 success, 1 invalid configuration or input, 2 runtime
//! failure (I/O, divergence, failed gradient check).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{parse_corpus, synth_generate, Corpus, SynthConfig};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate, export_viz, planted_probes, repeat_eval, viz_findings, write_metrics, write_summary, EvalReport,
};
use crate::model::ModelVariant;
use crate::training::{grad_check, parse_value, toy_config, train, write_curves, Checkpoint, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "dien", version, about = "Deep Interest Evolution Network for CTR prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Default, Args)]
pub struct Shared {
    /// Config file with `key = value` lines and `[command]` sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Clone, Debug, Default, Args)]
pub struct TrainFlags {
    /// TSV corpus; a synthetic corpus is generated when omitted.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic interest-drift corpus.
    Synth {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        n_users: Option<usize>,
        #[arg(long)]
        n_items: Option<usize>,
        #[arg(long)]
        n_cats: Option<usize>,
        #[arg(long)]
        drift_prob: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train one model; writes checkpoint.txt and curves.csv.
    Train {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Score a checkpoint on the test split, or run the repeat protocol without one.
    Eval {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Repeat-protocol comparison of several variants on one corpus.
    Ablation {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        flags: TrainFlags,
        /// Comma-separated variant names.
        #[arg(long)]
        variants: Option<String>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Compare analytic and finite-difference gradients on a toy batch.
    Gradcheck {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Export attention rows and PCA trajectories of evolved interests.
    Viz {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Ablation { .. } => "ablation",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Viz { .. } => "viz",
        }
    }

    fn shared(&self) -> &Shared {
        match self {
            Command::Synth { shared, .. }
            | Command::Train { shared, .. }
            | Command::Eval { shared, .. }
            | Command::Ablation { shared, .. }
            | Command::Gradcheck { shared, .. }
            | Command::Viz { shared, .. } => shared,
        }
    }
}

const SYNTH_KEYS: [&str; 7] = ["n_users", "n_items", "n_cats", "t", "drift_prob", "noise", "seed"];
const PATH_KEYS: [&str; 3] = ["out", "corpus", "checkpoint"];
const RUN_KEYS: [&str; 4] = ["variants", "repeats", "tolerance", "epsilon"];

/// Config file contents: the top block plus named sections.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    pub sections: BTreeMap<String, Vec<(String, String)>>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<ConfigFile> {
        let mut sections: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
        let mut current = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| Error::Parse {
                line: n + 1,
                column: 1,
                reason,
            };
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("unterminated section header `{line}`")))?
                    .trim();
                if !["synth", "train", "eval", "ablation", "gradcheck", "viz"].contains(&name) {
                    return Err(err(format!("unknown section `[{name}]`")));
                }
                current = name.to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, found `{line}`")))?;
            let key = k.trim().to_string();
            if !known_key(&key) {
                return Err(err(format!("unknown key `{key}`")));
            }
            sections.entry(current.clone()).or_default().push((key, v.trim().to_string()));
        }
        Ok(ConfigFile { sections })
    }

    fn entries_for(&self, command: &str) -> impl Iterator<Item = &(String, String)> {
        let top = self.sections.get("").into_iter().flatten();
        let own = self.sections.get(command).into_iter().flatten();
        top.chain(own)
    }
}

fn known_key(key: &str) -> bool {
    TrainConfig::KEYS.contains(&key)
        || SYNTH_KEYS.contains(&key)
        || PATH_KEYS.contains(&key)
        || RUN_KEYS.contains(&key)
        || key == "synth_seed"
}

/// Fully resolved settings of one invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: String,
    pub out: PathBuf,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub variants: Vec<ModelVariant>,
    pub repeats: usize,
    pub tolerance: f64,
    pub epsilon: f64,
}

impl RunConfig {
    fn defaults(command: &str) -> RunConfig {
        let train = if command == "gradcheck" {
            toy_config(ModelVariant::Dien, 1)
        } else {
            TrainConfig::default()
        };
        RunConfig {
            command: command.to_string(),
            out: PathBuf::from("out"),
            train,
            synth: SynthConfig::default(),
            corpus: None,
            checkpoint: None,
            variants: ModelVariant::ALL.to_vec(),
            repeats: 5,
            tolerance: 1e-4,
            epsilon: 1e-5,
        }
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let synth_cmd = self.command == "synth";
        match key {
            "out" => self.out = PathBuf::from(value),
            "corpus" => self.corpus = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "repeats" => self.repeats = parse_value(key, value)?,
            "tolerance" => self.tolerance = parse_value(key, value)?,
            "epsilon" => self.epsilon = parse_value(key, value)?,
            "variants" => {
                self.variants = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "n_users" => self.synth.n_users = parse_value(key, value)?,
            "n_items" => self.synth.n_items = parse_value(key, value)?,
            "n_cats" => self.synth.n_cats = parse_value(key, value)?,
            "t" => self.synth.t = parse_value(key, value)?,
            "drift_prob" => self.synth.drift_prob = parse_value(key, value)?,
            "noise" => self.synth.noise = parse_value(key, value)?,
            "synth_seed" => self.synth.seed = parse_value(key, value)?,
            "seed" if synth_cmd => self.synth.seed = parse_value(key, value)?,
            _ => self.train.set(key, value)?,
        }
        Ok(())
    }

    /// Checks every setting the command will use.
    pub fn validate(&self) -> Result<()> {
        let needs_synth = self.command == "synth"
            || (self.corpus.is_none() && ["train", "eval", "ablation"].contains(&self.command.as_str()));
        if needs_synth {
            self.synth.validate()?;
        }
        match self.command.as_str() {
            "train" => self.train.validate()?,
            "eval" => {
                if self.checkpoint.is_none() {
                    self.train.validate()?;
                    if self.repeats == 0 {
                        return Err(Error::config("repeats must be at least 1"));
                    }
                }
            }
            "ablation" => {
                if self.variants.is_empty() {
                    return Err(Error::config("ablation needs at least one variant"));
                }
                for (i, v) in self.variants.iter().enumerate() {
                    if self.variants[..i].contains(v) {
                        return Err(Error::config(format!("variant {v} is listed twice")));
                    }
                    TrainConfig {
                        variant: *v,
                        ..self.train.clone()
                    }
                    .validate()?;
                }
                if self.repeats == 0 {
                    return Err(Error::config("repeats must be at least 1"));
                }
            }
            "gradcheck" => {
                self.train.validate()?;
                if !(self.tolerance >= 0.0) {
                    return Err(Error::config("tolerance must be non-negative"));
                }
                if !(self.epsilon > 0.0) {
                    return Err(Error::config("epsilon must be positive"));
                }
            }
            "viz" => {
                if self.checkpoint.is_none() {
                    return Err(Error::config("viz needs --checkpoint"));
                }
                if self.train.workers == 0 {
                    return Err(Error::config("workers must be positive"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// The settings as a config file that reproduces this run.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[{}]", self.command);
        let _ = writeln!(s, "out = {}", self.out.display());
        let synth = |s: &mut String, seed_key: &str| {
            let c = &self.synth;
            let _ = writeln!(s, "n_users = {}", c.n_users);
            let _ = writeln!(s, "n_items = {}", c.n_items);
            let _ = writeln!(s, "n_cats = {}", c.n_cats);
            let _ = writeln!(s, "t = {}", c.t);
            let _ = writeln!(s, "drift_prob = {:?}", c.drift_prob);
            let _ = writeln!(s, "noise = {:?}", c.noise);
            let _ = writeln!(s, "{seed_key} = {}", c.seed);
        };
        if self.command == "synth" {
            synth(&mut s, "seed");
            return s;
        }
        match &self.corpus {
            Some(p) => {
                let _ = writeln!(s, "corpus = {}", p.display());
            }
            None if self.command != "gradcheck" && self.command != "viz" => synth(&mut s, "synth_seed"),
            None => {}
        }
        if let Some(p) = &self.checkpoint {
            let _ = writeln!(s, "checkpoint = {}", p.display());
        }
        match self.command.as_str() {
            "ablation" => {
                let names: Vec<String> = self.variants.iter().map(|v| v.to_string()).collect();
                let _ = writeln!(s, "variants = {}", names.join(","));
                let _ = writeln!(s, "repeats = {}", self.repeats);
            }
            "eval" => {
                let _ = writeln!(s, "repeats = {}", self.repeats);
            }
            "gradcheck" => {
                let _ = writeln!(s, "tolerance = {:?}", self.tolerance);
                let _ = writeln!(s, "epsilon = {:?}", self.epsilon);
            }
            _ => {}
        }
        for (k, v) in self.train.entries() {
            if self.command == "ablation" && k == "variant" {
                continue;
            }
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

fn set_opt<T: ToString>(cfg: &mut RunConfig, key: &str, value: &Option<T>) -> Result<()> {
    match value {
        Some(v) => cfg.set(key, &v.to_string()),
        None => Ok(()),
    }
}

fn apply_train_flags(cfg: &mut RunConfig, f: &TrainFlags) -> Result<()> {
    if let Some(p) = &f.corpus {
        cfg.corpus = Some(p.clone());
    }
    set_opt(cfg, "variant", &f.variant)?;
    set_opt(cfg, "epochs", &f.epochs)?;
    set_opt(cfg, "batch_size", &f.batch_size)?;
    set_opt(cfg, "alpha", &f.alpha.map(|a| format!("{a:?}")))?;
    set_opt(cfg, "learning_rate", &f.learning_rate.map(|a| format!("{a:?}")))
}

/// Resolves defaults, config file and flags, and validates the result.
pub fn resolve(command: &Command) -> Result<RunConfig> {
    let name = command.name();
    let mut cfg = RunConfig::defaults(name);
    let shared = command.shared();
    if let Some(path) = &shared.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file = ConfigFile::parse(&text)?;
        for (k, v) in file.entries_for(name) {
            cfg.set(k, v)?;
        }
    }
    if let Some(out) = &shared.out {
        cfg.out = out.clone();
    }
    set_opt(&mut cfg, "seed", &shared.seed)?;
    set_opt(&mut cfg, "workers", &shared.workers)?;
    match command {
        Command::Synth {
            n_users,
            n_items,
            n_cats,
            drift_prob,
            noise,
            ..
        } => {
            set_opt(&mut cfg, "n_users", n_users)?;
            set_opt(&mut cfg, "n_items", n_items)?;
            set_opt(&mut cfg, "n_cats", n_cats)?;
            set_opt(&mut cfg, "drift_prob", &drift_prob.map(|a| format!("{a:?}")))?;
            set_opt(&mut cfg, "noise", &noise.map(|a| format!("{a:?}")))?;
        }
        Command::Train { flags, .. } => apply_train_flags(&mut cfg, flags)?,
        Command::Eval {
            flags,
            checkpoint,
            repeats,
            ..
        } => {
            apply_train_flags(&mut cfg, flags)?;
            if let Some(p) = checkpoint {
                cfg.checkpoint = Some(p.clone());
            }
            set_opt(&mut cfg, "repeats", repeats)?;
        }
        Command::Ablation {
            flags,
            variants,
            repeats,
            ..
        } => {
            apply_train_flags(&mut cfg, flags)?;
            set_opt(&mut cfg, "variants", variants)?;
            set_opt(&mut cfg, "repeats", repeats)?;
        }
        Command::Gradcheck {
            variant,
            tolerance,
            epsilon,
            ..
        } => {
            set_opt(&mut cfg, "variant", variant)?;
            set_opt(&mut cfg, "tolerance", &tolerance.map(|a| format!("{a:?}")))?;
            set_opt(&mut cfg, "epsilon", &epsilon.map(|a| format!("{a:?}")))?;
        }
        Command::Viz {
            checkpoint, corpus, ..
        } => {
            if let Some(p) = checkpoint {
                cfg.checkpoint = Some(p.clone());
            }
            if let Some(p) = corpus {
                cfg.corpus = Some(p.clone());
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Usage(_) | Error::Parse { .. } | Error::EmptyCorpus | Error::Vocabulary { .. } => 1,
        _ => 2,
    }
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    match &cfg.corpus {
        Some(p) => parse_corpus(p),
        None => synth_generate(&cfg.synth),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    write_text(&cfg.out.join("config.txt"), &cfg.echo())
}

/// Executes a resolved configuration.
pub fn execute(cfg: &RunConfig) -> Result<()> {
    match cfg.command.as_str() {
        "synth" => {
            let corpus = synth_generate(&cfg.synth)?;
            prepare_out(cfg)?;
            corpus.write_tsv(&cfg.out.join("corpus.tsv"))?;
            write_text(&cfg.out.join("corpus.provenance.txt"), &format!("{}\n", corpus.provenance))?;
            log::info!("wrote {} instances to {}", corpus.instances.len(), cfg.out.join("corpus.tsv").display());
        }
        "train" => {
            let corpus = load_corpus(cfg)?;
            prepare_out(cfg)?;
            let outcome = train(&corpus, &cfg.train)?;
            outcome.checkpoint.save(&cfg.out.join("checkpoint.txt"))?;
            write_curves(&cfg.out.join("curves.csv"), &outcome.curve)?;
        }
        "eval" => {
            let corpus = load_corpus(cfg)?;
            let report = match &cfg.checkpoint {
                Some(path) => {
                    let ck = Checkpoint::load(path)?;
                    prepare_out(cfg)?;
                    let a = evaluate(&ck.model, &corpus.test, ck.config.max_history, cfg.train.workers)?;
                    let n_pos = corpus.test.iter().filter(|i| i.label == 1).count();
                    EvalReport {
                        variant: ck.config.variant,
                        auc: a,
                        n_pos,
                        n_neg: corpus.test.len() - n_pos,
                        seeds: vec![ck.config.seed],
                        aucs: vec![a],
                        mean: a,
                        std: 0.0,
                    }
                }
                None => {
                    prepare_out(cfg)?;
                    repeat_eval(&corpus, &cfg.train, cfg.repeats)?
                }
            };
            write_metrics(&cfg.out.join("metrics.csv"), std::slice::from_ref(&report))?;
            write_summary(&cfg.out.join("summary.csv"), std::slice::from_ref(&report))?;
            log::info!("{}: mean AUC {:.5} ± {:.5}", report.variant, report.mean, report.std);
        }
        "ablation" => {
            let corpus = load_corpus(cfg)?;
            prepare_out(cfg)?;
            let mut reports = Vec::new();
            for &variant in &cfg.variants {
                let tc = TrainConfig {
                    variant,
                    ..cfg.train.clone()
                };
                reports.push(repeat_eval(&corpus, &tc, cfg.repeats)?);
                write_metrics(&cfg.out.join("metrics.csv"), &reports)?;
                write_summary(&cfg.out.join("summary.csv"), &reports)?;
            }
        }
        "gradcheck" => {
            prepare_out(cfg)?;
            let report = grad_check(&cfg.train, cfg.tolerance, cfg.epsilon)?;
            write_text(&cfg.out.join("gradcheck.txt"), &format!("{report}\n"))?;
            println!("{report}");
            if !report.passed() {
                return Err(Error::Numeric {
                    coordinate: 0,
                    value: report.groups.iter().map(|g| g.max_relative).fold(0.0, f64::max),
                });
            }
        }
        "viz" => {
            let path = cfg.checkpoint.as_ref().expect("validated");
            let ck = Checkpoint::load(path)?;
            if !matches!(ck.model.variant.stack_mode(), Some(crate::recurrent::StackMode::Evolve(_))) {
                return Err(Error::config(format!("{} has no interest evolving layer to visualize", ck.model.variant)));
            }
            let corpus = load_corpus(cfg)?;
            let history_len = corpus
                .train
                .first()
                .map_or(9, |i| i.history_len())
                .min(ck.config.max_history);
            let (history, probes) = planted_probes(&corpus, history_len, cfg.train.seed)?;
            prepare_out(cfg)?;
            let bundle = export_viz(&ck.model, &history, &probes)?;
            bundle.write_csvs(&cfg.out.join("viz_trajectories.csv"), &cfg.out.join("viz_attention.csv"))?;
            let f = viz_findings(&bundle)?;
            log::info!(
                "related probe peaks at last step: {}; distance to None: related {:.4}, unrelated {:.4}",
                f.related_peaks_at_last,
                f.related_distance,
                f.unrelated_distance
            );
        }
        other => return Err(Error::Usage(format!("unknown command `{other}`"))),
    }
    Ok(())
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = resolve(&cli.command).and_then(|cfg| execute(&cfg));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Result<RunConfig> {
        let cli = Cli::try_parse_from(std::iter::once("dien").chain(args.iter().copied())).unwrap();
        resolve(&cli.command)
    }

    #[test]
    fn config_file_sections_and_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(
            &path,
            "# shared\nepochs = 3\nseed = 9\n\n[train]\nepochs = 5\nvariant = GRU_AUGRU\n[synth]\nn_users = 50\n",
        )
        .unwrap();
        let p = path.to_str().unwrap();
        let train = parse(&["train", "--config", p]).unwrap();
        assert_eq!(train.train.epochs, 5);
        assert_eq!(train.train.seed, 9);
        assert_eq!(train.train.variant, ModelVariant::GruAugru);
        assert_eq!(train.synth.n_users, SynthConfig::default().n_users);
        let flagged = parse(&["train", "--config", p, "--epochs", "7", "--seed", "2"]).unwrap();
        assert_eq!((flagged.train.epochs, flagged.train.seed), (7, 2));
        let synth = parse(&["synth", "--config", p]).unwrap();
        assert_eq!(synth.synth.n_users, 50);
        assert_eq!(synth.synth.seed, 9);
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        assert!(matches!(ConfigFile::parse("epochz = 3\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(ConfigFile::parse("[training]\n"), Err(Error::Parse { .. })));
        assert!(matches!(ConfigFile::parse("epochs 3\n"), Err(Error::Parse { .. })));
    }

    #[test]
    fn validation_errors_map_to_exit_code_one() {
        let e = parse(&["synth", "--drift-prob", "1.5"]).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        assert_eq!(exit_code(&e), 1);
        let e = parse(&["ablation", "--variants", "BASE,DIEN,BASE"]).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        assert!(parse(&["train", "--variant", "DIN"]).is_err());
        assert_eq!(
            exit_code(&Error::Divergence {
                epoch: 1,
                step: 1,
                detail: String::new()
            }),
            2
        );
    }

    #[test]
    fn echo_reproduces_the_configuration() {
        for args in [
            vec!["train", "--variant", "BASE", "--alpha", "0.5", "--seed", "4"],
            vec!["ablation", "--variants", "BASE,DIEN", "--repeats", "2"],
            vec!["synth", "--n-users", "30", "--seed", "3"],
            vec!["gradcheck", "--variant", "GRU_AGRU", "--tolerance", "1e-3"],
        ] {
            let cfg = parse(&args).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("config.txt");
            fs::write(&path, cfg.echo()).unwrap();
            let again = parse(&[args[0], "--config", path.to_str().unwrap()]).unwrap();
            assert_eq!(again, cfg, "{args:?}");
        }
    }

    #[test]
    fn gradcheck_defaults_to_toy_dimensions() {
        let cfg = parse(&["gradcheck"]).unwrap();
        assert_eq!(cfg.train.hidden_dim, 4);
        assert_eq!(cfg.train.embedding_dim, 2);
        assert_eq!(cfg.train.max_history, 5);
    }
}
