use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bifusion_core::harness::config::RunConfig;
use bifusion_core::harness::suites::{gradcheck, invariance_suite, GRADCHECK_TOL};
use bifusion_core::harness::synth::{generate_synthetic, SynthSpec};
use bifusion_core::harness::train::{checkpoint_config, evaluate, predict, prepare, Trainer};
use bifusion_core::protein::dataset::{read_dataset, save_dataset};
use bifusion_core::protein::pdb::parse_pdb_chains;
use bifusion_core::protein::{build_graph, ProteinGraph};
use bifusion_core::{Error, Level, Task};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "bifusion",
    version,
    about = "Two-branch protein representation learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labeled dataset.
    Gendata(GendataArgs),
    /// Dump the residue graph and geometric features of a PDB file.
    Featurize(FeaturizeArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Predict records with a checkpoint.
    Predict(PredictArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(SeedArgs),
    /// Run the rigid-motion and permutation suite.
    Invariance(InvarianceArgs),
}

#[derive(Args)]
struct GendataArgs {
    #[arg(long, default_value = "mqa")]
    task: Task,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 20)]
    min_len: usize,
    #[arg(long, default_value_t = 40)]
    max_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "base")]
    level: Level,
    #[arg(long, default_value_t = 8)]
    num_classes: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FeaturizeArgs {
    /// PDB file.
    input: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    cutoff: f64,
    #[arg(long, default_value = "base")]
    level: Level,
    /// Comma-separated chain ids; default is the first chain.
    #[arg(long, value_delimiter = ',')]
    chains: Vec<char>,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// One flag per config key.
#[derive(Args, Default)]
struct ConfigFlags {
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    level: Option<String>,
    #[arg(long)]
    cutoff: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    dropout: Option<String>,
    #[arg(long)]
    gnn_layers: Option<String>,
    #[arg(long)]
    plm_layers: Option<String>,
    #[arg(long)]
    hidden_dim: Option<String>,
    #[arg(long)]
    plm_dim: Option<String>,
    #[arg(long)]
    plm_heads: Option<String>,
    #[arg(long)]
    plm_ffn: Option<String>,
    #[arg(long)]
    fusion_heads: Option<String>,
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    rbf_count: Option<String>,
    #[arg(long)]
    seqdist_dim: Option<String>,
    #[arg(long)]
    num_classes: Option<String>,
    #[arg(long)]
    ligand_dim: Option<String>,
    #[arg(long)]
    gaussian_noise: Option<String>,
    #[arg(long)]
    euler_noise: Option<String>,
    #[arg(long)]
    noise_sigma: Option<String>,
    #[arg(long)]
    max_len: Option<String>,
    #[arg(long)]
    freeze_plm: Option<String>,
    #[arg(long)]
    embedding_dim: Option<String>,
    #[arg(long)]
    embeddings: Option<String>,
    #[arg(long)]
    train: Option<String>,
    #[arg(long)]
    val: Option<String>,
    #[arg(long)]
    test: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
}

impl ConfigFlags {
    fn pairs(&self) -> [(&'static str, &Option<String>); 32] {
        [
            ("seed", &self.seed),
            ("task", &self.task),
            ("mode", &self.mode),
            ("level", &self.level),
            ("cutoff", &self.cutoff),
            ("lr", &self.lr),
            ("batch_size", &self.batch_size),
            ("epochs", &self.epochs),
            ("dropout", &self.dropout),
            ("gnn_layers", &self.gnn_layers),
            ("plm_layers", &self.plm_layers),
            ("hidden_dim", &self.hidden_dim),
            ("plm_dim", &self.plm_dim),
            ("plm_heads", &self.plm_heads),
            ("plm_ffn", &self.plm_ffn),
            ("fusion_heads", &self.fusion_heads),
            ("schedule", &self.schedule),
            ("rbf_count", &self.rbf_count),
            ("seqdist_dim", &self.seqdist_dim),
            ("num_classes", &self.num_classes),
            ("ligand_dim", &self.ligand_dim),
            ("gaussian_noise", &self.gaussian_noise),
            ("euler_noise", &self.euler_noise),
            ("noise_sigma", &self.noise_sigma),
            ("max_len", &self.max_len),
            ("freeze_plm", &self.freeze_plm),
            ("embedding_dim", &self.embedding_dim),
            ("embeddings", &self.embeddings),
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
            ("checkpoint", &self.checkpoint),
        ]
    }

    fn apply(&self, cfg: &mut RunConfig) -> Result<(), Error> {
        for (key, value) in self.pairs() {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        Ok(())
    }
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint; its stored config is the base.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Args)]
struct EvalArgs {
    /// `key = value` config file; defaults to the checkpoint's own config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Split named in the config: train, val or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Dataset file; overrides --split.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Only the record with this id.
    #[arg(long)]
    id: Option<String>,
}

#[derive(Args)]
struct SeedArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InvarianceArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    proteins: usize,
    #[arg(long, default_value_t = 10)]
    transforms: usize,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_numeric() { 3 } else { 2 },
            message: e.to_string(),
        }
    }
}

fn numeric(message: String) -> Failure {
    Failure { code: 3, message }
}

type Outcome = Result<(), Failure>;

fn write_output(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure {
            code: 2,
            message: format!("{}: {e}", p.display()),
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn gendata(a: GendataArgs) -> Outcome {
    let mut spec = SynthSpec::new(a.task, a.n, a.min_len..=a.max_len, a.seed);
    spec.level = a.level;
    spec.num_classes = a.num_classes;
    let ds = generate_synthetic(&spec)?;
    save_dataset(&a.out, &ds)?;
    println!("wrote {} records to {}", ds.len(), a.out.display());
    Ok(())
}

fn graph_dump(g: &ProteinGraph, id: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "graph {id} nodes={} edges={} level={} cutoff={}",
        g.n,
        g.num_edges(),
        g.level,
        g.cutoff
    );
    for i in 0..g.n {
        let _ = write!(s, "node {i} aa={}", g.aa_types[i]);
        if let Some(t) = &g.torsions {
            let chi: Vec<String> = (0..4)
                .map(|k| {
                    if t[i].defined[k] {
                        format!("{}", t[i].chi[k])
                    } else {
                        "-".into()
                    }
                })
                .collect();
            let _ = write!(s, " chi={}", chi.join(","));
        }
        s.push('\n');
    }
    for (e, (i, j)) in g.edges.iter().enumerate() {
        let geom = &g.geom[e];
        let _ = write!(
            s,
            "edge {i} {j} seqdist={} d={} theta={} phi={} tau={}",
            g.edge_seqdist[e], geom.d, geom.theta, geom.phi, geom.tau
        );
        if let Some([a, b, c]) = geom.euler {
            let _ = write!(s, " euler={a},{b},{c}");
        }
        s.push('\n');
    }
    s
}

fn featurize(a: FeaturizeArgs) -> Outcome {
    let text = std::fs::read_to_string(&a.input).map_err(|e| Failure {
        code: 2,
        message: format!("{}: {e}", a.input.display()),
    })?;
    let parsed = parse_pdb_chains(&text, &a.chains)?;
    let graph = build_graph(&parsed.structure, a.cutoff, a.level)?;
    write_output(a.out.as_deref(), &graph_dump(&graph, &parsed.structure.id))
}

fn required(p: &Option<PathBuf>, key: &str) -> Result<PathBuf, Failure> {
    p.clone().ok_or_else(|| Failure {
        code: 2,
        message: format!("no `{key}` dataset configured"),
    })
}

fn train(a: TrainArgs) -> Outcome {
    let mut cfg = match (&a.config, &a.resume) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(ckpt)) => checkpoint_config(ckpt)?,
        (None, None) => RunConfig::default(),
    };
    a.flags.apply(&mut cfg)?;
    cfg.validate()?;
    let train_ds = read_dataset(required(&cfg.train, "train")?)?;
    let train_ex = prepare(&cfg, &train_ds)?;
    let val_ex = match &cfg.val {
        Some(p) => Some(prepare(&cfg, &read_dataset(p)?)?),
        None => None,
    };
    let mut trainer = match &a.resume {
        Some(ckpt) => Trainer::load(ckpt, Some(cfg.clone()))?,
        None => Trainer::new(cfg.clone())?,
    };
    let start = trainer.history.len();
    trainer.fit(&train_ex, val_ex.as_deref())?;
    for h in &trainer.history[start..] {
        println!(
            "epoch={} train_loss={} val_loss={}",
            h.epoch, h.train_loss, h.val_loss
        );
    }
    if let Some(path) = &cfg.checkpoint {
        trainer.save(path)?;
        println!("checkpoint={}", path.display());
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Outcome {
    let mut cfg = match &a.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    a.flags.apply(&mut cfg)?;
    let ckpt = cfg.checkpoint.clone().ok_or_else(|| Failure {
        code: 1,
        message: "eval needs --checkpoint or a config with `checkpoint`".into(),
    })?;
    if a.config.is_none() {
        cfg = checkpoint_config(&ckpt)?;
        a.flags.apply(&mut cfg)?;
    }
    let trainer = Trainer::load(&ckpt, Some(cfg.clone()))?;
    let path = match a.data {
        Some(p) => p,
        None => match a.split.as_str() {
            "train" => required(&cfg.train, "train")?,
            "val" => required(&cfg.val, "val")?,
            "test" => required(&cfg.test, "test")?,
            other => {
                return Err(Failure {
                    code: 1,
                    message: format!("unknown split {other:?}; expected train, val or test"),
                })
            }
        },
    };
    let examples = prepare(&cfg, &read_dataset(&path)?)?;
    let report = evaluate(&trainer.best_model(), &examples)?;
    if a.json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn predict_cmd(a: PredictArgs) -> Outcome {
    let trainer = Trainer::load(&a.checkpoint, None)?;
    let examples = prepare(&trainer.config, &read_dataset(&a.data)?)?;
    let model = trainer.best_model();
    let mut found = false;
    for ex in examples
        .iter()
        .filter(|e| a.id.as_ref().is_none_or(|id| *id == e.id))
    {
        found = true;
        let p = predict(&model, ex)?;
        let values: Vec<String> = p.values.iter().map(f64::to_string).collect();
        let mut line = format!("id={} prediction={}", p.id, values.join(","));
        if let Some(c) = p.class {
            let _ = write!(line, " class={c}");
        }
        println!("{line}");
    }
    if !found {
        return Err(Failure {
            code: 2,
            message: "no matching records".into(),
        });
    }
    Ok(())
}

fn gradcheck_cmd(a: SeedArgs) -> Outcome {
    let report = gradcheck(a.seed)?;
    println!(
        "groups={} entries={} kinks={} max_rel_err={:e}",
        report.groups,
        report.entries.len(),
        report.kinks(),
        report.max_rel_err
    );
    if let Some(w) = report.worst() {
        println!(
            "worst={} {}[{}] analytic={} numeric={}",
            w.variant, w.param, w.index, w.analytic, w.numeric
        );
    }
    if report.passed() {
        Ok(())
    } else {
        Err(numeric(format!(
            "max relative error {:e} >= {GRADCHECK_TOL:e}",
            report.max_rel_err
        )))
    }
}

fn invariance_cmd(a: InvarianceArgs) -> Outcome {
    let r = invariance_suite(a.seed, a.proteins, a.transforms)?;
    println!(
        "proteins={} transforms={} max_feature_diff={:e} max_layer_diff={:e} max_mirror_diff={:e} max_permutation_diff={:e}",
        r.proteins, r.transforms, r.max_feature_diff, r.max_layer_diff, r.max_mirror_diff, r.max_permutation_diff
    );
    if r.passed() {
        Ok(())
    } else {
        Err(numeric("invariance tolerance exceeded".into()))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = match cli.command {
        Command::Gendata(a) => gendata(a),
        Command::Featurize(a) => featurize(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Invariance(a) => invariance_cmd(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            log::debug!("exit code {}", f.code);
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
