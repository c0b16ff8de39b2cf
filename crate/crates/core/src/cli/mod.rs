//! The `fednmt` command-line front end.
//!
//! Every subcommand that writes artifacts also writes `manifest.json` into
//! its output directory: the parsed command, the effective plan, hashes of
//! the inputs it read and of every file it wrote. `fednmt replay` reruns a
//! manifest into a fresh directory and compares the hashes.

pub mod manifest;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{default_domain_specs, generate_synthetic_domains, ingest_corpus, DomainCorpus, SplitSizes, SyntheticDomainSpec};
use crate::error::{Error, Result};
use crate::evaluation::EvalMatrix;
use crate::experiments::{parse_config_label, prepare_domains, ConfigLabel, ExperimentPlan, Mode, Seeds, Workbench};
use crate::federation::{compute_cost_preset, cost_terms, CostPreset};
use crate::model::{load_checkpoint, write_checkpoint, Model};
use crate::subword::{train_bpe, BpeVocab, DESK_SCALE_MERGES};

use manifest::{Inputs, Manifest, Outputs};

/// Exit status for a replay whose outputs differ from the manifest.
pub const EXIT_MISMATCH: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "fednmt", version, about = "Federated NMT with controller layers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate the synthetic domains, or split line-aligned corpus files.
    GenData(GenDataArgs),
    /// Train a joint BPE vocabulary on the plan's training splits.
    TrainBpe(TrainBpeArgs),
    /// Train the base model on the plan's first domain.
    Pretrain(RunArgs),
    /// Run a federated session from a base checkpoint.
    FlRun(FlRunArgs),
    /// Train the standalone, pooled and chained baselines.
    Baseline(BaselineArgs),
    /// Score checkpoints on every domain's test set.
    Eval(EvalArgs),
    /// Price a configuration label.
    Cost(CostArgs),
    /// Rerun a manifest and compare output hashes.
    Replay(ReplayArgs),
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// TOML file with `[[domains]]` synthetic domain specs.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Ingest `NAME=SRC,TGT` instead of generating; repeatable.
    #[arg(long, value_name = "NAME=SRC,TGT")]
    pub corpus: Vec<String>,
    #[arg(long, default_value_t = 200)]
    pub dev: usize,
    #[arg(long, default_value_t = 200)]
    pub test: usize,
}

/// Flags that shape the experiment plan.
#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct PlanArgs {
    /// Experiment plan (TOML); the desk preset over the default domains
    /// when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Sets the model seed to SEED and the training seed to SEED + 1.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Caps client parallelism.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct TrainBpeArgs {
    #[command(flatten)]
    pub plan: PlanArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DESK_SCALE_MERGES)]
    pub merges: usize,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct RunArgs {
    #[command(flatten)]
    pub plan: PlanArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct FlRunArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Base model checkpoint written by `pretrain`.
    #[arg(long)]
    pub base: PathBuf,
    /// Configuration label, e.g. "8E-8D/C-C (2-6)"; overrides the plan's.
    #[arg(long)]
    pub label: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Standalone,
    Pooled,
    Chained,
    All,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum, default_value_t = BaselineKind::All)]
    pub mode: BaselineKind,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Checkpoint to score; repeatable. Rows are named after the file stem.
    #[arg(long, required = true)]
    pub model: Vec<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PresetKind {
    /// Published per-layer sizes of the full Transformer.
    Paper,
    /// Sizes of the plan's desk model; needs `--vocab`.
    Desk,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct CostArgs {
    #[arg(long)]
    pub label: String,
    #[arg(long, value_enum, default_value_t = PresetKind::Paper)]
    pub preset: PresetKind,
    /// JSON file `{enc_layer, dec_layer, embedding}`; overrides `--preset`.
    #[arg(long)]
    pub preset_file: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Fresh directory for the replayed outputs.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Runs one command. Returns the exit status on success.
pub fn execute(command: Command) -> Result<i32> {
    if let Command::Replay(args) = command {
        return replay(&args);
    }
    let command = absolutize(command)?;
    let (plan, inputs, outputs) = match &command {
        Command::GenData(a) => gen_data(a)?,
        Command::TrainBpe(a) => train_bpe_cmd(a)?,
        Command::Pretrain(a) => pretrain(a)?,
        Command::FlRun(a) => fl_run(a)?,
        Command::Baseline(a) => baseline(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Cost(a) => cost(a)?,
        Command::Replay(_) => unreachable!("handled above"),
    };
    if let Some(out) = outputs {
        let dir = out.root().to_path_buf();
        Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command,
            plan,
            inputs: inputs.into_map(),
            outputs: out.into_files(),
        }
        .save(&dir)?;
        info!("wrote {}", dir.display());
    }
    Ok(0)
}

type Ran = (Option<ExperimentPlan>, Inputs, Option<Outputs>);

fn abs(p: &mut PathBuf) -> Result<()> {
    *p = std::path::absolute(&*p).map_err(|e| Error::io(&*p, e))?;
    Ok(())
}

fn abs_plan(p: &mut PlanArgs) -> Result<()> {
    p.config.as_mut().map(abs).transpose()?;
    Ok(())
}

fn abs_run(r: &mut RunArgs) -> Result<()> {
    abs_plan(&mut r.plan)?;
    abs(&mut r.data)?;
    abs(&mut r.vocab)?;
    abs(&mut r.out)
}

/// Makes every path absolute so a manifest replays from any directory.
fn absolutize(mut command: Command) -> Result<Command> {
    match &mut command {
        Command::GenData(a) => {
            abs(&mut a.out)?;
            a.config.as_mut().map(abs).transpose()?;
            a.corpus = a
                .corpus
                .iter()
                .map(|spec| {
                    let (name, src, tgt) = parse_corpus_flag(spec)?;
                    let (src, tgt) = (std::path::absolute(&src), std::path::absolute(&tgt));
                    let src = src.map_err(|e| Error::io(spec.as_str(), e))?;
                    let tgt = tgt.map_err(|e| Error::io(spec.as_str(), e))?;
                    Ok(format!("{name}={},{}", src.display(), tgt.display()))
                })
                .collect::<Result<_>>()?;
        }
        Command::TrainBpe(a) => {
            abs_plan(&mut a.plan)?;
            abs(&mut a.data)?;
            abs(&mut a.out)?;
        }
        Command::Pretrain(a) => abs_run(a)?,
        Command::FlRun(a) => {
            abs_run(&mut a.run)?;
            abs(&mut a.base)?;
        }
        Command::Baseline(a) => abs_run(&mut a.run)?,
        Command::Eval(a) => {
            abs_run(&mut a.run)?;
            a.model.iter_mut().try_for_each(abs)?;
        }
        Command::Cost(a) => {
            for p in [&mut a.preset_file, &mut a.vocab, &mut a.config, &mut a.out] {
                p.as_mut().map(abs).transpose()?;
            }
        }
        Command::Replay(_) => {}
    }
    Ok(command)
}

fn parse_corpus_flag(spec: &str) -> Result<(String, PathBuf, PathBuf)> {
    let bad = || Error::Input(format!("--corpus {spec:?} is not NAME=SRC,TGT"));
    let (name, paths) = spec.split_once('=').ok_or_else(bad)?;
    let (src, tgt) = paths.split_once(',').ok_or_else(bad)?;
    if name.is_empty() || src.is_empty() || tgt.is_empty() {
        return Err(bad());
    }
    Ok((name.to_string(), src.into(), tgt.into()))
}

#[derive(Deserialize)]
struct DomainSpecFile {
    domains: Vec<SyntheticDomainSpec>,
}

fn gen_data(a: &GenDataArgs) -> Result<Ran> {
    let mut inputs = Inputs::default();
    let corpora = if a.corpus.is_empty() {
        let specs = match &a.config {
            Some(path) => {
                inputs.add(path)?;
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                toml::from_str::<DomainSpecFile>(&text)
                    .map_err(|e| Error::format("domain spec file", e.to_string()))?
                    .domains
            }
            None => default_domain_specs(),
        };
        generate_synthetic_domains(&specs, a.seed)?
    } else {
        let splits = SplitSizes { dev: a.dev, test: a.test };
        a.corpus
            .iter()
            .map(|spec| {
                let (name, src, tgt) = parse_corpus_flag(spec)?;
                inputs.add(&src)?;
                inputs.add(&tgt)?;
                ingest_corpus(&name, &src, &tgt, splits, a.seed)
            })
            .collect::<Result<Vec<_>>>()?
    };
    let mut out = Outputs::create(&a.out)?;
    for c in &corpora {
        for (split, pairs) in [("train", &c.train), ("dev", &c.dev), ("test", &c.test)] {
            let side = |f: fn(&crate::data::SentencePair) -> &str| -> String {
                pairs.iter().map(|p| format!("{}\n", f(p))).collect()
            };
            out.write(&format!("{}.{split}.src", c.name), side(|p| &p.src).as_bytes())?;
            out.write(&format!("{}.{split}.tgt", c.name), side(|p| &p.tgt).as_bytes())?;
        }
        info!("{}: {} train / {} dev / {} test", c.name, c.train.len(), c.dev.len(), c.test.len());
    }
    Ok((None, inputs, Some(out)))
}

/// The plan file or the desk preset, with flag overrides applied.
fn build_plan(p: &PlanArgs, mode: Mode, inputs: &mut Inputs) -> Result<ExperimentPlan> {
    let mut plan = match &p.config {
        Some(path) => {
            inputs.add(path)?;
            let mut plan = ExperimentPlan::load(path)?;
            plan.mode = mode;
            plan
        }
        None => ExperimentPlan::desk(mode, default_domain_specs().into_iter().map(|s| s.name).collect()),
    };
    if let Some(seed) = p.seed {
        plan.seeds = Seeds {
            model: seed,
            training: seed.wrapping_add(1),
        };
    }
    if let Some(t) = p.threads {
        plan.federation.threads = t;
    }
    Ok(plan)
}

fn load_corpora(dir: &Path, names: &[String], inputs: &mut Inputs) -> Result<Vec<DomainCorpus>> {
    names
        .iter()
        .map(|name| {
            for split in ["train", "dev", "test"] {
                for side in ["src", "tgt"] {
                    inputs.add(&dir.join(format!("{name}.{split}.{side}")))?;
                }
            }
            DomainCorpus::load(dir, name)
        })
        .collect()
}

fn train_bpe_cmd(a: &TrainBpeArgs) -> Result<Ran> {
    let mut inputs = Inputs::default();
    let plan = build_plan(&a.plan, Mode::Standalone, &mut inputs)?;
    let corpora = load_corpora(&a.data, &plan.domains, &mut inputs)?;
    let vocab = train_bpe(corpora.iter().flat_map(|c| c.train_text()), a.merges)?;
    info!("vocabulary of {} tokens from {} merges", vocab.len(), vocab.merges().len());
    let mut out = Outputs::create(&a.out)?;
    out.write("vocab.txt", vocab.to_text().as_bytes())?;
    Ok((Some(plan), inputs, Some(out)))
}

/// Plan, vocabulary and prepared domains shared by the training commands.
struct Loaded {
    plan: ExperimentPlan,
    vocab: BpeVocab,
    domains: Vec<crate::experiments::DomainData>,
    inputs: Inputs,
}

fn load_run(r: &RunArgs, mode: Mode) -> Result<Loaded> {
    let mut inputs = Inputs::default();
    let plan = build_plan(&r.plan, mode, &mut inputs)?;
    inputs.add(&r.vocab)?;
    let vocab = BpeVocab::load(&r.vocab)?;
    let corpora = load_corpora(&r.data, &plan.domains, &mut inputs)?;
    let domains = prepare_domains(&corpora, &vocab, plan.dims.max_seq_len);
    Ok(Loaded {
        plan,
        vocab,
        domains,
        inputs,
    })
}

fn matrix_of(plan: &ExperimentPlan, rows: Vec<crate::evaluation::MatrixRow>) -> Result<EvalMatrix> {
    let mut m = EvalMatrix::new(plan.domains.clone(), plan.bleu);
    for r in rows {
        m.push_row(r.label, r.cells, r.c_cost, r.t_cost)?;
    }
    Ok(m)
}

fn write_matrix(out: &mut Outputs, stem: &str, m: &EvalMatrix) -> Result<()> {
    out.write(&format!("{stem}.csv"), m.to_csv().as_bytes())?;
    out.write(&format!("{stem}.json"), (serde_json::to_string_pretty(m)? + "\n").as_bytes())?;
    print!("{}", m.to_csv());
    Ok(())
}

fn pretrain(a: &RunArgs) -> Result<Ran> {
    let l = load_run(a, Mode::Standalone)?;
    let wb = Workbench::new(&l.plan, &l.vocab, &l.domains)?;
    let base = wb.train_base()?;
    let row = wb.evaluate_row("Base", &base)?;
    let mut out = Outputs::create(&a.out)?;
    out.write("base.ckpt", &write_checkpoint(&base))?;
    write_matrix(&mut out, "matrix", &matrix_of(&l.plan, vec![row])?)?;
    Ok((Some(l.plan), l.inputs, Some(out)))
}

fn fl_run(a: &FlRunArgs) -> Result<Ran> {
    if !a.base.is_file() {
        return Err(Error::Input(format!(
            "base checkpoint {} does not exist; run `fednmt pretrain` first",
            a.base.display()
        )));
    }
    let mut l = load_run(&a.run, Mode::Federated)?;
    if let Some(label) = &a.label {
        l.plan.label = Some(label.clone());
    }
    let label_text = l
        .plan
        .label
        .clone()
        .ok_or_else(|| Error::Config("no configuration label: pass --label or set it in the plan".into()))?;
    l.plan.validate()?;
    let label = parse_config_label(&label_text)?;
    l.inputs.add(&a.base)?;
    let base = load_checkpoint(&a.base)?;
    let wb = Workbench::new(&l.plan, &l.vocab, &l.domains)?;
    let report = wb.run_fl_experiment(&label, &base)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }

    let mut out = Outputs::create(&a.run.out)?;
    for c in &report.clients {
        out.write(&format!("clients/{}-{}.ckpt", c.client_id, c.name), &write_checkpoint(&c.model))?;
    }
    out.write("report.json", (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
    let m = matrix_of(&l.plan, vec![report.base_row.clone(), report.final_row.clone()])?;
    write_matrix(&mut out, "matrix", &m)?;
    println!(
        "{}: mean BLEU {:.2} -> {:.2}, C-Cost {} ({}), T-Cost {} ({})",
        report.label,
        report.base_row.average,
        report.final_row.average,
        report.c_cost_term,
        group_digits(report.c_cost_preset),
        report.t_cost_term,
        group_digits(report.t_cost_preset),
    );
    Ok((Some(l.plan), l.inputs, Some(out)))
}

fn baseline(a: &BaselineArgs) -> Result<Ran> {
    let mode = match a.mode {
        BaselineKind::Pooled => Mode::PooledFineTune,
        BaselineKind::Chained => Mode::Chained,
        BaselineKind::Standalone | BaselineKind::All => Mode::Standalone,
    };
    let l = load_run(&a.run, mode)?;
    let wb = Workbench::new(&l.plan, &l.vocab, &l.domains)?;
    let mut out = Outputs::create(&a.run.out)?;
    let mut rows = Vec::new();
    let mut keep = |out: &mut Outputs, name: &str, model: &Model, row| -> Result<()> {
        out.write(&format!("{name}.ckpt"), &write_checkpoint(model))?;
        rows.push(row);
        Ok(())
    };
    let all = a.mode == BaselineKind::All;
    if all || a.mode == BaselineKind::Standalone {
        for d in &l.plan.domains {
            let (model, row) = wb.train_standalone(d)?;
            keep(&mut out, &format!("standalone-{d}"), &model, row)?;
        }
    }
    if all || a.mode == BaselineKind::Pooled {
        let (model, row) = wb.train_pooled_finetune()?;
        keep(&mut out, "pooled", &model, row)?;
    }
    if all || a.mode == BaselineKind::Chained {
        let (model, row) = wb.train_chained()?;
        keep(&mut out, "chained", &model, row)?;
    }
    write_matrix(&mut out, "matrix", &matrix_of(&l.plan, rows)?)?;
    Ok((Some(l.plan), l.inputs, Some(out)))
}

fn eval(a: &EvalArgs) -> Result<Ran> {
    let mut l = load_run(&a.run, Mode::Standalone)?;
    let wb = Workbench::new(&l.plan, &l.vocab, &l.domains)?;
    let mut rows = Vec::new();
    for path in &a.model {
        l.inputs.add(path)?;
        let model = load_checkpoint(path)?;
        let name = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        rows.push(wb.evaluate_row(&name, &model)?);
    }
    let mut out = Outputs::create(&a.run.out)?;
    write_matrix(&mut out, "matrix", &matrix_of(&l.plan, rows)?)?;
    Ok((Some(l.plan), l.inputs, Some(out)))
}

/// Priced costs of one label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub label: String,
    pub preset: CostPreset,
    pub c_cost_term: String,
    pub t_cost_term: String,
    pub c_cost: u64,
    pub t_cost: u64,
    /// T-Cost of training every layer of the same depths.
    pub all_layers_t_cost: u64,
    /// `all_layers_t_cost / t_cost`.
    pub t_cost_ratio: f64,
}

/// Prices `label`. The `paper` preset resolves controllers against a six-layer
/// base; the desk preset against `base_depths`.
pub fn price_label(label: &ConfigLabel, preset: &CostPreset, base_depths: Option<(usize, usize)>) -> Result<CostReport> {
    let (enc_base, dec_base) = base_depths.unwrap_or((label.enc_total.min(6), label.dec_total.min(6)));
    let (c_term, t_term) = cost_terms(label, enc_base, dec_base)?;
    let all = parse_config_label(&format!("{}E-{}D/A-A", label.enc_total, label.dec_total))?;
    let (_, all_t) = compute_cost_preset(&all, preset)?;
    let t_cost = t_term.params(preset);
    Ok(CostReport {
        label: label.to_string(),
        preset: *preset,
        c_cost_term: c_term.to_string(),
        t_cost_term: t_term.to_string(),
        c_cost: c_term.params(preset),
        t_cost,
        all_layers_t_cost: all_t,
        t_cost_ratio: all_t as f64 / t_cost as f64,
    })
}

/// `15240704` as `15,240,704`.
pub fn group_digits(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn cost(a: &CostArgs) -> Result<Ran> {
    let mut inputs = Inputs::default();
    let label = parse_config_label(&a.label)?;
    let mut plan = None;
    let (preset, depths) = if let Some(path) = &a.preset_file {
        inputs.add(path)?;
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        (serde_json::from_str::<CostPreset>(&text)?, None)
    } else {
        match a.preset {
            PresetKind::Paper => (CostPreset::FULL_SCALE, None),
            PresetKind::Desk => {
                let p = build_plan(
                    &PlanArgs {
                        config: a.config.clone(),
                        seed: None,
                        threads: None,
                    },
                    Mode::Federated,
                    &mut inputs,
                )?;
                let vocab_path = a
                    .vocab
                    .as_ref()
                    .ok_or_else(|| Error::Config("the desk preset needs --vocab to size the embedding table".into()))?;
                inputs.add(vocab_path)?;
                let vocab = BpeVocab::load(vocab_path)?;
                let cfg = p.dims.model_config(vocab.len());
                plan = Some(p);
                (CostPreset::from_config(&cfg), Some((cfg.enc_layers, cfg.dec_layers)))
            }
        }
    };
    let r = price_label(&label, &preset, depths)?;
    println!("{}", r.label);
    println!("C-Cost  {:<12} {}", r.c_cost_term, group_digits(r.c_cost));
    println!("T-Cost  {:<12} {}", r.t_cost_term, group_digits(r.t_cost));
    println!(
        "T-Cost ratio vs {}E-{}D/A-A ({}): {:.2}",
        label.enc_total,
        label.dec_total,
        group_digits(r.all_layers_t_cost),
        r.t_cost_ratio
    );
    let out = match &a.out {
        Some(dir) => {
            let mut out = Outputs::create(dir)?;
            out.write("cost.json", (serde_json::to_string_pretty(&r)? + "\n").as_bytes())?;
            Some(out)
        }
        None => None,
    };
    Ok((plan, inputs, out))
}

fn replay(a: &ReplayArgs) -> Result<i32> {
    let m = Manifest::load(&a.manifest)?;
    if m.version != env!("CARGO_PKG_VERSION") {
        log::warn!("manifest written by version {}, replaying with {}", m.version, env!("CARGO_PKG_VERSION"));
    }
    let changed = m.changed_inputs();
    if !changed.is_empty() {
        let list: Vec<String> = changed.iter().map(|p| p.display().to_string()).collect();
        return Err(Error::Input(format!("inputs changed since the run: {}", list.join(", "))));
    }
    let out = std::path::absolute(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut command = m.command.clone();
    match &mut command {
        Command::GenData(x) => x.out = out.clone(),
        Command::TrainBpe(x) => x.out = out.clone(),
        Command::Pretrain(x) => x.out = out.clone(),
        Command::FlRun(x) => x.run.out = out.clone(),
        Command::Baseline(x) => x.run.out = out.clone(),
        Command::Eval(x) => x.run.out = out.clone(),
        Command::Cost(x) => x.out = Some(out.clone()),
        Command::Replay(_) => return Err(Error::Input("a manifest cannot record a replay".into())),
    }
    execute(command)?;
    let again = Manifest::load(&out.join(manifest::MANIFEST_FILE))?;
    let mut mismatches = 0;
    for (file, want) in &m.outputs {
        match again.outputs.get(file) {
            Some(got) if got == want => {}
            Some(got) => {
                mismatches += 1;
                println!("MISMATCH {file}: {want} != {got}");
            }
            None => {
                mismatches += 1;
                println!("MISSING {file}");
            }
        }
    }
    for file in again.outputs.keys().filter(|f| !m.outputs.contains_key(*f)) {
        mismatches += 1;
        println!("EXTRA {file}");
    }
    if mismatches == 0 {
        println!("replay ok: {} outputs identical", m.outputs.len());
        Ok(0)
    } else {
        Ok(EXIT_MISMATCH)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digit_grouping() {
        assert_eq!(group_digits(0), "0");
        assert_eq!(group_digits(999), "999");
        assert_eq!(group_digits(1000), "1,000");
        assert_eq!(group_digits(15_240_704), "15,240,704");
        assert_eq!(group_digits(94_079_328), "94,079,328");
    }

    #[test]
    fn full_scale_prices_and_ratio() {
        let label = parse_config_label("8E-8D/C-C (2-6)").unwrap();
        let r = price_label(&label, &CostPreset::FULL_SCALE, None).unwrap();
        assert_eq!((r.c_cost, r.t_cost, r.all_layers_t_cost), (15_240_704, 15_240_704, 94_079_328));
        assert_eq!(format!("{:.2}", r.t_cost_ratio), "6.17");
    }

    #[test]
    fn corpus_flag_parsing() {
        let (n, s, t) = parse_corpus_flag("os=a.de,b.en").unwrap();
        assert_eq!((n.as_str(), s, t), ("os", PathBuf::from("a.de"), PathBuf::from("b.en")));
        for bad in ["os", "os=a", "=a,b", "os=,b"] {
            assert!(parse_corpus_flag(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn unknown_flags_are_usage_errors() {
        assert_eq!(run_cli(["fednmt", "cost", "--label", "6E-6D/A-A", "--bogus"]), 2);
        assert_eq!(run_cli(["fednmt", "frobnicate"]), 2);
        assert_eq!(run_cli(["fednmt", "cost", "--label", "6E-6D/A-A"]), 0);
        assert_eq!(run_cli(["fednmt", "cost", "--label", "nonsense"]), 1);
    }
}
