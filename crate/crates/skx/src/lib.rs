//! `skx`: synthetic data, ingestion, sampling, training, evaluation,
//! one-shot, mutual-information and export workflows behind one binary.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;

use skeletonx::checkpoint;
use skeletonx::data::{load_sequences, DatasetManifest, SkeletonLayout};
use skeletonx::head::Mask;
use skeletonx::ingest::{ntu_record, parse_ntu_skeleton, preprocess, to_bone, PreprocessConfig};
use skeletonx::mi::{compare_mi, comparison_features, MineConfig, Pairing};
use skeletonx::model::Model;
use skeletonx::oneshot::{extract_features_masked, features_csv, run_oneshot, OneShotConfig};
use skeletonx::sampler::{build_pair_index, limited_scale_select, LimitedScaleSpec, StaticPairs};
use skeletonx::synth::{self, SynthConfig};
use skeletonx::train::{evaluate_top1, fit, loss_csv, TensorSet, TrainConfig};
use skeletonx::Error;

/// Process exit status per failure class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitCode {
    Success = 0,
    Usage = 1,
    Data = 2,
    Runtime = 3,
}

#[derive(Debug)]
pub struct Failure {
    pub code: ExitCode,
    pub msg: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: ExitCode::Usage,
            msg: msg.into(),
        }
    }

    fn context(mut self, path: &Path) -> Self {
        self.msg = format!("{}: {}", path.display(), self.msg);
        self
    }

    fn runtime(msg: impl Into<String>) -> Self {
        Self {
            code: ExitCode::Runtime,
            msg: msg.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => ExitCode::Usage,
            Error::NonFinite { .. } => ExitCode::Runtime,
            _ => ExitCode::Data,
        };
        Self { code, msg: e.to_string() }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

/// Result of one command: exit status plus the files it wrote.
#[derive(Debug)]
pub struct CommandResult {
    pub code: ExitCode,
    pub outputs: Vec<PathBuf>,
}

#[derive(Parser, Debug)]
#[command(name = "skx", version, about = "Skeleton action recognition lab with cross-sample feature aggregation")]
pub struct Cli {
    /// Seed overriding the one in any config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker thread cap; 1 gives bit-reproducible runs.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert NTU `.skeleton` files into SKX1 sequences and a manifest.
    Ingest {
        /// Directory of `.skeleton` files.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Store the bone modality instead of joint positions.
        #[arg(long)]
        bone: bool,
    },
    /// Limited-scale selection of N samples per class from P performers.
    Sample {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, required_unless_present = "n_grid")]
        n: Option<usize>,
        #[arg(long)]
        p: u32,
        /// Comma-separated N values; `--out` is then a directory.
        #[arg(long, value_delimiter = ',')]
        n_grid: Option<Vec<usize>>,
        #[arg(long)]
        allow_short: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw one DASP and one SADP partner per sample into a pair file.
    Pairs {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes best/last checkpoints, a report and a loss log.
    Train(TrainArgs),
    /// Top-1 accuracy of a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = MaskArg::None)]
        mask: MaskArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One-shot protocol on base and novel classes.
    Oneshot {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mutual information of pooled and aggregated features with labels.
    Mi {
        /// SkeletonX checkpoint providing the aggregated feature.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Baseline checkpoint providing the pooled feature; defaults to
        /// the pooled encoding of `--checkpoint`.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PairingArg::Sadp)]
        pairing: PairingArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write pre-classifier features and labels as CSV.
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = MaskArg::None)]
        mask: MaskArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trainable parameter counts of a checkpoint or a training config.
    Params {
        #[arg(long, conflicts_with = "config")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        /// Built-in layout name or layout JSON path.
        #[arg(long, default_value = "humanoid11")]
        layout: String,
    },
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Held-out manifest evaluated during training.
    #[arg(long)]
    pub test_manifest: Option<PathBuf>,
    /// Fixed pair file instead of per-step partner draws.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Built-in layout name or layout JSON path; defaults to `layout.json`
    /// beside the manifest.
    #[arg(long)]
    pub layout: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MaskArg {
    None,
    Action,
    Performer,
    Both,
}

impl From<MaskArg> for Mask {
    fn from(m: MaskArg) -> Self {
        match m {
            MaskArg::None => Mask::None,
            MaskArg::Action => Mask::Action,
            MaskArg::Performer => Mask::Performer,
            MaskArg::Both => Mask::Both,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PairingArg {
    Intra,
    Sadp,
}

/// Parses `argv` (program name first), runs the command and returns the
/// exit status. Messages go to stderr, reports to files and stdout.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { ExitCode::Usage } else { ExitCode::Success };
            let _ = e.print();
            return code as i32;
        }
    };
    match dispatch(&cli) {
        Ok(r) => r.code as i32,
        Err(f) => {
            eprintln!("skx: {f}");
            f.code as i32
        }
    }
}

pub fn dispatch(cli: &Cli) -> Outcome<CommandResult> {
    if cli.threads == 0 {
        return Err(Failure::usage("--threads must be at least 1"));
    }
    let outputs = match &cli.command {
        Command::Synth { config, out } => cmd_synth(cli, config.as_deref(), out)?,
        Command::Ingest {
            input,
            out,
            config,
            bone,
        } => cmd_ingest(input, out, config.as_deref(), *bone)?,
        Command::Sample {
            manifest,
            n,
            p,
            n_grid,
            allow_short,
            out,
        } => cmd_sample(manifest, *n, *p, n_grid.as_deref(), *allow_short, out)?,
        Command::Pairs { manifest, out } => cmd_pairs(cli, manifest, out)?,
        Command::Train(args) => cmd_train(cli, args)?,
        Command::Eval {
            checkpoint,
            manifest,
            mask,
            out,
        } => cmd_eval(checkpoint, manifest, (*mask).into(), out.as_deref())?,
        Command::Oneshot { config, manifest, out } => cmd_oneshot(cli, config, manifest, out)?,
        Command::Mi {
            checkpoint,
            baseline,
            data,
            config,
            pairing,
            out,
        } => cmd_mi(cli, checkpoint, baseline.as_deref(), data, config.as_deref(), *pairing, out)?,
        Command::ExportFeatures {
            checkpoint,
            manifest,
            mask,
            out,
        } => cmd_export(checkpoint, manifest, (*mask).into(), out)?,
        Command::Params {
            checkpoint,
            config,
            classes,
            layout,
        } => cmd_params(checkpoint.as_deref(), config.as_deref(), *classes, layout)?,
    };
    Ok(CommandResult {
        code: ExitCode::Success,
        outputs,
    })
}

/// Reads a TOML config, or the defaults when `path` is `None`.
pub fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Outcome<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Failure::from(Error::Io {
        path: path.into(),
        source: e,
    }))?;
    toml::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Outcome<PathBuf> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
    Ok(path.to_path_buf())
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("reports serialize");
    s.push('\n');
    s
}

fn make_dir(dir: &Path) -> Outcome<()> {
    fs::create_dir_all(dir).map_err(|e| Failure::runtime(format!("{}: {e}", dir.display())))
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Loads a manifest and every sequence it names.
pub fn load_set(manifest: &Path) -> Outcome<TensorSet> {
    let m = DatasetManifest::read(manifest)?;
    let seqs = load_sequences(&m, &base_dir(manifest))?;
    Ok(TensorSet::new(&m, &seqs)?)
}

fn resolve_layout(spec: Option<&str>, manifest: &Path) -> Outcome<SkeletonLayout> {
    match spec {
        Some(s) => match SkeletonLayout::builtin(s) {
            Some(l) => Ok(l),
            None => Ok(SkeletonLayout::read(Path::new(s))?),
        },
        None => Ok(SkeletonLayout::read(&base_dir(manifest).join("layout.json"))?),
    }
}

fn cmd_synth(cli: &Cli, config: Option<&Path>, out: &Path) -> Outcome<Vec<PathBuf>> {
    let mut cfg: SynthConfig = read_config(config)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let data = synth::generate(&cfg)?;
    synth::write(&data, out)?;
    #[derive(Serialize)]
    struct Report<'a> {
        config: &'a SynthConfig,
        samples: usize,
        nearest_centroid_accuracy: f64,
    }
    let report = json(&Report {
        config: &cfg,
        samples: data.manifest.len(),
        nearest_centroid_accuracy: synth::nearest_centroid_accuracy(&data),
    });
    print!("{report}");
    Ok(vec![
        out.join("manifest.csv"),
        out.join("layout.json"),
        write_file(&out.join("synth_report.json"), report)?,
    ])
}

fn cmd_ingest(input: &Path, out: &Path, config: Option<&Path>, bone: bool) -> Outcome<Vec<PathBuf>> {
    let cfg: PreprocessConfig = read_config(config)?;
    let entries = fs::read_dir(input).map_err(|e| Failure::from(Error::Io {
        path: input.into(),
        source: e,
    }))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "skeleton"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Invalid(format!("no .skeleton files in {}", input.display())).into());
    }
    let layout = SkeletonLayout::ntu25();
    make_dir(&out.join("seq"))?;
    let mut records = Vec::with_capacity(files.len());
    for f in &files {
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let rel = format!("seq/{stem}.skx");
        let record = ntu_record(stem, rel.clone())?;
        let text = fs::read_to_string(f).map_err(|e| Failure::from(Error::Io {
            path: f.clone(),
            source: e,
        }))?;
        let parsed = parse_ntu_skeleton(&text).map_err(|e| Failure::from(e).context(f))?;
        let mut seq = preprocess(&parsed, &cfg).map_err(|e| Failure::from(e).context(f))?;
        if bone {
            seq = to_bone(&seq, &layout)?;
        }
        skeletonx::data::write_sequence(&seq, &out.join(&rel))?;
        records.push(record);
    }
    let manifest = DatasetManifest::new(records);
    let mpath = out.join("manifest.csv");
    manifest.write(&mpath)?;
    layout.write(&out.join("layout.json"))?;
    println!("{} sequences", manifest.len());
    Ok(vec![mpath, out.join("layout.json")])
}

fn cmd_sample(
    manifest: &Path,
    n: Option<usize>,
    p: u32,
    grid: Option<&[usize]>,
    allow_short: bool,
    out: &Path,
) -> Outcome<Vec<PathBuf>> {
    let m = DatasetManifest::read(manifest)?;
    #[derive(Serialize)]
    struct Report {
        samples_per_class: usize,
        performer_budget: u32,
        selected: usize,
        class_histogram: Vec<usize>,
        shortfalls: Vec<(usize, usize)>,
    }
    let select = |n: usize| -> Outcome<(DatasetManifest, String)> {
        let spec = LimitedScaleSpec {
            samples_per_class: n,
            performer_budget: p,
            allow_short,
        };
        let sel = limited_scale_select(&m, &spec)?;
        let report = json(&Report {
            samples_per_class: n,
            performer_budget: p,
            selected: sel.manifest.len(),
            class_histogram: sel.manifest.class_histogram(),
            shortfalls: sel.shortfalls.clone(),
        });
        Ok((sel.manifest, report))
    };
    let mut written = Vec::new();
    match grid {
        Some(grid) => {
            make_dir(out)?;
            for &n in grid {
                let (sel, report) = select(n)?;
                let mut text = sel.to_text();
                text = rebase_paths(&sel, manifest, out).unwrap_or(text);
                written.push(write_file(&out.join(format!("n{n}.csv")), text)?);
                written.push(write_file(&out.join(format!("n{n}.json")), report)?);
            }
        }
        None => {
            let (sel, report) = select(n.expect("clap requires --n without --n-grid"))?;
            let text = rebase_paths(&sel, manifest, out).unwrap_or_else(|| sel.to_text());
            written.push(write_file(out, text)?);
            print!("{report}");
        }
    }
    Ok(written)
}

/// Rewrites record paths so they stay valid relative to the directory of
/// `out` when it differs from the source manifest's directory.
fn rebase_paths(sel: &DatasetManifest, source: &Path, out: &Path) -> Option<String> {
    let src = fs::canonicalize(base_dir(source).join(".")).ok()?;
    let dst_dir = base_dir(out);
    let dst = fs::canonicalize(if dst_dir.as_os_str().is_empty() { Path::new(".") } else { &dst_dir }).ok()?;
    if src == dst {
        return None;
    }
    let mut m = sel.clone();
    for r in &mut m.records {
        r.path = src.join(&r.path).to_string_lossy().into_owned();
    }
    Some(m.to_text())
}

fn cmd_pairs(cli: &Cli, manifest: &Path, out: &Path) -> Outcome<Vec<PathBuf>> {
    let m = DatasetManifest::read(manifest)?;
    let seed = cli.seed.unwrap_or(0);
    let index = build_pair_index(&m, seed);
    let frozen = index.freeze(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(vec![write_file(out, frozen.to_text())?])
}

#[derive(Serialize)]
struct TrainReport<'a> {
    config: &'a TrainConfig,
    manifest: String,
    test_manifest: Option<String>,
    layout: &'a str,
    run: skeletonx::train::RunReport,
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> Outcome<Vec<PathBuf>> {
    let mut cfg: TrainConfig = read_config(args.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let layout = resolve_layout(args.layout.as_deref(), &args.manifest)?;
    let train = load_set(&args.manifest)?;
    let test = args.test_manifest.as_deref().map(load_set).transpose()?;
    let pairs = match &args.pairs {
        Some(p) => Some(StaticPairs::read(p)?.to_index(&train.manifest)?),
        None => Some(build_pair_index(&train.manifest, cfg.seed)),
    };
    let fitted = fit(&train, pairs.as_ref(), &cfg, &layout, test.as_ref())?;
    make_dir(&args.out)?;
    let last = args.out.join("last.skxc");
    let best = args.out.join("best.skxc");
    checkpoint::save(&fitted.last, &last)?;
    checkpoint::save(&fitted.best, &best)?;
    let report = json(&TrainReport {
        config: &cfg,
        manifest: args.manifest.display().to_string(),
        test_manifest: args.test_manifest.as_ref().map(|p| p.display().to_string()),
        layout: &layout.name,
        run: fitted.report.without_wall_time(),
    });
    let timing = json(&serde_json::json!({ "wall_time_secs": fitted.report.wall_time_secs }));
    if let Some(acc) = fitted.report.final_top1 {
        println!("final top-1 {acc:.4}");
    }
    Ok(vec![
        last,
        best,
        write_file(&args.out.join("report.json"), report)?,
        write_file(&args.out.join("timing.json"), timing)?,
        write_file(&args.out.join("loss.csv"), loss_csv(&fitted.steps))?,
    ])
}

fn load_model(path: &Path) -> Outcome<Model<f32>> {
    Ok(checkpoint::load::<f32>(path)?)
}

fn cmd_eval(ckpt: &Path, manifest: &Path, mask: Mask, out: Option<&Path>) -> Outcome<Vec<PathBuf>> {
    let model = load_model(ckpt)?;
    let set = load_set(manifest)?;
    let top1 = evaluate_top1(&model, &set, mask)?;
    let report = json(&serde_json::json!({
        "checkpoint": ckpt.display().to_string(),
        "manifest": manifest.display().to_string(),
        "mask": mask,
        "samples": set.len(),
        "top1": top1,
    }));
    print!("{report}");
    out.map(|p| write_file(p, report)).transpose().map(|p| p.into_iter().collect())
}

fn cmd_oneshot(cli: &Cli, config: &Path, manifest: &Path, out: &Path) -> Outcome<Vec<PathBuf>> {
    let mut cfg: OneShotConfig = read_config(Some(config))?;
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    let set = load_set(manifest)?;
    let layout = resolve_layout(None, manifest)?;
    let outcome = run_oneshot(&set, &set.manifest, &layout, &cfg)?;
    let ex_ids: Vec<String> = cfg.exemplar_ids.values().cloned().collect();
    make_dir(out)?;
    let report = json(&serde_json::json!({ "config": cfg, "result": outcome.report.clone() }));
    println!("novel-query top-1 {:.4}", outcome.report.accuracy);
    Ok(vec![
        write_file(&out.join("report.json"), report)?,
        write_file(
            &out.join("exemplar_features.csv"),
            features_csv(&ex_ids, &outcome.report.novel_classes, &outcome.exemplar_features),
        )?,
    ])
}

#[allow(clippy::too_many_arguments)]
fn cmd_mi(
    cli: &Cli,
    ckpt: &Path,
    baseline: Option<&Path>,
    data: &Path,
    config: Option<&Path>,
    pairing: PairingArg,
    out: &Path,
) -> Outcome<Vec<PathBuf>> {
    let mut cfg: MineConfig = read_config(config)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let model = load_model(ckpt)?;
    let base = baseline.map(load_model).transpose()?;
    let set = load_set(data)?;
    let pairing = match pairing {
        PairingArg::Intra => Pairing::Intra,
        PairingArg::Sadp => Pairing::Sadp,
    };
    let (f, v) = comparison_features(base.as_ref(), &model, &set, pairing, cfg.seed)?;
    let cmp = compare_mi(&f, &v, &set.labels, model.class_count(), &cfg)?;
    let (i_f, i_v) = cmp.converged();
    make_dir(out)?;
    let report = json(&serde_json::json!({
        "config": cfg,
        "pairing": pairing,
        "samples": set.len(),
        "pooled_mi": i_f,
        "aggregated_mi": i_v,
        "label_entropy_bound": (model.class_count() as f64).ln(),
    }));
    print!("{report}");
    Ok(vec![
        write_file(&out.join("mi_pooled.csv"), cmp.pooled.to_csv())?,
        write_file(&out.join("mi_aggregated.csv"), cmp.aggregated.to_csv())?,
        write_file(&out.join("mi.json"), report)?,
    ])
}

fn cmd_export(ckpt: &Path, manifest: &Path, mask: Mask, out: &Path) -> Outcome<Vec<PathBuf>> {
    let model = load_model(ckpt)?;
    let set = load_set(manifest)?;
    let f = extract_features_masked(&model, &set, mask)?;
    let ids: Vec<String> = set.manifest.records.iter().map(|r| r.sample_id.clone()).collect();
    Ok(vec![write_file(out, features_csv(&ids, &set.labels, &f))?])
}

fn cmd_params(ckpt: Option<&Path>, config: Option<&Path>, classes: usize, layout: &str) -> Outcome<Vec<PathBuf>> {
    let model = match ckpt {
        Some(p) => load_model(p)?,
        None => {
            let cfg: TrainConfig = read_config(config)?;
            let layout = match SkeletonLayout::builtin(layout) {
                Some(l) => l,
                None => SkeletonLayout::read(Path::new(layout))?,
            };
            Model::<f32>::new(cfg.model_config(classes, layout), 0)?
        }
    };
    let c = model.count_parameters();
    print!(
        "{}",
        json(&serde_json::json!({
            "encoder": c.encoder,
            "skeletonx_head": c.skeletonx_head,
            "classifier": c.classifier,
            "total": c.total(),
        }))
    );
    Ok(Vec::new())
}
