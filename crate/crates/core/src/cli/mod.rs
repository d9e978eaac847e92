//! The `mctseg` command line: data generation, training, evaluation,
//! gradient verification and reports.

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use mctseg_tensor::{primitive_sweep, FiniteDiff, Scalar, Tensor, PRIMITIVES};

use crate::data::{center_crop, generate_range, read_split, write_split, VolumeSample};
use crate::error::{Error, IoContext, Result};
use crate::gradcheck::ModelCheck;
use crate::losses::{class_weights, LabelVolume};
use crate::modality::{ModalityId, ModalityMask};
use crate::model::checkpoint::Checkpoint;
use crate::model::{ModelConfig, ParamStore, NUM_CLASSES};
use crate::train::{
    eval_matrix, prepare_dataset, train_loop, write_dice_csv, DiceMatrix, ModelPredictor, OptimState, Predictor,
    TrainState, LOSS_CSV_HEADER,
};

pub use config::{Preset, RunConfig};

/// Relative error bound of `gradcheck`.
pub const GRAD_TOL: f64 = 1e-4;
pub const THREADS_ENV: &str = "MCTSEG_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "mctseg",
    version,
    about = "Brain-tumor segmentation with missing MRI modalities"
)]
pub struct Cli {
    /// Text config of `key = value` lines, applied over the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub no_mfd: bool,
    #[arg(long, global = true)]
    pub no_ufe: bool,
    #[arg(long, global = true)]
    pub no_cmf: bool,
    #[arg(long, global = true)]
    pub no_convblock: bool,
    /// Fuse modalities with per-pair attention.
    #[arg(long, global = true)]
    pub pairwise_cmf: bool,
    #[arg(long, global = true)]
    pub lambda_mfd: Option<f64>,
    /// Run the network in 64-bit floats.
    #[arg(long = "f64", global = true)]
    pub f64: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write train/eval phantom splits.
    GenData {
        /// Output directory (default: the config's data_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and write `<run>/model.ckpt` plus `<run>/loss.csv`.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        run: Option<PathBuf>,
        /// Continue from the run directory's checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Dice of every modality subset on the eval split.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        run: Option<PathBuf>,
        /// Checkpoint to evaluate (default: `<run>/model.ckpt`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output CSV (default: `<run>/dice.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write mid-axial PGM slices of the first eval sample here.
        #[arg(long)]
        slices: Option<PathBuf>,
    },
    /// Finite-difference check of every primitive and the whole tiny model.
    Gradcheck {
        /// Random cases per primitive.
        #[arg(long, default_value_t = 3)]
        cases: u64,
        #[arg(long, hide = true)]
        corrupt_op: Option<String>,
    },
    /// Print dice CSVs as tables.
    Report {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
    },
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidSpec(_) | Error::CropTooLarge { .. } => 2,
        Error::Io { .. }
        | Error::BadMagic { .. }
        | Error::VersionUnsupported { .. }
        | Error::TruncatedFile { .. }
        | Error::EmptyDataset => 3,
        Error::NanLoss { .. } => 4,
        Error::DigestMismatch | Error::KeySetMismatch(_) => 5,
        Error::GradcheckFailed { .. } => 6,
        _ => 1,
    }
}

/// Parses `args`, runs the command, and returns the exit status.
pub fn main_with(args: impl IntoIterator<Item = OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let stdout = io::stdout();
    match configure_threads().and_then(|()| run(&cli, &mut stdout.lock())) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
    // Already built when called twice in one process; the first setting wins.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Preset, then config file, then flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::preset(cli.preset.unwrap_or(Preset::Desk));
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).at(path)?;
        cfg.apply_text(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(l) = cli.lambda_mfd {
        cfg.lambda_mfd = l;
    }
    cfg.no_mfd |= cli.no_mfd;
    cfg.no_ufe |= cli.no_ufe;
    cfg.no_cmf |= cli.no_cmf;
    cfg.no_convblock |= cli.no_convblock;
    cfg.pairwise_cmf |= cli.pairwise_cmf;
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::GenData { out: dir } => gen_data(&cfg, dir.as_deref().unwrap_or(&cfg.data_dir), out),
        Command::Train { data, run, resume } => {
            let data = data.as_deref().unwrap_or(&cfg.data_dir);
            let run = run.as_deref().unwrap_or(&cfg.run_dir);
            if cli.f64 {
                train::<f64>(&cfg, data, run, *resume, out)
            } else {
                train::<f32>(&cfg, data, run, *resume, out)
            }
        }
        Command::Eval {
            data,
            run,
            checkpoint,
            out: csv,
            slices,
        } => {
            let run = run.as_deref().unwrap_or(&cfg.run_dir);
            let paths = EvalPaths {
                data: data.as_deref().unwrap_or(&cfg.data_dir),
                checkpoint: &checkpoint.clone().unwrap_or_else(|| run.join(CHECKPOINT)),
                csv: &csv.clone().unwrap_or_else(|| run.join("dice.csv")),
                slices: slices.as_deref(),
            };
            evaluate(&cfg, &paths, cli.f64, out)
        }
        Command::Gradcheck { cases, corrupt_op } => gradcheck(&cfg, *cases, corrupt_op.as_deref(), out),
        Command::Report { csv } => report(csv, out),
    }
}

fn say(out: &mut dyn Write, s: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", s.as_ref()).at("<stdout>")
}

pub fn gen_data(cfg: &RunConfig, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let spec = cfg.phantom_spec();
    let train = generate_range(&spec, 0..cfg.n_train)?;
    let eval = generate_range(&spec, cfg.n_train..cfg.n_train + cfg.n_eval)?;
    write_split(dir, "train", &train)?;
    write_split(dir, "eval", &eval)?;
    say(
        out,
        format!(
            "wrote {} train + {} eval phantoms (grid {}) to {}",
            train.len(),
            eval.len(),
            spec.grid,
            dir.display()
        ),
    )
}

pub const CHECKPOINT: &str = "model.ckpt";
pub const LOSS_CSV: &str = "loss.csv";

/// Path of the optimizer-state file that accompanies a checkpoint.
pub fn optimizer_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".opt");
    s.into()
}

pub fn save_state<T: Scalar>(cfg: &ModelConfig, state: &TrainState<T>, path: &Path) -> Result<()> {
    let digest = cfg.digest();
    Checkpoint::from_tensors(digest, state.step, state.params.iter()).save(path)?;
    let mut opt: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for (k, m) in &state.optim.m {
        opt.insert(format!("m/{k}"), m.cast());
    }
    for (k, v) in &state.optim.v {
        opt.insert(format!("v/{k}"), v.cast());
    }
    for (k, &t) in &state.optim.t {
        opt.insert(format!("t/{k}"), Tensor::scalar(t as f32));
    }
    Checkpoint {
        digest,
        step: state.step,
        tensors: opt,
    }
    .save(&optimizer_path(path))
}

/// Parameters from a checkpoint written for `cfg`.
pub fn load_params<T: Scalar>(cfg: &ModelConfig, path: &Path) -> Result<(ParamStore<T>, u64)> {
    let ck = Checkpoint::load(path)?;
    if ck.digest != cfg.digest() {
        return Err(Error::DigestMismatch);
    }
    let step = ck.step;
    let params = ParamStore::from_map(ck.into_tensors());
    params.check_against(cfg)?;
    Ok((params, step))
}

pub fn load_state<T: Scalar>(cfg: &ModelConfig, path: &Path) -> Result<TrainState<T>> {
    let (params, step) = load_params(cfg, path)?;
    let opt_path = optimizer_path(path);
    let opt = Checkpoint::load(&opt_path)?;
    if opt.digest != cfg.digest() || opt.step != step {
        return Err(Error::DigestMismatch);
    }
    let mut optim = OptimState::new();
    for (key, t) in opt.into_tensors::<T>() {
        let (kind, name) = key
            .split_once('/')
            .ok_or_else(|| Error::KeySetMismatch(format!("optimizer entry {key:?}")))?;
        if !params.contains(name) {
            return Err(Error::KeySetMismatch(format!(
                "optimizer entry for unknown parameter {name:?}"
            )));
        }
        match kind {
            "m" => {
                optim.m.insert(name.to_string(), t);
            }
            "v" => {
                optim.v.insert(name.to_string(), t);
            }
            "t" => {
                optim.t.insert(name.to_string(), t.item().to_f64() as u64);
            }
            _ => return Err(Error::KeySetMismatch(format!("optimizer entry {key:?}"))),
        }
    }
    Ok(TrainState { params, optim, step })
}

/// Loss-log lines (header included) for steps before `step`.
fn loss_log_prefix(path: &Path, step: u64) -> Result<String> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(e).at(path),
    };
    let mut kept = format!("{LOSS_CSV_HEADER}\n");
    for line in text.lines().skip(1) {
        let row_step = line.split(',').nth(1).and_then(|s| s.parse::<u64>().ok());
        if row_step.is_some_and(|s| s < step) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    Ok(kept)
}

fn load_train_split(cfg: &RunConfig, data: &Path) -> Result<Vec<VolumeSample>> {
    let raw = read_split(data, "train")?;
    if raw.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(s) = raw.iter().find(|s| s.dims().iter().any(|&d| d < cfg.crop)) {
        return Err(Error::CropTooLarge {
            crop: cfg.crop,
            dims: s.dims(),
        });
    }
    Ok(raw)
}

pub fn train<T: Scalar>(cfg: &RunConfig, data: &Path, run: &Path, resume: bool, out: &mut dyn Write) -> Result<()> {
    let raw = load_train_split(cfg, data)?;
    let weights = class_weights(raw.iter().map(|s| &s.labels));
    let data = prepare_dataset(&raw);
    drop(raw);
    let tc = cfg.train_config();
    fs::create_dir_all(run).at(run)?;
    let ckpt = run.join(CHECKPOINT);
    let log_path = run.join(LOSS_CSV);

    let mut state = if resume {
        load_state::<T>(&tc.model, &ckpt)?
    } else {
        TrainState::new(ParamStore::init(&tc.model, cfg.seed))
    };
    let prefix = if resume {
        loss_log_prefix(&log_path, state.step)?
    } else {
        format!("{LOSS_CSV_HEADER}\n")
    };
    let mut log = BufWriter::new(fs::File::create(&log_path).at(&log_path)?);
    log.write_all(prefix.as_bytes()).at(&log_path)?;

    let total = (tc.epochs * data.len()) as u64;
    say(
        out,
        format!(
            "training {} params ({}) on {} samples: steps {}..{}",
            state.params.numel(),
            T::NAME,
            data.len(),
            state.step,
            total
        ),
    )?;
    if tc.crop < 32 {
        eprintln!(
            "warning: crop {} leaves a 1-voxel bottleneck; instance norm makes the UFE/CMF path constant",
            tc.crop
        );
    }
    let start = Instant::now();
    let n = data.len() as u64;
    let result = train_loop(&tc, &data, &mut state, &weights, |row, st| {
        writeln!(log, "{}", row.csv()).at(&log_path)?;
        if cfg.checkpoint_every > 0 && st.step % cfg.checkpoint_every == 0 {
            log.flush().at(&log_path)?;
            save_state(&tc.model, st, &ckpt)?;
        }
        if st.step % n == 0 {
            let l = &row.losses;
            say(
                out,
                format!(
                    "epoch {:>4} step {:>6} l_seg {:.4} l_total {:.4} lr {:.3e} ({:.0?})",
                    row.epoch,
                    st.step,
                    l.l_seg,
                    l.l_total,
                    row.lr,
                    start.elapsed()
                ),
            )?;
        }
        Ok(())
    });
    log.flush().at(&log_path)?;
    result?;
    save_state(&tc.model, &state, &ckpt)?;
    say(out, format!("wrote {} (step {})", ckpt.display(), state.step))
}

pub struct EvalPaths<'a> {
    pub data: &'a Path,
    pub checkpoint: &'a Path,
    pub csv: &'a Path,
    pub slices: Option<&'a Path>,
}

/// Eval split, normalized and center-cropped to the model input size.
pub fn load_eval_split(data: &Path, crop: usize) -> Result<Vec<VolumeSample>> {
    let raw = read_split(data, "eval")?;
    if raw.is_empty() {
        return Err(Error::EmptyDataset);
    }
    prepare_dataset(&raw).iter().map(|s| center_crop(s, crop)).collect()
}

pub fn evaluate(cfg: &RunConfig, paths: &EvalPaths<'_>, wide: bool, out: &mut dyn Write) -> Result<()> {
    let model = cfg.model_config();
    let (params, step) = load_params::<f32>(&model, paths.checkpoint)?;
    let eval_set = load_eval_split(paths.data, cfg.crop)?;
    let (matrix, slices) = if wide {
        let params = params.cast::<f64>();
        let p = ModelPredictor {
            config: &model,
            params: &params,
        };
        (
            eval_matrix(&p, &eval_set)?,
            paths.slices.map(|d| write_slices(&p, &eval_set[0], d)),
        )
    } else {
        let p = ModelPredictor {
            config: &model,
            params: &params,
        };
        (
            eval_matrix(&p, &eval_set)?,
            paths.slices.map(|d| write_slices(&p, &eval_set[0], d)),
        )
    };
    if let Some(parent) = paths.csv.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).at(parent)?;
    }
    fs::write(paths.csv, write_dice_csv(&matrix)).at(paths.csv)?;
    say(out, format!("checkpoint step {step}, {} eval samples", eval_set.len()))?;
    say(out, dice_table(&matrix))?;
    if let Some(n) = slices.transpose()? {
        say(out, format!("wrote {n} slice images"))?;
    }
    say(out, format!("wrote {}", paths.csv.display()))
}

/// Binary PGM of the mid-axial slice with classes mapped to 0/85/170/255.
pub fn label_slice_pgm(labels: &LabelVolume) -> Vec<u8> {
    let [d, h, w] = labels.dims();
    let z = d / 2;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    let plane = &labels.data()[z * h * w..(z + 1) * h * w];
    bytes.extend(plane.iter().map(|&c| (c.min(NUM_CLASSES as u8 - 1)) * 85));
    bytes
}

/// Ground truth plus one prediction per mask; returns the file count.
fn write_slices(p: &impl Predictor, sample: &VolumeSample, dir: &Path) -> Result<usize> {
    fs::create_dir_all(dir).at(dir)?;
    let gt = dir.join(format!("{}_gt.pgm", sample.id));
    fs::write(&gt, label_slice_pgm(&sample.labels)).at(gt)?;
    let masks = ModalityMask::canonical();
    for mask in &masks {
        let pred = p.predict(sample, *mask)?;
        let path = dir.join(format!("{}_mask{}.pgm", sample.id, mask.code()));
        fs::write(&path, label_slice_pgm(&pred)).at(path)?;
    }
    Ok(masks.len() + 1)
}

fn mask_name(mask: ModalityMask) -> String {
    let names: Vec<String> = ModalityId::ALL
        .iter()
        .filter(|&&m| mask.has(m))
        .map(|m| m.to_string())
        .collect();
    names.join("+")
}

pub fn dice_table(m: &DiceMatrix) -> String {
    let mut s = String::from("| modalities | ET | TC | WT |\n|---|---|---|---|\n");
    for (mask, d) in &m.rows {
        s.push_str(&format!(
            "| {} | {:.4} | {:.4} | {:.4} |\n",
            mask_name(*mask),
            d[0],
            d[1],
            d[2]
        ));
    }
    let a = m.average;
    s.push_str(&format!("| average | {:.4} | {:.4} | {:.4} |", a[0], a[1], a[2]));
    s
}

/// Reads a dice CSV written by `eval`.
pub fn read_dice_csv(path: &Path) -> Result<DiceMatrix> {
    let text = fs::read_to_string(path).at(path)?;
    let bad = |msg: &str| Error::Config(format!("{}: {msg}", path.display()));
    let mut rows = Vec::new();
    let mut average = None;
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad("expected 7 columns"));
        }
        let d: [f64; 3] = std::array::from_fn(|i| f[4 + i].parse().unwrap_or(f64::NAN));
        if d.iter().any(|v| v.is_nan()) {
            return Err(bad("unparsable dice value"));
        }
        if f[0] == "avg" {
            average = Some(d);
            continue;
        }
        let delta: [bool; 4] = std::array::from_fn(|i| f[i] == "1");
        rows.push((ModalityMask::new(delta).map_err(|_| bad("empty mask row"))?, d));
    }
    let average = average.ok_or_else(|| bad("missing avg row"))?;
    if rows.len() != 15 {
        return Err(bad("expected 15 mask rows"));
    }
    Ok(DiceMatrix { rows, average })
}

pub fn report(paths: &[PathBuf], out: &mut dyn Write) -> Result<()> {
    let mats: Vec<DiceMatrix> = paths.iter().map(|p| read_dice_csv(p)).collect::<Result<_>>()?;
    for (p, m) in paths.iter().zip(&mats) {
        say(out, format!("## {}\n", p.display()))?;
        say(out, format!("{}\n", dice_table(m)))?;
    }
    if mats.len() > 1 {
        say(out, "| run | avg ET | avg TC | avg WT |\n|---|---|---|---|")?;
        for (p, m) in paths.iter().zip(&mats) {
            let a = m.average;
            say(
                out,
                format!("| {} | {:.4} | {:.4} | {:.4} |", p.display(), a[0], a[1], a[2]),
            )?;
        }
    }
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, cases: u64, corrupt: Option<&str>, out: &mut dyn Write) -> Result<()> {
    let corrupt = match corrupt {
        None => None,
        Some(op) => Some(
            *PRIMITIVES
                .iter()
                .find(|&&p| p == op)
                .ok_or_else(|| Error::Config(format!("--corrupt-op: unknown primitive {op:?}")))?,
        ),
    };
    let start = Instant::now();
    let fd = FiniteDiff { h: 1e-4, corrupt };
    let mut worst = (String::new(), 0.0f64);
    for r in primitive_sweep(PRIMITIVES, cases.max(1), &fd)? {
        say(
            out,
            format!("primitive {:<14} max rel err {:.3e}", r.name, r.max_rel_error),
        )?;
        if r.max_rel_error >= worst.1 {
            worst = (format!("primitive {}", r.name), r.max_rel_error);
        }
    }

    let check = ModelCheck {
        config: ModelConfig {
            widths: ModelCheck::default().config.widths,
            ..cfg.model_config()
        },
        seed: cfg.seed,
        corrupt,
        ..ModelCheck::default()
    };
    check.config.validate()?;
    let report = check.run()?;
    let mut groups: BTreeMap<String, f64> = BTreeMap::new();
    for p in &report.params {
        let group: String = p.key.splitn(3, '.').take(2).collect::<Vec<_>>().join(".");
        let e = groups.entry(group).or_insert(0.0);
        *e = e.max(p.max_rel_error);
    }
    for (g, e) in &groups {
        say(out, format!("model     {g:<14} max rel err {e:.3e}"))?;
    }
    // A bad primitive is the root cause of any model mismatch, so it is
    // named first.
    if let Some(p) = report.worst().filter(|_| worst.1 < GRAD_TOL) {
        if p.max_rel_error >= worst.1 {
            worst = (format!("model parameter {}", p.key), p.max_rel_error);
        }
    }
    say(
        out,
        format!(
            "{} primitives, {} model coordinates in {:.1?}; worst {} at {:.3e}",
            PRIMITIVES.len(),
            report.coords_checked,
            start.elapsed(),
            worst.0,
            worst.1
        ),
    )?;
    if worst.1 < GRAD_TOL {
        say(out, format!("PASS (tolerance {GRAD_TOL:e})"))
    } else {
        Err(Error::GradcheckFailed {
            name: worst.0,
            error: worst.1,
        })
    }
}
