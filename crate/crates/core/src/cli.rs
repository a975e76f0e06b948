//! Commands behind the `longact` binary. Each writes into
//! `<out>/<name>/{config.resolved, metrics.jsonl, checkpoints/, reports/}`.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{forward_with, load_checkpoint, save_checkpoint, ForwardOptions, ModelParams, Projection};
use crate::perturb::{perturb_eval, render_report, Calibration, PerturbReport, PerturbSpec};
use crate::saliency::{
    build_mask, compute_magnitude, dump_saliency, read_saliency_csv, MagnitudeMatrix, SaliencyView, SelectionPolicy,
};
use crate::tasks::{make_splits, read_dataset, write_dataset, Dataset, Splits};
use crate::training::{evaluate, run_rl, run_sft, EvalReport, RlEvent, RlOutcome, SftOutcome};

pub const SFT_CHECKPOINT: &str = "sft.ckpt";
pub const RL_CHECKPOINT: &str = "rl_final.ckpt";

/// Paths inside one run directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    /// Creates the layout and writes `config.resolved`.
    pub fn create(cfg: &RunConfig) -> Result<RunDir> {
        let d = RunDir { root: cfg.run_dir() };
        for sub in [d.root.clone(), d.checkpoints(), d.reports()] {
            fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        }
        let p = d.root.join("config.resolved");
        fs::write(&p, cfg.to_flat()?).map_err(|e| Error::io(&p, e))?;
        Ok(d)
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.checkpoints().join(name)
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.reports().join(name)
    }

    pub fn data(&self, split: &str) -> PathBuf {
        self.root.join("data").join(format!("{split}.jsonl"))
    }
}

/// Append-only JSON lines, each tagged with the phase that produced it.
pub struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
}

#[derive(Serialize)]
struct Tagged<'a, T: Serialize> {
    phase: &'a str,
    #[serde(flatten)]
    record: &'a T,
}

impl MetricsLog {
    pub fn open(path: &Path, truncate: bool) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .append(!truncate)
            .truncate(truncate)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
        })
    }

    pub fn write<T: Serialize>(&mut self, phase: &str, record: &T) -> Result<()> {
        let line = serde_json::to_string(&Tagged { phase, record })?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Generates the three splits and writes them under `data/`.
pub fn cmd_gen(cfg: &RunConfig) -> Result<Splits> {
    let dir = RunDir::create(cfg)?;
    let splits = make_splits(&cfg.split, &cfg.task)?;
    for (name, ds) in [("sft", &splits.sft), ("rl", &splits.rl), ("eval", &splits.eval)] {
        write_dataset(ds, &dir.data(name))?;
    }
    log::info!(
        "wrote {} / {} / {} instances to {}",
        splits.sft.len(),
        splits.rl.len(),
        splits.eval.len(),
        dir.root.join("data").display()
    );
    Ok(splits)
}

/// Splits from `data/` when all three files exist, else regenerated from the config.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let dir = RunDir { root: cfg.run_dir() };
    let paths = ["sft", "rl", "eval"].map(|s| dir.data(s));
    if paths.iter().all(|p| p.exists()) {
        let [sft, rl, eval] = paths;
        let sft = read_dataset(&sft)?;
        if sft.responses.is_none() {
            return Err(Error::Argument("data/sft.jsonl carries no gold responses".into()));
        }
        return Ok(Splits {
            sft,
            rl: read_dataset(&rl)?,
            eval: read_dataset(&eval)?,
        });
    }
    make_splits(&cfg.split, &cfg.task)
}

pub struct SftResult {
    pub outcome: SftOutcome,
    pub eval: EvalReport,
    pub checkpoint: PathBuf,
}

/// Supervised warm-up from a fresh init. Starts a new metrics stream.
pub fn cmd_sft(cfg: &RunConfig) -> Result<SftResult> {
    let dir = RunDir::create(cfg)?;
    let splits = load_splits(cfg)?;
    sft_with(cfg, &dir, &splits)
}

fn sft_with(cfg: &RunConfig, dir: &RunDir, splits: &Splits) -> Result<SftResult> {
    let mut metrics = MetricsLog::open(&dir.metrics(), true)?;
    let init = ModelParams::<f32>::init(&cfg.model, cfg.seed)?;
    let outcome = run_sft(init, &splits.sft, &cfg.train, &mut |r| {
        if let Some(a) = r.val_acc {
            log::info!("sft step {} loss {:.4} val_acc {:.3}", r.step, r.loss, a);
        }
        metrics.write("sft", r)
    })?;
    let eval = evaluate(&outcome.params, &splits.eval.instances, &cfg.eval, None)?;
    metrics.write("sft_eval", &eval)?;
    metrics.flush()?;
    let checkpoint = dir.checkpoint(SFT_CHECKPOINT);
    save_checkpoint(&outcome.params, &checkpoint)?;
    write_json(&dir.report("sft_eval.json"), &eval)?;
    log::info!("sft done after {} steps, eval accuracy {:.3}", outcome.steps, eval.accuracy);
    Ok(SftResult {
        outcome,
        eval,
        checkpoint,
    })
}

pub struct RlResult {
    pub outcome: RlOutcome,
    pub eval: EvalReport,
    pub checkpoint: PathBuf,
}

/// RL from `init` (default `checkpoints/sft.ckpt`). Appends to the metrics stream.
pub fn cmd_rl(cfg: &RunConfig, init: Option<&Path>) -> Result<RlResult> {
    let dir = RunDir::create(cfg)?;
    let splits = load_splits(cfg)?;
    let path = init.map(Path::to_path_buf).unwrap_or_else(|| dir.checkpoint(SFT_CHECKPOINT));
    let params = load_params(cfg, &path)?;
    rl_with(cfg, &dir, &splits, &params)
}

fn rl_with(cfg: &RunConfig, dir: &RunDir, splits: &Splits, params: &ModelParams<f32>) -> Result<RlResult> {
    let mut metrics = MetricsLog::open(&dir.metrics(), false)?;
    let outcome = run_rl(params, &splits.rl, &splits.eval, &cfg.train, &mut |ev| match ev {
        RlEvent::Step(m) => {
            if let Some(a) = m.eval_acc {
                log::info!("rl step {} reward {:.3} eval_acc {:.3}", m.step, m.mean_reward, a);
            }
            metrics.write("rl", m)
        }
        RlEvent::Checkpoint { step, params } => save_checkpoint(params, &dir.checkpoint(&format!("rl_step{step:05}.ckpt"))),
    })?;
    let eval = evaluate(&outcome.params, &splits.eval.instances, &cfg.eval, None)?;
    metrics.write("rl_eval", &eval)?;
    metrics.flush()?;
    let checkpoint = dir.checkpoint(RL_CHECKPOINT);
    save_checkpoint(&outcome.params, &checkpoint)?;
    write_json(&dir.report("rl_eval.json"), &eval)?;
    if let Some(m) = &outcome.masks {
        write_json(&dir.report("masks.json"), m)?;
    }
    log::info!("rl done, eval accuracy {:.3}", eval.accuracy);
    Ok(RlResult {
        outcome,
        eval,
        checkpoint,
    })
}

fn load_params(cfg: &RunConfig, path: &Path) -> Result<ModelParams<f32>> {
    if !path.exists() {
        return Err(Error::Argument(format!("checkpoint {} does not exist", path.display())));
    }
    let p: ModelParams<f32> = load_checkpoint(path)?;
    if p.config != cfg.model {
        return Err(Error::Config(format!(
            "checkpoint {} was trained with a different model config",
            path.display()
        )));
    }
    Ok(p)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

/// Greedy evaluation on the eval split; writes `reports/eval_<checkpoint>.json`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalReport> {
    let dir = RunDir::create(cfg)?;
    let params = load_params(cfg, checkpoint)?;
    let splits = load_splits(cfg)?;
    let rep = evaluate(&params, &splits.eval.instances, &cfg.eval, None)?;
    write_json(&dir.report(&format!("eval_{}.json", stem(checkpoint))), &rep)?;
    Ok(rep)
}

pub struct PipelineResult {
    pub sft: SftResult,
    pub rl: RlResult,
}

/// gen, sft, rl and eval in one process with one metrics stream.
pub fn pipeline(cfg: &RunConfig) -> Result<PipelineResult> {
    let splits = cmd_gen(cfg)?;
    let dir = RunDir { root: cfg.run_dir() };
    let sft = sft_with(cfg, &dir, &splits)?;
    let rl = rl_with(cfg, &dir, &splits, &sft.outcome.params)?;
    Ok(PipelineResult { sft, rl })
}

/// What a saliency dump reads from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SaliencySource {
    Checkpoint(PathBuf),
    /// An `H x D` magnitude grid in the CSV format written by this command.
    Matrix(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SaliencyAxis {
    HeadDim,
    Sequence,
}

impl std::str::FromStr for SaliencyAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "head_dim" | "head-dim" | "dim" => Ok(SaliencyAxis::HeadDim),
            "sequence" | "seq" => Ok(SaliencyAxis::Sequence),
            other => Err(Error::Config(format!("unknown saliency axis `{other}`"))),
        }
    }
}

/// Writes CSV heatmaps to `reports/saliency/` and returns their paths. For a
/// head-dim grid the selected dimensions under the configured policy go to
/// a `.mask` file next to it.
pub fn cmd_saliency(cfg: &RunConfig, source: &SaliencySource, axis: SaliencyAxis) -> Result<Vec<PathBuf>> {
    let dir = RunDir::create(cfg)?;
    let out = dir.reports().join("saliency");
    let policy = cfg.train.selection()?;
    let mut written = Vec::new();
    match source {
        SaliencySource::Matrix(path) => {
            if axis != SaliencyAxis::HeadDim {
                return Err(Error::Argument("a magnitude matrix only has the head-dim axis".into()));
            }
            let m = MagnitudeMatrix::new(0, Projection::Q, read_saliency_csv(path)?)?;
            write_grid(&out, &m, &stem(path), &policy, &mut written)?;
        }
        SaliencySource::Checkpoint(path) => {
            let params = load_params(cfg, path)?;
            let splits = load_splits(cfg)?;
            let opts = ForwardOptions {
                capture: Some(cfg.train.capture),
                clamp: None,
            };
            let traces = splits
                .eval
                .instances
                .iter()
                .take(cfg.train.calib_size)
                .map(|i| {
                    forward_with(&params, &[i.prompt()], &opts)?
                        .trace
                        .ok_or_else(|| Error::Contract("forward did not capture activations".into()))
                })
                .collect::<Result<Vec<_>>>()?;
            let projections = [(Projection::Q, "q"), (Projection::K, "k")];
            for layer in 0..cfg.model.n_layers {
                for (proj, tag) in projections {
                    match axis {
                        SaliencyAxis::HeadDim => {
                            let m = compute_magnitude(&traces, layer, proj)?;
                            write_grid(&out, &m, &format!("layer{layer}_{tag}"), &policy, &mut written)?;
                        }
                        SaliencyAxis::Sequence => {
                            let trace = traces
                                .first()
                                .ok_or_else(|| Error::Argument("eval split is empty".into()))?;
                            let p = out.join(format!("layer{layer}_{tag}_sequence.csv"));
                            dump_saliency(
                                &SaliencyView::Sequence {
                                    trace,
                                    layer,
                                    projection: proj,
                                    item: 0,
                                },
                                &p,
                            )?;
                            written.push(p);
                        }
                    }
                }
            }
        }
    }
    Ok(written)
}

fn write_grid(
    out: &Path,
    m: &MagnitudeMatrix,
    name: &str,
    policy: &SelectionPolicy,
    written: &mut Vec<PathBuf>,
) -> Result<()> {
    let p = out.join(format!("{name}.csv"));
    dump_saliency(&SaliencyView::HeadDim(m), &p)?;
    let mask = build_mask(m, policy)?;
    let join = |xs: &[usize]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
    let mut text = String::new();
    for (h, dims) in mask.selected.iter().enumerate() {
        text += &format!("head {h}: {}\n", join(dims));
    }
    text += &format!("rows: {}\n", join(&mask.trainable_rows()));
    let mp = out.join(format!("{name}.mask"));
    fs::write(&mp, text).map_err(|e| Error::io(&mp, e))?;
    written.push(p);
    written.push(mp);
    Ok(())
}

/// Clamping study: the unperturbed baseline and `spec`, written as a table
/// and as JSON under `reports/`.
pub fn cmd_perturb(cfg: &RunConfig, checkpoint: &Path, spec: &PerturbSpec) -> Result<Vec<PerturbReport>> {
    spec.validate()?;
    let dir = RunDir::create(cfg)?;
    let params = load_params(cfg, checkpoint)?;
    let splits = load_splits(cfg)?;
    let calib = perturb_calibration(&params, &splits.rl, cfg.train.calib_size)?;
    let base = PerturbSpec {
        fraction: 0.0,
        ..spec.clone()
    };
    let mut rows = Vec::new();
    for s in [&base, spec] {
        let mut r = perturb_eval(&params, &splits.eval.instances, s, &calib, &cfg.eval)?;
        if s.fraction == 0.0 {
            r.label = "none".into();
        }
        rows.push(r);
    }
    let table = render_report(&rows);
    let label = spec.label();
    let tp = dir.report(&format!("perturb_{label}.txt"));
    fs::write(&tp, &table).map_err(|e| Error::io(&tp, e))?;
    write_json(&dir.report(&format!("perturb_{label}.json")), &rows)?;
    Ok(rows)
}

/// Pre-rotary activations of the first `n` prompts of `data`.
pub fn perturb_calibration(params: &ModelParams<f32>, data: &Dataset, n: usize) -> Result<Calibration> {
    let prompts: Vec<Vec<u32>> = data.instances.iter().take(n).map(|i| i.prompt()).collect();
    if prompts.is_empty() {
        return Err(Error::Argument("no calibration prompts".into()));
    }
    Calibration::from_prompts(params, &prompts)
}
