use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{dataset_digest, generate_dataset, read_dataset, write_dataset, LabeledSample};
use crate::error::{Error, Result};
use crate::training::{
    evaluate, gradcheck_model, history_csv, load_checkpoint, save_checkpoint, split_indices, train_on, AblationFlags,
    Batch, EpochRecord, FusionModel, GradcheckReport, Metrics,
};

use super::run_config::RunConfig;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "GATEFUSE_OUT";

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// `--out`, then `output_dir` from the config, then `$GATEFUSE_OUT/<stem>`,
/// then `runs/<stem>`.
pub fn output_dir(cfg: &RunConfig, config_path: &Path, out: Option<&Path>) -> PathBuf {
    if let Some(o) = out {
        return o.to_path_buf();
    }
    if let Some(o) = &cfg.output_dir {
        return o.clone();
    }
    let stem = config_path.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
    match std::env::var_os(OUT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(stem),
        _ => PathBuf::from("runs").join(stem),
    }
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Vec<LabeledSample>> {
    match &cfg.dataset_path {
        Some(path) => {
            let (spec, samples) = read_dataset(path)?;
            if spec.d_model != cfg.model.d_model || spec.num_classes != cfg.model.num_classes {
                return Err(Error::config(format!(
                    "{} holds d_model={} num_classes={}, model expects {} and {}",
                    path.display(),
                    spec.d_model,
                    spec.num_classes,
                    cfg.model.d_model,
                    cfg.model.num_classes
                )));
            }
            Ok(samples)
        }
        None => generate_dataset(&cfg.dataset),
    }
}

/// Writes `config.resolved` and `manifest.txt` into `dir`.
pub fn write_provenance(dir: &Path, cfg: &RunConfig, command: &str, dataset_digest: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.resolved"), cfg.resolved())?;
    let manifest = format!(
        "tool = {} {}\ncommand = {command}\nseed = {}\ndataset_digest = {dataset_digest}\nconfig_digest = {}\n",
        env!("CARGO_PKG_NAME"),
        env!("CARGO_PKG_VERSION"),
        cfg.seed,
        crate::config::sha256_hex(cfg.resolved().as_bytes()),
    );
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

pub fn cmd_generate(cfg: &RunConfig, dir: &Path, out_file: Option<&Path>) -> Result<PathBuf> {
    let samples = generate_dataset(&cfg.dataset)?;
    let path = out_file.map_or_else(|| dir.join("dataset.tsv"), Path::to_path_buf);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_dataset(&path, &cfg.dataset, &samples)?;
    write_provenance(dir, cfg, "generate", &dataset_digest(&samples))?;
    Ok(path)
}

/// What `cmd_train` leaves behind.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub dir: PathBuf,
    pub metrics: Metrics,
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
}

fn epochs_csv(epochs: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,mean_l_ce,mean_l_contrast,mean_l_moe,mean_total,val_accuracy,val_macro_f1\n");
    for e in epochs {
        let (acc, f1) = e
            .metrics
            .as_ref()
            .map_or((String::new(), String::new()), |m| (format!("{:?}", m.accuracy), format!("{:?}", m.macro_f1)));
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?},{:?},{acc},{f1}",
            e.epoch, e.mean_l_ce, e.mean_l_contrast, e.mean_l_moe, e.mean_total
        );
    }
    out
}

fn routing_csv(epochs: &[EpochRecord], num_experts: usize) -> String {
    let mut out = String::from("epoch");
    for e in 0..num_experts {
        let _ = write!(out, ",expert{e}");
    }
    out.push('\n');
    for e in epochs {
        if let Some(f) = &e.expert_fraction {
            let _ = write!(out, "{}", e.epoch);
            for v in f {
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        }
    }
    out
}

fn gate_csv(epochs: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,gate_mean,gate_std\n");
    for e in epochs {
        if let Some((m, s)) = e.gate {
            let _ = writeln!(out, "{},{m:?},{s:?}", e.epoch);
        }
    }
    out
}

/// Writes `<prefix>.csv`, `<prefix>_per_class.csv`, `<prefix>.txt` and
/// `<prefix>_confusion.csv`.
pub fn write_metrics(dir: &Path, prefix: &str, m: &Metrics) -> Result<()> {
    fs::write(dir.join(format!("{prefix}.csv")), m.summary_csv())?;
    fs::write(dir.join(format!("{prefix}_per_class.csv")), m.per_class_csv())?;
    fs::write(dir.join(format!("{prefix}_confusion.csv")), m.confusion_csv())?;
    fs::write(dir.join(format!("{prefix}.txt")), m.report())?;
    Ok(())
}

/// Held-out split, or the whole dataset when nothing is held out.
fn eval_split<'a>(cfg: &RunConfig, samples: &'a [LabeledSample]) -> Result<(Vec<&'a LabeledSample>, Vec<&'a LabeledSample>)> {
    let split = split_indices(samples.len(), cfg.train.val_fraction, cfg.train.seed)?;
    let train: Vec<&LabeledSample> = split.train.iter().map(|&i| &samples[i]).collect();
    let val: Vec<&LabeledSample> = if split.val.is_empty() {
        train.clone()
    } else {
        split.val.iter().map(|&i| &samples[i]).collect()
    };
    Ok((train, val))
}

/// Trains (optionally continuing from a checkpoint) and writes the
/// checkpoint, history, per-epoch aggregates and final held-out metrics.
pub fn cmd_train(cfg: &RunConfig, dir: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    let samples = load_dataset(cfg)?;
    train_samples(cfg, dir, resume, &samples)
}

pub(crate) fn train_samples(
    cfg: &RunConfig,
    dir: &Path,
    resume: Option<&Path>,
    samples: &[LabeledSample],
) -> Result<TrainSummary> {
    write_provenance(dir, cfg, "train", &dataset_digest(samples))?;
    let mut model = match resume {
        Some(path) => load_checkpoint(path, cfg.model.clone())?,
        None => FusionModel::new(cfg.model.clone())?,
    };
    let first = samples.first().ok_or_else(|| Error::contract("dataset is empty"))?;
    model.check_shapes(first.image.seq_len(), first.text.seq_len())?;
    let (train_set, val_set) = eval_split(cfg, samples)?;
    let (history, epochs) = if cfg.train.epochs == 0 {
        (Vec::new(), Vec::new())
    } else {
        let held_out = if cfg.train.val_fraction > 0.0 { &val_set[..] } else { &[] };
        train_on(&mut model, &train_set, held_out, &cfg.train)?
    };
    save_checkpoint(&dir.join(CHECKPOINT_FILE), &model)?;
    fs::write(dir.join("history.csv"), history_csv(&history))?;
    fs::write(dir.join("epochs.csv"), epochs_csv(&epochs))?;
    fs::write(dir.join("routing.csv"), routing_csv(&epochs, cfg.model.num_experts))?;
    fs::write(dir.join("gate_stats.csv"), gate_csv(&epochs))?;
    let metrics = evaluate(&model, &val_set, cfg.train.batch_size)?;
    write_metrics(dir, "metrics", &metrics)?;
    Ok(TrainSummary {
        dir: dir.to_path_buf(),
        metrics,
        epochs,
        steps: history.len(),
    })
}

/// Evaluates a checkpoint on the held-out split of the configured dataset.
pub fn cmd_eval(cfg: &RunConfig, dir: &Path, checkpoint: &Path) -> Result<Metrics> {
    let samples = load_dataset(cfg)?;
    write_provenance(dir, cfg, "eval", &dataset_digest(&samples))?;
    let model = load_checkpoint(checkpoint, cfg.model.clone())?;
    let (_, val) = eval_split(cfg, &samples)?;
    let metrics = evaluate(&model, &val, cfg.train.batch_size)?;
    write_metrics(dir, "eval", &metrics)?;
    Ok(metrics)
}

/// One ablation variant: a name and the flags it sets on top of the base
/// config.
pub fn ablation_variants() -> Vec<(&'static str, AblationFlags)> {
    let f = AblationFlags::default();
    vec![
        ("full", f),
        ("without_contrastive", AblationFlags { disable_contrastive: true, ..f }),
        ("without_q_transform", AblationFlags { disable_q_transform: true, ..f }),
        ("without_gating", AblationFlags { disable_gating: true, ..f }),
        ("without_q_bottleneck", AblationFlags { disable_q_bottleneck: true, ..f }),
        ("without_moe", AblationFlags { disable_moe: true, ..f }),
        ("image_only", AblationFlags { image_only: true, ..f }),
        ("text_only", AblationFlags { text_only: true, ..f }),
    ]
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: String,
    pub flags: AblationFlags,
    pub result: std::result::Result<Metrics, String>,
}

/// Per-variant metrics with the full model as the first row.
#[derive(Clone, Debug)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

const SUBSTITUTIONS: &str = "\
# without_contrastive: contrastive weight set to 0
# without_q_transform: first l encoder tokens, mean-padded when shorter
# without_gating: fixed gate a = 0.5
# without_q_bottleneck: fused tokens mean-pooled over two halves
# without_moe: one dense MLP with about the same parameter count
# image_only / text_only: one modality's distilled tokens go straight to the bottleneck
";

impl AblationReport {
    pub fn baseline(&self) -> Option<&Metrics> {
        self.rows.first().and_then(|r| r.result.as_ref().ok())
    }

    pub fn get(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    fn values(m: &Metrics) -> [f64; 4] {
        [m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "variant,accuracy,macro_precision,macro_recall,macro_f1,\
             delta_accuracy,delta_macro_precision,delta_macro_recall,delta_macro_f1,status\n",
        );
        let base = self.baseline().map(Self::values);
        for r in &self.rows {
            match &r.result {
                Ok(m) => {
                    let v = Self::values(m);
                    let _ = write!(out, "{}", r.variant);
                    for x in v {
                        let _ = write!(out, ",{x:?}");
                    }
                    for (i, x) in v.iter().enumerate() {
                        match base {
                            Some(b) => {
                                let _ = write!(out, ",{:?}", x - b[i]);
                            }
                            None => out.push(','),
                        }
                    }
                    out.push_str(",ok\n");
                }
                Err(e) => {
                    let _ = writeln!(out, "{},,,,,,,,,error: {}", r.variant, e.replace([',', '\n'], ";"));
                }
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(SUBSTITUTIONS);
        out.push('\n');
        let _ = writeln!(
            out,
            "{:<22} {:>8} {:>9} {:>9} {:>9} {:>9}",
            "variant", "accuracy", "precision", "recall", "F1", "ΔF1"
        );
        let base = self.baseline().map(Self::values);
        for r in &self.rows {
            match &r.result {
                Ok(m) => {
                    let v = Self::values(m);
                    let delta = base.map_or(String::from("-"), |b| format!("{:+.4}", v[3] - b[3]));
                    let _ = writeln!(
                        out,
                        "{:<22} {:>8.4} {:>9.4} {:>9.4} {:>9.4} {:>9}",
                        r.variant, v[0], v[1], v[2], v[3], delta
                    );
                }
                Err(e) => {
                    let _ = writeln!(out, "{:<22} failed: {e}", r.variant);
                }
            }
        }
        out
    }
}

/// Trains the full model and every variant on the same data and seeds, each
/// in its own subdirectory. A failing variant is recorded and the rest run.
pub fn cmd_ablate(cfg: &RunConfig, dir: &Path) -> Result<AblationReport> {
    let samples = load_dataset(cfg)?;
    write_provenance(dir, cfg, "ablate", &dataset_digest(&samples))?;
    let mut rows = Vec::new();
    for (name, flags) in ablation_variants() {
        let mut variant = cfg.clone();
        variant.model.ablation = flags;
        let result = train_samples(&variant, &dir.join(name), None, &samples)
            .map(|s| s.metrics)
            .map_err(|e| e.to_string());
        rows.push(AblationRow {
            variant: name.to_string(),
            flags,
            result,
        });
    }
    let report = AblationReport { rows };
    fs::write(dir.join("ablation.csv"), report.to_csv())?;
    fs::write(dir.join("ablation.txt"), report.to_text())?;
    Ok(report)
}

/// Finite-difference check of the configured model on a seeded batch.
pub fn cmd_gradcheck(cfg: &RunConfig, dir: &Path) -> Result<GradcheckReport> {
    let samples = load_dataset(cfg)?;
    write_provenance(dir, cfg, "gradcheck", &dataset_digest(&samples))?;
    let g = &cfg.gradcheck;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let picked: Vec<&LabeledSample> = order.iter().take(g.batch_size).map(|&i| &samples[i]).collect();
    let batch = Batch::from_samples(&picked, false)?;
    let mut model = FusionModel::new(cfg.model.clone())?;
    let report = gradcheck_model(&mut model, &batch, g.step, g.tolerance, g.max_coords, cfg.seed)?;
    fs::write(dir.join("gradcheck.csv"), report.to_csv())?;
    fs::write(dir.join("gradcheck.txt"), report.to_text())?;
    Ok(report)
}
