use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use ltm_core::data::{load_idx, write_idx, BlobConfig, Dataset};
use ltm_core::flops::model_flops;
use ltm_core::ib::{self, gradcheck as run_gradcheck};
use ltm_core::trainer::{block_masks, evaluate as run_evaluate, Checkpoint, EpochLog, TrainConfig, Trainer};
use ltm_core::transformer::ModelSpec;
use serde::de::DeserializeOwned;
use serde_json::json;

use crate::CliError;

type Result<T = ()> = std::result::Result<T, CliError>;

/// Buffered writer on `path`, or stdout.
fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| io_err(p, e))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn io_err(path: &Path, e: io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{what} {}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn gen_data(
    out: &Path,
    size: usize,
    classes: usize,
    sigma: f64,
    train_per_class: usize,
    test_per_class: usize,
    seed: u64,
) -> Result {
    let cfg = BlobConfig {
        height: size,
        width: size,
        classes,
        sigma,
        seed,
    };
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    for (name, per_class, stream) in [("train", train_per_class, 0), ("test", test_per_class, 1)] {
        let data = cfg.generate(per_class, stream)?;
        let images = out.join(format!("{name}-images.idx"));
        write_idx(&data, &images, &out.join(format!("{name}-labels.idx")))?;
        println!("{name}: {} images of {size}x{size}, {classes} classes", data.len());
    }
    Ok(())
}

fn epoch_line(h: &EpochLog) -> String {
    let mut s = format!(
        "epoch {:>3}  lr {:.6}  {}  train loss {:.6} acc {:.4}",
        h.epoch,
        h.lr,
        if h.merging { "merge" } else { "warm " },
        h.train_loss,
        h.train_accuracy
    );
    if let (Some(l), Some(a)) = (h.test_loss, h.test_accuracy) {
        s.push_str(&format!("  test loss {l:.6} acc {a:.4}"));
    }
    s
}

pub fn train(
    config: Option<&Path>,
    checkpoint: Option<PathBuf>,
    report: Option<PathBuf>,
    resume: Option<&Path>,
) -> Result {
    let ckpt = resume.map(load_checkpoint).transpose()?;
    let mut cfg: TrainConfig = match (&ckpt, config) {
        (Some(c), _) => c.config.clone(),
        (None, Some(p)) => read_json(p, "config")?,
        (None, None) => return Err(CliError::Usage("train needs --config or --resume".into())),
    };
    let ckpt_path = checkpoint
        .or_else(|| cfg.checkpoint.clone())
        .or_else(|| resume.map(Path::to_path_buf))
        .ok_or_else(|| {
            CliError::Usage("no checkpoint path: set `checkpoint` in the config or pass --checkpoint".into())
        })?;
    let report_path = report.or_else(|| cfg.report.clone());
    let (train_set, test_set) = cfg.load_data()?;

    let mut trainer = match ckpt {
        Some(c) => Trainer::resume(c, &train_set, test_set.as_ref())?,
        None => {
            cfg.checkpoint = Some(ckpt_path.clone());
            cfg.report = report_path.clone();
            Trainer::new(cfg, &train_set, test_set.as_ref())?
        }
    };
    let stdout = io::stdout();
    while !trainer.finished() {
        let line = epoch_line(trainer.run_epoch()?);
        writeln!(stdout.lock(), "{line}")?;
        trainer.checkpoint().save(&ckpt_path)?;
    }
    let ck = trainer.checkpoint();
    ck.save(&ckpt_path)?;
    if let Some(p) = &report_path {
        ib::write_csv(&ck.reports, sink(Some(p))?)?;
    }
    println!("checkpoint {}", ckpt_path.display());
    Ok(())
}

/// The dataset named on the command line, else the checkpoint's test set.
fn eval_set(ck: &Checkpoint, files: Option<(PathBuf, PathBuf)>) -> Result<Dataset> {
    match files {
        Some((images, labels)) => Ok(load_idx(&images, &labels, Some(ck.model.spec.classes))?),
        None => ck.config.load_data()?.1.ok_or_else(|| {
            CliError::Usage("the checkpoint's config has no test set; pass --images and --labels".into())
        }),
    }
}

pub fn eval(checkpoint: &Path, files: Option<(PathBuf, PathBuf)>, as_json: bool) -> Result {
    let ck = load_checkpoint(checkpoint)?;
    let data = eval_set(&ck, files)?;
    let ev = run_evaluate(&ck, &data, "eval")?;
    let mut out = sink(None)?;
    if as_json {
        let v = json!({
            "epoch": ck.epoch,
            "samples": data.len(),
            "accuracy": ev.accuracy,
            "loss": ev.loss,
            "layers": ev.report.as_ref().map(|r| &r.layers),
        });
        writeln!(out, "{}", serde_json::to_string_pretty(&v).expect("plain values"))?;
        return Ok(out.flush()?);
    }
    writeln!(out, "epoch {}  samples {}", ck.epoch, data.len())?;
    writeln!(out, "accuracy {:.4}", ev.accuracy)?;
    writeln!(out, "loss {:.6}", ev.loss)?;
    if let Some(r) = &ev.report {
        writeln!(
            out,
            "{:>5} {:>12} {:>12} {:>12} {:>12} {:>12}",
            "layer", "I(X~;X)", "I(X~;Y)", "ib", "ibb", "c0"
        )?;
        for l in &r.layers {
            writeln!(
                out,
                "{:>5} {:>12.6} {:>12.6} {:>12.6} {:>12.6} {:>12.6}",
                l.layer, l.i_xtilde_x, l.i_xtilde_y, l.ib_loss, l.ibb, l.c0
            )?;
        }
    }
    Ok(out.flush()?)
}

pub fn gradcheck(trials: usize, seed: u64) -> Result {
    let r = run_gradcheck(trials, seed)?;
    println!(
        "trials {}  max relative error {:.3e}  tolerance {:.0e}  failures {}",
        r.trials,
        r.max_rel_err,
        ib::GRADCHECK_TOL,
        r.failures
    );
    if r.passed() {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "{} of {} trials exceed the tolerance",
            r.failures, r.trials
        )))
    }
}

pub fn ib_report(checkpoint: &Path, out: Option<&Path>) -> Result {
    let ck = load_checkpoint(checkpoint)?;
    let mut w = sink(out)?;
    ib::write_csv(&ck.reports, &mut w)?;
    Ok(w.flush()?)
}

pub fn flops(spec: &Path, ratio: Option<f64>, csv: bool, out: Option<&Path>) -> Result {
    let mut spec: ModelSpec = read_json(spec, "spec")?;
    if let Some(r) = ratio {
        for s in &mut spec.stages {
            s.ratio = r;
        }
    }
    let report = model_flops(&spec)?;
    let mut w = sink(out)?;
    if csv {
        report.write_csv(&mut w)?;
    } else {
        writeln!(w, "{report}")?;
    }
    Ok(w.flush()?)
}

pub fn export_mask(
    checkpoint: &Path,
    block: usize,
    samples: &[usize],
    files: Option<(PathBuf, PathBuf)>,
    out: Option<&Path>,
) -> Result {
    let ck = load_checkpoint(checkpoint)?;
    let depth = ck.model.layout().len();
    if block >= depth {
        return Err(CliError::Usage(format!(
            "block {block} out of range; the model has {depth} blocks"
        )));
    }
    let data = eval_set(&ck, files)?;
    if let Some(&bad) = samples.iter().find(|&&s| s >= data.len()) {
        return Err(CliError::Usage(format!(
            "sample {bad} out of range; the set has {} samples",
            data.len()
        )));
    }
    let masks = block_masks(&ck, &data.images.select0(samples))?;
    let mask = masks[block]
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("block {block} builds no mask at epoch {}", ck.epoch)))?;
    let (n, p) = (mask.shape()[1], mask.shape()[2]);
    let mut w = sink(out)?;
    writeln!(w, "sample,token,merged,weight")?;
    for (b, &s) in samples.iter().enumerate() {
        for i in 0..n {
            for j in 0..p {
                writeln!(w, "{s},{i},{j},{}", mask.at(&[b, i, j]))?;
            }
        }
    }
    Ok(w.flush()?)
}
