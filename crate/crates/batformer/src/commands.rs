//! Implementations of the command-line subcommands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use batformer_core::checks::{model_loss_check, primitive_checks, CheckOutcome};
use batformer_core::complexity::{analytic_summary, cost_report, efficiency_report};
use batformer_core::model::ModelConfig;
use batformer_core::synth::{Family, Sample, SampleSpec};
use batformer_core::train::{evaluate, predict as run_predict, EpochStats, Evaluation, Prediction, Trainer};
use batformer_core::{BatFormer, Tensor};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{read_dataset, read_manifest, write_dataset, ManifestRow};
use crate::error::{read, write, Error, Result};
use crate::raster::{decode_batf, save_batf, Gray};
use crate::report::{metrics_csv, summary_csv, train_log_row, windows_csv, TRAIN_LOG_HEADER};

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateArgs {
    pub out: PathBuf,
    pub n: usize,
    pub size: usize,
    pub classes: usize,
    pub family: Family,
    pub seed: u64,
    pub noise: f64,
}

pub fn generate_data(a: &GenerateArgs) -> Result<Vec<ManifestRow>> {
    let spec = SampleSpec {
        size: a.size,
        classes: a.classes,
        family: a.family,
        noise: a.noise,
    };
    write_dataset(&a.out, &spec, a.seed, a.n)
}

/// Rejects labels the model cannot represent.
fn check_labels(samples: &[Sample], classes: usize, what: &Path) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        if let Some(&l) = s.mask.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Mismatch(format!(
                "{}: sample {i} has label {l} but the model has {classes} classes",
                what.display()
            )));
        }
    }
    Ok(())
}

pub struct TrainOutcome {
    pub model: BatFormer<f32>,
    pub log: Vec<EpochStats>,
    pub test: Option<Evaluation>,
}

/// Trains from scratch as configured, writing `train_log.csv`, periodic
/// `checkpoint_EEEE.batc` files, the final `model.batc` and, with test data,
/// `test_metrics.csv` and `test_summary.csv` into `out`.
pub fn train(config: &RunConfig, out: &Path, mut progress: impl FnMut(&str)) -> Result<TrainOutcome> {
    let data_dir = config
        .data
        .as_deref()
        .ok_or_else(|| Error::Mismatch("config does not name a training dataset (data = DIR)".into()))?;
    let data = read_dataset(data_dir)?;
    check_labels(&data, config.model.num_classes, data_dir)?;
    let test = match &config.test_data {
        Some(dir) => {
            let t = read_dataset(dir)?;
            check_labels(&t, config.model.num_classes, dir)?;
            let ids: Vec<u64> = read_manifest(dir)?.iter().map(|r| r.seed).collect();
            Some((t, ids))
        }
        None => None,
    };
    let model = BatFormer::<f32>::new(config.model, config.train.seed)?;
    let mut trainer = Trainer::new(model, config.train)?;
    let mut log_text = String::from(TRAIN_LOG_HEADER);
    let mut log = Vec::new();
    let mut last_eval = None;
    for epoch in 0..config.train.epochs {
        let stats = trainer.epoch(&data, epoch).map_err(|source| Error::Training { epoch, source })?;
        let last = epoch + 1 == config.train.epochs;
        let ckpt = config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0;
        let dice = match &test {
            Some((t, _)) if ckpt || last => {
                let e = evaluate(&mut trainer.model, t, config.eval_batch)?;
                let d = e.mean_dice();
                last_eval = Some(e);
                Some(d)
            }
            _ => None,
        };
        log_text.push_str(&train_log_row(&stats, dice));
        write(&out.join("train_log.csv"), log_text.as_bytes())?;
        if ckpt && !last {
            checkpoint::save(&out.join(format!("checkpoint_{:04}.batc", epoch + 1)), &trainer.model)?;
        }
        progress(&format!(
            "epoch {:>3}  loss {:.5}  lr {}{}{}",
            epoch + 1,
            stats.mean_loss,
            stats.lr,
            if stats.backbone_frozen { "  backbone frozen" } else { "" },
            dice.map_or(String::new(), |d| format!("  test dice {d:.4}"))
        ));
        log.push(stats);
    }
    checkpoint::save(&out.join("model.batc"), &trainer.model)?;
    if let (Some((_, ids)), Some(e)) = (&test, &last_eval) {
        write(&out.join("test_metrics.csv"), metrics_csv(e, ids)?.as_bytes())?;
        write(&out.join("test_summary.csv"), summary_csv(e, config.model.num_classes)?.as_bytes())?;
    }
    Ok(TrainOutcome {
        model: trainer.model,
        log,
        test: last_eval,
    })
}

/// Evaluates a checkpoint on a dataset. Returns the evaluation with the
/// per-sample and summary CSV texts.
pub fn eval(checkpoint_path: &Path, data: &Path, batch: usize) -> Result<(Evaluation, String, String)> {
    let mut model = checkpoint::load(checkpoint_path)?;
    let samples = read_dataset(data)?;
    let classes = model.config().num_classes;
    check_labels(&samples, classes, data)?;
    let ids: Vec<u64> = read_manifest(data)?.iter().map(|r| r.seed).collect();
    let e = evaluate(&mut model, &samples, batch)?;
    let per_sample = metrics_csv(&e, &ids)?;
    let summary = summary_csv(&e, classes)?;
    Ok((e, per_sample, summary))
}

/// Reads a `.pgm` (scaled to `[0, 1]`) or a `.batf` image (`S×S` or
/// `1×S×S`).
pub fn load_image(path: &Path) -> Result<Sample> {
    let is_pgm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    let (size, image) = if is_pgm {
        let g = Gray::load(path)?;
        if g.width != g.height {
            return Err(Error::Mismatch(format!("{}: image is not square", path.display())));
        }
        (g.width, g.to_unit())
    } else {
        let t: Tensor<f32> = decode_batf(&read(path)?)?;
        match *t.shape() {
            [h, w] | [1, h, w] if h == w => (h, t.into_data()),
            ref s => return Err(Error::Mismatch(format!("{}: image shape {s:?} is not square", path.display()))),
        }
    };
    Ok(Sample {
        size,
        image,
        mask: vec![0; size * size],
    })
}

/// Writes the argmax mask to `out` (8-bit PGM of labels), one probability
/// raster per class as `<stem>_p<l>.pgm`, the exact probabilities as
/// `<stem>_probs.batf` and the selected windows as `<stem>_windows.csv`.
pub fn predict(checkpoint_path: &Path, image: &Path, out: &Path) -> Result<Prediction> {
    let mut model = checkpoint::load(checkpoint_path)?;
    let sample = load_image(image)?;
    let p = run_predict(&mut model, &[&sample], 1)?
        .pop()
        .ok_or_else(|| Error::Mismatch("no prediction".into()))?;
    let n = sample.size;
    Gray::from_u8(n, n, &p.labels).save(out)?;
    let stem = out.file_stem().map_or("prediction".into(), |s| s.to_string_lossy().into_owned());
    let dir = out.parent().unwrap_or(Path::new(""));
    let c = p.probs.shape()[0];
    for l in 0..c {
        let plane = &p.probs.data()[l * n * n..(l + 1) * n * n];
        Gray::from_unit(n, n, plane).save(&dir.join(format!("{stem}_p{l}.pgm")))?;
    }
    save_batf(&dir.join(format!("{stem}_probs.batf")), &p.probs)?;
    write(&dir.join(format!("{stem}_windows.csv")), windows_csv(&p.windows)?.as_bytes())?;
    Ok(p)
}

/// Parameter and FLOP report at 224×224 plus the analytic attention
/// comparison.
pub fn analyze(model: &ModelConfig) -> Result<String> {
    let m = BatFormer::<f32>::new(*model, 0)?;
    let eff = efficiency_report(&m, 224, 224)?;
    let mut s = cost_report(&m, 224, 224)?.to_table();
    s.push('\n');
    s.push_str(&eff.to_table());
    let c = model.base_channels as u128;
    let d = 2 * c;
    let _ = writeln!(s, "\nattention at 1024x1024, alpha 1, d {d}, C {c}");
    let _ = writeln!(s, "{}", analytic_summary(1.0, d, 1024, 1024, c));
    let _ = writeln!(s, "attention at 224x224, alpha {}, d {d}, C {c}", model.alpha);
    let _ = writeln!(s, "{}", analytic_summary(model.alpha, d, 224, 224, c));
    Ok(s)
}

/// Runs the finite-difference suite. Returns the report and whether every
/// check passed.
pub fn gradcheck(seed: u64) -> Result<(String, bool)> {
    let mut all: Vec<CheckOutcome> = primitive_checks(seed)?;
    all.push(model_loss_check(seed, 1e-5)?);
    let mut s = String::from("check                 max_rel_error  tolerance  result\n");
    for c in &all {
        let _ = writeln!(
            s,
            "{:<20} {:>14.3e} {:>10.0e}  {}",
            c.name,
            c.report.max_rel_error,
            c.tolerance,
            if c.passed() { "pass" } else { "FAIL" }
        );
    }
    Ok((s, all.iter().all(CheckOutcome::passed)))
}
