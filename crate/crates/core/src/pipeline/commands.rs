//! Command implementations behind the CLI. Each command reads its inputs,
//! writes its outputs under one directory and returns a JSON summary.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::denoiser::{decode, encode, load_checkpoint, save_checkpoint, ToyDenoiser, TrainExample};
use crate::denoiser::train_toy;
use crate::error::{Error, Result};
use crate::guidance::{
    edit, fuse, invert, reconstruct, reconstruct_with_capture, AttentionTrace, EditConfig, LossPair,
    ReferenceTrace, StepRecord,
};
use crate::pipeline::config::RunConfig;
use crate::pipeline::dataset::{caption_variants, gen_dataset};
use crate::pipeline::image_io::{read_png, write_png};
use crate::pipeline::metrics::{classify, edit_score, mask_iou, ScoreClass, DEFAULT_MASK_THRESHOLD};
use crate::pipeline::tensor_file::{attention_trace_tensor, reference_trace_tensor, write_tensor};
use crate::prompts::{make_ladder, EditDirection, PromptEmbedding, SentenceBanks};
use crate::rng::SeededRng;
use crate::schedule::{make_step_sequence, NoiseSchedule, StepSequence};
use crate::tensor::Tensor;

/// How the stand-in metrics relate to the quantities they replace; copied
/// into every metrics record.
pub const METRIC_NOTE: &str = "mask_iou (foreground-mask IoU at threshold 0.5) stands in for a \
     feature-based structure distance; class scores are template cross-correlations standing in \
     for a CLIP-based edit accuracy";

pub const CAPTIONS_FILE: &str = "captions.tsv";

/// One input image with its caption; `name` is the file stem used for
/// outputs.
#[derive(Clone, Debug)]
pub struct Entry {
    pub name: String,
    pub image: Tensor,
    pub caption: String,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Contract(format!("metrics record is not serialisable: {e}")))?;
    text.push('\n');
    write_text(path, &text)
}

/// Run `f` over `items` on `jobs` threads; results keep input order.
fn par_map<T: Sync, R: Send>(jobs: usize, items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    if jobs <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::param(format!("cannot start {jobs} worker threads: {e}")))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

/// Read a directory written by [`gen_data`]: `captions.tsv` lines of
/// `file<TAB>caption`, files relative to the directory.
pub fn read_entries(dir: &Path) -> Result<Vec<Entry>> {
    let path = dir.join(CAPTIONS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (file, caption) = line.split_once('\t').ok_or_else(|| {
            Error::Format(format!("{}:{}: expected file<TAB>caption", path.display(), n + 1))
        })?;
        out.push(Entry {
            name: Path::new(file)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| file.to_string()),
            image: read_png(&dir.join(file))?,
            caption: caption.trim().to_string(),
        });
    }
    Ok(out)
}

pub fn single_entry(image: &Path, caption: &str) -> Result<Entry> {
    Ok(Entry {
        name: image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into()),
        image: read_png(image)?,
        caption: caption.to_string(),
    })
}

/// Render the shapes dataset as PNGs plus `captions.tsv`.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let samples = gen_dataset(&cfg.dataset, cfg.seed)?;
    create_dir(out)?;
    let mut captions = String::new();
    for (i, s) in samples.iter().enumerate() {
        let file = format!("{i:05}.png");
        write_png(&out.join(&file), &s.image)?;
        captions.push_str(&format!("{file}\t{}\n", s.caption));
    }
    write_text(&out.join(CAPTIONS_FILE), &captions)?;
    Ok(json!({ "images": samples.len(), "out": out.display().to_string() }))
}

/// Train a fresh model on `entries`; each caption is expanded into its
/// variants.
pub fn train_model(cfg: &RunConfig, entries: &[Entry]) -> Result<(ToyDenoiser, Vec<f64>)> {
    let examples = entries
        .iter()
        .map(|e| {
            let prompts = caption_variants(&e.caption)
                .iter()
                .map(|c| PromptEmbedding::from_sentence(c))
                .collect::<Result<Vec<_>>>()?;
            Ok(TrainExample {
                x0: encode(&e.image, cfg.model.size)?,
                prompts,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut model = ToyDenoiser::new(cfg.model.clone(), cfg.seed)?;
    let sched = cfg.schedule()?;
    let mut rng = SeededRng::new(cfg.seed ^ 0x7a11);
    let curve = train_toy(&mut model, &examples, &sched, &cfg.train, &mut rng)?;
    Ok((model, curve.losses))
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Value> {
    let entries = read_entries(data)?;
    let (model, losses) = train_model(cfg, &entries)?;
    create_dir(out)?;
    let ckpt = out.join("model.rdmw");
    save_checkpoint(&model, &ckpt)?;
    let mut text = String::from("step\tloss\n");
    for (i, l) in losses.iter().enumerate() {
        text.push_str(&format!("{i}\t{l}\n"));
    }
    write_text(&out.join("loss.tsv"), &text)?;
    let tail = &losses[losses.len().saturating_sub(100)..];
    Ok(json!({
        "checkpoint": ckpt.display().to_string(),
        "steps": losses.len(),
        "final_loss_mean_100": tail.iter().sum::<f64>() / tail.len() as f64,
        "parameters": model.param_count(),
    }))
}

/// Model, schedule and step sequence shared by the inference commands.
pub struct Session {
    pub model: ToyDenoiser,
    pub sched: NoiseSchedule,
    pub seq: StepSequence,
    pub cfg: RunConfig,
}

impl Session {
    pub fn new(cfg: &RunConfig, model: ToyDenoiser) -> Result<Self> {
        cfg.edit.validate()?;
        let sched = cfg.schedule()?;
        let seq = make_step_sequence(&sched, cfg.edit.n_steps)?;
        Ok(Self {
            model,
            sched,
            seq,
            cfg: cfg.clone(),
        })
    }

    pub fn load(cfg: &RunConfig, checkpoint: &Path) -> Result<Self> {
        Self::new(cfg, load_checkpoint(checkpoint)?)
    }

    fn latent(&self, image: &Tensor) -> Result<Tensor> {
        encode(image, self.model.config().size)
    }

    pub fn invert(&self, entry: &Entry) -> Result<(PromptEmbedding, Tensor)> {
        let c = PromptEmbedding::from_sentence(&entry.caption)?;
        let x0 = self.latent(&entry.image)?;
        let inv = invert(&self.model, &x0, &c, &self.sched, &self.seq, &self.cfg.edit.noise_reg)?;
        Ok((c, inv.latent))
    }

    pub fn banks(&self) -> Result<SentenceBanks> {
        match &self.cfg.banks {
            Some(dir) => SentenceBanks::load_dir(dir),
            None => Ok(SentenceBanks::builtin()),
        }
    }

    /// Inversion, capture, fusion and one guided edit (plus the unguided
    /// counterpart when `ablate`).
    pub fn edit(&self, entry: &Entry, dir: &EditDirection, edit_cfg: &EditConfig, ablate: bool) -> Result<EditResult> {
        let (c, x_inv) = self.invert(entry)?;
        let ladder = make_ladder(&c, dir, edit_cfg.ladder)?;
        let (rec, trace) = reconstruct_with_capture(&self.model, &x_inv, &ladder, &self.sched, &self.seq)?;
        let reference = fuse(&trace, edit_cfg.fusion)?;
        let run = |cfg: &EditConfig| edit(&self.model, &x_inv, &c, dir, &reference, cfg, &self.sched, &self.seq, true);
        let guided = run(edit_cfg)?;
        let unguided = if ablate {
            Some(decode(&run(&edit_cfg.unguided())?.latent)?)
        } else {
            None
        };
        Ok(EditResult {
            reconstruction: decode(&rec)?,
            edited: decode(&guided.latent)?,
            unguided,
            trace,
            reference,
            records: guided.records,
        })
    }
}

pub struct EditResult {
    pub reconstruction: Tensor,
    pub edited: Tensor,
    pub unguided: Option<Tensor>,
    pub trace: AttentionTrace,
    pub reference: ReferenceTrace,
    /// Per-step losses of the guided run.
    pub records: Vec<StepRecord>,
}

impl EditResult {
    /// Guided updates after which the attention loss was higher than
    /// before: `(cross-attention, cooperative)`.
    pub fn loss_rises(&self) -> (usize, usize) {
        let rises = |pairs: Vec<Option<LossPair>>| {
            pairs
                .into_iter()
                .flatten()
                .filter(|p| p.after.is_some_and(|a| a > p.before))
                .count()
        };
        (
            rises(self.records.iter().map(|r| r.xa).collect()),
            rises(self.records.iter().map(|r| r.rev).collect()),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EditMetrics {
    pub mask_iou: f64,
    pub source_score: f64,
    pub target_score: f64,
    /// `None` when neither class scores clearly.
    pub class: Option<ScoreClass>,
    pub flipped: bool,
}

pub fn edit_metrics(input: &Tensor, output: &Tensor, source: ScoreClass, target: ScoreClass) -> Result<EditMetrics> {
    let class = classify(output, target)?;
    Ok(EditMetrics {
        mask_iou: mask_iou(output, input, DEFAULT_MASK_THRESHOLD)?,
        source_score: edit_score(output, source)?,
        target_score: edit_score(output, target)?,
        class,
        flipped: class == Some(target),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct EditRecord {
    pub image: String,
    pub caption: String,
    pub source: String,
    pub target: String,
    pub guided: EditMetrics,
    pub unguided: Option<EditMetrics>,
    pub xa_loss_rises: usize,
    pub rev_loss_rises: usize,
    pub note: &'static str,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn invert_command(session: &Session, entries: &[Entry], out: &Path, jobs: usize) -> Result<Value> {
    create_dir(out)?;
    let names = par_map(jobs, entries, |e| {
        let (c, x_inv) = session.invert(e)?;
        write_tensor(&out.join(format!("{}.x_inv.rdt", e.name)), &x_inv)?;
        let attn = crate::guidance::attention_map(&session.model, &x_inv, *session.seq.steps().last().unwrap(), &c)?;
        write_tensor(&out.join(format!("{}.attention.rdt", e.name)), &attn)?;
        Ok(e.name.clone())
    })?;
    Ok(json!({ "inverted": names }))
}

pub fn reconstruct_command(session: &Session, entries: &[Entry], out: &Path, jobs: usize) -> Result<Value> {
    create_dir(out)?;
    let records = par_map(jobs, entries, |e| {
        let (c, x_inv) = session.invert(e)?;
        let rec = reconstruct(&session.model, &x_inv, &c, &session.sched, &session.seq)?;
        let x0 = session.latent(&e.image)?;
        write_tensor(&out.join(format!("{}.rec.rdt", e.name)), &rec)?;
        write_png(&out.join(format!("{}.rec.png", e.name)), &decode(&rec)?)?;
        Ok(json!({
            "image": e.name,
            "relative_l2": rec.sub(&x0)?.l2_norm() / x0.l2_norm().max(f64::MIN_POSITIVE),
        }))
    })?;
    let summary = json!({ "records": records });
    write_json(&out.join("metrics.json"), &summary)?;
    Ok(summary)
}

/// Reconstruct directly from a stored latent.
pub fn reconstruct_latent(session: &Session, latent: &Tensor, caption: &str, out: &Path, name: &str) -> Result<Value> {
    create_dir(out)?;
    let c = PromptEmbedding::from_sentence(caption)?;
    let rec = reconstruct(&session.model, latent, &c, &session.sched, &session.seq)?;
    write_tensor(&out.join(format!("{name}.rec.rdt")), &rec)?;
    write_png(&out.join(format!("{name}.rec.png")), &decode(&rec)?)?;
    Ok(json!({ "image": name }))
}

#[allow(clippy::too_many_arguments)]
pub fn edit_command(
    session: &Session,
    entries: &[Entry],
    source: &str,
    target: &str,
    out: &Path,
    ablate: bool,
    save_traces: bool,
    jobs: usize,
) -> Result<Value> {
    let dir = session.banks()?.direction(source, target)?;
    let (src, tgt) = (ScoreClass::parse(source)?, ScoreClass::parse(target)?);
    create_dir(out)?;
    let records = par_map(jobs, entries, |e| {
        let r = session.edit(e, &dir, &session.cfg.edit, ablate)?;
        write_png(&out.join(format!("{}.edit.png", e.name)), &r.edited)?;
        if let Some(u) = &r.unguided {
            write_png(&out.join(format!("{}.unguided.png", e.name)), u)?;
        }
        if save_traces {
            write_tensor(&out.join(format!("{}.trace.rdt", e.name)), &attention_trace_tensor(&r.trace)?)?;
            write_tensor(&out.join(format!("{}.reference.rdt", e.name)), &reference_trace_tensor(&r.reference)?)?;
        }
        Ok(EditRecord {
            image: e.name.clone(),
            caption: e.caption.clone(),
            source: source.into(),
            target: target.into(),
            guided: edit_metrics(&e.image, &r.edited, src, tgt)?,
            unguided: r.unguided.as_ref().map(|u| edit_metrics(&e.image, u, src, tgt)).transpose()?,
            xa_loss_rises: r.loss_rises().0,
            rev_loss_rises: r.loss_rises().1,
            note: METRIC_NOTE,
        })
    })?;
    let n = records.len().max(1) as f64;
    let flips = |f: fn(&EditRecord) -> Option<&EditMetrics>| {
        let m: Vec<&EditMetrics> = records.iter().filter_map(f).collect();
        (!m.is_empty()).then(|| {
            json!({
                "flip_rate": m.iter().filter(|m| m.flipped).count() as f64 / m.len() as f64,
                "median_mask_iou": median(m.iter().map(|m| m.mask_iou).collect()),
            })
        })
    };
    let summary = json!({
        "images": records.len(),
        "guided": flips(|r| Some(&r.guided)),
        "unguided": flips(|r| r.unguided.as_ref()),
        "xa_loss_rises_per_image": records.iter().map(|r| r.xa_loss_rises).sum::<usize>() as f64 / n,
        "note": METRIC_NOTE,
        "records": records,
    });
    write_json(&out.join("metrics.json"), &summary)?;
    Ok(summary)
}

pub fn direction_command(cfg: &RunConfig, source: &str, target: &str, out: &Path) -> Result<Value> {
    let banks = match &cfg.banks {
        Some(dir) => SentenceBanks::load_dir(dir)?,
        None => SentenceBanks::builtin(),
    };
    let dir = banks.direction(source, target)?;
    create_dir(out)?;
    let path = out.join(format!("{source}_to_{target}.rdt"));
    write_tensor(&path, &dir.vector)?;
    Ok(json!({
        "source": source,
        "target": target,
        "norm": dir.vector.l2_norm(),
        "file": path.display().to_string(),
    }))
}

/// Class scores of `image`, and its mask IoU against `reference` if given.
pub fn metrics_command(image: &Path, reference: Option<&Path>, out: Option<&Path>) -> Result<Value> {
    let img = read_png(image)?;
    let mut scores = serde_json::Map::new();
    for class in [ScoreClass::Disc, ScoreClass::Square, ScoreClass::Solid, ScoreClass::Striped] {
        scores.insert(class.word().into(), json!(edit_score(&img, class)?));
    }
    let mut record = json!({
        "image": image.display().to_string(),
        "scores": scores,
        "shape": classify(&img, ScoreClass::Disc)?,
        "texture": classify(&img, ScoreClass::Solid)?,
        "note": METRIC_NOTE,
    });
    if let Some(r) = reference {
        record["mask_iou"] = json!(mask_iou(&img, &read_png(r)?, DEFAULT_MASK_THRESHOLD)?);
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(&dir.join("metrics.json"), &record)?;
    }
    Ok(record)
}

/// Output directory default used when `--out` is absent.
pub fn default_out() -> PathBuf {
    PathBuf::from("out")
}
