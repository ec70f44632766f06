use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::trace::{trace_example, TraceFile};
use crate::data::{build_vocab, encode_all, encode_dialog};
use crate::decoder::{OptimState, RankReport};
use crate::model::ModelParams;
use crate::synth::{generate_corpus, load_split, read_manifest, write_corpus, CorpusManifest, CorpusStats, DialogInstance, Split};
use crate::train::{evaluate, train, EpochLog, TrainOptions};
use crate::{Error, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "log.jsonl";

/// Generates the corpus described by the manifest at `manifest` into `out`.
pub fn cmd_gen(manifest: &Path, out: &Path, force: bool) -> Result<CorpusStats> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let m: CorpusManifest = serde_json::from_str(&text)?;
    m.validate()?;
    let corpus = generate_corpus(&m)?;
    write_corpus(&m, &corpus, out, force)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub best: Option<EpochLog>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

fn check_features(dialogs: &[DialogInstance], d_v: usize, split: Split) -> Result<()> {
    for d in dialogs {
        if let Some(o) = d.scene.objects.iter().find(|o| o.feat.len() != d_v) {
            return Err(Error::DimMismatch {
                name: format!("d_v ({split} dialog {})", d.id),
                expected: d_v,
                found: o.feat.len(),
            });
        }
    }
    Ok(())
}

/// Trains on `corpus/train.jsonl`, validating on `corpus/val.jsonl` after
/// every epoch. Writes the per-epoch log and the best-MRR checkpoint to `out`.
pub fn cmd_train(mut cfg: RunConfig, corpus: &Path, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = read_manifest(corpus)?;
    let d_v = manifest.feature_dim();
    if let Some(want) = cfg.d_v {
        if want != d_v {
            return Err(Error::DimMismatch {
                name: "d_v".into(),
                expected: want,
                found: d_v,
            });
        }
    }
    let train_dialogs = load_split(corpus, Split::Train)?;
    let val_dialogs = load_split(corpus, Split::Val)?;
    check_features(&train_dialogs, d_v, Split::Train)?;
    check_features(&val_dialogs, d_v, Split::Val)?;
    if train_dialogs.is_empty() && cfg.epochs > 0 {
        return Err(Error::Corpus("training split is empty".into()));
    }
    let vocab = build_vocab(&train_dialogs, cfg.min_count);
    let train_set = encode_all(&vocab, &train_dialogs)?;
    let val_set = encode_all(&vocab, &val_dialogs)?;

    cfg.corpus = Some(corpus.to_path_buf());
    cfg.out = Some(out.to_path_buf());
    let model = cfg.model(d_v, vocab.len());
    let (mut store, params) = ModelParams::init(&model, cfg.seed)?;
    let mut optim = OptimState::new(&store, cfg.lr);

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let log_path = out.join(LOG_FILE);
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;

    let snapshot = |store: &crate::tensor::ParamStore, optim: &OptimState| Checkpoint {
        run: cfg.clone(),
        model,
        vocab: vocab.clone(),
        store: store.clone(),
        optim: optim.clone(),
    };
    if cfg.epochs == 0 {
        snapshot(&store, &optim).save(&ckpt_path)?;
    }
    let mut best: Option<EpochLog> = None;
    let opts = TrainOptions {
        epochs: cfg.epochs,
        accumulate: cfg.accumulate,
        seed: cfg.seed,
    };
    let logs = train(&mut store, &params, &model, &mut optim, &train_set, &val_set, &opts, |row, store, optim| {
        let line = serde_json::to_string(row)?;
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        // Without a validation split every epoch counts as the best so far.
        let improved = best.is_none_or(|b| row.mrr > b.mrr || row.mrr.is_nan());
        if improved {
            best = Some(*row);
            snapshot(store, optim).save(&ckpt_path)?;
        }
        Ok(())
    })?;
    Ok(TrainOutcome {
        logs,
        best,
        checkpoint: ckpt_path,
        log: log_path,
    })
}

fn corpus_dir(ck: &Checkpoint, corpus: Option<&Path>) -> Result<PathBuf> {
    corpus
        .map(Path::to_path_buf)
        .or_else(|| ck.run.corpus.clone())
        .ok_or_else(|| Error::Config("no corpus given and none recorded in the checkpoint".into()))
}

fn check_corpus(ck: &Checkpoint, dir: &Path) -> Result<()> {
    let m = read_manifest(dir)?;
    if m.feature_dim() != ck.model.d_v {
        return Err(Error::DimMismatch {
            name: "d_v".into(),
            expected: ck.model.d_v,
            found: m.feature_dim(),
        });
    }
    Ok(())
}

/// Rank metrics of a checkpoint on one split, with optional ablations
/// switched on for this evaluation only.
pub fn cmd_eval(ckpt: &Path, split: Split, corpus: Option<&Path>, ablations: &[String]) -> Result<RankReport> {
    let ck = Checkpoint::load(ckpt)?;
    let params = ck.params()?;
    let dir = corpus_dir(&ck, corpus)?;
    check_corpus(&ck, &dir)?;
    let mut flags = ck.model.flags;
    for a in ablations {
        flags.ablate(a)?;
    }
    let examples = encode_all(&ck.vocab, &load_split(&dir, split)?)?;
    evaluate(&ck.store, &params, &ck.model, &flags, &examples)
}

/// Looks a dialog up by id across all splits.
pub fn find_dialog(dir: &Path, id: &str) -> Result<DialogInstance> {
    for split in Split::ALL {
        let path = dir.join(split.file_name());
        if !path.exists() {
            continue;
        }
        if let Some(d) = load_split(dir, split)?.into_iter().find(|d| d.id == id) {
            return Ok(d);
        }
    }
    Err(Error::InvalidArgument(format!("unknown dialog id {id:?}")))
}

/// Exports the attention/graph trace of dialog `id` to `out`.
pub fn cmd_trace(ckpt: &Path, id: &str, out: &Path, corpus: Option<&Path>) -> Result<TraceFile> {
    let ck = Checkpoint::load(ckpt)?;
    let params = ck.params()?;
    let dir = corpus_dir(&ck, corpus)?;
    check_corpus(&ck, &dir)?;
    let dialog = find_dialog(&dir, id)?;
    let ex = encode_dialog(&ck.vocab, &dialog)?;
    let trace = trace_example(&ck.store, &params, &ck.model, &ck.model.flags, &ex, id, &dialog.question)?;
    trace.write(out, ex.objects(), ex.question.len(), ex.history.len())?;
    Ok(trace)
}
