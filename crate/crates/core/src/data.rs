//! Turning generated dialogs into model inputs.

use crate::model::Example;
use crate::synth::DialogInstance;
use crate::tensor::Tensor;
use crate::text::{Vocab, MAX_ANSWER_LEN, MAX_CAPTION_LEN, MAX_QUESTION_LEN};
use crate::{Error, Result};

/// Every token of captions, history, questions and candidates.
pub fn dialog_tokens(d: &DialogInstance) -> impl Iterator<Item = &str> {
    d.caption
        .iter()
        .chain(d.history.iter().flat_map(|(q, a)| q.iter().chain(a)))
        .chain(&d.question)
        .chain(d.candidates.iter().flatten())
        .map(String::as_str)
}

pub fn build_vocab(dialogs: &[DialogInstance], min_count: usize) -> Vocab {
    Vocab::build(dialogs.iter().flat_map(dialog_tokens), min_count)
}

/// Id form of `d`: object features as columns, caption then one
/// `question answer` sequence per history round.
pub fn encode_dialog(vocab: &Vocab, d: &DialogInstance) -> Result<Example> {
    let n = d.scene.objects.len();
    let d_v = d.scene.objects.first().map_or(0, |o| o.feat.len());
    if n == 0 || d_v == 0 {
        return Err(Error::Corpus(format!("dialog {} has an empty scene", d.id)));
    }
    let mut features = Tensor::zeros(&[d_v, n])?;
    for (j, o) in d.scene.objects.iter().enumerate() {
        if o.feat.len() != d_v {
            return Err(Error::Corpus(format!("dialog {}: ragged object features", d.id)));
        }
        for (r, &v) in o.feat.iter().enumerate() {
            features.set(r, j, v);
        }
    }
    let mut history = vec![vocab.encode(&d.caption, MAX_CAPTION_LEN)];
    for (q, a) in &d.history {
        let mut round = vocab.encode(q, MAX_QUESTION_LEN);
        round.extend(vocab.encode(a, MAX_ANSWER_LEN));
        history.push(round);
    }
    Ok(Example {
        features,
        history,
        question: vocab.encode(&d.question, MAX_QUESTION_LEN),
        candidates: d.candidates.iter().map(|c| vocab.encode(c, MAX_ANSWER_LEN)).collect(),
        gt: d.gt,
    })
}

pub fn encode_all(vocab: &Vocab, dialogs: &[DialogInstance]) -> Result<Vec<Example>> {
    dialogs.iter().map(|d| encode_dialog(vocab, d)).collect()
}
