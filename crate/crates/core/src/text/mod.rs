//! Vocabulary and text encoders.

mod encoders;
mod vocab;

pub use encoders::{
    embed_tokens, encode_history, encode_question, encode_sentence, history_attention,
    lstm_encode, question_command, CommandParams, EncodedHistory, EncodedQuestion,
    HistoryAttnParams, HistoryContext, LstmOutput, LstmParams, QuestionCommand,
};
pub use vocab::{Vocab, PAD, PAD_TOKEN, UNK, UNK_TOKEN};

/// Lowercased whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Truncation lengths for captions, questions and answers.
pub const MAX_CAPTION_LEN: usize = 40;
pub const MAX_QUESTION_LEN: usize = 20;
pub const MAX_ANSWER_LEN: usize = 20;
