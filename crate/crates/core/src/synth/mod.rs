//! Synthetic grounded dialogs: toy scenes, templated multi-round questions
//! with pronoun chains, and a symbolic oracle answering every question.

mod corpus;
mod dialog;
mod oracle;
mod scene;

pub use corpus::{
    dialog_seed_stream, generate_corpus, generate_split, load_split, read_manifest, write_corpus, Corpus,
    CorpusManifest, CorpusStats, Split, MANIFEST_FILE, TEMPLATE_VERSION,
};
pub use dialog::{generate_dialog, DialogInstance, FINAL_PRONOUN_PROB, MAX_ATTEMPTS, MAX_ROUNDS, MIN_ROUNDS};
pub use oracle::{binding_answers, bindings, oracle_answer, Program, Pronoun, Query, COUNT_CAP};
pub use scene::{clamp_objects, encode_features, generate_scene, Object, Scene, MAX_OBJECTS, MIN_OBJECTS};

use serde::{Deserialize, Serialize};

/// Attribute vocabularies a corpus draws from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attributes {
    pub categories: Vec<String>,
    pub colors: Vec<String>,
    pub sizes: Vec<String>,
}

impl Default for Attributes {
    fn default() -> Self {
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Attributes {
            categories: v(&["person", "dog", "cat", "car", "tree", "ball"]),
            colors: v(&["red", "blue", "green", "yellow", "white", "black"]),
            sizes: v(&["small", "medium", "large"]),
        }
    }
}

impl Attributes {
    /// One-hot blocks plus two position coordinates.
    pub fn feature_dim(&self) -> usize {
        self.categories.len() + self.colors.len() + self.sizes.len() + 2
    }
}

pub fn plural(cat: &str) -> String {
    match cat {
        "person" => "people".to_string(),
        _ => format!("{cat}s"),
    }
}
