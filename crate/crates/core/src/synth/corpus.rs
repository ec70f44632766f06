use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dialog::{generate_dialog, DialogInstance, MAX_ROUNDS, MIN_ROUNDS};
use super::scene::generate_scene;
use super::Attributes;
use crate::{Error, Result};

/// Bumped whenever question templates or answer semantics change.
pub const TEMPLATE_VERSION: u32 = 1;
/// Fresh scenes tried for one dialog slot before generation fails.
const SCENE_ATTEMPTS: usize = 10;
pub const MANIFEST_FILE: &str = "manifest.json";

fn default_objects() -> usize {
    6
}
fn default_grid() -> usize {
    4
}
fn default_rounds() -> usize {
    4
}
fn default_candidates() -> usize {
    10
}
fn default_version() -> u32 {
    TEMPLATE_VERSION
}

/// Everything that determines a corpus byte for byte.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    #[serde(default)]
    pub test: usize,
    #[serde(default = "default_objects")]
    pub objects: usize,
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_candidates")]
    pub candidates: usize,
    #[serde(default = "default_version")]
    pub template_version: u32,
    #[serde(default)]
    pub attributes: Attributes,
}

impl CorpusManifest {
    pub fn new(seed: u64, train: usize, val: usize, test: usize) -> Self {
        CorpusManifest {
            seed,
            train,
            val,
            test,
            objects: default_objects(),
            grid: default_grid(),
            rounds: default_rounds(),
            candidates: default_candidates(),
            template_version: TEMPLATE_VERSION,
            attributes: Attributes::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Corpus(m));
        if self.template_version != TEMPLATE_VERSION {
            return fail(format!(
                "template version {} is not supported (expected {TEMPLATE_VERSION})",
                self.template_version
            ));
        }
        if !(MIN_ROUNDS..=MAX_ROUNDS).contains(&self.rounds) {
            return fail(format!("rounds must lie in [{MIN_ROUNDS}, {MAX_ROUNDS}]"));
        }
        if self.grid < 2 {
            return fail("grid must be at least 2".into());
        }
        if self.candidates < 2 {
            return fail("at least two candidates are needed".into());
        }
        let a = &self.attributes;
        if a.categories.is_empty() || a.colors.len() < 2 || a.sizes.len() < 2 {
            return fail("attribute vocabularies are too small".into());
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.attributes.feature_dim()
    }

    fn offset(&self, split: Split) -> usize {
        match split {
            Split::Train => 0,
            Split::Val => self.train,
            Split::Test => self.train + self.val,
        }
    }

    pub fn size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.name())
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

/// Independent stream of dialog `index` under `seed`.
pub fn dialog_seed_stream(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn generate_one(m: &CorpusManifest, index: usize) -> Result<DialogInstance> {
    let mut rng = dialog_seed_stream(m.seed, index);
    let mut last = None;
    for _ in 0..SCENE_ATTEMPTS {
        let scene = generate_scene(&mut rng, &m.attributes, m.objects, m.grid);
        match generate_dialog(&mut rng, scene, &m.attributes, m.rounds, m.candidates, format!("d{index:06}")) {
            Ok(d) => return Ok(d),
            Err(Error::Generation(msg)) => {
                log::debug!("dialog {index}: {msg}; drawing a new scene");
                last = Some(msg);
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::Generation(format!(
        "dialog {index}: {}",
        last.unwrap_or_default()
    )))
}

/// Dialogs of one split. Ids are global so splits never share one.
pub fn generate_split(m: &CorpusManifest, split: Split) -> Result<Vec<DialogInstance>> {
    m.validate()?;
    let start = m.offset(split);
    (start..start + m.size(split))
        .into_par_iter()
        .map(|i| generate_one(m, i))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<DialogInstance>,
    pub val: Vec<DialogInstance>,
    pub test: Vec<DialogInstance>,
}

impl Corpus {
    pub fn split(&self, s: Split) -> &[DialogInstance] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub fn generate_corpus(m: &CorpusManifest) -> Result<Corpus> {
    Ok(Corpus {
        train: generate_split(m, Split::Train)?,
        val: generate_split(m, Split::Val)?,
        test: generate_split(m, Split::Test)?,
    })
}

/// Per-split dialog counts and the mix of open-question templates.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    pub dialogs: BTreeMap<String, usize>,
    pub templates: BTreeMap<String, usize>,
    pub pronoun_questions: usize,
}

impl CorpusStats {
    pub fn of(corpus: &Corpus) -> Self {
        let mut s = CorpusStats::default();
        for split in Split::ALL {
            let dialogs = corpus.split(split);
            s.dialogs.insert(split.name().to_string(), dialogs.len());
            for d in dialogs {
                let p = d.target();
                *s.templates.entry(p.query.kind().to_string()).or_default() += 1;
                s.pronoun_questions += usize::from(p.pronoun.is_some());
            }
        }
        s
    }
}

/// Writes `<split>.jsonl` for every split plus the manifest. Refuses to
/// overwrite existing files unless `force` is set.
pub fn write_corpus(m: &CorpusManifest, corpus: &Corpus, dir: &Path, force: bool) -> Result<CorpusStats> {
    let files: Vec<_> = Split::ALL
        .iter()
        .map(|s| dir.join(s.file_name()))
        .chain([dir.join(MANIFEST_FILE)])
        .collect();
    if !force {
        if let Some(existing) = files.iter().find(|p| p.exists()) {
            return Err(Error::OutputExists(existing.clone()));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for split in Split::ALL {
        let path = dir.join(split.file_name());
        let mut buf = Vec::new();
        for d in corpus.split(split) {
            serde_json::to_writer(&mut buf, d)?;
            buf.push(b'\n');
        }
        fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(&mut f, m)?;
    f.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    Ok(CorpusStats::of(corpus))
}

pub fn read_manifest(dir: &Path) -> Result<CorpusManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: CorpusManifest = serde_json::from_str(&text)?;
    m.validate()?;
    Ok(m)
}

pub fn load_split(dir: &Path, split: Split) -> Result<Vec<DialogInstance>> {
    let path = dir.join(split.file_name());
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let d = serde_json::from_str(&line)
            .map_err(|e| Error::Corpus(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(d);
    }
    Ok(out)
}
