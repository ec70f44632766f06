use serde::{Deserialize, Serialize};

use super::scene::Scene;
use super::Attributes;
use crate::{Error, Result};

/// Counting answers saturate here so every answer is one token.
pub const COUNT_CAP: usize = 9;

/// A question with every referent bound to scene objects or categories.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Query {
    Exists {
        cat: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        color: Option<String>,
    },
    Color {
        object: usize,
    },
    Size {
        object: usize,
    },
    /// Strictly smaller x cell.
    LeftOf {
        object: usize,
        other: usize,
    },
    Count {
        cat: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        color: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        size: Option<String>,
    },
}

impl Query {
    pub fn kind(&self) -> &'static str {
        match self {
            Query::Exists { .. } => "exists",
            Query::Color { .. } => "color",
            Query::Size { .. } => "size",
            Query::LeftOf { .. } => "left_of",
            Query::Count { .. } => "count",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pronoun {
    It,
    He,
    Them,
}

impl Pronoun {
    pub fn word(self) -> &'static str {
        match self {
            Pronoun::It => "it",
            Pronoun::He => "he",
            Pronoun::Them => "them",
        }
    }

    /// Pronoun that refers to a single object of category `cat`.
    pub fn for_category(cat: &str) -> Pronoun {
        if cat == "person" {
            Pronoun::He
        } else {
            Pronoun::It
        }
    }
}

/// One round's resolved question, the pronoun it was asked with (if any)
/// and the oracle answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    pub query: Query,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pronoun: Option<Pronoun>,
    pub answer: String,
}

fn object(scene: &Scene, i: usize) -> Result<&super::scene::Object> {
    scene
        .objects
        .get(i)
        .ok_or_else(|| Error::Oracle(format!("unresolved referent: object {i} of {}", scene.len())))
}

fn yes_no(b: bool) -> String {
    if b { "yes" } else { "no" }.to_string()
}

/// Exact symbolic answer of `query` over `scene`.
pub fn oracle_answer(scene: &Scene, query: &Query) -> Result<String> {
    Ok(match query {
        Query::Exists { cat, color } => yes_no(
            scene
                .objects
                .iter()
                .any(|o| &o.cat == cat && color.as_ref().is_none_or(|c| &o.color == c)),
        ),
        Query::Color { object: i } => object(scene, *i)?.color.clone(),
        Query::Size { object: i } => object(scene, *i)?.size.clone(),
        Query::LeftOf { object: i, other: j } => {
            if i == j {
                return Err(Error::Oracle(format!("object {i} compared with itself")));
            }
            yes_no(object(scene, *i)?.cell[0] < object(scene, *j)?.cell[0])
        }
        Query::Count { cat, color, size } => {
            let n = scene.count(|o| {
                &o.cat == cat
                    && color.as_ref().is_none_or(|c| &o.color == c)
                    && size.as_ref().is_none_or(|s| &o.size == s)
            });
            n.min(COUNT_CAP).to_string()
        }
    })
}

/// Every query obtained by rebinding the pronoun slot of `program` to another
/// referent it could grammatically denote, the recorded binding included.
/// Programs without a pronoun have exactly one binding.
pub fn bindings(scene: &Scene, attrs: &Attributes, program: &Program) -> Vec<Query> {
    let q = &program.query;
    match (program.pronoun, q) {
        (None, _) => vec![q.clone()],
        (Some(Pronoun::Them), Query::Count { color, size, .. }) => attrs
            .categories
            .iter()
            .map(|cat| Query::Count {
                cat: cat.clone(),
                color: color.clone(),
                size: size.clone(),
            })
            .collect(),
        (Some(p), _) => {
            let compatible = |i: usize| Pronoun::for_category(&scene.objects[i].cat) == p;
            (0..scene.len())
                .filter(|&i| compatible(i))
                .filter_map(|i| match q {
                    Query::Color { .. } => Some(Query::Color { object: i }),
                    Query::Size { .. } => Some(Query::Size { object: i }),
                    Query::LeftOf { other, .. } => (i != *other).then_some(Query::LeftOf { object: i, other: *other }),
                    _ => None,
                })
                .collect()
        }
    }
}

/// Distinct answers over all bindings of the pronoun slot, sorted.
pub fn binding_answers(scene: &Scene, attrs: &Attributes, program: &Program) -> Result<Vec<String>> {
    let mut out = bindings(scene, attrs, program)
        .iter()
        .map(|q| oracle_answer(scene, q))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}
