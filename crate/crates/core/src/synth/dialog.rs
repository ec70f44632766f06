use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::oracle::{binding_answers, oracle_answer, Program, Pronoun, Query, COUNT_CAP};
use super::scene::Scene;
use super::{plural, Attributes};
use crate::{Error, Result};

pub const MIN_ROUNDS: usize = 2;
pub const MAX_ROUNDS: usize = 10;
/// Attempts per template slot before the dialog is rejected.
pub const MAX_ATTEMPTS: usize = 100;
/// Chance that the last question uses a pronoun once an earlier one did.
pub const FINAL_PRONOUN_PROB: f64 = 0.75;
/// Chance that a free round refers back by pronoun when it can.
pub const FREE_PRONOUN_PROB: f64 = 0.3;

/// One dialog turn: scene, caption, answered rounds, the open question and
/// its candidate answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogInstance {
    pub id: String,
    pub scene: Scene,
    pub caption: Vec<String>,
    /// `(question, answer)` token pairs.
    pub history: Vec<(Vec<String>, Vec<String>)>,
    pub question: Vec<String>,
    pub candidates: Vec<Vec<String>>,
    pub gt: usize,
    /// Resolved query of every history round, then of the open question.
    pub programs: Vec<Program>,
}

impl DialogInstance {
    /// Program of the open question.
    pub fn target(&self) -> &Program {
        self.programs.last().expect("dialog has at least one program")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Subject {
    Object(usize),
    Group(String),
}

struct Round {
    question: Vec<String>,
    program: Program,
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn unique_category(scene: &Scene, i: usize) -> bool {
    let cat = &scene.objects[i].cat;
    scene.count(|o| &o.cat == cat) == 1
}

fn unique_pair(scene: &Scene, i: usize) -> bool {
    let o = &scene.objects[i];
    scene.count(|p| p.cat == o.cat && p.color == o.color) == 1
}

/// `the <cat>` or `the <color> <cat>`, whichever is unambiguous; `None` when
/// neither is.
fn name<R: Rng + ?Sized>(rng: &mut R, scene: &Scene, i: usize) -> Option<String> {
    let o = &scene.objects[i];
    let short = unique_category(scene, i);
    if short && (rng.gen_bool(0.5) || !unique_pair(scene, i)) {
        Some(format!("the {}", o.cat))
    } else if unique_pair(scene, i) {
        Some(format!("the {} {}", o.color, o.cat))
    } else {
        None
    }
}

fn subject_after(scene: &Scene, q: &Query) -> Option<Subject> {
    match q {
        Query::Exists { cat, color } => {
            let hits: Vec<usize> = (0..scene.len())
                .filter(|&i| {
                    let o = &scene.objects[i];
                    &o.cat == cat && color.as_ref().is_none_or(|c| &o.color == c)
                })
                .collect();
            match hits.len() {
                0 => None,
                1 => Some(Subject::Object(hits[0])),
                _ => color.is_none().then(|| Subject::Group(cat.clone())),
            }
        }
        Query::Color { object } | Query::Size { object } | Query::LeftOf { object, .. } => {
            Some(Subject::Object(*object))
        }
        Query::Count { cat, .. } => (scene.count(|o| &o.cat == cat) > 0).then(|| Subject::Group(cat.clone())),
    }
}

fn finish(scene: &Scene, question: String, query: Query, pronoun: Option<Pronoun>) -> Result<Round> {
    let answer = oracle_answer(scene, &query)?;
    Ok(Round {
        question: words(&question),
        program: Program { query, pronoun, answer },
    })
}

/// Attribute query on object `i` asked through its pronoun.
fn pronoun_round<R: Rng + ?Sized>(rng: &mut R, scene: &Scene, i: usize) -> Result<Option<Round>> {
    let p = Pronoun::for_category(&scene.objects[i].cat);
    let w = p.word();
    match rng.gen_range(0..3) {
        0 => finish(scene, format!("what color is {w}"), Query::Color { object: i }, Some(p)).map(Some),
        1 => finish(scene, format!("what size is {w}"), Query::Size { object: i }, Some(p)).map(Some),
        _ => {
            let j = rng.gen_range(0..scene.len());
            if j == i {
                return Ok(None);
            }
            let Some(other) = name(rng, scene, j) else {
                return Ok(None);
            };
            finish(scene, format!("is {w} left of {other}"), Query::LeftOf { object: i, other: j }, Some(p)).map(Some)
        }
    }
}

/// `how many of them are <color|size>` about category `cat`.
fn group_round<R: Rng + ?Sized>(rng: &mut R, scene: &Scene, attrs: &Attributes, cat: &str) -> Result<Round> {
    let (color, size) = if rng.gen_bool(0.5) {
        (Some(attrs.colors.choose(rng).expect("colors").clone()), None)
    } else {
        (None, Some(attrs.sizes.choose(rng).expect("sizes").clone()))
    };
    let attr = color.as_deref().or(size.as_deref()).unwrap_or_default().to_string();
    finish(
        scene,
        format!("how many of them are {attr}"),
        Query::Count {
            cat: cat.to_string(),
            color,
            size,
        },
        Some(Pronoun::Them),
    )
}

/// Any template over explicitly named referents.
fn named_round<R: Rng + ?Sized>(rng: &mut R, scene: &Scene, attrs: &Attributes) -> Result<Option<Round>> {
    let i = rng.gen_range(0..scene.len());
    let o = scene.objects[i].clone();
    match rng.gen_range(0..5) {
        0 => {
            // Half the time ask about something present.
            let (cat, color) = if rng.gen_bool(0.5) {
                (o.cat.clone(), o.color.clone())
            } else {
                (
                    attrs.categories.choose(rng).expect("categories").clone(),
                    attrs.colors.choose(rng).expect("colors").clone(),
                )
            };
            if rng.gen_bool(0.5) {
                finish(scene, format!("is there a {color} {cat}"), Query::Exists { cat, color: Some(color) }, None).map(Some)
            } else {
                finish(scene, format!("is there a {cat}"), Query::Exists { cat, color: None }, None).map(Some)
            }
        }
        1 => {
            if !unique_category(scene, i) {
                return Ok(None);
            }
            finish(scene, format!("what color is the {}", o.cat), Query::Color { object: i }, None).map(Some)
        }
        2 => match name(rng, scene, i) {
            Some(r) => finish(scene, format!("what size is {r}"), Query::Size { object: i }, None).map(Some),
            None => Ok(None),
        },
        3 => {
            let j = rng.gen_range(0..scene.len());
            if j == i {
                return Ok(None);
            }
            match (name(rng, scene, i), name(rng, scene, j)) {
                (Some(a), Some(b)) => {
                    finish(scene, format!("is {a} left of {b}"), Query::LeftOf { object: i, other: j }, None).map(Some)
                }
                _ => Ok(None),
            }
        }
        _ => {
            let cat = if rng.gen_bool(0.7) {
                o.cat.clone()
            } else {
                attrs.categories.choose(rng).expect("categories").clone()
            };
            finish(
                scene,
                format!("how many {}", plural(&cat)),
                Query::Count { cat, color: None, size: None },
                None,
            )
            .map(Some)
        }
    }
}

/// A non-pronoun round after which object `i` is the subject.
fn establish_object<R: Rng + ?Sized>(rng: &mut R, scene: &Scene, i: usize, avoid: &Query) -> Result<Option<Round>> {
    let o = scene.objects[i].clone();
    let round = match rng.gen_range(0..5) {
        0 if unique_pair(scene, i) => finish(
            scene,
            format!("is there a {} {}", o.color, o.cat),
            Query::Exists {
                cat: o.cat.clone(),
                color: Some(o.color.clone()),
            },
            None,
        )?,
        1 if unique_category(scene, i) => finish(
            scene,
            format!("is there a {}", o.cat),
            Query::Exists { cat: o.cat.clone(), color: None },
            None,
        )?,
        2 if unique_category(scene, i) => {
            finish(scene, format!("what color is the {}", o.cat), Query::Color { object: i }, None)?
        }
        3 => match name(rng, scene, i) {
            Some(r) => finish(scene, format!("what size is {r}"), Query::Size { object: i }, None)?,
            None => return Ok(None),
        },
        4 => {
            let j = rng.gen_range(0..scene.len());
            if j == i {
                return Ok(None);
            }
            match (name(rng, scene, i), name(rng, scene, j)) {
                (Some(a), Some(b)) => finish(scene, format!("is {a} left of {b}"), Query::LeftOf { object: i, other: j }, None)?,
                _ => return Ok(None),
            }
        }
        _ => return Ok(None),
    };
    if &round.program.query == avoid || subject_after(scene, &round.program.query) != Some(Subject::Object(i)) {
        return Ok(None);
    }
    Ok(Some(round))
}

/// Chooses the open pronoun question first, then the round that sets up its
/// referent. The pronoun question must be ambiguous without that round.
fn pronoun_finale<R: Rng + ?Sized>(rng: &mut R, scene: &Scene, attrs: &Attributes) -> Result<(Round, Round)> {
    for _ in 0..MAX_ATTEMPTS {
        let (setup, last) = if rng.gen_bool(0.2) {
            let cat = &scene.objects[rng.gen_range(0..scene.len())].cat;
            let last = group_round(rng, scene, attrs, cat)?;
            let setup = finish(
                scene,
                format!("how many {}", plural(cat)),
                Query::Count {
                    cat: cat.clone(),
                    color: None,
                    size: None,
                },
                None,
            )?;
            (Some(setup), last)
        } else {
            let i = rng.gen_range(0..scene.len());
            let Some(last) = pronoun_round(rng, scene, i)? else {
                continue;
            };
            (establish_object(rng, scene, i, &last.program.query)?, last)
        };
        let Some(setup) = setup else {
            continue;
        };
        if binding_answers(scene, attrs, &last.program)?.len() >= 2 {
            return Ok((setup, last));
        }
    }
    Err(Error::Generation(format!(
        "no ambiguous pronoun question after {MAX_ATTEMPTS} attempts"
    )))
}

fn free_round<R: Rng + ?Sized>(rng: &mut R, scene: &Scene, attrs: &Attributes, prev: Option<&Subject>) -> Result<Round> {
    for _ in 0..MAX_ATTEMPTS {
        let round = match prev {
            Some(Subject::Object(i)) if rng.gen_bool(FREE_PRONOUN_PROB) => pronoun_round(rng, scene, *i)?,
            Some(Subject::Group(cat)) if rng.gen_bool(FREE_PRONOUN_PROB) => Some(group_round(rng, scene, attrs, cat)?),
            _ => named_round(rng, scene, attrs)?,
        };
        if let Some(r) = round {
            return Ok(r);
        }
    }
    Err(Error::Generation(format!("no template fits the scene after {MAX_ATTEMPTS} attempts")))
}

/// Free round for the open question. A pronoun there must stay ambiguous
/// without the history, so unambiguous pronoun draws are retried.
fn open_round<R: Rng + ?Sized>(rng: &mut R, scene: &Scene, attrs: &Attributes, prev: Option<&Subject>) -> Result<Round> {
    for _ in 0..MAX_ATTEMPTS {
        let r = free_round(rng, scene, attrs, prev)?;
        if r.program.pronoun.is_none() || binding_answers(scene, attrs, &r.program)?.len() >= 2 {
            return Ok(r);
        }
    }
    Err(Error::Generation(format!(
        "no admissible open question after {MAX_ATTEMPTS} attempts"
    )))
}

fn answer_pool(attrs: &Attributes, kind: &str) -> Vec<String> {
    match kind {
        "exists" | "left_of" => vec!["yes".into(), "no".into()],
        "color" => attrs.colors.clone(),
        "size" => attrs.sizes.clone(),
        _ => (0..=COUNT_CAP).map(|n| n.to_string()).collect(),
    }
}

/// Ground truth, alternative-binding answers, other same-type answers, then
/// other types, cut to `c` and shuffled. Returns the list and the gt index.
fn candidates<R: Rng + ?Sized>(
    rng: &mut R,
    scene: &Scene,
    attrs: &Attributes,
    program: &Program,
    c: usize,
) -> Result<(Vec<String>, usize)> {
    let mut list = vec![program.answer.clone()];
    let push_all = |list: &mut Vec<String>, mut items: Vec<String>, rng: &mut R| {
        items.shuffle(rng);
        for a in items {
            if !list.contains(&a) {
                list.push(a);
            }
        }
    };
    push_all(&mut list, binding_answers(scene, attrs, program)?, rng);
    let kind = program.query.kind();
    push_all(&mut list, answer_pool(attrs, kind), rng);
    let others: Vec<String> = ["exists", "color", "size", "count"]
        .into_iter()
        .filter(|k| answer_pool(attrs, k) != answer_pool(attrs, kind))
        .flat_map(|k| answer_pool(attrs, k))
        .collect();
    push_all(&mut list, others, rng);
    if list.len() < c {
        return Err(Error::Generation(format!(
            "{c} candidates requested but only {} distinct answers exist",
            list.len()
        )));
    }
    list.truncate(c);
    list.shuffle(rng);
    let gt = list
        .iter()
        .position(|a| *a == program.answer)
        .expect("ground truth kept by truncation");
    Ok((list, gt))
}

fn caption<R: Rng + ?Sized>(rng: &mut R, scene: &Scene) -> Vec<String> {
    let o = &scene.objects[rng.gen_range(0..scene.len())];
    words(&format!(
        "a picture of {} objects with a {} {}",
        scene.len(),
        o.color,
        o.cat
    ))
}

/// Generates a dialog of `rounds` questions (the last one open) over `scene`.
pub fn generate_dialog<R: Rng + ?Sized>(
    rng: &mut R,
    scene: Scene,
    attrs: &Attributes,
    rounds: usize,
    num_candidates: usize,
    id: String,
) -> Result<DialogInstance> {
    if !(MIN_ROUNDS..=MAX_ROUNDS).contains(&rounds) {
        return Err(Error::InvalidArgument(format!(
            "rounds must lie in [{MIN_ROUNDS}, {MAX_ROUNDS}], got {rounds}"
        )));
    }
    if num_candidates < 2 {
        return Err(Error::InvalidArgument("at least two candidates are needed".into()));
    }
    let caption = caption(rng, &scene);
    let mut done: Vec<Round> = Vec::with_capacity(rounds);
    let mut prev: Option<Subject> = None;
    for _ in 0..rounds - 2 {
        let r = free_round(rng, &scene, attrs, prev.as_ref())?;
        prev = subject_after(&scene, &r.program.query);
        done.push(r);
    }
    let used_pronoun = done.iter().any(|r| r.program.pronoun.is_some());
    if !used_pronoun || rng.gen_bool(FINAL_PRONOUN_PROB) {
        let (setup, last) = pronoun_finale(rng, &scene, attrs)?;
        done.push(setup);
        done.push(last);
    } else {
        let r = free_round(rng, &scene, attrs, prev.as_ref())?;
        prev = subject_after(&scene, &r.program.query);
        done.push(r);
        done.push(open_round(rng, &scene, attrs, prev.as_ref())?);
    }

    let last = done.pop().expect("rounds >= 2");
    let (cands, gt) = candidates(rng, &scene, attrs, &last.program, num_candidates)?;
    let history = done
        .iter()
        .map(|r| (r.question.clone(), words(&r.program.answer)))
        .collect();
    let mut programs: Vec<Program> = done.into_iter().map(|r| r.program).collect();
    programs.push(last.program);
    Ok(DialogInstance {
        id,
        scene,
        caption,
        history,
        question: last.question,
        candidates: cands.iter().map(|a| words(a)).collect(),
        gt,
        programs,
    })
}
