//! Two-level label system: coarse body-part groups and the fine micro-action
//! classes that map onto them, plus per-clip annotation records.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label file shipped with the crate: 52 fine classes over 7 body-part groups.
pub const DEFAULT_TAXONOMY_JSON: &str = include_str!("../assets/taxonomy.json");

/// Number of emotion categories in multi-label (emotion-annotated) data.
pub const DEFAULT_NUM_EMOTIONS: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoarseLabel {
    pub id: usize,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FineLabel {
    pub id: usize,
    pub name: String,
    /// Tokens of the action name; averaged word vectors give the label embedding.
    #[serde(default)]
    pub words: Vec<String>,
    pub coarse_id: usize,
}

#[derive(Deserialize)]
struct TaxonomyFile {
    coarse: Vec<CoarseLabel>,
    fine: Vec<FineLabel>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LabelTaxonomy {
    coarse: Vec<CoarseLabel>,
    fine: Vec<FineLabel>,
}

/// Lowercase whitespace split of an action name.
pub fn default_words(name: &str) -> Vec<String> {
    name.split_whitespace().map(|w| w.to_lowercase()).collect()
}

impl LabelTaxonomy {
    /// Validates and builds a taxonomy.
    pub fn new(coarse: Vec<CoarseLabel>, fine: Vec<FineLabel>) -> Result<Self> {
        Self::build(coarse, fine, "<memory>")
    }

    fn build(mut coarse: Vec<CoarseLabel>, mut fine: Vec<FineLabel>, origin: &str) -> Result<Self> {
        let err = |location: String, msg: String| Error::Taxonomy {
            location: format!("{origin}: {location}"),
            msg,
        };
        if coarse.is_empty() {
            return Err(err("coarse".into(), "no coarse labels".into()));
        }
        if fine.is_empty() {
            return Err(err("fine".into(), "no fine labels".into()));
        }

        let mut seen = HashSet::new();
        for (i, c) in coarse.iter().enumerate() {
            if !seen.insert(c.id) {
                return Err(err(format!("coarse[{i}]"), format!("duplicate coarse id {}", c.id)));
            }
            if c.id >= coarse.len() {
                return Err(err(
                    format!("coarse[{i}]"),
                    format!("coarse ids must be contiguous 0..{}, found {}", coarse.len(), c.id),
                ));
            }
        }

        let mut seen = HashSet::new();
        for (i, f) in fine.iter_mut().enumerate() {
            if !seen.insert(f.id) {
                return Err(err(format!("fine[{i}]"), format!("duplicate fine id {}", f.id)));
            }
            if f.coarse_id >= coarse.len() {
                return Err(err(
                    format!("fine[{i}]"),
                    format!(
                        "dangling coarse reference {} (only {} coarse labels)",
                        f.coarse_id,
                        coarse.len()
                    ),
                ));
            }
            if f.words.is_empty() {
                f.words = default_words(&f.name);
            }
            if f.words.is_empty() {
                return Err(err(format!("fine[{i}]"), "label has no words".into()));
            }
        }
        if let Some((i, f)) = fine.iter().enumerate().find(|(_, f)| f.id >= fine.len()) {
            return Err(err(
                format!("fine[{i}]"),
                format!("fine ids must be contiguous 0..{}, found {}", fine.len(), f.id),
            ));
        }

        coarse.sort_by_key(|c| c.id);
        fine.sort_by_key(|f| f.id);
        Ok(LabelTaxonomy { coarse, fine })
    }

    pub fn from_json_str(text: &str, origin: &str) -> Result<Self> {
        let file: TaxonomyFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.into(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        Self::build(file.coarse, file.fine, origin)
    }

    /// The 52-class / 7-group label set bundled with the crate.
    pub fn shipped() -> Self {
        Self::from_json_str(DEFAULT_TAXONOMY_JSON, "assets/taxonomy.json")
            .expect("bundled taxonomy is valid")
    }

    /// Builds a synthetic taxonomy with `num_fine` classes split into
    /// `num_coarse` contiguous groups.
    pub fn synthetic(num_fine: usize, num_coarse: usize) -> Result<Self> {
        if num_coarse == 0 || num_fine < num_coarse {
            return Err(Error::Config(format!(
                "need num_fine >= num_coarse >= 1, got {num_fine} / {num_coarse}"
            )));
        }
        let coarse = (0..num_coarse)
            .map(|id| CoarseLabel {
                id,
                name: format!("part {id}"),
            })
            .collect();
        let fine = (0..num_fine)
            .map(|id| {
                let coarse_id = id * num_coarse / num_fine;
                let name = format!("action {id} of part {coarse_id}");
                FineLabel {
                    id,
                    words: default_words(&name),
                    name,
                    coarse_id,
                }
            })
            .collect();
        Self::new(coarse, fine)
    }

    pub fn num_fine(&self) -> usize {
        self.fine.len()
    }

    pub fn num_coarse(&self) -> usize {
        self.coarse.len()
    }

    pub fn fine(&self) -> &[FineLabel] {
        &self.fine
    }

    pub fn coarse(&self) -> &[CoarseLabel] {
        &self.coarse
    }

    pub fn fine_by_name(&self, name: &str) -> Option<&FineLabel> {
        self.fine.iter().find(|f| f.name == name)
    }

    pub fn coarse_of(&self, fine_id: usize) -> Result<usize> {
        self.fine
            .get(fine_id)
            .map(|f| f.coarse_id)
            .ok_or_else(|| Error::InvalidLabel(format!("fine id {fine_id} out of range 0..{}", self.fine.len())))
    }

    /// Validates an annotation; never fails, the verdict carries the reasons.
    pub fn validate_annotation(&self, ann: &Annotation, num_emotions: usize) -> Validation {
        let mut problems = Vec::new();
        if ann.fine_ids.is_empty() {
            problems.push("empty fine_ids".to_string());
        }
        for &id in &ann.fine_ids {
            if id >= self.num_fine() {
                problems.push(format!("fine id {id} out of range 0..{}", self.num_fine()));
            }
        }
        if let Some(e) = ann.emotion_id {
            if e >= num_emotions {
                problems.push(format!("emotion id {e} out of range 0..{num_emotions}"));
            }
        }
        if ann.emotion_id.is_none() && ann.fine_ids.len() > 1 {
            problems.push("multi-label record without an emotion label".to_string());
        }
        if !problems.is_empty() {
            return Validation::Invalid(problems);
        }
        if ann.emotion_id.is_some() {
            Validation::Valid(AnnotationStyle::MultiLabel)
        } else {
            Validation::Valid(AnnotationStyle::SingleLabel)
        }
    }
}

pub fn load_taxonomy(path: impl AsRef<Path>) -> Result<LabelTaxonomy> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    LabelTaxonomy::from_json_str(&text, &path.display().to_string())
}

pub fn save_taxonomy(taxonomy: &LabelTaxonomy, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(taxonomy).expect("taxonomy serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub clip_id: String,
    pub split: Split,
    pub fine_ids: BTreeSet<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emotion_id: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnnotationStyle {
    /// One fine label, no emotion.
    SingleLabel,
    /// One or more fine labels plus an emotion label.
    MultiLabel,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Validation {
    Valid(AnnotationStyle),
    Invalid(Vec<String>),
}

impl Validation {
    pub fn is_valid(&self) -> bool {
        matches!(self, Validation::Valid(_))
    }
}

/// Reads a JSONL annotation file; unknown keys are ignored.
pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    crate::io::read_jsonl(path.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_by_one() -> LabelTaxonomy {
        LabelTaxonomy::new(
            vec![CoarseLabel { id: 0, name: "head".into() }],
            vec![FineLabel {
                id: 0,
                name: "Nodding Slowly".into(),
                words: vec![],
                coarse_id: 0,
            }],
        )
        .unwrap()
    }

    #[test]
    fn shipped_taxonomy_counts() {
        let t = LabelTaxonomy::shipped();
        assert_eq!(t.num_fine(), 52);
        assert_eq!(t.num_coarse(), 7);
        for f in t.fine() {
            assert!(t.coarse_of(f.id).unwrap() < 7);
            assert!(!f.words.is_empty());
        }
    }

    #[test]
    fn nodding_is_a_head_action() {
        let t = LabelTaxonomy::shipped();
        let nod = t.fine_by_name("nodding").unwrap();
        let coarse = t.coarse_of(nod.id).unwrap();
        assert_eq!(t.coarse()[coarse].name, "head");
    }

    #[test]
    fn minimal_taxonomy_and_default_words() {
        let t = one_by_one();
        assert_eq!(t.num_fine(), 1);
        assert_eq!(t.coarse_of(0).unwrap(), 0);
        assert_eq!(t.fine()[0].words, vec!["nodding", "slowly"]);
        assert!(t.coarse_of(1).is_err());
    }

    #[test]
    fn dangling_coarse_reference_is_reported_with_location() {
        let coarse = (0..7)
            .map(|id| CoarseLabel { id, name: format!("c{id}") })
            .collect();
        let fine = vec![FineLabel {
            id: 0,
            name: "x".into(),
            words: vec![],
            coarse_id: 9,
        }];
        let err = LabelTaxonomy::new(coarse, fine).unwrap_err().to_string();
        assert!(err.contains("dangling coarse reference"), "{err}");
        assert!(err.contains("fine[0]"), "{err}");
    }

    #[test]
    fn duplicate_and_gapped_ids_rejected() {
        let text = r#"{"coarse":[{"id":0,"name":"a"}],
            "fine":[{"id":0,"name":"x","coarse_id":0},{"id":0,"name":"y","coarse_id":0}]}"#;
        let err = LabelTaxonomy::from_json_str(text, "t.json").unwrap_err().to_string();
        assert!(err.contains("duplicate fine id"), "{err}");

        let text = r#"{"coarse":[{"id":0,"name":"a"}],
            "fine":[{"id":0,"name":"x","coarse_id":0},{"id":2,"name":"y","coarse_id":0}]}"#;
        assert!(LabelTaxonomy::from_json_str(text, "t.json").is_err());
    }

    #[test]
    fn parse_failure_carries_line() {
        let err = LabelTaxonomy::from_json_str("{\n\"coarse\": [,]}", "bad.json").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn annotation_validation() {
        let t = LabelTaxonomy::shipped();
        let mut ann = Annotation {
            clip_id: "a".into(),
            split: Split::Train,
            fine_ids: [3].into_iter().collect(),
            emotion_id: None,
        };
        assert_eq!(
            t.validate_annotation(&ann, 5),
            Validation::Valid(AnnotationStyle::SingleLabel)
        );

        ann.fine_ids = [1, 4, 9].into_iter().collect();
        ann.emotion_id = Some(2);
        assert_eq!(
            t.validate_annotation(&ann, 5),
            Validation::Valid(AnnotationStyle::MultiLabel)
        );

        ann.fine_ids.clear();
        assert!(!t.validate_annotation(&ann, 5).is_valid());

        ann.fine_ids = [1].into_iter().collect();
        ann.emotion_id = Some(5);
        assert!(!t.validate_annotation(&ann, 5).is_valid());

        ann.fine_ids = [1, 2].into_iter().collect();
        ann.emotion_id = None;
        assert!(!t.validate_annotation(&ann, 5).is_valid());
    }

    #[test]
    fn synthetic_taxonomy_groups_are_contiguous() {
        let t = LabelTaxonomy::synthetic(6, 2).unwrap();
        let map: Vec<usize> = (0..6).map(|i| t.coarse_of(i).unwrap()).collect();
        assert_eq!(map, vec![0, 0, 0, 1, 1, 1]);
        assert!(LabelTaxonomy::synthetic(2, 3).is_err());
    }

    #[test]
    fn coarse_of_is_thread_consistent() {
        let t = std::sync::Arc::new(LabelTaxonomy::shipped());
        let expected: Vec<usize> = (0..52).map(|i| t.coarse_of(i).unwrap()).collect();
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let t = t.clone();
                std::thread::spawn(move || (0..52).map(|i| t.coarse_of(i).unwrap()).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), expected);
        }
    }
}
