//! Class vocabularies: raw dataset ids → `K` known classes plus one `other` class.
//!
//! The config format is a line-oriented table:
//!
//! ```text
//! # comment
//! K = 9
//! ignore = 0 1
//! class 1 thing car          # optional: declares a class name and kind
//! 10   1   thing  car        # raw_id  vocab_class_id  kind  name
//! ```
//!
//! Vocabulary class ids are `1..=K+1`; `K+1` is the catch-all `other` class.
//! Id 0 is reserved for ignored (unlabeled) points.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::lidar_io::{LabelMap, LabelSpace};

/// The reserved id for points excluded from evaluation.
pub const IGNORE_ID: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassKind {
    Thing,
    Stuff,
    Other,
}

impl ClassKind {
    /// Whether points of this kind are grouped into instances.
    pub fn has_instances(self) -> bool {
        matches!(self, ClassKind::Thing | ClassKind::Other)
    }
}

impl fmt::Display for ClassKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassKind::Thing => "thing",
            ClassKind::Stuff => "stuff",
            ClassKind::Other => "other",
        })
    }
}

impl FromStr for ClassKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "thing" => Ok(ClassKind::Thing),
            "stuff" => Ok(ClassKind::Stuff),
            "other" => Ok(ClassKind::Other),
            _ => Err(format!("unknown kind {s:?} (expected thing, stuff or other)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabClass {
    pub id: u32,
    pub kind: ClassKind,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabEntry {
    pub raw_id: u32,
    pub class_id: u32,
    pub kind: ClassKind,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    k: u32,
    classes: Vec<VocabClass>,
    entries: BTreeMap<u32, VocabEntry>,
    ignore: BTreeSet<u32>,
}

const BUNDLED: &[(&str, &str)] = &[
    ("vocab1", include_str!("../data/vocab1.txt")),
    ("vocab2", include_str!("../data/vocab2.txt")),
    ("vocab1-kitti360", include_str!("../data/vocab1-kitti360.txt")),
    ("vocab2-kitti360", include_str!("../data/vocab2-kitti360.txt")),
];

impl Vocabulary {
    /// Names accepted by [`Vocabulary::bundled`].
    pub fn bundled_names() -> impl Iterator<Item = &'static str> {
        BUNDLED.iter().map(|(n, _)| *n)
    }

    pub fn bundled(name: &str) -> Option<Vocabulary> {
        BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Vocabulary::parse(text).expect("bundled vocabulary is valid"))
    }

    /// Loads a bundled vocabulary by name, or a config file by path.
    pub fn load(name_or_path: &str) -> Result<Vocabulary> {
        match Vocabulary::bundled(name_or_path) {
            Some(v) => Ok(v),
            None => load_vocabulary(name_or_path),
        }
    }

    pub fn parse(text: &str) -> Result<Vocabulary> {
        let cfg_err = |line: usize, msg: String| Error::Config { line, msg };
        let mut k: Option<(u32, usize)> = None;
        let mut ignore: BTreeSet<u32> = BTreeSet::new();
        let mut ignore_line = 0;
        let mut declared: BTreeMap<u32, (ClassKind, String, usize)> = BTreeMap::new();
        let mut entries: BTreeMap<u32, (VocabEntry, usize)> = BTreeMap::new();

        for (idx, raw_line) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some((key, value)) = line.split_once('=') {
                let value = value.trim();
                match key.trim() {
                    "K" => {
                        let v = value
                            .parse::<u32>()
                            .map_err(|e| cfg_err(lineno, format!("bad K {value:?}: {e}")))?;
                        if v == 0 {
                            return Err(cfg_err(lineno, "K must be at least 1".into()));
                        }
                        k = Some((v, lineno));
                    }
                    "ignore" => {
                        ignore_line = lineno;
                        for tok in value.split(|c: char| c == ',' || c.is_whitespace()) {
                            if tok.is_empty() {
                                continue;
                            }
                            let id = tok
                                .parse::<u32>()
                                .map_err(|e| cfg_err(lineno, format!("bad ignore id {tok:?}: {e}")))?;
                            if !ignore.insert(id) {
                                return Err(cfg_err(lineno, format!("raw id {id} ignored twice")));
                            }
                        }
                    }
                    other => return Err(cfg_err(lineno, format!("unknown header {other:?}"))),
                }
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields[0] == "class" {
                if fields.len() != 4 {
                    return Err(cfg_err(lineno, "expected `class <id> <kind> <name>`".into()));
                }
                let id = fields[1]
                    .parse::<u32>()
                    .map_err(|e| cfg_err(lineno, format!("bad class id: {e}")))?;
                let kind = fields[2].parse().map_err(|e| cfg_err(lineno, e))?;
                if declared.insert(id, (kind, fields[3].to_string(), lineno)).is_some() {
                    return Err(cfg_err(lineno, format!("class {id} declared twice")));
                }
                continue;
            }
            if fields.len() != 4 {
                return Err(cfg_err(
                    lineno,
                    format!("expected `raw_id vocab_class_id kind name`, found {} fields", fields.len()),
                ));
            }
            let raw_id = fields[0]
                .parse::<u32>()
                .map_err(|e| cfg_err(lineno, format!("bad raw id {:?}: {e}", fields[0])))?;
            let class_id = fields[1]
                .parse::<u32>()
                .map_err(|e| cfg_err(lineno, format!("bad class id {:?}: {e}", fields[1])))?;
            let kind: ClassKind = fields[2].parse().map_err(|e| cfg_err(lineno, e))?;
            if class_id == IGNORE_ID {
                return Err(cfg_err(lineno, "class id 0 is reserved for ignored points".into()));
            }
            let entry = VocabEntry {
                raw_id,
                class_id,
                kind,
                name: fields[3].to_string(),
            };
            if let Some((_, first)) = entries.get(&raw_id) {
                return Err(cfg_err(
                    lineno,
                    format!("duplicate raw id {raw_id} (first mapped on line {first})"),
                ));
            }
            entries.insert(raw_id, (entry, lineno));
        }

        let (k, k_line) = k.ok_or_else(|| cfg_err(0, "missing `K = <int>` header".into()))?;
        let other = k + 1;
        if let Some(id) = entries.keys().find(|id| ignore.contains(id)) {
            return Err(cfg_err(
                entries[id].1,
                format!("raw id {id} is both mapped and ignored (ignore list on line {ignore_line})"),
            ));
        }

        // Resolve every class 1..=K+1 from declarations and entries.
        let mut classes: Vec<Option<VocabClass>> = vec![None; other as usize];
        for (&id, (kind, name, line)) in &declared {
            if id == 0 || id > other {
                return Err(cfg_err(*line, format!("class id {id} outside 1..={other}")));
            }
            classes[id as usize - 1] = Some(VocabClass {
                id,
                kind: *kind,
                name: name.clone(),
            });
        }
        let mut by_line: Vec<&(VocabEntry, usize)> = entries.values().collect();
        by_line.sort_by_key(|(_, line)| *line);
        for (entry, line) in by_line {
            let id = entry.class_id;
            if id > other {
                return Err(cfg_err(*line, format!("class id {id} outside 1..={other}")));
            }
            if (id == other) != (entry.kind == ClassKind::Other) {
                return Err(cfg_err(
                    *line,
                    format!("kind `other` must map to class {other} and only `other` may"),
                ));
            }
            let slot = &mut classes[id as usize - 1];
            match slot {
                Some(c) if c.kind != entry.kind => {
                    return Err(cfg_err(
                        *line,
                        format!("entry kind {} disagrees with class {id} kind {}", entry.kind, c.kind),
                    ))
                }
                Some(_) => {}
                None => {
                    *slot = Some(VocabClass {
                        id,
                        kind: entry.kind,
                        name: if id == other {
                            "other".into()
                        } else {
                            entry.name.clone()
                        },
                    })
                }
            }
        }
        let has_other_entry = entries.values().any(|(e, _)| e.class_id == other);
        if !has_other_entry && classes[other as usize - 1].is_none() {
            return Err(cfg_err(k_line, format!("missing `other` class {other}")));
        }
        let mut resolved = Vec::with_capacity(classes.len());
        for (i, c) in classes.into_iter().enumerate() {
            let c = c.ok_or_else(|| {
                cfg_err(k_line, format!("gap in vocabulary class ids: class {} is never defined", i + 1))
            })?;
            if (c.id == other) != (c.kind == ClassKind::Other) {
                return Err(cfg_err(k_line, format!("class {} must be kind `other` iff it is K+1", c.id)));
            }
            resolved.push(c);
        }

        Ok(Vocabulary {
            k,
            classes: resolved,
            entries: entries.into_iter().map(|(id, (e, _))| (id, e)).collect(),
            ignore,
        })
    }

    /// Number of known classes.
    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn other_id(&self) -> u32 {
        self.k + 1
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[VocabClass] {
        &self.classes
    }

    pub fn class(&self, id: u32) -> Option<&VocabClass> {
        if id == IGNORE_ID {
            return None;
        }
        self.classes.get(id as usize - 1)
    }

    pub fn kind(&self, id: u32) -> Option<ClassKind> {
        self.class(id).map(|c| c.kind)
    }

    pub fn class_name(&self, id: u32) -> &str {
        self.class(id).map_or("ignore", |c| c.name.as_str())
    }

    pub fn entries(&self) -> impl Iterator<Item = &VocabEntry> {
        self.entries.values()
    }

    pub fn ignore_ids(&self) -> &BTreeSet<u32> {
        &self.ignore
    }

    /// Maps a raw id: `Some(0)` for ignored ids, `None` when the id is unknown.
    pub fn map_raw(&self, raw: u32) -> Option<u32> {
        if self.ignore.contains(&raw) {
            return Some(IGNORE_ID);
        }
        self.entries.get(&raw).map(|e| e.class_id)
    }

    pub fn entry(&self, raw: u32) -> Option<&VocabEntry> {
        self.entries.get(&raw)
    }

    /// Whether points of vocabulary class `id` get instance ids.
    pub fn has_instances(&self, id: u32) -> bool {
        self.kind(id).is_some_and(ClassKind::has_instances)
    }

    pub fn thing_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.classes
            .iter()
            .filter(|c| c.kind == ClassKind::Thing)
            .map(|c| c.id)
    }

    pub fn stuff_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.classes
            .iter()
            .filter(|c| c.kind == ClassKind::Stuff)
            .map(|c| c.id)
    }

    /// Raw entries merged into `other`, ordered by raw id.
    pub fn other_entries(&self) -> impl Iterator<Item = &VocabEntry> {
        let other = self.other_id();
        self.entries.values().filter(move |e| e.class_id == other)
    }

    /// A vocabulary mapping every class id to itself; applying it to
    /// already-remapped labels is the identity.
    pub fn identity(&self) -> Vocabulary {
        let entries = self
            .classes
            .iter()
            .map(|c| {
                (
                    c.id,
                    VocabEntry {
                        raw_id: c.id,
                        class_id: c.id,
                        kind: c.kind,
                        name: c.name.clone(),
                    },
                )
            })
            .collect();
        Vocabulary {
            k: self.k,
            classes: self.classes.clone(),
            entries,
            ignore: BTreeSet::from([IGNORE_ID]),
        }
    }

    /// A stable description of the class table, used to check that
    /// evaluation records come from the same vocabulary.
    pub fn signature(&self) -> String {
        let mut s = format!("K={}", self.k);
        for c in &self.classes {
            s.push_str(&format!(";{}:{}:{}", c.id, c.kind, c.name));
        }
        s
    }
}

pub fn load_vocabulary(path: impl AsRef<Path>) -> Result<Vocabulary> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Vocabulary::parse(&text)
}

/// Maps raw labels into vocabulary space. Ignored raw ids become `(0, 0)`;
/// stuff points lose their instance ids.
pub fn remap_labels(labels: &LabelMap, vocab: &Vocabulary) -> Result<LabelMap> {
    let mut missing = BTreeSet::new();
    let mut semantic = Vec::with_capacity(labels.len());
    let mut instance = Vec::with_capacity(labels.len());
    for (&raw, &inst) in labels.semantic.iter().zip(&labels.instance) {
        match vocab.map_raw(raw) {
            Some(IGNORE_ID) => {
                semantic.push(IGNORE_ID);
                instance.push(0);
            }
            Some(class) => {
                semantic.push(class);
                instance.push(if vocab.has_instances(class) { inst } else { 0 });
            }
            None => {
                missing.insert(raw);
                semantic.push(IGNORE_ID);
                instance.push(0);
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Mapping {
            ids: missing.into_iter().collect(),
        });
    }
    Ok(LabelMap {
        semantic,
        instance,
        space: LabelSpace::Vocab,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw_id(v: &Vocabulary, name: &str) -> u32 {
        v.entries().find(|e| e.name == name).unwrap().raw_id
    }

    #[test]
    fn bundled_vocabularies_parse() {
        for name in Vocabulary::bundled_names() {
            let v = Vocabulary::bundled(name).unwrap();
            assert_eq!(v.num_classes() as u32, v.k() + 1, "{name}");
            assert_eq!(v.kind(v.other_id()), Some(ClassKind::Other));
        }
    }

    #[test]
    fn vocab1_known_and_other() {
        let v = Vocabulary::bundled("vocab1").unwrap();
        assert_eq!(v.k(), 9);
        let things: Vec<&str> = v.thing_ids().map(|id| v.class_name(id)).collect();
        assert_eq!(things, ["car", "truck", "human"]);
        let stuff: Vec<&str> = v.stuff_ids().map(|id| v.class_name(id)).collect();
        assert_eq!(
            stuff,
            ["road", "sidewalk", "fence", "vegetation", "terrain", "building"]
        );
        for name in [
            "bicycle",
            "motorcycle",
            "other-vehicle",
            "trunk",
            "pole",
            "traffic-sign",
            "other-structure",
            "other-object",
            "other-ground",
            "parking",
        ] {
            assert_eq!(v.map_raw(raw_id(&v, name)), Some(v.other_id()), "{name}");
        }
        assert_eq!(v.map_raw(raw_id(&v, "bicyclist")), v.map_raw(raw_id(&v, "person")));
    }

    #[test]
    fn vocab2_known_things() {
        let v = Vocabulary::bundled("vocab2").unwrap();
        let motorcycle = v.map_raw(raw_id(&v, "motorcycle")).unwrap();
        assert_eq!(v.kind(motorcycle), Some(ClassKind::Thing));
        let things: Vec<&str> = v.thing_ids().map(|id| v.class_name(id)).collect();
        assert_eq!(things, ["car", "bicycle", "motorcycle", "truck", "human"]);
        for name in ["other-vehicle", "other-structure", "other-object", "other-ground"] {
            assert_eq!(v.map_raw(raw_id(&v, name)), Some(v.other_id()), "{name}");
        }
        assert_eq!(v.kind(v.map_raw(raw_id(&v, "parking")).unwrap()), Some(ClassKind::Stuff));
    }

    #[test]
    fn duplicate_raw_id_names_line() {
        let text = "K = 1\nignore = 0\n10 1 thing car\n10 2 other junk\n";
        match Vocabulary::parse(text) {
            Err(Error::Config { line, msg }) => {
                assert_eq!(line, 4);
                assert!(msg.contains("duplicate raw id 10"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gap_and_missing_other_rejected() {
        let gap = "K = 3\n10 1 thing car\n11 3 stuff road\n12 4 other x\n";
        assert!(matches!(Vocabulary::parse(gap), Err(Error::Config { .. })));
        let no_other = "K = 1\n10 1 thing car\n";
        match Vocabulary::parse(no_other) {
            Err(Error::Config { msg, .. }) => assert!(msg.contains("other"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
        let misplaced = "K = 1\n10 1 other car\n11 2 other x\n";
        assert!(matches!(
            Vocabulary::parse(misplaced),
            Err(Error::Config { line: 2, .. })
        ));
    }

    #[test]
    fn remap_examples() {
        let v = Vocabulary::bundled("vocab1").unwrap();
        let bicycle = raw_id(&v, "bicycle");
        let road = raw_id(&v, "road");
        let labels = LabelMap::new(vec![bicycle, road, 0], vec![7, 3, 5], LabelSpace::Raw).unwrap();
        let out = remap_labels(&labels, &v).unwrap();
        assert_eq!(out.semantic, vec![v.other_id(), 4, 0]);
        assert_eq!(out.instance, vec![7, 0, 0]);
        assert_eq!(out.space, LabelSpace::Vocab);

        let bad = LabelMap::new(vec![10, 7, 7, 9], vec![0; 4], LabelSpace::Raw).unwrap();
        match remap_labels(&bad, &v) {
            Err(Error::Mapping { ids }) => assert_eq!(ids, vec![7, 9]),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn remap_idempotent_and_total(picks in proptest::collection::vec((0usize..40, 0u32..100), 0..300)) {
            let v = Vocabulary::bundled("vocab1").unwrap();
            let mut raws: Vec<u32> = v.entries().map(|e| e.raw_id).collect();
            raws.extend(v.ignore_ids().iter().copied());
            let (semantic, instance): (Vec<u32>, Vec<u32>) =
                picks.iter().map(|&(i, inst)| (raws[i % raws.len()], inst)).unzip();
            let labels = LabelMap::new(semantic, instance, LabelSpace::Raw).unwrap();
            let once = remap_labels(&labels, &v).unwrap();
            let ignored = once.semantic.iter().filter(|&&s| s == IGNORE_ID).count();
            let mapped = once.semantic.iter().filter(|&&s| s >= 1 && s <= v.other_id()).count();
            prop_assert_eq!(ignored + mapped, labels.len());
            let twice = remap_labels(&once, &v.identity()).unwrap();
            prop_assert_eq!(twice, once);
        }
    }
}
