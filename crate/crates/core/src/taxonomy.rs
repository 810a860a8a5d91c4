//! Category universe: object-specific part names, their decomposition into
//! an object name and a generalized part name, and the seen/unseen split.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const POSSESSIVE: &str = "'s ";

/// Category list of Pascal-Part-116, in table order.
pub const PASCAL_PART_116: &str = include_str!("../data/pascal_part_116.txt");
/// Category list of ADE20K-Part-234, in table order.
pub const ADE20K_PART_234: &str = include_str!("../data/ade20k_part_234.txt");

pub const PASCAL_PART_116_UNSEEN: [&str; 5] = ["bird", "car", "dog", "sheep", "motorbike"];
pub const ADE20K_PART_234_UNSEEN: [&str; 11] = [
    "bench",
    "bus",
    "fan",
    "desk",
    "stool",
    "truck",
    "van",
    "swivel chair",
    "oven",
    "ottoman",
    "kitchen island",
];

/// Split `"<object>'s <part>"` on the last possessive separator.
pub fn parse_category(name: &str) -> Result<(String, String)> {
    let name = name.trim();
    let at = name
        .rfind(POSSESSIVE)
        .ok_or_else(|| Error::MalformedCategoryName(name.to_string()))?;
    let object = name[..at].trim();
    let part = name[at + POSSESSIVE.len()..].trim();
    if object.is_empty() || part.is_empty() {
        return Err(Error::MalformedCategoryName(name.to_string()));
    }
    Ok((object.to_string(), part.to_string()))
}

pub fn format_category(object: &str, part: &str) -> String {
    format!("{object}{POSSESSIVE}{part}")
}

/// Parse one of the bundled category tables (one name per line).
pub fn builtin_names(table: &str) -> Vec<String> {
    table
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

/// On-disk form of a taxonomy.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyFile {
    pub categories: Vec<String>,
    pub unseen_objects: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Taxonomy {
    obj_part_names: Vec<String>,
    objects: Vec<String>,
    parts: Vec<String>,
    pair_index: Vec<(usize, usize)>,
    parts_of_object: Vec<Vec<usize>>,
    unseen_objects: BTreeSet<String>,
}

impl Taxonomy {
    /// Build from object-specific part names. Objects and parts are indexed
    /// in first-appearance order; a generalized part shared by several objects
    /// gets a single index.
    pub fn build<S: AsRef<str>>(names: &[S], unseen_objects: &[S]) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::EmptyCategoryList);
        }
        let mut obj_part_names = Vec::with_capacity(names.len());
        let mut objects: Vec<String> = Vec::new();
        let mut parts: Vec<String> = Vec::new();
        let mut object_ids: HashMap<String, usize> = HashMap::new();
        let mut part_ids: HashMap<String, usize> = HashMap::new();
        let mut seen_names: HashMap<String, ()> = HashMap::new();
        let mut pair_index = Vec::with_capacity(names.len());
        let mut parts_of_object: Vec<Vec<usize>> = Vec::new();

        for (k, raw) in names.iter().enumerate() {
            let (object, part) = parse_category(raw.as_ref())?;
            let canonical = format_category(&object, &part);
            if seen_names.insert(canonical.clone(), ()).is_some() {
                return Err(Error::DuplicateCategory(canonical));
            }
            let oi = *object_ids.entry(object.clone()).or_insert_with(|| {
                objects.push(object.clone());
                parts_of_object.push(Vec::new());
                objects.len() - 1
            });
            let pi = *part_ids.entry(part.clone()).or_insert_with(|| {
                parts.push(part.clone());
                parts.len() - 1
            });
            pair_index.push((oi, pi));
            parts_of_object[oi].push(k);
            obj_part_names.push(canonical);
        }

        let mut unseen = BTreeSet::new();
        for u in unseen_objects {
            let u = u.as_ref().trim();
            if !object_ids.contains_key(u) {
                return Err(Error::UnknownUnseenObject(u.to_string()));
            }
            unseen.insert(u.to_string());
        }

        Ok(Self {
            obj_part_names,
            objects,
            parts,
            pair_index,
            parts_of_object,
            unseen_objects: unseen,
        })
    }

    pub fn from_file(file: &TaxonomyFile) -> Result<Self> {
        Self::build(&file.categories, &file.unseen_objects)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: TaxonomyFile = serde_json::from_str(&text)?;
        Self::from_file(&file)
    }

    pub fn to_file(&self) -> TaxonomyFile {
        TaxonomyFile {
            categories: self.obj_part_names.clone(),
            unseen_objects: self
                .objects
                .iter()
                .filter(|o| self.unseen_objects.contains(*o))
                .cloned()
                .collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_file())?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn pascal_part_116() -> Self {
        Self::build(&builtin_names(PASCAL_PART_116), &PASCAL_PART_116_UNSEEN.map(String::from))
            .expect("bundled Pascal-Part-116 table is valid")
    }

    pub fn ade20k_part_234() -> Self {
        Self::build(&builtin_names(ADE20K_PART_234), &ADE20K_PART_234_UNSEEN.map(String::from))
            .expect("bundled ADE20K-Part-234 table is valid")
    }

    pub fn num_pairs(&self) -> usize {
        self.obj_part_names.len()
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    pub fn obj_part_names(&self) -> &[String] {
        &self.obj_part_names
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn parts(&self) -> &[String] {
        &self.parts
    }

    /// `(object index, part index)` of an object-specific part.
    pub fn pair(&self, k: usize) -> (usize, usize) {
        self.pair_index[k]
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pair_index
    }

    pub fn parts_of_object(&self, object: usize) -> Result<&[usize]> {
        self.parts_of_object
            .get(object)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownObject(object))
    }

    pub fn object_index(&self, name: &str) -> Option<usize> {
        self.objects.iter().position(|o| o == name)
    }

    pub fn pair_by_name(&self, name: &str) -> Option<usize> {
        self.obj_part_names.iter().position(|n| n == name)
    }

    pub fn unseen_objects(&self) -> &BTreeSet<String> {
        &self.unseen_objects
    }

    pub fn is_unseen_object(&self, object: usize) -> bool {
        self.unseen_objects.contains(&self.objects[object])
    }

    pub fn is_unseen_pair(&self, k: usize) -> bool {
        self.is_unseen_object(self.pair_index[k].0)
    }

    /// Partition of obj-part indices into (seen, unseen).
    pub fn split_indices(&self) -> (BTreeSet<usize>, BTreeSet<usize>) {
        (0..self.num_pairs()).partition(|&k| !self.is_unseen_pair(k))
    }

    /// Taxonomy restricted to seen objects, plus the map from full pair index
    /// to the restricted index. This is the vocabulary visible at train time.
    pub fn seen_only(&self) -> (Taxonomy, Vec<Option<usize>>) {
        let (seen, _) = self.split_indices();
        let names: Vec<&str> = seen.iter().map(|&k| self.obj_part_names[k].as_str()).collect();
        let mut remap = vec![None; self.num_pairs()];
        for (new, &old) in seen.iter().enumerate() {
            remap[old] = Some(new);
        }
        let empty: [&str; 0] = [];
        let sub = Taxonomy::build(&names, &empty).expect("subset of a valid taxonomy is valid");
        (sub, remap)
    }

    /// Check every structural invariant; returns a description of the first
    /// violation found.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let mut names = BTreeSet::new();
        for n in &self.obj_part_names {
            if !names.insert(n) {
                return Err(format!("duplicate category {n:?}"));
            }
        }
        if self.objects.iter().collect::<BTreeSet<_>>().len() != self.objects.len() {
            return Err("duplicate object names".into());
        }
        if self.parts.iter().collect::<BTreeSet<_>>().len() != self.parts.len() {
            return Err("duplicate part names".into());
        }
        for (k, &(o, p)) in self.pair_index.iter().enumerate() {
            let name = &self.obj_part_names[k];
            if o >= self.objects.len() || p >= self.parts.len() {
                return Err(format!("pair {k} ({name:?}) points out of range"));
            }
            if format_category(&self.objects[o], &self.parts[p]) != *name {
                return Err(format!("pair {k} ({name:?}) does not decompose consistently"));
            }
        }
        let (seen, unseen) = self.split_indices();
        if !seen.is_disjoint(&unseen) || seen.len() + unseen.len() != self.num_pairs() {
            return Err("seen/unseen sets do not partition the categories".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_possessive_names() {
        assert_eq!(
            parse_category("aeroplane's body").unwrap(),
            ("aeroplane".into(), "body".into())
        );
        assert_eq!(
            parse_category("person's lower arm").unwrap(),
            ("person".into(), "lower arm".into())
        );
        assert_eq!(
            parse_category("chest of drawers's drawer").unwrap(),
            ("chest of drawers".into(), "drawer".into())
        );
        assert!(matches!(parse_category("torso"), Err(Error::MalformedCategoryName(_))));
        assert!(matches!(parse_category("'s head"), Err(Error::MalformedCategoryName(_))));
        assert!(matches!(parse_category("dog's "), Err(Error::MalformedCategoryName(_))));
    }

    #[test]
    fn shared_parts_collapse() {
        let t = Taxonomy::build(&["dog's head", "cat's head", "dog's tail"], &["dog"]).unwrap();
        assert_eq!(t.objects(), ["dog", "cat"]);
        assert_eq!(t.parts(), ["head", "tail"]);
        assert_eq!(t.pairs(), [(0, 0), (1, 0), (0, 1)]);
        assert_eq!(t.parts_of_object(0).unwrap(), [0, 2]);
        let (seen, unseen) = t.split_indices();
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), [1]);
        assert_eq!(unseen.into_iter().collect::<Vec<_>>(), [0, 2]);
    }

    #[test]
    fn single_category() {
        let none: [&str; 0] = [];
        let t = Taxonomy::build(&["bottle's body"], &none).unwrap();
        assert_eq!((t.num_objects(), t.num_parts(), t.num_pairs()), (1, 1, 1));
        let (seen, unseen) = t.split_indices();
        assert_eq!(seen.len(), 1);
        assert!(unseen.is_empty());
    }

    #[test]
    fn all_unseen() {
        let t = Taxonomy::build(&["a's x", "b's x"], &["a", "b"]).unwrap();
        assert!(t.split_indices().0.is_empty());
    }

    #[test]
    fn rejects_duplicates_and_unknown_unseen() {
        let none: [&str; 0] = [];
        assert!(matches!(
            Taxonomy::build(&["dog's head", "dog's head"], &none),
            Err(Error::DuplicateCategory(_))
        ));
        assert!(matches!(
            Taxonomy::build(&["dog's head"], &["cat"]),
            Err(Error::UnknownUnseenObject(_))
        ));
        assert!(matches!(Taxonomy::build(&none, &none), Err(Error::EmptyCategoryList)));
    }

    #[test]
    fn bundled_tables() {
        let p = Taxonomy::pascal_part_116();
        assert_eq!(p.num_pairs(), 116);
        assert_eq!(p.num_objects(), 16);
        p.validate().unwrap();
        let a = Taxonomy::ade20k_part_234();
        assert_eq!(a.num_pairs(), 234);
        assert_eq!(a.num_objects(), 44);
        a.validate().unwrap();
    }

    #[test]
    fn seen_only_remaps() {
        let t = Taxonomy::build(&["dog's head", "cat's head", "dog's tail"], &["dog"]).unwrap();
        let (sub, remap) = t.seen_only();
        assert_eq!(sub.obj_part_names(), ["cat's head"]);
        assert_eq!(remap, [None, Some(0), None]);
    }

    #[test]
    fn json_round_trip() {
        let t = Taxonomy::pascal_part_116();
        let text = serde_json::to_string(&t.to_file()).unwrap();
        let back = Taxonomy::from_file(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(t, back);
    }
}
