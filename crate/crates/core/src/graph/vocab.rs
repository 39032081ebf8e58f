use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::VocabError;

/// Ordered class vocabulary. Background ("stuff") classes take the first
/// indices, object classes follow.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ClassVocabRepr", into = "ClassVocabRepr")]
pub struct ClassVocab {
    name: String,
    background: Vec<String>,
    objects: Vec<String>,
    aliases: Vec<(String, String)>,
    lookup: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassVocabRepr {
    #[serde(default)]
    aliases: Vec<(String, String)>,
    background: Vec<String>,
    name: String,
    objects: Vec<String>,
}

impl TryFrom<ClassVocabRepr> for ClassVocab {
    type Error = VocabError;

    fn try_from(r: ClassVocabRepr) -> Result<Self, Self::Error> {
        ClassVocab::with_aliases(&r.name, &r.background, &r.objects, &r.aliases)
    }
}

impl From<ClassVocab> for ClassVocabRepr {
    fn from(v: ClassVocab) -> Self {
        ClassVocabRepr {
            aliases: v.aliases,
            background: v.background,
            name: v.name,
            objects: v.objects,
        }
    }
}

impl ClassVocab {
    pub fn new<S: AsRef<str>>(name: &str, background: &[S], objects: &[S]) -> Result<Self, VocabError> {
        Self::with_aliases::<S>(name, background, objects, &[])
    }

    /// `aliases` are `(alias, canonical)` pairs accepted when parsing names.
    pub fn with_aliases<S: AsRef<str>>(
        name: &str,
        background: &[S],
        objects: &[S],
        aliases: &[(String, String)],
    ) -> Result<Self, VocabError> {
        let background: Vec<String> = background.iter().map(|s| s.as_ref().to_string()).collect();
        let objects: Vec<String> = objects.iter().map(|s| s.as_ref().to_string()).collect();
        if background.is_empty() && objects.is_empty() {
            return Err(VocabError::Empty);
        }
        let mut lookup = HashMap::new();
        for (i, n) in background.iter().chain(&objects).enumerate() {
            if n.is_empty() {
                return Err(VocabError::EmptyName);
            }
            if lookup.insert(n.clone(), i).is_some() {
                return Err(VocabError::Duplicate(n.clone()));
            }
        }
        for (alias, canonical) in aliases {
            let Some(&idx) = lookup.get(canonical) else {
                return Err(VocabError::UnknownAliasTarget(canonical.clone()));
            };
            if lookup.insert(alias.clone(), idx).is_some() {
                return Err(VocabError::Duplicate(alias.clone()));
            }
        }
        Ok(Self {
            name: name.to_string(),
            background,
            objects,
            aliases: aliases.to_vec(),
            lookup,
        })
    }

    /// sky, road, tree, building, person, car, bus, truck.
    pub fn default_traffic() -> Self {
        Self::new(
            "default",
            &["sky", "road", "tree", "building"],
            &["person", "car", "bus", "truck"],
        )
        .expect("default vocabulary is well-formed")
    }

    /// The default set plus `sidewalk`, with `vegetation` accepted as an
    /// alias of `tree`.
    pub fn extended_traffic() -> Self {
        Self::with_aliases(
            "extended",
            &["sky", "road", "tree", "building", "sidewalk"],
            &["person", "car", "bus", "truck"],
            &[("vegetation".to_string(), "tree".to_string())],
        )
        .expect("extended vocabulary is well-formed")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.background.len() + self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn background_classes(&self) -> &[String] {
        &self.background
    }

    pub fn object_classes(&self) -> &[String] {
        &self.objects
    }

    pub fn is_background(&self, class: usize) -> bool {
        class < self.background.len()
    }

    pub fn is_object(&self, class: usize) -> bool {
        class >= self.background.len() && class < self.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.lookup.get(name).copied()
    }

    /// Canonical name of a class index.
    pub fn name_of(&self, class: usize) -> Option<&str> {
        self.background
            .iter()
            .chain(&self.objects)
            .nth(class)
            .map(String::as_str)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.background.iter().chain(&self.objects).map(String::as_str)
    }
}

/// Which spatial axis a relation (and its dual) constrains.
pub type AxisId = usize;

/// Ordered relation vocabulary with an involutive dual map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RelationVocabRepr", into = "RelationVocabRepr")]
pub struct RelationVocab {
    relations: Vec<String>,
    dual: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RelationVocabRepr {
    duals: Vec<(String, String)>,
    relations: Vec<String>,
}

impl TryFrom<RelationVocabRepr> for RelationVocab {
    type Error = VocabError;

    fn try_from(r: RelationVocabRepr) -> Result<Self, Self::Error> {
        RelationVocab::new(&r.relations, &r.duals)
    }
}

impl From<RelationVocab> for RelationVocabRepr {
    fn from(v: RelationVocab) -> Self {
        let duals = (0..v.len())
            .filter(|&r| r <= v.dual[r])
            .map(|r| (v.relations[r].clone(), v.relations[v.dual[r]].clone()))
            .collect();
        RelationVocabRepr {
            duals,
            relations: v.relations,
        }
    }
}

impl RelationVocab {
    /// `pairs` lists each dual pair once; every relation must appear in
    /// exactly one pair.
    pub fn new<S: AsRef<str>>(relations: &[S], pairs: &[(S, S)]) -> Result<Self, VocabError> {
        let relations: Vec<String> = relations.iter().map(|s| s.as_ref().to_string()).collect();
        let find = |n: &str| relations.iter().position(|r| r == n);
        let mut seen = std::collections::HashSet::new();
        for r in &relations {
            if !seen.insert(r.as_str()) {
                return Err(VocabError::Duplicate(r.clone()));
            }
        }
        let mut dual = vec![usize::MAX; relations.len()];
        for (a, b) in pairs {
            let (a, b) = (a.as_ref(), b.as_ref());
            let ia = find(a).ok_or_else(|| VocabError::UnknownDual(a.to_string()))?;
            let ib = find(b).ok_or_else(|| VocabError::UnknownDual(b.to_string()))?;
            if ia == ib || dual[ia] != usize::MAX || dual[ib] != usize::MAX {
                return Err(VocabError::BadDual(a.to_string()));
            }
            dual[ia] = ib;
            dual[ib] = ia;
        }
        if let Some(r) = dual.iter().position(|&d| d == usize::MAX) {
            return Err(VocabError::MissingDual(relations[r].clone()));
        }
        Ok(Self { relations, dual })
    }

    /// left_of, right_of, above, below, in_front_of, behind.
    pub fn default_spatial() -> Self {
        Self::new(
            &["left_of", "right_of", "above", "below", "in_front_of", "behind"],
            &[
                ("left_of", "right_of"),
                ("above", "below"),
                ("in_front_of", "behind"),
            ],
        )
        .expect("default relations are well-formed")
    }

    pub fn len(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.relations
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.relations.iter().position(|r| r == name)
    }

    pub fn name_of(&self, rel: usize) -> Option<&str> {
        self.relations.get(rel).map(String::as_str)
    }

    pub fn dual(&self, rel: usize) -> usize {
        self.dual[rel]
    }

    /// Axis shared by a relation and its dual.
    pub fn axis(&self, rel: usize) -> AxisId {
        rel.min(self.dual[rel])
    }

    /// The stored member of a dual pair (the one with the lower index).
    pub fn is_canonical(&self, rel: usize) -> bool {
        rel <= self.dual[rel]
    }

    /// Rewrites `(s, r, o)` so the relation is the canonical member of its pair.
    pub fn canonicalize(&self, s: usize, r: usize, o: usize) -> (usize, usize, usize) {
        if self.is_canonical(r) {
            (s, r, o)
        } else {
            (o, self.dual[r], s)
        }
    }
}
