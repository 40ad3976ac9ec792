//! Label schemes and remapping between them.
//!
//! Code 0 is always background/unlabeled and maps to 0 under every map.
//! Classes with no counterpart in the target scheme ("distinct" classes)
//! use codes from [`DISTINCT_BASE`] upward.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::volume::{Intent, Volume};

pub const DISTINCT_BASE: u32 = 100;

const RATNUS13_JSON: &str = include_str!("../assets/ratnus13.json");
const UNIFIED7_JSON: &str = include_str!("../assets/unified7.json");
const RATNUS13_TO_UNIFIED7_JSON: &str = include_str!("../assets/ratnus13_to_unified7.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub code: u32,
    pub abbr: String,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelScheme {
    pub name: String,
    pub entries: Vec<LabelEntry>,
}

impl LabelScheme {
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Validation(format!("scheme `{}` has no entries", self.name)));
        }
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if e.code == 0 {
                return Err(Error::Validation(format!("`{}` uses reserved code 0", e.abbr)));
            }
            if !seen.insert(e.code) {
                return Err(Error::Validation(format!("duplicate code {} in scheme `{}`", e.code, self.name)));
            }
        }
        Ok(())
    }

    pub fn codes(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.code).collect()
    }

    pub fn contains(&self, code: u32) -> bool {
        self.entries.iter().any(|e| e.code == code)
    }

    pub fn entry(&self, code: u32) -> Option<&LabelEntry> {
        self.entries.iter().find(|e| e.code == code)
    }

    /// The 13-nucleus scheme, AN = 1 … CL = 13.
    pub fn ratnus13() -> Self {
        load_scheme(RATNUS13_JSON).expect("built-in scheme is valid")
    }

    /// The seven main categories, anterior to posterior, codes 1..=7.
    pub fn unified7() -> Self {
        load_scheme(UNIFIED7_JSON).expect("built-in scheme is valid")
    }

    /// A built-in scheme by name.
    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "ratnus13" => Some(Self::ratnus13()),
            "unified7" => Some(Self::unified7()),
            _ => None,
        }
    }

    /// Built-in name or a path to a JSON scheme document.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        match Self::builtin(name_or_path) {
            Some(s) => Ok(s),
            None => load_scheme_file(name_or_path),
        }
    }
}

pub fn load_scheme(json: &str) -> Result<LabelScheme> {
    let s: LabelScheme = serde_json::from_str(json).map_err(|e| Error::json("label scheme", e))?;
    s.validate()?;
    Ok(s)
}

pub fn load_scheme_file(path: impl AsRef<Path>) -> Result<LabelScheme> {
    let path = path.as_ref();
    load_scheme(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// What to do with a source code that has no pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Unmatched {
    #[default]
    Error,
    /// Map code `c` to the distinct class `DISTINCT_BASE + c`.
    PassThrough,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnificationMap {
    pub source: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub pairs: BTreeMap<u32, u32>,
    #[serde(default)]
    pub unmatched: Unmatched,
}

impl UnificationMap {
    pub fn validate(&self) -> Result<()> {
        if let Some(&t) = self.pairs.get(&0) {
            if t != 0 {
                return Err(Error::Validation(format!("background must map to 0, not {t}")));
            }
        }
        Ok(())
    }

    /// Identity map on the codes of `scheme`.
    pub fn identity(scheme: &LabelScheme) -> Self {
        Self {
            source: scheme.name.clone(),
            target: scheme.name.clone(),
            note: None,
            pairs: scheme.codes().into_iter().map(|c| (c, c)).collect(),
            unmatched: Unmatched::Error,
        }
    }

    /// Default 13-nucleus → seven-category grouping (placeholder; see its note).
    pub fn ratnus13_to_unified7() -> Self {
        load_mapping(RATNUS13_TO_UNIFIED7_JSON).expect("built-in mapping is valid")
    }

    /// Target code for `code`, or `None` when unmapped under the error policy.
    pub fn lookup(&self, code: u32) -> Option<u32> {
        if code == 0 {
            return Some(0);
        }
        match self.pairs.get(&code) {
            Some(&t) => Some(t),
            None => match self.unmatched {
                Unmatched::Error => None,
                Unmatched::PassThrough => Some(DISTINCT_BASE + code),
            },
        }
    }

    /// Map equivalent to applying `self` then `next`. Requires `self` to
    /// use the error policy; pairs whose image `next` cannot map are left
    /// out so the composite fails on the same inputs.
    pub fn compose(&self, next: &UnificationMap) -> Result<UnificationMap> {
        if self.unmatched != Unmatched::Error {
            return Err(Error::Validation("cannot compose a pass-through map on the left".into()));
        }
        if self.target != next.source {
            return Err(Error::SchemeMismatch(self.target.clone(), next.source.clone()));
        }
        let pairs = self.pairs.iter().filter_map(|(&k, &v)| next.lookup(v).map(|t| (k, t))).collect();
        Ok(UnificationMap {
            source: self.source.clone(),
            target: next.target.clone(),
            note: None,
            pairs,
            unmatched: Unmatched::Error,
        })
    }
}

pub fn load_mapping(json: &str) -> Result<UnificationMap> {
    let m: UnificationMap = serde_json::from_str(json).map_err(|e| Error::json("label mapping", e))?;
    m.validate()?;
    Ok(m)
}

pub fn load_mapping_file(path: impl AsRef<Path>) -> Result<UnificationMap> {
    let path = path.as_ref();
    load_mapping(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// An integer label volume tagged with the scheme its codes belong to.
#[derive(Debug, Clone)]
pub struct LabelVolume {
    pub volume: Volume,
    pub scheme: String,
}

impl LabelVolume {
    pub fn new(mut volume: Volume, scheme: impl Into<String>) -> Result<Self> {
        if volume.channels() != 1 {
            return Err(Error::Input("label volume must have one channel".into()));
        }
        if volume.data().iter().any(|&v| v < 0.0 || v.fract() != 0.0 || !v.is_finite() || v > u32::MAX as f64) {
            return Err(Error::Input("label volume holds non-integer or negative values".into()));
        }
        volume.set_intent(Intent::Label);
        Ok(Self { volume, scheme: scheme.into() })
    }

    pub fn code(&self, i: usize) -> u32 {
        self.volume.data()[i] as u32
    }

    /// Voxel count per nonzero code.
    pub fn counts(&self) -> BTreeMap<u32, usize> {
        let mut out = BTreeMap::new();
        for &v in self.volume.data() {
            if v != 0.0 {
                *out.entry(v as u32).or_insert(0) += 1;
            }
        }
        out
    }
}

/// Voxelwise table lookup from the map's source scheme to its target.
pub fn remap(lv: &LabelVolume, um: &UnificationMap) -> Result<LabelVolume> {
    if lv.scheme != um.source {
        return Err(Error::SchemeMismatch(lv.scheme.clone(), um.source.clone()));
    }
    let distinct: BTreeSet<u32> = lv.counts().into_keys().collect();
    let mut table = BTreeMap::new();
    for code in distinct {
        let t = um.lookup(code).ok_or(Error::UnmappedLabel(code))?;
        table.insert(code, t as f64);
    }
    let src = lv.volume.data();
    let data = par::map_indices(src.len(), |i| if src[i] == 0.0 { 0.0 } else { table[&(src[i] as u32)] });
    LabelVolume::new(lv.volume.like(Intent::Label, data)?, um.target.clone())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct MappingReport {
    /// Source-scheme codes with no pair.
    pub uncovered: Vec<u32>,
    /// Paired codes that are not in the source scheme.
    pub unknown_sources: Vec<u32>,
    /// Target-scheme codes nothing maps to.
    pub unused_targets: Vec<u32>,
    /// Pairs pointing below the distinct range at a code the target lacks.
    pub invalid_targets: Vec<(u32, u32)>,
    /// Pairs into the distinct-class range.
    pub distinct: Vec<(u32, u32)>,
}

impl MappingReport {
    pub fn is_complete(&self) -> bool {
        self.uncovered.is_empty() && self.invalid_targets.is_empty() && self.unknown_sources.is_empty()
    }
}

pub fn validate_mapping(um: &UnificationMap, source: &LabelScheme, target: &LabelScheme) -> MappingReport {
    let mut r = MappingReport {
        uncovered: source.codes().into_iter().filter(|c| !um.pairs.contains_key(c)).collect(),
        ..Default::default()
    };
    let mut used = BTreeSet::new();
    for (&k, &v) in &um.pairs {
        if k != 0 && !source.contains(k) {
            r.unknown_sources.push(k);
        }
        if v == 0 {
            continue;
        }
        used.insert(v);
        if v >= DISTINCT_BASE {
            r.distinct.push((k, v));
        } else if !target.contains(v) {
            r.invalid_targets.push((k, v));
        }
    }
    r.unused_targets = target.codes().into_iter().filter(|c| !used.contains(c)).collect();
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::identity_affine;
    use proptest::prelude::*;

    fn labels(data: Vec<f64>, scheme: &str) -> LabelVolume {
        let n = data.len();
        let v = Volume::new([n, 1, 1], 1, [1.0; 3], identity_affine(), Intent::Label, data).unwrap();
        LabelVolume::new(v, scheme).unwrap()
    }

    fn map(pairs: &[(u32, u32)], unmatched: Unmatched) -> UnificationMap {
        UnificationMap {
            source: "a".into(),
            target: "b".into(),
            note: None,
            pairs: pairs.iter().cloned().collect(),
            unmatched,
        }
    }

    #[test]
    fn builtin_schemes() {
        let s = LabelScheme::ratnus13();
        assert_eq!(s.entries.len(), 13);
        assert_eq!(s.entry(1).unwrap().abbr, "AN");
        assert_eq!(s.entry(13).unwrap().abbr, "CL");
        let u = LabelScheme::unified7();
        assert_eq!(u.codes(), (1..=7).collect::<Vec<_>>());
        assert_eq!(u.entry(1).unwrap().name, "Anterior group");
        assert_eq!(u.entry(7).unwrap().name, "Posterior group");
    }

    #[test]
    fn scheme_validation() {
        let dup = r#"{"name":"x","entries":[{"code":5,"abbr":"A","name":"a"},{"code":5,"abbr":"B","name":"b"}]}"#;
        assert!(matches!(load_scheme(dup), Err(Error::Validation(_))));
        let zero = r#"{"name":"x","entries":[{"code":0,"abbr":"A","name":"a"}]}"#;
        assert!(matches!(load_scheme(zero), Err(Error::Validation(_))));
        assert!(matches!(load_scheme(r#"{"name":"x","entries":[]}"#), Err(Error::Validation(_))));
        assert!(load_scheme("{").is_err());
    }

    #[test]
    fn default_mapping_is_complete() {
        let um = UnificationMap::ratnus13_to_unified7();
        assert!(um.note.is_some());
        let r = validate_mapping(&um, &LabelScheme::ratnus13(), &LabelScheme::unified7());
        assert!(r.is_complete(), "{r:?}");
        assert!(r.unused_targets.is_empty());
    }

    #[test]
    fn mapping_report_findings() {
        let src = LabelScheme::ratnus13();
        let tgt = LabelScheme::unified7();
        let mut um = UnificationMap::ratnus13_to_unified7();
        um.pairs.remove(&13);
        assert_eq!(validate_mapping(&um, &src, &tgt).uncovered, vec![13]);
        um.pairs.insert(13, 9);
        assert_eq!(validate_mapping(&um, &src, &tgt).invalid_targets, vec![(13, 9)]);
        um.pairs.insert(13, 101);
        let r = validate_mapping(&um, &src, &tgt);
        assert_eq!(r.distinct, vec![(13, 101)]);
        assert!(r.is_complete());
    }

    #[test]
    fn remap_examples() {
        let lv = labels(vec![1.0, 1.0, 1.0, 2.0, 2.0, 0.0], "a");
        let out = remap(&lv, &map(&[(1, 1), (2, 1)], Unmatched::Error)).unwrap();
        assert_eq!(out.counts()[&1], 5);
        assert_eq!(out.volume.data()[5], 0.0);
        assert_eq!(out.scheme, "b");

        let bad = labels(vec![1.0, 99.0], "a");
        match remap(&bad, &map(&[(1, 1)], Unmatched::Error)) {
            Err(Error::UnmappedLabel(99)) => {}
            other => panic!("{other:?}"),
        }
        let out = remap(&bad, &map(&[(1, 1)], Unmatched::PassThrough)).unwrap();
        assert_eq!(out.volume.data(), &[1.0, 199.0]);

        let s = LabelScheme::ratnus13();
        let lv = labels((0..14).map(|c| c as f64).collect(), "ratnus13");
        let same = remap(&lv, &UnificationMap::identity(&s)).unwrap();
        assert_eq!(same.volume.data(), lv.volume.data());
        assert!(matches!(remap(&lv, &map(&[], Unmatched::Error)), Err(Error::SchemeMismatch(..))));
    }

    #[test]
    fn background_cannot_be_remapped() {
        assert!(load_mapping(r#"{"source":"a","target":"b","pairs":{"0":3}}"#).is_err());
        let m = load_mapping(r#"{"source":"a","target":"b","pairs":{"1":3},"unmatched":"pass-through"}"#).unwrap();
        assert_eq!(m.unmatched, Unmatched::PassThrough);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn composition_and_conservation(
            data in proptest::collection::vec(0u32..21, 500),
            ab in proptest::collection::vec(1u32..8, 20),
            bc in proptest::collection::vec(1u32..5, 7),
        ) {
            let lv = labels(data.iter().map(|&c| c as f64).collect(), "a");
            let m1 = map(&ab.iter().enumerate().map(|(k, &v)| (k as u32 + 1, v)).collect::<Vec<_>>(), Unmatched::Error);
            let mut m2 = map(&bc.iter().enumerate().map(|(k, &v)| (k as u32 + 1, v)).collect::<Vec<_>>(), Unmatched::Error);
            m2.source = "b".into();
            m2.target = "c".into();
            let two_step = remap(&remap(&lv, &m1).unwrap(), &m2).unwrap();
            let one_step = remap(&lv, &m1.compose(&m2).unwrap()).unwrap();
            prop_assert_eq!(two_step.volume.data(), one_step.volume.data());
            let nz = |v: &LabelVolume| v.volume.data().iter().filter(|&&x| x != 0.0).count();
            prop_assert_eq!(nz(&lv), nz(&two_step));
            for (a, b) in lv.volume.data().iter().zip(two_step.volume.data()) {
                prop_assert_eq!(*a == 0.0, *b == 0.0);
            }
        }
    }
}
