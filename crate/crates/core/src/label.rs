//! Three-level chain labels (software → view → context) and the class registry.
//!
//! A [`ChainLabel`] is always complete; the coarser hierarchy levels are
//! obtained by truncating it with [`project`]. Class names are compared as
//! exact, case-sensitive display strings.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const DEFAULT_REGISTRY: &str = include_str!("../data/default_registry.tsv");

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LabelError {
    #[error("unknown class: software {software:?}, view {view:?}")]
    UnknownClass { software: String, view: String },
    #[error("unknown hierarchy level {0:?} (expected one of s, sv, svc)")]
    UnknownLevel(String),
    #[error("unknown context value {0:?}")]
    UnknownContext(String),
    #[error("registry line {line}: {reason}")]
    RegistryParse { line: usize, reason: String },
    #[error("failed to read registry: {0}")]
    Io(String),
}

/// Interaction context visible on the screen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ContextValue {
    Menu,
    SelectedText,
    None,
}

impl ContextValue {
    pub const ALL: [ContextValue; 3] = [ContextValue::Menu, ContextValue::SelectedText, ContextValue::None];

    pub fn as_str(self) -> &'static str {
        match self {
            ContextValue::Menu => "Menu",
            ContextValue::SelectedText => "SelectedText",
            ContextValue::None => "None",
        }
    }
}

impl fmt::Display for ContextValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ContextValue {
    type Err = LabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ContextValue::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| LabelError::UnknownContext(s.to_string()))
    }
}

/// Hierarchy level, ordered from coarsest to finest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    S,
    Sv,
    Svc,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::S, Level::Sv, Level::Svc];

    pub fn as_str(self) -> &'static str {
        match self {
            Level::S => "s",
            Level::Sv => "sv",
            Level::Svc => "svc",
        }
    }

    /// Parses a comma separated list such as `s,sv,svc`.
    pub fn parse_list(s: &str) -> Result<Vec<Level>, LabelError> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let level = part.parse()?;
            if !out.contains(&level) {
                out.push(level);
            }
        }
        Ok(out)
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Level {
    type Err = LabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "s" => Ok(Level::S),
            "sv" => Ok(Level::Sv),
            "svc" => Ok(Level::Svc),
            other => Err(LabelError::UnknownLevel(other.to_string())),
        }
    }
}

/// Full software-view-context label of one frame.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChainLabel {
    pub software: String,
    pub view: String,
    pub context: ContextValue,
}

impl ChainLabel {
    pub fn new(software: impl Into<String>, view: impl Into<String>, context: ContextValue) -> Self {
        Self {
            software: software.into(),
            view: view.into(),
            context,
        }
    }

    pub fn with_context(&self, context: ContextValue) -> Self {
        Self { context, ..self.clone() }
    }

    pub fn key(&self, level: Level) -> LevelKey {
        project(self, level)
    }
}

impl fmt::Display for ChainLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.software, self.view, self.context)
    }
}

/// A chain label truncated to one hierarchy level.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LevelKey {
    S(String),
    Sv(String, String),
    Svc(String, String, ContextValue),
}

impl LevelKey {
    pub fn level(&self) -> Level {
        match self {
            LevelKey::S(_) => Level::S,
            LevelKey::Sv(..) => Level::Sv,
            LevelKey::Svc(..) => Level::Svc,
        }
    }
}

impl fmt::Display for LevelKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LevelKey::S(s) => write!(f, "{s}"),
            LevelKey::Sv(s, v) => write!(f, "{s}/{v}"),
            LevelKey::Svc(s, v, c) => write!(f, "{s}/{v}/{c}"),
        }
    }
}

/// Truncates a label to the requested hierarchy level. `Level::Svc` is the
/// identity on the full triple.
pub fn project(label: &ChainLabel, level: Level) -> LevelKey {
    match level {
        Level::S => LevelKey::S(label.software.clone()),
        Level::Sv => LevelKey::Sv(label.software.clone(), label.view.clone()),
        Level::Svc => LevelKey::Svc(label.software.clone(), label.view.clone(), label.context),
    }
}

/// Same as [`project`] with the level given by name.
pub fn project_named(label: &ChainLabel, level: &str) -> Result<LevelKey, LabelError> {
    Ok(project(label, level.parse()?))
}

/// The set of known software classes and software-view pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRegistry {
    software: Vec<String>,
    pairs: Vec<(String, String)>,
    pair_set: BTreeSet<(String, String)>,
}

impl LabelRegistry {
    pub fn from_pairs<I, S, V>(pairs: I) -> Result<Self, LabelError>
    where
        I: IntoIterator<Item = (S, V)>,
        S: Into<String>,
        V: Into<String>,
    {
        let mut registry = LabelRegistry::empty();
        for (i, (s, v)) in pairs.into_iter().enumerate() {
            registry.insert(i + 1, s.into(), v.into())?;
        }
        Ok(registry)
    }

    /// Parses the registry text format: one `software<TAB>view` pair per
    /// line. Blank lines and lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self, LabelError> {
        let mut registry = LabelRegistry::empty();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            match (fields.next(), fields.next(), fields.next()) {
                (Some(s), Some(v), None) => registry.insert(i + 1, s.to_string(), v.to_string())?,
                _ => {
                    return Err(LabelError::RegistryParse {
                        line: i + 1,
                        reason: "expected exactly two tab-separated fields".into(),
                    })
                }
            }
        }
        Ok(registry)
    }

    fn empty() -> Self {
        LabelRegistry {
            software: Vec::new(),
            pairs: Vec::new(),
            pair_set: BTreeSet::new(),
        }
    }

    fn insert(&mut self, line: usize, s: String, v: String) -> Result<(), LabelError> {
        if s.is_empty() || v.is_empty() {
            return Err(LabelError::RegistryParse {
                line,
                reason: "empty software or view name".into(),
            });
        }
        if !self.pair_set.insert((s.clone(), v.clone())) {
            return Err(LabelError::RegistryParse {
                line,
                reason: format!("duplicate pair {s}\t{v}"),
            });
        }
        if !self.software.contains(&s) {
            self.software.push(s.clone());
        }
        self.pairs.push((s, v));
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LabelError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| LabelError::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.pairs.iter().map(|(s, v)| format!("{s}\t{v}\n")).collect()
    }

    pub fn software(&self) -> &[String] {
        &self.software
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    /// Every valid full chain, in registry order with contexts expanded last.
    pub fn svc_triples(&self) -> Vec<ChainLabel> {
        self.pairs
            .iter()
            .flat_map(|(s, v)| ContextValue::ALL.into_iter().map(move |c| ChainLabel::new(s.clone(), v.clone(), c)))
            .collect()
    }

    pub fn class_count(&self, level: Level) -> usize {
        match level {
            Level::S => self.software.len(),
            Level::Sv => self.pairs.len(),
            Level::Svc => self.pairs.len() * ContextValue::ALL.len(),
        }
    }

    pub fn contains(&self, software: &str, view: &str) -> bool {
        self.pair_set.contains(&(software.to_string(), view.to_string()))
    }

    pub fn has_software(&self, software: &str) -> bool {
        self.software.iter().any(|s| s == software)
    }

    pub fn validate(&self, label: ChainLabel) -> Result<ChainLabel, LabelError> {
        self.check(&label)?;
        Ok(label)
    }

    pub fn check(&self, label: &ChainLabel) -> Result<(), LabelError> {
        if self.contains(&label.software, &label.view) {
            Ok(())
        } else {
            Err(LabelError::UnknownClass {
                software: label.software.clone(),
                view: label.view.clone(),
            })
        }
    }
}

impl Default for LabelRegistry {
    /// The software-view table of the recorded desktop dataset (25 pairs).
    fn default() -> Self {
        LabelRegistry::parse(DEFAULT_REGISTRY).expect("bundled registry is well formed")
    }
}

pub fn validate(label: ChainLabel, registry: &LabelRegistry) -> Result<ChainLabel, LabelError> {
    registry.validate(label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn projections_of_table_rows() {
        let mail = ChainLabel::new("Mail", "Gmail", ContextValue::SelectedText);
        assert_eq!(project(&mail, Level::Sv), LevelKey::Sv("Mail".into(), "Gmail".into()));
        let term = ChainLabel::new("Terminal", "Main View", ContextValue::None);
        assert_eq!(project(&term, Level::S), LevelKey::S("Terminal".into()));
        assert_eq!(
            project(&term, Level::Svc),
            LevelKey::Svc("Terminal".into(), "Main View".into(), ContextValue::None)
        );
    }

    #[test]
    fn unknown_level_name() {
        let l = ChainLabel::new("Mail", "Gmail", ContextValue::None);
        assert_eq!(project_named(&l, "sv").unwrap(), l.key(Level::Sv));
        assert!(matches!(project_named(&l, "v"), Err(LabelError::UnknownLevel(_))));
        assert_eq!(Level::parse_list("s, svc,s").unwrap(), vec![Level::S, Level::Svc]);
    }

    #[test]
    fn validation() {
        let reg = LabelRegistry::default();
        assert!(reg.validate(ChainLabel::new("Web Browser", "Maps", ContextValue::None)).is_ok());
        assert_eq!(
            reg.validate(ChainLabel::new("Terminal", "Save", ContextValue::None)),
            Err(LabelError::UnknownClass {
                software: "Terminal".into(),
                view: "Save".into()
            })
        );
        assert!(reg.validate(ChainLabel::new("", "Main View", ContextValue::None)).is_err());
        // case sensitive
        assert!(reg.validate(ChainLabel::new("terminal", "Main View", ContextValue::None)).is_err());
    }

    #[test]
    fn default_registry_cardinalities() {
        let reg = LabelRegistry::default();
        assert_eq!(reg.class_count(Level::Sv), 25);
        assert_eq!(reg.class_count(Level::S), 10);
        assert_eq!(reg.class_count(Level::Svc), 75);
        let triples = reg.svc_triples();
        assert_eq!(triples.len(), 75);
        for t in triples {
            assert!(reg.check(&t).is_ok());
            assert!(reg.pairs().contains(&(t.software.clone(), t.view.clone())));
        }
        let counts: Vec<_> = Level::ALL.iter().map(|l| reg.class_count(*l)).collect();
        assert!(counts[0] <= counts[1] && counts[1] <= counts[2] && counts[2] == 3 * counts[1]);
    }

    #[test]
    fn registry_parse_errors() {
        assert!(matches!(
            LabelRegistry::parse("A\tB\nA only\n"),
            Err(LabelError::RegistryParse { line: 2, .. })
        ));
        assert!(matches!(
            LabelRegistry::parse("A\tB\n\nA\tB\n"),
            Err(LabelError::RegistryParse { line: 3, .. })
        ));
        let reg = LabelRegistry::parse("# comment\nA\tB\nA\tC\n").unwrap();
        assert_eq!(reg.software(), ["A".to_string()]);
        assert_eq!(LabelRegistry::parse(&reg.to_text()).unwrap(), reg);
    }

    #[test]
    fn context_serde_round_trip() {
        for c in ContextValue::ALL {
            let json = serde_json::to_string(&c).unwrap();
            assert_eq!(serde_json::from_str::<ContextValue>(&json).unwrap(), c);
            assert_eq!(c.as_str().parse::<ContextValue>().unwrap(), c);
        }
    }

    fn arb_label() -> impl Strategy<Value = ChainLabel> {
        let reg = LabelRegistry::default();
        let triples = reg.svc_triples();
        (0..triples.len()).prop_map(move |i| triples[i].clone())
    }

    proptest! {
        #[test]
        fn prefix_consistency(a in arb_label(), b in arb_label()) {
            for (fine_i, fine) in Level::ALL.iter().enumerate() {
                if project(&a, *fine) == project(&b, *fine) {
                    for coarse in &Level::ALL[..=fine_i] {
                        prop_assert_eq!(project(&a, *coarse), project(&b, *coarse));
                    }
                }
            }
        }
    }
}
