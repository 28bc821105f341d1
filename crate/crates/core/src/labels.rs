//! Dysfluency label vocabulary, multi-hot label sets and their text form.
//!
//! Generated label strings look like `Blk;Int` (tags joined by `;` in
//! canonical order) or the literal `None` for a fluent clip. Parsing is
//! total: anything that is not an exact tag of the active schema is dropped.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NONE_TAG: &str = "None";
pub const SEPARATOR: char = ';';

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DysfluencyClass {
    Blk,
    Int,
    Pro,
    Snd,
    Wrd,
    Mod,
}

impl DysfluencyClass {
    /// All six classes in canonical order.
    pub const ALL: [DysfluencyClass; 6] = [
        DysfluencyClass::Blk,
        DysfluencyClass::Int,
        DysfluencyClass::Pro,
        DysfluencyClass::Snd,
        DysfluencyClass::Wrd,
        DysfluencyClass::Mod,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            DysfluencyClass::Blk => "Blk",
            DysfluencyClass::Int => "Int",
            DysfluencyClass::Pro => "Pro",
            DysfluencyClass::Snd => "Snd",
            DysfluencyClass::Wrd => "Wrd",
            DysfluencyClass::Mod => "Mod",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.tag() == tag)
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }

    /// Classes whose cue lives in the transcript rather than the audio.
    pub fn is_lexical(self) -> bool {
        matches!(
            self,
            DysfluencyClass::Int | DysfluencyClass::Snd | DysfluencyClass::Wrd
        )
    }
}

impl fmt::Display for DysfluencyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Which corpus label inventory is active. Only `ksof` carries `Mod`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schema {
    #[default]
    Sep28k,
    Fluencybank,
    Ksof,
}

impl Schema {
    pub fn name(self) -> &'static str {
        match self {
            Schema::Sep28k => "sep28k",
            Schema::Fluencybank => "fluencybank",
            Schema::Ksof => "ksof",
        }
    }

    pub fn contains(self, class: DysfluencyClass) -> bool {
        class != DysfluencyClass::Mod || self == Schema::Ksof
    }

    /// Classes of this schema in canonical order.
    pub fn classes(self) -> Vec<DysfluencyClass> {
        DysfluencyClass::ALL
            .into_iter()
            .filter(|c| self.contains(*c))
            .collect()
    }

    /// Report column order; KSoF lists `Mod` first.
    pub fn report_columns(self) -> Vec<DysfluencyClass> {
        let mut cols = self.classes();
        if self == Schema::Ksof {
            cols.rotate_right(1);
        }
        cols
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Schema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sep28k" | "sep-28k" | "sep28k-e" => Ok(Schema::Sep28k),
            "fluencybank" => Ok(Schema::Fluencybank),
            "ksof" => Ok(Schema::Ksof),
            other => Err(Error::Config(format!("unknown schema '{other}'"))),
        }
    }
}

/// A set of dysfluency classes; the empty set marks a fluent clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct LabelSet(u8);

impl LabelSet {
    pub fn empty() -> Self {
        LabelSet(0)
    }

    pub fn insert(&mut self, class: DysfluencyClass) {
        self.0 |= class.bit();
    }

    pub fn remove(&mut self, class: DysfluencyClass) {
        self.0 &= !class.bit();
    }

    pub fn contains(&self, class: DysfluencyClass) -> bool {
        self.0 & class.bit() != 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    /// Members in canonical order.
    pub fn iter(&self) -> impl Iterator<Item = DysfluencyClass> + '_ {
        DysfluencyClass::ALL
            .into_iter()
            .filter(move |c| self.contains(*c))
    }

    pub fn bits(&self) -> u8 {
        self.0
    }

    pub fn from_bits(bits: u8) -> Self {
        LabelSet(bits & 0b0011_1111)
    }

    pub fn is_valid_for(&self, schema: Schema) -> bool {
        self.iter().all(|c| schema.contains(c))
    }

    pub fn tags(&self) -> Vec<String> {
        self.iter().map(|c| c.tag().to_string()).collect()
    }
}

impl FromIterator<DysfluencyClass> for LabelSet {
    fn from_iter<I: IntoIterator<Item = DysfluencyClass>>(iter: I) -> Self {
        let mut set = LabelSet::empty();
        for c in iter {
            set.insert(c);
        }
        set
    }
}

/// Render a label set as `Tag;Tag` (canonical order) or `None`.
pub fn serialize_labels(labels: LabelSet, schema: Schema) -> Result<String> {
    if let Some(bad) = labels.iter().find(|c| !schema.contains(*c)) {
        return Err(Error::SchemaViolation {
            class: bad.tag().to_string(),
            schema: schema.name().to_string(),
        });
    }
    if labels.is_empty() {
        return Ok(NONE_TAG.to_string());
    }
    let tags: Vec<&str> = labels.iter().map(DysfluencyClass::tag).collect();
    Ok(tags.join(";"))
}

/// Recover a label set from arbitrary generated text. Never fails.
pub fn parse_labels(text: &str, schema: Schema) -> LabelSet {
    text.split(SEPARATOR)
        .map(str::trim)
        .filter_map(DysfluencyClass::from_tag)
        .filter(|c| schema.contains(*c))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use DysfluencyClass::*;

    fn set(classes: &[DysfluencyClass]) -> LabelSet {
        classes.iter().copied().collect()
    }

    #[test]
    fn serialize_examples() {
        let s = Schema::Sep28k;
        assert_eq!(serialize_labels(LabelSet::empty(), s).unwrap(), "None");
        assert_eq!(serialize_labels(set(&[Blk, Int]), s).unwrap(), "Blk;Int");
        assert_eq!(serialize_labels(set(&[Wrd, Pro]), s).unwrap(), "Pro;Wrd");
    }

    #[test]
    fn mod_is_gated_by_schema() {
        let err = serialize_labels(set(&[Mod]), Schema::Fluencybank).unwrap_err();
        assert!(matches!(err, Error::SchemaViolation { .. }));
        assert_eq!(
            serialize_labels(set(&[Mod, Blk]), Schema::Ksof).unwrap(),
            "Blk;Mod"
        );
        assert_eq!(parse_labels("Mod;Blk", Schema::Sep28k), set(&[Blk]));
        assert_eq!(Schema::Sep28k.classes().len(), 5);
        assert_eq!(Schema::Ksof.classes().len(), 6);
        assert_eq!(Schema::Ksof.report_columns()[0], Mod);
    }

    #[test]
    fn parse_examples() {
        let s = Schema::Sep28k;
        assert_eq!(parse_labels("Blk;Int", s), set(&[Blk, Int]));
        assert_eq!(parse_labels("Blk;Xyz;;Pro", s), set(&[Blk, Pro]));
        assert_eq!(parse_labels("garbage", s), LabelSet::empty());
        assert_eq!(parse_labels("None", s), LabelSet::empty());
        assert_eq!(parse_labels(" Snd ; Wrd ", s), set(&[Snd, Wrd]));
        assert_eq!(parse_labels("", s), LabelSet::empty());
    }

    fn schema_strategy() -> impl Strategy<Value = Schema> {
        prop_oneof![
            Just(Schema::Sep28k),
            Just(Schema::Fluencybank),
            Just(Schema::Ksof)
        ]
    }

    proptest! {
        #[test]
        fn round_trip(bits in 0u8..64, schema in schema_strategy()) {
            let mut labels = LabelSet::from_bits(bits);
            if !schema.contains(Mod) {
                labels.remove(Mod);
            }
            let text = serialize_labels(labels, schema).unwrap();
            prop_assert_eq!(parse_labels(&text, schema), labels);
        }

        #[test]
        fn parse_is_total_and_idempotent(text in ".{0,40}", schema in schema_strategy()) {
            let parsed = parse_labels(&text, schema);
            prop_assert!(parsed.is_valid_for(schema));
            let again = parse_labels(&serialize_labels(parsed, schema).unwrap(), schema);
            prop_assert_eq!(again, parsed);
        }

        #[test]
        fn parse_recovers_tags_among_noise(bits in 0u8..32, noise in "[a-z]{0,5}") {
            let labels = LabelSet::from_bits(bits);
            let mut parts: Vec<String> = labels.tags();
            parts.push(noise);
            let parsed = parse_labels(&parts.join(";"), Schema::Sep28k);
            prop_assert_eq!(parsed, labels);
        }
    }
}
