//! Edit distance, word error rate and multi-label precision/recall/F1.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{DysfluencyClass, LabelSet, Schema};

/// Levenshtein distance over token sequences (unit insert/delete/substitute).
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    // keep the row over the shorter sequence
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut prev: Vec<usize> = (0..=short.len()).collect();
    let mut curr = vec![0usize; short.len() + 1];
    for (i, lt) in long.iter().enumerate() {
        curr[0] = i + 1;
        for (j, st) in short.iter().enumerate() {
            let sub = prev[j] + usize::from(lt != st);
            curr[j + 1] = sub.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[short.len()]
}

/// `edit_distance(hyp, reference) / |reference|`, unclipped above 1.
pub fn word_error_rate<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let ratio = |num: u64, den: u64| if den > 0 { num as f64 / den as f64 } else { 0.0 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }
}

/// Per-class confusion counts; merging is associative so shards can be
/// counted independently.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelCounts {
    counts: BTreeMap<DysfluencyClass, (u64, u64, u64)>,
}

impl LabelCounts {
    pub fn observe(&mut self, predicted: LabelSet, gold: LabelSet) {
        for class in DysfluencyClass::ALL {
            let (p, g) = (predicted.contains(class), gold.contains(class));
            let entry = self.counts.entry(class).or_default();
            match (p, g) {
                (true, true) => entry.0 += 1,
                (true, false) => entry.1 += 1,
                (false, true) => entry.2 += 1,
                (false, false) => {}
            }
        }
    }

    pub fn merge(&mut self, other: &LabelCounts) {
        for (class, (tp, fp, fn_)) in &other.counts {
            let entry = self.counts.entry(*class).or_default();
            entry.0 += tp;
            entry.1 += fp;
            entry.2 += fn_;
        }
    }

    pub fn report(&self, schema: Schema) -> F1Report {
        let per_class: BTreeMap<_, _> = schema
            .classes()
            .into_iter()
            .map(|c| {
                let (tp, fp, fn_) = self.counts.get(&c).copied().unwrap_or_default();
                (c, Prf::from_counts(tp, fp, fn_))
            })
            .collect();
        let macro_f1 = per_class.values().map(|p| p.f1).sum::<f64>() / per_class.len() as f64;
        F1Report {
            schema,
            per_class,
            macro_f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub schema: Schema,
    pub per_class: BTreeMap<DysfluencyClass, Prf>,
    pub macro_f1: f64,
}

impl F1Report {
    pub fn f1(&self, class: DysfluencyClass) -> f64 {
        self.per_class.get(&class).map_or(0.0, |p| p.f1)
    }

    /// Aligned text table, one column per class in results-table order.
    pub fn render_table(&self) -> String {
        let cols = self.schema.report_columns();
        let mut out = String::new();
        let _ = write!(out, "{:<6}", "");
        for c in &cols {
            let _ = write!(out, " {:>5}", c.tag());
        }
        let _ = writeln!(out, " {:>5}", "Macro");
        let rows: [(&str, fn(&Prf) -> f64); 3] = [
            ("P", |p| p.precision),
            ("R", |p| p.recall),
            ("F1", |p| p.f1),
        ];
        for (name, get) in rows {
            let _ = write!(out, "{name:<6}");
            for c in &cols {
                let _ = write!(out, " {:>5.2}", get(&self.per_class[c]));
            }
            if name == "F1" {
                let _ = writeln!(out, " {:>5.2}", self.macro_f1);
            } else {
                let _ = writeln!(out, " {:>5}", "");
            }
        }
        out
    }

    /// `key=value` lines for scripts.
    pub fn render_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "schema={}", self.schema);
        for c in self.schema.report_columns() {
            let p = &self.per_class[&c];
            let _ = writeln!(out, "{c}.tp={}", p.tp);
            let _ = writeln!(out, "{c}.fp={}", p.fp);
            let _ = writeln!(out, "{c}.fn={}", p.fn_);
            let _ = writeln!(out, "{c}.precision={:.6}", p.precision);
            let _ = writeln!(out, "{c}.recall={:.6}", p.recall);
            let _ = writeln!(out, "{c}.f1={:.6}", p.f1);
        }
        let _ = writeln!(out, "macro_f1={:.6}", self.macro_f1);
        out
    }
}

pub fn multilabel_prf(
    predictions: &[LabelSet],
    golds: &[LabelSet],
    schema: Schema,
) -> Result<F1Report> {
    if predictions.len() != golds.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} gold label sets",
            predictions.len(),
            golds.len()
        )));
    }
    if let Some(bad) = predictions
        .iter()
        .chain(golds)
        .find(|s| !s.is_valid_for(schema))
    {
        return Err(Error::SchemaViolation {
            class: bad.tags().join(";"),
            schema: schema.name().to_string(),
        });
    }
    let mut counts = LabelCounts::default();
    for (p, g) in predictions.iter().zip(golds) {
        counts.observe(*p, *g);
    }
    Ok(counts.report(schema))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use DysfluencyClass::*;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    // Full (|a|+1) x (|b|+1) table, kept separate from the rolling-row version.
    fn dp_oracle<T: PartialEq>(a: &[T], b: &[T]) -> usize {
        let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=b.len() {
            d[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let cost = usize::from(a[i - 1] != b[j - 1]);
                d[i][j] = (d[i - 1][j] + 1)
                    .min(d[i][j - 1] + 1)
                    .min(d[i - 1][j - 1] + cost);
            }
        }
        d[a.len()][b.len()]
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance(&words("a b c"), &words("a b c")), 0);
        assert_eq!(edit_distance(&words(""), &words("a b")), 2);
        let (a, b) = (words("the cat sat"), words("the bat sat down"));
        assert_eq!(dp_oracle(&a, &b), 2);
        assert_eq!(edit_distance(&a, &b), 2);
    }

    #[test]
    fn wer_examples() {
        let r = words("a b c");
        assert_eq!(word_error_rate(&r, &r).unwrap(), 0.0);
        assert_eq!(word_error_rate(&words("a a a a"), &words("a")).unwrap(), 3.0);
        let (h, r) = (words("the bat sat"), words("the cat sat down"));
        assert_eq!(dp_oracle(&h, &r), 2);
        assert_eq!(word_error_rate(&h, &r).unwrap(), 0.5);
        assert!(matches!(
            word_error_rate(&words("a"), &words("")),
            Err(Error::EmptyReference)
        ));
    }

    #[test]
    fn prf_examples() {
        let golds = vec![[Blk, Int].into_iter().collect(), LabelSet::empty()];
        let report = multilabel_prf(&golds, &golds, Schema::Sep28k).unwrap();
        assert_eq!(report.f1(Blk), 1.0);
        assert_eq!(report.f1(Int), 1.0);

        let p = [[Blk].into_iter().collect::<LabelSet>()];
        let g = [[Int].into_iter().collect::<LabelSet>()];
        let report = multilabel_prf(&p, &g, Schema::Sep28k).unwrap();
        assert_eq!(report.per_class[&Blk].precision, 0.0);
        assert_eq!(report.per_class[&Int].recall, 0.0);
        assert_eq!(report.f1(Blk), 0.0);
        assert_eq!(report.f1(Int), 0.0);

        let blk: LabelSet = [Blk].into_iter().collect();
        let none = LabelSet::empty();
        let report =
            multilabel_prf(&[blk, blk, none], &[blk, none, blk], Schema::Sep28k).unwrap();
        let prf = report.per_class[&Blk];
        assert_eq!((prf.tp, prf.fp, prf.fn_), (1, 1, 1));
        assert_eq!(prf.f1, 0.5);
    }

    #[test]
    fn prf_rejects_bad_input() {
        let blk: LabelSet = [Blk].into_iter().collect();
        assert!(matches!(
            multilabel_prf(&[blk], &[], Schema::Sep28k),
            Err(Error::Input(_))
        ));
        let m: LabelSet = [Mod].into_iter().collect();
        assert!(multilabel_prf(&[m], &[m], Schema::Sep28k).is_err());
    }

    #[test]
    fn table_layout_follows_schema() {
        let g = [LabelSet::from_bits(0b11_1111)];
        let report = multilabel_prf(&g, &g, Schema::Ksof).unwrap();
        let table = report.render_table();
        let header = table.lines().next().unwrap();
        assert!(header.find("Mod").unwrap() < header.find("Blk").unwrap());
        assert!(table.lines().last().unwrap().contains("1.00"));
        assert!(report.render_kv().contains("macro_f1=1.000000"));
    }

    fn seq() -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(0u8..6, 0..14)
    }

    proptest! {
        #[test]
        fn matches_oracle_and_is_a_metric(a in seq(), b in seq(), c in seq()) {
            let ab = edit_distance(&a, &b);
            prop_assert_eq!(ab, dp_oracle(&a, &b));
            prop_assert_eq!(ab, edit_distance(&b, &a));
            prop_assert_eq!(edit_distance(&a, &a), 0);
            prop_assert!(edit_distance(&a, &c) <= ab + edit_distance(&b, &c));
        }

        #[test]
        fn wer_zero_iff_equal(a in seq(), b in seq()) {
            prop_assume!(!b.is_empty());
            let wer = word_error_rate(&a, &b).unwrap();
            prop_assert_eq!(wer == 0.0, a == b);
        }

        #[test]
        fn report_is_bounded(pairs in prop::collection::vec((0u8..32, 0u8..32), 1..40)) {
            let (p, g): (Vec<_>, Vec<_>) = pairs
                .into_iter()
                .map(|(x, y)| (LabelSet::from_bits(x), LabelSet::from_bits(y)))
                .unzip();
            let report = multilabel_prf(&p, &g, Schema::Sep28k).unwrap();
            let mean = report.per_class.values().map(|x| x.f1).sum::<f64>() / 5.0;
            prop_assert!((report.macro_f1 - mean).abs() <= 1e-12);
            for prf in report.per_class.values() {
                prop_assert!((0.0..=1.0).contains(&prf.f1));
            }
        }

        #[test]
        fn counts_merge_is_associative(pairs in prop::collection::vec((0u8..32, 0u8..32), 0..30), split in 0usize..30) {
            let sets: Vec<_> = pairs.iter().map(|(x, y)| (LabelSet::from_bits(*x), LabelSet::from_bits(*y))).collect();
            let split = split.min(sets.len());
            let mut whole = LabelCounts::default();
            sets.iter().for_each(|(p, g)| whole.observe(*p, *g));
            let (mut left, mut right) = (LabelCounts::default(), LabelCounts::default());
            sets[..split].iter().for_each(|(p, g)| left.observe(*p, *g));
            sets[split..].iter().for_each(|(p, g)| right.observe(*p, *g));
            left.merge(&right);
            prop_assert_eq!(left.report(Schema::Sep28k), whole.report(Schema::Sep28k));
        }
    }
}
