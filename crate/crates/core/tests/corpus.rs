use dysfluency::data::{load_manifest, save_manifest, FeatureStorage, Manifest};
use dysfluency::fusion::{DecoderMode, Split};
use dysfluency::labels::{DysfluencyClass, LabelSet, Schema};
use dysfluency::synth::{generate_synthetic_corpus, SynthSpec};

const FILLERS: [&str; 3] = ["uh", "um", "er"];

fn is_filler(t: &str) -> bool {
    FILLERS.contains(&t)
}

/// Re-derives gold labels from the stored transcript and frames without
/// the generator's helpers.
fn relabel(transcript: &str, frames: &ndarray::Array2<f32>, schema: Schema, vocab_words: &[&str]) -> LabelSet {
    let toks: Vec<&str> = transcript.split(' ').filter(|t| !t.is_empty()).collect();
    let mut out = LabelSet::empty();
    if toks.iter().any(|t| is_filler(t)) {
        out.insert(DysfluencyClass::Int);
    }
    for i in 1..toks.len() {
        let (a, b) = (toks[i - 1], toks[i]);
        if a == b && vocab_words.contains(&a) {
            out.insert(DysfluencyClass::Wrd);
        }
        if a.len() == 2 && a.ends_with('-') && b.len() > 2 && b.as_bytes()[0] == a.as_bytes()[0] && vocab_words.contains(&b) {
            out.insert(DysfluencyClass::Snd);
        }
    }
    let rows = frames.nrows() as f64;
    let mean = |c: usize| frames.column(c).iter().map(|&v| v as f64).sum::<f64>() / rows;
    if mean(0) > 0.0 {
        out.insert(DysfluencyClass::Pro);
    }
    if mean(1) > 0.0 {
        out.insert(DysfluencyClass::Blk);
    }
    if schema == Schema::Ksof && mean(2) > 0.0 {
        out.insert(DysfluencyClass::Mod);
    }
    out
}

fn corpus(schema: Schema, seed: u64) -> Manifest {
    let spec = SynthSpec {
        clips: 300,
        schema,
        seed,
        ..SynthSpec::default()
    };
    let c = generate_synthetic_corpus(&spec).unwrap();
    Manifest {
        schema: c.schema,
        examples: c.examples,
    }
}

#[test]
fn independent_labeler_agrees_on_every_clip() {
    let content = [
        "cat", "cup", "dog", "door", "sun", "sand", "moon", "milk", "tree", "tent", "fish", "fire", "boat", "bell", "rock", "rope",
    ];
    let mut words: Vec<&str> = content.to_vec();
    words.extend(["i", "and", "so", "the"]);
    for schema in [Schema::Sep28k, Schema::Ksof] {
        let m = corpus(schema, 5);
        let mut seen = [0usize; 6];
        for e in &m.examples {
            let want = relabel(&e.transcript, &e.features.frames, schema, &words);
            assert_eq!(e.labels, want, "clip {} ({:?})", e.id, e.transcript);
            for c in e.labels.iter() {
                seen[DysfluencyClass::ALL.iter().position(|&x| x == c).unwrap()] += 1;
            }
        }
        for (c, n) in DysfluencyClass::ALL.iter().zip(seen) {
            if schema.contains(*c) {
                assert!(n > 10, "{c} appears only {n} times under {schema}");
            } else {
                assert_eq!(n, 0);
            }
        }
    }
}

#[test]
fn every_clip_has_every_mode_and_splits_follow_fractions() {
    let m = corpus(Schema::Sep28k, 9);
    for e in &m.examples {
        for mode in DecoderMode::ALL {
            assert!(!e.hypotheses[&mode].is_empty(), "{} lacks {mode}", e.id);
        }
    }
    assert_eq!(m.split(Split::Train).len(), 210);
    assert_eq!(m.split(Split::Dev).len(), 30);
    assert_eq!(m.split(Split::Test).len(), 60);
}

#[test]
fn seeds_control_the_corpus() {
    let a = corpus(Schema::Sep28k, 1);
    let b = corpus(Schema::Sep28k, 1);
    let c = corpus(Schema::Sep28k, 2);
    assert_eq!(a, b);
    assert_ne!(a.examples, c.examples);
}

#[test]
fn manifests_round_trip_in_both_storages() {
    let m = corpus(Schema::Ksof, 3);
    let dir = tempfile::tempdir().unwrap();
    for (name, storage) in [("side.jsonl", FeatureStorage::Sidecar), ("inline.jsonl", FeatureStorage::Inline)] {
        let path = dir.path().join(name);
        save_manifest(&m, &path, storage).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back, m, "{name}");
    }
}
