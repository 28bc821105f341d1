//! Whole-split helpers shared by the command line and the tests.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fusion::{ClipExample, DecoderMode, EncodedExample, FusionModel, Prediction};
use crate::labels::{LabelSet, Schema};
use crate::metrics::{F1Report, LabelCounts};
use crate::real::Real;

pub fn encode_examples<T: Real>(model: &FusionModel<T>, examples: &[&ClipExample], mode: DecoderMode) -> Result<Vec<EncodedExample>> {
    examples.par_iter().map(|e| model.encode_example(e, mode)).collect()
}

/// Predictions in input order; clips are decoded in parallel.
pub fn predict_examples<T: Real>(model: &FusionModel<T>, examples: &[&ClipExample], mode: DecoderMode) -> Result<Vec<Prediction>> {
    examples.par_iter().map(|e| model.predict(e, mode)).collect()
}

pub fn score(schema: Schema, predicted: &[LabelSet], gold: &[LabelSet]) -> Result<F1Report> {
    if predicted.len() != gold.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} references",
            predicted.len(),
            gold.len()
        )));
    }
    let mut counts = LabelCounts::default();
    for (p, g) in predicted.iter().zip(gold) {
        counts.observe(*p, *g);
    }
    Ok(counts.report(schema))
}

pub fn evaluate<T: Real>(model: &FusionModel<T>, examples: &[&ClipExample], mode: DecoderMode) -> Result<F1Report> {
    let preds = predict_examples(model, examples, mode)?;
    let predicted: Vec<LabelSet> = preds.iter().map(|p| p.labels).collect();
    let gold: Vec<LabelSet> = examples.iter().map(|e| e.labels).collect();
    score(model.schema(), &predicted, &gold)
}
