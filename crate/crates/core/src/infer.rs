//! Turning model outputs into scored triplets.

use rayon::prelude::*;

use crate::data::{ImageRecord, TokenSet, TripletPrediction};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tape::Tape;
use crate::tensor::sigmoid;

/// Predictions kept per image: enough for the largest recall cutoff.
pub const DEFAULT_KEEP: usize = 100;

/// Every (query, class) pair of one image scored by its sigmoid, keeping
/// the `keep` best (ties in query-then-class order).
pub fn predict_image(model: &Model, tokens: &crate::Tensor, image_id: u64, width: u32, height: u32, keep: usize) -> Result<Vec<TripletPrediction>> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, tokens)?;
    let (w, h) = (width as f64, height as f64);
    let ind = out.individual_boxes(&tape);
    let grp = out.group_boxes(&tape);
    let logits = tape.value(out.logits);
    let mut preds = Vec::with_capacity(logits.len());
    for i in 0..logits.rows() {
        for c in 0..logits.cols() {
            preds.push(TripletPrediction {
                image_id,
                individual: ind[i].to_pixels(w, h),
                group: grp[i].to_pixels(w, h),
                atomic: c,
                confidence: sigmoid(logits.get(i, c)),
            });
        }
    }
    let order = crate::metrics::top_k(&preds, keep);
    Ok(order.into_iter().map(|i| preds[i]).collect())
}

/// Predictions for every annotated image (sizes come from the records),
/// ordered by image id.
pub fn predict_all(model: &Model, tokens: &TokenSet, records: &[ImageRecord], keep: usize) -> Result<Vec<TripletPrediction>> {
    let mut sorted: Vec<&ImageRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.image_id);
    let per_image: Vec<Result<Vec<TripletPrediction>>> = sorted
        .par_iter()
        .map(|r| {
            let t = tokens
                .get(r.image_id)
                .ok_or_else(|| Error::validation("tokens", format!("no tokens for image {}", r.image_id)))?;
            predict_image(model, t, r.image_id, r.width, r.height, keep)
        })
        .collect();
    let mut out = Vec::new();
    for p in per_image {
        out.extend(p?);
    }
    Ok(out)
}
