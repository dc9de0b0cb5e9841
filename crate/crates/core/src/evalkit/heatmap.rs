//! Per-cell importance of one context-response pair as CSV.

use crate::error::{Error, Result};
use crate::scoring::{pair_heatmap, Indicator};
use crate::seq2seq::ReconstructionOutput;
use crate::tokenizer::Tokenizer;
use crate::transcript::{ContextResponsePair, Transcript};

/// Rows `(response_token, context_token, score)`, response-major.
pub fn export_heatmap(
    t: &Transcript,
    pair: &ContextResponsePair,
    output: &ReconstructionOutput,
    indicator: Indicator,
    tok: &Tokenizer,
) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["response_token", "context_token", "score"])?;
    let context = pair.context_tokens(t);
    let response = pair.response_tokens(t);
    if !context.is_empty() && !response.is_empty() {
        let heat = pair_heatmap(output, indicator)?;
        if heat.dim() != (response.len(), context.len()) {
            return Err(Error::shape(
                "export_heatmap",
                format!("{:?} heatmap for {}x{} pair", heat.dim(), response.len(), context.len()),
            ));
        }
        for (i, &r) in response.iter().enumerate() {
            for (j, &c) in context.iter().enumerate() {
                w.write_record([
                    tok.display_piece(r).to_string(),
                    tok.display_piece(c).to_string(),
                    format!("{:.17e}", heat[[i, j]]),
                ])?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
