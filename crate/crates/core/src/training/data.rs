use crate::dataset::DatasetRecord;
use crate::encoding::{
    encode_topology, lm_sequence, prompt_ids, EncodingMode, TokenId, Vocabulary,
};
use crate::models::ModelError;

/// Netlist tokens (no prompt) with a validity label.
#[derive(Debug, Clone, PartialEq)]
pub struct ClfExample {
    pub ids: Vec<TokenId>,
    pub label: bool,
}

/// A full generator sequence and the length of its `BOS prompt SEP` prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct LmExample {
    pub seq: Vec<TokenId>,
    pub prompt_len: usize,
}

fn bad_record(r: &DatasetRecord, e: impl std::fmt::Display) -> ModelError {
    ModelError::InvalidConfig(format!("record {}: {e}", r.id))
}

pub fn classifier_examples(
    records: &[DatasetRecord],
    mode: EncodingMode,
) -> Result<Vec<ClfExample>, ModelError> {
    let vocab = Vocabulary::get();
    records
        .iter()
        .map(|r| {
            let t = r.topology().map_err(|e| bad_record(r, e))?;
            let ids = vocab
                .ids(&encode_topology(&t, mode))
                .map_err(|e| bad_record(r, e))?;
            Ok(ClfExample {
                ids,
                label: r.valid,
            })
        })
        .collect()
}

/// Generator sequences of the valid records only.
pub fn lm_examples(
    records: &[DatasetRecord],
    mode: EncodingMode,
) -> Result<Vec<LmExample>, ModelError> {
    records
        .iter()
        .filter(|r| r.valid)
        .map(|r| {
            let t = r.topology().map_err(|e| bad_record(r, e))?;
            let seq = lm_sequence(&t, mode).map_err(|e| bad_record(r, e))?.0;
            Ok(LmExample {
                seq,
                prompt_len: prompt_ids(t.pool()).len(),
            })
        })
        .collect()
}
