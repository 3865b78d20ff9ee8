use crate::error::{Error, Result};

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = diag + usize::from(x != y);
            diag = row[j + 1];
            row[j + 1] = sub.min(row[j] + 1).min(diag + 1);
        }
    }
    row[b.len()]
}

/// Token error rate of one hypothesis: edits / reference length.
pub fn wer<T: PartialEq>(hypothesis: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Empty("WER reference"));
    }
    Ok(edit_distance(hypothesis, reference) as f64 / reference.len() as f64)
}

/// Corpus-level accumulator: total edits over total reference tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WerStats {
    pub edits: usize,
    pub reference_len: usize,
}

impl WerStats {
    pub fn add<T: PartialEq>(&mut self, hypothesis: &[T], reference: &[T]) {
        self.edits += edit_distance(hypothesis, reference);
        self.reference_len += reference.len();
    }

    pub fn merge(&mut self, other: WerStats) {
        self.edits += other.edits;
        self.reference_len += other.reference_len;
    }

    pub fn wer(&self) -> f64 {
        if self.reference_len == 0 {
            0.0
        } else {
            self.edits as f64 / self.reference_len as f64
        }
    }
}
