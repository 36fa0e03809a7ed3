//! Sliding-window masking matrices.
//!
//! For a row of length `n` and window `g`, the gram matrix has `n - g + 1`
//! rows; row `r` is the base row with positions `r..r + g` set to the absent
//! index. Predicting the whole matrix at once scores every g-gram of the
//! sentence in a single predictor call.

use crate::error::{Error, PredictError, Result};
use crate::predictor::{PredictionBatch, Predictor, WIRE_PROBABILITY_TOLERANCE};
use crate::span::Span;
use crate::vocab::ABSENT;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GramMatrix {
    base: Vec<u32>,
    gram: usize,
    rows: Vec<Vec<u32>>,
}

impl GramMatrix {
    pub fn build(base: &[u32], gram: usize) -> Result<Self> {
        let n = base.len();
        if gram == 0 || gram > n {
            return Err(Error::InvalidGram { gram, len: n });
        }
        let rows = (0..=n - gram)
            .map(|start| masked_copy(base, Span::new(start, start + gram)))
            .collect();
        Ok(GramMatrix {
            base: base.to_vec(),
            gram,
            rows,
        })
    }

    pub fn base(&self) -> &[u32] {
        &self.base
    }

    pub fn gram(&self) -> usize {
        self.gram
    }

    pub fn rows(&self) -> &[Vec<u32>] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<Vec<u32>> {
        self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// The span masked in row `r`.
    pub fn span(&self, r: usize) -> Span {
        Span::new(r, r + self.gram)
    }

    pub fn spans(&self) -> impl Iterator<Item = Span> + '_ {
        (0..self.rows.len()).map(|r| self.span(r))
    }
}

pub fn build_gram_matrix(base: &[u32], gram: usize) -> Result<GramMatrix> {
    GramMatrix::build(base, gram)
}

/// Copy of `base` with `span` set to the absent index.
pub fn masked_copy(base: &[u32], span: Span) -> Vec<u32> {
    let mut row = base.to_vec();
    row[span.start..span.end].fill(ABSENT);
    row
}

/// Sends `rows` to the predictor in one call and checks the reply shape.
pub(crate) fn predict_rows<P: Predictor + ?Sized>(
    predictor: &P,
    rows: &[Vec<u32>],
) -> std::result::Result<PredictionBatch, PredictError> {
    let out = predictor.predict(rows)?;
    out.validate(predictor.kind(), rows.len(), WIRE_PROBABILITY_TOLERANCE)?;
    Ok(out)
}

/// Predicts every row of the matrix in a single predictor invocation.
pub fn run_batch<P: Predictor + ?Sized>(
    batch: &GramMatrix,
    predictor: &P,
) -> std::result::Result<PredictionBatch, PredictError> {
    predict_rows(predictor, &batch.rows)
}

/// Predicts the rows one at a time. Used to certify [`run_batch`].
pub fn sequential_oracle<P: Predictor + ?Sized>(
    batch: &GramMatrix,
    predictor: &P,
) -> std::result::Result<PredictionBatch, PredictError> {
    let mut scores = Vec::new();
    let mut probabilities = Vec::new();
    for row in &batch.rows {
        match predict_rows(predictor, std::slice::from_ref(row))? {
            PredictionBatch::Regression(mut v) => scores.push(v.remove(0)),
            PredictionBatch::Classification(mut v) => probabilities.push(v.remove(0)),
        }
    }
    Ok(if probabilities.is_empty() {
        PredictionBatch::Regression(scores)
    } else {
        PredictionBatch::Classification(probabilities)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{Counting, LinearModel};
    use proptest::prelude::*;

    #[test]
    fn unigram_matrix_zeroes_diagonal() {
        let m = build_gram_matrix(&[5, 6, 7, 8], 1).unwrap();
        assert_eq!(
            m.rows(),
            &[
                vec![0, 6, 7, 8],
                vec![5, 0, 7, 8],
                vec![5, 6, 0, 8],
                vec![5, 6, 7, 0]
            ]
        );
    }

    #[test]
    fn bigram_matrix_zeroes_band() {
        let m = build_gram_matrix(&[5, 6, 7, 8], 2).unwrap();
        assert_eq!(
            m.rows(),
            &[vec![0, 0, 7, 8], vec![5, 0, 0, 8], vec![5, 6, 0, 0]]
        );
    }

    #[test]
    fn full_width_gram() {
        let m = build_gram_matrix(&[5, 6], 2).unwrap();
        assert_eq!(m.rows(), &[vec![0, 0]]);
    }

    #[test]
    fn invalid_gram_rejected() {
        assert!(matches!(
            build_gram_matrix(&[5, 6], 3),
            Err(Error::InvalidGram { gram: 3, len: 2 })
        ));
        assert!(build_gram_matrix(&[5, 6], 0).is_err());
    }

    #[test]
    fn run_batch_linear() {
        let model = LinearModel::regression(0.0, [(5, 1.0), (6, 2.0), (7, 3.0), (8, 4.0)]);
        // Per-row direct sums: total 10 minus the masked coefficient.
        let m = build_gram_matrix(&[5, 6, 7, 8], 1).unwrap();
        assert_eq!(
            run_batch(&m, &model).unwrap(),
            PredictionBatch::Regression(vec![9.0, 8.0, 7.0, 6.0])
        );
        let m = build_gram_matrix(&[5, 6, 7, 8], 4).unwrap();
        assert_eq!(
            run_batch(&m, &model).unwrap(),
            PredictionBatch::Regression(vec![0.0])
        );
    }

    #[test]
    fn one_invocation_per_batch() {
        let model = Counting::new(LinearModel::regression(0.0, [(5, 1.0)]));
        let m = build_gram_matrix(&[5, 6, 7, 8, 9], 2).unwrap();
        run_batch(&m, &model).unwrap();
        assert_eq!(model.counts().batch_invocations, 1);
        assert_eq!(model.counts().rows_predicted, 4);
    }

    #[test]
    fn row_totals_over_all_grams() {
        let base: Vec<u32> = (1..=50).collect();
        let total: usize = (1..=50)
            .map(|g| build_gram_matrix(&base, g).unwrap().len())
            .sum();
        assert_eq!(total, 1275);
    }

    #[test]
    fn single_row_batch_matches_oracle() {
        let model = LinearModel::regression(0.5, [(5, 1.0)]);
        let m = build_gram_matrix(&[5, 6], 2).unwrap();
        assert_eq!(
            run_batch(&m, &model).unwrap(),
            sequential_oracle(&m, &model).unwrap()
        );
    }

    proptest! {
        #[test]
        fn rows_differ_only_in_band(base in prop::collection::vec(0u32..20, 1..40), g in 1usize..40) {
            let g = 1 + (g - 1) % base.len();
            let m = build_gram_matrix(&base, g).unwrap();
            prop_assert_eq!(m.len(), base.len() - g + 1);
            for (r, row) in m.rows().iter().enumerate() {
                for (k, (&v, &b)) in row.iter().zip(&base).enumerate() {
                    if (r..r + g).contains(&k) {
                        prop_assert_eq!(v, ABSENT);
                    } else {
                        prop_assert_eq!(v, b);
                    }
                }
            }
        }
    }
}
