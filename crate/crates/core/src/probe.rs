//! Batched evaluation of growing omissions `[start, start + j]`.
//!
//! Both greedy scans (loss-based importance and early-stop effects) walk a
//! phrase rightwards one token at a time. Instead of one predictor call per
//! step, the probe predicts a wave of consecutive extensions at once and
//! serves later steps from the cache.

use crate::error::PredictError;
use crate::perturbation::{masked_copy, predict_rows};
use crate::predictor::{Prediction, Predictor};
use crate::span::Span;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Waves {
    /// One wave covering every remaining extension.
    Unbounded,
    /// Waves of `next` rows, doubling up to `cap`.
    Doubling { next: usize, cap: usize },
}

impl Waves {
    pub(crate) fn doubling(cap: usize) -> Self {
        let cap = cap.max(1);
        Waves::Doubling {
            next: cap.min(4),
            cap,
        }
    }

    fn take(&mut self, remaining: usize) -> usize {
        match self {
            Waves::Unbounded => remaining,
            Waves::Doubling { next, cap } => {
                let size = (*next).min(remaining);
                *next = (*next * 2).min(*cap);
                size
            }
        }
    }
}

pub(crate) struct ExtensionProbe<'a, P: ?Sized> {
    predictor: &'a P,
    base: &'a [u32],
    start: usize,
    limit: usize,
    waves: Waves,
    cache: Vec<Prediction>,
    leading: Option<Vec<u32>>,
    leading_result: Option<Prediction>,
}

impl<'a, P: Predictor + ?Sized> ExtensionProbe<'a, P> {
    /// Omissions start at `start` and never reach `limit`.
    pub(crate) fn new(
        predictor: &'a P,
        base: &'a [u32],
        start: usize,
        limit: usize,
        waves: Waves,
    ) -> Self {
        debug_assert!(start < limit && limit <= base.len());
        ExtensionProbe {
            predictor,
            base,
            start,
            limit,
            waves,
            cache: Vec::new(),
            leading: None,
            leading_result: None,
        }
    }

    /// Sends `row` along with the first wave; its prediction is available
    /// from [`Self::leading_result`] afterwards.
    pub(crate) fn with_leading_row(mut self, row: Vec<u32>) -> Self {
        self.leading = Some(row);
        self
    }

    pub(crate) fn leading_result(&self) -> Option<&Prediction> {
        self.leading_result.as_ref()
    }

    /// Prediction with `[start, start + j]` omitted, or `None` once the
    /// omission would reach `limit`.
    pub(crate) fn get(&mut self, j: usize) -> Result<Option<&Prediction>, PredictError> {
        if self.start + j >= self.limit {
            return Ok(None);
        }
        while self.cache.len() <= j {
            self.fetch()?;
        }
        Ok(Some(&self.cache[j]))
    }

    fn fetch(&mut self) -> Result<(), PredictError> {
        let first = self.cache.len();
        let remaining = self.limit - self.start - first;
        let size = self.waves.take(remaining).max(1);
        let mut rows = Vec::with_capacity(size + 1);
        let leading = self.leading.take();
        let has_leading = leading.is_some();
        rows.extend(leading);
        rows.extend(
            (first..first + size)
                .map(|j| masked_copy(self.base, Span::new(self.start, self.start + j + 1))),
        );
        let out = predict_rows(self.predictor, &rows)?;
        let mut results = out.iter();
        if has_leading {
            self.leading_result = results.next();
        }
        self.cache.extend(results);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{Counting, LinearModel};

    #[test]
    fn doubling_waves() {
        let mut w = Waves::doubling(10);
        let sizes: Vec<_> = (0..4).map(|_| w.take(100)).collect();
        assert_eq!(sizes, vec![4, 8, 10, 10]);
        assert_eq!(Waves::doubling(2).take(100), 2);
    }

    #[test]
    fn probe_caches_waves() {
        let model = Counting::new(LinearModel::regression(
            0.0,
            (1..=9).map(|i| (i, i as f64)),
        ));
        let base: Vec<u32> = (1..=9).collect();
        let mut probe = ExtensionProbe::new(&model, &base, 2, 9, Waves::doubling(64))
            .with_leading_row(base.clone());
        // total 45; omitting [2, 2 + j] removes 3 + ... + (3 + j)
        assert_eq!(probe.get(0).unwrap().unwrap().value(None), 42.0);
        assert_eq!(probe.get(3).unwrap().unwrap().value(None), 27.0);
        assert_eq!(probe.leading_result().unwrap().value(None), 45.0);
        assert_eq!(model.counts().batch_invocations, 1);
        assert_eq!(model.counts().rows_predicted, 5);
        assert_eq!(probe.get(6).unwrap().unwrap().value(None), 3.0);
        assert!(probe.get(7).unwrap().is_none());
        assert_eq!(model.counts().batch_invocations, 2);
    }
}
