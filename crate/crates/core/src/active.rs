//! Uncertainty sampling: pick the pool documents whose predicted probability
//! is closest to 0.5.

use rayon::prelude::*;

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::model::ClassifierModel;

#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub id: String,
    pub margin: f64,
    pub positive: bool,
}

/// Pool documents ranked by `|p - 0.5|` ascending, ties by id.
pub fn rank_by_margin<M: ClassifierModel + ?Sized>(model: &M, pool: &Dataset) -> Vec<Scored> {
    let mut scored: Vec<Scored> = pool
        .documents
        .par_iter()
        .map(|d| Scored {
            id: d.id.clone(),
            margin: (model.predict_proba(d) - 0.5).abs(),
            positive: d.label.is_positive(),
        })
        .collect();
    scored.sort_by(|a, b| a.margin.total_cmp(&b.margin).then_with(|| a.id.cmp(&b.id)));
    scored
}

/// Ids of the `k` least certain documents. With `balance`, `k` must be even
/// and `k / 2` are taken from each gold class.
pub fn uncertainty_sample<M: ClassifierModel + ?Sized>(
    model: &M,
    pool: &Dataset,
    k: usize,
    balance: bool,
) -> Result<Vec<String>> {
    if pool.len() < k {
        return Err(Error::Validation(format!(
            "pool has {} documents, {k} requested",
            pool.len()
        )));
    }
    let ranked = rank_by_margin(model, pool);
    if !balance {
        return Ok(ranked.into_iter().take(k).map(|s| s.id).collect());
    }
    if k % 2 != 0 {
        return Err(Error::Validation(format!(
            "balanced selection needs an even k, got {k}"
        )));
    }
    let half = k / 2;
    let (pos, neg) = pool.label_counts();
    if pos < half || neg < half {
        return Err(Error::Validation(format!(
            "pool has {pos} positive / {neg} negative documents, {half} of each needed"
        )));
    }
    let (mut taken_pos, mut taken_neg) = (0, 0);
    let mut out = Vec::with_capacity(k);
    for s in ranked {
        let slot = if s.positive { &mut taken_pos } else { &mut taken_neg };
        if *slot < half {
            *slot += 1;
            out.push(s.id);
        }
        if out.len() == k {
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Document, Label, SplitTag};
    use crate::model::{LinearTextModel, ModelConfig};

    fn pool(rows: &[(&str, &str, bool)]) -> Dataset {
        let docs = rows
            .iter()
            .map(|(id, t, p)| Document::from_text(*id, t, Label::from_positive(*p), &[]).unwrap())
            .collect();
        Dataset::new(docs, SplitTag::Train).unwrap()
    }

    #[test]
    fn exact_half_ranks_first() {
        let mut m = LinearTextModel::zeros(ModelConfig {
            dims_log2: 10,
            ..Default::default()
        });
        m.set_token_weight("good", 2.0);
        let p = pool(&[("a", "good", true), ("b", "meh", false), ("c", "good good", true)]);
        assert_eq!(uncertainty_sample(&m, &p, 1, false).unwrap(), ["b"]);
    }

    #[test]
    fn balance_errors() {
        let m = LinearTextModel::zeros(ModelConfig {
            dims_log2: 10,
            ..Default::default()
        });
        let p = pool(&[("a", "x", true), ("b", "y", true), ("c", "z", false)]);
        assert!(uncertainty_sample(&m, &p, 4, true).is_err());
        assert!(uncertainty_sample(&m, &p, 3, true).is_err());
        assert!(uncertainty_sample(&m, &p, 2, true).is_ok());
    }
}
