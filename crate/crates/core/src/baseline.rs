//! Non-personalized popularity ranking from recent sales counts.

use std::collections::BTreeMap;

use crate::catalog::{Catalog, PurchaseSequence, Timestamp, MINUTES_PER_DAY};
use crate::error::{Error, Result};
use crate::evaluation::{order_by_score, SharedRanking};

pub const DEFAULT_WINDOW_DAYS: i64 = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct PopularityTable {
    /// Catalog index → score.
    pub scores: BTreeMap<usize, f64>,
    pub window: (Timestamp, Timestamp),
    pub eval_start: Timestamp,
}

/// Sales counts in `[window_start, window_end)` for every article still
/// available at or after `eval_start`.
///
/// Articles that are not in store at `eval_start` but enter later, and had
/// no sales in the window, get the mean count over the other scored
/// articles (zeros included). Articles never available after `eval_start`
/// are left out.
pub fn popularity_scores(
    sales: &[PurchaseSequence],
    catalog: &Catalog,
    window_start: Timestamp,
    window_end: Timestamp,
    eval_start: Timestamp,
) -> Result<PopularityTable> {
    if !(window_start < window_end && window_end <= eval_start) {
        return Err(Error::Precondition(format!(
            "popularity window [{window_start}, {window_end}) must end by {eval_start}"
        )));
    }
    let mut counts = vec![0u64; catalog.len()];
    for s in sales {
        for e in &s.events {
            if window_start <= e.t && e.t < window_end {
                counts[e.article] += 1;
            }
        }
    }
    let mut scores = BTreeMap::new();
    let mut entering = Vec::new();
    for (i, a) in catalog.articles().iter().enumerate() {
        let later = a.availability.iter().any(|w| w.end > eval_start);
        if !later {
            continue;
        }
        if !a.available_at(eval_start) && counts[i] == 0 {
            entering.push(i);
        } else {
            scores.insert(i, counts[i] as f64);
        }
    }
    let mean = if scores.is_empty() {
        0.0
    } else {
        scores.values().sum::<f64>() / scores.len() as f64
    };
    for i in entering {
        scores.insert(i, mean);
    }
    Ok(PopularityTable {
        scores,
        window: (window_start, window_end),
        eval_start,
    })
}

/// Popularity over the `days` days right before `eval_start`.
pub fn popularity_before(
    sales: &[PurchaseSequence],
    catalog: &Catalog,
    eval_start: Timestamp,
    days: i64,
) -> Result<PopularityTable> {
    popularity_scores(
        sales,
        catalog,
        eval_start - days * MINUTES_PER_DAY,
        eval_start,
        eval_start,
    )
}

/// Catalog indices by descending score, ties by ascending article id.
pub fn baseline_rank(table: &PopularityTable, catalog: &Catalog) -> Vec<usize> {
    let articles: Vec<usize> = table.scores.keys().copied().collect();
    let ids: Vec<&str> = articles.iter().map(|&a| catalog.id(a)).collect();
    let scores: Vec<f64> = table.scores.values().copied().collect();
    order_by_score(&ids, &scores).into_iter().map(|p| articles[p]).collect()
}

impl PopularityTable {
    pub fn recommender(&self) -> SharedRanking {
        SharedRanking::new("baseline", self.scores.clone())
    }
}
