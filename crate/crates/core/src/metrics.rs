//! AUC and accuracy over valid positions.

/// ROC AUC as the Mann–Whitney statistic: the fraction of (positive,
/// negative) pairs ranked correctly, ties counting one half. Computed from
/// mid-ranks in `O(n log n)`. `None` when only one class is present.
pub fn auc(preds: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(preds.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[a].total_cmp(&preds[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && preds[order[j + 1]] == preds[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tie group i..=j shares the mean rank
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q))
}

/// Fraction of predictions on the right side of `threshold`; `p ≥ threshold`
/// counts as predicting a correct answer. `None` for empty input.
pub fn acc(preds: &[f64], labels: &[bool], threshold: f64) -> Option<f64> {
    assert_eq!(preds.len(), labels.len());
    if preds.is_empty() {
        return None;
    }
    let hits = preds
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| (p >= threshold) == l)
        .count();
    Some(hits as f64 / preds.len() as f64)
}

/// Keeps the entries whose mask is set.
pub fn masked(preds: &[f64], labels: &[bool], mask: &[bool]) -> (Vec<f64>, Vec<bool>) {
    preds
        .iter()
        .zip(labels)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&p, &l), _)| (p, l))
        .unzip()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub auc: Option<f64>,
    pub acc: Option<f64>,
    pub count: usize,
}

impl Scores {
    pub fn compute(preds: &[f64], labels: &[bool]) -> Self {
        Self {
            auc: auc(preds, labels),
            acc: acc(preds, labels, 0.5),
            count: preds.len(),
        }
    }
}

/// Formats an optional metric; `undefined` when absent.
pub fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"))
}
