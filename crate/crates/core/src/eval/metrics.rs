use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledScore {
    pub score: f64,
    /// `true` for anomalous.
    pub label: bool,
}

/// Area under the ROC curve from rank statistics: the probability that a
/// random positive outranks a random negative, ties counting one half.
pub fn auroc(samples: &[LabeledScore]) -> Result<f64> {
    if let Some(bad) = samples.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::contract(format!("non-finite score {}", bad.score)));
    }
    let positives = samples.iter().filter(|s| s.label).count();
    let negatives = samples.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::contract(format!(
            "AUROC needs both classes, got {positives} positive and {negatives} negative"
        )));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| samples[a].score.total_cmp(&samples[b].score));

    // Twice the rank sum keeps tied average ranks integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && samples[order[j + 1]].score == samples[order[i]].score {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let twice_mean = (i + 1 + j + 1) as u128;
        let tied_pos = order[i..=j].iter().filter(|&&k| samples[k].label).count() as u128;
        rank_sum2 += twice_mean * tied_pos;
        i = j + 1;
    }
    let p = positives as u128;
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / 2.0 / (positives as f64 * negatives as f64))
}
