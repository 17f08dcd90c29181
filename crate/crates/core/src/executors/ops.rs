use crate::chunk::{ActionChunk, TokenChunk};
use crate::error::{Error, Result};
use crate::flow::CommittedPrefix;

/// Frozen prefix for a request made `s` steps into `active`: rows `0..d`
/// are `active[s..s + d]`, rows `d..H - s` carry the rest of `active` as
/// overlap targets, and the final `s` rows are zero.
pub fn commit_prefix(active: &ActionChunk, d: usize, s: usize) -> Result<CommittedPrefix> {
    let (h, a) = (active.horizon(), active.action_dim());
    if d + s > h {
        return Err(Error::contract(format!("chunk of {h} rows cannot cover d={d} after s={s}")));
    }
    let mut values = ActionChunk::zeros(h, a);
    for i in 0..h - s {
        values.row_mut(i).copy_from_slice(active.row(i + s));
    }
    Ok(CommittedPrefix { values, d })
}

/// Prefix tokens for the next chunk: `active[s..s + d]` moved to rows `0..d`,
/// everything else masked.
pub fn commit_prefix_tokens(active: &TokenChunk, d: usize, s: usize) -> Result<TokenChunk> {
    let h = active.horizon();
    if d + s > h || !active.rows_unmasked(s..s + d) {
        return Err(Error::contract(format!("active chunk does not define rows {s}..{}", s + d)));
    }
    let mut out = TokenChunk::masked(h, active.action_dim());
    for i in 0..d {
        out.set_row(i, active.row(i + s));
    }
    Ok(out)
}

/// Squared distance between `cand[i]` and `prev[i + s]` over the overlap.
pub fn bid_loss(cand: &ActionChunk, prev: &ActionChunk, s: usize) -> f64 {
    let h = cand.horizon();
    (0..h.saturating_sub(s))
        .map(|i| {
            cand.row(i)
                .iter()
                .zip(prev.row(i + s))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
        })
        .sum()
}

/// Index of the candidate with the smallest [`bid_loss`]; ties go to the
/// lowest index.
pub fn bid_select(candidates: &[ActionChunk], prev: &ActionChunk, s: usize) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::contract("BID needs at least one candidate"));
    }
    let mut best = (f64::INFINITY, 0);
    for (i, c) in candidates.iter().enumerate() {
        let l = bid_loss(c, prev, s);
        if l < best.0 {
            best = (l, i);
        }
    }
    Ok(best.1)
}

/// Weighted average of overlapping predictions `(age, action)` with weight
/// `exp(-m · age)`.
pub fn temporal_ensemble_combine(predictions: &[(usize, &[f64])], m: f64) -> Result<Vec<f64>> {
    let Some(&(_, first)) = predictions.first() else {
        return Err(Error::contract("temporal ensemble over an empty buffer"));
    };
    let youngest = predictions.iter().map(|p| p.0).min().unwrap_or(0);
    let mut out = vec![0.0; first.len()];
    let mut total = 0.0;
    for &(age, a) in predictions {
        // relative to the youngest so m -> inf keeps a finite weight
        let w = (-m * (age - youngest) as f64).exp();
        total += w;
        for (o, &x) in out.iter_mut().zip(a) {
            *o += w * x;
        }
    }
    out.iter_mut().for_each(|o| *o /= total);
    Ok(out)
}

/// `(mean boundary discontinuity, mean within-chunk discontinuity)` of an
/// action log; `boundary[t]` marks that step `t` switched chunks, and the
/// discontinuity at `t ≥ 1` is `‖a_t − a_{t−1}‖₂`. Empty groups give 0.
pub fn jerk_metric(actions: &[Vec<f64>], boundary: &[bool]) -> (f64, f64) {
    let mut sums = [(0.0, 0usize); 2];
    for t in 1..actions.len() {
        let jump = actions[t]
            .iter()
            .zip(&actions[t - 1])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let g = usize::from(!boundary.get(t).copied().unwrap_or(false));
        sums[g].0 += jump;
        sums[g].1 += 1;
    }
    let mean = |(s, n): (f64, usize)| if n == 0 { 0.0 } else { s / n as f64 };
    (mean(sums[0]), mean(sums[1]))
}
