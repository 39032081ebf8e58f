use crate::error::DeriveError;
use crate::layout::ClassRatio;

/// Additive smoothing applied to both distributions before taking KL.
pub const KL_EPSILON: f64 = 1e-6;

/// `KL(p ‖ q)` after ε-smoothing and renormalizing both sides.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "distribution length mismatch");
    let c = p.len() as f64;
    let ps: f64 = p.iter().sum::<f64>() + c * KL_EPSILON;
    let qs: f64 = q.iter().sum::<f64>() + c * KL_EPSILON;
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            let a = (pi + KL_EPSILON) / ps;
            let b = (qi + KL_EPSILON) / qs;
            a * (a / b).ln()
        })
        .sum()
}

/// Elementwise mean of the ratios at `indices`.
pub fn mean_ratio(ratios: &[ClassRatio], indices: &[usize]) -> Vec<f64> {
    let c = ratios.first().map_or(0, ClassRatio::len);
    let mut m = vec![0.0; c];
    for &i in indices {
        for (a, b) in m.iter_mut().zip(ratios[i].values()) {
            *a += b;
        }
    }
    let n = indices.len().max(1) as f64;
    m.iter_mut().for_each(|v| *v /= n);
    m
}

/// Picks `k` corpus entries whose mean class ratio is close to `target`.
///
/// Greedy forward selection adds, at each step, the entry that minimizes
/// `KL(mean ratio ‖ target)` (ties to the lower index). The greedy set is
/// then refined by single swaps that strictly lower the KL, so the result
/// is never worse than the pure greedy choice. Returned indices are sorted.
pub fn balanced_subsample(
    ratios: &[ClassRatio],
    target: &ClassRatio,
    k: usize,
) -> Result<Vec<usize>, DeriveError> {
    let n = ratios.len();
    if k > n {
        return Err(DeriveError::SubsampleTooLarge { k, n });
    }
    if k == n {
        return Ok((0..n).collect());
    }
    if let Some(bad) = ratios.iter().position(|r| r.len() != target.len()) {
        return Err(DeriveError::InvalidConfig(format!(
            "corpus entry {bad} has {} classes, target has {}",
            ratios[bad].len(),
            target.len()
        )));
    }
    let c = target.len();
    let q = target.values();
    let mut chosen = vec![false; n];
    let mut sum = vec![0.0; c];
    let mut picked = Vec::with_capacity(k);
    let kl_with = |sum: &[f64], add: &[f64], count: usize| {
        let m: Vec<f64> = sum.iter().zip(add).map(|(s, a)| (s + a) / count as f64).collect();
        kl_divergence(&m, q)
    };

    for step in 0..k {
        let mut best: Option<(f64, usize)> = None;
        for i in (0..n).filter(|&i| !chosen[i]) {
            let kl = kl_with(&sum, ratios[i].values(), step + 1);
            if best.is_none_or(|(b, _)| kl < b) {
                best = Some((kl, i));
            }
        }
        let (_, i) = best.expect("k < n leaves a candidate");
        chosen[i] = true;
        picked.push(i);
        for (s, v) in sum.iter_mut().zip(ratios[i].values()) {
            *s += v;
        }
    }

    // Swap refinement: replace a chosen entry by an unchosen one while that
    // strictly lowers the divergence.
    let mut current = kl_with(&sum, &vec![0.0; c], k);
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for (slot, &out) in picked.iter().enumerate() {
            let without: Vec<f64> = sum
                .iter()
                .zip(ratios[out].values())
                .map(|(s, v)| s - v)
                .collect();
            for cand in (0..n).filter(|&i| !chosen[i]) {
                let kl = kl_with(&without, ratios[cand].values(), k);
                if kl < current - 1e-15 && best.is_none_or(|(b, _, _)| kl < b) {
                    best = Some((kl, slot, cand));
                }
            }
        }
        let Some((kl, slot, cand)) = best else { break };
        let out = picked[slot];
        chosen[out] = false;
        chosen[cand] = true;
        picked[slot] = cand;
        for ((s, a), b) in sum
            .iter_mut()
            .zip(ratios[cand].values())
            .zip(ratios[out].values())
        {
            *s += a - b;
        }
        current = kl;
    }
    picked.sort_unstable();
    Ok(picked)
}
