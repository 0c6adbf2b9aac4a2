use crate::error::{shape_err, Error, Result};

fn check_lengths(pred: &[usize], labels: &[usize]) -> Result<()> {
    if pred.len() != labels.len() {
        return Err(shape_err(format!("{} predictions for {} labels", pred.len(), labels.len())));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("no samples to score".into()));
    }
    Ok(())
}

/// `counts[i][j]` = samples with cluster `i` and class `j`.
pub fn confusion_matrix(pred: &[usize], labels: &[usize]) -> Vec<Vec<u64>> {
    let rows = pred.iter().max().map_or(0, |m| m + 1);
    let cols = labels.iter().max().map_or(0, |m| m + 1);
    let mut m = vec![vec![0u64; cols]; rows];
    for (&p, &l) in pred.iter().zip(labels) {
        m[p][l] += 1;
    }
    m
}

/// Minimum-cost perfect matching on a square matrix (Hungarian method with
/// row and column potentials). Returns the column assigned to each row.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; index 0 is the virtual source column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    way[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if row_of[j] > 0 {
            assignment[row_of[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Fraction of samples correctly labelled under the best one-to-one mapping
/// from cluster ids to class ids.
pub fn clustering_accuracy(pred: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(pred, labels)?;
    let counts = confusion_matrix(pred, labels);
    let n = counts.len().max(counts.first().map_or(0, |r| r.len()));
    let max = counts.iter().flatten().copied().max().unwrap_or(0) as f64;
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| max - counts.get(i).and_then(|r| r.get(j)).copied().unwrap_or(0) as f64)
                .collect()
        })
        .collect();
    let assignment = min_cost_assignment(&cost);
    let matched: u64 = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| counts.get(i).and_then(|r| r.get(j)).copied().unwrap_or(0))
        .sum();
    Ok(matched as f64 / pred.len() as f64)
}

fn entropy(counts: impl Iterator<Item = u64>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information normalized by the arithmetic mean of both entropies.
/// Two single-cluster partitions score 1 when identical in size, and any
/// partition against a constant one scores 0.
pub fn nmi(pred: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(pred, labels)?;
    let n = pred.len() as f64;
    let counts = confusion_matrix(pred, labels);
    let row_tot: Vec<u64> = counts.iter().map(|r| r.iter().sum()).collect();
    let col_tot: Vec<u64> = (0..counts[0].len()).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
    let hp = entropy(row_tot.iter().copied(), n);
    let hl = entropy(col_tot.iter().copied(), n);
    if hp == 0.0 && hl == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for (i, row) in counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (row_tot[i] as f64 * col_tot[j] as f64)).ln();
            }
        }
    }
    Ok((mi / (0.5 * (hp + hl))).clamp(0.0, 1.0))
}
