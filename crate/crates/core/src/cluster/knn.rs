use rayon::prelude::*;

use crate::error::{Error, Result};

/// Assigns every query row the majority label of its `knn` nearest labeled
/// rows (Euclidean). Equal distances resolve to the earlier labeled row;
/// equal vote counts resolve to the smaller label.
pub fn propagate_labels(
    labeled: &[f64],
    labels: &[u32],
    queries: &[f64],
    dim: usize,
    knn: usize,
) -> Result<Vec<u32>> {
    if dim == 0 || labeled.len() != labels.len() * dim || !queries.len().is_multiple_of(dim) {
        return Err(Error::invalid("label propagation inputs have inconsistent shapes"));
    }
    if labels.is_empty() {
        return Err(Error::invalid("label propagation needs at least one labeled row"));
    }
    let knn = knn.clamp(1, labels.len());
    Ok(queries
        .par_chunks(dim)
        .map(|q| {
            // Sorted (distance, row) of the current best candidates.
            let mut best: Vec<(f64, usize)> = Vec::with_capacity(knn + 1);
            for (i, row) in labeled.chunks_exact(dim).enumerate() {
                let d: f64 = row.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                if best.len() == knn && d >= best[knn - 1].0 {
                    continue;
                }
                let pos = best.partition_point(|&(bd, _)| bd <= d);
                best.insert(pos, (d, i));
                best.truncate(knn);
            }
            let mut votes: Vec<(u32, usize)> = Vec::with_capacity(knn);
            for &(_, i) in &best {
                match votes.iter_mut().find(|(l, _)| *l == labels[i]) {
                    Some(v) => v.1 += 1,
                    None => votes.push((labels[i], 1)),
                }
            }
            votes
                .into_iter()
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|(l, _)| l)
                .expect("at least one neighbor")
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_match_takes_label() {
        let labeled = [0.0, 0.0, 5.0, 5.0, 9.0, 1.0];
        let out = propagate_labels(&labeled, &[3, 8, 1], &[5.0, 5.0], 2, 1).unwrap();
        assert_eq!(out, [8]);
    }

    #[test]
    fn majority_of_three() {
        let labeled = [1.0, 2.0, 3.0, 100.0];
        let out = propagate_labels(&labeled, &[2, 2, 7, 7], &[2.5], 1, 3).unwrap();
        assert_eq!(out, [2]);
    }

    #[test]
    fn tie_goes_to_smaller_label() {
        let labeled = [-1.0, 1.0];
        let out = propagate_labels(&labeled, &[9, 5], &[0.0], 1, 2).unwrap();
        assert_eq!(out, [5]);
    }

    #[test]
    fn identity_on_labeled_set() {
        let labeled: Vec<f64> = (0..40).map(|i| (i * i % 17) as f64 + i as f64 * 0.01).collect();
        let labels: Vec<u32> = (0..20).map(|i| i % 6).collect();
        let out = propagate_labels(&labeled, &labels, &labeled, 2, 1).unwrap();
        assert_eq!(out, labels);
    }

    #[test]
    fn rejects_empty_labeled_set() {
        assert!(propagate_labels(&[], &[], &[1.0], 1, 1).is_err());
    }
}
