use serde::Serialize;

use crate::tensor::Scalar;

pub const DEFAULT_KS: [usize; 3] = [5, 10, 20];

/// 1-based rank of `target` under the ordering used by top-k prediction:
/// higher score first, ties to the lower index.
pub fn rank_of<T: Scalar>(scores: &[T], target: usize) -> usize {
    let s = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < target))
        .count()
}

pub fn hit_at(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

/// Single relevant item: `1 / log₂(rank + 1)` inside the cutoff.
pub fn ndcg_at(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// HR@K and nDCG@K averaged over users.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    #[serde(rename = "K")]
    pub ks: Vec<usize>,
    pub hr: Vec<f64>,
    pub ndcg: Vec<f64>,
}

impl Metrics {
    pub fn from_ranks(ranks: &[usize], ks: &[usize]) -> Self {
        let mean = |f: &dyn Fn(usize) -> f64| {
            if ranks.is_empty() {
                0.0
            } else {
                ranks.iter().map(|&r| f(r)).sum::<f64>() / ranks.len() as f64
            }
        };
        Metrics {
            ks: ks.to_vec(),
            hr: ks.iter().map(|&k| mean(&|r| hit_at(r, k))).collect(),
            ndcg: ks.iter().map(|&k| mean(&|r| ndcg_at(r, k))).collect(),
        }
    }

    pub fn hr_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.hr[i])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.ndcg[i])
    }
}
