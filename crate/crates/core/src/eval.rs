//! Full-ranking leave-one-out evaluation and attention heat-map export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::data::Encoded;
use crate::error::{LsanError, Result};
use crate::metrics::{rank_of, Metrics};
use crate::model::{LsanModel, ParamBreakdown, SeqInput};
use crate::tensor::{Graph, Scalar};

/// Sequences scored per forward pass during evaluation.
pub const EVAL_BATCH: usize = 128;

/// Rank of each case's target among all items, in case order.
///
/// Cases are grouped by length so batches carry little padding; results do
/// not depend on the grouping.
pub fn rank_cases<T: Scalar>(model: &LsanModel<T>, cases: &[Encoded]) -> Result<Vec<usize>> {
    let mut order: Vec<usize> = (0..cases.len()).collect();
    order.sort_by_key(|&i| (cases[i].items.len(), i));
    let chunks: Vec<Vec<(usize, usize)>> = order
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let inputs: Vec<SeqInput<'_>> = chunk
                .iter()
                .map(|&i| SeqInput::new(&cases[i].items, &cases[i].contexts))
                .collect();
            let logits = model.logits(&inputs)?;
            Ok(chunk
                .iter()
                .zip(logits)
                .map(|(&i, l)| (i, rank_of(&l, cases[i].target)))
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut ranks = vec![0; cases.len()];
    for (i, r) in chunks.into_iter().flatten() {
        ranks[i] = r;
    }
    Ok(ranks)
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub split: String,
    pub metrics: Metrics,
    /// Rank of the held-out item, one per user.
    pub ranks: Vec<usize>,
    pub params: ParamBreakdown,
}

#[derive(Serialize)]
struct MetricsDoc<'a> {
    split: &'a str,
    #[serde(flatten)]
    metrics: &'a Metrics,
    n_users: usize,
    params_total: usize,
    params_embedding: usize,
    config_hash: &'a str,
}

impl EvalReport {
    pub fn n_users(&self) -> usize {
        self.ranks.len()
    }

    pub fn to_json(&self, config_hash: &str) -> String {
        let doc = MetricsDoc {
            split: &self.split,
            metrics: &self.metrics,
            n_users: self.n_users(),
            params_total: self.params.total,
            params_embedding: self.params.embedding,
            config_hash,
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("metrics serialise");
        s.push('\n');
        s
    }
}

pub fn evaluate<T: Scalar>(
    model: &LsanModel<T>,
    cases: &[Encoded],
    split: &str,
    ks: &[usize],
) -> Result<EvalReport> {
    let ranks = rank_cases(model, cases)?;
    Ok(EvalReport {
        split: split.to_owned(),
        metrics: Metrics::from_ranks(&ranks, ks),
        ranks,
        params: model.count_parameters(),
    })
}

/// Attention over the last positions of one sequence, for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAttention {
    /// One `T'×T'` matrix per attention head.
    pub heads: Vec<Vec<Vec<f64>>>,
    /// Mean of the head matrices.
    pub mean: Vec<Vec<f64>>,
}

/// Attention weights among the last `last_k` items of `seq`, with every row
/// renormalised over the retained columns.
pub fn export_attention<T: Scalar>(
    model: &LsanModel<T>,
    seq: SeqInput<'_>,
    last_k: usize,
) -> Result<Vec<LayerAttention>> {
    if last_k == 0 {
        return Err(LsanError::contract("attention export needs last_k >= 1"));
    }
    let mut g = Graph::inference();
    let fw = model.forward_graph(&mut g, &[seq])?;
    let t = fw.layout.seq_len;
    let keep = t.min(last_k);
    let from = t - keep;
    Ok(fw
        .attention
        .iter()
        .map(|heads| {
            let heads: Vec<Vec<Vec<f64>>> = heads
                .iter()
                .map(|&a| {
                    let a = g.value(a);
                    (from..t)
                        .map(|r| {
                            let row: Vec<f64> = a.row(r)[from..t].iter().map(|v| v.as_f64()).collect();
                            let sum: f64 = row.iter().sum();
                            if sum > 0.0 {
                                row.iter().map(|v| v / sum).collect()
                            } else {
                                vec![1.0 / keep as f64; keep]
                            }
                        })
                        .collect()
                })
                .collect();
            let n = heads.len() as f64;
            let mean = (0..keep)
                .map(|r| (0..keep).map(|c| heads.iter().map(|h| h[r][c]).sum::<f64>() / n).collect())
                .collect();
            LayerAttention { heads, mean }
        })
        .collect())
}

/// `%g`-style rendering with 6 significant digits.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    if (-5..6).contains(&exp) {
        let fixed = format!("{x:.*}", (5 - exp) as usize);
        trim_zeros(&fixed).to_owned()
    } else {
        format!("{}e{exp}", trim_zeros(mantissa))
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn matrix_csv(m: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for row in m {
        let cells: Vec<String> = row.iter().map(|&v| sig6(v)).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

/// Writes `attention_layer{l}_head{h}.csv` and `attention_layer{l}_mean.csv`.
pub fn write_heatmaps(dir: &Path, layers: &[LayerAttention]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| LsanError::io(dir, e))?;
    let mut written = Vec::new();
    for (l, layer) in layers.iter().enumerate() {
        let files = layer
            .heads
            .iter()
            .enumerate()
            .map(|(h, m)| (format!("attention_layer{l}_head{h}.csv"), m))
            .chain([(format!("attention_layer{l}_mean.csv"), &layer.mean)]);
        for (name, m) in files {
            let path = dir.join(name);
            fs::write(&path, matrix_csv(m)).map_err(|e| LsanError::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}
