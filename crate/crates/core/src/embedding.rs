//! Quotient-remainder compositional item embeddings with context-aware fusion.
//!
//! The full `|V| × D` item table is replaced by `N` small base tables. Item
//! `g` selects row `g mod m₁` of the first table and row
//! `(g div m₁·…·mₙ₋₁) mod mₙ` of table `n`; the selected rows are then
//! merged with softmax weights conditioned on the item's context embedding
//! and passed, together with that context, through a one-layer MLP.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{LsanError, Result};
use crate::tensor::{Graph, Scalar, Var};

/// Item slot used for right-padding batched sequences. Lies outside every
/// quotient-remainder range.
pub const PAD_ITEM: usize = usize::MAX;

/// Category index standing in for "no previous item".
pub const PAD_CATEGORY: usize = 0;

/// Context index returned for triplets never seen during training.
pub const UNK_CONTEXT: usize = 0;

/// Splits global index `g` into one row index per base table.
pub fn decompose_index(g: usize, sizes: &[usize]) -> Result<Vec<usize>> {
    check_sizes(sizes)?;
    let capacity = capacity(sizes);
    if g >= capacity {
        return Err(LsanError::Index {
            index: g,
            limit: capacity,
        });
    }
    let mut rest = g;
    Ok(sizes
        .iter()
        .map(|&m| {
            let idx = rest % m;
            rest /= m;
            idx
        })
        .collect())
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(LsanError::Config(format!("invalid base table sizes {sizes:?}")));
    }
    Ok(())
}

/// Product of the table sizes, saturating at `usize::MAX`.
fn capacity(sizes: &[usize]) -> usize {
    sizes.iter().fold(1usize, |acc, &m| acc.saturating_mul(m))
}

/// `N = 2` gives `[m₁, ⌈|V|/m₁⌉]`; larger `N` repeats `m₁` and sizes the
/// last table to cover the remaining quotient range.
pub fn default_sizes(num_items: usize, num_bases: usize, m1: usize) -> Result<Vec<usize>> {
    if num_items == 0 || num_bases == 0 || m1 == 0 {
        return Err(LsanError::Config(format!(
            "cannot size {num_bases} base tables with m1 = {m1} for {num_items} items"
        )));
    }
    if num_bases == 1 {
        return Ok(vec![num_items]);
    }
    let head = m1.saturating_pow(num_bases as u32 - 1);
    let mut sizes = vec![m1; num_bases - 1];
    sizes.push(num_items.div_ceil(head).max(1));
    Ok(sizes)
}

/// Table sizes validated against the item count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QrCodebook {
    sizes: Vec<usize>,
    num_items: usize,
}

impl QrCodebook {
    pub fn new(sizes: Vec<usize>, num_items: usize) -> Result<Self> {
        check_sizes(&sizes)?;
        if capacity(&sizes) < num_items {
            return Err(LsanError::Config(format!(
                "base table sizes {sizes:?} give {} combinations for {num_items} items",
                capacity(&sizes)
            )));
        }
        Ok(QrCodebook { sizes, num_items })
    }

    pub fn decompose(&self, g: usize) -> Result<Vec<usize>> {
        if g >= self.num_items {
            return Err(LsanError::Index {
                index: g,
                limit: self.num_items,
            });
        }
        decompose_index(g, &self.sizes)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_bases(&self) -> usize {
        self.sizes.len()
    }

    pub fn total_rows(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// `Σ mₙ / |V|`, the fraction of a full table's values that is stored.
    pub fn compression_ratio(&self) -> f64 {
        self.total_rows() as f64 / self.num_items as f64
    }
}

/// `(previous category, current category, hour of day)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContextKey {
    pub prev: usize,
    pub cur: usize,
    pub hour: u8,
}

/// Dense indices for observed context triplets; index 0 is reserved for unseen ones.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ContextVocab {
    index: HashMap<ContextKey, usize>,
    keys: Vec<ContextKey>,
}

impl ContextVocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: ContextKey) -> usize {
        if let Some(&i) = self.index.get(&key) {
            return i;
        }
        self.keys.push(key);
        let i = self.keys.len();
        self.index.insert(key, i);
        i
    }

    pub fn lookup(&self, key: &ContextKey) -> usize {
        self.index.get(key).copied().unwrap_or(UNK_CONTEXT)
    }

    /// Rows needed in the context table, including the unknown row.
    pub fn table_rows(&self) -> usize {
        self.keys.len() + 1
    }

    pub fn observed(&self) -> usize {
        self.keys.len()
    }

    pub fn keys(&self) -> &[ContextKey] {
        &self.keys
    }

    /// One `prev  cur  hour  index` line per observed triplet.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (i, k) in self.keys.iter().enumerate() {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", k.prev, k.cur, k.hour, i + 1);
        }
        fs::write(path, out).map_err(|e| LsanError::io(path, e))
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LsanError::io(path, e))?;
        let mut vocab = ContextVocab::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            let parsed = (f.len() == 4)
                .then(|| {
                    Some((
                        ContextKey {
                            prev: f[0].parse().ok()?,
                            cur: f[1].parse().ok()?,
                            hour: f[2].parse().ok().filter(|&h: &u8| h < 24)?,
                        },
                        f[3].parse::<usize>().ok()?,
                    ))
                })
                .flatten();
            let Some((key, idx)) = parsed else {
                return Err(LsanError::format(path, format!("line {}: {line:?}", n + 1)));
            };
            if vocab.insert(key) != idx {
                return Err(LsanError::format(
                    path,
                    format!("line {}: index {idx} out of sequence", n + 1),
                ));
            }
        }
        Ok(vocab)
    }
}

/// Graph handles for every embedding-stage parameter.
#[derive(Clone, Debug)]
pub struct EmbeddingVars {
    pub tables: Vec<Var>,
    pub context_table: Var,
    /// `None` selects unweighted summation of the base embeddings.
    pub w_a: Option<Var>,
    pub mlp_weight: Var,
    pub mlp_bias: Var,
}

/// Fused embeddings `[R, D]` and their fusion weights `[R, N]`.
#[derive(Clone, Copy, Debug)]
pub struct Fusion {
    pub h: Var,
    pub alpha: Var,
}

/// Selects each item's row from every base table. Padding slots read row 0;
/// callers mask them afterwards.
pub fn lookup_bases<T: Scalar>(
    g: &mut Graph<T>,
    tables: &[Var],
    codebook: &QrCodebook,
    items: &[usize],
) -> Result<Vec<Var>> {
    if tables.len() != codebook.num_bases() {
        return Err(LsanError::contract(format!(
            "{} base tables for {} sizes",
            tables.len(),
            codebook.num_bases()
        )));
    }
    let mut rows = vec![Vec::with_capacity(items.len()); tables.len()];
    for &item in items {
        if item == PAD_ITEM {
            rows.iter_mut().for_each(|r| r.push(0));
            continue;
        }
        for (r, idx) in rows.iter_mut().zip(codebook.decompose(item)?) {
            r.push(idx);
        }
    }
    tables
        .iter()
        .zip(&rows)
        .map(|(&t, r)| g.index_select(t, r))
        .collect()
}

/// `αₙ = softmaxₙ(rᵀ SiLU(W_a ẽⁿ))`, `h = Σ αₙ ẽⁿ`, row-wise over `R` items.
pub fn fuse_dynamic<T: Scalar>(
    g: &mut Graph<T>,
    bases: &[Var],
    context: Var,
    w_a: Var,
) -> Result<Fusion> {
    if bases.is_empty() {
        return Err(LsanError::contract("fusion over zero base embeddings"));
    }
    let mut scores = Vec::with_capacity(bases.len());
    for &e in bases {
        let proj = g.matmul_nt(e, w_a)?;
        let act = g.silu(proj)?;
        let prod = g.mul(act, context)?;
        scores.push(g.row_sum(prod)?);
    }
    let scores = g.concat(&scores)?;
    let alpha = g.softmax(scores, 1, None)?;
    let mut h = None;
    for (n, &e) in bases.iter().enumerate() {
        let a = g.slice_cols(alpha, n, n + 1)?;
        let weighted = g.scale_rows(e, a)?;
        h = Some(match h {
            None => weighted,
            Some(acc) => g.add(acc, weighted)?,
        });
    }
    Ok(Fusion {
        h: h.expect("at least one base"),
        alpha,
    })
}

/// Plain `Σₙ ẽⁿ`.
pub fn sum_bases<T: Scalar>(g: &mut Graph<T>, bases: &[Var]) -> Result<Var> {
    let (&first, rest) = bases
        .split_first()
        .ok_or_else(|| LsanError::contract("sum over zero base embeddings"))?;
    rest.iter().try_fold(first, |acc, &e| g.add(acc, e))
}

/// `SiLU([h ; r] · W + b)` with `W` of shape `[2D, D]`.
pub fn contextualize<T: Scalar>(
    g: &mut Graph<T>,
    h: Var,
    context: Var,
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let joined = g.concat(&[h, context])?;
    let lin = g.matmul(joined, weight)?;
    let lin = g.add_row_bias(lin, bias)?;
    g.silu(lin)
}

/// Embeds a flattened run of item slots into `[R, D]`; padding rows are zero.
pub fn embed_sequence<T: Scalar>(
    g: &mut Graph<T>,
    vars: &EmbeddingVars,
    codebook: &QrCodebook,
    items: &[usize],
    contexts: &[usize],
) -> Result<Var> {
    if items.len() != contexts.len() {
        return Err(LsanError::contract(format!(
            "{} items but {} contexts",
            items.len(),
            contexts.len()
        )));
    }
    if items.is_empty() {
        return Err(LsanError::contract("empty item sequence"));
    }
    let bases = lookup_bases(g, &vars.tables, codebook, items)?;
    let ctx = g.index_select(vars.context_table, contexts)?;
    let h = match vars.w_a {
        Some(w_a) if bases.len() > 1 => fuse_dynamic(g, &bases, ctx, w_a)?.h,
        _ => sum_bases(g, &bases)?,
    };
    let out = contextualize(g, h, ctx, vars.mlp_weight, vars.mlp_bias)?;
    let keep: Vec<bool> = items.iter().map(|&i| i != PAD_ITEM).collect();
    if keep.iter().all(|&k| k) {
        Ok(out)
    } else {
        g.mask_rows(out, &keep)
    }
}
