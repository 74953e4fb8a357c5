//! Twin-attention encoder: depthwise convolution heads for local patterns and
//! position-aware scaled dot-product heads for global ones, concatenated
//! along the feature axis (convolution heads first).

use crate::error::{LsanError, Result};
use crate::tensor::{Graph, Scalar, Var};

/// Shape of a right-padded batch: `batch` blocks of `seq_len` rows, of which
/// the first `lengths[b]` are real items.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub batch: usize,
    pub seq_len: usize,
    pub lengths: Vec<usize>,
}

impl SeqLayout {
    pub fn new(lengths: Vec<usize>) -> Result<Self> {
        let seq_len = lengths.iter().copied().max().unwrap_or(0);
        if lengths.is_empty() || lengths.contains(&0) {
            return Err(LsanError::contract("every sequence needs at least one item"));
        }
        Ok(SeqLayout {
            batch: lengths.len(),
            seq_len,
            lengths,
        })
    }

    pub fn single(len: usize) -> Result<Self> {
        Self::new(vec![len])
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq_len
    }

    /// Row-level validity flags.
    pub fn valid_rows(&self) -> Vec<bool> {
        self.lengths
            .iter()
            .flat_map(|&len| (0..self.seq_len).map(move |t| t < len))
            .collect()
    }

    /// Flat row index of the last real item of each sequence.
    pub fn last_rows(&self) -> Vec<usize> {
        self.lengths
            .iter()
            .enumerate()
            .map(|(b, &len)| b * self.seq_len + len - 1)
            .collect()
    }

    /// `[rows, seq_len]` flags; key column `j` is usable by block `b` iff `j < lengths[b]`.
    fn key_mask(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.rows() * self.seq_len);
        for &len in &self.lengths {
            for _ in 0..self.seq_len {
                m.extend((0..self.seq_len).map(|j| j < len));
            }
        }
        m
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

/// `H^conv[i,d] = Σⱼ K[j,d] · H[i + j − ⌈(L+1)/2⌉, d]`, zero outside the sequence.
pub fn conv_branch<T: Scalar>(
    g: &mut Graph<T>,
    h: Var,
    kernel: Var,
    layout: &SeqLayout,
) -> Result<Var> {
    check_rows(g, h, layout)?;
    g.depthwise_conv(h, kernel, layout.batch)
}

/// Self-attention over `H + P`, returning the head output and its `[rows, seq_len]`
/// attention weights. Padded key positions are masked; there is no causal mask.
pub fn attn_branch<T: Scalar>(
    g: &mut Graph<T>,
    h: Var,
    position: Var,
    head: &AttnVars,
    heads: usize,
    layout: &SeqLayout,
) -> Result<(Var, Var)> {
    check_rows(g, h, layout)?;
    let max_len = g.value(position).dims2().0;
    if layout.seq_len > max_len {
        return Err(LsanError::contract(format!(
            "sequence length {} exceeds position table of {max_len}",
            layout.seq_len
        )));
    }
    let dim = g.value(h).dims2().1;
    let pos_idx: Vec<usize> = (0..layout.batch).flat_map(|_| 0..layout.seq_len).collect();
    let pos = g.index_select(position, &pos_idx)?;
    let hp = g.add(h, pos)?;
    let q = g.matmul_nt(hp, head.w_q)?;
    let k = g.matmul_nt(hp, head.w_k)?;
    let v = g.matmul_nt(hp, head.w_v)?;
    let logits = g.batch_matmul_nt(q, k, layout.batch)?;
    let scale = T::lit(1.0 / (dim as f64 / heads as f64).sqrt());
    let logits = g.scale(logits, scale);
    let weights = g.softmax(logits, 1, Some(&layout.key_mask()))?;
    let out = g.batch_matmul(weights, v, layout.batch)?;
    Ok((out, weights))
}

#[derive(Clone, Debug)]
pub struct TwinOutput {
    /// `[rows, heads·D]`
    pub out: Var,
    /// Attention weights of each attention head, in head order.
    pub attention: Vec<Var>,
}

/// `[H₁^conv; …; H_H^conv; H₁^attn; …; H_H^attn]`.
pub fn twin_forward<T: Scalar>(
    g: &mut Graph<T>,
    h: Var,
    conv_heads: &[Var],
    attn_heads: &[AttnVars],
    position: Var,
    layout: &SeqLayout,
) -> Result<TwinOutput> {
    if conv_heads.len() != attn_heads.len() || conv_heads.is_empty() {
        return Err(LsanError::contract(format!(
            "twin attention needs equal non-zero head counts, got {} conv and {} attention",
            conv_heads.len(),
            attn_heads.len()
        )));
    }
    let heads = attn_heads.len();
    let mut outs = Vec::with_capacity(2 * heads);
    for &kernel in conv_heads {
        outs.push(conv_branch(g, h, kernel, layout)?);
    }
    let attention = attend_all(g, h, attn_heads, heads, position, layout, &mut outs)?;
    Ok(TwinOutput {
        out: concat_heads(g, h, &outs)?,
        attention,
    })
}

/// Multi-head self-attention alone, used where every head is an attention head.
pub fn attention_forward<T: Scalar>(
    g: &mut Graph<T>,
    h: Var,
    attn_heads: &[AttnVars],
    position: Var,
    layout: &SeqLayout,
) -> Result<TwinOutput> {
    if attn_heads.is_empty() {
        return Err(LsanError::contract("attention encoder with zero heads"));
    }
    let mut outs = Vec::with_capacity(attn_heads.len());
    let heads = attn_heads.len();
    let attention = attend_all(g, h, attn_heads, heads, position, layout, &mut outs)?;
    Ok(TwinOutput {
        out: concat_heads(g, h, &outs)?,
        attention,
    })
}

fn attend_all<T: Scalar>(
    g: &mut Graph<T>,
    h: Var,
    attn_heads: &[AttnVars],
    heads: usize,
    position: Var,
    layout: &SeqLayout,
    outs: &mut Vec<Var>,
) -> Result<Vec<Var>> {
    let mut attention = Vec::with_capacity(attn_heads.len());
    for head in attn_heads {
        let (out, weights) = attn_branch(g, h, position, head, heads, layout)?;
        outs.push(out);
        attention.push(weights);
    }
    Ok(attention)
}

fn concat_heads<T: Scalar>(g: &mut Graph<T>, h: Var, outs: &[Var]) -> Result<Var> {
    let dim = g.value(h).dims2().1;
    if let Some(bad) = outs.iter().find(|&&o| g.value(o).dims2().1 != dim) {
        return Err(LsanError::contract(format!(
            "head output width {} differs from {dim}",
            g.value(*bad).dims2().1
        )));
    }
    g.concat(outs)
}

fn check_rows<T: Scalar>(g: &Graph<T>, h: Var, layout: &SeqLayout) -> Result<()> {
    let rows = g.value(h).dims2().0;
    if rows != layout.rows() {
        return Err(LsanError::shape(
            "sequence layout",
            format!("{rows} rows for {} x {}", layout.batch, layout.seq_len),
        ));
    }
    Ok(())
}

/// Parameter counts of one encoder layer: twin `H(LD + 3D²)` against plain
/// multi-head attention with the same `2H` heads, `6HD²`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchParams {
    pub twin: usize,
    pub plain: usize,
}

pub fn count_branch_params(heads: usize, kernel: usize, dim: usize) -> BranchParams {
    BranchParams {
        twin: heads * (kernel * dim + 3 * dim * dim),
        plain: 6 * heads * dim * dim,
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tensor;

    fn rand_leaf(g: &mut Graph<f64>, rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Var {
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
        g.leaf(t, true)
    }

    /// Direct evaluation of the convolution sum with 1-based taps.
    fn conv_oracle(h: &[f64], k: &[f64], t: usize, l: usize, d: usize) -> Vec<f64> {
        let centre = (l as f64 + 1.0) / 2.0;
        let centre = centre.ceil() as isize;
        let mut out = vec![0.0; t * d];
        for i in 1..=t as isize {
            for c in 0..d {
                for j in 1..=l as isize {
                    let src = i + j - centre;
                    if src >= 1 && src <= t as isize {
                        out[(i as usize - 1) * d + c] +=
                            k[(j as usize - 1) * d + c] * h[(src as usize - 1) * d + c];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let (t, l, d) = (4, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::<f64>::new();
        let h = rand_leaf(&mut g, &mut rng, vec![t, d]);
        let k = rand_leaf(&mut g, &mut rng, vec![l, d]);
        let out = conv_branch(&mut g, h, k, &SeqLayout::single(t).unwrap()).unwrap();
        let expect = conv_oracle(g.value(h).data(), g.value(k).data(), t, l, d);
        for (a, b) in g.value(out).data().iter().zip(&expect) {
            assert_relative_eq!(*a, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn conv_identity_and_zero_kernels() {
        let (t, l, d) = (5, 5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::<f64>::new();
        let h = rand_leaf(&mut g, &mut rng, vec![t, d]);
        let delta = g.leaf(Tensor::from_fn(vec![l, d], |i| if i / d == l / 2 { 1.0 } else { 0.0 }), true);
        let zero = g.leaf(Tensor::zeros(vec![l, d]), true);
        let layout = SeqLayout::single(t).unwrap();
        let same = conv_branch(&mut g, h, delta, &layout).unwrap();
        assert_eq!(g.value(same).data(), g.value(h).data());
        let none = conv_branch(&mut g, h, zero, &layout).unwrap();
        assert!(g.value(none).data().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn conv_is_local(seed in any::<u64>(), t in 1usize..10, half in 0usize..3, row in 0usize..10) {
            let row = row % t;
            let (l, d) = (2 * half + 1, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::<f64>::new();
            let base = Tensor::from_fn(vec![t, d], |_| rng.gen_range(-1.0..1.0));
            let mut bumped = base.clone();
            for c in 0..d {
                bumped.data_mut()[row * d + c] += 1.5;
            }
            let k = rand_leaf(&mut g, &mut rng, vec![l, d]);
            let layout = SeqLayout::single(t).unwrap();
            let h0 = g.leaf(base, false);
            let h1 = g.leaf(bumped, false);
            let y0 = conv_branch(&mut g, h0, k, &layout).unwrap();
            let y1 = conv_branch(&mut g, h1, k, &layout).unwrap();
            for i in 0..t {
                if i.abs_diff(row) > half {
                    prop_assert_eq!(g.value(y0).row(i), g.value(y1).row(i));
                }
            }
        }
    }

    /// Explicit Q, K, V, row softmax and weighted sum for one unpadded sequence.
    fn attn_oracle(
        h: &[f64],
        p: &[f64],
        wq: &[f64],
        wk: &[f64],
        wv: &[f64],
        t: usize,
        d: usize,
        heads: usize,
    ) -> (Vec<f64>, Vec<f64>) {
        let ht: Vec<f64> = (0..t * d).map(|i| h[i] + p[i]).collect();
        let proj = |w: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; t * d];
            for i in 0..t {
                for o in 0..d {
                    out[i * d + o] = (0..d).map(|c| w[o * d + c] * ht[i * d + c]).sum();
                }
            }
            out
        };
        let (q, k, v) = (proj(wq), proj(wk), proj(wv));
        let scale = (d as f64 / heads as f64).sqrt();
        let mut a = vec![0.0; t * t];
        for i in 0..t {
            let logits: Vec<f64> = (0..t)
                .map(|j| (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() / scale)
                .collect();
            let z: f64 = logits.iter().map(|x| x.exp()).sum();
            for j in 0..t {
                a[i * t + j] = logits[j].exp() / z;
            }
        }
        let mut out = vec![0.0; t * d];
        for i in 0..t {
            for c in 0..d {
                out[i * d + c] = (0..t).map(|j| a[i * t + j] * v[j * d + c]).sum();
            }
        }
        (out, a)
    }

    #[test]
    fn attn_matches_naive_oracle() {
        let (t, d, heads) = (3, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::<f64>::new();
        let h = rand_leaf(&mut g, &mut rng, vec![t, d]);
        let p = rand_leaf(&mut g, &mut rng, vec![5, d]);
        let head = AttnVars {
            w_q: rand_leaf(&mut g, &mut rng, vec![d, d]),
            w_k: rand_leaf(&mut g, &mut rng, vec![d, d]),
            w_v: rand_leaf(&mut g, &mut rng, vec![d, d]),
        };
        let (out, a) =
            attn_branch(&mut g, h, p, &head, heads, &SeqLayout::single(t).unwrap()).unwrap();
        let (eo, ea) = attn_oracle(
            g.value(h).data(),
            &g.value(p).data()[..t * d],
            g.value(head.w_q).data(),
            g.value(head.w_k).data(),
            g.value(head.w_v).data(),
            t,
            d,
            heads,
        );
        for (x, y) in g.value(out).data().iter().zip(&eo) {
            assert_relative_eq!(*x, *y, epsilon = 1e-12);
        }
        for (x, y) in g.value(a).data().iter().zip(&ea) {
            assert_relative_eq!(*x, *y, epsilon = 1e-12);
        }
    }

    #[test]
    fn attn_single_item_and_uniform_cases() {
        let d = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = Graph::<f64>::new();
        let head = AttnVars {
            w_q: rand_leaf(&mut g, &mut rng, vec![d, d]),
            w_k: rand_leaf(&mut g, &mut rng, vec![d, d]),
            w_v: rand_leaf(&mut g, &mut rng, vec![d, d]),
        };
        let p = rand_leaf(&mut g, &mut rng, vec![4, d]);
        let h = rand_leaf(&mut g, &mut rng, vec![1, d]);
        let (out, a) = attn_branch(&mut g, h, p, &head, 1, &SeqLayout::single(1).unwrap()).unwrap();
        assert_eq!(g.value(a).data(), &[1.0]);
        let hp: Vec<f64> = (0..d).map(|c| g.value(h).data()[c] + g.value(p).data()[c]).collect();
        for o in 0..d {
            let v: f64 = (0..d).map(|c| g.value(head.w_v).data()[o * d + c] * hp[c]).sum();
            assert_relative_eq!(g.value(out).data()[o], v, epsilon = 1e-12);
        }

        // Identical rows give constant logits; in the padded second block of
        // the batch, the fourth key column is masked for the first sequence.
        let zero_pos = g.leaf(Tensor::zeros(vec![4, d]), false);
        let same3 = g.leaf(Tensor::from_fn(vec![3, d], |i| (i % d) as f64 * 0.3), false);
        let (_, a) = attn_branch(&mut g, same3, zero_pos, &head, 1, &SeqLayout::single(3).unwrap()).unwrap();
        for &w in g.value(a).data() {
            assert_relative_eq!(w, 1.0 / 3.0, epsilon = 1e-12);
        }
        let stacked = g.leaf(Tensor::from_fn(vec![8, d], |i| (i % d) as f64 * 0.3), false);
        let layout = SeqLayout::new(vec![3, 4]).unwrap();
        let (_, a) = attn_branch(&mut g, stacked, zero_pos, &head, 1, &layout).unwrap();
        let w = g.value(a);
        for r in 0..4 {
            assert_relative_eq!(w.at(r, 0), 1.0 / 3.0, epsilon = 1e-12);
            assert_eq!(w.at(r, 3), 0.0);
        }
        for r in 4..8 {
            assert_relative_eq!(w.at(r, 3), 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn attn_rejects_sequences_longer_than_position_table() {
        let mut g = Graph::<f64>::new();
        let h = g.leaf(Tensor::zeros(vec![3, 2]), false);
        let p = g.leaf(Tensor::zeros(vec![2, 2]), false);
        let w = g.leaf(Tensor::zeros(vec![2, 2]), false);
        let head = AttnVars { w_q: w, w_k: w, w_v: w };
        let r = attn_branch(&mut g, h, p, &head, 1, &SeqLayout::single(3).unwrap());
        assert!(matches!(r, Err(LsanError::Contract(_))));
    }

    fn twin_fixture(g: &mut Graph<f64>, rng: &mut ChaCha8Rng, heads: usize, d: usize, l: usize) -> (Vec<Var>, Vec<AttnVars>, Var) {
        let conv = (0..heads).map(|_| rand_leaf(g, rng, vec![l, d])).collect();
        let attn = (0..heads)
            .map(|_| AttnVars {
                w_q: rand_leaf(g, rng, vec![d, d]),
                w_k: rand_leaf(g, rng, vec![d, d]),
                w_v: rand_leaf(g, rng, vec![d, d]),
            })
            .collect();
        let p = rand_leaf(g, rng, vec![8, d]);
        (conv, attn, p)
    }

    #[test]
    fn twin_output_shape_and_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::<f64>::new();
        let (d, t) = (4, 2);
        let (conv, attn, p) = twin_fixture(&mut g, &mut rng, 1, d, 3);
        let h = rand_leaf(&mut g, &mut rng, vec![t, d]);
        let layout = SeqLayout::single(t).unwrap();
        let tw = twin_forward(&mut g, h, &conv, &attn, p, &layout).unwrap();
        assert_eq!(g.shape(tw.out), &[2, 8]);

        let (conv, attn, p) = twin_fixture(&mut g, &mut rng, 2, d, 3);
        let h = rand_leaf(&mut g, &mut rng, vec![5, d]);
        let layout = SeqLayout::single(5).unwrap();
        let tw = twin_forward(&mut g, h, &conv, &attn, p, &layout).unwrap();
        let mut standalone = Vec::new();
        for &k in &conv {
            standalone.push(conv_branch(&mut g, h, k, &layout).unwrap());
        }
        for head in &attn {
            standalone.push(attn_branch(&mut g, h, p, head, 2, &layout).unwrap().0);
        }
        for (slot, &s) in standalone.iter().enumerate() {
            let slice = g.slice_cols(tw.out, slot * d, (slot + 1) * d).unwrap();
            assert_eq!(g.value(slice).data(), g.value(s).data());
        }
    }

    #[test]
    fn twin_with_zero_parameters_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut g = Graph::<f64>::new();
        let d = 3;
        let z = |g: &mut Graph<f64>, shape| g.leaf(Tensor::zeros(shape), true);
        let conv = vec![z(&mut g, vec![3, d]), z(&mut g, vec![3, d])];
        let attn = (0..2)
            .map(|_| AttnVars { w_q: z(&mut g, vec![d, d]), w_k: z(&mut g, vec![d, d]), w_v: z(&mut g, vec![d, d]) })
            .collect::<Vec<_>>();
        let p = z(&mut g, vec![4, d]);
        let h = rand_leaf(&mut g, &mut rng, vec![4, d]);
        let tw = twin_forward(&mut g, h, &conv, &attn, p, &SeqLayout::single(4).unwrap()).unwrap();
        assert!(g.value(tw.out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn twin_requires_matching_head_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut g = Graph::<f64>::new();
        let (conv, attn, p) = twin_fixture(&mut g, &mut rng, 2, 2, 3);
        let h = rand_leaf(&mut g, &mut rng, vec![2, 2]);
        let r = twin_forward(&mut g, h, &conv[..1], &attn, p, &SeqLayout::single(2).unwrap());
        assert!(matches!(r, Err(LsanError::Contract(_))));
    }

    #[test]
    fn branch_parameter_formulas() {
        assert_eq!(count_branch_params(1, 5, 8), BranchParams { twin: 232, plain: 384 });
        let d = 7;
        let c = count_branch_params(3, 3 * d, d);
        assert_eq!(c.twin, c.plain);
        assert_eq!(count_branch_params(2, 5, 128), BranchParams { twin: 99_584, plain: 196_608 });
    }
}
