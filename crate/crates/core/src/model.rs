//! The full recommender: compositional embedding, stacked twin-attention
//! layers each followed by a point-wise GeLU feed-forward network, and a
//! softmax output layer over every item.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embedding::{self, EmbeddingVars, QrCodebook, PAD_ITEM, UNK_CONTEXT};
use crate::error::{LsanError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{finite_diff_check, GradCheckReport, Graph, Scalar, Tensor, Var};
use crate::twin::{self, AttnVars, SeqLayout};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VariantKind {
    /// Compositional embedding, dynamic fusion, twin attention.
    Full,
    /// One full-size item table.
    FullEmb,
    /// Base embeddings summed without context-conditioned weights.
    WoDynamic,
    /// Convolution heads replaced by further attention heads.
    PlainAttn,
}

impl VariantKind {
    pub const ALL: [VariantKind; 4] = [
        VariantKind::Full,
        VariantKind::FullEmb,
        VariantKind::WoDynamic,
        VariantKind::PlainAttn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Full => "full",
            VariantKind::FullEmb => "full_emb",
            VariantKind::WoDynamic => "wo_dynamic",
            VariantKind::PlainAttn => "plain_attn",
        }
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantKind {
    type Err = LsanError;

    fn from_str(s: &str) -> Result<Self> {
        VariantKind::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| LsanError::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_items: usize,
    /// Rows of the context table, including the unknown-context row.
    pub context_rows: usize,
    pub dim: usize,
    pub kernel: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_len: usize,
    /// Base table sizes of the compositional variants.
    pub sizes: Vec<usize>,
    pub variant: VariantKind,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_items", self.num_items),
            ("context_rows", self.context_rows),
            ("dim", self.dim),
            ("kernel", self.kernel),
            ("heads", self.heads),
            ("layers", self.layers),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(LsanError::Config(format!("{name} must be positive")));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(LsanError::Config(format!("kernel size {} must be odd", self.kernel)));
        }
        QrCodebook::new(self.effective_sizes(), self.num_items)?;
        Ok(())
    }

    /// Base table sizes actually built for this variant.
    pub fn effective_sizes(&self) -> Vec<usize> {
        match self.variant {
            VariantKind::FullEmb => vec![self.num_items],
            _ => self.sizes.clone(),
        }
    }

    fn attention_heads(&self) -> usize {
        match self.variant {
            VariantKind::PlainAttn => 2 * self.heads,
            _ => self.heads,
        }
    }

    fn conv_heads(&self) -> usize {
        match self.variant {
            VariantKind::PlainAttn => 0,
            _ => self.heads,
        }
    }

    fn dynamic_fusion(&self) -> bool {
        self.variant != VariantKind::WoDynamic && self.effective_sizes().len() > 1
    }

    /// Space-separated `key=value` pairs, parsed back by [`ModelConfig::from_line`].
    pub fn to_line(&self) -> String {
        let sizes: Vec<String> = self.sizes.iter().map(usize::to_string).collect();
        format!(
            "num_items={} context_rows={} dim={} kernel={} heads={} layers={} max_len={} sizes={} variant={}",
            self.num_items,
            self.context_rows,
            self.dim,
            self.kernel,
            self.heads,
            self.layers,
            self.max_len,
            sizes.join(","),
            self.variant
        )
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let mut cfg = ModelConfig {
            num_items: 0,
            context_rows: 0,
            dim: 0,
            kernel: 0,
            heads: 0,
            layers: 0,
            max_len: 0,
            sizes: Vec::new(),
            variant: VariantKind::Full,
        };
        let bad = |kv: &str| LsanError::Config(format!("bad model config entry {kv:?}"));
        for kv in line.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(kv))?;
            let num = || v.parse::<usize>().map_err(|_| bad(kv));
            match k {
                "num_items" => cfg.num_items = num()?,
                "context_rows" => cfg.context_rows = num()?,
                "dim" => cfg.dim = num()?,
                "kernel" => cfg.kernel = num()?,
                "heads" => cfg.heads = num()?,
                "layers" => cfg.layers = num()?,
                "max_len" => cfg.max_len = num()?,
                "sizes" => {
                    cfg.sizes = v
                        .split(',')
                        .map(|s| s.parse().map_err(|_| bad(kv)))
                        .collect::<Result<_>>()?
                }
                "variant" => cfg.variant = v.parse()?,
                _ => return Err(bad(kv)),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
struct AttnIds {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
}

#[derive(Clone, Debug)]
struct LayerIds {
    position: ParamId,
    conv: Vec<ParamId>,
    attn: Vec<AttnIds>,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    bases: Vec<ParamId>,
    context: ParamId,
    w_a: Option<ParamId>,
    mlp_w: ParamId,
    mlp_b: ParamId,
    layers: Vec<LayerIds>,
    out_w: ParamId,
    out_b: ParamId,
}

/// One input sequence: global item indices and aligned context indices.
#[derive(Clone, Copy, Debug)]
pub struct SeqInput<'a> {
    pub items: &'a [usize],
    pub contexts: &'a [usize],
}

impl<'a> SeqInput<'a> {
    pub fn new(items: &'a [usize], contexts: &'a [usize]) -> Self {
        SeqInput { items, contexts }
    }
}

/// Graph outputs of a batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `[batch, |V|]`
    pub logits: Var,
    /// Attention weights per layer, per attention head, each `[batch·T, T]`.
    pub attention: Vec<Vec<Var>>,
    pub layout: SeqLayout,
}

/// Exact value counts per parameter group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct ParamBreakdown {
    /// Base embedding tables.
    pub embedding: usize,
    pub context: usize,
    /// Fusion weight and context-injection MLP.
    pub fusion: usize,
    pub position: usize,
    /// Convolution and attention heads.
    pub encoder: usize,
    pub ffn: usize,
    pub output: usize,
    pub total: usize,
    /// Stored embedding rows against a full `|V|`-row table.
    pub full_table: usize,
}

impl ParamBreakdown {
    pub fn embedding_ratio(&self) -> f64 {
        self.embedding as f64 / self.full_table as f64
    }
}

#[derive(Clone, Debug)]
pub struct LsanModel<T> {
    config: ModelConfig,
    codebook: QrCodebook,
    params: ParamStore<T>,
    layout: Layout,
}

impl<T: Scalar> LsanModel<T> {
    /// Builds and initialises a model; weights are uniform in `±1/√D`, biases zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let codebook = QrCodebook::new(config.effective_sizes(), config.num_items)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let bound = 1.0 / (d as f64).sqrt();
        let mut p = ParamStore::new();

        let bases = codebook
            .sizes()
            .iter()
            .enumerate()
            .map(|(n, &m)| p.add_uniform(format!("embedding.base{n}"), vec![m, d], bound, &mut rng))
            .collect();
        let context = p.add_uniform("embedding.context", vec![config.context_rows, d], bound, &mut rng);
        let w_a = config
            .dynamic_fusion()
            .then(|| p.add_uniform("embedding.w_a", vec![d, d], bound, &mut rng));
        let mlp_w = p.add_uniform("embedding.mlp.weight", vec![2 * d, d], bound, &mut rng);
        let mlp_b = p.add_zeros("embedding.mlp.bias", vec![d]);

        let width = (config.conv_heads() + config.attention_heads()) * d;
        let layers = (0..config.layers)
            .map(|l| {
                let position =
                    p.add_uniform(format!("layer{l}.position"), vec![config.max_len, d], bound, &mut rng);
                let conv = (0..config.conv_heads())
                    .map(|h| {
                        p.add_uniform(format!("layer{l}.conv{h}.kernel"), vec![config.kernel, d], bound, &mut rng)
                    })
                    .collect();
                let attn = (0..config.attention_heads())
                    .map(|h| AttnIds {
                        w_q: p.add_uniform(format!("layer{l}.attn{h}.w_q"), vec![d, d], bound, &mut rng),
                        w_k: p.add_uniform(format!("layer{l}.attn{h}.w_k"), vec![d, d], bound, &mut rng),
                        w_v: p.add_uniform(format!("layer{l}.attn{h}.w_v"), vec![d, d], bound, &mut rng),
                    })
                    .collect();
                LayerIds {
                    position,
                    conv,
                    attn,
                    ffn_w1: p.add_uniform(format!("layer{l}.ffn.w1"), vec![width, width], bound, &mut rng),
                    ffn_b1: p.add_zeros(format!("layer{l}.ffn.b1"), vec![width]),
                    ffn_w2: p.add_uniform(format!("layer{l}.ffn.w2"), vec![width, d], bound, &mut rng),
                    ffn_b2: p.add_zeros(format!("layer{l}.ffn.b2"), vec![d]),
                }
            })
            .collect();
        let out_w = p.add_uniform("output.weight", vec![config.num_items, d], bound, &mut rng);
        let out_b = p.add_zeros("output.bias", vec![config.num_items]);

        Ok(LsanModel {
            config,
            codebook,
            params: p,
            layout: Layout {
                bases,
                context,
                w_a,
                mlp_w,
                mlp_b,
                layers,
                out_w,
                out_b,
            },
        })
    }

    /// Builds `config` as the requested ablation variant.
    pub fn build_variant(kind: VariantKind, config: &ModelConfig, seed: u64) -> Result<Self> {
        let config = ModelConfig {
            variant: kind,
            ..config.clone()
        };
        Self::new(config, seed)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn codebook(&self) -> &QrCodebook {
        &self.codebook
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        self.params.tensors_mut()
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> LsanModel<U> {
        LsanModel {
            config: self.config.clone(),
            codebook: self.codebook.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Replaces every parameter tensor, enforcing identical names and shapes.
    pub fn load_params(&mut self, named: Vec<(String, Tensor<T>)>) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(LsanError::contract(format!(
                "{} tensors supplied for {} parameters",
                named.len(),
                self.params.len()
            )));
        }
        for (id, (name, tensor)) in self.params.ids().collect::<Vec<_>>().into_iter().zip(named) {
            let expected = self.params.get(id);
            if self.params.name(id) != name || expected.shape() != tensor.shape() {
                return Err(LsanError::contract(format!(
                    "tensor {name} {:?} does not match parameter {} {:?}",
                    tensor.shape(),
                    self.params.name(id),
                    expected.shape()
                )));
            }
            *self.params.get_mut(id) = tensor;
        }
        Ok(())
    }

    fn var(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        g.param(id.index(), self.params.get(id))
    }

    /// Registers every parameter of Ψ on `g`, keyed by parameter index.
    pub fn bind_all(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.ids().map(|id| self.var(g, id)).collect()
    }

    /// Batched forward pass up to the output logits. Sequences longer than
    /// `max_len` keep their most recent items.
    pub fn forward_graph(&self, g: &mut Graph<T>, batch: &[SeqInput<'_>]) -> Result<ForwardVars> {
        if batch.is_empty() {
            return Err(LsanError::contract("empty batch"));
        }
        let mut lengths = Vec::with_capacity(batch.len());
        let mut trimmed = Vec::with_capacity(batch.len());
        for seq in batch {
            if seq.items.len() != seq.contexts.len() {
                return Err(LsanError::contract(format!(
                    "{} items but {} contexts",
                    seq.items.len(),
                    seq.contexts.len()
                )));
            }
            if seq.items.is_empty() {
                return Err(LsanError::contract("empty sequence"));
            }
            let start = seq.items.len().saturating_sub(self.config.max_len);
            let (items, contexts) = (&seq.items[start..], &seq.contexts[start..]);
            if let Some(&bad) = items.iter().find(|&&i| i >= self.config.num_items) {
                return Err(LsanError::Index { index: bad, limit: self.config.num_items });
            }
            if let Some(&bad) = contexts.iter().find(|&&c| c >= self.config.context_rows) {
                return Err(LsanError::Index { index: bad, limit: self.config.context_rows });
            }
            lengths.push(items.len());
            trimmed.push((items, contexts));
        }
        let layout = SeqLayout::new(lengths)?;
        let mut flat_items = Vec::with_capacity(layout.rows());
        let mut flat_ctx = Vec::with_capacity(layout.rows());
        for (items, contexts) in &trimmed {
            flat_items.extend_from_slice(items);
            flat_ctx.extend_from_slice(contexts);
            for _ in items.len()..layout.seq_len {
                flat_items.push(PAD_ITEM);
                flat_ctx.push(UNK_CONTEXT);
            }
        }

        let emb = EmbeddingVars {
            tables: self.layout.bases.iter().map(|&id| self.var(g, id)).collect(),
            context_table: self.var(g, self.layout.context),
            w_a: self.layout.w_a.map(|id| self.var(g, id)),
            mlp_weight: self.var(g, self.layout.mlp_w),
            mlp_bias: self.var(g, self.layout.mlp_b),
        };
        let mut x = embedding::embed_sequence(g, &emb, &self.codebook, &flat_items, &flat_ctx)?;
        let valid = layout.valid_rows();
        let mut attention = Vec::with_capacity(self.layout.layers.len());
        for (l, ids) in self.layout.layers.iter().enumerate() {
            if l > 0 {
                x = g.mask_rows(x, &valid)?;
            }
            let position = self.var(g, ids.position);
            let attn: Vec<AttnVars> = ids
                .attn
                .iter()
                .map(|a| AttnVars {
                    w_q: self.var(g, a.w_q),
                    w_k: self.var(g, a.w_k),
                    w_v: self.var(g, a.w_v),
                })
                .collect();
            let encoded = if ids.conv.is_empty() {
                twin::attention_forward(g, x, &attn, position, &layout)?
            } else {
                let conv: Vec<Var> = ids.conv.iter().map(|&id| self.var(g, id)).collect();
                twin::twin_forward(g, x, &conv, &attn, position, &layout)?
            };
            attention.push(encoded.attention);
            let (w1, b1) = (self.var(g, ids.ffn_w1), self.var(g, ids.ffn_b1));
            let (w2, b2) = (self.var(g, ids.ffn_w2), self.var(g, ids.ffn_b2));
            let hidden = g.matmul(encoded.out, w1)?;
            let hidden = g.add_row_bias(hidden, b1)?;
            let hidden = g.gelu(hidden)?;
            let out = g.matmul(hidden, w2)?;
            x = g.add_row_bias(out, b2)?;
        }
        let last = g.index_select(x, &layout.last_rows())?;
        let (w_o, b_o) = (self.var(g, self.layout.out_w), self.var(g, self.layout.out_b));
        let logits = g.matmul_nt(last, w_o)?;
        let logits = g.add_row_bias(logits, b_o)?;
        Ok(ForwardVars {
            logits,
            attention,
            layout,
        })
    }

    /// Next-item logits for each sequence, without gradient tracking.
    pub fn logits(&self, batch: &[SeqInput<'_>]) -> Result<Vec<Vec<T>>> {
        let mut g = Graph::inference();
        let fw = self.forward_graph(&mut g, batch)?;
        Ok(g.value(fw.logits)
            .data()
            .chunks(self.config.num_items)
            .map(<[T]>::to_vec)
            .collect())
    }

    /// Probability of every item being next.
    pub fn forward_scores(&self, seq: SeqInput<'_>) -> Result<Vec<T>> {
        let mut g = Graph::inference();
        let fw = self.forward_graph(&mut g, &[seq])?;
        let probs = g.softmax(fw.logits, 1, None)?;
        Ok(g.value(probs).data().to_vec())
    }

    /// Mean cross-entropy of `targets` plus `lambda` times the squared L2 norm of Ψ.
    pub fn training_loss(
        &self,
        g: &mut Graph<T>,
        batch: &[SeqInput<'_>],
        targets: &[usize],
        lambda: f64,
    ) -> Result<Var> {
        if batch.len() != targets.len() {
            return Err(LsanError::contract(format!(
                "{} sequences but {} targets",
                batch.len(),
                targets.len()
            )));
        }
        let fw = self.forward_graph(g, batch)?;
        let ce = g.cross_entropy(fw.logits, targets)?;
        if lambda == 0.0 {
            return Ok(ce);
        }
        let vars = self.bind_all(g);
        let mut penalty = None;
        for v in vars {
            let sq = g.sum_squares(v);
            penalty = Some(match penalty {
                None => sq,
                Some(acc) => g.add(acc, sq)?,
            });
        }
        let penalty = g.scale(penalty.expect("model has parameters"), T::lit(lambda));
        g.add(ce, penalty)
    }

    /// The `k` most probable items, best first; ties go to the lower index.
    pub fn predict_topk(&self, seq: SeqInput<'_>, k: usize) -> Result<Vec<usize>> {
        let logits = self.logits(&[seq])?;
        top_k(&logits[0], k)
    }

    pub fn count_parameters(&self) -> ParamBreakdown {
        let mut b = ParamBreakdown {
            full_table: self.config.num_items * self.config.dim,
            ..Default::default()
        };
        for (name, t) in self.params.names().iter().zip(self.params.tensors()) {
            let n = t.len();
            let slot = if name.starts_with("embedding.base") {
                &mut b.embedding
            } else if name == "embedding.context" {
                &mut b.context
            } else if name.starts_with("embedding.") {
                &mut b.fusion
            } else if name.ends_with(".position") {
                &mut b.position
            } else if name.contains(".ffn.") {
                &mut b.ffn
            } else if name.starts_with("output.") {
                &mut b.output
            } else {
                &mut b.encoder
            };
            *slot += n;
            b.total += n;
        }
        b
    }
}

/// One training example for [`gradient_check`]: items, contexts and target.
pub type CheckSample = (Vec<usize>, Vec<usize>, usize);

/// Central-difference check of the training loss in 64-bit precision, over
/// every tensor of the model.
pub fn gradient_check(
    model: &mut LsanModel<f64>,
    batch: &[CheckSample],
    lambda: f64,
    eps: f64,
    samples_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let names = model.params().names().to_vec();
    let targets: Vec<usize> = batch.iter().map(|s| s.2).collect();
    finite_diff_check(
        model,
        LsanModel::<f64>::tensors_mut,
        &names,
        |m, g| {
            let inputs: Vec<SeqInput<'_>> = batch.iter().map(|s| SeqInput::new(&s.0, &s.1)).collect();
            m.training_loss(g, &inputs, &targets, lambda)
        },
        eps,
        samples_per_tensor,
        seed,
    )
}

/// Indices of the `k` largest scores, descending, ties broken by lower index.
pub fn top_k<T: Scalar>(scores: &[T], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(LsanError::contract(format!(
            "k = {k} outside 1..={}",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let cmp = |&a: &usize, &b: &usize| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    };
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    use super::*;

    pub(crate) fn tiny_config(variant: VariantKind) -> ModelConfig {
        ModelConfig {
            num_items: 20,
            context_rows: 6,
            dim: 8,
            kernel: 3,
            heads: 2,
            layers: 1,
            max_len: 6,
            sizes: vec![2, 10],
            variant,
        }
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in VariantKind::ALL {
            assert_eq!(v.name().parse::<VariantKind>().unwrap(), v);
        }
        assert!(matches!("lsan++".parse::<VariantKind>(), Err(LsanError::Config(_))));
    }

    #[test]
    fn config_line_roundtrip() {
        let cfg = tiny_config(VariantKind::PlainAttn);
        assert_eq!(ModelConfig::from_line(&cfg.to_line()).unwrap(), cfg);
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config(VariantKind::Full);
        cfg.kernel = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config(VariantKind::Full);
        cfg.sizes = vec![2, 9];
        assert!(cfg.validate().is_err());
        cfg.variant = VariantKind::FullEmb;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn scores_are_a_distribution() {
        let m = LsanModel::<f64>::new(tiny_config(VariantKind::Full), 1).unwrap();
        let y = m.forward_scores(SeqInput::new(&[3, 7, 1], &[1, 2, 0])).unwrap();
        assert_eq!(y.len(), 20);
        assert!(y.iter().all(|&p| p >= 0.0));
        assert_relative_eq!(y.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_output_layer_gives_uniform_scores() {
        let mut cfg = tiny_config(VariantKind::Full);
        cfg.num_items = 4;
        cfg.sizes = vec![2, 2];
        let mut m = LsanModel::<f32>::new(cfg, 2).unwrap();
        let id = m.params().find("output.weight").unwrap();
        m.params_mut().get_mut(id).data_mut().fill(0.0);
        let y = m.forward_scores(SeqInput::new(&[0, 3], &[1, 1])).unwrap();
        assert_eq!(y, vec![0.25; 4]);
    }

    #[test]
    fn empty_or_misaligned_sequences_are_rejected() {
        let m = LsanModel::<f32>::new(tiny_config(VariantKind::Full), 1).unwrap();
        assert!(matches!(m.forward_scores(SeqInput::new(&[], &[])), Err(LsanError::Contract(_))));
        assert!(matches!(m.forward_scores(SeqInput::new(&[1], &[])), Err(LsanError::Contract(_))));
        assert!(matches!(
            m.forward_scores(SeqInput::new(&[20], &[0])),
            Err(LsanError::Index { .. })
        ));
    }

    /// Recomputes the forward pass for one unpadded sequence with plain loops.
    fn naive_logits(m: &LsanModel<f64>, items: &[usize], ctx: &[usize]) -> Vec<f64> {
        let cfg = m.config();
        let d = cfg.dim;
        let p = |name: &str| m.params().get(m.params().find(name).unwrap()).data().to_vec();
        let silu = |x: f64| x / (1.0 + (-x).exp());
        let gelu = |x: f64| 0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()));
        let t = items.len();
        let (b0, b1, cx, wa) = (p("embedding.base0"), p("embedding.base1"), p("embedding.context"), p("embedding.w_a"));
        let (mw, mb) = (p("embedding.mlp.weight"), p("embedding.mlp.bias"));
        let mut h = vec![0.0; t * d];
        for (i, (&v, &c)) in items.iter().zip(ctx).enumerate() {
            let (q, r) = (v % cfg.sizes[0], v / cfg.sizes[0]);
            let e = [&b0[q * d..(q + 1) * d], &b1[r * d..(r + 1) * d]];
            let rc = &cx[c * d..(c + 1) * d];
            let s: Vec<f64> = e
                .iter()
                .map(|e| (0..d).map(|o| rc[o] * silu((0..d).map(|j| wa[o * d + j] * e[j]).sum())).sum())
                .collect();
            let z: f64 = s.iter().map(|x| x.exp()).sum();
            let fused: Vec<f64> = (0..d).map(|j| (s[0].exp() * e[0][j] + s[1].exp() * e[1][j]) / z).collect();
            let joined: Vec<f64> = fused.iter().chain(rc).copied().collect();
            for o in 0..d {
                h[i * d + o] = silu((0..2 * d).map(|j| joined[j] * mw[j * d + o]).sum::<f64>() + mb[o]);
            }
        }
        let heads = cfg.heads;
        let l = cfg.kernel as isize;
        let mut twin = vec![vec![0.0; 2 * heads * d]; t];
        for hd in 0..heads {
            let k = p(&format!("layer0.conv{hd}.kernel"));
            for i in 0..t as isize {
                for c in 0..d {
                    let mut acc = 0.0;
                    for j in 0..l {
                        let src = i + j - l / 2;
                        if (0..t as isize).contains(&src) {
                            acc += k[j as usize * d + c] * h[src as usize * d + c];
                        }
                    }
                    twin[i as usize][hd * d + c] = acc;
                }
            }
        }
        let pos = p("layer0.position");
        for hd in 0..heads {
            let (wq, wk, wv) = (
                p(&format!("layer0.attn{hd}.w_q")),
                p(&format!("layer0.attn{hd}.w_k")),
                p(&format!("layer0.attn{hd}.w_v")),
            );
            let hp: Vec<f64> = (0..t * d).map(|i| h[i] + pos[i]).collect();
            let proj = |w: &[f64], i: usize, o: usize| (0..d).map(|c| w[o * d + c] * hp[i * d + c]).sum::<f64>();
            for i in 0..t {
                let logits: Vec<f64> = (0..t)
                    .map(|j| {
                        (0..d).map(|o| proj(&wq, i, o) * proj(&wk, j, o)).sum::<f64>()
                            / ((d / heads) as f64).sqrt()
                    })
                    .collect();
                let z: f64 = logits.iter().map(|x| x.exp()).sum();
                for o in 0..d {
                    twin[i][(heads + hd) * d + o] =
                        (0..t).map(|j| logits[j].exp() / z * proj(&wv, j, o)).sum();
                }
            }
        }
        let width = 2 * heads * d;
        let (w1, bb1, w2, bb2) = (p("layer0.ffn.w1"), p("layer0.ffn.b1"), p("layer0.ffn.w2"), p("layer0.ffn.b2"));
        let x = &twin[t - 1];
        let hidden: Vec<f64> =
            (0..width).map(|o| gelu((0..width).map(|j| x[j] * w1[j * width + o]).sum::<f64>() + bb1[o])).collect();
        let z: Vec<f64> = (0..d).map(|o| (0..width).map(|j| hidden[j] * w2[j * d + o]).sum::<f64>() + bb2[o]).collect();
        let (wo, bo) = (p("output.weight"), p("output.bias"));
        (0..cfg.num_items).map(|v| (0..d).map(|j| wo[v * d + j] * z[j]).sum::<f64>() + bo[v]).collect()
    }

    #[test]
    fn forward_matches_independent_recomputation() {
        let m = LsanModel::<f64>::new(tiny_config(VariantKind::Full), 9).unwrap();
        let items = [4, 11, 19, 0, 6];
        let ctx = [1, 5, 2, 0, 3];
        let got = m.logits(&[SeqInput::new(&items, &ctx)]).unwrap().remove(0);
        let expect = naive_logits(&m, &items, &ctx);
        for (a, b) in got.iter().zip(&expect) {
            assert_relative_eq!(*a, *b, epsilon = 1e-10);
        }
        let argmax = |v: &[f64]| (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        assert_eq!(argmax(&got), argmax(&expect));
    }

    #[test]
    fn batching_does_not_change_results() {
        let m = LsanModel::<f32>::new(tiny_config(VariantKind::Full), 3).unwrap();
        let a = (vec![1, 2, 3, 4, 5], vec![1, 2, 3, 4, 5]);
        let b = (vec![9, 8], vec![0, 1]);
        let together = m
            .logits(&[SeqInput::new(&a.0, &a.1), SeqInput::new(&b.0, &b.1)])
            .unwrap();
        assert_eq!(together[0], m.logits(&[SeqInput::new(&a.0, &a.1)]).unwrap()[0]);
        assert_eq!(together[1], m.logits(&[SeqInput::new(&b.0, &b.1)]).unwrap()[0]);
    }

    #[test]
    fn long_sequences_keep_most_recent_items() {
        let m = LsanModel::<f32>::new(tiny_config(VariantKind::Full), 4).unwrap();
        let items: Vec<usize> = (0..9).collect();
        let ctx = vec![1; 9];
        let full = m.logits(&[SeqInput::new(&items, &ctx)]).unwrap();
        let tail = m.logits(&[SeqInput::new(&items[3..], &ctx[3..])]).unwrap();
        assert_eq!(full, tail);
    }

    #[test]
    fn loss_closed_forms() {
        let mut cfg = tiny_config(VariantKind::Full);
        cfg.num_items = 4;
        cfg.sizes = vec![2, 2];
        let mut m = LsanModel::<f64>::new(cfg, 5).unwrap();
        let id = m.params().find("output.weight").unwrap();
        m.params_mut().get_mut(id).data_mut().fill(0.0);
        let seq = SeqInput::new(&[1, 2], &[1, 2]);
        let mut g = Graph::new();
        let loss = m.training_loss(&mut g, &[seq], &[3], 0.0).unwrap();
        assert_relative_eq!(g.value(loss).data()[0], 4f64.ln(), epsilon = 1e-12);
        assert!((g.value(loss).data()[0] - 1.38629).abs() < 1e-5);

        // Near one-hot prediction at the target.
        let bias = m.params().find("output.bias").unwrap();
        m.params_mut().get_mut(bias).data_mut().copy_from_slice(&[0.0, 0.0, 0.0, 800.0]);
        let mut g = Graph::new();
        let loss = m.training_loss(&mut g, &[seq], &[3], 0.0).unwrap();
        assert_eq!(g.value(loss).data()[0], 0.0);
    }

    #[test]
    fn penalty_is_lambda_times_squared_norm() {
        let m = LsanModel::<f64>::new(tiny_config(VariantKind::Full), 6).unwrap();
        let seq = SeqInput::new(&[1, 2], &[1, 2]);
        let mut g = Graph::new();
        let ce = m.training_loss(&mut g, &[seq], &[3], 0.0).unwrap();
        let ce = g.value(ce).data()[0];
        let mut g = Graph::new();
        let total = m.training_loss(&mut g, &[seq], &[3], 1.0).unwrap();
        let norm: f64 = m.params().tensors().iter().flat_map(|t| t.data()).map(|v| v * v).sum();
        assert_relative_eq!(g.value(total).data()[0], ce + norm, epsilon = 1e-9);
    }

    #[test]
    fn every_parameter_receives_a_gradient() {
        for kind in VariantKind::ALL {
            let mut cfg = tiny_config(kind);
            cfg.layers = 2;
            let m = LsanModel::<f64>::new(cfg, 7).unwrap();
            let mut g = Graph::new();
            let loss = m
                .training_loss(&mut g, &[SeqInput::new(&[1, 2, 3], &[1, 2, 3])], &[4], 1e-5)
                .unwrap();
            g.backward(loss).unwrap();
            for id in m.params().ids() {
                let grad = g.param_grad(id.index());
                assert!(grad.is_some(), "{kind}: {} has no gradient", m.params().name(id));
                assert_eq!(grad.unwrap().len(), m.params().get(id).len());
            }
        }
    }

    #[test]
    fn topk_ordering_and_ties() {
        let scores = [0.5f32, 2.0, 2.0, -1.0, 0.5];
        assert_eq!(top_k(&scores, 5).unwrap(), vec![1, 2, 0, 4, 3]);
        assert_eq!(top_k(&scores, 2).unwrap(), vec![1, 2]);
        assert!(top_k(&scores, 0).is_err());
        assert!(top_k(&scores, 6).is_err());
        let m = LsanModel::<f32>::new(tiny_config(VariantKind::Full), 8).unwrap();
        let all = m.predict_topk(SeqInput::new(&[1], &[1]), 20).unwrap();
        let mut sorted = all.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn topk_matches_full_sort_and_is_shift_invariant(
            raw in proptest::collection::vec(-20i32..20, 1..40),
            k in 1usize..40,
            shift in -50i32..50,
        ) {
            let k = k.min(raw.len());
            let scores: Vec<f64> = raw.iter().map(|&x| x as f64).collect();
            let mut oracle: Vec<usize> = (0..scores.len()).collect();
            oracle.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            oracle.truncate(k);
            prop_assert_eq!(&top_k(&scores, k).unwrap(), &oracle);
            let shifted: Vec<f64> = scores.iter().map(|&x| x + shift as f64).collect();
            prop_assert_eq!(top_k(&shifted, k).unwrap(), oracle);
        }
    }

    #[test]
    fn variant_structure() {
        let base = tiny_config(VariantKind::Full);
        let full = LsanModel::<f32>::build_variant(VariantKind::Full, &base, 1).unwrap();
        assert!(full.params().find("embedding.w_a").is_some());
        let wo = LsanModel::<f32>::build_variant(VariantKind::WoDynamic, &base, 1).unwrap();
        assert!(wo.params().find("embedding.w_a").is_none());

        let mut five = base.clone();
        five.num_items = 5;
        five.sizes = vec![2, 3];
        let fe = LsanModel::<f32>::build_variant(VariantKind::FullEmb, &five, 1).unwrap();
        let table = fe.params().find("embedding.base0").unwrap();
        assert_eq!(fe.params().get(table).shape(), &[5, 8]);
        assert_eq!(fe.count_parameters().embedding, 5 * 8);

        let plain = LsanModel::<f32>::build_variant(VariantKind::PlainAttn, &base, 1).unwrap();
        assert_eq!(plain.count_parameters().encoder, 6 * 2 * 64);
        assert_eq!(plain.count_parameters().encoder, twin::count_branch_params(2, 3, 8).plain);
        assert_eq!(full.count_parameters().encoder, twin::count_branch_params(2, 3, 8).twin);
    }

    #[test]
    fn unweighted_sum_of_bases() {
        let mut g = Graph::<f64>::new();
        let e1 = g.leaf(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap(), false);
        let e2 = g.leaf(Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap(), false);
        let h = embedding::sum_bases(&mut g, &[e1, e2]).unwrap();
        assert_eq!(g.value(h).data(), &[1.0, 1.0]);
    }

    #[test]
    fn single_table_full_and_wo_dynamic_coincide() {
        let mut cfg = tiny_config(VariantKind::Full);
        cfg.sizes = vec![20];
        let full = LsanModel::<f32>::build_variant(VariantKind::Full, &cfg, 2).unwrap();
        let wo = LsanModel::<f32>::build_variant(VariantKind::WoDynamic, &cfg, 2).unwrap();
        assert_eq!(full.params().names(), wo.params().names());
        let seq = SeqInput::new(&[3, 4, 5], &[1, 2, 3]);
        assert_eq!(full.logits(&[seq]).unwrap(), wo.logits(&[seq]).unwrap());
    }

    #[test]
    fn small_gradient_check_passes() {
        let mut m = LsanModel::<f64>::new(tiny_config(VariantKind::Full), 12).unwrap();
        let batch = vec![(vec![1, 5, 9, 13], vec![1, 2, 3, 4], 7), (vec![2, 19], vec![5, 0], 0)];
        let report = gradient_check(&mut m, &batch, 1e-3, 1e-5, 6, 1).unwrap();
        assert_eq!(report.tensors.len(), m.params().len());
        assert!(report.max_rel_error() < 1e-3, "{report:?}");
    }

    #[test]
    fn breakdown_sums_to_parameter_total() {
        for kind in VariantKind::ALL {
            let m = LsanModel::<f32>::new(tiny_config(kind), 1).unwrap();
            let b = m.count_parameters();
            let parts = b.embedding + b.context + b.fusion + b.position + b.encoder + b.ffn + b.output;
            assert_eq!(parts, b.total);
            assert_eq!(b.total, m.params().total_values());
        }
    }
}
