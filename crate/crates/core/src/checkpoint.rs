//! Checkpoint directory: `model.lsan` (text manifest followed by little-endian
//! f32 payloads), plus the item and context vocabularies.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::embedding::ContextVocab;
use crate::error::{LsanError, Result};
use crate::model::{LsanModel, ModelConfig};
use crate::tensor::Tensor;

pub const MODEL_FILE: &str = "model.lsan";
pub const ITEMS_FILE: &str = "items.tsv";
pub const CONTEXTS_FILE: &str = "contexts.tsv";

const MAGIC: &str = "lsan-checkpoint 1";
const END: &str = "end\n";

/// Encodes a model as manifest plus payload.
pub fn encode(model: &LsanModel<f32>, provenance: &str) -> Vec<u8> {
    let mut head = String::new();
    let _ = writeln!(head, "{MAGIC}");
    let _ = writeln!(head, "model {}", model.config().to_line());
    let _ = writeln!(head, "provenance {}", if provenance.is_empty() { "-" } else { provenance });
    let p = model.params();
    let mut offset = 0;
    for (name, t) in p.names().iter().zip(p.tensors()) {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let _ = writeln!(head, "tensor {name} {} f32 {offset} {}", dims.join("x"), t.len());
        offset += 4 * t.len();
    }
    head.push_str(END);
    let mut out = head.into_bytes();
    out.reserve(offset);
    for t in p.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Decodes [`encode`] output into a model and its provenance string.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<(LsanModel<f32>, String)> {
    let bad = |detail: String| LsanError::format(origin, detail);
    let split = bytes
        .windows(END.len() + 1)
        .position(|w| w[0] == b'\n' && &w[1..] == END.as_bytes())
        .ok_or_else(|| bad("manifest has no end marker".into()))?;
    let head = std::str::from_utf8(&bytes[..split + 1]).map_err(|_| bad("manifest is not UTF-8".into()))?;
    let payload = &bytes[split + 1 + END.len()..];
    let mut lines = head.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("not an lsan checkpoint".into()));
    }
    let config = lines
        .next()
        .and_then(|l| l.strip_prefix("model "))
        .ok_or_else(|| bad("missing model line".into()))?;
    let config = ModelConfig::from_line(config)?;
    let provenance = lines
        .next()
        .and_then(|l| l.strip_prefix("provenance "))
        .ok_or_else(|| bad("missing provenance line".into()))?;
    let mut named = Vec::new();
    let mut expected_offset = 0;
    for line in lines {
        let f: Vec<&str> = line.split(' ').collect();
        let parsed = (f.len() == 6 && f[0] == "tensor" && f[3] == "f32")
            .then(|| {
                let shape = f[2].split('x').map(|d| d.parse().ok()).collect::<Option<Vec<usize>>>()?;
                Some((shape, f[4].parse::<usize>().ok()?, f[5].parse::<usize>().ok()?))
            })
            .flatten();
        let Some((shape, offset, count)) = parsed else {
            return Err(bad(format!("bad manifest line {line:?}")));
        };
        let end = offset + 4 * count;
        if offset != expected_offset || end > payload.len() {
            return Err(bad(format!("tensor {} has payload range {offset}..{end}", f[1])));
        }
        expected_offset = end;
        let data = payload[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| bad(format!("tensor {}: {e}", f[1])))?;
        named.push((f[1].to_owned(), tensor));
    }
    if expected_offset != payload.len() {
        return Err(bad(format!("{} trailing payload bytes", payload.len() - expected_offset)));
    }
    let mut model = LsanModel::new(config, 0)?;
    model.load_params(named)?;
    let provenance = if provenance == "-" { String::new() } else { provenance.to_owned() };
    Ok((model, provenance))
}

/// A trained model and the vocabularies needed to feed it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: LsanModel<f32>,
    pub items: Vec<String>,
    pub contexts: ContextVocab,
    pub provenance: String,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| LsanError::io(dir, e))?;
        let path = dir.join(MODEL_FILE);
        fs::write(&path, encode(&self.model, &self.provenance)).map_err(|e| LsanError::io(&path, e))?;
        let mut items = String::new();
        for (i, id) in self.items.iter().enumerate() {
            let _ = writeln!(items, "{i}\t{id}");
        }
        let path = dir.join(ITEMS_FILE);
        fs::write(&path, items).map_err(|e| LsanError::io(&path, e))?;
        self.contexts.write_tsv(&dir.join(CONTEXTS_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MODEL_FILE);
        let bytes = fs::read(&path).map_err(|e| LsanError::io(&path, e))?;
        let (model, provenance) = decode(&bytes, &path)?;
        let path = dir.join(ITEMS_FILE);
        let text = fs::read_to_string(&path).map_err(|e| LsanError::io(&path, e))?;
        let items = text
            .lines()
            .enumerate()
            .map(|(n, l)| match l.split_once('\t') {
                Some((i, id)) if i.parse() == Ok(n) => Ok(id.to_owned()),
                _ => Err(LsanError::format(&path, format!("line {}: {l:?}", n + 1))),
            })
            .collect::<Result<Vec<_>>>()?;
        if items.len() != model.config().num_items {
            return Err(LsanError::format(
                &path,
                format!("{} items for a model over {}", items.len(), model.config().num_items),
            ));
        }
        let contexts = ContextVocab::read_tsv(&dir.join(CONTEXTS_FILE))?;
        if contexts.table_rows() > model.config().context_rows {
            return Err(LsanError::format(
                dir.join(CONTEXTS_FILE),
                format!("{} contexts for a table of {} rows", contexts.table_rows(), model.config().context_rows),
            ));
        }
        Ok(Checkpoint {
            model,
            items,
            contexts,
            provenance,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::ContextKey;
    use crate::model::{SeqInput, VariantKind};

    fn model() -> LsanModel<f32> {
        LsanModel::new(
            ModelConfig {
                num_items: 20,
                context_rows: 3,
                dim: 8,
                kernel: 3,
                heads: 2,
                layers: 2,
                max_len: 6,
                sizes: vec![4, 5],
                variant: VariantKind::Full,
            },
            11,
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let m = model();
        let bytes = encode(&m, "abc123");
        let (back, prov) = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(prov, "abc123");
        assert_eq!(back.params().names(), m.params().names());
        for (a, b) in back.params().tensors().iter().zip(m.params().tensors()) {
            assert_eq!(a, b);
        }
        let seq = SeqInput::new(&[3, 1, 4, 1, 5], &[1, 2, 0, 1, 2]);
        assert_eq!(back.forward_scores(seq).unwrap(), m.forward_scores(seq).unwrap());
        assert_eq!(encode(&back, "abc123"), bytes);
    }

    #[test]
    fn truncated_or_corrupt_files_are_rejected() {
        let bytes = encode(&model(), "");
        for cut in [0, 10, bytes.len() - 1] {
            assert!(decode(&bytes[..cut], Path::new("mem")).is_err());
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra, Path::new("mem")).is_err());
    }

    #[test]
    fn directory_roundtrip() {
        let mut contexts = ContextVocab::new();
        contexts.insert(ContextKey { prev: 0, cur: 1, hour: 3 });
        contexts.insert(ContextKey { prev: 1, cur: 1, hour: 4 });
        let ck = Checkpoint {
            model: model(),
            items: (0..20).map(|i| format!("item{i}")).collect(),
            contexts,
            provenance: "deadbeef".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back.items, ck.items);
        assert_eq!(back.contexts, ck.contexts);
        assert_eq!(back.provenance, "deadbeef");
    }
}
