//! Checkpoint directory: `manifest.txt` (key=value), `params.bin`
//! (little-endian f32 in [`ParamLayout`] order) and `vocab.tsv`.

use std::collections::BTreeMap;
use std::path::Path;

use super::{Encoder, EncoderError, ModelConfig, ParamLayout};
use crate::corpus::CharVocab;

pub const CHECKPOINT_MANIFEST: &str = "manifest.txt";
pub const CHECKPOINT_PARAMS: &str = "params.bin";
pub const CHECKPOINT_VOCAB: &str = "vocab.tsv";

const FORMAT: &str = "wordprobe-checkpoint";
const VERSION: &str = "1";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> EncoderError + '_ {
    move |source| EncoderError::Io { path: path.to_path_buf(), source }
}

pub fn save_checkpoint(model: &Encoder<f32>, vocab: &CharVocab, dir: &Path) -> Result<(), EncoderError> {
    let cfg = model.config();
    if cfg.vocab_size != vocab.size() {
        return Err(EncoderError::Checkpoint("model and vocabulary sizes differ".into()));
    }
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let order: Vec<String> = ParamLayout::new(cfg).entries().into_iter().map(|(n, _)| n).collect();
    let manifest = format!(
        "format={FORMAT}\nversion={VERSION}\nlayers={}\nheads={}\ndim={}\nffn_dim={}\nvocab_size={}\nmax_len={}\n\
         dropout={}\nseed={}\nvocab_sha256={}\nparam_count={}\ndtype=f32\nendianness=little\norder={}\n",
        cfg.layers,
        cfg.heads,
        cfg.dim,
        cfg.ffn_dim(),
        cfg.vocab_size,
        cfg.max_len,
        cfg.dropout,
        cfg.seed,
        vocab.hash(),
        model.param_count(),
        order.join(","),
    );
    let mpath = dir.join(CHECKPOINT_MANIFEST);
    std::fs::write(&mpath, manifest).map_err(io(&mpath))?;
    let bytes: Vec<u8> = model.params().iter().flat_map(|p| p.to_le_bytes()).collect();
    let ppath = dir.join(CHECKPOINT_PARAMS);
    std::fs::write(&ppath, bytes).map_err(io(&ppath))?;
    vocab.write(&dir.join(CHECKPOINT_VOCAB))?;
    Ok(())
}

pub(crate) fn parse_manifest(text: &str) -> BTreeMap<String, String> {
    text.lines().filter_map(|l| l.split_once('=')).map(|(k, v)| (k.trim().to_string(), v.trim().to_string())).collect()
}

pub fn load_checkpoint(dir: &Path) -> Result<(Encoder<f32>, CharVocab), EncoderError> {
    let mpath = dir.join(CHECKPOINT_MANIFEST);
    let text = std::fs::read_to_string(&mpath).map_err(io(&mpath))?;
    let kv = parse_manifest(&text);
    let get = |k: &str| kv.get(k).ok_or_else(|| EncoderError::Checkpoint(format!("manifest lacks `{k}`")));
    let num = |k: &str| -> Result<u64, EncoderError> {
        get(k)?.parse().map_err(|_| EncoderError::Checkpoint(format!("`{k}` is not an integer")))
    };
    if get("format")? != FORMAT || get("version")? != VERSION {
        return Err(EncoderError::Checkpoint("unsupported checkpoint format".into()));
    }
    if get("dtype")? != "f32" || get("endianness")? != "little" {
        return Err(EncoderError::Checkpoint("only little-endian f32 is supported".into()));
    }
    let config = ModelConfig {
        layers: num("layers")? as usize,
        heads: num("heads")? as usize,
        dim: num("dim")? as usize,
        vocab_size: num("vocab_size")? as usize,
        max_len: num("max_len")? as usize,
        dropout: get("dropout")?.parse().map_err(|_| EncoderError::Checkpoint("`dropout` is not a number".into()))?,
        seed: num("seed")?,
    };
    config.validate()?;

    let vocab = CharVocab::read(&dir.join(CHECKPOINT_VOCAB))?;
    if vocab.hash() != *get("vocab_sha256")? || vocab.size() != config.vocab_size {
        return Err(EncoderError::Checkpoint("vocabulary does not match manifest".into()));
    }
    let ppath = dir.join(CHECKPOINT_PARAMS);
    let bytes = std::fs::read(&ppath).map_err(io(&ppath))?;
    let expected = ParamLayout::new(&config).total;
    if num("param_count")? as usize != expected || bytes.len() != 4 * expected {
        return Err(EncoderError::Checkpoint(format!(
            "parameter blob has {} bytes, expected {}",
            bytes.len(),
            4 * expected
        )));
    }
    let params = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((Encoder::from_params(config, params)?, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_corpus;

    #[test]
    fn round_trip_is_bit_exact() {
        let corpus = parse_corpus("ab c\nd").unwrap();
        let vocab = CharVocab::build(&corpus, 1).unwrap();
        let cfg =
            ModelConfig { layers: 2, heads: 2, dim: 8, vocab_size: vocab.size(), max_len: 6, dropout: 0.1, seed: 9 };
        let model = Encoder::<f32>::new(cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, &vocab, dir.path()).unwrap();
        let (back, v2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, model);
        assert_eq!(v2, vocab);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let corpus = parse_corpus("ab").unwrap();
        let vocab = CharVocab::build(&corpus, 1).unwrap();
        let cfg =
            ModelConfig { layers: 1, heads: 1, dim: 4, vocab_size: vocab.size(), max_len: 4, dropout: 0.0, seed: 1 };
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&Encoder::new(cfg).unwrap(), &vocab, dir.path()).unwrap();
        let p = dir.path().join(CHECKPOINT_PARAMS);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(EncoderError::Checkpoint(_))));
    }
}
