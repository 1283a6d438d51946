use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{encode, AudioEmbedding, EncoderBackend};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"VTEMB\x00\x00\x01";

/// Disk cache of embeddings keyed by the SHA-256 of backend id + segment.
///
/// File layout (little endian): magic, `u32` rows, `u32` cols, `u32` id
/// length, id bytes, `rows * cols` `f32` values.
#[derive(Debug, Clone)]
pub struct EmbeddingCache {
    root: PathBuf,
}

impl EmbeddingCache {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root })
    }

    pub fn key(backend_id: &str, waveform: &[f32]) -> String {
        let mut h = Sha256::new();
        h.update(backend_id.as_bytes());
        h.update([0u8]);
        for v in waveform {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.root.join(format!("{key}.emb"))
    }

    pub fn get_or_encode(&self, waveform: &[f32], backend: &dyn EncoderBackend) -> Result<AudioEmbedding> {
        let path = self.path(&Self::key(&backend.id(), waveform));
        if path.exists() {
            return read_embedding(&path);
        }
        let emb = encode(waveform, backend)?;
        write_embedding(&path, &emb)?;
        Ok(emb)
    }
}

pub fn write_embedding(path: &Path, emb: &AudioEmbedding) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + emb.source_backend.len() + emb.data.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(emb.rows as u32).to_le_bytes());
    buf.extend_from_slice(&(emb.cols as u32).to_le_bytes());
    buf.extend_from_slice(&(emb.source_backend.len() as u32).to_le_bytes());
    buf.extend_from_slice(emb.source_backend.as_bytes());
    for v in &emb.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_embedding(path: &Path) -> Result<AudioEmbedding> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = || Error::Dataset(format!("malformed embedding file {}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad());
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (rows, cols, id_len) = (u32_at(8), u32_at(12), u32_at(16));
    let data_start = 20 + id_len;
    if bytes.len() != data_start + rows * cols * 4 {
        return Err(bad());
    }
    let source_backend = String::from_utf8(bytes[20..data_start].to_vec()).map_err(|_| bad())?;
    let data = bytes[data_start..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(AudioEmbedding {
        rows,
        cols,
        data,
        source_backend,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio_encoder::{ToyMel, ToyMelConfig};

    #[test]
    fn cache_hit_returns_identical_embedding() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EmbeddingCache::new(dir.path()).unwrap();
        let m = ToyMel::new(ToyMelConfig::default()).unwrap();
        let wave: Vec<f32> = (0..1845).map(|i| (i as f32 * 0.1).sin()).collect();
        let a = cache.get_or_encode(&wave, &m).unwrap();
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        let b = cache.get_or_encode(&wave, &m).unwrap();
        assert_eq!(a, b);
        let mut other = wave.clone();
        other[0] += 1e-3;
        assert_ne!(
            EmbeddingCache::key(&m.id(), &wave),
            EmbeddingCache::key(&m.id(), &other)
        );
    }
}
