//! Content-addressed embedding cache.
//!
//! One append-only file per model under the cache directory. Layout, all
//! integers little-endian:
//!
//! ```text
//! header:  magic "QCEMB001" | u32 model_id length | model_id bytes | u32 dim | u8 normalized
//! record:  32-byte SHA-256 content hash | dim x f32
//! ```

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::vecmath::EmbeddingVector;

const MAGIC: &[u8; 8] = b"QCEMB001";

/// SHA-256 of the instruction prefix bytes followed by the text bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentHash(pub [u8; 32]);

impl ContentHash {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl Serialize for ContentHash {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ContentHash {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom("content hash must be 32 bytes"))?;
        Ok(ContentHash(arr))
    }
}

pub fn content_hash(instruction: &str, text: &str) -> ContentHash {
    let mut h = Sha256::new();
    h.update(instruction.as_bytes());
    h.update(text.as_bytes());
    ContentHash(h.finalize().into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub content_hash: ContentHash,
    pub model_id: String,
    pub dim: usize,
    pub vector: EmbeddingVector,
    pub normalized: bool,
}

#[derive(Debug, Default)]
pub struct CacheLookup {
    pub hits: Vec<(usize, EmbeddingRecord)>,
    pub misses: Vec<usize>,
}

struct Shard {
    dim: usize,
    normalized: bool,
    records: HashMap<ContentHash, Arc<[f32]>>,
}

/// Thread-safe cache: concurrent reads, serialized appends.
///
/// A cache without a directory lives only in memory.
pub struct EmbeddingCache {
    dir: Option<PathBuf>,
    shards: RwLock<HashMap<String, Shard>>,
    write_lock: Mutex<()>,
}

impl std::fmt::Debug for EmbeddingCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EmbeddingCache").field("dir", &self.dir).finish()
    }
}

fn shard_file_name(model_id: &str) -> String {
    // model ids carry slashes (org/model), so name files by hash
    let digest = Sha256::digest(model_id.as_bytes());
    format!("{}.emb", hex::encode(&digest[..12]))
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self {
            dir: None,
            shards: RwLock::new(HashMap::new()),
            write_lock: Mutex::new(()),
        }
    }

    /// Opens (creating if needed) a cache directory and loads every shard.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let mut shards = HashMap::new();
        let mut entries: Vec<_> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "emb"))
            .collect();
        entries.sort();
        for path in entries {
            let (model_id, shard) = read_shard(&path)?;
            shards.insert(model_id, shard);
        }
        Ok(Self {
            dir: Some(dir),
            shards: RwLock::new(shards),
            write_lock: Mutex::new(()),
        })
    }

    pub fn dim_of(&self, model_id: &str) -> Option<usize> {
        self.shards.read().unwrap().get(model_id).map(|s| s.dim)
    }

    pub fn len(&self, model_id: &str) -> usize {
        self.shards
            .read()
            .unwrap()
            .get(model_id)
            .map_or(0, |s| s.records.len())
    }

    pub fn is_empty(&self) -> bool {
        self.shards.read().unwrap().values().all(|s| s.records.is_empty())
    }

    pub fn get(&self, model_id: &str, hash: &ContentHash) -> Result<Option<EmbeddingRecord>> {
        let shards = self.shards.read().unwrap();
        let Some(shard) = shards.get(model_id) else {
            return Ok(None);
        };
        let Some(values) = shard.records.get(hash) else {
            return Ok(None);
        };
        if values.len() != shard.dim {
            return Err(Error::Integrity(format!(
                "cache record {} for model `{model_id}` has {} values, model dim is {}",
                hash.to_hex(),
                values.len(),
                shard.dim
            )));
        }
        Ok(Some(EmbeddingRecord {
            content_hash: *hash,
            model_id: model_id.to_string(),
            dim: shard.dim,
            vector: EmbeddingVector::new(values.to_vec())?,
            normalized: shard.normalized,
        }))
    }

    /// Splits `texts` into cached records and the indices still to embed.
    pub fn get_or_pending(
        &self,
        model_id: &str,
        instruction: &str,
        texts: &[&str],
    ) -> Result<CacheLookup> {
        if model_id.is_empty() {
            return Err(Error::invalid("model id must be non-empty"));
        }
        let mut lookup = CacheLookup::default();
        for (i, text) in texts.iter().enumerate() {
            match self.get(model_id, &content_hash(instruction, text))? {
                Some(rec) => lookup.hits.push((i, rec)),
                None => lookup.misses.push(i),
            }
        }
        Ok(lookup)
    }

    /// Inserts records for one model, appending them to its shard file.
    pub fn put(
        &self,
        model_id: &str,
        normalized: bool,
        records: &[(ContentHash, EmbeddingVector)],
    ) -> Result<()> {
        let Some(first) = records.first() else {
            return Ok(());
        };
        let dim = first.1.dim();
        let _guard = self.write_lock.lock().unwrap();
        let mut shards = self.shards.write().unwrap();
        let created = !shards.contains_key(model_id);
        let shard = shards.entry(model_id.to_string()).or_insert_with(|| Shard {
            dim,
            normalized,
            records: HashMap::new(),
        });
        for (hash, v) in records {
            if v.dim() != shard.dim {
                return Err(Error::Integrity(format!(
                    "record {} has dim {}, model `{model_id}` is established at dim {}",
                    hash.to_hex(),
                    v.dim(),
                    shard.dim
                )));
            }
        }
        if let Some(dir) = &self.dir {
            let path = dir.join(shard_file_name(model_id));
            let file = OpenOptions::new().create(true).append(true).open(&path)?;
            let mut w = BufWriter::new(file);
            if created || fs::metadata(&path)?.len() == 0 {
                write_header(&mut w, model_id, shard.dim, shard.normalized)?;
            }
            for (hash, v) in records {
                w.write_all(&hash.0)?;
                for x in v.values() {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            w.flush()?;
        }
        for (hash, v) in records {
            shard.records.insert(*hash, Arc::from(v.values()));
        }
        Ok(())
    }
}

fn write_header<W: Write>(w: &mut W, model_id: &str, dim: usize, normalized: bool) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(model_id.len() as u32).to_le_bytes())?;
    w.write_all(model_id.as_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    w.write_all(&[normalized as u8])?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_shard(path: &Path) -> Result<(String, Shard)> {
    let integrity = |msg: String| Error::Integrity(format!("{}: {msg}", path.display()));
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let mut cur = std::io::Cursor::new(&bytes);
    let mut magic = [0u8; 8];
    cur.read_exact(&mut magic)
        .map_err(|_| integrity("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(integrity("bad magic".into()));
    }
    let len = read_u32(&mut cur).map_err(|_| integrity("truncated header".into()))? as usize;
    let mut name = vec![0u8; len];
    cur.read_exact(&mut name)
        .map_err(|_| integrity("truncated model id".into()))?;
    let model_id = String::from_utf8(name).map_err(|_| integrity("model id not UTF-8".into()))?;
    let dim = read_u32(&mut cur).map_err(|_| integrity("truncated header".into()))? as usize;
    let mut flag = [0u8; 1];
    cur.read_exact(&mut flag)
        .map_err(|_| integrity("truncated header".into()))?;
    if dim == 0 {
        return Err(integrity("zero dimension".into()));
    }
    let body = &bytes[cur.position() as usize..];
    let rec_len = 32 + 4 * dim;
    if body.len() % rec_len != 0 {
        return Err(integrity(format!(
            "record {} is truncated ({} trailing bytes for dim {dim})",
            body.len() / rec_len,
            body.len() % rec_len
        )));
    }
    let mut records = HashMap::new();
    for chunk in body.chunks_exact(rec_len) {
        let hash = ContentHash(chunk[..32].try_into().unwrap());
        let values: Vec<f32> = chunk[32..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        records.insert(hash, Arc::from(values));
    }
    Ok((
        model_id,
        Shard {
            dim,
            normalized: flag[0] != 0,
            records,
        },
    ))
}
