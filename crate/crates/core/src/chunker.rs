//! Fixed-length chunking with a `[CLS]` slot at the head of every chunk.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{CLS_ID, PAD_ID};

pub const DEFAULT_CONTENT_LEN: usize = 202;
pub const DEFAULT_MAX_CHUNKS: usize = 32;

/// Which end of an over-long document survives truncation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Keep {
    #[default]
    Head,
    Tail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkConfig {
    /// Content tokens per chunk, not counting `[CLS]`.
    pub content_len: usize,
    pub max_chunks: usize,
    /// Read `content_len` as the full row length including `[CLS]`.
    #[serde(default)]
    pub cls_in_content: bool,
    #[serde(default)]
    pub keep: Keep,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        ChunkConfig {
            content_len: DEFAULT_CONTENT_LEN,
            max_chunks: DEFAULT_MAX_CHUNKS,
            cls_in_content: false,
            keep: Keep::Head,
        }
    }
}

impl ChunkConfig {
    pub fn new(content_len: usize, max_chunks: usize) -> Self {
        ChunkConfig {
            content_len,
            max_chunks,
            ..Default::default()
        }
    }

    /// Content slots per row after reserving the `[CLS]` slot.
    pub fn content_slots(&self) -> usize {
        if self.cls_in_content {
            self.content_len - 1
        } else {
            self.content_len
        }
    }

    pub fn row_len(&self) -> usize {
        self.content_slots() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let min = if self.cls_in_content { 2 } else { 1 };
        if self.content_len < min || self.max_chunks == 0 {
            return Err(Error::invalid(format!(
                "chunking needs content_len ≥ {min} and max_chunks ≥ 1, got {} and {}",
                self.content_len, self.max_chunks
            )));
        }
        Ok(())
    }
}

/// A document as `n_chunks` rows of token ids, each starting with `[CLS]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkedDocument {
    row_len: usize,
    ids: Vec<u32>,
    mask: Vec<u8>,
    n_real_chunks: usize,
}

impl ChunkedDocument {
    pub fn n_chunks(&self) -> usize {
        self.ids.len() / self.row_len
    }

    pub fn n_real_chunks(&self) -> usize {
        self.n_real_chunks
    }

    pub fn row_len(&self) -> usize {
        self.row_len
    }

    pub fn ids(&self, chunk: usize) -> &[u32] {
        &self.ids[chunk * self.row_len..(chunk + 1) * self.row_len]
    }

    pub fn mask(&self, chunk: usize) -> &[u8] {
        &self.mask[chunk * self.row_len..(chunk + 1) * self.row_len]
    }

    /// Number of mask-1 slots in a row (always a prefix).
    pub fn real_len(&self, chunk: usize) -> usize {
        self.mask(chunk).iter().take_while(|&&m| m == 1).count()
    }

    /// Mask-1 content ids in order, excluding every `[CLS]` slot.
    pub fn content_ids(&self) -> Vec<u32> {
        (0..self.n_chunks())
            .flat_map(|c| self.ids(c)[1..self.real_len(c)].to_vec())
            .collect()
    }
}

/// Splits `ids` into consecutive runs of content tokens, prepending `[CLS]`
/// to each row and padding the final row.
pub fn chunk(ids: &[u32], cfg: &ChunkConfig) -> Result<ChunkedDocument> {
    cfg.validate()?;
    let slots = cfg.content_slots();
    let row_len = slots + 1;
    let limit = slots * cfg.max_chunks;
    let kept = if ids.len() <= limit {
        ids
    } else {
        match cfg.keep {
            Keep::Head => &ids[..limit],
            Keep::Tail => &ids[ids.len() - limit..],
        }
    };
    let n_chunks = kept.len().div_ceil(slots).max(1);
    let mut out_ids = vec![PAD_ID; n_chunks * row_len];
    let mut mask = vec![0u8; n_chunks * row_len];
    for c in 0..n_chunks {
        let row = c * row_len;
        out_ids[row] = CLS_ID;
        mask[row] = 1;
        let content = kept.iter().skip(c * slots).take(slots);
        for (j, &id) in content.enumerate() {
            out_ids[row + 1 + j] = id;
            mask[row + 1 + j] = 1;
        }
    }
    Ok(ChunkedDocument {
        row_len,
        ids: out_ids,
        mask,
        n_real_chunks: n_chunks,
    })
}
