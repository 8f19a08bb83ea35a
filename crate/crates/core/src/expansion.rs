//! Privacy-preserving inductive graph expansion.
//!
//! Clients encrypt the ids of items they have rated with a deterministic
//! keyed function and upload only digests they have not sent before,
//! together with their current user embedding. The server joins digests
//! across clients and hands each uploader, per digest, the embeddings of the
//! other clients holding that digest. Neither plaintext item ids nor user ids
//! ever reach the server; clients are known to it only by a random tag.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use log::warn;
use rand::Rng;
use serde::{Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::data::ItemId;
use crate::model::{Embedding, LocalSubgraph};

const DOMAIN: &[u8] = b"fedfair/item-digest/v1";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ExpansionError {
    #[error("embedding length {found}, expected {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("mapping slice contains a digest this client never uploaded")]
    ForeignDigest,
    #[error("cannot write digest histogram: {0}")]
    Io(String),
}

/// Secret shared by all clients and never handed to the server.
#[derive(Clone, PartialEq, Eq)]
pub struct ExpansionKey([u8; 32]);

impl ExpansionKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn generate<R: Rng>(rng: &mut R) -> Self {
        let mut b = [0u8; 32];
        rng.fill(&mut b);
        Self(b)
    }
}

impl fmt::Debug for ExpansionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ExpansionKey(..)")
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EncryptedItemId([u8; 32]);

impl EncryptedItemId {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for EncryptedItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EncryptedItemId({})", hex::encode(&self.0[..8]))
    }
}

impl fmt::Display for EncryptedItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl Serialize for EncryptedItemId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

/// Keyed SHA-256 over a fixed-length encoding of the item id.
pub fn encrypt_item_id(item: ItemId, key: &ExpansionKey) -> EncryptedItemId {
    let mut h = Sha256::new();
    h.update(DOMAIN);
    h.update(key.0);
    h.update(item.to_le_bytes());
    let mut out = [0u8; 32];
    out.copy_from_slice(&h.finalize());
    EncryptedItemId(out)
}

pub fn encrypt_item_ids<I: IntoIterator<Item = ItemId>>(items: I, key: &ExpansionKey) -> BTreeSet<EncryptedItemId> {
    items.into_iter().map(|i| encrypt_item_id(i, key)).collect()
}

/// Anonymous handle under which the server files a client's uploads.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClientTag(u128);

impl ClientTag {
    pub fn generate<R: Rng>(rng: &mut R) -> Self {
        Self(rng.random())
    }
}

impl fmt::Debug for ClientTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ClientTag({:032x})", self.0)
    }
}

impl Serialize for ClientTag {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{:032x}", self.0))
    }
}

#[derive(Debug, Clone)]
pub struct ExpansionUpload {
    pub client_tag: ClientTag,
    /// Digests of items rated since the previous upload.
    pub new_encrypted_ids: Vec<EncryptedItemId>,
    pub user_embedding: Embedding,
}

/// Client half of the protocol: remembers what has already been uploaded.
#[derive(Debug, Clone)]
pub struct ExpansionClient {
    tag: ClientTag,
    key: Arc<ExpansionKey>,
    uploaded: HashSet<ItemId>,
    digests: BTreeSet<EncryptedItemId>,
}

impl ExpansionClient {
    pub fn new(tag: ClientTag, key: Arc<ExpansionKey>) -> Self {
        Self {
            tag,
            key,
            uploaded: HashSet::new(),
            digests: BTreeSet::new(),
        }
    }

    pub fn tag(&self) -> ClientTag {
        self.tag
    }

    /// Total digests sent so far.
    pub fn uploaded_count(&self) -> usize {
        self.uploaded.len()
    }

    pub fn digests(&self) -> &BTreeSet<EncryptedItemId> {
        &self.digests
    }

    /// Encrypt items not uploaded before and package them with `embedding`.
    pub fn prepare_upload(&mut self, items: &[ItemId], embedding: Embedding) -> ExpansionUpload {
        let mut fresh = Vec::new();
        for &i in items {
            if self.uploaded.insert(i) {
                let d = encrypt_item_id(i, &self.key);
                self.digests.insert(d);
                fresh.push(d);
            }
        }
        ExpansionUpload {
            client_tag: self.tag,
            new_encrypted_ids: fresh,
            user_embedding: embedding,
        }
    }

    /// Attach the distinct neighbor embeddings in `slice` to the user node,
    /// replacing any earlier neighbors. At most `cap` are kept, chosen
    /// uniformly with `rng`.
    pub fn expand<R: Rng>(
        &self,
        local: &LocalSubgraph,
        slice: &MappingDict,
        hidden: usize,
        cap: Option<usize>,
        rng: &mut R,
    ) -> Result<LocalSubgraph, ExpansionError> {
        if slice.entries.keys().any(|d| !self.digests.contains(d)) {
            return Err(ExpansionError::ForeignDigest);
        }
        expand_subgraph(local, slice, hidden, cap, rng)
    }
}

/// Union the slice's embeddings (deduplicated by value) onto the user node.
pub fn expand_subgraph<R: Rng>(
    local: &LocalSubgraph,
    slice: &MappingDict,
    hidden: usize,
    cap: Option<usize>,
    rng: &mut R,
) -> Result<LocalSubgraph, ExpansionError> {
    let mut seen_ptr: HashSet<*const f64> = HashSet::new();
    let mut by_fingerprint: HashMap<u64, Vec<usize>> = HashMap::new();
    let mut distinct: Vec<Embedding> = Vec::new();
    for list in slice.entries.values() {
        for e in list {
            if e.len() != hidden {
                return Err(ExpansionError::Dimension {
                    expected: hidden,
                    found: e.len(),
                });
            }
            if !seen_ptr.insert(e.as_ptr()) {
                continue;
            }
            let fp = fingerprint(e);
            let bucket = by_fingerprint.entry(fp).or_default();
            if bucket.iter().any(|&i| same_bits(&distinct[i], e)) {
                continue;
            }
            bucket.push(distinct.len());
            distinct.push(e.clone());
        }
    }
    let neighbors = match cap {
        Some(c) if distinct.len() > c => {
            let mut idx = rand::seq::index::sample(rng, distinct.len(), c).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| distinct[i].clone()).collect()
        }
        _ => distinct,
    };
    Ok(LocalSubgraph {
        user: local.user,
        items: local.items.clone(),
        neighbors,
    })
}

fn fingerprint(e: &[f64]) -> u64 {
    e.iter()
        .take(4)
        .fold(0xcbf2_9ce4_8422_2325u64, |acc, x| (acc ^ x.to_bits()).wrapping_mul(0x1000_0000_01b3))
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Per-digest neighbor embeddings delivered to one client.
#[derive(Debug, Clone, Default, Serialize)]
pub struct MappingDict {
    pub entries: BTreeMap<EncryptedItemId, Vec<Embedding>>,
}

impl MappingDict {
    pub fn is_empty(&self) -> bool {
        self.entries.values().all(|v| v.is_empty())
    }
}

/// Server half: everything it ever learns, keyed by anonymous tags.
#[derive(Debug, Serialize)]
pub struct ExpansionServer {
    hidden: usize,
    digests_of: BTreeMap<ClientTag, BTreeSet<EncryptedItemId>>,
    holders: BTreeMap<EncryptedItemId, BTreeSet<ClientTag>>,
    embeddings: BTreeMap<ClientTag, Embedding>,
    #[serde(skip)]
    received: usize,
}

impl ExpansionServer {
    /// Number of clients on record for each digest.
    pub fn digest_histogram(&self) -> Vec<(EncryptedItemId, usize)> {
        self.holders.iter().map(|(d, h)| (*d, h.len())).collect()
    }

    pub fn write_histogram_csv(&self, path: &Path) -> Result<(), ExpansionError> {
        write_histogram_csv(&self.digest_histogram(), path)
    }

    pub fn new(hidden: usize) -> Self {
        Self {
            hidden,
            digests_of: BTreeMap::new(),
            holders: BTreeMap::new(),
            embeddings: BTreeMap::new(),
            received: 0,
        }
    }

    /// Total digests accepted over the server's lifetime.
    pub fn received_digests(&self) -> usize {
        self.received
    }

    pub fn digest_count(&self) -> usize {
        self.holders.len()
    }

    /// Merge this round's uploads into the store and overwrite each
    /// uploader's embedding. Digests a client already sent are ignored with
    /// a warning.
    pub fn update_mapping(&mut self, uploads: Vec<ExpansionUpload>) -> Result<RoundMapping<'_>, ExpansionError> {
        for u in &uploads {
            if u.user_embedding.len() != self.hidden {
                return Err(ExpansionError::Dimension {
                    expected: self.hidden,
                    found: u.user_embedding.len(),
                });
            }
        }
        let mut round = BTreeSet::new();
        for u in uploads {
            let own = self.digests_of.entry(u.client_tag).or_default();
            let mut dupes = 0;
            for d in u.new_encrypted_ids {
                if own.insert(d) {
                    self.holders.entry(d).or_default().insert(u.client_tag);
                    self.received += 1;
                } else {
                    dupes += 1;
                }
            }
            if dupes > 0 {
                warn!("{:?}: ignored {dupes} digests already on record", u.client_tag);
            }
            self.embeddings.insert(u.client_tag, u.user_embedding);
            round.insert(u.client_tag);
        }
        Ok(RoundMapping { server: self, round })
    }
}

/// Read-only view of the store after one round's uploads.
#[derive(Debug)]
pub struct RoundMapping<'a> {
    server: &'a ExpansionServer,
    round: BTreeSet<ClientTag>,
}

impl RoundMapping<'_> {
    /// For every digest `tag` holds, the latest embeddings of every other
    /// holder. `None` if `tag` did not upload this round.
    pub fn slice_for(&self, tag: ClientTag) -> Option<MappingDict> {
        if !self.round.contains(&tag) {
            return None;
        }
        let s = self.server;
        let mut entries = BTreeMap::new();
        for d in s.digests_of.get(&tag).into_iter().flatten() {
            let list: Vec<Embedding> = s.holders[d]
                .iter()
                .filter(|t| **t != tag)
                .map(|t| s.embeddings[t].clone())
                .collect();
            entries.insert(*d, list);
        }
        Some(MappingDict { entries })
    }
}


/// Write a digest histogram as `digest,holders` CSV.
pub fn write_histogram_csv(histogram: &[(EncryptedItemId, usize)], path: &Path) -> Result<(), ExpansionError> {
    let io = |e: std::io::Error| ExpansionError::Io(e.to_string());
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "digest,holders").map_err(io)?;
    for (d, n) in histogram {
        writeln!(f, "{d},{n}").map_err(io)?;
    }
    f.flush().map_err(io)
}
