//! Separate-chaining hash table of cells with observable buckets.
//!
//! The bucket of a cell is `key & (buckets - 1)`; the bucket array doubles
//! whenever the number of cells exceeds it (load factor 1). Cells live in an
//! insertion-ordered arena so iteration is deterministic.

use super::hash::{CellIndex, HashKind};

const INITIAL_BUCKETS: usize = 16;

#[derive(Debug, Clone)]
pub struct CellTable<V> {
    hash: HashKind,
    buckets: Vec<Vec<u32>>,
    entries: Vec<(CellIndex, V)>,
}

impl<V> CellTable<V> {
    pub fn new(hash: HashKind) -> Self {
        Self {
            hash,
            buckets: vec![Vec::new(); INITIAL_BUCKETS],
            entries: Vec::new(),
        }
    }

    pub fn hash_kind(&self) -> HashKind {
        self.hash
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn bucket_count(&self) -> usize {
        self.buckets.len()
    }

    /// Number of cells chained in each bucket.
    pub fn bucket_lengths(&self) -> impl Iterator<Item = usize> + '_ {
        self.buckets.iter().map(Vec::len)
    }

    #[inline]
    fn bucket_of(&self, index: &CellIndex) -> usize {
        (self.hash.key(index) as usize) & (self.buckets.len() - 1)
    }

    fn find(&self, index: &CellIndex) -> Option<usize> {
        self.buckets[self.bucket_of(index)]
            .iter()
            .map(|&e| e as usize)
            .find(|&e| self.entries[e].0 == *index)
    }

    pub fn get(&self, index: &CellIndex) -> Option<&V> {
        self.find(index).map(|e| &self.entries[e].1)
    }

    pub fn get_mut(&mut self, index: &CellIndex) -> Option<&mut V> {
        self.find(index).map(move |e| &mut self.entries[e].1)
    }

    /// Returns the value for `index`, inserting `make()` if absent. The flag
    /// is true when a new entry was created.
    pub fn get_or_insert_with(
        &mut self,
        index: CellIndex,
        make: impl FnOnce() -> V,
    ) -> (&mut V, bool) {
        if let Some(e) = self.find(&index) {
            return (&mut self.entries[e].1, false);
        }
        let id = self.entries.len();
        self.entries.push((index, make()));
        if self.entries.len() > self.buckets.len() {
            self.grow();
        } else {
            let b = self.bucket_of(&index);
            self.buckets[b].push(id as u32);
        }
        (&mut self.entries[id].1, true)
    }

    fn grow(&mut self) {
        let n = self.buckets.len() * 2;
        self.buckets = vec![Vec::new(); n];
        for id in 0..self.entries.len() {
            let b = self.bucket_of(&self.entries[id].0);
            self.buckets[b].push(id as u32);
        }
    }

    /// Entries in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&CellIndex, &V)> {
        self.entries.iter().map(|(k, v)| (k, v))
    }
}
