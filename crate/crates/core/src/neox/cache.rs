use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Append-only per-head key/value history. Keys are stored after RoPE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvCache {
    d_head: usize,
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
}

/// One head's view of the cache.
#[derive(Debug, Clone, Copy)]
pub struct KvHead<'a> {
    pub keys: &'a [Vec<f64>],
    pub values: &'a [Vec<f64>],
}

impl<'a> KvHead<'a> {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> KvHead<'a> {
        KvHead {
            keys: &self.keys[range.clone()],
            values: &self.values[range],
        }
    }
}

impl KvCache {
    pub fn new(n_heads: usize, d_head: usize) -> Self {
        KvCache {
            d_head,
            keys: vec![Vec::new(); n_heads],
            values: vec![Vec::new(); n_heads],
        }
    }

    pub fn n_heads(&self) -> usize {
        self.keys.len()
    }

    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn head(&self, h: usize) -> KvHead<'_> {
        KvHead {
            keys: &self.keys[h],
            values: &self.values[h],
        }
    }

    /// Appends one position: `keys[h]` / `values[h]` for every head.
    pub fn append(&mut self, keys: &[Vec<f64>], values: &[Vec<f64>]) -> Result<()> {
        let heads = self.n_heads();
        if keys.len() != heads || values.len() != heads {
            return Err(Error::shape(format!(
                "append of {}/{} heads into a {heads}-head cache",
                keys.len(),
                values.len()
            )));
        }
        if keys.iter().chain(values).any(|v| v.len() != self.d_head) {
            return Err(Error::shape(format!("cache entries must have d_head {}", self.d_head)));
        }
        for h in 0..heads {
            self.keys[h].push(keys[h].clone());
            self.values[h].push(values[h].clone());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_grows_all_heads() {
        let mut c = KvCache::new(2, 3);
        assert!(c.is_empty());
        c.append(&[vec![1.0; 3], vec![2.0; 3]], &[vec![0.0; 3], vec![0.5; 3]])
            .unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.head(1).keys[0], vec![2.0; 3]);
        assert!(c.append(&[vec![1.0; 3]], &[vec![1.0; 3]]).is_err());
        assert!(c
            .append(&[vec![1.0; 2], vec![1.0; 2]], &[vec![1.0; 2], vec![1.0; 2]])
            .is_err());
        assert_eq!(c.len(), 1);
    }
}
