use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Keys and values of one layer, laid out `[batch][max_len][kv_width]`.
#[derive(Clone, Debug)]
pub struct LayerKv {
    k: Vec<f32>,
    v: Vec<f32>,
    max_len: usize,
    kv_width: usize,
}

impl LayerKv {
    fn offset(&self, b: usize, pos: usize) -> usize {
        (b * self.max_len + pos) * self.kv_width
    }

    /// Stores `rows` consecutive positions starting at `start` for sequence `b`.
    pub(crate) fn write(&mut self, b: usize, start: usize, k: &[f32], v: &[f32]) {
        let at = self.offset(b, start);
        self.k[at..at + k.len()].copy_from_slice(k);
        self.v[at..at + v.len()].copy_from_slice(v);
    }

    /// Positions `[0, len)` of sequence `b` as `[len × kv_width]` tensors.
    pub(crate) fn prefix(&self, b: usize, len: usize) -> (Tensor, Tensor) {
        let at = self.offset(b, 0);
        let n = len * self.kv_width;
        let shape = vec![len, self.kv_width];
        (
            Tensor::new(shape.clone(), self.k[at..at + n].to_vec()).expect("kv prefix shape"),
            Tensor::new(shape, self.v[at..at + n].to_vec()).expect("kv prefix shape"),
        )
    }
}

/// Per-rank attention cache. Owned by exactly one rank.
#[derive(Clone, Debug)]
pub struct KvCache {
    layers: Vec<LayerKv>,
    len: usize,
    max_len: usize,
    batch: usize,
}

impl KvCache {
    pub fn new(n_layers: usize, batch: usize, max_len: usize, kv_width: usize) -> Self {
        let layer = LayerKv {
            k: vec![0.0; batch * max_len * kv_width],
            v: vec![0.0; batch * max_len * kv_width],
            max_len,
            kv_width,
        };
        Self {
            layers: vec![layer; n_layers],
            len: 0,
            max_len,
            batch,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.max_len
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn ensure_room(&self, extra: usize) -> Result<()> {
        if self.len + extra > self.max_len {
            return Err(Error::Capacity {
                needed: self.len + extra,
                capacity: self.max_len,
            });
        }
        Ok(())
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut LayerKv {
        &mut self.layers[i]
    }

    /// Commits `n` freshly written positions. Length never decreases.
    pub(crate) fn advance(&mut self, n: usize) {
        self.len += n;
        debug_assert!(self.len <= self.max_len);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capacity_is_enforced() {
        let mut c = KvCache::new(1, 1, 4, 2);
        c.ensure_room(4).unwrap();
        c.advance(3);
        assert!(matches!(
            c.ensure_room(2),
            Err(Error::Capacity { needed: 5, capacity: 4 })
        ));
    }

    #[test]
    fn write_then_read_prefix() {
        let mut c = KvCache::new(1, 2, 3, 2);
        let l = c.layer_mut(0);
        l.write(1, 0, &[1., 2., 3., 4.], &[5., 6., 7., 8.]);
        let (k, v) = l.prefix(1, 2);
        assert_eq!(k.data(), &[1., 2., 3., 4.]);
        assert_eq!(v.data(), &[5., 6., 7., 8.]);
        assert_eq!(l.prefix(0, 1).0.data(), &[0., 0.]);
    }
}
