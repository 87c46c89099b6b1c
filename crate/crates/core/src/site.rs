//! Lattice sites, packed coordinate keys, and bounding boxes.

use std::collections::{HashMap, HashSet};
use std::hash::{BuildHasherDefault, Hasher};

use serde::{Deserialize, Serialize};

use crate::rng::splitmix64;

/// Maximum supported coordinate dimension.
pub const MAX_DIM: usize = 5;

/// A lattice site: integer coordinates in `d <= MAX_DIM` dimensions.
/// Unused coordinates are zero, so equality and ordering are coordinate-wise.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub struct Site {
    coords: [i32; MAX_DIM],
    d: u8,
}

impl Site {
    pub fn new(coords: &[i32]) -> Self {
        assert!(!coords.is_empty() && coords.len() <= MAX_DIM, "dimension out of range");
        let mut c = [0i32; MAX_DIM];
        c[..coords.len()].copy_from_slice(coords);
        Site { coords: c, d: coords.len() as u8 }
    }

    pub fn origin(d: usize) -> Self {
        assert!(d >= 1 && d <= MAX_DIM);
        Site { coords: [0; MAX_DIM], d: d as u8 }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.d as usize
    }

    #[inline]
    pub fn coords(&self) -> &[i32] {
        &self.coords[..self.d as usize]
    }

    #[inline]
    pub fn coord(&self, axis: usize) -> i32 {
        self.coords[axis]
    }

    /// The site displaced by `delta` along `axis`.
    #[inline]
    pub fn offset(&self, axis: usize, delta: i32) -> Site {
        let mut s = *self;
        s.coords[axis] += delta;
        s
    }

    pub fn translate(&self, delta: &[i32]) -> Site {
        let mut s = *self;
        for (i, d) in delta.iter().enumerate() {
            s.coords[i] += d;
        }
        s
    }

    /// Squared euclidean distance.
    #[inline]
    pub fn dist2(&self, other: &Site) -> i64 {
        let mut acc = 0i64;
        for i in 0..self.d as usize {
            let d = (self.coords[i] - other.coords[i]) as i64;
            acc += d * d;
        }
        acc
    }

    /// l1 distance.
    #[inline]
    pub fn l1(&self, other: &Site) -> i64 {
        let mut acc = 0i64;
        for i in 0..self.d as usize {
            acc += ((self.coords[i] - other.coords[i]) as i64).abs();
        }
        acc
    }

    pub fn euclid(&self, other: &Site) -> f64 {
        (self.dist2(other) as f64).sqrt()
    }

    /// Injective 64-bit key.  For d <= 3 each coordinate gets 21 bits
    /// (range +-1_048_575), otherwise 12 bits (range +-2047); desk-scale
    /// windows stay far inside both ranges and violations panic loudly.
    #[inline]
    pub fn packed(&self) -> u64 {
        let d = self.d as usize;
        if d <= 3 {
            const OFF: i64 = 1 << 20;
            let mut key = 0u64;
            for i in 0..3 {
                let v = self.coords[i] as i64 + OFF;
                debug_assert!((0..(1 << 21)).contains(&v), "coordinate out of packing range");
                key = (key << 21) | (v as u64 & ((1 << 21) - 1));
            }
            key | (1 << 63)
        } else {
            const OFF: i64 = 1 << 11;
            let mut key = 0u64;
            for i in 0..MAX_DIM {
                let v = self.coords[i] as i64 + OFF;
                debug_assert!((0..(1 << 12)).contains(&v), "coordinate out of packing range");
                key = (key << 12) | (v as u64 & ((1 << 12) - 1));
            }
            key
        }
    }
}

/// Hasher for already-well-mixed u64 keys (packed sites).
#[derive(Default)]
pub struct KeyHasher(u64);

impl Hasher for KeyHasher {
    #[inline]
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 = splitmix64(self.0 ^ b as u64);
        }
    }

    #[inline]
    fn write_u64(&mut self, n: u64) {
        self.0 = splitmix64(n);
    }
}

pub type BuildKeyHasher = BuildHasherDefault<KeyHasher>;
pub type PackedSet = HashSet<u64, BuildKeyHasher>;
pub type PackedMap<V> = HashMap<u64, V, BuildKeyHasher>;

/// Axis-aligned coordinate box (inclusive bounds).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub lo: [i32; MAX_DIM],
    pub hi: [i32; MAX_DIM],
    pub d: u8,
}

impl BBox {
    pub fn empty(d: usize) -> Self {
        BBox { lo: [i32::MAX; MAX_DIM], hi: [i32::MIN; MAX_DIM], d: d as u8 }
    }

    pub fn of_sites<'a>(d: usize, sites: impl IntoIterator<Item = &'a Site>) -> Self {
        let mut b = BBox::empty(d);
        for s in sites {
            b.absorb(s);
        }
        b
    }

    pub fn absorb(&mut self, s: &Site) {
        for i in 0..self.d as usize {
            self.lo[i] = self.lo[i].min(s.coord(i));
            self.hi[i] = self.hi[i].max(s.coord(i));
        }
    }

    pub fn is_empty(&self) -> bool {
        (0..self.d as usize).any(|i| self.lo[i] > self.hi[i])
    }

    #[inline]
    pub fn contains(&self, s: &Site) -> bool {
        (0..self.d as usize).all(|i| self.lo[i] <= s.coord(i) && s.coord(i) <= self.hi[i])
    }

    /// Box grown by `r` in every direction.
    pub fn grown(&self, r: i32) -> BBox {
        let mut b = *self;
        for i in 0..self.d as usize {
            b.lo[i] -= r;
            b.hi[i] += r;
        }
        b
    }

    pub fn volume(&self) -> u64 {
        if self.is_empty() {
            return 0;
        }
        (0..self.d as usize).map(|i| (self.hi[i] - self.lo[i] + 1) as u64).product()
    }

    /// Iterates all sites in the box in lexicographic order.
    pub fn iter_sites(&self) -> impl Iterator<Item = Site> + '_ {
        let d = self.d as usize;
        let dims: Vec<(i32, i32)> = (0..d).map(|i| (self.lo[i], self.hi[i])).collect();
        let total = self.volume();
        let mut cursor: Vec<i32> = dims.iter().map(|&(lo, _)| lo).collect();
        let mut produced = 0u64;
        std::iter::from_fn(move || {
            if produced >= total {
                return None;
            }
            let site = Site::new(&cursor);
            produced += 1;
            for i in (0..d).rev() {
                if cursor[i] < dims[i].1 {
                    cursor[i] += 1;
                    break;
                }
                cursor[i] = dims[i].0;
            }
            Some(site)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packing_is_injective_on_a_window() {
        let mut seen = PackedSet::default();
        for x in -9..=9 {
            for y in -9..=9 {
                for z in -9..=9 {
                    assert!(seen.insert(Site::new(&[x, y, z]).packed()));
                }
            }
        }
        assert_eq!(seen.len(), 19 * 19 * 19);
    }

    #[test]
    fn packing_is_injective_in_5d() {
        let mut seen = PackedSet::default();
        for x in -3..=3 {
            for y in -3..=3 {
                for z in -3..=3 {
                    for w in -3..=3 {
                        for v in -3..=3 {
                            assert!(seen.insert(Site::new(&[x, y, z, w, v]).packed()));
                        }
                    }
                }
            }
        }
        assert_eq!(seen.len(), 7usize.pow(5));
    }

    #[test]
    fn bbox_iteration_covers_volume() {
        let a = Site::new(&[-1, 0, 2]);
        let b = Site::new(&[1, 1, 3]);
        let bbox = BBox::of_sites(3, [&a, &b]);
        let sites: Vec<Site> = bbox.iter_sites().collect();
        assert_eq!(sites.len() as u64, bbox.volume());
        assert_eq!(bbox.volume(), 3 * 2 * 2);
        assert!(sites.contains(&Site::new(&[0, 1, 2])));
    }

    #[test]
    fn distances() {
        let a = Site::new(&[0, 0, 0]);
        let b = Site::new(&[3, 4, 0]);
        assert_eq!(a.dist2(&b), 25);
        assert_eq!(a.l1(&b), 7);
        assert!((a.euclid(&b) - 5.0).abs() < 1e-12);
    }
}
