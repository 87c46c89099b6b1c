//! Disjoint-set forest with union by rank and iterative path halving.

/// Union-find over indices `0..n`.
#[derive(Clone, Debug)]
pub struct UnionFind {
    parent: Vec<u32>,
    rank: Vec<u8>,
    components: usize,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n as u32).collect(),
            rank: vec![0; n],
            components: n,
        }
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    /// Number of disjoint components.
    pub fn components(&self) -> usize {
        self.components
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] as usize != x {
            let grandparent = self.parent[self.parent[x] as usize];
            self.parent[x] = grandparent;
            x = grandparent as usize;
        }
        x
    }

    /// Merges the components of `a` and `b`; returns false if already joined.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        let (hi, lo) = if self.rank[ra] >= self.rank[rb] { (ra, rb) } else { (rb, ra) };
        self.parent[lo] = hi as u32;
        if self.rank[ra] == self.rank[rb] {
            self.rank[hi] += 1;
        }
        self.components -= 1;
        true
    }

    pub fn connected(&mut self, a: usize, b: usize) -> bool {
        self.find(a) == self.find(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_merging() {
        let mut uf = UnionFind::new(6);
        assert_eq!(uf.components(), 6);
        assert!(uf.union(0, 1));
        assert!(uf.union(2, 3));
        assert!(!uf.union(1, 0));
        assert!(uf.union(1, 2));
        assert_eq!(uf.components(), 3);
        assert!(uf.connected(0, 3));
        assert!(!uf.connected(0, 4));
        assert!(uf.union(4, 5));
        assert_eq!(uf.components(), 2);
    }

    #[test]
    fn matches_naive_labels_on_random_unions() {
        use rand::Rng;
        let mut rng = crate::rng::stream(99, &[42]);
        for _ in 0..20 {
            let n = 40;
            let mut uf = UnionFind::new(n);
            let mut label: Vec<usize> = (0..n).collect();
            for _ in 0..60 {
                let a = rng.gen_range(0..n);
                let b = rng.gen_range(0..n);
                uf.union(a, b);
                let (la, lb) = (label[a], label[b]);
                if la != lb {
                    for l in label.iter_mut() {
                        if *l == lb {
                            *l = la;
                        }
                    }
                }
            }
            let distinct: std::collections::HashSet<_> = label.iter().collect();
            assert_eq!(uf.components(), distinct.len());
            for i in 0..n {
                for j in 0..n {
                    assert_eq!(uf.connected(i, j), label[i] == label[j]);
                }
            }
        }
    }
}
