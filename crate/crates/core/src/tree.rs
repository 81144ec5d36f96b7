//! Lazily expanded Galton-Watson trees with path addressing.
//!
//! Every vertex carries a 64-bit key derived from its path:
//!
//! ```text
//! key(root)    = mix64(seed ^ ROOT_SALT)
//! key(child i) = mix64(rotl(key(parent), 17) ^ (i * GOLDEN))
//! uniform(v)   = (mix64(key(v) ^ COUNT_SALT) >> 11) * 2^-53
//! ```
//!
//! where `mix64` is the SplitMix64 finalizer. The child count of `v` is the
//! offspring law evaluated by inversion at `uniform(v)`, so it is a pure
//! function of `(seed, path)` and independent of the order in which the tree
//! is explored. Trees are reproducible within this implementation only.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::offspring::OffspringDistribution;

const ROOT_SALT: u64 = 0x243F_6A88_85A3_08D3;
const COUNT_SALT: u64 = 0xD1B5_4A32_D192_ED03;
const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const REPLICATE_SALT: u64 = 0x1319_8A2E_0370_7344;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for replicate `index` of an experiment run under `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    mix64(master ^ mix64(index.wrapping_add(REPLICATE_SALT)))
}

/// Child-index path from the root; indices are 1-based.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize)]
#[serde(transparent)]
pub struct VertexId(Vec<u32>);

impl VertexId {
    pub fn root() -> Self {
        Self(Vec::new())
    }

    pub fn from_path(path: Vec<u32>) -> Self {
        Self(path)
    }

    pub fn path(&self) -> &[u32] {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.len()
    }

    pub fn is_root(&self) -> bool {
        self.0.is_empty()
    }

    pub fn parent(&self) -> Option<Self> {
        if self.0.is_empty() {
            None
        } else {
            Some(Self(self.0[..self.0.len() - 1].to_vec()))
        }
    }

    pub fn child(&self, i: u32) -> Self {
        let mut p = self.0.clone();
        p.push(i);
        Self(p)
    }

    pub fn prefix(&self, len: usize) -> Self {
        Self(self.0[..len.min(self.0.len())].to_vec())
    }
}

impl fmt::Display for VertexId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, "]")
    }
}

/// Resolved vertex handle used by the numerical code: no path, just the key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Node {
    pub key: u64,
    pub depth: u32,
    law: u32,
}

const SPLICED_ROOT: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
enum RootRule {
    Galton,
    /// Root child `i` carries a subtree grown with `laws[order[i-1]]`.
    Spliced(Vec<u32>),
}

/// The pure branching rule of a tree: offspring laws, root rule and seed.
///
/// Cheap to clone and `Sync`; every query is a hash evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Branching {
    laws: Vec<OffspringDistribution>,
    root: RootRule,
    seed: u64,
}

impl Branching {
    pub fn galton_watson(law: OffspringDistribution, seed: u64) -> Self {
        Self {
            laws: vec![law],
            root: RootRule::Galton,
            seed,
        }
    }

    /// Root with one child per entry; child `i` roots an independent tree
    /// grown with `subtrees[i-1]`.
    pub fn spliced(subtrees: Vec<OffspringDistribution>, seed: u64) -> Result<Self> {
        if subtrees.is_empty() {
            return Err(Error::InvalidOffspring("spliced root needs a child".into()));
        }
        let order = (0..subtrees.len() as u32).collect();
        Ok(Self {
            laws: subtrees,
            root: RootRule::Spliced(order),
            seed,
        })
    }

    /// Parses an offspring spec, or `splice:SPEC;SPEC;...` for a spliced root.
    pub fn parse(spec: &str, seed: u64) -> Result<Self> {
        let spec = spec.trim();
        if let Some(body) = spec.strip_prefix("splice:") {
            let laws = body
                .split(';')
                .map(OffspringDistribution::parse)
                .collect::<Result<Vec<_>>>()?;
            Self::spliced(laws, seed)
        } else {
            Ok(Self::galton_watson(OffspringDistribution::parse(spec)?, seed))
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    /// Offspring law of a plain Galton-Watson tree.
    pub fn law(&self) -> Option<&OffspringDistribution> {
        match self.root {
            RootRule::Galton => Some(&self.laws[0]),
            RootRule::Spliced(_) => None,
        }
    }

    /// Smallest mean among the laws in use; transience needs `lambda` below it.
    pub fn mean(&self) -> f64 {
        self.laws
            .iter()
            .map(OffspringDistribution::mean)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn root(&self) -> Node {
        Node {
            key: mix64(self.seed ^ ROOT_SALT),
            depth: 0,
            law: match self.root {
                RootRule::Galton => 0,
                RootRule::Spliced(_) => SPLICED_ROOT,
            },
        }
    }

    #[inline]
    pub fn child_count(&self, n: Node) -> u32 {
        if n.law == SPLICED_ROOT {
            match &self.root {
                RootRule::Spliced(order) => order.len() as u32,
                RootRule::Galton => unreachable!(),
            }
        } else {
            let u = (mix64(n.key ^ COUNT_SALT) >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            self.laws[n.law as usize].sample_from_uniform(u)
        }
    }

    /// Child `i` (1-based) of `n`. The caller guarantees `i <= child_count(n)`.
    #[inline]
    pub fn child(&self, n: Node, i: u32) -> Node {
        let law = if n.law == SPLICED_ROOT {
            match &self.root {
                RootRule::Spliced(order) => order[i as usize - 1],
                RootRule::Galton => unreachable!(),
            }
        } else {
            n.law
        };
        Node {
            key: mix64(n.key.rotate_left(17) ^ (i as u64).wrapping_mul(GOLDEN)),
            depth: n.depth + 1,
            law,
        }
    }

    /// Mean offspring of the law governing the children of `n`'s descendants.
    pub fn subtree_mean(&self, n: Node) -> f64 {
        if n.law == SPLICED_ROOT {
            self.mean()
        } else {
            self.laws[n.law as usize].mean()
        }
    }

    /// When every vertex in the subtree of `n` has the same child count.
    pub fn regular_subtree(&self, n: Node) -> Option<u32> {
        if n.law == SPLICED_ROOT {
            None
        } else {
            self.laws[n.law as usize].degenerate()
        }
    }

    pub fn resolve(&self, v: &VertexId) -> Result<Node> {
        let mut n = self.root();
        for (j, &i) in v.path().iter().enumerate() {
            let k = self.child_count(n);
            if i == 0 || i > k {
                return Err(Error::InvalidVertex {
                    path: v.path().to_vec(),
                    reason: format!("index {i} at position {j} but the prefix has {k} children"),
                });
            }
            n = self.child(n, i);
        }
        Ok(n)
    }
}

/// A Galton-Watson tree expanded on demand, with a memo of every child count
/// queried through its path API.
#[derive(Debug, Clone)]
pub struct LazyTree {
    branching: Branching,
    memo: HashMap<VertexId, u32>,
}

impl LazyTree {
    pub fn new(law: OffspringDistribution, seed: u64) -> Self {
        Self::from_branching(Branching::galton_watson(law, seed))
    }

    pub fn from_branching(branching: Branching) -> Self {
        Self {
            branching,
            memo: HashMap::new(),
        }
    }

    pub fn branching(&self) -> &Branching {
        &self.branching
    }

    pub fn seed(&self) -> u64 {
        self.branching.seed
    }

    pub fn child_count(&mut self, v: &VertexId) -> Result<u32> {
        if let Some(&k) = self.memo.get(v) {
            return Ok(k);
        }
        let n = self.branching.resolve(v)?;
        let k = self.branching.child_count(n);
        self.memo.insert(v.clone(), k);
        Ok(k)
    }

    pub fn memo(&self) -> &HashMap<VertexId, u32> {
        &self.memo
    }

    /// Materializes every vertex of height `<= depth`, failing once more than
    /// `vertex_cap` vertices would be held.
    pub fn truncate(&mut self, depth: usize, vertex_cap: usize) -> Result<FiniteTree> {
        let mut vertices = Vec::new();
        let mut generation_sizes = vec![1usize];
        let mut level: Vec<(VertexId, Node)> = vec![(VertexId::root(), self.branching.root())];
        for h in 0..=depth {
            let mut next = Vec::new();
            for (id, node) in level {
                if vertices.len() >= vertex_cap {
                    return Err(Error::VertexCapExceeded { cap: vertex_cap });
                }
                let k = self.branching.child_count(node);
                self.memo.insert(id.clone(), k);
                if h < depth {
                    for i in 1..=k {
                        next.push((id.child(i), self.branching.child(node, i)));
                    }
                }
                vertices.push(FiniteVertex { path: id, children: k });
            }
            if h < depth {
                generation_sizes.push(next.len());
            }
            level = next;
        }
        Ok(FiniteTree {
            depth,
            vertices,
            generation_sizes,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FiniteVertex {
    pub path: VertexId,
    pub children: u32,
}

/// A tree materialized to a fixed depth. Vertices are stored generation by
/// generation; `children` of depth-`depth` vertices is reported but their
/// children are not part of the tree.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteTree {
    pub depth: usize,
    pub vertices: Vec<FiniteVertex>,
    pub generation_sizes: Vec<usize>,
}

impl FiniteTree {
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn child_counts(&self) -> BTreeMap<&VertexId, u32> {
        self.vertices.iter().map(|v| (&v.path, v.children)).collect()
    }

    /// JSON lines, one `{"path":[...],"children":k}` per vertex, sorted by path.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut sorted: Vec<&FiniteVertex> = self.vertices.iter().collect();
        sorted.sort_by(|a, b| a.path.cmp(&b.path));
        for v in sorted {
            serde_json::to_writer(&mut out, v)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn law(s: &str) -> OffspringDistribution {
        OffspringDistribution::parse(s).unwrap()
    }

    #[test]
    fn child_count_is_pure() {
        let mut a = LazyTree::new(law("pmf:1=0.5,2=0.5"), 7);
        let mut b = LazyTree::new(law("pmf:1=0.5,2=0.5"), 7);
        let v = VertexId::from_path(vec![1]);
        let first = a.child_count(&v).unwrap();
        // query in a different order on the twin tree
        b.truncate(4, 1 << 20).unwrap();
        assert_eq!(b.child_count(&v).unwrap(), first);
        assert_eq!(a.child_count(&v).unwrap(), first);
    }

    #[test]
    fn degenerate_law_gives_constant_counts() {
        let mut t = LazyTree::new(law("pmf:2=1"), 99);
        for path in [vec![], vec![1], vec![2, 1, 2], vec![1, 1, 1, 1, 2]] {
            assert_eq!(t.child_count(&VertexId::from_path(path)).unwrap(), 2);
        }
    }

    #[test]
    fn invalid_vertex_rejected() {
        let mut t = LazyTree::new(law("pmf:2=1"), 1);
        assert!(t.child_count(&VertexId::from_path(vec![3])).is_err());
        assert!(t.child_count(&VertexId::from_path(vec![0])).is_err());
        assert!(t.child_count(&VertexId::from_path(vec![1, 2, 3])).is_err());
    }

    #[test]
    fn root_frequency_of_unary() {
        let d = law("pmf:1=0.5,2=0.5");
        let n = 100_000u64;
        let ones = (0..n)
            .filter(|&s| {
                let b = Branching::galton_watson(d.clone(), s);
                b.child_count(b.root()) == 1
            })
            .count();
        let p = ones as f64 / n as f64;
        assert!((0.495..=0.505).contains(&p), "p1 hat = {p}");
    }

    #[test]
    fn binary_truncation() {
        let mut t = LazyTree::new(law("pmf:2=1"), 0);
        let ft = t.truncate(3, 1000).unwrap();
        assert_eq!(ft.generation_sizes, vec![1, 2, 4, 8]);
        assert_eq!(ft.len(), 15);
        let ft0 = t.truncate(0, 1000).unwrap();
        assert_eq!(ft0.generation_sizes, vec![1]);
        assert_eq!(ft0.len(), 1);
    }

    #[test]
    fn generation_size_recount() {
        let mut t = LazyTree::new(law("pmf:1=0.5,2=0.5"), 2024);
        let ft = t.truncate(5, 1 << 20).unwrap();
        // independent recount: recurse over the memo from the root
        fn count(memo: &HashMap<VertexId, u32>, v: &VertexId, remaining: usize) -> usize {
            if remaining == 0 {
                return 1;
            }
            let k = memo[v];
            (1..=k).map(|i| count(memo, &v.child(i), remaining - 1)).sum()
        }
        assert_eq!(count(t.memo(), &VertexId::root(), 5), ft.generation_sizes[5]);
        for n in 0..5 {
            let stage: usize = ft
                .vertices
                .iter()
                .filter(|v| v.path.height() == n)
                .map(|v| v.children as usize)
                .sum();
            assert_eq!(stage, ft.generation_sizes[n + 1]);
        }
    }

    #[test]
    fn vertex_cap() {
        let mut t = LazyTree::new(law("pmf:2=1"), 0);
        assert!(matches!(
            t.truncate(10, 100),
            Err(Error::VertexCapExceeded { cap: 100 })
        ));
    }

    #[test]
    fn jsonl_dump_is_sorted() {
        let mut t = LazyTree::new(law("pmf:2=1"), 0);
        let ft = t.truncate(2, 100).unwrap();
        let mut buf = Vec::new();
        ft.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], r#"{"path":[],"children":2}"#);
        assert_eq!(lines[1], r#"{"path":[1],"children":2}"#);
        assert_eq!(lines[2], r#"{"path":[1,1],"children":2}"#);
        assert_eq!(lines.len(), 7);
    }

    #[test]
    fn spliced_root() {
        let b = Branching::parse("splice:pmf:2=1;pmf:3=1", 5).unwrap();
        let r = b.root();
        assert_eq!(b.child_count(r), 2);
        assert_eq!(b.child_count(b.child(r, 1)), 2);
        assert_eq!(b.child_count(b.child(r, 2)), 3);
        assert_eq!(b.regular_subtree(b.child(r, 2)), Some(3));
        assert_eq!(b.regular_subtree(r), None);
        assert!((b.mean() - 2.0).abs() < 1e-15);
    }

    proptest::proptest! {
        #[test]
        fn truncation_agrees_with_lazy_queries(seed in 0u64..1_000_000, depth in 0usize..6) {
            let mut lazy = LazyTree::new(law("pmf:1=0.4,2=0.4,3=0.2"), seed);
            let ft = LazyTree::new(law("pmf:1=0.4,2=0.4,3=0.2"), seed)
                .truncate(depth, 1 << 16)
                .unwrap();
            let mut sizes = vec![0usize; depth + 1];
            for v in &ft.vertices {
                sizes[v.path.height()] += 1;
                proptest::prop_assert_eq!(lazy.child_count(&v.path).unwrap(), v.children);
            }
            proptest::prop_assert_eq!(sizes, ft.generation_sizes.clone());
        }

        #[test]
        fn prefixes_nest(path in proptest::collection::vec(1u32..4, 0..12), cut in 0usize..12) {
            let v = VertexId::from_path(path.clone());
            let cut = cut.min(path.len());
            let p = v.prefix(cut);
            proptest::prop_assert_eq!(p.height(), cut);
            proptest::prop_assert_eq!(p.path(), &path[..cut]);
            if let Some(parent) = v.parent() {
                proptest::prop_assert_eq!(parent.child(*path.last().unwrap()), v);
            }
        }
    }
}
