//! Hash-consed unlabeled rooted trees.
//!
//! A tree is a multiset of child subtrees. Every distinct multiset is interned
//! exactly once in a process-wide pool, so two [`Tree`] handles are equal iff
//! they point at the same node, and memo tables elsewhere in the crate can key
//! on [`Tree::id`].
//!
//! Trees are totally ordered by size first, then by their sorted child
//! sequences compared element by element. The canonical code is the
//! balanced-parentheses string obtained by writing `(`, the codes of the
//! children in ascending order, and `)`. The trivial tree is `()`. Codes are
//! built on first use only.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;
use std::sync::{LazyLock, OnceLock, RwLock};

use crate::error::{Error, Result};

struct Node {
    id: u32,
    children: Box<[(Tree, usize)]>,
    size: usize,
    depth: usize,
    degree: usize,
    code: OnceLock<Box<str>>,
}

/// Handle to an interned tree. Cheap to copy; immutable.
#[derive(Clone, Copy)]
pub struct Tree(&'static Node);

type ChildKey = Box<[(u32, usize)]>;

struct Pool {
    by_children: HashMap<ChildKey, Tree>,
    next_id: u32,
}

static POOL: LazyLock<RwLock<Pool>> = LazyLock::new(|| {
    RwLock::new(Pool {
        by_children: HashMap::new(),
        next_id: 0,
    })
});

static TRIVIAL: LazyLock<Tree> = LazyLock::new(|| intern_canonical(Vec::new()));

fn intern_canonical(children: Vec<(Tree, usize)>) -> Tree {
    let key: ChildKey = children.iter().map(|(c, m)| (c.id(), *m)).collect();
    if let Some(t) = POOL.read().unwrap().by_children.get(&key) {
        return *t;
    }
    let mut pool = POOL.write().unwrap();
    if let Some(t) = pool.by_children.get(&key) {
        return *t;
    }
    let size = 1 + children.iter().map(|(c, m)| m * c.size()).sum::<usize>();
    let depth = children
        .iter()
        .map(|(c, _)| c.depth() + 1)
        .max()
        .unwrap_or(0);
    let degree = children.iter().map(|(_, m)| m).sum();
    let node = Box::leak(Box::new(Node {
        id: pool.next_id,
        children: children.into_boxed_slice(),
        size,
        depth,
        degree,
        code: OnceLock::new(),
    }));
    pool.next_id += 1;
    let tree = Tree(node);
    pool.by_children.insert(key, tree);
    tree
}

impl Tree {
    /// The tree reduced to its root.
    pub fn trivial() -> Tree {
        *TRIVIAL
    }

    /// Interns the tree whose root children are the given subtrees with
    /// multiplicities. Order and repeated entries do not matter.
    pub fn intern<I>(children: I) -> Result<Tree>
    where
        I: IntoIterator<Item = (Tree, usize)>,
    {
        let mut merged: HashMap<u32, (Tree, usize)> = HashMap::new();
        for (child, mult) in children {
            if mult == 0 {
                return Err(Error::invalid(format!(
                    "multiplicity of child {} must be positive",
                    child.code()
                )));
            }
            merged.entry(child.id()).or_insert((child, 0)).1 += mult;
        }
        let mut list: Vec<(Tree, usize)> = merged.into_values().collect();
        list.sort_by_key(|a| a.0);
        Ok(intern_canonical(list))
    }

    /// Interns the tree with the given list of children (repeats allowed).
    pub fn from_children<I: IntoIterator<Item = Tree>>(children: I) -> Tree {
        Tree::intern(children.into_iter().map(|c| (c, 1))).expect("unit multiplicities")
    }

    /// Root with `k` leaf children.
    pub fn star(k: usize) -> Tree {
        if k == 0 {
            return Tree::trivial();
        }
        intern_canonical(vec![(Tree::trivial(), k)])
    }

    /// Path with `n >= 1` nodes, rooted at an endpoint.
    pub fn path(n: usize) -> Tree {
        assert!(n >= 1, "a path has at least one node");
        let mut t = Tree::trivial();
        for _ in 1..n {
            t = intern_canonical(vec![(t, 1)]);
        }
        t
    }

    /// Parses a balanced-parentheses code. Children may appear in any order.
    pub fn parse(code: &str) -> Result<Tree> {
        let bytes = code.as_bytes();
        if bytes.is_empty() {
            return Err(Error::Parse {
                offset: 0,
                message: "empty input".into(),
            });
        }
        let mut stack: Vec<Vec<Tree>> = Vec::new();
        let mut done: Option<Tree> = None;
        for (i, &b) in bytes.iter().enumerate() {
            if done.is_some() {
                return Err(Error::Parse {
                    offset: i,
                    message: "trailing characters after the root".into(),
                });
            }
            match b {
                b'(' => stack.push(Vec::new()),
                b')' => {
                    let children = stack.pop().ok_or_else(|| Error::Parse {
                        offset: i,
                        message: "unmatched ')'".into(),
                    })?;
                    let t = Tree::from_children(children);
                    match stack.last_mut() {
                        Some(parent) => parent.push(t),
                        None => done = Some(t),
                    }
                }
                other => {
                    return Err(Error::Parse {
                        offset: i,
                        message: format!("unexpected character {:?}", other as char),
                    })
                }
            }
        }
        done.ok_or_else(|| Error::Parse {
            offset: bytes.len(),
            message: "unbalanced parentheses".into(),
        })
    }

    pub fn id(self) -> u32 {
        self.0.id
    }

    /// Number of nodes.
    pub fn size(self) -> usize {
        self.0.size
    }

    pub fn depth(self) -> usize {
        self.0.depth
    }

    /// Number of children of the root, counted with multiplicity.
    pub fn degree(self) -> usize {
        self.0.degree
    }

    pub fn code(self) -> &'static str {
        self.0.code.get_or_init(|| {
            let mut code = String::with_capacity(2 * self.size());
            code.push('(');
            for &(c, m) in self.children() {
                for _ in 0..m {
                    code.push_str(c.code());
                }
            }
            code.push(')');
            code.into_boxed_str()
        })
    }

    /// Child subtrees with repeats, in canonical order.
    pub fn child_sequence(self) -> impl Iterator<Item = Tree> {
        self.children()
            .iter()
            .flat_map(|&(c, m)| std::iter::repeat_n(c, m))
    }

    /// Distinct root subtrees with their multiplicities, in canonical order.
    pub fn children(self) -> &'static [(Tree, usize)] {
        &self.0.children
    }

    pub fn is_trivial(self) -> bool {
        self.0.children.is_empty()
    }

    /// Multiplicity of `child` among the root's children.
    pub fn multiplicity(self, child: Tree) -> usize {
        self.children()
            .iter()
            .find(|(c, _)| *c == child)
            .map_or(0, |(_, m)| *m)
    }
}

/// Number of trees interned so far.
pub fn pool_len() -> usize {
    POOL.read().unwrap().next_id as usize
}

impl PartialEq for Tree {
    fn eq(&self, other: &Self) -> bool {
        self.0.id == other.0.id
    }
}

impl Eq for Tree {}

impl Hash for Tree {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.0.id.hash(state);
    }
}

impl Ord for Tree {
    fn cmp(&self, other: &Self) -> Ordering {
        if self == other {
            return Ordering::Equal;
        }
        self.size().cmp(&other.size()).then_with(|| {
            // Equal sizes: the first differing child decides; one sequence
            // cannot be a proper prefix of the other.
            self.child_sequence()
                .zip(other.child_sequence())
                .map(|(a, b)| a.cmp(&b))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
    }
}

impl PartialOrd for Tree {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Tree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl fmt::Debug for Tree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tree#{}{}", self.id(), self.code())
    }
}

impl FromStr for Tree {
    type Err = Error;

    fn from_str(s: &str) -> Result<Tree> {
        Tree::parse(s)
    }
}

/// All trees with at most `max_size` nodes and depth at most `max_depth`,
/// in ascending order.
pub fn enumerate(max_size: usize, max_depth: usize) -> impl Iterator<Item = Tree> {
    enumerate_vec(max_size, max_depth).into_iter()
}

pub(crate) fn enumerate_vec(max_size: usize, max_depth: usize) -> Vec<Tree> {
    if max_size == 0 {
        return Vec::new();
    }
    let mut level = vec![Tree::trivial()];
    // Trees of size n have depth at most n - 1, so deeper levels add nothing.
    let useful_depth = max_depth.min(max_size - 1);
    for _ in 0..useful_depth {
        let candidates: Vec<Tree> = level
            .iter()
            .copied()
            .filter(|t| t.size() < max_size)
            .collect();
        let mut next = Vec::new();
        let mut acc = Vec::new();
        multisets(&candidates, 0, max_size - 1, &mut acc, &mut next);
        next.sort();
        level = next;
    }
    level
}

fn multisets(
    candidates: &[Tree],
    i: usize,
    remaining: usize,
    acc: &mut Vec<(Tree, usize)>,
    out: &mut Vec<Tree>,
) {
    if i == candidates.len() || candidates[i].size() > remaining {
        out.push(intern_canonical_sorted(acc));
        return;
    }
    multisets(candidates, i + 1, remaining, acc, out);
    let size = candidates[i].size();
    for k in 1..=remaining / size {
        acc.push((candidates[i], k));
        multisets(candidates, i + 1, remaining - k * size, acc, out);
        acc.pop();
    }
}

// `acc` holds distinct children in ascending canonical order already.
fn intern_canonical_sorted(acc: &[(Tree, usize)]) -> Tree {
    intern_canonical(acc.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn trivial_tree() {
        let t = Tree::intern([]).unwrap();
        assert_eq!(t, Tree::trivial());
        assert_eq!((t.size(), t.depth(), t.code()), (1, 0, "()"));
    }

    #[test]
    fn star_and_mixed() {
        let leaf = Tree::trivial();
        let s3 = Tree::intern([(leaf, 3)]).unwrap();
        assert_eq!((s3.size(), s3.depth(), s3.code()), (4, 1, "(()()())"));
        assert_eq!(s3, Tree::star(3));

        let chain2 = Tree::intern([(leaf, 1)]).unwrap();
        let t = Tree::intern([(chain2, 1), (leaf, 1)]).unwrap();
        assert_eq!((t.size(), t.depth(), t.code()), (4, 2, "(()(()))"));
    }

    #[test]
    fn duplicates_merge() {
        let leaf = Tree::trivial();
        let a = Tree::intern([(leaf, 1), (leaf, 2)]).unwrap();
        assert_eq!(a, Tree::star(3));
        assert_eq!(a.children().len(), 1);
    }

    #[test]
    fn zero_multiplicity_rejected() {
        let err = Tree::intern([(Tree::trivial(), 0)]).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn parse_canonicalizes() {
        let a = Tree::parse("((())())").unwrap();
        let b = Tree::parse("(()(()))").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.code(), "(()(()))");
        assert_eq!(Tree::parse("()").unwrap(), Tree::trivial());
    }

    #[test]
    fn parse_errors() {
        assert_eq!(
            Tree::parse("(()").unwrap_err(),
            Error::Parse {
                offset: 3,
                message: "unbalanced parentheses".into()
            }
        );
        assert!(matches!(
            Tree::parse("").unwrap_err(),
            Error::Parse { offset: 0, .. }
        ));
        assert!(matches!(
            Tree::parse("())").unwrap_err(),
            Error::Parse { offset: 2, .. }
        ));
        assert!(matches!(
            Tree::parse("()()").unwrap_err(),
            Error::Parse { offset: 2, .. }
        ));
        assert!(matches!(
            Tree::parse("(x)").unwrap_err(),
            Error::Parse { offset: 1, .. }
        ));
    }

    #[test]
    fn enumerate_small() {
        assert_eq!(enumerate(4, 10).count(), 8);
        let stars: Vec<_> = enumerate(4, 1).collect();
        assert_eq!(stars, (0..4).map(Tree::star).collect::<Vec<_>>());
        assert_eq!(enumerate(1, 0).collect::<Vec<_>>(), vec![Tree::trivial()]);
        assert_eq!(enumerate(5, 0).count(), 1);
    }

    #[test]
    fn enumerate_is_sorted() {
        let all: Vec<_> = enumerate(8, 8).collect();
        assert!(all.windows(2).all(|w| w[0] < w[1]));
        assert!(all.iter().all(|t| t.size() <= 8));
    }

    #[test]
    fn path_shape() {
        let p = Tree::path(3);
        assert_eq!((p.size(), p.depth(), p.code()), (3, 2, "((()))"));
        assert_eq!(p.degree(), 1);
    }

    #[test]
    fn enumerate_round_trips_and_bounds() {
        let all: Vec<_> = enumerate(9, 9).collect();
        let codes: std::collections::HashSet<_> = all.iter().map(|t| t.code()).collect();
        assert_eq!(codes.len(), all.len());
        for &t in &all {
            assert_eq!(Tree::parse(t.code()).unwrap(), t);
            assert!(t.depth() < t.size());
            let sum: usize = t.children().iter().map(|(c, m)| m * c.size()).sum();
            assert_eq!(t.size(), 1 + sum);
            assert!(t.children().windows(2).all(|w| w[0].0 < w[1].0));
        }
    }

    fn arb_tree() -> impl Strategy<Value = Tree> {
        let leaf = Just(Tree::trivial());
        leaf.prop_recursive(4, 40, 4, |inner| {
            proptest::collection::vec(inner, 0..4).prop_map(Tree::from_children)
        })
    }

    proptest! {
        #[test]
        fn parse_inverts_code(t in arb_tree()) {
            prop_assert_eq!(Tree::parse(t.code()).unwrap(), t);
        }

        #[test]
        fn child_order_is_irrelevant(mut kids in proptest::collection::vec(arb_tree(), 0..5)) {
            let a = Tree::from_children(kids.clone());
            kids.reverse();
            prop_assert_eq!(Tree::from_children(kids), a);
        }

        #[test]
        fn order_is_total(a in arb_tree(), b in arb_tree()) {
            prop_assert_eq!(a.cmp(&b) == Ordering::Equal, a == b);
            prop_assert_eq!(a.cmp(&b), b.cmp(&a).reverse());
        }
    }
}
