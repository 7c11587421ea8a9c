//! Canonical tree partitions of a polygon, charged M-graphs, and the tree
//! representation of primitive loops.
//!
//! Leaves a_0..a_{n−1} run counterclockwise. Region r_k borders the side
//! (a_{k−1}, a_k), so σ_k is the charge of r_k. Positions are 0-based.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::detapprox::{entrywise_theta, m_hat, m_sigma_matrix, theta_propagator, FlowState};
use crate::error::{Error, Result};
use crate::{format_signs, CMat, Sign, C64};

pub const MIN_LEAVES: usize = 3;
/// Largest polygon `enumerate_tsp` accepts.
pub const MAX_ENUM: usize = 7;
/// Largest loop length the evaluator accepts.
pub const MAX_EVAL: usize = 6;
/// Site-count guard for both evaluation modes (each loop factor is an N×N product).
pub const MAX_SITES: usize = 2048;

const ZERO: C64 = C64::new(0.0, 0.0);

/// A planar tree whose leaves are the polygon vertices in counterclockwise order
/// and whose internal vertices have degree ≥ 3.
///
/// Stored canonically: vertices 0..n are the leaves, n is the root (the internal
/// vertex adjacent to a_0), further internal vertices follow in preorder.
/// Each internal neighbour list runs counterclockwise and starts at the parent
/// (at a_0 for the root).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreePartition {
    n: usize,
    adj: Vec<Vec<usize>>,
    /// arcs[v][j]: leaves behind neighbour j of v, as a bitmask.
    arcs: Vec<Vec<u64>>,
    key: String,
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::Input(format!("malformed tree: {}", msg.into()))
}

/// First leaf of a cyclic interval of leaves, or None if `m` is not one.
fn interval_start(m: u64, n: usize) -> Option<usize> {
    let full = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
    if m == 0 || m == full || m & !full != 0 {
        return None;
    }
    let mut start = None;
    for i in 0..n {
        let prev = (i + n - 1) % n;
        if m >> i & 1 == 1 && m >> prev & 1 == 0 {
            if start.is_some() {
                return None;
            }
            start = Some(i);
        }
    }
    start
}

impl TreePartition {
    /// The tree with one internal vertex joined to every leaf.
    pub fn star(n: usize) -> Result<Self> {
        if n < MIN_LEAVES {
            return Err(Error::Input(format!("need at least {MIN_LEAVES} leaves, got {n}")));
        }
        let mut adj = vec![vec![n]; n];
        adj.push((0..n).collect());
        Self::from_adjacency(n, adj)
    }

    /// Validate an adjacency list (any vertex numbering with leaves first, any
    /// neighbour order) and bring it to canonical form.
    pub fn from_adjacency(n: usize, adj: Vec<Vec<usize>>) -> Result<Self> {
        if !(MIN_LEAVES..=63).contains(&n) {
            return Err(malformed(format!("{n} leaves")));
        }
        let nv = adj.len();
        if nv <= n {
            return Err(malformed("no internal vertex"));
        }
        let mut degree_sum = 0;
        for (a, nb) in adj.iter().enumerate() {
            let set: BTreeSet<usize> = nb.iter().copied().collect();
            if set.len() != nb.len() {
                return Err(malformed(format!("repeated neighbour at {a}")));
            }
            for &b in nb {
                if b >= nv || b == a || !adj[b].contains(&a) {
                    return Err(malformed(format!("bad edge ({a}, {b})")));
                }
            }
            if a < n && nb.len() != 1 {
                return Err(malformed(format!("leaf {a} has degree {}", nb.len())));
            }
            if a >= n && nb.len() < 3 {
                return Err(malformed(format!("internal vertex {a} has degree {}", nb.len())));
            }
            degree_sum += nb.len();
        }
        if degree_sum != 2 * (nv - 1) {
            return Err(malformed("edge count does not match a tree"));
        }
        let mut seen = vec![false; nv];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(malformed("not connected"));
        }
        if adj[0][0] < n {
            return Err(malformed("two leaves joined directly"));
        }

        let beyond = |v: usize, w: usize| -> u64 {
            let mut mask = 0u64;
            let mut stack = vec![(w, v)];
            while let Some((x, from)) = stack.pop() {
                if x < n {
                    mask |= 1 << x;
                }
                for &y in &adj[x] {
                    if y != from {
                        stack.push((y, x));
                    }
                }
            }
            mask
        };

        // Counterclockwise order around each internal vertex follows the leaf arcs.
        let mut sorted = adj.clone();
        for (v, nbrs) in sorted.iter_mut().enumerate().skip(n) {
            let mut keyed = Vec::with_capacity(nbrs.len());
            for &w in nbrs.iter() {
                let s = interval_start(beyond(v, w), n)
                    .ok_or_else(|| malformed(format!("subtree behind ({v}, {w}) is not a leaf arc")))?;
                keyed.push((s, w));
            }
            keyed.sort_unstable();
            *nbrs = keyed.into_iter().map(|(_, w)| w).collect();
        }

        // Preorder relabelling from the root.
        let root = adj[0][0];
        let mut new_id = vec![usize::MAX; nv];
        (0..n).for_each(|k| new_id[k] = k);
        let mut order = Vec::new();
        let mut rotated = vec![Vec::new(); nv];
        let mut stack = vec![(root, 0usize)];
        while let Some((v, parent)) = stack.pop() {
            new_id[v] = n + order.len();
            order.push(v);
            let nb = &sorted[v];
            let p = nb.iter().position(|&w| w == parent).expect("parent is a neighbour");
            let rot: Vec<usize> = nb[p..].iter().chain(&nb[..p]).copied().collect();
            for &w in rot[1..].iter().rev() {
                if w >= n {
                    stack.push((w, v));
                }
            }
            rotated[v] = rot;
        }
        let mut new_adj = vec![Vec::new(); nv];
        for k in 0..n {
            new_adj[k] = vec![new_id[adj[k][0]]];
        }
        for &v in &order {
            new_adj[new_id[v]] = rotated[v].iter().map(|&w| new_id[w]).collect();
        }
        let mut arcs = vec![Vec::new(); nv];
        for (v, nb) in new_adj.iter().enumerate() {
            arcs[v] = nb
                .iter()
                .map(|&w| {
                    let mut mask = 0u64;
                    let mut stack = vec![(w, v)];
                    while let Some((x, from)) = stack.pop() {
                        if x < n {
                            mask |= 1 << x;
                        }
                        for &y in &new_adj[x] {
                            if y != from {
                                stack.push((y, x));
                            }
                        }
                    }
                    mask
                })
                .collect();
        }
        let mut tree = TreePartition { n, adj: new_adj, arcs, key: String::new() };
        tree.key = tree.subtree_key(n, true);
        Ok(tree)
    }

    fn subtree_key(&self, v: usize, is_root: bool) -> String {
        if v < self.n {
            return v.to_string();
        }
        let skip = usize::from(!is_root);
        let parts: Vec<String> = self.adj[v][skip..].iter().map(|&w| self.subtree_key(w, false)).collect();
        format!("({})", parts.join(","))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_vertices(&self) -> usize {
        self.adj.len()
    }

    pub fn num_internal(&self) -> usize {
        self.adj.len() - self.n
    }

    pub fn root(&self) -> usize {
        self.n
    }

    pub fn is_leaf(&self, v: usize) -> bool {
        v < self.n
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adj[v]
    }

    /// Nested-tuple serialization of the rooted planar tree; equal keys mean
    /// isomorphic partitions.
    pub fn key(&self) -> &str {
        &self.key
    }

    /// Leaves behind neighbour j of v.
    pub fn arc(&self, v: usize, j: usize) -> u64 {
        self.arcs[v][j]
    }

    /// First leaf behind neighbour j of v; the region just before it is the
    /// sector of v between neighbours j−1 and j.
    pub fn arc_start(&self, v: usize, j: usize) -> usize {
        interval_start(self.arcs[v][j], self.n).expect("canonical trees have interval arcs")
    }

    /// Region pairs {k, l} (k < l) shared by each internal edge.
    pub fn diagonals(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for v in self.n..self.adj.len() {
            for (j, &w) in self.adj[v].iter().enumerate() {
                if w > v {
                    let m = self.arcs[v][j];
                    let full = (1u64 << self.n) - 1;
                    let a = interval_start(m, self.n).expect("interval");
                    let b = interval_start(full & !m, self.n).expect("interval");
                    out.push((a.min(b), a.max(b)));
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Internal vertex degrees in preorder.
    pub fn degrees(&self) -> Vec<usize> {
        self.adj[self.n..].iter().map(Vec::len).collect()
    }

    fn path(&self, from: usize, to: usize) -> Vec<usize> {
        let mut prev = vec![usize::MAX; self.adj.len()];
        let mut q = VecDeque::from([from]);
        prev[from] = from;
        while let Some(v) = q.pop_front() {
            if v == to {
                break;
            }
            for &w in &self.adj[v] {
                if prev[w] == usize::MAX {
                    prev[w] = v;
                    q.push_back(w);
                }
            }
        }
        let mut p = vec![to];
        while *p.last().unwrap() != from {
            p.push(prev[*p.last().unwrap()]);
        }
        p.reverse();
        p
    }

    /// Tree path bounding region r_k, from a_{k−1} to a_k.
    pub fn canonical_path(&self, k: usize) -> Vec<usize> {
        let k = k % self.n;
        self.path((k + self.n - 1) % self.n, k)
    }

    /// Trees on n+1 leaves obtained by splitting r_0 with a new leaf a_n placed
    /// between a_{n−1} and a_0: one per edge and one per internal vertex of the
    /// path bounding r_0.
    pub fn slices(&self) -> Vec<TreePartition> {
        let n = self.n;
        let path = self.canonical_path(0);
        let shift = |v: usize| if v < n { v } else { v + 1 };
        let base: Vec<Vec<usize>> = {
            let mut b = vec![Vec::new(); self.adj.len() + 1];
            for (v, nb) in self.adj.iter().enumerate() {
                b[shift(v)] = nb.iter().map(|&w| shift(w)).collect();
            }
            b
        };
        let mut out = Vec::new();
        for e in path.windows(2) {
            let (u, w) = (shift(e[0]), shift(e[1]));
            let mut adj = base.clone();
            let b = adj.len();
            adj[u].retain(|&x| x != w);
            adj[w].retain(|&x| x != u);
            adj[u].push(b);
            adj[w].push(b);
            adj[n] = vec![b];
            adj.push(vec![u, w, n]);
            out.push(TreePartition::from_adjacency(n + 1, adj).expect("edge slice is a valid tree"));
        }
        for &v in &path[1..path.len() - 1] {
            let mut adj = base.clone();
            let v = shift(v);
            adj[v].push(n);
            adj[n] = vec![v];
            out.push(TreePartition::from_adjacency(n + 1, adj).expect("vertex slice is a valid tree"));
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "n": self.n,
            "key": self.key,
            "adjacency": self.adj,
            "diagonals": self.diagonals(),
        })
    }
}

#[derive(Clone, Debug)]
enum Shape {
    Leaf(usize),
    Node(Vec<Shape>),
}

/// Ways to cut [lo, hi] into at least two consecutive nonempty arcs.
fn compositions(lo: usize, hi: usize) -> Vec<Vec<(usize, usize)>> {
    let gaps = hi - lo;
    let mut out = Vec::new();
    for cuts in 1u32..(1 << gaps) {
        let mut parts = Vec::new();
        let mut start = lo;
        for g in 0..gaps {
            if cuts >> g & 1 == 1 {
                parts.push((start, lo + g));
                start = lo + g + 1;
            }
        }
        parts.push((start, hi));
        out.push(parts);
    }
    out
}

fn shapes(lo: usize, hi: usize) -> Vec<Shape> {
    if lo == hi {
        return vec![Shape::Leaf(lo)];
    }
    let mut out = Vec::new();
    for parts in compositions(lo, hi) {
        let mut acc: Vec<Vec<Shape>> = vec![Vec::new()];
        for &(a, b) in &parts {
            let opts = shapes(a, b);
            acc = acc
                .into_iter()
                .flat_map(|prefix| {
                    opts.iter().map(move |o| {
                        let mut p = prefix.clone();
                        p.push(o.clone());
                        p
                    })
                })
                .collect();
        }
        out.extend(acc.into_iter().map(Shape::Node));
    }
    out
}

fn attach(shape: &Shape, parent: usize, adj: &mut Vec<Vec<usize>>) {
    match shape {
        Shape::Leaf(k) => {
            adj[*k] = vec![parent];
            adj[parent].push(*k);
        }
        Shape::Node(children) => {
            let id = adj.len();
            adj.push(vec![parent]);
            adj[parent].push(id);
            for c in children {
                attach(c, id, adj);
            }
        }
    }
}

/// Every canonical tree partition of the n-gon, sorted by key.
///
/// The root is the internal vertex next to a_0; its remaining neighbours split
/// a_1..a_{n−1} into ≥ 2 consecutive arcs, and each arc of length ≥ 2 recurses.
pub fn enumerate_tsp(n: usize) -> Result<Vec<TreePartition>> {
    if !(MIN_LEAVES..=MAX_ENUM).contains(&n) {
        return Err(Error::Input(format!("polygon size {n} outside {MIN_LEAVES}..={MAX_ENUM}")));
    }
    let mut out = Vec::new();
    for parts in compositions(1, n - 1) {
        let mut acc: Vec<Vec<Shape>> = vec![Vec::new()];
        for &(a, b) in &parts {
            let opts = shapes(a, b);
            acc = acc
                .into_iter()
                .flat_map(|prefix| {
                    opts.iter().map(move |o| {
                        let mut p = prefix.clone();
                        p.push(o.clone());
                        p
                    })
                })
                .collect();
        }
        for children in acc {
            let mut adj = vec![Vec::new(); n + 1];
            adj[0] = vec![n];
            adj[n].push(0);
            for c in &children {
                attach(c, n, &mut adj);
            }
            out.push(TreePartition::from_adjacency(n, adj)?);
        }
    }
    out.sort_by(|a, b| a.key.cmp(&b.key));
    Ok(out)
}

/// Regions of the long internal edges: diagonals {k, l} with σ_k ≠ σ_l.
pub fn long_edges(tree: &TreePartition, sigma: &[Sign]) -> Vec<(usize, usize)> {
    tree.diagonals().into_iter().filter(|&(k, l)| sigma[k] != sigma[l]).collect()
}

/// One vertex of an M-loop: the corner of internal vertex `vertex` facing
/// neighbour `slot`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corner {
    pub vertex: usize,
    pub slot: usize,
    /// Tree vertex across the unlabeled edge.
    pub attached: usize,
    pub region: usize,
    pub charge: Sign,
    /// Region holding the M-edge that ends at this corner.
    pub in_region: usize,
    pub in_charge: Sign,
}

/// A tree partition with each internal vertex replaced by a counterclockwise
/// M-loop, and charges on every vertex and M-edge.
#[derive(Clone, Debug)]
pub struct MGraph {
    pub tree: TreePartition,
    pub sigma: Vec<Sign>,
    /// corners[i] is the loop of internal vertex n + i, in neighbour order.
    pub corners: Vec<Vec<Corner>>,
}

pub fn build_m_graph(tree: &TreePartition, sigma: &[Sign]) -> Result<MGraph> {
    let n = tree.n();
    if sigma.len() != n {
        return Err(Error::Input(format!("{} charges for a {n}-gon", sigma.len())));
    }
    let mut corners = Vec::with_capacity(tree.num_internal());
    for v in n..tree.num_vertices() {
        let d = tree.neighbors(v).len();
        let loop_: Vec<Corner> = (0..d)
            .map(|j| {
                let region = tree.arc_start(v, (j + 1) % d);
                let in_region = tree.arc_start(v, j);
                Corner {
                    vertex: v - n,
                    slot: j,
                    attached: tree.neighbors(v)[j],
                    region,
                    charge: sigma[region],
                    in_region,
                    in_charge: sigma[in_region],
                }
            })
            .collect();
        corners.push(loop_);
    }
    Ok(MGraph { tree: tree.clone(), sigma: sigma.to_vec(), corners })
}

impl MGraph {
    pub fn n(&self) -> usize {
        self.tree.n()
    }

    pub fn leaf_charge(&self, k: usize) -> Sign {
        self.sigma[k]
    }

    /// Corner of tree vertex v (internal) that faces tree vertex w.
    pub fn corner_facing(&self, v: usize, w: usize) -> Option<&Corner> {
        let n = self.n();
        if v < n {
            return None;
        }
        self.corners.get(v - n)?.iter().find(|c| c.attached == w)
    }

    /// Corner joined to leaf k by its external edge.
    pub fn leaf_corner(&self, k: usize) -> &Corner {
        let v = self.tree.neighbors(k)[0];
        self.corner_facing(v, k).expect("leaf has a corner")
    }

    pub fn corner_label(c: &Corner) -> String {
        format!("b{}.{}", c.vertex, c.slot)
    }

    fn endpoint_label(&self, from: usize, to: usize) -> String {
        if from < self.n() {
            format!("a{from}")
        } else {
            Self::corner_label(self.corner_facing(from, to).expect("adjacent"))
        }
    }

    /// Unlabeled edges as label pairs, leaves first, each internal edge once.
    pub fn unlabeled_edges(&self) -> Vec<(String, String)> {
        let n = self.n();
        let mut out: Vec<(String, String)> = (0..n)
            .map(|k| (format!("a{k}"), Self::corner_label(self.leaf_corner(k))))
            .collect();
        for v in n..self.tree.num_vertices() {
            for &w in self.tree.neighbors(v) {
                if w > v {
                    out.push((self.endpoint_label(v, w), self.endpoint_label(w, v)));
                }
            }
        }
        out
    }

    /// Directed M-edges (from, to, charge, region).
    pub fn m_edges(&self) -> Vec<(String, String, Sign, usize)> {
        let mut out = Vec::new();
        for lp in &self.corners {
            let d = lp.len();
            for j in 0..d {
                let prev = &lp[(j + d - 1) % d];
                let c = &lp[j];
                out.push((Self::corner_label(prev), Self::corner_label(c), c.in_charge, c.in_region));
            }
        }
        out
    }

    /// Vertex degrees counting boundary, M- and unlabeled edges.
    pub fn degrees(&self) -> BTreeMap<String, usize> {
        let mut deg = BTreeMap::new();
        for k in 0..self.n() {
            *deg.entry(format!("a{k}")).or_insert(0) += 2;
        }
        for (a, b, _, _) in self.m_edges() {
            *deg.entry(a).or_insert(0) += 1;
            *deg.entry(b).or_insert(0) += 1;
        }
        for (a, b) in self.unlabeled_edges() {
            *deg.entry(a).or_insert(0) += 1;
            *deg.entry(b).or_insert(0) += 1;
        }
        deg
    }

    pub fn to_json(&self) -> serde_json::Value {
        let n = self.n();
        let leaves: Vec<_> = (0..n).map(|k| json!({"id": format!("a{k}"), "region": k, "charge": self.sigma[k]})).collect();
        let corners: Vec<_> = self
            .corners
            .iter()
            .flatten()
            .map(|c| {
                json!({
                    "id": Self::corner_label(c),
                    "attached": self.endpoint_label(self.tree.neighbors(c.vertex + n)[c.slot], c.vertex + n),
                    "region": c.region,
                    "charge": c.charge,
                })
            })
            .collect();
        let m_edges: Vec<_> = self
            .m_edges()
            .into_iter()
            .map(|(a, b, s, r)| json!({"from": a, "to": b, "charge": s, "region": r}))
            .collect();
        let unlabeled: Vec<_> = self.unlabeled_edges().into_iter().map(|(a, b)| json!([a, b])).collect();
        json!({
            "key": self.tree.key(),
            "sigma": format_signs(&self.sigma),
            "leaves": leaves,
            "corners": corners,
            "m_edges": m_edges,
            "unlabeled_edges": unlabeled,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Site-level Θ̂_t and S_tΘ̂_t edges; returns K̂.
    Entrywise,
    /// Block-level Θ_t and S^{L→n}_tΘ_t edges with W^{(δ−1)d}-scaled M-loops.
    BlockReduced,
}

fn pair_slot(s1: Sign, s2: Sign) -> usize {
    (s1.bit() << 1) | s2.bit()
}

/// Edge matrices for one flow time, shared across graphs.
pub struct TreeEvaluator {
    flow: FlowState,
    t: f64,
    mode: EvalMode,
    external: Vec<CMat>,
    internal: Vec<CMat>,
    two: Vec<CMat>,
}

impl TreeEvaluator {
    pub fn new(flow: &FlowState, t: f64, mode: EvalMode) -> Result<Self> {
        let lat = &flow.lattice;
        if lat.num_sites() > MAX_SITES {
            return Err(Error::SizeGuard(format!("{} sites exceed {MAX_SITES}", lat.num_sites())));
        }
        let mut external = Vec::with_capacity(4);
        let mut internal = Vec::with_capacity(4);
        let mut two = Vec::with_capacity(4);
        let dense = flow.var.dense();
        let s_t = flow.s_ln().map(|v| C64::from(v * t));
        for p in 0..4 {
            let (s1, s2) = (Sign::from_bit(p >> 1), Sign::from_bit(p));
            match mode {
                EvalMode::Entrywise => {
                    let (th, sth) = entrywise_theta(flow, t, s1, s2, &dense)?;
                    external.push(th);
                    internal.push(sth);
                    two.push(m_hat(flow, s1, s2));
                }
                EvalMode::BlockReduced => {
                    let th = theta_propagator(flow, t, s1, s2)?;
                    internal.push(&s_t * &th);
                    external.push(th);
                    two.push(m_sigma_matrix(flow, s1, s2));
                }
            }
        }
        Ok(TreeEvaluator { flow: flow.clone(), t, mode, external, internal, two })
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn mode(&self) -> EvalMode {
        self.mode
    }

    pub fn flow(&self) -> &FlowState {
        &self.flow
    }

    /// Index range of leaf weights: N sites or n^d blocks.
    pub fn dim(&self) -> usize {
        match self.mode {
            EvalMode::Entrywise => self.flow.lattice.num_sites(),
            EvalMode::BlockReduced => self.flow.lattice.num_blocks(),
        }
    }

    /// η_t = (1 − t) Im m.
    pub fn eta(&self) -> f64 {
        (1.0 - self.t) * self.flow.m.im
    }

    pub fn external(&self, s1: Sign, s2: Sign) -> &CMat {
        &self.external[pair_slot(s1, s2)]
    }

    pub fn internal(&self, s1: Sign, s2: Sign) -> &CMat {
        &self.internal[pair_slot(s1, s2)]
    }

    /// Delta weight at index i.
    pub fn delta(&self, i: usize) -> Vec<C64> {
        let mut v = vec![ZERO; self.dim()];
        v[i] = C64::new(1.0, 0.0);
        v
    }

    pub fn ones(&self) -> Vec<C64> {
        vec![C64::new(1.0, 0.0); self.dim()]
    }

    fn lift(&self, w: &[C64]) -> Vec<C64> {
        match self.mode {
            EvalMode::Entrywise => w.to_vec(),
            EvalMode::BlockReduced => {
                let lat = &self.flow.lattice;
                (0..lat.num_sites()).map(|x| w[lat.block_of_linear(x)]).collect()
            }
        }
    }

    /// Site diagonal of a loop message, projected to the evaluation level.
    fn project(&self, diag: Vec<C64>) -> Vec<C64> {
        match self.mode {
            EvalMode::Entrywise => diag,
            EvalMode::BlockReduced => {
                let lat = &self.flow.lattice;
                let wd = lat.wd();
                (0..lat.num_blocks()).map(|b| lat.block_range(b).map(|x| diag[x]).sum::<C64>() / wd).collect()
            }
        }
    }

    /// Weight carried into corner `c` from the far side of its unlabeled edge.
    fn corner_weight(&self, g: &MGraph, c: &Corner, leaves: &[Vec<C64>], anchored: bool) -> Vec<C64> {
        let n = g.n();
        if c.attached < n {
            let k = c.attached;
            if anchored {
                return leaves[k].clone();
            }
            let e = self.external(g.sigma[k], c.charge);
            return e.tr_mul(&nalgebra::DVector::from_column_slice(&leaves[k])).iter().copied().collect();
        }
        let child = c.attached - n;
        let far = &g.corners[child][0];
        let msg = self.message(g, child, Some(0), leaves, anchored);
        let e = self.internal(c.charge, far.charge);
        (e * nalgebra::DVector::from_vec(msg)).iter().copied().collect()
    }

    /// Loop of internal vertex `vi` with every corner except `free` summed out.
    /// With `free == None` the result has length 1 (the closed loop).
    fn message(&self, g: &MGraph, vi: usize, free: Option<usize>, leaves: &[Vec<C64>], anchored: bool) -> Vec<C64> {
        let lp = &g.corners[vi];
        let d = lp.len();
        let start = free.map_or(0, |r| r + 1);
        let count = if free.is_some() { d - 1 } else { d };
        let mut acc: Option<CMat> = None;
        for step in 0..count {
            let j = (start + step) % d;
            let c = &lp[j];
            let w = self.lift(&self.corner_weight(g, c, leaves, anchored));
            let a = self.flow.mat(c.in_charge);
            let mut x = match acc {
                None => a.clone(),
                Some(p) => p * a,
            };
            for (col, wv) in w.iter().enumerate() {
                x.column_mut(col).iter_mut().for_each(|v| *v *= *wv);
            }
            acc = Some(x);
        }
        let acc = acc.expect("loops have at least three corners");
        match free {
            None => {
                let tr: C64 = acc.diagonal().iter().sum();
                let scale = match self.mode {
                    EvalMode::Entrywise => 1.0,
                    EvalMode::BlockReduced => 1.0 / self.flow.lattice.wd(),
                };
                vec![tr * scale]
            }
            Some(r) => {
                let a = self.flow.mat(lp[r].in_charge);
                let nsite = a.nrows();
                let diag: Vec<C64> = (0..nsite).map(|y| (0..nsite).map(|k| acc[(y, k)] * a[(k, y)]).sum()).collect();
                self.project(diag)
            }
        }
    }

    /// Value of one M-graph against leaf weights. With `anchored` the external
    /// edges are dropped and the weights sit directly on the leaf corners.
    pub fn graph_value(&self, g: &MGraph, leaves: &[Vec<C64>], anchored: bool) -> C64 {
        self.message(g, 0, None, leaves, anchored)[0]
    }

    fn check(&self, sigma: &[Sign], leaves: &[Vec<C64>]) -> Result<()> {
        let n = sigma.len();
        if !(2..=MAX_EVAL).contains(&n) {
            return Err(Error::SizeGuard(format!("loop length {n} outside 2..={MAX_EVAL}")));
        }
        if leaves.len() != n || leaves.iter().any(|w| w.len() != self.dim()) {
            return Err(Error::Input("leaf weights must be one vector of length dim per position".into()));
        }
        Ok(())
    }

    /// Σ_Γ over trees with the given long-edge set (all trees if `pi` is None),
    /// summed in key order.
    fn tree_sum(&self, sigma: &[Sign], leaves: &[Vec<C64>], anchored: bool, pi: Option<&[(usize, usize)]>) -> Result<C64> {
        self.check(sigma, leaves)?;
        let n = sigma.len();
        if n == 2 {
            if anchored || pi.is_some_and(|p| !p.is_empty()) {
                return Err(Error::Input("length-2 loops have no core".into()));
            }
            let k = self.external(sigma[0], sigma[1]) * &self.two[pair_slot(sigma[0], sigma[1])];
            let (u, v) = (&leaves[0], &leaves[1]);
            let mut s = ZERO;
            for a in 0..u.len() {
                for b in 0..v.len() {
                    s += u[a] * k[(a, b)] * v[b];
                }
            }
            return Ok(s);
        }
        let trees = enumerate_tsp(n)?;
        let vals: Vec<C64> = trees
            .par_iter()
            .map(|tr| {
                if let Some(p) = pi {
                    if long_edges(tr, sigma) != p {
                        return ZERO;
                    }
                }
                let g = build_m_graph(tr, sigma).expect("lengths checked");
                self.graph_value(&g, leaves, anchored)
            })
            .collect();
        Ok(vals.into_iter().sum())
    }

    /// Σ_Γ Γ against leaf weights: K̂ in entrywise mode, K^{(n;B)} in block mode.
    pub fn k_raw(&self, sigma: &[Sign], leaves: &[Vec<C64>]) -> Result<C64> {
        self.tree_sum(sigma, leaves, false, None)
    }

    /// K̂ (entrywise) or K = W^{−d(n−1)} K^{(n;B)} (block-reduced).
    pub fn k_value(&self, sigma: &[Sign], leaves: &[Vec<C64>]) -> Result<C64> {
        let raw = self.k_raw(sigma, leaves)?;
        Ok(match self.mode {
            EvalMode::Entrywise => raw,
            EvalMode::BlockReduced => raw * self.flow.lattice.wd().powi(1 - sigma.len() as i32),
        })
    }

    /// K^{(π)} for every long-edge set π that occurs, keyed by π.
    pub fn k_by_pi(&self, sigma: &[Sign], leaves: &[Vec<C64>]) -> Result<BTreeMap<Vec<(usize, usize)>, C64>> {
        self.check(sigma, leaves)?;
        if sigma.len() < MIN_LEAVES {
            return Err(Error::Input("long-edge sets need n ≥ 3".into()));
        }
        let mut out = BTreeMap::new();
        for tr in enumerate_tsp(sigma.len())? {
            let g = build_m_graph(&tr, sigma)?;
            *out.entry(long_edges(&tr, sigma)).or_insert(ZERO) += self.graph_value(&g, leaves, false);
        }
        Ok(out)
    }

    /// Core Σ^{(π)}: external edges removed, anchor weights on the leaf corners.
    pub fn core(&self, sigma: &[Sign], pi: &[(usize, usize)], anchors: &[Vec<C64>]) -> Result<C64> {
        if sigma.len() < MIN_LEAVES {
            return Err(Error::Input("cores need n ≥ 3".into()));
        }
        self.tree_sum(sigma, anchors, true, Some(pi))
    }
}

/// K̂ at sites `a` (entrywise) or K at blocks `a` (block-reduced).
pub fn evaluate_k_tree(flow: &FlowState, t: f64, sigma: &[Sign], a: &[usize], mode: EvalMode) -> Result<C64> {
    let ev = TreeEvaluator::new(flow, t, mode)?;
    if a.len() != sigma.len() || a.iter().any(|&x| x >= ev.dim()) {
        return Err(Error::Input("index vector does not match the charges or the lattice".into()));
    }
    let leaves: Vec<Vec<C64>> = a.iter().map(|&x| ev.delta(x)).collect();
    ev.k_value(sigma, &leaves)
}

/// |(K_{(+,σ̂)} − K_{(−,σ̂)})/(2iη) − Σ_{a_n} K_{(+,σ̂,−)}| with η → W^dη in block mode.
pub fn ward_tree_residual(ev: &TreeEvaluator, sigma_hat: &[Sign], a: &[usize]) -> Result<f64> {
    let n = sigma_hat.len() + 1;
    if a.len() != n {
        return Err(Error::Input(format!("need {n} indices")));
    }
    let mut leaves: Vec<Vec<C64>> = a.iter().map(|&x| ev.delta(x)).collect();
    let with = |s0: Sign| -> Vec<Sign> { std::iter::once(s0).chain(sigma_hat.iter().copied()).collect() };
    let plus = ev.k_value(&with(Sign::Plus), &leaves)?;
    let minus = ev.k_value(&with(Sign::Minus), &leaves)?;
    let mut big = with(Sign::Plus);
    big.push(Sign::Minus);
    leaves.push(ev.ones());
    let sum = ev.k_value(&big, &leaves)?;
    let eta = match ev.mode() {
        EvalMode::Entrywise => ev.eta(),
        EvalMode::BlockReduced => ev.eta() * ev.flow().lattice.wd(),
    };
    Ok(((plus - minus) / C64::new(0.0, 2.0 * eta) - sum).norm())
}

/// Per-graph identity (Γ_{(+,σ̂)} − Γ_{(−,σ̂)})/(2iη) = Σ_{Γ'∈slice(Γ)} Σ_{a_n} Γ'_{(+,σ̂,−)},
/// at the raw (unscaled) level. Returns the residual.
pub fn ward_graph_residual(ev: &TreeEvaluator, tree: &TreePartition, sigma_hat: &[Sign], a: &[usize]) -> Result<f64> {
    let n = tree.n();
    if sigma_hat.len() + 1 != n || a.len() != n {
        return Err(Error::Input("charges and indices must match the tree".into()));
    }
    let mut leaves: Vec<Vec<C64>> = a.iter().map(|&x| ev.delta(x)).collect();
    let with = |s0: Sign| -> Vec<Sign> { std::iter::once(s0).chain(sigma_hat.iter().copied()).collect() };
    let plus = ev.graph_value(&build_m_graph(tree, &with(Sign::Plus))?, &leaves, false);
    let minus = ev.graph_value(&build_m_graph(tree, &with(Sign::Minus))?, &leaves, false);
    let mut big = with(Sign::Plus);
    big.push(Sign::Minus);
    leaves.push(ev.ones());
    let mut sum = ZERO;
    for s in tree.slices() {
        sum += ev.graph_value(&build_m_graph(&s, &big)?, &leaves, false);
    }
    Ok(((plus - minus) / C64::new(0.0, 2.0 * ev.eta()) - sum).norm())
}

/// A block-reduced core value.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Core {
    pub sigma: String,
    pub pi: Vec<(usize, usize)>,
    pub anchors: Vec<usize>,
    pub value: C64,
    pub block_reduced: bool,
}

/// Σ^{(π)}_{t,σ,d} at anchor blocks d.
pub fn core_values(flow: &FlowState, t: f64, sigma: &[Sign], pi: &[(usize, usize)], anchors: &[usize]) -> Result<Core> {
    let ev = TreeEvaluator::new(flow, t, EvalMode::BlockReduced)?;
    if anchors.len() != sigma.len() || anchors.iter().any(|&d| d >= ev.dim()) {
        return Err(Error::Input("anchor vector does not match the charges or the lattice".into()));
    }
    let w: Vec<Vec<C64>> = anchors.iter().map(|&d| ev.delta(d)).collect();
    let value = ev.core(sigma, pi, &w)?;
    Ok(Core { sigma: format_signs(sigma), pi: pi.to_vec(), anchors: anchors.to_vec(), value, block_reduced: true })
}

/// Both sides of the core decomposition along the long edge {0, s} ∈ π:
/// Σ^{(π)}_{σ,d} against Σ_{c,c'} Σ^{(π_L)}_{σ_L,(c,d_s..)} (S_tΘ)_{cc'} Σ^{(π_R)}_{σ_R,(..d_{s−1},c')}.
pub fn core_decomposition(ev: &TreeEvaluator, sigma: &[Sign], pi: &[(usize, usize)], anchors: &[usize]) -> Result<(C64, C64)> {
    let s = pi
        .iter()
        .find(|&&(k, _)| k == 0)
        .map(|&(_, l)| l)
        .ok_or_else(|| Error::Input("π must contain a pair {0, s}".into()))?;
    if sigma[0] == sigma[s] {
        return Err(Error::Input("the split edge must be long".into()));
    }
    let w: Vec<Vec<C64>> = anchors.iter().map(|&d| ev.delta(d)).collect();
    let lhs = ev.core(sigma, pi, &w)?;

    // Left part keeps regions 0, s..n−1 (renumbered 0, 1..); right keeps 0..=s.
    let relabel_l = |k: usize| if k == 0 { 0 } else { k - s + 1 };
    let mut pi_l = Vec::new();
    let mut pi_r = Vec::new();
    for &(k, l) in pi {
        if (k, l) == (0, s) {
            continue;
        }
        if (k == 0 || k >= s) && l >= s {
            let (a, b) = (relabel_l(k), relabel_l(l));
            pi_l.push((a.min(b), a.max(b)));
        } else if l <= s {
            pi_r.push((k, l));
        } else {
            return Err(Error::Input("crossing pairs in π".into()));
        }
    }
    pi_l.sort_unstable();
    let sigma_l: Vec<Sign> = std::iter::once(sigma[0]).chain(sigma[s..].iter().copied()).collect();
    let sigma_r: Vec<Sign> = sigma[..=s].to_vec();
    let dim = ev.dim();
    let mut left = vec![ZERO; dim];
    let mut right = vec![ZERO; dim];
    for c in 0..dim {
        let mut wl = vec![ev.delta(c)];
        wl.extend(w[s..].iter().cloned());
        left[c] = ev.core(&sigma_l, &pi_l, &wl)?;
        let mut wr: Vec<Vec<C64>> = w[..s].to_vec();
        wr.push(ev.delta(c));
        right[c] = ev.core(&sigma_r, &pi_r, &wr)?;
    }
    // The left corner sees region s next, the right corner region 0.
    let e = ev.internal(sigma[s], sigma[0]);
    let mut rhs = ZERO;
    for c in 0..dim {
        for cp in 0..dim {
            rhs += left[c] * e[(c, cp)] * right[cp];
        }
    }
    Ok((lhs, rhs))
}

/// n^{−d} Σ_d Σ^{(∅)}_{t,σ,d}, the sum-zero statistic.
pub fn sum_zero_statistic(flow: &FlowState, t: f64, sigma: &[Sign]) -> Result<C64> {
    let ev = TreeEvaluator::new(flow, t, EvalMode::BlockReduced)?;
    let w: Vec<Vec<C64>> = (0..sigma.len()).map(|_| ev.ones()).collect();
    Ok(ev.core(sigma, &[], &w)? / ev.dim() as f64)
}

/// max |Σ^{(∅)}_{σ,d}| over d with d_0 at the origin, grouped by the largest
/// pairwise block distance among the anchors.
pub fn molecule_profile(ev: &TreeEvaluator, sigma: &[Sign]) -> Result<BTreeMap<i64, f64>> {
    if ev.mode() != EvalMode::BlockReduced {
        return Err(Error::Input("molecule profile is block-reduced".into()));
    }
    let lat = ev.flow().lattice;
    let nb = ev.dim();
    let n = sigma.len();
    let o = lat.origin_block();
    let total = nb.pow((n - 1) as u32);
    let mut out: BTreeMap<i64, f64> = BTreeMap::new();
    for code in 0..total {
        let mut d = vec![o];
        let mut c = code;
        for _ in 1..n {
            d.push(c % nb);
            c /= nb;
        }
        let mut sep = 0;
        for i in 0..n {
            for j in i + 1..n {
                sep = sep.max(lat.block_distance_linear(d[i], d[j]));
            }
        }
        let w: Vec<Vec<C64>> = d.iter().map(|&x| ev.delta(x)).collect();
        let v = ev.core(sigma, &[], &w)?.norm();
        let e = out.entry(sep).or_insert(0.0);
        *e = e.max(v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detapprox::Background;
    use crate::lattice::TorusLattice;
    use crate::loops::{k2_closed, k3_closed, k_loop_ode, LoopIndex, OdeOptions};
    use crate::model::InteractionBA;
    use crate::{parse_signs, signs_from_mask};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use std::sync::Arc;

    fn flow_on(d: usize, w: usize, n: usize) -> FlowState {
        let l = TorusLattice::new(d, w, n).unwrap();
        Background::block_anderson(&l, 0.3, &InteractionBA::standard(&l))
            .unwrap()
            .flow_state(0.4, 0.0)
            .unwrap()
    }

    fn flow_a() -> FlowState {
        flow_on(1, 3, 7)
    }

    fn rel(a: C64, b: C64) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    /// Noncrossing sets of polygon diagonals, as region pairs.
    fn dissections(n: usize) -> BTreeSet<Vec<(usize, usize)>> {
        let diags: Vec<(usize, usize)> =
            (0..n).flat_map(|i| (i + 2..n).map(move |j| (i, j))).filter(|&(i, j)| !(i == 0 && j == n - 1)).collect();
        let cross = |(i, j): (usize, usize), (k, l): (usize, usize)| (i < k && k < j && j < l) || (k < i && i < l && l < j);
        let mut out = BTreeSet::new();
        for mask in 0u32..(1 << diags.len()) {
            let set: Vec<_> = (0..diags.len()).filter(|b| mask >> b & 1 == 1).map(|b| diags[b]).collect();
            if set.iter().all(|&a| set.iter().all(|&b| !cross(a, b))) {
                out.insert(set);
            }
        }
        out
    }

    #[test]
    fn enumeration_matches_dissections() {
        for (n, want) in [(3, 1), (4, 3), (5, 11), (6, 45), (7, 197)] {
            let trees = enumerate_tsp(n).unwrap();
            assert_eq!(trees.len(), want);
            let diag_sets: BTreeSet<_> = trees.iter().map(TreePartition::diagonals).collect();
            assert_eq!(diag_sets, dissections(n));
            let keys: BTreeSet<_> = trees.iter().map(|t| t.key().to_string()).collect();
            assert_eq!(keys.len(), want);
        }
        assert!(enumerate_tsp(2).is_err());
        assert!(enumerate_tsp(8).is_err());
    }

    #[test]
    fn malformed_trees_rejected() {
        // degree-2 internal vertex
        assert!(TreePartition::from_adjacency(3, vec![vec![3], vec![4], vec![4], vec![0, 4], vec![3, 1, 2]]).is_err());
        // crossing arcs: {a0, a2} against {a1, a3}
        let crossing = vec![vec![4], vec![5], vec![4], vec![5], vec![0, 2, 5], vec![1, 3, 4]];
        assert!(TreePartition::from_adjacency(4, crossing).is_err());
        // cycle among internal vertices
        let cyc = vec![vec![3], vec![4], vec![5], vec![0, 4, 5], vec![1, 3, 5], vec![2, 3, 4]];
        assert!(TreePartition::from_adjacency(3, cyc).is_err());
        // asymmetric edge
        assert!(TreePartition::from_adjacency(3, vec![vec![3], vec![3], vec![3], vec![0, 1]]).is_err());
        assert!(TreePartition::star(2).is_err());
    }

    #[test]
    fn slices_partition_the_next_size() {
        assert_eq!(TreePartition::star(3).unwrap().slices().len(), 3);
        for n in 3..=5 {
            let mut seen = BTreeSet::new();
            let mut total = 0;
            for tr in enumerate_tsp(n).unwrap() {
                for s in tr.slices() {
                    total += 1;
                    seen.insert(s.key().to_string());
                }
            }
            let next: BTreeSet<_> = enumerate_tsp(n + 1).unwrap().iter().map(|t| t.key().to_string()).collect();
            assert_eq!(total, next.len());
            assert_eq!(seen, next);
        }
        let total4: usize = enumerate_tsp(4).unwrap().iter().map(|t| t.slices().len()).sum();
        assert_eq!(total4, 11);
    }

    #[test]
    fn charges_of_six_leaf_example() {
        let adj = vec![vec![6], vec![6], vec![6], vec![7], vec![7], vec![6], vec![5, 0, 1, 2, 7], vec![6, 3, 4]];
        let tree = TreePartition::from_adjacency(6, adj).unwrap();
        let g = build_m_graph(&tree, &parse_signs("+-+-+-").unwrap()).unwrap();
        let plus: BTreeSet<(usize, usize)> =
            g.corners.iter().flatten().filter(|c| c.charge == Sign::Plus).map(|c| (c.vertex, c.attached)).collect();
        let b2 = tree.neighbors(3)[0];
        assert_eq!(plus, BTreeSet::from([(0, 5), (0, 1), (b2 - 6, 3)]));
        assert_eq!(g.corners.iter().map(Vec::len).sum::<usize>(), 8);
    }

    #[test]
    fn m_graph_local_structure() {
        for n in 3..=6 {
            for tr in enumerate_tsp(n).unwrap() {
                for mask in [0, 1, (1 << n) - 2, 0b0101_0101 & ((1 << n) - 1)] {
                    let sigma = signs_from_mask(mask, n);
                    let g = build_m_graph(&tr, &sigma).unwrap();
                    assert!(g.degrees().values().all(|&d| d == 3));
                    for lp in &g.corners {
                        let d = lp.len();
                        for j in 0..d {
                            // the sector before neighbour j starts right after the last leaf of neighbour j−1
                            let prev = tr.arc(lp[j].vertex + n, (j + d - 1) % d);
                            let last = (0..n).find(|&i| prev >> i & 1 == 1 && prev >> ((i + 1) % n) & 1 == 0).unwrap();
                            assert_eq!(lp[j].in_region, (last + 1) % n);
                            assert_eq!(lp[j].in_charge, sigma[lp[j].in_region]);
                            assert_eq!(lp[j].charge, lp[(j + 1) % d].in_charge);
                        }
                    }
                    for k in 0..n {
                        assert_eq!(g.leaf_corner(k).charge, sigma[(k + 1) % n]);
                    }
                }
            }
        }
    }

    #[test]
    fn json_for_four_leaves() {
        let trees = enumerate_tsp(4).unwrap();
        let star = trees.iter().find(|t| t.num_internal() == 1).unwrap();
        assert_eq!(star.key(), "(0,1,2,3)");
        let g = build_m_graph(star, &parse_signs("+-+-").unwrap()).unwrap();
        let j = g.to_json();
        assert_eq!(j["sigma"], "+-+-");
        assert_eq!(j["m_edges"].as_array().unwrap().len(), 4);
        assert_eq!(j["unlabeled_edges"].as_array().unwrap().len(), 4);
        assert_eq!(j["corners"][0]["attached"], "a0");
        assert_eq!(j["corners"][0]["charge"], "-");
        let split: Vec<_> = trees.iter().filter(|t| t.num_internal() == 2).map(|t| t.diagonals()).collect();
        assert_eq!(split, vec![vec![(1, 3)], vec![(0, 2)]]);
        for t in &trees {
            assert_eq!(t.to_json()["n"], 4);
        }
    }

    /// Direct sum over corner sites of a tree, from the graph rules.
    fn brute_graph(flow: &FlowState, t: f64, g: &MGraph, a: &[usize]) -> C64 {
        let n = g.n();
        let nsite = flow.lattice.num_sites();
        let dense = flow.var.dense();
        let corners: Vec<&Corner> = g.corners.iter().flatten().collect();
        let idx = |c: &Corner| corners.iter().position(|x| x.vertex == c.vertex && x.slot == c.slot).unwrap();
        let total = nsite.pow(corners.len() as u32);
        let mut sum = ZERO;
        for code in 0..total {
            let x: Vec<usize> = (0..corners.len()).map(|i| code / nsite.pow(i as u32) % nsite).collect();
            let mut v = C64::new(1.0, 0.0);
            for (k, &ak) in a.iter().enumerate().take(n) {
                let c = g.leaf_corner(k);
                v *= entrywise_theta(flow, t, g.sigma[k], c.charge, &dense).unwrap().0[(ak, x[idx(c)])];
            }
            for vv in n..g.tree.num_vertices() {
                for &w in g.tree.neighbors(vv) {
                    if w > vv {
                        let (c1, c2) = (g.corner_facing(vv, w).unwrap(), g.corner_facing(w, vv).unwrap());
                        v *= entrywise_theta(flow, t, c1.charge, c2.charge, &dense).unwrap().1[(x[idx(c1)], x[idx(c2)])];
                    }
                }
            }
            for lp in &g.corners {
                let d = lp.len();
                for j in 0..d {
                    v *= flow.mat(lp[j].in_charge)[(x[idx(&lp[(j + d - 1) % d])], x[idx(&lp[j])])];
                }
            }
            sum += v;
        }
        sum
    }

    #[test]
    fn dp_matches_direct_sum() {
        let flow = flow_on(1, 1, 5);
        let t = 0.6;
        let ev = TreeEvaluator::new(&flow, t, EvalMode::Entrywise).unwrap();
        for (n, a) in [(4, vec![0, 3, 4, 1]), (5, vec![2, 2, 0, 4, 1])] {
            for tr in enumerate_tsp(n).unwrap().iter().filter(|t| t.num_internal() <= 2 || n == 4) {
                for mask in [0b0110, 0b10011 & ((1 << n) - 1)] {
                    let g = build_m_graph(tr, &signs_from_mask(mask, n)).unwrap();
                    let leaves: Vec<_> = a.iter().map(|&x| ev.delta(x)).collect();
                    let dp = ev.graph_value(&g, &leaves, false);
                    assert!(rel(dp, brute_graph(&flow, t, &g, &a)) < 1e-10, "{} {:?}", tr.key(), mask);
                }
            }
        }
    }

    #[test]
    fn four_leaf_graphs_by_hand() {
        let flow = flow_on(1, 1, 5);
        let t = 0.45;
        let nsite = 5;
        let dense = flow.var.dense();
        let ev = TreeEvaluator::new(&flow, t, EvalMode::Entrywise).unwrap();
        let sigma = parse_signs("++-+").unwrap();
        let th = |i: usize, j: usize| entrywise_theta(&flow, t, sigma[i], sigma[j], &dense).unwrap();
        let mm = |i: usize| flow.mat(sigma[i]).clone();
        let (m0, m1, m2, m3) = (mm(0), mm(1), mm(2), mm(3));
        let a = [1, 4, 0, 3];
        let ext = [th(0, 1).0, th(1, 2).0, th(2, 3).0, th(3, 0).0];
        let e = |k: usize, x: usize| ext[k][(a[k], x)];
        let (s02, s31) = (th(0, 2).1, th(3, 1).1);
        let mut g1 = ZERO;
        let mut g2 = ZERO;
        let mut g3 = ZERO;
        for x in 0..nsite {
            for y in 0..nsite {
                for u in 0..nsite {
                    for v in 0..nsite {
                        g3 += e(0, x) * e(1, y) * e(2, u) * e(3, v) * m0[(v, x)] * m1[(x, y)] * m2[(y, u)] * m3[(u, v)];
                    }
                }
            }
        }
        for x in 0..nsite {
            for y in 0..nsite {
                for z in 0..nsite {
                    let left1 = e(0, x) * e(1, y) * m0[(z, x)] * m1[(x, y)] * m2[(y, z)];
                    let left2 = e(0, x) * e(3, z) * m0[(z, x)] * m1[(x, y)] * m3[(y, z)];
                    for u in 0..nsite {
                        for v in 0..nsite {
                            for w in 0..nsite {
                                g1 += left1 * e(2, u) * e(3, v) * s02[(z, w)] * m2[(w, u)] * m3[(u, v)] * m0[(v, w)];
                                g2 += left2 * e(1, u) * e(2, v) * s31[(y, w)] * m1[(w, u)] * m2[(u, v)] * m3[(v, w)];
                            }
                        }
                    }
                }
            }
        }
        let leaves: Vec<_> = a.iter().map(|&x| ev.delta(x)).collect();
        for tr in enumerate_tsp(4).unwrap() {
            let g = build_m_graph(&tr, &sigma).unwrap();
            let want = match tr.diagonals().as_slice() {
                [] => g3,
                [(0, 2)] => g1,
                [(1, 3)] => g2,
                other => panic!("{other:?}"),
            };
            assert!(rel(ev.graph_value(&g, &leaves, false), want) < 1e-10);
        }
        assert!(rel(ev.k_raw(&sigma, &leaves).unwrap(), g1 + g2 + g3) < 1e-10);
    }

    #[test]
    fn six_leaf_graph_matches_written_product() {
        // leaf k here is a_{k+1} in the worked example; b1 = vertex 6, b2 = vertex 7
        let flow = flow_on(1, 1, 5);
        let t = 0.35;
        let dense = flow.var.dense();
        let (p, m) = (Sign::Plus, Sign::Minus);
        let th = |s1: Sign, s2: Sign| entrywise_theta(&flow, t, s1, s2, &dense).unwrap();
        let (tpm, tmp) = (th(p, m).0, th(m, p).0);
        let smm = th(m, m).1;
        let (mp, mm) = (flow.mat(p).clone(), flow.mat(m).clone());
        let a = [2, 0, 4, 1, 3, 2];
        let g = build_m_graph(&TreePartition::from_adjacency(6, vec![vec![6], vec![6], vec![6], vec![7], vec![7], vec![6], vec![5, 0, 1, 2, 7], vec![6, 3, 4]]).unwrap(), &parse_signs("+-+-+-").unwrap()).unwrap();
        let ev = TreeEvaluator::new(&flow, t, EvalMode::Entrywise).unwrap();
        let leaves: Vec<_> = a.iter().map(|&x| ev.delta(x)).collect();
        let value = ev.graph_value(&g, &leaves, false);

        let mut want = ZERO;
        for code in 0..5usize.pow(8) {
            let b: Vec<usize> = (0..8).map(|i| code / 5usize.pow(i) % 5).collect();
            let (b11, b12, b13, b14, b15, b21, b22, b23) = (b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]);
            let ext = tpm[(a[0], b12)] * tmp[(a[1], b13)] * tpm[(a[2], b14)] * tmp[(a[3], b22)] * tpm[(a[4], b23)] * tmp[(a[5], b11)];
            // <A1 F_x1 ... Ak F_xk> = A1[xk, x1] A2[x1, x2] ... Ak[x(k-1), xk]
            let loop1 = mm[(b15, b11)] * mp[(b11, b12)] * mm[(b12, b13)] * mp[(b13, b14)] * mm[(b14, b15)];
            let loop2 = mm[(b23, b21)] * mm[(b21, b22)] * mp[(b22, b23)];
            want += ext * loop1 * smm[(b15, b21)] * loop2;
        }
        assert!(rel(value, want) < 1e-10, "{value} vs {want}");
    }

    #[test]
    fn zero_time_is_the_star_loop() {
        let flow = flow_on(1, 1, 5);
        let ev = TreeEvaluator::new(&flow, 0.0, EvalMode::Entrywise).unwrap();
        for n in 3..=5 {
            let sigma = signs_from_mask(0b10110 & ((1 << n) - 1), n);
            let a: Vec<usize> = (0..n).map(|i| (3 * i + 1) % 5).collect();
            let leaves: Vec<_> = a.iter().map(|&x| ev.delta(x)).collect();
            let want: C64 = (0..n).map(|j| flow.mat(sigma[j])[(a[(j + n - 1) % n], a[j])]).product();
            assert!(rel(ev.k_raw(&sigma, &leaves).unwrap(), want) < 1e-12);
        }
    }

    #[test]
    fn short_loops_match_closed_forms() {
        let flow = flow_a();
        for t in [0.3, 0.8] {
            let k3 = k3_closed(&flow, t).unwrap();
            let ev = TreeEvaluator::new(&flow, t, EvalMode::BlockReduced).unwrap();
            for mask in 0..8 {
                let s = signs_from_mask(mask, 3);
                for b in [[0, 0, 0], [1, 4, 6], [3, 2, 2], [5, 0, 3]] {
                    let leaves: Vec<_> = b.iter().map(|&x| ev.delta(x)).collect();
                    let v = ev.k_value(&s, &leaves).unwrap();
                    assert!(rel(v, k3.get(&s, &b)) < 1e-8);
                }
            }
            for mask in 0..4 {
                let s = signs_from_mask(mask, 2);
                let k2 = k2_closed(&flow, t, s[0], s[1]).unwrap();
                for (a, b) in [(0, 0), (2, 5), (6, 1)] {
                    let v = evaluate_k_tree(&flow, t, &s, &[a, b], EvalMode::BlockReduced).unwrap();
                    assert!(rel(v, k2[(a, b)]) < 1e-12);
                }
            }
        }
    }

    #[test]
    fn tree_sum_matches_loop_ode() {
        let flow = flow_a();
        let grid = [0.3, 0.7];
        let ks = k_loop_ode(&flow, 4, &grid, &OdeOptions::default()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for (k, &t) in ks.iter().zip(&grid) {
            let ev = TreeEvaluator::new(&flow, t, EvalMode::BlockReduced).unwrap();
            for n in 2..=4 {
                for mask in 0..1 << n {
                    let s = signs_from_mask(mask, n);
                    for _ in 0..6 {
                        let b: Vec<usize> = (0..n).map(|_| rng.random_range(0..7)).collect();
                        let leaves: Vec<_> = b.iter().map(|&x| ev.delta(x)).collect();
                        let tree = ev.k_value(&s, &leaves).unwrap();
                        let ode = k.get(&LoopIndex::new(s.clone(), b.clone()).unwrap());
                        assert!(rel(tree, ode) < 1e-5, "t={t} σ={} b={b:?}: {tree} vs {ode}", format_signs(&s));
                    }
                }
            }
        }
    }

    #[test]
    fn entrywise_with_block_weights_gives_block_value() {
        let flow = flow_a();
        let t = 0.55;
        let ew = TreeEvaluator::new(&flow, t, EvalMode::Entrywise).unwrap();
        let bl = TreeEvaluator::new(&flow, t, EvalMode::BlockReduced).unwrap();
        let lat = flow.lattice;
        let avg = |b: usize| -> Vec<C64> {
            (0..lat.num_sites()).map(|x| if lat.block_of_linear(x) == b { C64::from(1.0 / lat.wd()) } else { ZERO }).collect()
        };
        for (sig, b) in [("+-+", vec![0, 2, 5]), ("++--", vec![1, 1, 4, 6]), ("+-+--", vec![3, 0, 6, 2, 2])] {
            let s = parse_signs(sig).unwrap();
            let w: Vec<_> = b.iter().map(|&x| avg(x)).collect();
            let d: Vec<_> = b.iter().map(|&x| bl.delta(x)).collect();
            assert!(rel(ew.k_raw(&s, &w).unwrap(), bl.k_value(&s, &d).unwrap()) < 1e-9, "{sig}");
        }
    }

    #[test]
    fn ward_identity_sums_over_trees() {
        let flow = flow_on(1, 3, 5);
        for t in [0.0, 0.4, 0.8] {
            let ev = TreeEvaluator::new(&flow, t, EvalMode::Entrywise).unwrap();
            for s in [Sign::Plus, Sign::Minus] {
                let r = ward_tree_residual(&ev, &[s], &[2, 11]).unwrap();
                assert!(r < if t == 0.0 { 1e-10 } else { 1e-8 }, "t={t} {r}");
            }
            let r = ward_tree_residual(&ev, &parse_signs("-+").unwrap(), &[0, 7, 13]).unwrap();
            assert!(r < 1e-8, "n=3 entrywise {r}");
        }
        let flow = flow_a();
        let ev = TreeEvaluator::new(&flow, 0.6, EvalMode::BlockReduced).unwrap();
        for sh in ["+-", "--", "-+"] {
            let r = ward_tree_residual(&ev, &parse_signs(sh).unwrap(), &[0, 3, 5]).unwrap();
            assert!(r < 1e-7, "block {sh} {r}");
        }
    }

    #[test]
    fn ward_identity_per_graph() {
        let flow = flow_on(1, 3, 5);
        let ev = TreeEvaluator::new(&flow, 0.5, EvalMode::Entrywise).unwrap();
        for n in 3..=4 {
            for tr in enumerate_tsp(n).unwrap() {
                for mask in 0..1 << (n - 1) {
                    let sh = signs_from_mask(mask, n - 1);
                    let a: Vec<usize> = (0..n).map(|i| (4 * i + 3) % 15).collect();
                    let r = ward_graph_residual(&ev, &tr, &sh, &a).unwrap();
                    assert!(r < 1e-8, "{} {} {r}", tr.key(), format_signs(&sh));
                }
            }
        }
    }

    /// Same flow with M → Mᵀ and M* → M̄.
    fn conjugated(flow: &FlowState) -> FlowState {
        let mut f = flow.clone();
        f.mm = Arc::new(flow.mm.transpose());
        f.mm_adj = Arc::new(flow.mm.map(|z| z.conj()));
        f
    }

    #[test]
    fn charge_flip_conjugates() {
        let flow = flow_a();
        let conj = conjugated(&flow);
        for mode in [EvalMode::Entrywise, EvalMode::BlockReduced] {
            let ev = TreeEvaluator::new(&flow, 0.5, mode).unwrap();
            let evc = TreeEvaluator::new(&conj, 0.5, mode).unwrap();
            for sig in ["++-", "+-+-", "+--+-"] {
                let s = parse_signs(sig).unwrap();
                let f: Vec<Sign> = s.iter().map(|x| x.flip()).collect();
                let leaves: Vec<_> = (0..s.len()).map(|i| ev.delta((2 * i + 1) % ev.dim())).collect();
                let a = ev.k_raw(&s, &leaves).unwrap();
                let b = evc.k_raw(&f, &leaves).unwrap();
                assert!(rel(b, a.conj()) < 1e-10, "{sig}");
            }
        }
    }

    #[test]
    fn core_splits_along_long_edges() {
        let flow = flow_a();
        let ev = TreeEvaluator::new(&flow, 0.5, EvalMode::BlockReduced).unwrap();
        let s4 = parse_signs("++--").unwrap();
        let (l, r) = core_decomposition(&ev, &s4, &[(0, 2)], &[1, 5, 2, 0]).unwrap();
        assert!(rel(r, l) < 1e-8, "{l} {r}");
        let s5 = parse_signs("+-+--").unwrap();
        let mut checked = 0;
        for tr in enumerate_tsp(5).unwrap() {
            let pi = long_edges(&tr, &s5);
            if pi.iter().any(|&(k, _)| k == 0) {
                let (l, r) = core_decomposition(&ev, &s5, &pi, &[0, 3, 6, 1, 4]).unwrap();
                assert!(rel(r, l) < 1e-8, "{pi:?} {l} {r}");
                checked += 1;
            }
        }
        assert!(checked > 0);
        assert!(core_decomposition(&ev, &s4, &[(1, 3)], &[0, 0, 0, 0]).is_err());
    }

    #[test]
    fn sum_zero_statistic_matches_loop_sums() {
        let flow = flow_a();
        let s = parse_signs("+-+-").unwrap();
        let grid = [0.2, 0.6];
        let ks = k_loop_ode(&flow, 4, &grid, &OdeOptions::default()).unwrap();
        let lat = flow.lattice;
        for (k, &t) in ks.iter().zip(&grid) {
            let stat = sum_zero_statistic(&flow, t, &s).unwrap();
            let ten = k.tensor(4);
            let nb = lat.num_blocks();
            let mut total = ZERO;
            for code in 0..nb.pow(4) {
                let b: Vec<usize> = (0..4).map(|i| code / nb.pow(i) % nb).collect();
                total += ten.get(&s, &b);
            }
            let want = total * (1.0 - t).powi(4) * lat.wd().powi(3) / nb as f64;
            assert!(rel(stat, want) < 1e-5, "t={t}: {stat} vs {want}");
        }
    }

    #[test]
    fn molecule_profile_covers_all_separations() {
        let flow = flow_a();
        let ev = TreeEvaluator::new(&flow, 0.5, EvalMode::BlockReduced).unwrap();
        let prof = molecule_profile(&ev, &parse_signs("+-+").unwrap()).unwrap();
        assert_eq!(prof.keys().copied().collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert!(prof.values().all(|v| v.is_finite() && *v > 0.0));
        assert!(prof[&0] > prof[&3]);
    }

    #[test]
    fn guards() {
        let flow = flow_on(1, 1, 5);
        let ev = TreeEvaluator::new(&flow, 0.3, EvalMode::Entrywise).unwrap();
        let s = vec![Sign::Plus; 7];
        let leaves: Vec<_> = (0..7).map(|_| ev.ones()).collect();
        assert!(matches!(ev.k_raw(&s, &leaves), Err(Error::SizeGuard(_))));
        assert!(ev.k_raw(&s[..3], &leaves[..2]).is_err());
        assert!(evaluate_k_tree(&flow, 0.3, &s[..3], &[0, 1, 9], EvalMode::Entrywise).is_err());
    }

    fn scramble(tree: &TreePartition, seed: u64) -> Vec<Vec<usize>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = tree.n();
        let nv = tree.num_vertices();
        let mut perm: Vec<usize> = (n..nv).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let map = |v: usize| if v < n { v } else { perm[v - n] };
        let mut adj = vec![Vec::new(); nv];
        for v in 0..nv {
            let mut nb: Vec<usize> = tree.neighbors(v).iter().map(|&w| map(w)).collect();
            for i in (1..nb.len()).rev() {
                nb.swap(i, rng.random_range(0..=i));
            }
            adj[map(v)] = nb;
        }
        adj
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn canonical_form_is_relabel_invariant(n in 3usize..=7, pick in 0usize..1000, seed in 0u64..1000) {
            let trees = enumerate_tsp(n).unwrap();
            let tr = &trees[pick % trees.len()];
            let again = TreePartition::from_adjacency(n, scramble(tr, seed)).unwrap();
            prop_assert_eq!(&again, tr);
        }

        #[test]
        fn tree_counting_identities(n in 3usize..=7, pick in 0usize..1000) {
            let trees = enumerate_tsp(n).unwrap();
            let tr = &trees[pick % trees.len()];
            let excess: usize = tr.degrees().iter().map(|d| d - 2).sum();
            prop_assert_eq!(excess, n - 2);
            prop_assert_eq!(tr.diagonals().len(), tr.num_internal() - 1);
            prop_assert_eq!(tr.slices().len(), 2 * tr.canonical_path(0).len() - 3);
        }

        #[test]
        fn graph_values_are_linear_in_leaf_weights(mask in 0usize..32, c in -2.0f64..2.0, seed in 0u64..100) {
            let flow = flow_on(1, 1, 5);
            let ev = TreeEvaluator::new(&flow, 0.4, EvalMode::Entrywise).unwrap();
            let s = signs_from_mask(mask, 5);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut w: Vec<Vec<C64>> = (0..5).map(|_| (0..5).map(|_| C64::new(rng.random(), rng.random())).collect()).collect();
            let base = ev.k_raw(&s, &w).unwrap();
            let extra: Vec<C64> = (0..5).map(|_| C64::new(rng.random(), 0.0)).collect();
            let mut w2 = w.clone();
            w2[2] = extra.clone();
            let other = ev.k_raw(&s, &w2).unwrap();
            for (x, e) in w[2].iter_mut().zip(&extra) {
                *x += e * c;
            }
            let combined = ev.k_raw(&s, &w).unwrap();
            prop_assert!((combined - base - other * c).norm() <= 1e-10 * (1.0 + base.norm() + other.norm()));
        }
    }
}
