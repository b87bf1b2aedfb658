//! Balanced k-way partitioning: heavy-edge coarsening, region growing and
//! boundary FM refinement.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use crate::graph::Graph;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PartitionError {
    #[error("invalid partition configuration: {0}")]
    Config(String),
    #[error("invalid partition: {0}")]
    Invalid(String),
}

/// Non-overlapping clusters covering every node.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    num_parts: usize,
    assignment: Vec<usize>,
    members: Vec<Vec<usize>>,
    epsilon: f64,
}

/// `⌊(1+ε)·⌈N/P⌉⌋`, the largest allowed cluster size.
pub fn max_allowed_load(n: usize, p: usize, epsilon: f64) -> usize {
    let base = n.div_ceil(p);
    ((1.0 + epsilon) * base as f64 + 1e-9).floor() as usize
}

impl Partition {
    /// Validates cover, non-emptiness and the balance bound.
    pub fn from_assignment(assignment: Vec<usize>, num_parts: usize, epsilon: f64) -> Result<Self, PartitionError> {
        if num_parts == 0 {
            return Err(PartitionError::Invalid("zero clusters".into()));
        }
        let mut members = vec![Vec::new(); num_parts];
        for (u, &p) in assignment.iter().enumerate() {
            if p >= num_parts {
                return Err(PartitionError::Invalid(format!("node {u} assigned to cluster {p} of {num_parts}")));
            }
            members[p].push(u);
        }
        if let Some(p) = members.iter().position(Vec::is_empty) {
            return Err(PartitionError::Invalid(format!("cluster {p} is empty")));
        }
        let limit = max_allowed_load(assignment.len(), num_parts, epsilon);
        if let Some((p, m)) = members.iter().enumerate().find(|(_, m)| m.len() > limit) {
            return Err(PartitionError::Invalid(format!("cluster {p} has {} nodes, limit {limit}", m.len())));
        }
        Ok(Self { num_parts, assignment, members, epsilon })
    }

    /// A single cluster holding every node.
    pub fn trivial(n: usize) -> Self {
        Self { num_parts: 1, assignment: vec![0; n], members: vec![(0..n).collect()], epsilon: 0.0 }
    }

    pub fn num_parts(&self) -> usize {
        self.num_parts
    }

    pub fn num_nodes(&self) -> usize {
        self.assignment.len()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn cluster_of(&self, u: usize) -> usize {
        self.assignment[u]
    }

    /// Members of each cluster in increasing node order.
    pub fn members(&self) -> &[Vec<usize>] {
        &self.members
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    pub fn max_load(&self) -> usize {
        self.members.iter().map(Vec::len).max().unwrap_or(0)
    }
}

pub fn edge_cut(graph: &Graph, partition: &Partition) -> usize {
    cut_of(graph, partition.assignment())
}

fn cut_of(graph: &Graph, assignment: &[usize]) -> usize {
    graph.edges().filter(|&(u, v)| assignment[u] != assignment[v]).count()
}

/// Shuffled round-robin assignment: every cluster gets `⌊N/P⌋` or `⌈N/P⌉`
/// nodes.
pub fn random_balanced_partition(n: usize, num_parts: usize, seed: u64) -> Result<Partition, PartitionError> {
    check_config(n, num_parts, 0.0)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut Xoshiro256StarStar::seed_from_u64(seed));
    let mut assignment = vec![0; n];
    for (i, &u) in order.iter().enumerate() {
        assignment[u] = i % num_parts;
    }
    Partition::from_assignment(assignment, num_parts, 0.0)
}

fn check_config(n: usize, p: usize, epsilon: f64) -> Result<(), PartitionError> {
    if p == 0 || p > n {
        return Err(PartitionError::Config(format!("need 1 <= P <= N, got P={p}, N={n}")));
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(PartitionError::Config(format!("epsilon must be finite and >= 0, got {epsilon}")));
    }
    if max_allowed_load(n, p, epsilon) * p < n {
        return Err(PartitionError::Config(format!("P={p}, epsilon={epsilon} cannot hold {n} nodes")));
    }
    Ok(())
}

/// Vertex- and edge-weighted graph used during coarsening.
#[derive(Clone, Debug)]
struct WGraph {
    vwgt: Vec<usize>,
    adj: Vec<Vec<(usize, usize)>>,
}

impl WGraph {
    fn from_graph(g: &Graph) -> Self {
        let adj = (0..g.num_nodes()).map(|u| g.neighbors(u).iter().map(|&v| (v, 1)).collect()).collect();
        Self { vwgt: vec![1; g.num_nodes()], adj }
    }

    fn len(&self) -> usize {
        self.vwgt.len()
    }

    /// Heavy-edge matching in random order; returns the fine-to-coarse map
    /// and the coarse vertex count.
    fn match_heavy_edges(&self, rng: &mut Xoshiro256StarStar, pair_limit: usize) -> (Vec<usize>, usize) {
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut mate = vec![usize::MAX; n];
        for &u in &order {
            if mate[u] != usize::MAX {
                continue;
            }
            let best = self.adj[u]
                .iter()
                .filter(|&&(v, _)| mate[v] == usize::MAX && self.vwgt[u] + self.vwgt[v] <= pair_limit)
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)));
            match best {
                Some(&(v, _)) => {
                    mate[u] = v;
                    mate[v] = u;
                }
                None => mate[u] = u,
            }
        }
        let mut cmap = vec![usize::MAX; n];
        let mut next = 0;
        for u in 0..n {
            if cmap[u] == usize::MAX {
                cmap[u] = next;
                cmap[mate[u]] = next;
                next += 1;
            }
        }
        (cmap, next)
    }

    fn contract(&self, cmap: &[usize], nc: usize) -> WGraph {
        let mut vwgt = vec![0; nc];
        let mut lists: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nc];
        for u in 0..self.len() {
            let c = cmap[u];
            vwgt[c] += self.vwgt[u];
            for &(v, w) in &self.adj[u] {
                if cmap[v] != c {
                    lists[c].push((cmap[v], w));
                }
            }
        }
        for list in &mut lists {
            list.sort_unstable();
            let mut merged: Vec<(usize, usize)> = Vec::with_capacity(list.len());
            for &(v, w) in list.iter() {
                match merged.last_mut() {
                    Some(last) if last.0 == v => last.1 += w,
                    _ => merged.push((v, w)),
                }
            }
            *list = merged;
        }
        WGraph { vwgt, adj: lists }
    }

    fn cut(&self, part: &[usize]) -> usize {
        let twice: usize = (0..self.len())
            .flat_map(|u| self.adj[u].iter().map(move |&(v, w)| (u, v, w)))
            .filter(|&(u, v, _)| part[u] != part[v])
            .map(|(_, _, w)| w)
            .sum();
        twice / 2
    }
}

/// Loads and vertex counts per part.
struct PartState {
    part: Vec<usize>,
    load: Vec<usize>,
    count: Vec<usize>,
}

impl PartState {
    fn new(g: &WGraph, part: Vec<usize>, p: usize) -> Self {
        let mut load = vec![0; p];
        let mut count = vec![0; p];
        for (u, &q) in part.iter().enumerate() {
            load[q] += g.vwgt[u];
            count[q] += 1;
        }
        Self { part, load, count }
    }

    fn move_to(&mut self, g: &WGraph, u: usize, to: usize) {
        let from = self.part[u];
        self.load[from] -= g.vwgt[u];
        self.count[from] -= 1;
        self.load[to] += g.vwgt[u];
        self.count[to] += 1;
        self.part[u] = to;
    }
}

/// Edge weight from `u` into each part touched by its neighbourhood.
fn connectivity(g: &WGraph, part: &[usize], u: usize, buf: &mut Vec<(usize, usize)>) {
    buf.clear();
    for &(v, w) in &g.adj[u] {
        let q = part[v];
        match buf.iter_mut().find(|e| e.0 == q) {
            Some(e) => e.1 += w,
            None => buf.push((q, w)),
        }
    }
}

/// Best move of `u` into a part that stays within `cap`, and its cut gain.
fn best_move(g: &WGraph, st: &PartState, u: usize, cap: usize, buf: &mut Vec<(usize, usize)>) -> Option<(i64, usize)> {
    let from = st.part[u];
    if st.count[from] <= 1 {
        return None;
    }
    connectivity(g, &st.part, u, buf);
    let internal = buf.iter().find(|e| e.0 == from).map_or(0, |e| e.1) as i64;
    buf.iter()
        .filter(|&&(q, _)| q != from && st.load[q] + g.vwgt[u] <= cap)
        .map(|&(q, w)| (w as i64 - internal, q))
        .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
}

fn excess(st: &PartState, max_load: usize) -> usize {
    st.load.iter().map(|&l| l.saturating_sub(max_load)).sum()
}

#[derive(PartialEq, Eq)]
struct Candidate {
    gain: i64,
    tie: u64,
    node: usize,
    target: usize,
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.gain.cmp(&other.gain).then(self.tie.cmp(&other.tie))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Consecutive non-improving moves tolerated before a pass stops.
const FM_HILL_LIMIT: usize = 128;
const FM_MAX_PASSES: usize = 16;
/// Independent region-growing starts on the coarsest graph; the best
/// refined one is projected.
const INITIAL_TRIES: usize = 8;

/// One boundary FM pass. Moves may overshoot the load bound by one vertex
/// so that balanced swaps are reachable; the pass then rolls back to the
/// prefix with the least overload and, among those, the lowest cut.
/// Returns the cut reduction and whether the state improved.
fn fm_pass(g: &WGraph, st: &mut PartState, max_load: usize, rng: &mut Xoshiro256StarStar) -> (i64, bool) {
    let n = g.len();
    let cap = max_load + g.vwgt.iter().copied().max().unwrap_or(1);
    let mut buf = Vec::new();
    let mut heap = BinaryHeap::new();
    for u in 0..n {
        if g.adj[u].iter().any(|&(v, _)| st.part[v] != st.part[u]) {
            if let Some((gain, target)) = best_move(g, st, u, cap, &mut buf) {
                heap.push(Candidate { gain, tie: rng.gen(), node: u, target });
            }
        }
    }
    let mut locked = vec![false; n];
    let mut moves: Vec<(usize, usize)> = Vec::new();
    let mut delta = 0i64;
    let mut best = (excess(st, max_load), 0i64);
    let mut best_len = 0usize;
    while let Some(c) = heap.pop() {
        if locked[c.node] {
            continue;
        }
        match best_move(g, st, c.node, cap, &mut buf) {
            Some((gain, target)) if gain == c.gain && target == c.target => {}
            Some((gain, target)) => {
                heap.push(Candidate { gain, tie: c.tie, node: c.node, target });
                continue;
            }
            None => continue,
        }
        let from = st.part[c.node];
        st.move_to(g, c.node, c.target);
        locked[c.node] = true;
        moves.push((c.node, from));
        delta += c.gain;
        let ex = excess(st, max_load);
        if ex < best.0 || (ex == best.0 && delta > best.1) {
            best = (ex, delta);
            best_len = moves.len();
        } else if moves.len() - best_len >= FM_HILL_LIMIT {
            break;
        }
        for &(v, _) in &g.adj[c.node] {
            if !locked[v] {
                if let Some((gain, target)) = best_move(g, st, v, cap, &mut buf) {
                    heap.push(Candidate { gain, tie: rng.gen(), node: v, target });
                }
            }
        }
    }
    for &(u, from) in moves[best_len..].iter().rev() {
        st.move_to(g, u, from);
    }
    (best.1, best_len > 0)
}

fn refine(g: &WGraph, st: &mut PartState, max_load: usize, rng: &mut Xoshiro256StarStar) {
    for _ in 0..FM_MAX_PASSES {
        let before_cut = g.cut(&st.part) as i64;
        let before_excess = excess(st, max_load);
        let (gained, improved) = fm_pass(g, st, max_load, rng);
        debug_assert_eq!(before_cut - gained, g.cut(&st.part) as i64, "FM bookkeeping drifted");
        debug_assert!(excess(st, max_load) <= before_excess);
        debug_assert!(before_excess > 0 || gained >= 0);
        if !improved {
            break;
        }
    }
}

/// Region growing on the coarsest graph. Parts grow in BFS order, the
/// lightest part first; isolated vertices are dealt round-robin to the
/// lightest parts at the end.
fn grow_regions(g: &WGraph, p: usize, max_load: usize, rng: &mut Xoshiro256StarStar) -> Vec<usize> {
    let n = g.len();
    const NONE: usize = usize::MAX;
    let mut part = vec![NONE; n];
    let mut load = vec![0usize; p];
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let (connected, isolated): (Vec<usize>, Vec<usize>) = order.into_iter().partition(|&u| !g.adj[u].is_empty());

    let mut frontier: Vec<VecDeque<usize>> = vec![VecDeque::new(); p];
    let mut open = vec![true; p];
    let mut cursor = 0;
    let mut remaining = connected.len();
    while remaining > 0 {
        let mut by_load: Vec<usize> = (0..p).filter(|&q| open[q]).collect();
        if by_load.is_empty() {
            // Every part is full; dump the rest on the lightest part and let
            // the fine-level rebalance repair it.
            for &u in &connected {
                if part[u] == NONE {
                    let q = (0..p).min_by_key(|&q| (load[q], q)).unwrap();
                    part[u] = q;
                    load[q] += g.vwgt[u];
                }
            }
            break;
        }
        by_load.sort_by_key(|&q| (load[q], q));
        // Lightest part with a live frontier grows; only when no frontier is
        // left does the lightest part take a fresh random seed.
        let mut chosen = None;
        for &q in &by_load {
            while let Some(&u) = frontier[q].front() {
                if part[u] == NONE && load[q] + g.vwgt[u] <= max_load {
                    chosen = Some((q, u));
                    break;
                }
                frontier[q].pop_front();
            }
            if chosen.is_some() {
                break;
            }
        }
        let (q, u) = match chosen {
            Some(c) => c,
            None => {
                let q = by_load[0];
                while cursor < connected.len() && part[connected[cursor]] != NONE {
                    cursor += 1;
                }
                match connected[cursor..].iter().copied().find(|&u| part[u] == NONE && load[q] + g.vwgt[u] <= max_load) {
                    Some(u) => (q, u),
                    None => {
                        open[q] = false;
                        continue;
                    }
                }
            }
        };
        part[u] = q;
        load[q] += g.vwgt[u];
        remaining -= 1;
        for &(v, _) in &g.adj[u] {
            if part[v] == NONE {
                frontier[q].push_back(v);
            }
        }
    }
    for u in isolated {
        let q = (0..p).min_by_key(|&q| (load[q], q)).unwrap();
        part[u] = q;
        load[q] += g.vwgt[u];
    }
    part
}

/// Moves unit-weight vertices out of overloaded parts and into empty ones,
/// choosing the cheapest move each time.
fn rebalance(g: &WGraph, st: &mut PartState, max_load: usize) {
    let p = st.load.len();
    let mut buf = Vec::new();
    let gain_into = |st: &PartState, u: usize, q: usize, buf: &mut Vec<(usize, usize)>| {
        connectivity(g, &st.part, u, buf);
        let w = |r: usize| buf.iter().find(|e| e.0 == r).map_or(0, |e| e.1) as i64;
        w(q) - w(st.part[u])
    };
    while let Some(src) = (0..p).find(|&q| st.load[q] > max_load) {
        let mut best: Option<(i64, usize, usize)> = None;
        for u in (0..g.len()).filter(|&u| st.part[u] == src) {
            for q in (0..p).filter(|&q| st.load[q] < max_load) {
                let gain = gain_into(st, u, q, &mut buf);
                if best.is_none_or(|b| gain > b.0) {
                    best = Some((gain, u, q));
                }
            }
        }
        let (_, u, q) = best.expect("total capacity covers every node");
        st.move_to(g, u, q);
    }
    while let Some(dst) = (0..p).find(|&q| st.count[q] == 0) {
        let mut best: Option<(i64, usize)> = None;
        for u in (0..g.len()).filter(|&u| st.count[st.part[u]] > 1) {
            let gain = gain_into(st, u, dst, &mut buf);
            if best.is_none_or(|b| gain > b.0) {
                best = Some((gain, u));
            }
        }
        let (_, u) = best.expect("P <= N leaves a part with two nodes");
        st.move_to(g, u, dst);
    }
}

/// Multilevel partition into `num_parts` clusters of at most
/// [`max_allowed_load`] nodes each. Deterministic for a given seed.
pub fn partition_multilevel(graph: &Graph, num_parts: usize, epsilon: f64, seed: u64) -> Result<Partition, PartitionError> {
    let n = graph.num_nodes();
    check_config(n, num_parts, epsilon)?;
    if num_parts == 1 {
        return Partition::from_assignment(vec![0; n], 1, epsilon);
    }
    let max_load = max_allowed_load(n, num_parts, epsilon);
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);

    let threshold = (30 * num_parts).max(2 * num_parts);
    let pair_limit = (max_load / 2).max(2);
    let mut levels = vec![WGraph::from_graph(graph)];
    let mut maps: Vec<Vec<usize>> = Vec::new();
    while levels.last().unwrap().len() > threshold {
        let g = levels.last().unwrap();
        let (cmap, nc) = g.match_heavy_edges(&mut rng, pair_limit);
        if nc * 20 > g.len() * 19 {
            break;
        }
        let coarse = g.contract(&cmap, nc);
        maps.push(cmap);
        levels.push(coarse);
    }
    log::debug!("partition: {} levels, coarsest {} vertices", levels.len(), levels.last().unwrap().len());

    let coarsest = levels.last().unwrap();
    let coarse_is_fine = levels.len() == 1;
    let mut best: Option<((usize, usize), Vec<usize>)> = None;
    for _ in 0..INITIAL_TRIES {
        let mut st = PartState::new(coarsest, grow_regions(coarsest, num_parts, max_load, &mut rng), num_parts);
        if coarse_is_fine {
            rebalance(coarsest, &mut st, max_load);
        }
        refine(coarsest, &mut st, max_load, &mut rng);
        let score = (excess(&st, max_load), coarsest.cut(&st.part));
        if best.as_ref().is_none_or(|b| score < b.0) {
            best = Some((score, st.part));
        }
    }
    let mut part = best.expect("INITIAL_TRIES > 0").1;
    for level in (0..levels.len()).rev() {
        let g = &levels[level];
        let mut st = PartState::new(g, part, num_parts);
        if level == 0 {
            rebalance(g, &mut st, max_load);
        }
        refine(g, &mut st, max_load, &mut rng);
        part = st.part;
        if level > 0 {
            let cmap = &maps[level - 1];
            part = cmap.iter().map(|&c| part[c]).collect();
        }
    }
    Partition::from_assignment(part, num_parts, epsilon)
}
