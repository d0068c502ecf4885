//! Discrete trees: Chu-Liu-Edmonds decoding, exhaustive enumeration, hop
//! distances, and the aspect/opinion analyses built on them.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;

use serde::Serialize;

use crate::data::{Instance, Lexicon};
use crate::error::{Error, Result};
use crate::inducer::{ScoreSet, TreeMarginals};
use crate::tensor::Tensor;

/// Added to marginals before taking logs for decoding.
pub const LOG_EPS: f64 = 1e-12;

/// Largest node count accepted by the exhaustive routines.
pub const MAX_ENUMERATION_NODES: usize = 6;

/// A single-root spanning arborescence; `heads[root]` is `None`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Arborescence {
    pub heads: Vec<Option<usize>>,
    pub root: usize,
    pub score: f64,
}

impl Arborescence {
    /// Build from a head vector, checking the tree invariants.
    pub fn from_heads(heads: Vec<Option<usize>>, score: f64) -> Result<Self> {
        let root = check_heads(&heads).map_err(Error::Invalid)?;
        Ok(Arborescence { heads, root, score })
    }

    /// From 0-based parse heads with `-1` marking the root.
    pub fn from_parse_heads(heads: &[i64]) -> Result<Self> {
        let heads = heads
            .iter()
            .map(|&h| if h < 0 { None } else { Some(h as usize) })
            .collect();
        Arborescence::from_heads(heads, 0.0)
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn is_valid(&self) -> bool {
        check_heads(&self.heads) == Ok(self.root)
    }

    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.heads.len()];
        for (dep, head) in self.heads.iter().enumerate() {
            if let Some(h) = *head {
                adj[h].push(dep);
                adj[dep].push(h);
            }
        }
        adj
    }

    /// Undirected hop counts from the nearest of `sources` to every node.
    pub fn distances_from(&self, sources: &[usize]) -> Vec<usize> {
        let adj = self.adjacency();
        let mut dist = vec![usize::MAX; self.heads.len()];
        let mut queue = VecDeque::new();
        for &s in sources {
            if dist[s] != 0 {
                dist[s] = 0;
                queue.push_back(s);
            }
        }
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }
}

/// Returns the root index if `heads` forms one arborescence.
fn check_heads(heads: &[Option<usize>]) -> std::result::Result<usize, String> {
    let n = heads.len();
    if n == 0 {
        return Err("empty tree".into());
    }
    let roots: Vec<usize> = (0..n).filter(|&i| heads[i].is_none()).collect();
    if roots.len() != 1 {
        return Err(format!("expected one root, found {}", roots.len()));
    }
    for (i, h) in heads.iter().enumerate() {
        if let Some(h) = *h {
            if h >= n || h == i {
                return Err(format!("invalid head {h} for node {i}"));
            }
        }
    }
    for start in 0..n {
        let mut node = start;
        let mut steps = 0;
        while let Some(h) = heads[node] {
            node = h;
            steps += 1;
            if steps > n {
                return Err("cycle in heads".into());
            }
        }
    }
    Ok(roots[0])
}

/// Shortest undirected path length between `u` and `v`.
pub fn hop_distance(tree: &Arborescence, u: usize, v: usize) -> Result<usize> {
    let n = tree.len();
    if u >= n || v >= n {
        return Err(Error::Invalid(format!("node index out of range for {n}-node tree")));
    }
    Ok(tree.distances_from(&[u])[v])
}

/// Maximum-weight spanning arborescence rooted at `root`, where
/// `weights[(head, dep)]` scores the edge `head → dep`. The diagonal is
/// ignored. Returns head indices (`None` at the root).
pub fn max_spanning_arborescence(weights: &Tensor, root: usize) -> Result<Vec<Option<usize>>> {
    let n = weights.rows();
    if n == 0 || weights.cols() != n || root >= n {
        return Err(Error::shape("max_spanning_arborescence", format!("{:?}, root {root}", weights.shape())));
    }
    let w: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { f64::NEG_INFINITY } else { weights.get(i, j) }).collect())
        .collect();
    Ok(chu_liu_edmonds(&w, root))
}

fn chu_liu_edmonds(w: &[Vec<f64>], root: usize) -> Vec<Option<usize>> {
    let n = w.len();
    // Best incoming edge per node, lowest head on ties.
    let mut parent: Vec<Option<usize>> = vec![None; n];
    for v in 0..n {
        if v == root {
            continue;
        }
        let mut best: Option<usize> = None;
        for u in 0..n {
            if u == v {
                continue;
            }
            if best.is_none_or(|b| w[u][v] > w[b][v]) {
                best = Some(u);
            }
        }
        parent[v] = best;
    }

    let Some(cycle) = find_cycle(&parent) else {
        return parent;
    };
    let in_cycle: Vec<bool> = (0..n).map(|v| cycle.contains(&v)).collect();

    // Contract the cycle into node `c`; the others keep their relative order.
    let mut map = vec![usize::MAX; n];
    let mut next = 0;
    for v in 0..n {
        if !in_cycle[v] {
            map[v] = next;
            next += 1;
        }
    }
    let c = next;
    let size = next + 1;
    let mut cw = vec![vec![f64::NEG_INFINITY; size]; size];
    // For edges into the cycle remember which cycle node they enter; for
    // edges leaving it, which cycle node they leave from.
    let mut enter = vec![usize::MAX; size];
    let mut leave = vec![usize::MAX; size];
    for u in 0..n {
        for v in 0..n {
            if u == v || !w[u][v].is_finite() {
                continue;
            }
            match (in_cycle[u], in_cycle[v]) {
                (false, false) => cw[map[u]][map[v]] = w[u][v],
                (false, true) => {
                    let pv = parent[v].expect("cycle nodes have parents");
                    let gain = w[u][v] - w[pv][v];
                    if gain > cw[map[u]][c] {
                        cw[map[u]][c] = gain;
                        enter[map[u]] = v;
                    }
                }
                (true, false) => {
                    if w[u][v] > cw[c][map[v]] {
                        cw[c][map[v]] = w[u][v];
                        leave[map[v]] = u;
                    }
                }
                (true, true) => {}
            }
        }
    }

    let contracted = chu_liu_edmonds(&cw, map[root]);

    let mut heads: Vec<Option<usize>> = vec![None; n];
    for &v in &cycle {
        heads[v] = parent[v];
    }
    let unmap: Vec<usize> = (0..n).filter(|&v| !in_cycle[v]).collect();
    for (cv, head) in contracted.iter().enumerate() {
        let Some(ch) = *head else { continue };
        if cv == c {
            let u = unmap[ch];
            heads[enter[ch]] = Some(u);
        } else {
            let v = unmap[cv];
            heads[v] = Some(if ch == c { leave[cv] } else { unmap[ch] });
        }
    }
    heads
}

fn find_cycle(parent: &[Option<usize>]) -> Option<Vec<usize>> {
    let n = parent.len();
    let mut state = vec![0u8; n]; // 0 unseen, 1 on current path, 2 done
    for start in 0..n {
        let mut path = Vec::new();
        let mut v = start;
        loop {
            if state[v] == 2 {
                break;
            }
            if state[v] == 1 {
                let pos = path.iter().position(|&x| x == v).expect("on path");
                let mut cycle = path[pos..].to_vec();
                cycle.sort_unstable();
                return Some(cycle);
            }
            state[v] = 1;
            path.push(v);
            match parent[v] {
                Some(p) => v = p,
                None => break,
            }
        }
        for &p in &path {
            state[p] = 2;
        }
    }
    None
}

/// Sum of `weights[(head, dep)]` over the tree's edges.
pub fn tree_score(weights: &Tensor, heads: &[Option<usize>]) -> f64 {
    heads
        .iter()
        .enumerate()
        .filter_map(|(d, h)| h.map(|h| weights.get(h, d)))
        .sum()
}

/// Decode the argmax-root tree from marginals: root = argmax `Pr` (lowest
/// index on ties), edges maximize `Σ log(P_ij + 1e-12)`.
pub fn cle_extract(marginals: &TreeMarginals) -> Result<Arborescence> {
    let m = marginals.size();
    if m == 0 {
        return Err(Error::Invalid("empty marginals".into()));
    }
    let mut root = 0;
    for (i, &p) in marginals.roots.iter().enumerate() {
        if p > marginals.roots[root] {
            root = i;
        }
    }
    let weights = marginals.edges.map(|p| (p.max(0.0) + LOG_EPS).ln());
    let heads = max_spanning_arborescence(&weights, root)?;
    let score = tree_score(&weights, &heads);
    Arborescence::from_heads(heads, score)
}

/// Every single-root spanning arborescence on `m` labeled nodes
/// (`m^(m-1)` of them), in lexicographic order of head vectors.
pub fn enumerate_arborescences(m: usize) -> Result<Vec<Arborescence>> {
    if !(1..=MAX_ENUMERATION_NODES).contains(&m) {
        return Err(Error::Invalid(format!(
            "enumeration needs 1 ≤ m ≤ {MAX_ENUMERATION_NODES}, got {m}"
        )));
    }
    let mut out = Vec::new();
    // Each node's head is encoded as 0 = root, k = node k-1.
    let mut code = vec![0usize; m];
    loop {
        let heads: Vec<Option<usize>> = code.iter().map(|&c| c.checked_sub(1)).collect();
        if let Ok(root) = check_heads(&heads) {
            out.push(Arborescence { heads, root, score: 0.0 });
        }
        let mut k = m;
        loop {
            if k == 0 {
                return Ok(out);
            }
            k -= 1;
            code[k] += 1;
            if code[k] <= m {
                break;
            }
            code[k] = 0;
        }
    }
}

/// Marginals by summing over every arborescence (`m ≤ 6`).
pub fn oracle_marginals(scores: &ScoreSet) -> Result<TreeMarginals> {
    let m = scores.size();
    let trees = enumerate_arborescences(m)?;
    let log_weights: Vec<f64> = trees
        .iter()
        .map(|t| {
            scores.roots[t.root]
                + t.heads
                    .iter()
                    .enumerate()
                    .filter_map(|(d, h)| h.map(|h| scores.edges.get(h, d)))
                    .sum::<f64>()
        })
        .collect();
    let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_weights.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = weights.iter().sum();

    let mut edges = Tensor::zeros(m, m);
    let mut roots = vec![0.0; m];
    for (tree, w) in trees.iter().zip(&weights) {
        let p = w / z;
        roots[tree.root] += p;
        for (d, h) in tree.heads.iter().enumerate() {
            if let Some(h) = *h {
                edges.add_at(h, d, p);
            }
        }
    }
    Ok(TreeMarginals {
        edges,
        roots,
        log_z: max + z.ln(),
    })
}

/// Best tree by exhaustive search among those rooted at `root`.
pub fn brute_force_max(weights: &Tensor, root: Option<usize>) -> Result<(Vec<Option<usize>>, f64)> {
    let trees = enumerate_arborescences(weights.rows())?;
    trees
        .into_iter()
        .filter(|t| root.is_none_or(|r| t.root == r))
        .map(|t| {
            let s = tree_score(weights, &t.heads);
            (t.heads, s)
        })
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or_else(|| Error::Invalid("no trees".into()))
}

/// Where tree nodes sit relative to token positions: external parse trees
/// index tokens directly, model trees put the synthetic node at 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TreeSource {
    Parser,
    Mtt,
    Aclt,
}

impl TreeSource {
    pub fn token_offset(self) -> usize {
        match self {
            TreeSource::Parser => 0,
            TreeSource::Mtt | TreeSource::Aclt => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TreeSource::Parser => "parser",
            TreeSource::Mtt => "mtt",
            TreeSource::Aclt => "aclt",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "parser" => Ok(TreeSource::Parser),
            "mtt" => Ok(TreeSource::Mtt),
            "aclt" => Ok(TreeSource::Aclt),
            other => Err(Error::Invalid(format!("unknown tree source `{other}`"))),
        }
    }
}

/// Mean hop distance of one opinion word to the aspect under one source.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceRow {
    pub word: String,
    pub mean_distance: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SourceDistances {
    pub source: TreeSource,
    pub rows: Vec<DistanceRow>,
    /// Mean over every opinion occurrence.
    pub overall_mean: Option<f64>,
    pub occurrences: usize,
    /// Instances skipped because the source had no tree for them.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceReport {
    pub sources: Vec<SourceDistances>,
}

impl DistanceReport {
    pub fn get(&self, source: TreeSource) -> Option<&SourceDistances> {
        self.sources.iter().find(|s| s.source == source)
    }

    /// Aligned columns: one row per word, one column per source.
    pub fn to_text(&self) -> String {
        let mut words: Vec<&str> = Vec::new();
        for s in &self.sources {
            for r in &s.rows {
                if !words.contains(&r.word.as_str()) {
                    words.push(&r.word);
                }
            }
        }
        let mut out = String::new();
        let _ = write!(out, "{:<16}", "word");
        for s in &self.sources {
            let _ = write!(out, "{:>14}", s.source.as_str());
        }
        out.push('\n');
        for w in words {
            let _ = write!(out, "{w:<16}");
            for s in &self.sources {
                match s.rows.iter().find(|r| r.word == w) {
                    Some(r) => {
                        let _ = write!(out, "{:>14}", format!("{:.2} ({})", r.mean_distance, r.count));
                    }
                    None => {
                        let _ = write!(out, "{:>14}", "-");
                    }
                }
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<16}", "overall");
        for s in &self.sources {
            let cell = s.overall_mean.map_or("-".to_string(), |m| format!("{m:.2} ({})", s.occurrences));
            let _ = write!(out, "{cell:>14}");
        }
        out.push('\n');
        out
    }
}

/// Opinion-to-aspect hop distances for each source. `trees[s][k]` is the
/// tree of `instances[k]` under `sources[s]`, or `None` when unavailable.
/// Each lexicon-word occurrence contributes its minimum distance to any
/// aspect token; occurrences inside the aspect span are ignored.
pub fn distance_report(
    instances: &[Instance],
    sources: &[(TreeSource, Vec<Option<Arborescence>>)],
    lexicon: &Lexicon,
) -> Result<DistanceReport> {
    let mut out = Vec::new();
    for (source, trees) in sources {
        if trees.len() != instances.len() {
            return Err(Error::Invalid(format!(
                "{} trees for {} instances ({})",
                trees.len(),
                instances.len(),
                source.as_str()
            )));
        }
        let offset = source.token_offset();
        let mut per_word: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        let mut skipped = 0;
        let (mut total, mut occurrences) = (0usize, 0usize);
        for (inst, tree) in instances.iter().zip(trees) {
            let Some(tree) = tree else {
                skipped += 1;
                continue;
            };
            if tree.len() != inst.len() + offset {
                return Err(Error::Invalid(format!(
                    "tree of {} nodes for instance `{}` with {} tokens",
                    tree.len(),
                    inst.id,
                    inst.len()
                )));
            }
            let aspect: Vec<usize> = (inst.aspect_span.0..inst.aspect_span.1).map(|t| t + offset).collect();
            let dist = tree.distances_from(&aspect);
            for (t, token) in inst.tokens.iter().enumerate() {
                if inst.in_aspect(t) {
                    continue;
                }
                let lower = token.to_lowercase();
                let Some(word) = lexicon.words().find(|w| *w == lower) else { continue };
                let d = dist[t + offset];
                let e = per_word.entry(word).or_insert((0, 0));
                e.0 += d;
                e.1 += 1;
                total += d;
                occurrences += 1;
            }
        }
        let rows = per_word
            .into_iter()
            .map(|(w, (sum, count))| DistanceRow {
                word: w.to_string(),
                mean_distance: sum as f64 / count as f64,
                count,
            })
            .collect();
        out.push(SourceDistances {
            source: *source,
            rows,
            overall_mean: (occurrences > 0).then(|| total as f64 / occurrences as f64),
            occurrences,
            skipped,
        });
    }
    Ok(DistanceReport { sources: out })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RootConsistency {
    pub consistent: usize,
    pub total: usize,
    pub percent: f64,
}

/// How many trees are rooted inside the aspect span.
pub fn root_consistency(
    instances: &[Instance],
    trees: &[Arborescence],
    source: TreeSource,
) -> Result<RootConsistency> {
    if instances.len() != trees.len() {
        return Err(Error::Invalid(format!(
            "{} trees for {} instances",
            trees.len(),
            instances.len()
        )));
    }
    let offset = source.token_offset();
    let consistent = instances
        .iter()
        .zip(trees)
        .filter(|(inst, tree)| tree.root >= offset && inst.in_aspect(tree.root - offset))
        .count();
    let total = instances.len();
    Ok(RootConsistency {
        consistent,
        total,
        percent: if total == 0 { 0.0 } else { 100.0 * consistent as f64 / total as f64 },
    })
}

/// Synthetic-node label in tree dumps.
pub const NODE0_LABEL: &str = "<s>";

/// One tree block: `index<TAB>token<TAB>head<TAB>root_prob` per node, head
/// `ROOT` for the root. Node 0 is the synthetic sentence node.
pub fn format_tree_block(instance: &Instance, tree: &Arborescence, marginals: &TreeMarginals) -> String {
    let mut out = format!("# id = {}\n", instance.id);
    for (i, head) in tree.heads.iter().enumerate() {
        let token = if i == 0 { NODE0_LABEL } else { &instance.tokens[i - 1] };
        let head = head.map_or("ROOT".to_string(), |h| h.to_string());
        let _ = writeln!(out, "{i}\t{token}\t{head}\t{:.6}", marginals.roots[i]);
    }
    out.push('\n');
    out
}

/// Parse tree blocks back into `(id, heads, root probabilities)`.
pub fn parse_tree_dump(text: &str) -> Result<Vec<(String, Arborescence, Vec<f64>)>> {
    let mut out = Vec::new();
    let mut id = String::new();
    let mut heads = Vec::new();
    let mut probs = Vec::new();
    let mut flush = |id: &mut String, heads: &mut Vec<Option<usize>>, probs: &mut Vec<f64>| -> Result<()> {
        if !heads.is_empty() {
            let tree = Arborescence::from_heads(std::mem::take(heads), 0.0)?;
            out.push((std::mem::take(id), tree, std::mem::take(probs)));
        }
        Ok(())
    };
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# id = ") {
            id = rest.to_string();
        } else if line.starts_with('#') {
            continue;
        } else if line.trim().is_empty() {
            flush(&mut id, &mut heads, &mut probs)?;
        } else {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::Invalid(format!("bad tree line `{line}`")));
            }
            let bad = |_| Error::Invalid(format!("bad tree line `{line}`"));
            heads.push(if fields[2] == "ROOT" { None } else { Some(fields[2].parse().map_err(bad)?) });
            probs.push(fields[3].parse().map_err(|_| Error::Invalid(format!("bad tree line `{line}`")))?);
        }
    }
    flush(&mut id, &mut heads, &mut probs)?;
    Ok(out)
}
