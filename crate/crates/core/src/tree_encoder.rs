//! Turns tree marginals into structured node representations, either by
//! structured attention over soft parents and children or by a GCN over the
//! symmetrized marginal adjacency. Also hosts the order-k adjacency pruning.

use std::ops::Range;

use rand::Rng;

use crate::autodiff::{Init, NodeId, ParamStore, Tape};
use crate::config::{ChildContext, TreeEncoderConfig, TreeEncoderKind};
use crate::error::{Error, Result};
use crate::inducer::TreeMarginals;
use crate::tensor::Tensor;
use crate::trees::Arborescence;

pub const ATTN_W: &str = "attn.w";

pub fn gcn_weight(layer: usize) -> String {
    format!("gcn.{layer}.w")
}

pub fn gcn_bias(layer: usize) -> String {
    format!("gcn.{layer}.b")
}

pub fn init_params(store: &mut ParamStore, config: &TreeEncoderConfig, dim: usize, rng: &mut impl Rng) -> Result<()> {
    for (name, [r, c]) in param_shapes(config, dim) {
        let init = if name.ends_with(".b") { Init::Zeros } else { Init::Glorot };
        store.init(name, r, c, init, rng)?;
    }
    Ok(())
}

pub fn param_shapes(config: &TreeEncoderConfig, dim: usize) -> Vec<(String, [usize; 2])> {
    match config.kind {
        TreeEncoderKind::StructuredAttention => vec![(ATTN_W.to_string(), [3 * dim, dim])],
        TreeEncoderKind::Gcn => (0..config.layers)
            .flat_map(|l| [(gcn_weight(l), [dim, dim]), (gcn_bias(l), [1, dim])])
            .collect(),
    }
}

/// Structured representations `S` (`m × d`); row 0 is the sentence-level
/// vector fed to the classifier.
///
/// Parent context `s^p = Pᵀ·H + Pr·h_a`, child context `s^c = P·H` (or
/// `rowsum(P) ⊙ H` for [`ChildContext::SelfState`]), and
/// `S = tanh([s^p, s^c, H]·W_s)`.
pub fn structured_attention(
    tape: &mut Tape,
    store: &ParamStore,
    h: NodeId,
    edges: NodeId,
    roots: NodeId,
    h_a: NodeId,
    child_ctx: ChildContext,
) -> Result<NodeId> {
    let [m, d] = tape.shape(h);
    if tape.shape(edges) != [m, m] || tape.shape(roots) != [m, 1] || tape.shape(h_a) != [1, d] {
        return Err(Error::shape(
            "structured_attention",
            format!(
                "H {:?}, P {:?}, Pr {:?}, h_a {:?}",
                [m, d],
                tape.shape(edges),
                tape.shape(roots),
                tape.shape(h_a)
            ),
        ));
    }
    let pt = tape.transpose(edges)?;
    let from_parents = tape.matmul(pt, h)?;
    let from_root = tape.matmul(roots, h_a)?;
    let parent = tape.add(from_parents, from_root)?;
    let child = match child_ctx {
        ChildContext::Children => tape.matmul(edges, h)?,
        ChildContext::SelfState => {
            let mass = tape.row_sums(edges)?;
            tape.mul(h, mass)?
        }
    };
    let joined = tape.concat_cols(&[parent, child, h])?;
    let w = tape.param(store, ATTN_W)?;
    let mixed = tape.matmul(joined, w)?;
    tape.tanh(mixed)
}

/// Row-normalized `P + Pᵀ + I`.
pub fn gcn_adjacency(tape: &mut Tape, edges: NodeId) -> Result<NodeId> {
    let [m, c] = tape.shape(edges);
    if m != c {
        return Err(Error::shape("gcn_adjacency", format!("{:?}", [m, c])));
    }
    let pt = tape.transpose(edges)?;
    let sym = tape.add(edges, pt)?;
    let eye = tape.constant(Tensor::identity(m))?;
    let a = tape.add(sym, eye)?;
    let deg = tape.row_sums(a)?;
    tape.div(a, deg)
}

/// `layers` rounds of `ReLU(Â·H·W + b)`.
pub fn gcn_encode(tape: &mut Tape, store: &ParamStore, h: NodeId, edges: NodeId, layers: usize) -> Result<NodeId> {
    if layers == 0 {
        return Err(Error::Invalid("gcn needs at least one layer".into()));
    }
    let [m, _] = tape.shape(h);
    if tape.shape(edges) != [m, m] {
        return Err(Error::shape("gcn_encode", format!("H {:?}, P {:?}", tape.shape(h), tape.shape(edges))));
    }
    let adj = gcn_adjacency(tape, edges)?;
    let mut x = h;
    for l in 0..layers {
        let agg = tape.matmul(adj, x)?;
        let w = tape.param(store, &gcn_weight(l))?;
        let b = tape.param(store, &gcn_bias(l))?;
        let lin = tape.matmul(agg, w)?;
        let lin = tape.add(lin, b)?;
        x = tape.relu(lin)?;
    }
    Ok(x)
}

/// Dispatch on the configured tree encoder.
pub fn encode_structure(
    tape: &mut Tape,
    store: &ParamStore,
    config: &TreeEncoderConfig,
    h: NodeId,
    edges: NodeId,
    roots: NodeId,
    h_a: NodeId,
) -> Result<NodeId> {
    match config.kind {
        TreeEncoderKind::StructuredAttention => structured_attention(tape, store, h, edges, roots, h_a, config.child_ctx),
        TreeEncoderKind::Gcn => gcn_encode(tape, store, h, edges, config.layers),
    }
}

/// Which `P_ij` survive order-`k` pruning: both endpoints within `k` hops
/// of the aspect and at least one strictly closer, i.e. exactly the edges
/// a breadth-first search from the aspect crosses within `k` steps.
pub fn prune_keep(tree: &Arborescence, aspect_rows: Range<usize>, k: usize) -> Result<Tensor> {
    if k == 0 {
        return Err(Error::Invalid("prune order must be at least 1".into()));
    }
    let m = tree.len();
    if aspect_rows.is_empty() || aspect_rows.end > m {
        return Err(Error::Invalid(format!("aspect rows {aspect_rows:?} outside {m}-node tree")));
    }
    let sources: Vec<usize> = aspect_rows.collect();
    let dist = tree.distances_from(&sources);
    Ok(Tensor::from_fn(m, m, |i, j| {
        let (near, far) = (dist[i].min(dist[j]), dist[i].max(dist[j]));
        if i != j && near < k && far <= k {
            1.0
        } else {
            0.0
        }
    }))
}

/// Copy of `marginals` with edges outside the order-`k` neighborhood zeroed.
/// `None` is the unpruned identity. Root marginals are untouched and nothing
/// is renormalized.
pub fn prune_mask(
    marginals: &TreeMarginals,
    aspect_rows: Range<usize>,
    k: Option<usize>,
    tree: &Arborescence,
) -> Result<TreeMarginals> {
    let Some(k) = k else {
        return Ok(marginals.clone());
    };
    if tree.len() != marginals.size() {
        return Err(Error::shape(
            "prune_mask",
            format!("{}-node tree for {} marginals", tree.len(), marginals.size()),
        ));
    }
    let keep = prune_keep(tree, aspect_rows, k)?;
    Ok(TreeMarginals {
        edges: marginals.edges.zip_map(&keep, |p, k| p * k),
        roots: marginals.roots.clone(),
        log_z: marginals.log_z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::inducer::{marginals, ScoreSet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn random_marginals(m: usize, rng: &mut ChaCha8Rng) -> TreeMarginals {
        let s = ScoreSet::new(random(m, m, rng), (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        marginals(&s).unwrap()
    }

    fn store_with(config: &TreeEncoderConfig, d: usize, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        init_params(&mut store, config, d, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        store
    }

    fn run_attention(
        store: &ParamStore,
        h: &Tensor,
        marg: &TreeMarginals,
        h_a: &Tensor,
        ctx: ChildContext,
    ) -> Tensor {
        let mut tape = Tape::new();
        let hn = tape.constant(h.clone()).unwrap();
        let p = tape.constant(marg.edges.clone()).unwrap();
        let r = tape.constant(Tensor::col_vector(&marg.roots)).unwrap();
        let a = tape.constant(h_a.clone()).unwrap();
        let s = structured_attention(&mut tape, store, hn, p, r, a, ctx).unwrap();
        tape.value(s).clone()
    }

    #[test]
    fn zero_structure_uses_own_state_only() {
        let d = 3;
        let config = TreeEncoderConfig::default();
        let store = store_with(&config, d, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = random(2, d, &mut rng);
        let marg = TreeMarginals { edges: Tensor::zeros(2, 2), roots: vec![0.0, 0.0], log_z: 0.0 };
        let s = run_attention(&store, &h, &marg, &random(1, d, &mut rng), ChildContext::Children);
        let w = store.value(ATTN_W).unwrap();
        let own = w.slice_rows(2 * d, 3 * d);
        let expected = h.matmul(&own).unwrap().map(f64::tanh);
        assert!(s.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn deterministic_chain_parent_contexts() {
        // W_s selecting the parent block exposes s^p through tanh.
        let d = 2;
        let mut store = ParamStore::new();
        let mut w = Tensor::zeros(3 * d, d);
        w.set(0, 0, 1.0);
        w.set(1, 1, 1.0);
        store.insert(ATTN_W, w, Init::Given).unwrap();
        let h = Tensor::from_rows(&[vec![0.1, 0.2], vec![0.3, -0.4]]).unwrap();
        let h_a = Tensor::row_vector(&[0.5, 0.6]);
        let mut edges = Tensor::zeros(2, 2);
        edges.set(0, 1, 1.0);
        let marg = TreeMarginals { edges, roots: vec![1.0, 0.0], log_z: 0.0 };
        let s = run_attention(&store, &h, &marg, &h_a, ChildContext::Children);
        assert!((s.get(1, 0) - 0.1f64.tanh()).abs() < 1e-15);
        assert!((s.get(1, 1) - 0.2f64.tanh()).abs() < 1e-15);
        assert!((s.get(0, 0) - 0.5f64.tanh()).abs() < 1e-15);
        assert!((s.get(0, 1) - 0.6f64.tanh()).abs() < 1e-15);
    }

    fn loop_attention(w: &Tensor, h: &Tensor, marg: &TreeMarginals, h_a: &Tensor, ctx: ChildContext) -> Tensor {
        let (m, d) = (h.rows(), h.cols());
        let mut out = Tensor::zeros(m, d);
        for i in 0..m {
            let mut x = vec![0.0; 3 * d];
            for c in 0..d {
                let mut p = marg.roots[i] * h_a.get(0, c);
                let mut ch = 0.0;
                for k in 0..m {
                    p += marg.edges.get(k, i) * h.get(k, c);
                    let src = match ctx {
                        ChildContext::Children => h.get(k, c),
                        ChildContext::SelfState => h.get(i, c),
                    };
                    ch += marg.edges.get(i, k) * src;
                }
                x[c] = p;
                x[d + c] = ch;
                x[2 * d + c] = h.get(i, c);
            }
            for c in 0..d {
                let mut acc = 0.0;
                for (r, xv) in x.iter().enumerate() {
                    acc += xv * w.get(r, c);
                }
                out.set(i, c, acc.tanh());
            }
        }
        out
    }

    #[test]
    fn matches_double_loop() {
        let d = 4;
        let store = store_with(&TreeEncoderConfig::default(), d, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for m in 1..=6 {
            let h = random(m, d, &mut rng);
            let h_a = random(1, d, &mut rng);
            let marg = random_marginals(m, &mut rng);
            for ctx in [ChildContext::Children, ChildContext::SelfState] {
                let got = run_attention(&store, &h, &marg, &h_a, ctx);
                let want = loop_attention(store.value(ATTN_W).unwrap(), &h, &marg, &h_a, ctx);
                assert!(got.max_abs_diff(&want) <= 1e-12);
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let d = 3;
        let store = store_with(&TreeEncoderConfig::default(), d, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = 4;
        let h = random(m, d, &mut rng);
        let h_a = random(1, d, &mut rng);
        let marg = random_marginals(m, &mut rng);
        let perm = [0, 3, 1, 2];
        let ph = Tensor::from_fn(m, d, |i, c| h.get(perm[i], c));
        let pm = TreeMarginals {
            edges: Tensor::from_fn(m, m, |i, j| marg.edges.get(perm[i], perm[j])),
            roots: perm.iter().map(|&i| marg.roots[i]).collect(),
            log_z: marg.log_z,
        };
        let s = run_attention(&store, &h, &marg, &h_a, ChildContext::Children);
        let ps = run_attention(&store, &ph, &pm, &h_a, ChildContext::Children);
        let expected = Tensor::from_fn(m, d, |i, c| s.get(perm[i], c));
        assert!(ps.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn attention_gradients() {
        let d = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = 4;
        let mut store = store_with(&TreeEncoderConfig::default(), d, 8);
        store.insert("h", random(m, d, &mut rng), Init::Given).unwrap();
        store.insert("e", random(m, m, &mut rng), Init::Given).unwrap();
        store.insert("r", random(m, 1, &mut rng), Init::Given).unwrap();
        store.insert("h_a", random(1, d, &mut rng), Init::Given).unwrap();
        for ctx in [ChildContext::Children, ChildContext::SelfState] {
            let report = grad_check(
                |tape, store| {
                    let h = tape.param(store, "h")?;
                    let e = tape.param(store, "e")?;
                    let r = tape.param(store, "r")?;
                    let a = tape.param(store, "h_a")?;
                    let marg = crate::inducer::mtt_marginals(tape, e, r)?;
                    let s = structured_attention(tape, store, h, marg.edges, marg.roots, a, ctx)?;
                    let sq = tape.mul(s, s)?;
                    tape.sum(sq)
                },
                &store,
                1e-5,
            )
            .unwrap();
            assert!(report.max_relative_error <= 1e-4, "{report:?}");
        }
    }

    #[test]
    fn structured_attention_shape_errors() {
        let store = store_with(&TreeEncoderConfig::default(), 2, 1);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::zeros(3, 2)).unwrap();
        let p = tape.constant(Tensor::zeros(2, 2)).unwrap();
        let r = tape.constant(Tensor::zeros(3, 1)).unwrap();
        let a = tape.constant(Tensor::zeros(1, 2)).unwrap();
        assert!(structured_attention(&mut tape, &store, h, p, r, a, ChildContext::Children).is_err());
    }

    fn gcn_config(layers: usize) -> TreeEncoderConfig {
        TreeEncoderConfig { kind: TreeEncoderKind::Gcn, layers, ..TreeEncoderConfig::default() }
    }

    fn run_gcn(store: &ParamStore, h: &Tensor, edges: &Tensor, layers: usize) -> Tensor {
        let mut tape = Tape::new();
        let hn = tape.constant(h.clone()).unwrap();
        let p = tape.constant(edges.clone()).unwrap();
        let out = gcn_encode(&mut tape, store, hn, p, layers).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn gcn_zero_weights_give_zero() {
        let d = 3;
        let config = gcn_config(2);
        let mut store = store_with(&config, d, 1);
        for (_, p) in store.iter_mut() {
            p.value.fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = run_gcn(&store, &random(4, d, &mut rng), &random_marginals(4, &mut rng).edges, 2);
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn gcn_self_loop_only() {
        let d = 3;
        let store = store_with(&gcn_config(1), d, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = random(3, d, &mut rng);
        let out = run_gcn(&store, &h, &Tensor::zeros(3, 3), 1);
        let expected = h.matmul(store.value(&gcn_weight(0)).unwrap()).unwrap().map(|v| v.max(0.0));
        assert!(out.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn gcn_matches_naive_two_layers() {
        let d = 3;
        let store = store_with(&gcn_config(2), d, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = 5;
        let h = random(m, d, &mut rng);
        let p = random_marginals(m, &mut rng).edges;
        let got = run_gcn(&store, &h, &p, 2);

        let a = Tensor::from_fn(m, m, |i, j| p.get(i, j) + p.get(j, i) + if i == j { 1.0 } else { 0.0 });
        let mut x = h.clone();
        for l in 0..2 {
            let w = store.value(&gcn_weight(l)).unwrap();
            let b = store.value(&gcn_bias(l)).unwrap();
            let mut next = Tensor::zeros(m, d);
            for i in 0..m {
                let deg: f64 = (0..m).map(|k| a.get(i, k)).sum();
                for c in 0..d {
                    let mut acc = b.get(0, c);
                    for r in 0..d {
                        let agg: f64 = (0..m).map(|k| a.get(i, k) / deg * x.get(k, r)).sum();
                        acc += agg * w.get(r, c);
                    }
                    next.set(i, c, acc.max(0.0));
                }
            }
            x = next;
        }
        assert!(got.max_abs_diff(&x) <= 1e-12);
        assert!(got.as_slice().iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    fn star(m: usize, center: usize) -> Arborescence {
        let heads = (0..m).map(|i| if i == center { None } else { Some(center) }).collect();
        Arborescence::from_heads(heads, 0.0).unwrap()
    }

    #[test]
    fn prune_without_k_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let marg = random_marginals(4, &mut rng);
        let out = prune_mask(&marg, 1..2, None, &star(4, 1)).unwrap();
        assert_eq!(out, marg);
    }

    #[test]
    fn prune_star_keeps_root_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let marg = random_marginals(5, &mut rng);
        let out = prune_mask(&marg, 2..3, Some(1), &star(5, 2)).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let kept = out.edges.get(i, j) == marg.edges.get(i, j);
                let touches_center = i == 2 || j == 2;
                assert_eq!(kept, touches_center || i == j, "({i}, {j})");
            }
        }
        assert_eq!(out.roots, marg.roots);
    }

    #[test]
    fn prune_matches_bfs_neighborhood() {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let m = 6;
            let mut order: Vec<usize> = (0..m).collect();
            order.shuffle(&mut rng);
            let mut heads = vec![None; m];
            for k in 1..m {
                heads[order[k]] = Some(order[rng.gen_range(0..k)]);
            }
            let tree = Arborescence::from_heads(heads.clone(), 0.0).unwrap();
            let aspect = rng.gen_range(0..m);
            let keep = prune_keep(&tree, aspect..aspect + 1, 2).unwrap();

            // Edges crossed by a breadth-first search limited to two steps.
            let mut oracle = Tensor::zeros(m, m);
            let mut frontier = vec![aspect];
            let mut seen = vec![aspect];
            for _ in 0..2 {
                let mut next = Vec::new();
                for &u in &frontier {
                    for v in 0..m {
                        if (heads[v] == Some(u) || heads[u] == Some(v)) && !seen.contains(&v) {
                            seen.push(v);
                            next.push(v);
                        }
                    }
                }
                frontier = next;
            }
            let dist = tree.distances_from(&[aspect]);
            for &u in &seen {
                for &v in &seen {
                    if u != v && dist[u].min(dist[v]) < 2 {
                        oracle.set(u, v, 1.0);
                    }
                }
            }
            assert_eq!(keep, oracle);
        }
    }

    #[test]
    fn larger_k_keeps_superset() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let marg = random_marginals(6, &mut rng);
        let tree = Arborescence::from_heads(vec![None, Some(0), Some(1), Some(2), Some(3), Some(4)], 0.0).unwrap();
        let k1 = prune_mask(&marg, 2..3, Some(1), &tree).unwrap();
        let k2 = prune_mask(&marg, 2..3, Some(2), &tree).unwrap();
        for (a, b) in k1.edges.as_slice().iter().zip(k2.edges.as_slice()) {
            assert!(*a == 0.0 || a == b);
        }
        for (a, b) in k2.edges.as_slice().iter().zip(marg.edges.as_slice()) {
            assert!(a <= b);
        }
        assert!(prune_keep(&tree, 2..3, 0).is_err());
    }
}
