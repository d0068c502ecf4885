//! The full model: encoder, tree inducer, tree encoder and sentiment head,
//! plus the loss composition used for training.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Init, NodeId, ParamStore, Tape};
use crate::config::Config;
use crate::data::{EmbeddingTable, Instance, Polarity};
use crate::encoder::{self, Vocab};
use crate::error::{Error, Result};
use crate::inducer::{self, MarginalNodes, MttVariant, TreeMarginals};
use crate::tensor::Tensor;
use crate::tree_encoder;
use crate::trees;

pub const CLS_W: &str = "cls.w";
pub const CLS_B: &str = "cls.b";
pub const NUM_CLASSES: usize = 3;
/// Lower clamp on the gold-class probability inside the log.
pub const PROB_CLAMP: f64 = 1e-12;

/// Training passes apply dropout from a per-instance seed; evaluation does not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { dropout_seed: u64 },
}

/// Nodes recorded by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `1 × 3` class probabilities.
    pub probs: NodeId,
    pub loss_a: NodeId,
    pub loss_s: NodeId,
    /// What training minimizes.
    pub loss: NodeId,
    pub marginals: MarginalNodes,
    /// Rows of the aspect tokens among the `n + 1` nodes.
    pub aspect_rows: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: [f64; NUM_CLASSES],
    pub label: Polarity,
    pub marginals: TreeMarginals,
    pub aspect_root_mass: f64,
}

/// `softmax(s0 · W_p + b_p)` as a `1 × 3` row.
pub fn classify(tape: &mut Tape, store: &ParamStore, s0: NodeId) -> Result<NodeId> {
    let w = tape.param(store, CLS_W)?;
    let b = tape.param(store, CLS_B)?;
    if tape.shape(s0)[0] != 1 {
        return Err(Error::shape("classify", format!("s0 {:?}", tape.shape(s0))));
    }
    let logits = tape.matmul(s0, w)?;
    let logits = tape.add(logits, b)?;
    tape.softmax_rows(logits)
}

/// `-log(max(probs[gold], 1e-12))`.
pub fn sentiment_loss(tape: &mut Tape, probs: NodeId, gold: usize) -> Result<NodeId> {
    if gold >= NUM_CLASSES {
        return Err(Error::Invalid(format!("invalid label index {gold}")));
    }
    if tape.shape(probs) != [1, NUM_CLASSES] {
        return Err(Error::shape("sentiment_loss", format!("probs {:?}", tape.shape(probs))));
    }
    let p = tape.slice(probs, (0, 1), (gold, gold + 1))?;
    let p = tape.clamp(p, PROB_CLAMP, 1.0)?;
    let log_p = tape.log(p)?;
    tape.scale(log_p, -1.0)
}

/// `α·L_a + (1 − α)·L_s`.
pub fn combined_loss(tape: &mut Tape, loss_a: NodeId, loss_s: NodeId, alpha: f64) -> Result<NodeId> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha out of range: {alpha} not in (0, 1)")));
    }
    let a = tape.scale(loss_a, alpha)?;
    let s = tape.scale(loss_s, 1.0 - alpha)?;
    tape.add(a, s)
}

/// Root probability mass on `aspect_rows`.
pub fn aspect_root_mass(marginals: &TreeMarginals, aspect_rows: Range<usize>) -> f64 {
    marginals.roots[aspect_rows].iter().sum()
}

/// Parameter names and shapes implied by a configuration.
pub fn param_shapes(config: &Config, vocab_len: usize) -> Vec<(String, [usize; 2])> {
    let d = config.encoder.dim;
    let mut shapes = encoder::param_shapes(&config.encoder, vocab_len, config.encoder.embed_dim);
    shapes.extend(inducer::param_shapes(d));
    shapes.extend(tree_encoder::param_shapes(&config.tree_encoder, d));
    shapes.push((CLS_W.to_string(), [d, NUM_CLASSES]));
    shapes.push((CLS_B.to_string(), [1, NUM_CLASSES]));
    shapes.sort();
    shapes
}

/// Random embeddings for the reserved entries plus every (lowercased when
/// configured) training token.
pub fn training_table(instances: &[Instance], config: &Config) -> EmbeddingTable {
    let words = instances.iter().flat_map(|inst| inst.tokens.iter()).map(|t| {
        if config.encoder.lowercase {
            t.to_lowercase()
        } else {
            t.clone()
        }
    });
    EmbeddingTable::random(words, config.encoder.embed_dim, config.train.seed)
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: Config,
    pub vocab: Vocab,
    pub params: ParamStore,
}

impl Model {
    /// Fresh parameters drawn from `config.train.seed`.
    pub fn new(config: Config, table: &EmbeddingTable) -> Result<Self> {
        config.validate()?;
        if table.dim() != config.encoder.embed_dim {
            return Err(Error::Config(format!(
                "embedding width {} does not match encoder.embed_dim {}",
                table.dim(),
                config.encoder.embed_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let mut params = ParamStore::new();
        let d = config.encoder.dim;
        encoder::init_params(&mut params, &config.encoder, table, &mut rng)?;
        inducer::init_params(&mut params, d, &mut rng)?;
        tree_encoder::init_params(&mut params, &config.tree_encoder, d, &mut rng)?;
        params.init(CLS_W, d, NUM_CLASSES, Init::Glorot, &mut rng)?;
        params.init(CLS_B, 1, NUM_CLASSES, Init::Zeros, &mut rng)?;
        let model = Model {
            config,
            vocab: Vocab::from_table(table),
            params,
        };
        model.check_shapes()?;
        Ok(model)
    }

    /// Every expected parameter is present with the expected shape, and
    /// nothing else is.
    pub fn check_shapes(&self) -> Result<()> {
        let expected = param_shapes(&self.config, self.vocab.len());
        for (name, shape) in &expected {
            let p = self
                .params
                .get(name)
                .map_err(|_| Error::Snapshot(format!("missing parameter `{name}`")))?;
            if p.value.shape() != *shape {
                return Err(Error::Snapshot(format!(
                    "parameter `{name}` has shape {:?}, configuration implies {:?}",
                    p.value.shape(),
                    shape
                )));
            }
        }
        if let Some(extra) = self.params.names().find(|n| !expected.iter().any(|(e, _)| e == n)) {
            return Err(Error::Snapshot(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, instance: &Instance, mode: Mode) -> Result<ForwardPass> {
        self.forward_with(tape, &self.params, instance, mode)
    }

    /// Forward pass against an arbitrary parameter store with this model's
    /// configuration and vocabulary.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        instance: &Instance,
        mode: Mode,
    ) -> Result<ForwardPass> {
        forward_pass(tape, store, &self.config, &self.vocab, instance, mode, MttVariant::Standard)
            .map_err(|e| e.for_instance(&instance.id))
    }

    pub fn predict(&self, instance: &Instance) -> Result<Prediction> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, instance, Mode::Eval)?;
        let p = tape.value(pass.probs).as_slice();
        let probs = [p[0], p[1], p[2]];
        let marginals = pass.marginals.read(&tape);
        Ok(Prediction {
            probs,
            label: argmax_label(&probs),
            aspect_root_mass: aspect_root_mass(&marginals, pass.aspect_rows.clone()),
            marginals,
        })
    }
}

/// Lowest index wins ties.
pub fn argmax_label(probs: &[f64; NUM_CLASSES]) -> Polarity {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    Polarity::from_index(best).expect("three classes")
}

fn dropout_mask(rows: usize, cols: usize, rate: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - rate);
    Tensor::from_fn(rows, cols, |_, _| if rng.gen::<f64>() < rate { 0.0 } else { keep })
}

#[doc(hidden)]
pub fn forward_pass(
    tape: &mut Tape,
    store: &ParamStore,
    config: &Config,
    vocab: &Vocab,
    instance: &Instance,
    mode: Mode,
    variant: MttVariant,
) -> Result<ForwardPass> {
    let enc = encoder::encode(tape, store, vocab, instance, &config.encoder)?;
    let mut h = enc.h;
    if let Mode::Train { dropout_seed } = mode {
        if config.train.dropout > 0.0 {
            let [m, d] = tape.shape(h);
            let mask = tape.constant(dropout_mask(m, d, config.train.dropout, dropout_seed))?;
            h = tape.mul(h, mask)?;
        }
    }

    let edge_scores = inducer::edge_scores(tape, store, h)?;
    let root_scores = inducer::root_scores(tape, store, h)?;
    let marginals = inducer::mtt_marginals_variant(tape, edge_scores, root_scores, variant)?;

    let m = tape.shape(h)[0];
    let aspect_rows = enc.aspect_rows.clone();
    let mut edges = marginals.edges;
    if let Some(k) = config.prune.k {
        let tree = trees::cle_extract(&marginals.read(tape))?;
        let keep = tree_encoder::prune_keep(&tree, aspect_rows.clone(), k)?;
        let keep = tape.constant(keep)?;
        edges = tape.mul(edges, keep)?;
    }

    let s = tree_encoder::encode_structure(tape, store, &config.tree_encoder, h, edges, marginals.roots, enc.h_a)?;
    let s0 = tape.slice_rows(s, 0, 1)?;
    let probs = classify(tape, store, s0)?;

    let mask: Vec<bool> = (0..m).map(|i| aspect_rows.contains(&i)).collect();
    let loss_a = inducer::root_refinement_loss(tape, marginals.roots, &mask)?;
    let loss_s = sentiment_loss(tape, probs, instance.polarity.index())?;
    let loss = if config.train.root_refinement {
        combined_loss(tape, loss_a, loss_s, config.train.alpha)?
    } else {
        loss_s
    };
    Ok(ForwardPass {
        probs,
        loss_a,
        loss_s,
        loss,
        marginals,
        aspect_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::config::{EncoderKind, TreeEncoderKind};
    use serde_json::json;

    fn probs_for(w: Tensor, b: Tensor, s0: Tensor) -> Vec<f64> {
        let mut store = ParamStore::new();
        store.insert(CLS_W, w, Init::Given).unwrap();
        store.insert(CLS_B, b, Init::Given).unwrap();
        let mut tape = Tape::new();
        let s = tape.constant(s0).unwrap();
        let p = classify(&mut tape, &store, s).unwrap();
        tape.value(p).as_slice().to_vec()
    }

    #[test]
    fn classify_examples() {
        let p = probs_for(Tensor::zeros(2, 3), Tensor::zeros(1, 3), Tensor::row_vector(&[0.3, -0.2]));
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = probs_for(Tensor::zeros(2, 3), Tensor::row_vector(&[10.0, 0.0, 0.0]), Tensor::row_vector(&[1.0, 1.0]));
        assert!(p[0] > 0.9999);

        let w = Tensor::from_rows(&[vec![0.1, -0.4, 0.7], vec![1.2, 0.3, -0.5]]).unwrap();
        let b = Tensor::row_vector(&[0.05, -0.1, 0.2]);
        let s0 = [0.6, -1.1];
        let p = probs_for(w.clone(), b.clone(), Tensor::row_vector(&s0));
        let logits: Vec<f64> = (0..3).map(|c| s0[0] * w.get(0, c) + s0[1] * w.get(1, c) + b.get(0, c)).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for c in 0..3 {
            assert!((p[c] - logits[c].exp() / z).abs() <= 1e-12);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    fn loss_for(probs: &[f64], gold: usize) -> Result<f64> {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::row_vector(probs))?;
        let l = sentiment_loss(&mut tape, p, gold)?;
        Ok(tape.value(l).item())
    }

    #[test]
    fn sentiment_loss_examples() {
        assert_eq!(loss_for(&[1.0, 0.0, 0.0], 0).unwrap(), 0.0);
        assert!((loss_for(&[1.0 / 3.0; 3], 2).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert!((loss_for(&[0.5, 0.25, 0.25], 1).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!((loss_for(&[1.0, 0.0, 0.0], 1).unwrap() - (-(1e-12f64).ln())).abs() < 1e-9);
        assert!(loss_for(&[1.0, 0.0, 0.0], 3).is_err());
    }

    #[test]
    fn combined_loss_examples() {
        let mut tape = Tape::new();
        let la = tape.constant(Tensor::scalar(2.0)).unwrap();
        let ls = tape.constant(Tensor::scalar(4.0)).unwrap();
        let c = combined_loss(&mut tape, la, ls, 0.5).unwrap();
        assert_eq!(tape.value(c).item(), 3.0);
        let c = combined_loss(&mut tape, la, ls, 0.001).unwrap();
        assert!((tape.value(c).item() - 4.0).abs() < 0.01);
        assert!(combined_loss(&mut tape, la, ls, 1.5).unwrap_err().to_string().contains("alpha out of range"));
        assert!(combined_loss(&mut tape, la, ls, 0.0).is_err());
    }

    fn small_config(kind: EncoderKind, tree: TreeEncoderKind) -> Config {
        let mut c = Config::default();
        c.set("encoder.dim", json!(5)).unwrap();
        c.set("encoder.embed_dim", json!(4)).unwrap();
        c.encoder.kind = kind;
        c.tree_encoder.kind = tree;
        c
    }

    fn instance(tokens: &[&str], span: (usize, usize), polarity: Polarity) -> Instance {
        Instance::new("t", tokens.iter().map(|s| s.to_string()).collect(), span, polarity).unwrap()
    }

    #[test]
    fn combined_gradient_is_linear_in_components() {
        let config = small_config(EncoderKind::Window, TreeEncoderKind::StructuredAttention);
        let inst = instance(&["the", "food", "was", "great"], (1, 2), Polarity::Positive);
        let table = training_table(std::slice::from_ref(&inst), &config);
        let model = Model::new(config, &table).unwrap();
        let alpha = 0.3;
        let grads = |which: u8| {
            let mut tape = Tape::new();
            let pass = model.forward(&mut tape, &inst, Mode::Eval).unwrap();
            let target = match which {
                0 => pass.loss_a,
                1 => pass.loss_s,
                _ => combined_loss(&mut tape, pass.loss_a, pass.loss_s, alpha).unwrap(),
            };
            tape.gradients(target).unwrap()
        };
        let (ga, gs, gc) = (grads(0), grads(1), grads(2));
        for name in model.params.names() {
            let a = ga.dense(name, &model.params).unwrap();
            let s = gs.dense(name, &model.params).unwrap();
            let c = gc.dense(name, &model.params).unwrap();
            let mix = a.zip_map(&s, |x, y| alpha * x + (1.0 - alpha) * y);
            assert!(c.max_abs_diff(&mix) <= 1e-10, "{name}");
        }
    }

    #[test]
    fn full_loss_gradients_all_variants() {
        let insts = [
            instance(&["great", "food", "here", "today"], (1, 2), Polarity::Positive),
            instance(&["the", "awful", "service", "ruined", "it"], (2, 3), Polarity::Negative),
        ];
        for kind in [EncoderKind::Window, EncoderKind::Recurrent] {
            for tree in [TreeEncoderKind::StructuredAttention, TreeEncoderKind::Gcn] {
                let config = small_config(kind, tree);
                let table = training_table(&insts, &config);
                let model = Model::new(config.clone(), &table).unwrap();
                for inst in &insts {
                    let report = grad_check(
                        |tape, store| Ok(model.forward_with(tape, store, inst, Mode::Eval)?.loss),
                        &model.params,
                        1e-5,
                    )
                    .unwrap();
                    assert!(report.max_relative_error <= 1e-4, "{kind:?} {tree:?}: {report:?}");
                }
            }
        }
    }

    #[test]
    fn pruned_forward_keeps_roots() {
        let mut config = small_config(EncoderKind::Window, TreeEncoderKind::StructuredAttention);
        let inst = instance(&["the", "food", "was", "really", "great"], (1, 2), Polarity::Positive);
        let table = training_table(std::slice::from_ref(&inst), &config);
        let plain = Model::new(config.clone(), &table).unwrap().predict(&inst).unwrap();
        config.prune.k = Some(1);
        let pruned = Model::new(config, &table).unwrap().predict(&inst).unwrap();
        assert_eq!(plain.marginals, pruned.marginals);
        assert!((plain.aspect_root_mass - plain.marginals.roots[2]).abs() < 1e-15);
    }

    #[test]
    fn dropout_is_seeded() {
        let mut config = small_config(EncoderKind::Window, TreeEncoderKind::StructuredAttention);
        config.train.dropout = 0.5;
        let inst = instance(&["good", "pizza"], (1, 2), Polarity::Positive);
        let model = Model::new(config.clone(), &training_table(std::slice::from_ref(&inst), &config)).unwrap();
        let run = |mode| {
            let mut tape = Tape::new();
            let p = model.forward(&mut tape, &inst, mode).unwrap();
            tape.value(p.loss).item()
        };
        let a = run(Mode::Train { dropout_seed: 1 });
        assert_eq!(a.to_bits(), run(Mode::Train { dropout_seed: 1 }).to_bits());
        assert_ne!(a, run(Mode::Train { dropout_seed: 2 }));
        assert_eq!(run(Mode::Eval).to_bits(), run(Mode::Eval).to_bits());
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax_label(&[0.4, 0.4, 0.2]), Polarity::Positive);
        assert_eq!(argmax_label(&[0.2, 0.4, 0.4]), Polarity::Neutral);
        assert_eq!(argmax_label(&[0.1, 0.2, 0.7]), Polarity::Negative);
    }

    #[test]
    fn shape_check_catches_mismatch() {
        let config = small_config(EncoderKind::Window, TreeEncoderKind::StructuredAttention);
        let inst = instance(&["ok"], (0, 1), Polarity::Neutral);
        let mut model = Model::new(config.clone(), &training_table(std::slice::from_ref(&inst), &config)).unwrap();
        model.config.encoder.dim = 6;
        assert!(model.check_shapes().is_err());
        let mut wrong = config.clone();
        wrong.encoder.embed_dim = 7;
        assert!(Model::new(wrong, &training_table(&[inst], &config)).is_err());
    }
}
