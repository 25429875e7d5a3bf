#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ooc_core::autodiff::{ParamId, ParamStore, Reduction, Tape, Tensor, Var};
use ooc_core::fixtures::{synthetic_corpus, SyntheticSpec};
use ooc_core::graph::{evaluate_graph, GraphParams};
use ooc_core::model::Dropout;
use ooc_core::trainer::{batch_gradients, build_samples, loss, SampleSpec};
use ooc_core::*;

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Outcome of one acceptance criterion.
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Self { name, passed, detail: detail.into() }
    }

    pub fn assert(&self) {
        assert!(self.passed, "{}: {}", self.name, self.detail);
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

// ---------------------------------------------------------------- fixtures

pub struct TinySetup {
    pub vocab: BpeVocab,
    pub samples: Vec<TrainSample>,
    pub config: ModelConfig,
}

/// Very small model and data for gradient and wiring checks.
pub fn tiny_setup(seed: u64) -> TinySetup {
    let spec = SyntheticSpec {
        seed,
        ..SyntheticSpec::tiny(6, 4)
    };
    let corpus = synthetic_corpus(&spec).unwrap();
    let vocab = BpeVocab::train(&corpus.tokenizer_corpus(&LabelSet::default()), 300).unwrap();
    let mut config = ModelConfig::desk(vocab.vocab_size(), vocab.specials(), 6);
    config.d_model = 8;
    config.n_heads = 2;
    config.n_layers = 2;
    config.d_ff = 12;
    config.n_obj = 4;
    config.text_len = 8;
    config.max_caption_len = 24;
    config.graph.k = 2;
    config.graph.hidden_dim = 5;
    config.seed = seed;
    let samples = build_samples(
        &corpus.features,
        &corpus.ner,
        &vocab,
        SampleSpec { text_len: 8, include_types: true, max_caption_len: 24 },
    )
    .unwrap();
    TinySetup { vocab, samples, config }
}

/// Randomizes every parameter (norm gains and biases included) so no
/// gradient vanishes by construction.
pub fn randomize(model: &mut CaptionModel, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = model.params().ids().collect();
    for id in ids {
        for v in model.params_mut().get_mut(id).data_mut() {
            *v += rng.gen_range(-std..std);
        }
    }
}

// ---------------------------------------------------------------- gradients

fn fd_check(
    name: &str,
    inputs: &[Tensor],
    f: &dyn Fn(&mut Tape, &[Var]) -> Var,
    worst: &mut (f64, String),
) {
    let h = 1e-5;
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let eval = |xs: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs);
        t.value(o).item()
    };
    for (k, x) in inputs.iter().enumerate() {
        let g = grads.wrt(vars[k]).unwrap();
        for i in 0..x.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let e = rel_err(g.data()[i], numeric);
            if e > worst.0 {
                *worst = (e, format!("{name} input {k} entry {i}"));
            }
        }
    }
}

/// Weighted sum so every output element influences the scalar.
fn project(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let shape = tape.shape(x).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::randn(&shape, 1.0, &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(x, w).unwrap();
    tape.sum(p)
}

/// Finite-difference check of every differentiable tape operation.
pub fn op_gradient_suite() -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut r = |shape: &[usize]| Tensor::randn(shape, 1.0, &mut rng);
    let a = r(&[3, 4]);
    let b = r(&[4, 2]);
    let c = r(&[3, 4]);
    let row = r(&[4]);
    let mut worst = (0.0, String::new());
    type Op = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;
    let cases: Vec<(&str, Vec<Tensor>, Op)> = vec![
        ("matmul", vec![a.clone(), b.clone()], Box::new(|t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            project(t, y, 1)
        })),
        ("add", vec![a.clone(), c.clone()], Box::new(|t, v| {
            let y = t.add(v[0], v[1]).unwrap();
            project(t, y, 2)
        })),
        ("sub", vec![a.clone(), c.clone()], Box::new(|t, v| {
            let y = t.sub(v[0], v[1]).unwrap();
            project(t, y, 3)
        })),
        ("mul", vec![a.clone(), c.clone()], Box::new(|t, v| {
            let y = t.mul(v[0], v[1]).unwrap();
            project(t, y, 4)
        })),
        ("add_row", vec![a.clone(), row.clone()], Box::new(|t, v| {
            let y = t.add_row(v[0], v[1]).unwrap();
            project(t, y, 5)
        })),
        ("mul_row", vec![a.clone(), row.clone()], Box::new(|t, v| {
            let y = t.mul_row(v[0], v[1]).unwrap();
            project(t, y, 6)
        })),
        ("scale+add_scalar", vec![a.clone()], Box::new(|t, v| {
            let y = t.scale(v[0], -1.7);
            let y = t.add_scalar(y, 0.3);
            project(t, y, 7)
        })),
        ("gelu", vec![a.clone()], Box::new(|t, v| {
            let y = t.gelu(v[0]);
            project(t, y, 8)
        })),
        ("tanh", vec![a.clone()], Box::new(|t, v| {
            let y = t.tanh(v[0]);
            project(t, y, 9)
        })),
        ("softmax rows", vec![a.clone()], Box::new(|t, v| {
            let y = t.softmax(v[0], 1).unwrap();
            project(t, y, 10)
        })),
        ("softmax cols", vec![a.clone()], Box::new(|t, v| {
            let y = t.softmax(v[0], 0).unwrap();
            project(t, y, 11)
        })),
        ("layer_norm", vec![a.clone()], Box::new(|t, v| {
            let y = t.layer_norm(v[0], 1e-5).unwrap();
            project(t, y, 12)
        })),
        ("gather_rows", vec![a.clone()], Box::new(|t, v| {
            let y = t.gather_rows(v[0], &[2, 0, 2, 1]).unwrap();
            project(t, y, 13)
        })),
        ("scatter_add_rows", vec![a.clone()], Box::new(|t, v| {
            let y = t.scatter_add_rows(v[0], &[1, 1, 3], 5).unwrap();
            project(t, y, 14)
        })),
        ("transpose", vec![a.clone()], Box::new(|t, v| {
            let y = t.transpose(v[0]).unwrap();
            project(t, y, 15)
        })),
        ("reshape", vec![a.clone()], Box::new(|t, v| {
            let y = t.reshape(v[0], &[6, 2]).unwrap();
            project(t, y, 16)
        })),
        ("concat rows", vec![a.clone(), c.clone()], Box::new(|t, v| {
            let y = t.concat(&[v[0], v[1]], 0).unwrap();
            project(t, y, 17)
        })),
        ("concat cols", vec![a.clone(), c.clone()], Box::new(|t, v| {
            let y = t.concat(&[v[0], v[1]], 1).unwrap();
            project(t, y, 18)
        })),
        ("slice_cols", vec![a.clone()], Box::new(|t, v| {
            let y = t.slice_cols(v[0], 1, 3).unwrap();
            project(t, y, 19)
        })),
        ("slice_rows", vec![a.clone()], Box::new(|t, v| {
            let y = t.slice_rows(v[0], 1, 3).unwrap();
            project(t, y, 20)
        })),
        ("masked_fill", vec![a.clone()], Box::new(|t, v| {
            let keep: Vec<bool> = (0..12).map(|i| i % 3 != 0).collect();
            let y = t.masked_fill(v[0], &keep, -1e9).unwrap();
            let y = t.softmax(y, 1).unwrap();
            project(t, y, 21)
        })),
        ("mask_rows", vec![a.clone()], Box::new(|t, v| {
            let y = t.mask_rows(v[0], &[true, false, true]).unwrap();
            project(t, y, 22)
        })),
        ("mean", vec![a.clone()], Box::new(|t, v| {
            let y = t.mul(v[0], v[0]).unwrap();
            t.mean(y)
        })),
        ("cross-entropy", vec![a.clone()], Box::new(|t, v| {
            t.token_loss(v[0], &[Some(1), None, Some(3)], None, 0.0, Reduction::Mean).unwrap()
        })),
        ("weighted cross-entropy", vec![a.clone()], Box::new(|t, v| {
            let w = [0.5, 2.0, 1.0, 0.7];
            t.token_loss(v[0], &[Some(1), Some(0), Some(3)], Some(&w), 0.0, Reduction::Sum).unwrap()
        })),
        ("focal", vec![a.clone()], Box::new(|t, v| {
            t.token_loss(v[0], &[Some(2), Some(0), Some(3)], None, 2.0, Reduction::Mean).unwrap()
        })),
    ];
    for (name, inputs, f) in &cases {
        fd_check(name, inputs, f.as_ref(), &mut worst);
    }
    worst
}

fn model_loss(model: &CaptionModel, samples: &[&TrainSample], kind: LossKind, weights: Option<&[f64]>) -> f64 {
    batch_gradients(model, samples, &Ablation::default(), kind, weights, &mut Dropout::off())
        .unwrap()
        .0
}

/// End-to-end finite differences over sampled entries of every parameter
/// tensor. Returns the worst relative error, where it occurred and the
/// number of parameter tensors covered.
pub fn end_to_end_gradients(
    configure: impl Fn(&mut ModelConfig),
    kind: LossKind,
    per_tensor: usize,
) -> (f64, String, usize) {
    let setup = tiny_setup(5);
    let mut config = setup.config.clone();
    configure(&mut config);
    let mut model = CaptionModel::new(config).unwrap();
    randomize(&mut model, 17, 0.3);
    let batch: Vec<&TrainSample> = setup.samples.iter().take(2).collect();
    let weights: Vec<f64> = (0..model.config().vocab_size).map(|i| 0.5 + (i % 7) as f64 * 0.25).collect();
    let w = matches!(kind, LossKind::WeightedCrossEntropy).then_some(weights.as_slice());
    let (_, _, grads) = batch_gradients(&model, &batch, &Ablation::default(), kind, w, &mut Dropout::off()).unwrap();

    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = (0.0, String::new());
    let ids: Vec<ParamId> = model.params().ids().collect();
    for &id in &ids {
        let n = model.params().get(id).numel();
        let g = grads.get(id);
        // Probe the largest-gradient entry plus random ones.
        let mut picks = vec![(0..n).max_by(|&a, &b| g.data()[a].abs().total_cmp(&g.data()[b].abs())).unwrap()];
        picks.extend((1..per_tensor).map(|_| rng.gen_range(0..n)));
        for i in picks {
            let orig = model.params().get(id).data()[i];
            model.params_mut().get_mut(id).data_mut()[i] = orig + h;
            let plus = model_loss(&model, &batch, kind, w);
            model.params_mut().get_mut(id).data_mut()[i] = orig - h;
            let minus = model_loss(&model, &batch, kind, w);
            model.params_mut().get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let e = rel_err(g.data()[i], numeric);
            if e > worst.0 {
                worst = (e, format!("{}[{i}] analytic {} numeric {numeric}", model.params().name(id), g.data()[i]));
            }
        }
    }
    (worst.0, worst.1, ids.len())
}

pub fn check_gradient_suite() -> Check {
    let started = std::time::Instant::now();
    let (op_err, op_at) = op_gradient_suite();
    let mut worst = (op_err, op_at);
    let mut tensors = 0;
    let variants: Vec<(&str, Box<dyn Fn(&mut ModelConfig)>, LossKind)> = vec![
        ("pre-norm ce", Box::new(|_| {}), LossKind::CrossEntropy),
        ("post-norm focal", Box::new(|c| c.pre_norm = false), LossKind::Focal { gamma: 2.0 }),
        ("tied weighted-ce", Box::new(|c| c.tie_output = true), LossKind::WeightedCrossEntropy),
    ];
    for (name, configure, kind) in variants {
        let (e, at, n) = end_to_end_gradients(configure, kind, 3);
        tensors += n;
        if e > worst.0 {
            worst = (e, format!("{name}: {at}"));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Check::new(
        "gradient suite",
        worst.0 < 1e-4 && secs < 120.0,
        format!(
            "26 ops + {tensors} parameter tensors, worst rel err {:.2e} ({}), {secs:.1}s",
            worst.0, worst.1
        ),
    )
}

// ---------------------------------------------------------------- tokenizer

pub fn gpt2_vocab() -> Option<BpeVocab> {
    let dir = repo_root().join("fixtures/gpt2");
    BpeVocab::load(dir.join("vocab.json"), dir.join("merges.txt")).ok()
}

pub fn random_text(rng: &mut ChaCha8Rng, max_chars: usize) -> String {
    let len = rng.gen_range(0..=max_chars);
    (0..len)
        .map(|_| match rng.gen_range(0..8) {
            0 => rng.gen_range(b' '..=b'~') as char,
            1 => [' ', '\t', '\n', '\r', '\u{3000}', '\u{a0}'][rng.gen_range(0..6)],
            2 => char::from_u32(rng.gen_range(0xC0..0x250)).unwrap(),
            3 => char::from_u32(rng.gen_range(0x4E00..0x9FFF)).unwrap(),
            4 => char::from_u32(rng.gen_range(0x1F300..0x1FAFF)).unwrap_or('x'),
            5 => char::from_u32(rng.gen_range(0x300..0x370)).unwrap(),
            6 => ["'s", "'ll", "'re", "123", "  "][rng.gen_range(0..5)].chars().next().unwrap(),
            _ => loop {
                if let Some(c) = char::from_u32(rng.gen_range(0..0x110000)) {
                    break c;
                }
            },
        })
        .collect()
}

pub fn bundled_texts() -> Vec<String> {
    let mut texts = Vec::new();
    let root = repo_root().join("fixtures");
    if let Ok(records) = context::parse_ner_file(root.join("tiny/ner.jsonl"), &LabelSet::default()) {
        for r in records {
            texts.extend(r.caption);
            for (label, tokens) in r.entities.iter() {
                texts.push(label.to_string());
                texts.extend(tokens.iter().cloned());
            }
        }
    }
    if let Ok(text) = std::fs::read_to_string(root.join("gpt2_reference_ids.jsonl")) {
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            texts.push(v["text"].as_str().unwrap().to_string());
        }
    }
    texts
}

pub fn check_bpe_round_trip() -> Check {
    let mut vocabs = vec![("trained", BpeVocab::train(&["the cat sat on the mat in Delhi on Friday"], 300).unwrap())];
    if let Some(g) = gpt2_vocab() {
        vocabs.push(("gpt2", g));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let strings: Vec<String> = (0..10_000).map(|_| random_text(&mut rng, 40)).collect();
    let corpus = bundled_texts();
    let mut failures = 0;
    let mut first = String::new();
    for (name, vocab) in &vocabs {
        for s in strings.iter().chain(&corpus) {
            let back = vocab.decode(&vocab.encode(s)).unwrap();
            if &back != s {
                failures += 1;
                if first.is_empty() {
                    first = format!("{name}: {s:?} -> {back:?}");
                }
            }
        }
    }
    Check::new(
        "BPE round trip",
        failures == 0 && corpus.len() >= 50,
        format!(
            "10000 random strings + {} fixture texts x {} vocabularies, {failures} failures {first}",
            corpus.len(),
            vocabs.len()
        ),
    )
}

pub fn check_gpt2_parity() -> Check {
    let Some(vocab) = gpt2_vocab() else {
        return Check::new("GPT-2 parity", false, "fixtures/gpt2 vocabulary not found");
    };
    let text = std::fs::read_to_string(repo_root().join("fixtures/gpt2_reference_ids.jsonl")).unwrap();
    let mut total = 0;
    let mut exact = 0;
    let mut first = String::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let expected: Vec<usize> = v["ids"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap() as usize).collect();
        let got = vocab.encode(v["text"].as_str().unwrap());
        total += 1;
        if got == expected {
            exact += 1;
        } else if first.is_empty() {
            first = format!(" first mismatch: {:?}", v["text"]);
        }
    }
    Check::new(
        "GPT-2 parity",
        total == 50 && exact == total,
        format!("{exact}/{total} sentences exact{first}"),
    )
}

// ---------------------------------------------------------------- graph

pub struct GraphCase {
    pub store: ParamStore,
    pub params: GraphParams,
    pub config: GraphConfig,
    pub feats: Tensor,
    pub mask: Vec<bool>,
}

pub fn graph_case(seed: u64) -> GraphCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = GraphConfig { k: 3, steps: 2, hidden_dim: 7, d_vis: 5 };
    let mut store = ParamStore::new();
    let params = GraphParams::new(&mut store, "g", &config, &mut rng);
    let n = 7;
    let mut feats = Tensor::randn(&[n, 5], 1.0, &mut rng);
    let mask: Vec<bool> = (0..n).map(|i| i != 2 && i != 5).collect();
    for i in 0..n {
        if !mask[i] {
            feats.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    GraphCase { store, params, config, feats, mask }
}

pub fn permutation_equivariance(case: &GraphCase, perm: &[usize]) -> bool {
    let base = evaluate_graph(&case.store, &case.feats, &case.mask, &case.config, &case.params).unwrap();
    // Slot `i` of the permuted input holds original slot `perm[i]`.
    let n = perm.len();
    let mut feats = Tensor::zeros(case.feats.shape());
    let mut mask = vec![false; n];
    for i in 0..n {
        feats.row_mut(i).copy_from_slice(case.feats.row(perm[i]));
        mask[i] = case.mask[perm[i]];
    }
    let out = evaluate_graph(&case.store, &feats, &mask, &case.config, &case.params).unwrap();
    let nodes_ok = (0..n).all(|i| out.enhanced_nodes.row(i) == base.enhanced_nodes.row(perm[i]));
    let mut base_edges: BTreeMap<(usize, usize), Vec<u64>> = BTreeMap::new();
    for (r, &(s, t)) in base.edge_index.iter().enumerate() {
        base_edges.insert((s, t), base.edge_features.row(r).iter().map(|v| v.to_bits()).collect());
    }
    let mut out_edges = BTreeMap::new();
    for (r, &(s, t)) in out.edge_index.iter().enumerate() {
        out_edges.insert((perm[s], perm[t]), out.edge_features.row(r).iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
    nodes_ok && base_edges == out_edges
}

pub fn skip_identity(case: &GraphCase) -> bool {
    let mut store = case.store.clone();
    for id in case.params.step_params() {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::zeros(&shape);
    }
    let out = evaluate_graph(&store, &case.feats, &case.mask, &case.config, &case.params).unwrap();
    out.enhanced_nodes == case.feats
}

pub fn masked_neutrality(case: &GraphCase, seed: u64) -> bool {
    let base = evaluate_graph(&case.store, &case.feats, &case.mask, &case.config, &case.params).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut feats = case.feats.clone();
    for i in 0..case.mask.len() {
        if !case.mask[i] {
            feats.row_mut(i).iter_mut().for_each(|v| *v = rng.gen_range(-5.0..5.0));
        }
    }
    let out = evaluate_graph(&case.store, &feats, &case.mask, &case.config, &case.params).unwrap();
    out == base
}

pub fn check_graph_properties() -> Check {
    let mut perm_ok = 0;
    let mut skip_ok = 0;
    let mut neutral_ok = 0;
    let trials = 50;
    for t in 0..trials {
        let case = graph_case(t);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + t);
        let mut perm: Vec<usize> = (0..case.mask.len()).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        perm_ok += usize::from(permutation_equivariance(&case, &perm));
        skip_ok += usize::from(skip_identity(&case));
        neutral_ok += usize::from(masked_neutrality(&case, t));
    }
    Check::new(
        "graph properties",
        perm_ok == trials as usize && skip_ok == trials as usize && neutral_ok == trials as usize,
        format!(
            "permutation equivariance {perm_ok}/{trials}, skip identity {skip_ok}/{trials}, masked neutrality {neutral_ok}/{trials} (bitwise)"
        ),
    )
}

// ---------------------------------------------------------------- causality

pub fn causality_trial(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab_size = 40;
    let mut config = ModelConfig::desk(vocab_size, SpecialIds { start: 37, end: 38, pad: 39 }, 4);
    config.d_model = 8;
    config.n_heads = 2;
    config.n_layers = 2;
    config.d_ff = 16;
    config.n_obj = 2;
    config.text_len = 3;
    config.max_caption_len = 12;
    config.graph.k = 1;
    config.pre_norm = rng.gen_bool(0.5);
    config.seed = seed;
    let mut model = CaptionModel::new(config).unwrap();
    randomize(&mut model, seed ^ 0xabc, 0.5);

    let len = rng.gen_range(2..=13);
    let mut prefix: Vec<usize> = (0..len).map(|_| rng.gen_range(0..vocab_size)).collect();
    prefix[0] = 37;
    let mem_len = rng.gen_range(1..10);
    let memory = Tensor::randn(&[mem_len, 8], 1.0, &mut rng);
    let mut mask: Vec<bool> = (0..mem_len).map(|_| rng.gen_bool(0.7)).collect();
    mask[0] = true;
    let t = rng.gen_range(0..len - 1);
    let mut changed = prefix.clone();
    for slot in changed.iter_mut().skip(t + 1) {
        if rng.gen_bool(0.6) {
            *slot = rng.gen_range(0..vocab_size);
        }
    }
    changed[t + 1] = (prefix[t + 1] + 1 + rng.gen_range(0..vocab_size - 1)) % vocab_size;

    let logits = |p: &[usize]| {
        let mut tape = Tape::with_params(model.params());
        let m = tape.constant(memory.clone());
        let l = model.decoder_logits(&mut tape, p, m, &mask, &mut Dropout::off()).unwrap();
        tape.value(l).clone()
    };
    let a = logits(&prefix);
    let b = logits(&changed);
    (0..=t).all(|r| a.row(r) == b.row(r)) && a.row(t + 1) != b.row(t + 1)
}

pub fn check_causality() -> Check {
    let trials = 1000;
    let ok = (0..trials).filter(|&s| causality_trial(s)).count();
    Check::new(
        "causality",
        ok == trials as usize,
        format!("{ok}/{trials} trials: past logits bit-identical, perturbed position changed"),
    )
}

// ---------------------------------------------------------------- ablation

pub fn disabled_groups(a: &Ablation) -> Vec<&'static str> {
    let mut off = Vec::new();
    if !a.use_visual {
        off.extend(["visual.proj", "segment.image", "segment.object", "segment.edge", "graph.steps", "graph.edge"]);
    }
    if !a.use_textual {
        off.push("segment.text");
    }
    if a.use_visual && !a.use_graph {
        off.extend(["graph.steps", "graph.edge", "segment.edge"]);
    }
    if a.use_visual && a.use_graph && !a.use_edge_feats {
        off.extend(["graph.edge", "segment.edge"]);
        if !a.use_object_feats {
            off.push("graph.steps");
        }
    }
    if a.use_visual && !a.use_object_feats {
        off.push("segment.object");
    }
    off.sort_unstable();
    off.dedup();
    off
}

/// Per group: whether its step-1 gradient is exactly zero.
pub fn zero_gradient_groups(model: &CaptionModel, samples: &[TrainSample], ablation: &Ablation) -> Vec<(&'static str, bool)> {
    let batch: Vec<&TrainSample> = samples.iter().collect();
    let (_, _, grads) =
        batch_gradients(model, &batch, ablation, LossKind::CrossEntropy, None, &mut Dropout::off()).unwrap();
    model
        .param_groups()
        .into_iter()
        .map(|(name, ids)| {
            let zero = ids.iter().all(|&id| grads.get(id).data().iter().all(|&g| g == 0.0));
            (name, zero)
        })
        .collect()
}

pub fn check_ablation_wiring() -> Check {
    let setup = tiny_setup(21);
    let model = CaptionModel::new(setup.config.clone()).unwrap();
    let mut problems = Vec::new();
    for name in trainer::ABLATION_PRESETS {
        let ablation = trainer::ablation_preset(name).unwrap();
        let expected = disabled_groups(&ablation);
        for (group, zero) in zero_gradient_groups(&model, &setup.samples, &ablation) {
            if zero != expected.contains(&group) {
                problems.push(format!("{name}/{group} zero={zero}"));
            }
        }
    }

    // Short runs without textual and without visual input must both finish
    // and yield different models.
    let run = |preset: &str| {
        let mut model = CaptionModel::new(setup.config.clone()).unwrap();
        let config = TrainConfig {
            epochs: 3,
            lr: 3e-3,
            batch_size: 4,
            ablation: trainer::ablation_preset(preset).unwrap(),
            ..TrainConfig::default()
        };
        let log = trainer::train(&mut model, &setup.samples, &config, |_| {}).unwrap();
        let s = &setup.samples[0];
        let (memory, mask) = model.memory(&s.input(), &config.ablation).unwrap();
        let logits = model.next_token_logits(&[setup.vocab.specials().start], &memory, &mask).unwrap();
        (log.last().unwrap().loss, logits)
    };
    let (loss_t, logits_t) = run("w/o-textual");
    let (loss_v, logits_v) = run("w/o-visual");
    let differ = logits_t != logits_v;
    Check::new(
        "ablation wiring",
        problems.is_empty() && differ,
        format!(
            "{} presets x {} groups checked at step 1, {} mismatches {:?}; w/o-textual loss {loss_t:.4} vs w/o-visual {loss_v:.4}, outputs differ: {differ}",
            trainer::ABLATION_PRESETS.len(),
            model.param_groups().len(),
            problems.len(),
            problems
        ),
    )
}

// ---------------------------------------------------------------- losses

pub fn check_loss_reductions() -> Check {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for trial in 0..200 {
        let rows = rng.gen_range(1..12);
        let cols = rng.gen_range(2..60);
        let logits = Tensor::randn(&[rows, cols], 1.0 + trial as f64 * 0.05, &mut rng);
        let targets: Vec<Option<usize>> =
            (0..rows).map(|_| rng.gen_bool(0.85).then(|| rng.gen_range(0..cols))).collect();
        let ones = vec![1.0; cols];
        let eval = |kind: LossKind, w: Option<&[f64]>| {
            let mut tape = Tape::new();
            let x = tape.constant(logits.clone());
            let l = loss(&mut tape, x, &targets, kind, w, Reduction::Mean).unwrap();
            tape.value(l).item()
        };
        let ce = eval(LossKind::CrossEntropy, None);
        worst = worst
            .max((eval(LossKind::Focal { gamma: 0.0 }, None) - ce).abs())
            .max((eval(LossKind::WeightedCrossEntropy, Some(&ones)) - ce).abs());
    }
    Check::new(
        "loss reductions",
        worst <= 1e-12,
        format!("200 random logit sets, max |focal(0) - CE|, |WCE(1) - CE| = {worst:.1e}"),
    )
}

// ---------------------------------------------------------------- metrics

pub fn toy_corpus() -> EvalCorpus {
    let items: &[(&str, &[&str])] = &[
        ("a man rides a horse on the beach", &["a man riding a horse on a beach", "a person on a horse near the sea"]),
        ("two dogs play in the snow", &["two dogs playing in snow", "dogs run through the snow"]),
        ("police stand outside the parliament", &["police officers stand guard outside parliament"]),
        ("a crowd gathers in the square", &["a large crowd gathers in a city square", "people fill the square"]),
        ("firefighters battle a blaze", &["firefighters fight a large fire at a warehouse"]),
        ("a woman reads a book", &["a woman is reading a book on a bench", "a girl reads"]),
        ("the market is busy", &["a busy market in delhi", "shoppers crowd the market"]),
        ("children play football in the street", &["kids playing football on a street"]),
        ("a boat sails at sunset", &["a sailboat at sunset", "a boat on the water at dusk"]),
        ("soldiers march in a parade", &["soldiers marching during a military parade"]),
    ];
    EvalCorpus::new(
        items
            .iter()
            .enumerate()
            .map(|(i, (h, r))| EvalItem {
                id: format!("toy-{i}"),
                hyp: h.to_string(),
                refs: r.iter().map(|s| s.to_string()).collect(),
            })
            .collect(),
    )
    .unwrap()
}

fn grams(tokens: &[String], n: usize) -> Vec<String> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n).map(|i| tokens[i..i + n].join(" ")).collect()
}

/// Dense-vector CIDEr written independently of the library version.
pub fn brute_cider(corpus: &EvalCorpus) -> Vec<f64> {
    let items = corpus.items();
    let n_docs = items.len() as f64;
    let tok = |s: &str| metrics::normalize(s);
    let mut scores = vec![0.0; items.len()];
    for n in 1..=4 {
        let mut all: Vec<String> = Vec::new();
        for it in items {
            all.extend(grams(&tok(&it.hyp), n));
            for r in &it.refs {
                all.extend(grams(&tok(r), n));
            }
        }
        all.sort();
        all.dedup();
        let df: Vec<f64> = all
            .iter()
            .map(|g| {
                items
                    .iter()
                    .filter(|it| it.refs.iter().any(|r| grams(&tok(r), n).contains(g)))
                    .count() as f64
            })
            .collect();
        let idf: Vec<f64> = df
            .iter()
            .map(|&d| if items.len() == 1 { 1.0 } else { n_docs.ln() - d.max(1.0).ln() })
            .collect();
        let vec_of = |s: &str| -> Vec<f64> {
            let gs = grams(&tok(s), n);
            all.iter()
                .zip(&idf)
                .map(|(g, w)| gs.iter().filter(|x| *x == g).count() as f64 * w)
                .collect()
        };
        for (k, it) in items.iter().enumerate() {
            let h = vec_of(&it.hyp);
            let mut total = 0.0;
            for r in &it.refs {
                let rv = vec_of(r);
                let dot: f64 = h.iter().zip(&rv).map(|(a, b)| a * b).sum();
                let nh = h.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nr = rv.iter().map(|x| x * x).sum::<f64>().sqrt();
                total += if nh == 0.0 || nr == 0.0 { 0.0 } else { dot / (nh * nr) };
            }
            scores[k] += 10.0 * total / it.refs.len() as f64 / 4.0;
        }
    }
    scores
}

fn is_subsequence(sub: &[&String], seq: &[String]) -> bool {
    let mut it = seq.iter();
    sub.iter().all(|s| it.any(|x| x == *s))
}

/// ROUGE-L by enumerating every subsequence of the hypothesis.
pub fn brute_rouge_l(corpus: &EvalCorpus) -> f64 {
    let mut total = 0.0;
    for it in corpus.items() {
        let h = metrics::normalize(&it.hyp);
        assert!(h.len() <= 16, "enumeration is exponential");
        let mut best = 0.0f64;
        for r in &it.refs {
            let r = metrics::normalize(r);
            let mut lcs = 0;
            for bits in 0u32..(1 << h.len()) {
                let sub: Vec<&String> = (0..h.len()).filter(|i| bits >> i & 1 == 1).map(|i| &h[i]).collect();
                if sub.len() > lcs && is_subsequence(&sub, &r) {
                    lcs = sub.len();
                }
            }
            if lcs > 0 {
                let p = lcs as f64 / h.len() as f64;
                let rc = lcs as f64 / r.len() as f64;
                best = best.max(2.2 * p * rc / (rc + 1.2 * p));
            }
        }
        total += best;
    }
    100.0 * total / corpus.len() as f64
}

fn single(hyp: &str, refs: &[&str]) -> EvalCorpus {
    EvalCorpus::new(vec![EvalItem {
        id: "x".into(),
        hyp: hyp.into(),
        refs: refs.iter().map(|s| s.to_string()).collect(),
    }])
    .unwrap()
}

/// Hand-counted BLEU micro corpus: clipped n-gram matches 8/9, 5/7, 3/5,
/// 1/3 and equal total lengths (no brevity penalty).
pub fn bleu_hand_case() -> (EvalCorpus, f64) {
    let corpus = EvalCorpus::new(vec![
        EvalItem { id: "a".into(), hyp: "the cat sat on the mat".into(), refs: vec!["the cat sat on a mat".into()] },
        EvalItem {
            id: "b".into(),
            hyp: "a dog runs".into(),
            refs: vec!["a dog runs fast".into(), "the dog runs".into()],
        },
    ])
    .unwrap();
    let expected = 100.0 * (8.0f64 / 9.0 * 5.0 / 7.0 * 3.0 / 5.0 * 1.0 / 3.0).powf(0.25);
    (corpus, expected)
}

pub fn check_metrics_oracle() -> Check {
    let toy = toy_corpus();
    let cider_err = metrics::cider_per_item(&toy)
        .iter()
        .zip(brute_cider(&toy))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let rouge_err = (metrics::rouge_l(&toy) - brute_rouge_l(&toy)).abs();

    let (bleu_corpus, bleu_expected) = bleu_hand_case();
    let bleu_err = (metrics::bleu4(&bleu_corpus) - bleu_expected).abs();

    // Reordered sentence: 6 exact matches in 5 chunks.
    let m1 = metrics::meteor(&single("the cat sat on the mat", &["on the mat the cat sat"]));
    let m1_expected = 100.0 * (1.0 - 0.5 * (5.0f64 / 6.0).powi(3));
    // Stem matches: 3 matches, 1 chunk, P = 1, R = 3/4.
    let m2 = metrics::meteor(&single("dogs bark loudly", &["the dog barked loudly"]));
    let f = 0.75 / (0.9 + 0.1 * 0.75);
    let m2_expected = 100.0 * f * (1.0 - 0.5 / 27.0);
    let meteor_err = (m1 - m1_expected).abs().max((m2 - m2_expected).abs());

    let identity = EvalCorpus::new(
        toy.items()
            .iter()
            .map(|it| EvalItem { id: it.id.clone(), hyp: it.refs[0].clone(), refs: vec![it.refs[0].clone()] })
            .collect(),
    )
    .unwrap();
    let id_bleu = metrics::bleu4(&identity);
    let id_rouge = metrics::rouge_l(&identity);
    let id_cider = metrics::cider_per_item(&identity);
    let id_meteor = metrics::meteor(&identity);
    let identity_ok = (id_bleu - 100.0).abs() < 1e-9
        && (id_rouge - 100.0).abs() < 1e-9
        && id_cider.iter().all(|c| (c - 10.0).abs() < 1e-9)
        && id_meteor > 99.0;

    Check::new(
        "metrics oracle",
        cider_err < 1e-9 && rouge_err < 1e-9 && bleu_err < 1e-9 && meteor_err < 1e-9 && identity_ok,
        format!(
            "CIDEr vs brute force {cider_err:.1e}, ROUGE-L vs brute force {rouge_err:.1e}, BLEU-4 vs hand count {bleu_err:.1e}, METEOR vs formula {meteor_err:.1e}; identity BLEU {id_bleu:.6} ROUGE-L {id_rouge:.6} CIDEr min {:.6} METEOR {id_meteor:.3}",
            id_cider.iter().copied().fold(f64::INFINITY, f64::min)
        ),
    )
}

// ---------------------------------------------------------------- overfit

pub struct OverfitRun {
    pub model: CaptionModel,
    pub vocab: BpeVocab,
    pub samples: Vec<TrainSample>,
    pub corpus: fixtures::SyntheticCorpus,
    pub log: Vec<trainer::EpochLog>,
    pub seconds: f64,
    pub text_len: usize,
}

pub fn overfit_run() -> OverfitRun {
    let started = std::time::Instant::now();
    let d_vis = 64;
    let text_len = 16;
    let max_caption_len = 40;
    let corpus = synthetic_corpus(&SyntheticSpec::overfit(d_vis, 4)).unwrap();
    let vocab = BpeVocab::train(&corpus.tokenizer_corpus(&LabelSet::default()), 400).unwrap();
    let mut config = ModelConfig::desk(vocab.vocab_size(), vocab.specials(), d_vis);
    config.n_obj = 4;
    config.text_len = text_len;
    config.max_caption_len = max_caption_len;
    config.graph.k = 2;
    let samples = build_samples(
        &corpus.features,
        &corpus.ner,
        &vocab,
        SampleSpec { text_len, include_types: true, max_caption_len },
    )
    .unwrap();
    let mut model = CaptionModel::new(config).unwrap();
    let train_config = TrainConfig {
        epochs: 500,
        batch_size: 8,
        target_loss: Some(0.05),
        ..TrainConfig::default()
    };
    let log = trainer::train(&mut model, &samples, &train_config, |_| {}).unwrap();
    OverfitRun {
        model,
        vocab,
        samples,
        corpus,
        log,
        seconds: started.elapsed().as_secs_f64(),
        text_len,
    }
}

pub fn check_overfit(run: &OverfitRun) -> Check {
    let first = run.log.first().unwrap().loss;
    let last = run.log.last().unwrap().loss;
    let mut exact = 0;
    let mut items = Vec::new();
    for s in &run.samples {
        let out = run.model.generate(&s.input(), &Ablation::default(), DecodeMode::Greedy, None).unwrap();
        if out[..] == s.target[1..s.target.len() - 1] {
            exact += 1;
        }
        items.push(EvalItem {
            id: s.id.clone(),
            hyp: run.vocab.decode(&out).unwrap(),
            refs: vec![s.caption.clone()],
        });
    }
    let bleu = metrics::bleu4(&EvalCorpus::new(items).unwrap());
    let n = run.samples.len();
    let passed = last < 0.05 && exact * 10 >= n * 9 && bleu >= 90.0 && run.seconds < 600.0 && first / last >= 100.0;
    Check::new(
        "overfit",
        passed,
        format!(
            "{} samples, CE {first:.3} -> {last:.4} in {} epochs ({:.0}x), greedy exact {exact}/{n}, BLEU-4 {bleu:.2}, {:.0}s",
            n,
            run.log.len(),
            first / last,
            run.seconds
        ),
    )
}

pub fn check_controllability(run: &OverfitRun) -> Check {
    let places = fixtures::PLACES;
    let mut trials = 0;
    let mut ok = 0;
    for (s, &(_, place, day)) in run.samples.iter().zip(&run.corpus.factors) {
        for other in 0..places.len() {
            if other == place || !run.corpus.factors.iter().any(|f| f.1 == other) {
                continue;
            }
            let dict = fixtures::entities_for(other, day);
            let text = build_context(&dict, &run.vocab, run.text_len, true).unwrap();
            let input = ModelInput { visual: &s.visual, text: &text };
            let out = run.model.generate(&input, &Ablation::default(), DecodeMode::Greedy, None).unwrap();
            let caption = run.vocab.decode(&out).unwrap();
            trials += 1;
            if caption.contains(places[other]) && !caption.contains(places[place]) {
                ok += 1;
            }
        }
    }
    Check::new(
        "controllability",
        trials > 0 && ok * 10 >= trials * 9,
        format!("{ok}/{trials} place swaps moved the caption's location to the new place"),
    )
}
