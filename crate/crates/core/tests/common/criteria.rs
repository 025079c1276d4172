//! One check per acceptance criterion. Each returns an [`Outcome`] so the
//! acceptance runner can print every line before deciding the exit status.

use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use mlrm::analysis::{position_sets, saliency_matrices};
use mlrm::data::{
    build_pairs, cooccurrence, make_batches, BehaviorEvent,
    Dataset, NoteId, Pair, PairConfig, SynthConfig,
};
use mlrm::eval::{
    build_table, evaluate, random_baseline, recall_at_k, topk, EmbeddingTable, EvalSlice,
    EvalSpec, Retriever,
};
use mlrm::model::{
    gate_fuse, sequence_info, ForwardOptions, ImageInput, Modality, Mode, ModelConfig, NoteInput,
};
use mlrm::train::{
    adamw_update, batch_pass, contrastive_loss, decode_checkpoint, encode_checkpoint, final_loss,
    load_checkpoint, save_checkpoint, LossConfig, OptimConfig, RunConfig,
};
use mlrm::{Checkpoint64, Model64, Result, Tape64, Trainer64};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::seq::SliceRandom;
use rand::Rng;

use super::gradcheck::{model_check, primitive_suite, TOLERANCE};
use super::{bits, rel_err, rng, small_dataset, tiny_config, Outcome};

fn seconds(start: Instant) -> f64 {
    start.elapsed().as_secs_f64()
}

/// 1. Finite-difference gradient suite.
pub fn gradient_suite() -> Result<Outcome> {
    let start = Instant::now();
    let reports = primitive_suite(100)?;
    let mut parts: Vec<Outcome> = reports
        .iter()
        .filter(|r| r.worst > TOLERANCE)
        .map(|r| Outcome::new(false, format!("{} worst rel err {:.2e}", r.name, r.worst)))
        .collect();
    let worst_prim = reports.iter().map(|r| r.worst).fold(0.0, f64::max);
    parts.push(Outcome::new(
        worst_prim <= TOLERANCE,
        format!(
            "{} primitives x100 cases, worst {:.2e}",
            reports.len(),
            worst_prim
        ),
    ));

    let data = small_dataset(11);
    for (k, mode) in Mode::ALL.into_iter().enumerate() {
        let (n, worst) = model_check(&data, mode, 24, 100 + k as u64)?;
        parts.push(Outcome::new(
            worst <= TOLERANCE,
            format!("{mode} model {n} entries worst {worst:.2e}"),
        ));
    }
    let secs = seconds(start);
    parts.push(Outcome::new(secs <= 120.0, format!("{secs:.1}s (limit 120s)")));
    Ok(Outcome::all(parts))
}

/// 2. Text after `<IMG_EMB>` cannot reach the visual compressed word.
pub fn causal_isolation() -> Result<Outcome> {
    let start = Instant::now();
    let data = small_dataset(21);
    let cfg = ModelConfig {
        vocab_size: data.vocab.len(),
        ..ModelConfig::default()
    };
    assert_eq!(cfg.mode.prompt_kind(), mlrm::text::PromptKind::Micl);
    let model = Model64::new(cfg, 21)?;
    let mut r = rng(21);
    let (mut forwards, mut changed) = (0usize, 0usize);
    for note in data.notes.iter().take(100) {
        let mut input = model.prepare(note, &data.vocab, Modality::Multimodal)?;
        if let ImageInput::Patches(p) = &input.image {
            input.image = ImageInput::Features(model.encode_image(p)?);
        }
        let base = model.embed(&input)?.n_v.expect("mICL n_v");
        let from = input.layout.img_emb_pos.expect("mICL prompt");
        let len = input.layout.len();

        let mut variants = Vec::new();
        // Whole suffix replaced.
        let mut ids = input.layout.token_ids.clone();
        for t in &mut ids[from..] {
            *t = r.random_range(0..data.vocab.len());
        }
        variants.push(ids);
        // Single positions: the marker itself, the last token, two random.
        let mut singles = vec![from, len - 1];
        singles.extend((0..2).map(|_| r.random_range(from..len)));
        for p in singles {
            let mut ids = input.layout.token_ids.clone();
            ids[p] = (ids[p] + 1 + r.random_range(0..data.vocab.len() - 1)) % data.vocab.len();
            variants.push(ids);
        }
        for ids in variants {
            let mut perturbed = NoteInput {
                layout: input.layout.clone(),
                image: input.image.clone(),
                image_only_layout: None,
            };
            perturbed.layout.token_ids = ids;
            let n_v = model.embed(&perturbed)?.n_v.expect("mICL n_v");
            forwards += 1;
            if bits(&n_v) != bits(&base) {
                changed += 1;
            }
        }
    }
    let secs = seconds(start);
    Ok(Outcome::all(vec![
        Outcome::new(
            changed == 0,
            format!("{changed}/{forwards} perturbations changed n_v"),
        ),
        Outcome::new(secs <= 30.0, format!("{secs:.1}s (limit 30s)")),
    ]))
}

/// 3. `|E_m| = L_c + T − 1`.
pub fn shape_law() -> Result<Outcome> {
    let data = Dataset::generate(&SynthConfig::new(31, 1000, 5, 1.0), &PairConfig::default(), 100)?;
    let mut checked = 0usize;
    let mut bad = Vec::new();
    for l_c in [1, 8, 16, 48] {
        for (mode, stride) in [(Mode::Notellm2, 0), (Mode::Basic, 1)] {
            let cfg = ModelConfig {
                l_c,
                ..tiny_config(mode, data.vocab.len())
            };
            let model = Model64::new(cfg, l_c as u64)?;
            for note in data.notes.iter().skip(stride).step_by(2) {
                let input = model.prepare(note, &data.vocab, Modality::Multimodal)?;
                let ImageInput::Patches(p) = &input.image else {
                    unreachable!("multimodal input carries patches")
                };
                let e_v = model.connect(&model.encode_image(p)?)?;
                let e_m = model.assemble(Some(&e_v), &input.layout)?;
                let t = input.layout.len();
                let rows = e_m.dims2().0;
                let seq = sequence_info(&input.layout, Some(l_c)).len;
                if e_v.dims2().0 != l_c || rows != l_c + t - 1 || seq != rows {
                    bad.push(format!("L_c={l_c} T={t} |E_m|={rows} seq={seq}"));
                }
                checked += 1;
            }
        }
    }
    Ok(Outcome::new(
        bad.is_empty(),
        format!(
            "{checked} note/L_c combinations, {} violations{}",
            bad.len(),
            bad.first().map_or(String::new(), |b| format!(" e.g. {b}"))
        ),
    ))
}

fn tape_contrastive(emb: &[Vec<f64>], partner: &[usize], tau: f64) -> Result<f64> {
    let mut t = Tape64::new();
    let d = emb[0].len();
    let e = t.input(&[emb.len(), d], emb.concat(), true)?;
    let tau = t.input(&[1], vec![tau], true)?;
    let l = contrastive_loss(&mut t, e, partner, tau)?;
    Ok(t.value(l)[0])
}

/// Direct evaluation of the in-batch loss, one row at a time.
fn brute_contrastive(emb: &[Vec<f64>], partner: &[usize], tau: f64) -> f64 {
    let norm = |a: &[f64]| a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cos = |a: &[f64], b: &[f64]| {
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b))
    };
    let scale = tau.exp();
    let n = emb.len();
    let mut total = 0.0;
    for i in 0..n {
        let pos = (cos(&emb[i], &emb[partner[i]]) * scale).exp();
        let denom: f64 = (0..n)
            .filter(|&j| j != i)
            .map(|j| (cos(&emb[i], &emb[j]) * scale).exp())
            .sum();
        total += -(pos / denom).ln();
    }
    total / n as f64
}

/// 4. Contrastive and combined loss oracles.
pub fn loss_oracles() -> Result<Outcome> {
    let mut r = rng(41);
    let mut parts = Vec::new();

    let single: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..5).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    let l1 = tape_contrastive(&single, &[1, 0], 0.7)?;
    parts.push(Outcome::new(l1 == 0.0, format!("B=1 loss {l1:e}")));

    let mut worst: f64 = 0.0;
    for case in 0..400 {
        let n = 2 * (1 + case % 4);
        let d = r.random_range(2..=8);
        let emb: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| r.random_range(-2.0..2.0)).collect())
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        let mut partner = vec![0; n];
        for pair in order.chunks(2) {
            partner[pair[0]] = pair[1];
            partner[pair[1]] = pair[0];
        }
        let tau = r.random_range(-1.0..2.0);
        let got = tape_contrastive(&emb, &partner, tau)?;
        worst = worst.max((got - brute_contrastive(&emb, &partner, tau)).abs());
    }
    parts.push(Outcome::new(
        worst <= 1e-12,
        format!("400 batches 2B<=8 vs brute force, worst abs {worst:.1e}"),
    ));

    // Partners share a basis vector; everything else is orthogonal.
    let ortho: Vec<Vec<f64>> = (0..4)
        .map(|i| (0..4).map(|j| if j == i / 2 { 1.0 } else { 0.0 }).collect())
        .collect();
    let got = tape_contrastive(&ortho, &[1, 0, 3, 2], 3.0)?;
    let exact = (2.0 * (-(3.0f64).exp()).exp()).ln_1p();
    let literal = 2.0 * (-(3.0f64).exp()).exp();
    let e_exact = rel_err(got, exact, 0.0);
    let e_literal = rel_err(got, literal, 0.0);
    parts.push(Outcome::new(
        e_exact <= 1e-12,
        format!("orthogonal tau=3 vs ln(1+2e^-e^3) rel {e_exact:.1e}"),
    ));
    parts.push(Outcome::new(
        e_literal <= 1e-12,
        format!("orthogonal tau=3 vs 2e^-e^3 rel {e_literal:.1e} (first-order value)"),
    ));

    let fl = final_loss(2.0, 1.0, 9.0);
    parts.push(Outcome::new(fl == 1.1, format!("final loss (2,1,9) = {fl}")));
    Ok(Outcome::all(parts))
}

/// 5. Gated fusion stays a convex combination.
pub fn gate_properties() -> Result<Outcome> {
    let mut r = rng(51);
    let (mut z_bad, mut between_bad, mut oracle_worst, mut equal_worst) = (0, 0, 0.0f64, 0.0f64);
    let cases = 100_000;
    for case in 0..cases {
        let h = r.random_range(1..=8);
        let scale = 1.0 / ((2 * h) as f64).sqrt();
        let v: Vec<f64> = (0..h).map(|_| r.random_range(-3.0..3.0)).collect();
        let n: Vec<f64> = if case % 10 == 0 {
            v.clone()
        } else {
            (0..h).map(|_| r.random_range(-3.0..3.0)).collect()
        };
        let w: Vec<f64> = (0..2 * h * h).map(|_| r.random_range(-scale..scale)).collect();
        let b: Vec<f64> = (0..h).map(|_| r.random_range(-1.0..1.0)).collect();

        let mut t = Tape64::new();
        let vv = t.input(&[1, h], v.clone(), false)?;
        let nv = t.input(&[1, h], n.clone(), false)?;
        let wv = t.input(&[h, 2 * h], w.clone(), false)?;
        let bv = t.input(&[h], b.clone(), false)?;
        let fused = gate_fuse(&mut t, vv, nv, wv, bv)?;
        let fused = t.value(fused).to_vec();
        // The gate as the fusion computes it.
        let vn = t.concat_cols(&[vv, nv])?;
        let pre = t.linear(vn, wv, Some(bv))?;
        let z_tape = t.sigmoid(pre);

        for i in 0..h {
            let a = b[i]
                + (0..h).map(|j| w[i * 2 * h + j] * v[j]).sum::<f64>()
                + (0..h).map(|j| w[i * 2 * h + h + j] * n[j]).sum::<f64>();
            let z = 1.0 / (1.0 + (-a).exp());
            let zt = t.value(z_tape)[i];
            if !(zt > 0.0 && zt < 1.0 && z > 0.0 && z < 1.0) {
                z_bad += 1;
            }
            let (lo, hi) = (v[i].min(n[i]), v[i].max(n[i]));
            if !(lo <= fused[i] && fused[i] <= hi) {
                between_bad += 1;
            }
            let expect = z * v[i] + (1.0 - z) * n[i];
            oracle_worst = oracle_worst.max((fused[i] - expect).abs());
            if v == n {
                equal_worst = equal_worst.max((fused[i] - v[i]).abs());
            }
        }
    }
    Ok(Outcome::all(vec![
        Outcome::new(z_bad == 0, format!("{cases} cases, {z_bad} gates outside (0,1)")),
        Outcome::new(
            between_bad == 0,
            format!("{between_bad} fused entries outside [min(v,n), max(v,n)]"),
        ),
        Outcome::new(
            oracle_worst <= 1e-12,
            format!("fused vs independent gate worst abs {oracle_worst:.1e}"),
        ),
        Outcome::new(
            equal_worst <= 1e-12,
            format!("v=n fused-v worst abs {equal_worst:.1e}"),
        ),
    ]))
}

/// Exact scores by sorting the log: `Σ_u 1/N_u` over the distinct users of
/// each ordered pair.
fn brute_cooccurrence(events: &[BehaviorEvent]) -> BTreeMap<(NoteId, NoteId), BigRational> {
    let mut clicks: Vec<(u64, NoteId)> = events.iter().map(|e| (e.user_id, e.clicked)).collect();
    clicks.sort_unstable();
    clicks.dedup();
    let n_u = |u: u64| clicks.iter().filter(|c| c.0 == u).count();
    let mut triples: Vec<(NoteId, NoteId, u64)> = events
        .iter()
        .map(|e| (e.viewed, e.clicked, e.user_id))
        .collect();
    triples.sort_unstable();
    triples.dedup();
    let mut out: BTreeMap<(NoteId, NoteId), BigRational> = BTreeMap::new();
    for (a, b, u) in triples {
        let w = BigRational::new(BigInt::from(1), BigInt::from(n_u(u)));
        let s = out.entry((a, b)).or_insert_with(BigRational::zero);
        *s = s.clone() + w;
    }
    out
}

/// Best `t` candidates by repeated selection of the maximum.
fn brute_pairs(scores: &BTreeMap<(NoteId, NoteId), f64>, cfg: &PairConfig) -> Vec<Pair> {
    let queries: Vec<NoteId> = {
        let mut q: Vec<NoteId> = scores.keys().map(|k| k.0).collect();
        q.dedup();
        q
    };
    let mut out = Vec::new();
    for q in queries {
        let mut left: Vec<(NoteId, f64)> = scores
            .iter()
            .filter(|(k, &s)| k.0 == q && s > cfg.low && s < cfg.up)
            .map(|(k, &s)| (k.1, s))
            .collect();
        for _ in 0..cfg.t {
            let mut best: Option<usize> = None;
            for (i, c) in left.iter().enumerate() {
                best = match best {
                    Some(b) if left[b].1 > c.1 || (left[b].1 == c.1 && left[b].0 < c.0) => Some(b),
                    _ => Some(i),
                };
            }
            let Some(b) = best else { break };
            let (r, s) = left.remove(b);
            out.push(Pair {
                query: q,
                related: r,
                score: s,
            });
        }
    }
    out
}

fn random_log(r: &mut impl Rng, events: usize, notes: u64, users: u64) -> Vec<BehaviorEvent> {
    (0..events)
        .map(|_| {
            let viewed = r.random_range(0..notes);
            let clicked = (viewed + r.random_range(1..notes)) % notes;
            BehaviorEvent {
                user_id: r.random_range(0..users),
                viewed,
                clicked,
            }
        })
        .collect()
}

/// 6. Co-occurrence scores and mined pairs against brute force.
pub fn cooccurrence_oracles() -> Result<Outcome> {
    let mut r = rng(61);
    let cfg = PairConfig::default();
    let mut parts = Vec::new();
    // Dense logs push scores past `up`; wide ones push them under `low`.
    for (notes, users) in [(5, 3000), (12, 400), (60, 150), (400, 30), (2000, 2000)] {
        let log = random_log(&mut r, 10_000, notes, users);
        let exact = cooccurrence::<BigRational>(&log)?;
        let oracle = brute_cooccurrence(&log);
        let float = cooccurrence::<f64>(&log)?;
        let float_worst = oracle
            .iter()
            .map(|(k, s)| {
                rel_err(float[k], s.to_f64().expect("finite score"), 0.0)
            })
            .fold(0.0, f64::max);
        let pairs = build_pairs(&float, &cfg)?;
        let over = float.values().filter(|&&s| s >= cfg.up).count();
        let under = float.values().filter(|&&s| s <= cfg.low).count();
        parts.push(Outcome::new(
            exact == oracle && float_worst <= 1e-12 && pairs == brute_pairs(&float, &cfg),
            format!(
                "{notes} notes/{users} users: {} scores exact, f64 rel {float_worst:.1e}, \
                 {} pairs, {over} >= up, {under} <= low",
                oracle.len(),
                pairs.len()
            ),
        ));
    }

    // Hand-placed scores on and around the bounds; query 1 has five
    // admissible candidates and keeps three.
    let mut scores = BTreeMap::new();
    for (b, s) in [(2, 30.0), (3, 35.0), (4, 0.01), (5, 0.005), (6, 29.5)] {
        scores.insert((0, b), s);
    }
    for (b, s) in [(2, 1.0), (3, 2.0), (4, 2.0), (5, 0.5), (6, 0.02)] {
        scores.insert((1, b), s);
    }
    let mined = build_pairs(&scores, &cfg)?;
    let got: Vec<(NoteId, NoteId)> = mined.iter().map(|p| (p.query, p.related)).collect();
    let want = vec![(0, 6), (1, 3), (1, 4), (1, 2)];
    parts.push(Outcome::new(
        got == want,
        format!("bounds 30/35/0.01/0.005 and t=3: {got:?}"),
    ));
    Ok(Outcome::all(parts))
}

fn random_table(r: &mut impl Rng, n: usize, dim: usize) -> Result<EmbeddingTable> {
    let mut ids: Vec<NoteId> = (0..n as u64 * 3).collect();
    ids.shuffle(r);
    ids.truncate(n);
    let vectors: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    EmbeddingTable::from_vectors(ids, &vectors)
}

/// 7. Exact search and recall behaviour.
pub fn retrieval_exactness() -> Result<Outcome> {
    let mut r = rng(71);
    let table = random_table(&mut r, 500, 16)?;
    let mut mismatches = 0;
    for (qi, &q) in table.ids().iter().enumerate() {
        let mut all: Vec<(NoteId, f64)> = (0..table.len())
            .filter(|&j| j != qi)
            .map(|j| {
                let s = table
                    .row(qi)
                    .iter()
                    .zip(table.row(j))
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum();
                (table.ids()[j], s)
            })
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for k in [1, 10, 100] {
            if topk(&table, q, k)? != all[..k] {
                mismatches += 1;
            }
        }
    }

    let ids = table.ids().to_vec();
    let pairs: Vec<Pair> = (0..3000)
        .map(|_| {
            let q = ids[r.random_range(0..ids.len())];
            let mut rel = q;
            while rel == q {
                rel = ids[r.random_range(0..ids.len())];
            }
            Pair {
                query: q,
                related: rel,
                score: 1.0,
            }
        })
        .collect();
    let ks: Vec<usize> = (1..ids.len()).collect();
    let recall = recall_at_k(&pairs, &table, &ks)?;
    let monotone = recall.windows(2).all(|w| w[0] <= w[1]) && recall[ids.len() - 2] == 1.0;

    let mut within = Vec::new();
    for k in [1, 10, 100] {
        let p = k as f64 / (ids.len() - 1) as f64;
        let sigma = (p * (1.0 - p) / pairs.len() as f64).sqrt();
        let got = recall[k - 1];
        within.push(Outcome::new(
            (got - p).abs() <= 3.0 * sigma,
            format!("R@{k} {got:.4} vs {p:.4}±{:.4}", 3.0 * sigma),
        ));
    }
    let mut parts = vec![
        Outcome::new(
            mismatches == 0,
            format!("topk vs O(n^2) oracle: {mismatches}/1500 mismatches"),
        ),
        Outcome::new(monotone, "recall@K nondecreasing over K=1..499"),
    ];
    parts.extend(within);
    Ok(Outcome::all(parts))
}

/// Independent attention of a one-layer, one-head LM: layer norm, query and
/// key projections and a causal softmax in plain loops.
fn direct_attention(model: &Model64, e_m: &[f64], len: usize) -> Vec<f64> {
    let h = model.config.h_t;
    let get = |name: &str| model.params.get(name).expect(name).values().to_vec();
    let (g, b) = (get("lm.blocks.0.ln1.g"), get("lm.blocks.0.ln1.b"));
    let (wq, bq) = (get("lm.blocks.0.attn.q.w"), get("lm.blocks.0.attn.q.b"));
    let (wk, bk) = (get("lm.blocks.0.attn.k.w"), get("lm.blocks.0.attn.k.b"));
    let normed: Vec<Vec<f64>> = e_m
        .chunks(h)
        .map(|row| {
            let mean = row.iter().sum::<f64>() / h as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / h as f64;
            let rs = 1.0 / (var + 1e-5).sqrt();
            (0..h).map(|j| (row[j] - mean) * rs * g[j] + b[j]).collect()
        })
        .collect();
    let project = |w: &[f64], bias: &[f64]| -> Vec<Vec<f64>> {
        normed
            .iter()
            .map(|x| {
                (0..h)
                    .map(|o| bias[o] + (0..h).map(|i| w[o * h + i] * x[i]).sum::<f64>())
                    .collect()
            })
            .collect()
    };
    let (q, k) = (project(&wq, &bq), project(&wk, &bk));
    let mut a = vec![0.0; len * len];
    for i in 0..len {
        let s: Vec<f64> = (0..=i)
            .map(|j| (0..h).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (h as f64).sqrt())
            .collect();
        let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
        for j in 0..=i {
            a[i * len + j] = (s[j] - m).exp() / z;
        }
    }
    a
}

/// 8. Saliency equals `|A ⊙ ∂L/∂A|`; position sets partition the triangle.
pub fn saliency_correctness() -> Result<Outcome> {
    let data = small_dataset(81);
    let cfg = ModelConfig {
        lm_layers: 1,
        lm_heads: 1,
        ..tiny_config(Mode::Notellm2, data.vocab.len())
    };
    let model = Model64::new(cfg, 81)?;
    let batch = make_batches(&data.split.train, 3, 81)?.next_batch()?;
    let inputs = batch
        .notes
        .iter()
        .map(|&id| {
            let note = data.notes.iter().find(|n| n.id == id).expect("batch note");
            model.prepare(note, &data.vocab, Modality::Multimodal)
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&NoteInput<f64>> = inputs.iter().collect();
    let opts = ForwardOptions {
        retain_attention: true,
        grads: true,
    };
    let pass = batch_pass(&model, 0.5, &refs, &batch.partner, &LossConfig::default(), opts)?;
    let (mut a_worst, mut i_worst) = (0.0f64, 0.0f64);
    for (graph, input) in pass.graphs.iter().zip(&inputs) {
        let ImageInput::Patches(p) = &input.image else {
            unreachable!("multimodal input carries patches")
        };
        let e_v = model.connect(&model.encode_image(p)?)?;
        let e_m = model.assemble(Some(&e_v), &input.layout)?;
        let len = graph.seq.len;
        let a_direct = direct_attention(&model, e_m.values(), len);
        let a_var = graph.attention[0][0];
        let a_tape = graph.tape.value(a_var);
        let grad = graph.tape.grad(a_var).expect("attention gradient");
        let i_l = &saliency_matrices(graph)?[0];
        for j in 0..len * len {
            a_worst = a_worst.max((a_tape[j] - a_direct[j]).abs());
            i_worst = i_worst.max((i_l[j] - (a_direct[j] * grad[j]).abs()).abs());
        }
    }

    let (mut partition_bad, mut fold_bad, mut seqs) = (0, 0, 0);
    for mode in [Mode::Notellm2, Mode::Basic] {
        let m = Model64::new(tiny_config(mode, data.vocab.len()), 1)?;
        for note in &data.notes {
            let input = m.prepare(note, &data.vocab, Modality::Multimodal)?;
            let seq = sequence_info(&input.layout, Some(m.config.l_c));
            for fold in [false, true] {
                let s = position_sets(&seq, fold);
                let all: HashSet<(usize, usize)> =
                    s.p_v.iter().chain(&s.p_t).chain(&s.p_o).copied().collect();
                let total = s.p_v.len() + s.p_t.len() + s.p_o.len();
                let tri = seq.len * (seq.len - 1) / 2;
                if total != tri || all.len() != tri || all.iter().any(|&(i, j)| j >= i) {
                    partition_bad += 1;
                }
            }
            if seq.visual_word.is_some() {
                let plain = position_sets(&seq, false).p_v.len();
                let folded = position_sets(&seq, true).p_v.len();
                if folded != plain + 1 {
                    fold_bad += 1;
                }
            }
            seqs += 1;
        }
    }
    Ok(Outcome::all(vec![
        Outcome::new(
            a_worst <= 1e-12,
            format!("attention vs direct recomputation worst {a_worst:.1e}"),
        ),
        Outcome::new(
            i_worst <= 1e-12,
            format!("I_l vs |A ⊙ dL/dA| worst {i_worst:.1e}"),
        ),
        Outcome::new(
            partition_bad == 0,
            format!("{seqs} sequences, {partition_bad} bad partitions"),
        ),
        Outcome::new(fold_bad == 0, format!("{fold_bad} folds not +1 on |P_v|")),
    ]))
}

/// Recall@10 of one trained variant on the test pairs of the pool.
pub struct DeskRun {
    pub mode: Mode,
    pub seed: u64,
    pub multimodal: f64,
    pub image: f64,
    pub final_loss: f64,
    pub secs: f64,
}

pub fn desk_run(data: &Dataset, mode: Mode, seed: u64, steps: usize) -> Result<DeskRun> {
    let start = Instant::now();
    let mut config = RunConfig::default();
    config.model.mode = mode;
    config.optim.steps = steps;
    config.run.seed = seed;
    let mut trainer = Trainer64::new(
        config,
        data.notes.clone(),
        &data.split.train,
        data.vocab.clone(),
    )?;
    let mut last = f64::NAN;
    for _ in 0..steps {
        last = trainer.step()?.loss;
    }
    let pool = data.pool_notes();
    let spec = EvalSpec {
        ks: vec![10],
        slices: vec![EvalSlice::All],
        seeds: vec![seed],
        pool_size: None,
    };
    let recall = |modality: Modality| -> Result<f64> {
        let table = build_table(&trainer.state.model, &pool, &data.vocab, modality, 1)?;
        let rows = evaluate(
            mode.name(),
            modality.name(),
            &Retriever::Embeddings(&table),
            &pool,
            &data.split.test,
            &spec,
        )?;
        Ok(rows[0].recall[0].expect("test pairs in the pool"))
    };
    Ok(DeskRun {
        mode,
        seed,
        multimodal: recall(Modality::Multimodal)?,
        image: recall(Modality::ImageOnly)?,
        final_loss: last,
        secs: seconds(start),
    })
}

/// 9. Desk-scale training experiment: hard gates (a), (b) on seed 42 and the
/// soft directional gate (c) over three seeds.
pub struct DeskOutcome {
    pub hard: Outcome,
    pub soft: Outcome,
    pub runs: Vec<DeskRun>,
}

pub fn desk_experiment() -> Result<DeskOutcome> {
    let start = Instant::now();
    let data = Dataset::generate(
        &SynthConfig::new(42, 2000, 5, 1.0),
        &PairConfig::default(),
        500,
    )?;
    let random = random_baseline(&[10], 500)[0];
    let mut runs = Vec::new();
    for seed in [42, 43, 44] {
        for mode in [Mode::Notellm2, Mode::Basic] {
            runs.push(desk_run(&data, mode, seed, 500)?);
        }
    }
    let secs = seconds(start);
    let find = |mode, seed| runs.iter().find(|r| r.mode == mode && r.seed == seed).unwrap();
    let n42 = find(Mode::Notellm2, 42);
    let hard = Outcome::all(vec![
        Outcome::new(
            n42.multimodal >= 5.0 * random,
            format!(
                "(a) notellm2 multimodal R@10 {:.4} >= {:.4}",
                n42.multimodal,
                5.0 * random
            ),
        ),
        Outcome::new(
            n42.image >= 2.0 * random,
            format!(
                "(b) notellm2 image R@10 {:.4} >= {:.4}",
                n42.image,
                2.0 * random
            ),
        ),
        Outcome::new(secs <= 900.0, format!("{secs:.0}s (limit 900s)")),
    ]);
    let wins: Vec<String> = [42, 43, 44]
        .iter()
        .map(|&s| {
            let (b, n) = (find(Mode::Basic, s), find(Mode::Notellm2, s));
            format!(
                "seed {s}: basic {:.4} {} notellm2 {:.4}",
                b.image,
                if b.image <= n.image { "<=" } else { ">" },
                n.image
            )
        })
        .collect();
    let held = [42, 43, 44]
        .iter()
        .filter(|&&s| find(Mode::Basic, s).image <= find(Mode::Notellm2, s).image)
        .count();
    let soft = Outcome::new(
        held >= 2,
        format!("(c) image R@10 {held}/3 seeds: {}", wins.join(", ")),
    );
    Ok(DeskOutcome { hard, soft, runs })
}

/// 10. Schedule endpoints and a hand-computed AdamW step.
pub fn optimizer_units() -> Result<Outcome> {
    let mut parts = Vec::new();
    for cfg in [OptimConfig::default(), OptimConfig::paper()] {
        let w = cfg.warmup_steps();
        parts.push(Outcome::new(
            cfg.lr(w) == cfg.peak_lr && cfg.lr(cfg.steps) == 0.0,
            format!(
                "lr({w})={:e} peak {:e}, lr({})={:e}",
                cfg.lr(w),
                cfg.peak_lr,
                cfg.steps,
                cfg.lr(cfg.steps)
            ),
        ));
    }
    // p=0.5, g=0.2, lr=1e-3, wd=1e-3, zero moments, t=1; then g=-0.1 at t=2.
    // Reference values worked out in 50-digit decimal arithmetic.
    let cfg = OptimConfig::default();
    let step = |decay: bool| {
        let (mut p, mut m, mut v) = ([0.5], [0.0], [0.0]);
        adamw_update(&mut p, &[0.2], &mut m, &mut v, 1, 1e-3, &cfg, decay);
        let first = p[0];
        adamw_update(&mut p, &[-0.1], &mut m, &mut v, 2, 1e-3, &cfg, decay);
        (first, p[0])
    };
    let (d1, d2) = step(true);
    let (n1, _) = step(false);
    let checks: [(&str, f64, f64); 3] = [
        ("decayed t=1", d1, 0.498_999_500_049_999_997_5),
        ("decayed t=2", d2, 0.498_732_664_027_686_705_8),
        ("undecayed t=1", n1, 0.499_000_000_049_999_997_5),
    ];
    for (name, got, want) in checks {
        let err = (got - want).abs();
        parts.push(Outcome::new(err <= 1e-12, format!("{name} err {err:.1e}")));
    }
    Ok(Outcome::all(parts))
}

/// 11. Bit-exact persistence and resume.
pub fn persistence() -> Result<Outcome> {
    let data = small_dataset(111);
    let mut config = RunConfig::default();
    config.model = tiny_config(Mode::Notellm2, data.vocab.len());
    config.data.batch_size = 4;
    config.optim.steps = 20;
    config.optim.peak_lr = 1e-2;
    let mut a = Trainer64::new(config, data.notes.clone(), &data.split.train, data.vocab.clone())?;
    for _ in 0..3 {
        a.step()?;
    }
    let ckpt = Checkpoint64 {
        state: a.state.clone(),
        config: a.config.clone(),
        vocab: a.vocab.clone(),
    };
    let bytes = encode_checkpoint(&ckpt)?;
    let again = encode_checkpoint(&decode_checkpoint::<f64>(&bytes)?)?;
    let dir = tempfile::tempdir().map_err(mlrm::Error::Io)?;
    let path = dir.path().join("run.ckpt");
    save_checkpoint(&path, &ckpt)?;
    let loaded = load_checkpoint::<f64>(&path)?;
    let file_same = encode_checkpoint(&loaded)? == bytes;

    let mut b = Trainer64::from_state(
        loaded.state,
        loaded.config,
        data.notes.clone(),
        &data.split.train,
        loaded.vocab,
    )?;
    let (la, lb) = (a.step()?.loss, b.step()?.loss);
    let params_same = a
        .state
        .model
        .params
        .iter()
        .zip(b.state.model.params.iter())
        .all(|(x, y)| bits(x.value.values()) == bits(y.value.values()));

    let pool = data.pool_notes();
    let table = build_table(&a.state.model, &pool, &data.vocab, Modality::Multimodal, 1)?;
    let tb = table.to_bytes();
    let tpath = dir.path().join("emb.bin");
    table.save(&tpath)?;
    let table_same = EmbeddingTable::from_bytes(&tb)?.to_bytes() == tb
        && EmbeddingTable::load(&tpath)?.to_bytes() == tb
        && EmbeddingTable::load(&tpath)? == table;

    Ok(Outcome::all(vec![
        Outcome::new(
            again == bytes && file_same,
            format!("checkpoint {} bytes round-trips", bytes.len()),
        ),
        Outcome::new(table_same, format!("embedding table {} bytes round-trips", tb.len())),
        Outcome::new(
            la.to_bits() == lb.to_bits() && params_same,
            format!("resumed next loss {la:.17} vs {lb:.17}, params identical: {params_same}"),
        ),
    ]))
}
