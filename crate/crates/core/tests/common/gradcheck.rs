//! Central finite differences against the tape's reverse-mode gradients.

use mlrm::data::{make_batches, Dataset};
use mlrm::model::{gate_fuse, ForwardOptions, Mode, NoteInput};
use mlrm::train::{batch_pass, LossConfig};
use mlrm::{Model64, Result, Tape64, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{rel_err, rng, tiny_config};

/// Difference step.
pub const STEP: f64 = 1e-6;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor: the difference quotient carries ~1e-10 of round-off,
/// so gradients below this are judged on absolute error instead.
pub const FLOOR: f64 = 1e-5;

pub struct Input {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub diff: bool,
}

type Build = Box<dyn Fn(&mut Tape64, &[Var]) -> Result<Var>>;

/// Inputs plus the function of them under test.
pub struct Case {
    pub inputs: Vec<Input>,
    pub f: Build,
}

/// Per-primitive summary.
#[derive(Clone, Debug)]
pub struct Report {
    pub name: &'static str,
    pub cases: usize,
    pub entries: usize,
    pub worst: f64,
}

fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

fn mat(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Input {
    Input {
        shape: vec![rows, cols],
        data: uniform(r, rows * cols, -2.0, 2.0),
        diff: true,
    }
}

fn vec1(r: &mut ChaCha8Rng, n: usize) -> Input {
    Input {
        shape: vec![n],
        data: uniform(r, n, -2.0, 2.0),
        diff: true,
    }
}

fn dim(r: &mut ChaCha8Rng) -> usize {
    r.random_range(1..=4)
}

/// `Σ out ⊙ W` for a fixed random `W`, so every output entry matters.
fn weighted_loss(case: &Case, data: &[Vec<f64>], w_seed: u64) -> Result<(Tape64, Vec<Var>, Var)> {
    let mut t = Tape64::new();
    let vars = case
        .inputs
        .iter()
        .zip(data)
        .map(|(inp, d)| t.input(&inp.shape, d.clone(), inp.diff))
        .collect::<Result<Vec<_>>>()?;
    let out = (case.f)(&mut t, &vars)?;
    let shape = t.shape(out).to_vec();
    let w = uniform(&mut rng(w_seed), t.value(out).len(), -1.0, 1.0);
    let w = t.input(&shape, w, false)?;
    let prod = t.mul(out, w)?;
    let loss = t.sum(prod);
    Ok((t, vars, loss))
}

/// Number of compared entries and the worst relative error.
pub fn check_case(case: &Case, w_seed: u64) -> Result<(usize, f64)> {
    let data: Vec<Vec<f64>> = case.inputs.iter().map(|i| i.data.clone()).collect();
    let (mut t, vars, loss) = weighted_loss(case, &data, w_seed)?;
    t.backward(loss)?;
    let (mut entries, mut worst) = (0, 0.0f64);
    for (k, inp) in case.inputs.iter().enumerate() {
        if !inp.diff {
            continue;
        }
        let analytic = t
            .grad(vars[k])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inp.data.len()]);
        for (j, &a) in analytic.iter().enumerate() {
            let at = |delta: f64| -> Result<f64> {
                let mut d = data.clone();
                d[k][j] += delta;
                let (t, _, l) = weighted_loss(case, &d, w_seed)?;
                Ok(t.value(l)[0])
            };
            let numeric = (at(STEP)? - at(-STEP)?) / (2.0 * STEP);
            worst = worst.max(rel_err(a, numeric, FLOOR));
            entries += 1;
        }
    }
    Ok((entries, worst))
}

type Generator = fn(&mut ChaCha8Rng) -> Case;

fn binary(r: &mut ChaCha8Rng, op: fn(&mut Tape64, Var, Var) -> Result<Var>) -> Case {
    let (m, n) = (dim(r), dim(r));
    Case {
        inputs: vec![mat(r, m, n), mat(r, m, n)],
        f: Box::new(move |t, v| op(t, v[0], v[1])),
    }
}

fn unary(r: &mut ChaCha8Rng, op: fn(&mut Tape64, Var) -> Var) -> Case {
    let (m, n) = (dim(r), dim(r));
    Case {
        inputs: vec![mat(r, m, n)],
        f: Box::new(move |t, v| Ok(op(t, v[0]))),
    }
}

/// Every differentiable primitive of the tape, plus the fusion gate.
pub fn primitives() -> Vec<(&'static str, Generator)> {
    vec![
        ("add", |r| binary(r, |t, a, b| t.add(a, b))),
        ("sub", |r| binary(r, |t, a, b| t.sub(a, b))),
        ("mul", |r| binary(r, |t, a, b| t.mul(a, b))),
        ("scale", |r| {
            let (m, n) = (dim(r), dim(r));
            let c = r.random_range(-3.0..3.0);
            Case {
                inputs: vec![mat(r, m, n)],
                f: Box::new(move |t, v| Ok(t.scale(v[0], c))),
            }
        }),
        ("add_row_bias", |r| {
            let (m, n) = (dim(r), dim(r));
            Case {
                inputs: vec![mat(r, m, n), vec1(r, n)],
                f: Box::new(|t, v| t.add_row_bias(v[0], v[1])),
            }
        }),
        ("matmul", |r| {
            let (m, k, n) = (dim(r), dim(r), dim(r));
            Case {
                inputs: vec![mat(r, m, k), mat(r, k, n)],
                f: Box::new(|t, v| t.matmul(v[0], v[1])),
            }
        }),
        ("matmul_nt", |r| {
            let (m, k, n) = (dim(r), dim(r), dim(r));
            Case {
                inputs: vec![mat(r, m, k), mat(r, n, k)],
                f: Box::new(|t, v| t.matmul_nt(v[0], v[1])),
            }
        }),
        ("matmul_nt_scaled", |r| {
            let (m, k, n) = (dim(r), dim(r), dim(r));
            let alpha = r.random_range(-2.0..2.0);
            Case {
                inputs: vec![mat(r, m, k), mat(r, n, k)],
                f: Box::new(move |t, v| t.matmul_nt_scaled(v[0], v[1], alpha)),
            }
        }),
        ("linear", |r| {
            let (m, k, n) = (dim(r), dim(r), dim(r));
            let with_bias = r.random_bool(0.5);
            Case {
                inputs: vec![mat(r, m, k), mat(r, n, k), vec1(r, n)],
                f: Box::new(move |t, v| t.linear(v[0], v[1], with_bias.then_some(v[2]))),
            }
        }),
        ("transpose", |r| unary(r, |t, x| t.transpose(x).unwrap())),
        ("concat_rows", |r| {
            let cols = dim(r);
            let parts = r.random_range(1..=3);
            Case {
                inputs: (0..parts)
                    .map(|_| {
                        let rows = dim(r);
                        mat(r, rows, cols)
                    })
                    .collect(),
                f: Box::new(|t, v| t.concat_rows(v)),
            }
        }),
        ("concat_cols", |r| {
            let rows = dim(r);
            let parts = r.random_range(1..=3);
            Case {
                inputs: (0..parts)
                    .map(|_| {
                        let cols = dim(r);
                        mat(r, rows, cols)
                    })
                    .collect(),
                f: Box::new(|t, v| t.concat_cols(v)),
            }
        }),
        ("slice_rows", |r| {
            let (m, n) = (dim(r) + 1, dim(r));
            let start = r.random_range(0..m);
            let len = r.random_range(1..=m - start);
            Case {
                inputs: vec![mat(r, m, n)],
                f: Box::new(move |t, v| t.slice_rows(v[0], start, len)),
            }
        }),
        ("slice_cols", |r| {
            let (m, n) = (dim(r), dim(r) + 1);
            let start = r.random_range(0..n);
            let len = r.random_range(1..=n - start);
            Case {
                inputs: vec![mat(r, m, n)],
                f: Box::new(move |t, v| t.slice_cols(v[0], start, len)),
            }
        }),
        ("embedding", |r| {
            let (rows, cols) = (dim(r) + 1, dim(r));
            let ids: Vec<usize> = (0..r.random_range(1..=6))
                .map(|_| r.random_range(0..rows))
                .collect();
            Case {
                inputs: vec![mat(r, rows, cols)],
                f: Box::new(move |t, v| t.embedding(v[0], &ids)),
            }
        }),
        ("layer_norm", |r| {
            let (m, n) = (dim(r), dim(r) + 1);
            Case {
                inputs: vec![mat(r, m, n), vec1(r, n), vec1(r, n)],
                f: Box::new(|t, v| t.layer_norm(v[0], v[1], v[2])),
            }
        }),
        ("gelu", |r| unary(r, |t, x| t.gelu(x))),
        ("sigmoid", |r| unary(r, |t, x| t.sigmoid(x))),
        ("exp", |r| unary(r, |t, x| t.exp(x))),
        ("masked_softmax", |r| {
            let (m, n) = (dim(r), dim(r));
            let mut mask: Vec<bool> = (0..m * n).map(|_| r.random_bool(0.6)).collect();
            for row in 0..m {
                let keep = r.random_range(0..n);
                mask[row * n + keep] = true;
            }
            Case {
                inputs: vec![mat(r, m, n)],
                f: Box::new(move |t, v| t.masked_softmax(v[0], &mask)),
            }
        }),
        ("softmax", |r| unary(r, |t, x| t.softmax(x).unwrap())),
        ("causal_softmax", |r| {
            let n = dim(r);
            Case {
                inputs: vec![mat(r, n, n)],
                f: Box::new(|t, v| t.causal_softmax(v[0])),
            }
        }),
        ("sum", |r| unary(r, |t, x| t.sum(x))),
        ("mean", |r| unary(r, |t, x| t.mean(x))),
        ("cosine_similarity", |r| {
            let (m, n) = (dim(r), dim(r) + 1);
            Case {
                inputs: vec![mat(r, m, n), mat(r, m, n)],
                f: Box::new(|t, v| t.cosine_similarity(v[0], v[1])),
            }
        }),
        ("normalize_rows", |r| {
            let (m, n) = (dim(r), dim(r) + 1);
            Case {
                inputs: vec![mat(r, m, n)],
                f: Box::new(|t, v| t.normalize_rows(v[0])),
            }
        }),
        ("scale_by", |r| {
            let (m, n) = (dim(r), dim(r));
            Case {
                inputs: vec![mat(r, m, n), vec1(r, 1)],
                f: Box::new(|t, v| t.scale_by(v[0], v[1])),
            }
        }),
        ("contrastive", |r| {
            let n = 2 * dim(r);
            let partner: Vec<usize> = (0..n).map(|i| i ^ 1).collect();
            Case {
                inputs: vec![mat(r, n, n)],
                f: Box::new(move |t, v| t.contrastive(v[0], &partner)),
            }
        }),
        ("gate_fuse", |r| {
            let h = dim(r);
            Case {
                inputs: vec![mat(r, 1, h), mat(r, 1, h), mat(r, h, 2 * h), vec1(r, h)],
                f: Box::new(|t, v| gate_fuse(t, v[0], v[1], v[2], v[3])),
            }
        }),
    ]
}

/// Runs `cases` random cases of every primitive.
pub fn primitive_suite(cases: usize) -> Result<Vec<Report>> {
    primitives()
        .into_iter()
        .enumerate()
        .map(|(p, (name, generate))| {
            let mut report = Report {
                name,
                cases,
                entries: 0,
                worst: 0.0,
            };
            for c in 0..cases {
                let seed = (p * 100_003 + c) as u64;
                let case = generate(&mut rng(seed));
                let (entries, worst) = check_case(&case, seed ^ 0x5eed)?;
                report.entries += entries;
                report.worst = report.worst.max(worst);
            }
            Ok(report)
        })
        .collect()
}

fn batch_loss(model: &Model64, tau: f64, inputs: &[&NoteInput<f64>], partner: &[usize]) -> Result<f64> {
    let opts = ForwardOptions::default();
    Ok(batch_pass(model, tau, inputs, partner, &LossConfig::default(), opts)?.loss)
}

/// Worst relative error over `samples` parameter entries (and `τ`) of the
/// full loss of `mode` on a two-pair batch, with vision unfrozen so every
/// parameter group is reachable.
pub fn model_check(data: &Dataset, mode: Mode, samples: usize, seed: u64) -> Result<(usize, f64)> {
    let mut cfg = tiny_config(mode, data.vocab.len());
    cfg.freeze_vision = false;
    let model = Model64::new(cfg, seed)?;
    let batch = make_batches(&data.split.train, 2, seed)?.next_batch()?;
    let by_id = |id| data.notes.iter().find(|n| n.id == id).expect("batch note");
    let inputs = batch
        .notes
        .iter()
        .map(|&id| model.prepare(by_id(id), &data.vocab, mlrm::model::Modality::Multimodal))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&NoteInput<f64>> = inputs.iter().collect();
    let tau = 1.0;
    let opts = ForwardOptions {
        grads: true,
        retain_attention: false,
    };
    let pass = batch_pass(&model, tau, &refs, &batch.partner, &LossConfig::default(), opts)?;
    let grads = pass.param_grads(model.params.len());

    // Rows of the token and position tables that the batch actually reads.
    let tokens: Vec<usize> = inputs.iter().flat_map(|i| i.layout.token_ids.clone()).collect();
    let shortest = inputs.iter().map(|i| i.layout.len()).min().unwrap_or(1);

    let mut r = rng(seed ^ 0xfeed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let i = r.random_range(0..model.params.len());
        let p = model.params.param(i);
        let cols = p.value.dims2().1;
        let j = match p.name.as_str() {
            "lm.tok" => tokens[r.random_range(0..tokens.len())] * cols + r.random_range(0..cols),
            "lm.pos" => r.random_range(0..shortest) * cols + r.random_range(0..cols),
            _ => r.random_range(0..p.value.len()),
        };
        let analytic = grads[i].as_ref().map_or(0.0, |g| g[j]);
        let at = |delta: f64| -> Result<f64> {
            let mut m = model.clone();
            m.params.param_mut(i).value.values_mut()[j] += delta;
            batch_loss(&m, tau, &refs, &batch.partner)
        };
        let numeric = (at(STEP)? - at(-STEP)?) / (2.0 * STEP);
        worst = worst.max(rel_err(analytic, numeric, FLOOR));
    }
    let numeric_tau = (batch_loss(&model, tau + STEP, &refs, &batch.partner)?
        - batch_loss(&model, tau - STEP, &refs, &batch.partner)?)
        / (2.0 * STEP);
    worst = worst.max(rel_err(pass.tau_grad, numeric_tau, FLOOR));
    Ok((samples + 1, worst))
}
