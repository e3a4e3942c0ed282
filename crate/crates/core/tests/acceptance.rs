//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use dqrec::config::{RunConfig, Stage};
use dqrec::data::{EntityKind, InteractionRecord, NegativeSampler};
use dqrec::eval::{evaluate, ndcg_at_k, RandomScorer};
use dqrec::index::{explicit_neighbors, latent_neighbors, QuantizedRep, RepStore, StoreEntry};
use dqrec::nn::{gelu, gelu_grad, Activation, DenseLayer, Parameters};
use dqrec::pipeline::{EvalOutcome, Pipeline};
use dqrec::quantizer::{
    encode, fit_basis, fit_quantizer, partition_columns, starting_codebooks, train_codebooks, CodebookConfig, QuantizerModel, SemanticId,
};
use dqrec::recommender::{bpr_triple, Augmentation, EntityContext, RecConfig, RecModel};

type Outcome = std::result::Result<String, String>;

fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = Normal::new(0.0, 1.0).unwrap();
    DMatrix::from_fn(rows, cols, |_, _| n.sample(rng))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn ensure(ok: bool, msg: String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------- 1

fn basis_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_orth, mut worst_cov, mut worst_var, mut worst_eig) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for m in 0..20 {
        // anisotropic, shifted columns
        let scales: Vec<f64> = (0..8).map(|_| rng.random_range(0.1..5.0)).collect();
        let shift: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
        let raw = normal_matrix(200, 8, &mut rng);
        let mix = normal_matrix(8, 8, &mut rng);
        let mut z = raw * mix;
        for (c, mut col) in z.column_iter_mut().enumerate() {
            col *= scales[c];
            col.add_scalar_mut(shift[c]);
        }
        let layers = [1, 2, 4, 8][m % 4];
        let basis = fit_basis(&z, layers, EntityKind::User).map_err(|e| e.to_string())?;
        let w = basis.stacked();
        worst_orth = worst_orth.max((w.transpose() * &w - DMatrix::<f64>::identity(8, 8)).amax());

        let n = z.nrows() as f64;
        let mut centered = z.clone();
        for mut col in centered.column_iter_mut() {
            let mean = col.sum() / n;
            col.add_scalar_mut(-mean);
        }
        let y = &centered * &w;
        let cov = y.transpose() * &y / n;
        let max_diag = (0..8).map(|a| cov[(a, a)]).fold(0.0, f64::max);
        for a in 0..8 {
            for b in 0..8 {
                if a != b {
                    worst_cov = worst_cov.max(cov[(a, b)].abs() / max_diag);
                }
            }
        }
        let sigmas: Vec<f64> = basis.sigmas.iter().flatten().copied().collect();
        for (a, s) in sigmas.iter().enumerate() {
            let expected = s * s / n;
            worst_var = worst_var.max((cov[(a, a)] - expected).abs() / expected);
        }
        // spectrum against an eigen-decomposition of the scatter matrix
        let eig = SymmetricEigen::new(centered.transpose() * &centered);
        let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        let mut sq: Vec<f64> = sigmas.iter().map(|s| s * s).collect();
        ev.sort_by(f64::total_cmp);
        sq.sort_by(f64::total_cmp);
        let top = ev[7];
        for (a, b) in ev.iter().zip(&sq) {
            worst_eig = worst_eig.max((a - b).abs() / top);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "max |W'W-I| {worst_orth:.1e}, max off-diag cov / max diag {worst_cov:.1e}, variance identity rel err {worst_var:.1e}, spectrum vs eigen {worst_eig:.1e}, {secs:.2}s"
    );
    ensure(worst_orth <= 1e-6 && worst_cov <= 1e-6 && worst_var <= 1e-9 && worst_eig <= 1e-9 && secs < 5.0, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 2

fn objective(loads: &[f64]) -> f64 {
    let mut total = 0.0;
    for a in loads {
        for b in loads {
            total += (a - b).abs();
        }
    }
    total
}

/// Minimum objective over every split of the columns into equal blocks.
fn exhaustive_optimum(sigma_sq: &[f64], layers: usize) -> f64 {
    fn go(k: usize, s: &[f64], size: usize, counts: &mut Vec<usize>, loads: &mut Vec<f64>, best: &mut f64) {
        if k == s.len() {
            *best = best.min(objective(loads));
            return;
        }
        let mut opened_empty = false;
        for b in 0..counts.len() {
            if counts[b] == size {
                continue;
            }
            // blocks are interchangeable: only the first empty one is tried
            if counts[b] == 0 {
                if opened_empty {
                    continue;
                }
                opened_empty = true;
            }
            counts[b] += 1;
            loads[b] += s[k];
            go(k + 1, s, size, counts, loads, best);
            counts[b] -= 1;
            loads[b] -= s[k];
        }
    }
    let mut best = f64::INFINITY;
    go(0, sigma_sq, sigma_sq.len() / layers, &mut vec![0; layers], &mut vec![0.0; layers], &mut best);
    best
}

fn partition_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut suboptimal = 0;
    let mut worst_ratio = 0.0f64;
    for _ in 0..100 {
        let layers = [2, 3, 4][rng.random_range(0..3)];
        let size = rng.random_range(1..=12 / layers);
        let d = size * layers;
        let sigma_sq: Vec<f64> = (0..d).map(|_| rng.random_range(0.0f64..1.0).powi(2) * 10.0).collect();
        let blocks = partition_columns(&sigma_sq, layers).map_err(|e| e.to_string())?;
        let mut seen: Vec<usize> = blocks.iter().flatten().copied().collect();
        seen.sort_unstable();
        ensure(seen == (0..d).collect::<Vec<_>>() && blocks.iter().all(|b| b.len() == size), format!("invalid partition {blocks:?}"))?;
        let loads: Vec<f64> = blocks.iter().map(|b| b.iter().map(|&c| sigma_sq[c]).sum()).collect();
        let greedy = objective(&loads);
        let best = exhaustive_optimum(&sigma_sq, layers);
        if greedy > best + 1e-9 * best.max(1.0) {
            suboptimal += 1;
            let max_sq = sigma_sq.iter().copied().fold(0.0, f64::max);
            let spread = loads.iter().copied().fold(f64::MIN, f64::max) - loads.iter().copied().fold(f64::MAX, f64::min);
            worst_ratio = worst_ratio.max(spread / max_sq);
            ensure(spread <= max_sq, format!("greedy load gap {spread} exceeds max sigma^2 {max_sq} on {sigma_sq:?}"))?;
        }
    }
    Ok(format!(
        "greedy optimal on {}/100 instances; {suboptimal} suboptimal, worst load gap {:.2} x max sigma^2",
        100 - suboptimal,
        worst_ratio
    ))
}

// ---------------------------------------------------------------- 3

fn quantizer_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let z = normal_matrix(600, 8, &mut rng) * normal_matrix(8, 8, &mut rng);
    let config = CodebookConfig {
        size: 16,
        epochs: 5,
        batch_size: 64,
        lr: 1e-2,
        ..CodebookConfig::default()
    };
    let (model, _) = fit_quantizer(&z, 4, EntityKind::Item, &config, &mut rng).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut stable = 0;
    for _ in 0..1000 {
        let v: Vec<f64> = normal_matrix(1, 8, &mut rng).iter().map(|x| 2.0 * x).collect();
        let latents = encode(&v, &model.basis).map_err(|e| e.to_string())?;
        let id = model.assign(&latents).map_err(|e| e.to_string())?;
        let z_hat = model.decode(&id).map_err(|e| e.to_string())?;
        let recon = sq_dist(z_hat.as_slice(), &v);
        let commit: f64 = latents
            .iter()
            .zip(&id.0)
            .zip(&model.codebooks)
            .map(|((x, &c), cb)| sq_dist(x.as_slice(), cb.codeword(c)))
            .sum();
        worst = worst.max((recon - commit).abs() / recon);
        let again = model.assign(&model.encode(z_hat.as_slice()).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        if again == id {
            stable += 1;
        }
    }
    let detail = format!("max |L_R - L_C| / L_R {worst:.1e}; idempotent on {stable}/1000");
    ensure(worst <= 1e-8 && stable == 1000, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 4

/// Lloyd iterations from `centers` until the SSE stops decreasing.
fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>) -> f64 {
    let k = centers.len();
    let dim = points[0].len();
    let mut prev = f64::INFINITY;
    loop {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        let mut sse = 0.0;
        for p in points {
            let (d, j) = centers
                .iter()
                .enumerate()
                .map(|(j, c)| (sq_dist(p, c), j))
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .unwrap();
            sse += d;
            counts[j] += 1;
            sums[j].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        if prev - sse <= 1e-12 * sse {
            return sse;
        }
        prev = sse;
    }
}

/// Best of 20 k-means++ seeded Lloyd runs.
fn lloyd_restarts(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..20 {
        let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
        while centers.len() < k {
            let w: Vec<f64> = points
                .iter()
                .map(|p| centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
                .collect();
            let mut target = rng.random_range(0.0..w.iter().sum::<f64>());
            let mut pick = points.len() - 1;
            for (i, wi) in w.iter().enumerate() {
                if target < *wi {
                    pick = i;
                    break;
                }
                target -= wi;
            }
            centers.push(points[pick].clone());
        }
        best = best.min(lloyd(points, centers));
    }
    best
}

fn codebook_quality() -> Outcome {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let dim = 4;
        let centers: Vec<Vec<f64>> = (0..8).map(|_| (0..dim).map(|_| rng.random_range(-6.0..6.0)).collect()).collect();
        let noise = Normal::new(0.0, 1.0).unwrap();
        let z = DMatrix::from_fn(1000, dim, |r, c| centers[r % 8][c] + noise.sample(&mut rng));
        let config = CodebookConfig {
            size: 8,
            beta: 0.25,
            epochs: 300,
            batch_size: 100,
            lr: 0.02,
        };
        let basis = fit_basis(&z, 1, EntityKind::Item).map_err(|e| e.to_string())?;
        let start_from = starting_codebooks(&z, &basis, 8, &mut rng.clone()).map_err(|e| e.to_string())?;
        let trained = train_codebooks(&z, &basis, &config, &mut rng).map_err(|e| e.to_string())?;
        let latents: Vec<Vec<f64>> = (0..1000)
            .map(|r| {
                let row: Vec<f64> = z.row(r).iter().copied().collect();
                encode(&row, &basis).map(|x| x[0].as_slice().to_vec())
            })
            .collect::<dqrec::Result<_>>()
            .map_err(|e| e.to_string())?;
        let cb = &trained.codebooks[0];
        let ours = latents
            .iter()
            .map(|x| (0..8).map(|j| sq_dist(x, cb.codeword(j))).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / 1000.0;
        let oracle = lloyd(&latents, (0..8).map(|j| start_from[0].codeword(j).to_vec()).collect()) / 1000.0;
        let global = lloyd_restarts(&latents, 8, &mut rng) / 1000.0;
        let ratio = ours / oracle;
        ok &= ratio <= 1.05;
        lines.push(format!("seed {seed}: {ours:.4} vs Lloyd {oracle:.4} ({ratio:.3}; best-of-20 restarts {:.3})", ours / global));
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("{}; {secs:.1}s", lines.join(", "));
    ensure(ok && secs < 30.0, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 5

const STEP: f64 = 1e-4;

/// Max `|analytic - numeric| / max(|numeric|, 1e-7)` with central differences.
fn max_rel_error(f: impl Fn(&[f64]) -> f64, point: &[f64], analytic: &[f64]) -> f64 {
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for k in 0..x.len() {
        let orig = x[k];
        x[k] = orig + STEP;
        let plus = f(&x);
        x[k] = orig - STEP;
        let minus = f(&x);
        x[k] = orig;
        let numeric = (plus - minus) / (2.0 * STEP);
        worst = worst.max((analytic[k] - numeric).abs() / numeric.abs().max(1e-7));
    }
    worst
}

fn random_vec(n: usize, std: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let d = Normal::new(0.0, std).unwrap();
    DVector::from_fn(n, |_, _| d.sample(rng))
}

fn ctx(entity: usize, sid: &[usize], sequence: &[usize], neighbors: &[usize]) -> EntityContext {
    EntityContext {
        entity,
        visible: sequence.len(),
        semantic_id: SemanticId(sid.to_vec()),
        sequence: sequence.to_vec(),
        neighbors: neighbors.to_vec(),
    }
}

fn small_rec_config() -> RecConfig {
    RecConfig {
        id_dim: 8,
        hidden: 6,
        output: 5,
        layers: 2,
        codebook_size: 3,
        init_std: 0.8,
        ..RecConfig::default()
    }
}

fn gradient_suite() -> Outcome {
    let mut worst: HashMap<&str, f64> = HashMap::new();
    let mut note = |name: &'static str, e: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
    };
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);

        let xs: Vec<f64> = (0..50).map(|_| rng.random_range(-6.0..6.0)).collect();
        let analytic: Vec<f64> = xs.iter().map(|&x| gelu_grad(x)).collect();
        for (k, &x) in xs.iter().enumerate() {
            note("gelu", max_rel_error(|p| gelu(p[0]), &[x], &analytic[k..k + 1]));
        }

        for activation in [Activation::Gelu, Activation::Identity] {
            let mut layer = DenseLayer::new(7, 5, activation, &mut rng);
            layer.bias = random_vec(5, 0.5, &mut rng);
            let input = random_vec(7, 1.0, &mut rng);
            let c = random_vec(5, 1.0, &mut rng);
            let mut grad = layer.zeros_like();
            let trace = layer.forward(&input).map_err(|e| e.to_string())?;
            let g_in = layer.backward(&trace, &c, &mut grad).map_err(|e| e.to_string())?;
            for t in 0..2 {
                let point = layer.tensors()[t].to_vec();
                let f = |p: &[f64]| {
                    let mut l = layer.clone();
                    l.tensors_mut()[t].copy_from_slice(p);
                    l.apply(&input).unwrap().dot(&c)
                };
                note("dense", max_rel_error(f, &point, grad.tensors()[t]));
            }
            let f = |p: &[f64]| layer.apply(&DVector::from_column_slice(p)).unwrap().dot(&c);
            note("dense", max_rel_error(f, input.as_slice(), g_in.as_slice()));
        }

        // sigmoid-normalized scores inside BPR
        let (zu, zi, zj) = (random_vec(6, 0.7, &mut rng), random_vec(6, 0.7, &mut rng), random_vec(6, 0.7, &mut rng));
        let g = bpr_triple(&zu, &zi, &zj);
        let n = zu.len();
        let mut joint: Vec<f64> = zu.iter().chain(zi.iter()).chain(zj.iter()).copied().collect();
        let analytic: Vec<f64> = g.grad_user.iter().chain(g.grad_pos.iter()).chain(g.grad_neg.iter()).copied().collect();
        let split = |p: &[f64]| {
            (
                DVector::from_column_slice(&p[..n]),
                DVector::from_column_slice(&p[n..2 * n]),
                DVector::from_column_slice(&p[2 * n..]),
            )
        };
        note(
            "sigmoid+bpr",
            max_rel_error(
                |p| {
                    let (a, b, c) = split(p);
                    bpr_triple(&a, &b, &c).loss
                },
                &joint,
                &analytic,
            ),
        );
        // negative at the origin isolates the sigmoid derivative of one score
        joint[2 * n..].fill(0.0);
        let (a, b, c) = split(&joint);
        let g = bpr_triple(&a, &b, &c);
        note(
            "sigmoid+bpr",
            max_rel_error(
                |p| bpr_triple(&a, &DVector::from_column_slice(p), &c).loss,
                b.as_slice(),
                g.grad_pos.as_slice(),
            ),
        );

        // embedding lookups and mean pooling, through one tower
        let config = small_rec_config();
        let model = RecModel::new(6, 7, &config, &mut rng).map_err(|e| e.to_string())?;
        let tables = 2 + 2 * config.layers;
        for (kind, cx) in [
            (EntityKind::User, ctx(1, &[0, 2], &[0, 3, 3, 6], &[2, 4, 5])),
            (EntityKind::Item, ctx(4, &[1, 1], &[5, 0], &[0, 6, 4])),
        ] {
            let c = random_vec(config.output, 1.0, &mut rng);
            let mut grad = model.zeros_like();
            let fwd = model.forward(kind, &cx).map_err(|e| e.to_string())?;
            model.backward(kind, &cx, &fwd, &c, &mut grad).map_err(|e| e.to_string())?;
            for t in 0..tables {
                let point = model.tensors()[t].to_vec();
                let f = |p: &[f64]| {
                    let mut m = model.clone();
                    m.tensors_mut()[t].copy_from_slice(p);
                    m.embed(kind, &cx).unwrap().dot(&c)
                };
                note("embeddings+pooling", max_rel_error(f, &point, grad.tensors()[t]));
            }
        }

        // full chain: tables -> concat -> towers -> scores -> BPR
        let u = ctx(1, &[0, 2], &[0, 3, 3], &[2, 4]);
        let i = ctx(3, &[1, 2], &[1], &[0, 5, 6]);
        let j = ctx(5, &[2, 2], &[], &[3]);
        let mut grad = model.zeros_like();
        model.triple_loss(&u, &i, &j, Some(&mut grad)).map_err(|e| e.to_string())?;
        for t in 0..model.tensors().len() {
            let point = model.tensors()[t].to_vec();
            let f = |p: &[f64]| {
                let mut m = model.clone();
                m.tensors_mut()[t].copy_from_slice(p);
                m.triple_loss(&u, &i, &j, None).unwrap()
            };
            note("full chain", max_rel_error(f, &point, grad.tensors()[t]));
        }
    }
    let mut names: Vec<_> = worst.iter().collect();
    names.sort_by_key(|(n, _)| **n);
    let detail = names.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    ensure(worst.values().all(|&e| e <= 1e-4), detail.clone())?;
    Ok(format!("10 seeds, max rel err: {detail}"))
}

// ---------------------------------------------------------------- 6

fn sorted_ids(query: &[f64], store: &[(usize, Vec<f64>)], k: usize, exclude: Option<usize>) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = store
        .iter()
        .filter(|(e, _)| Some(*e) != exclude)
        .map(|(e, z)| (sq_dist(query, z), *e))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, e)| e).collect()
}

fn neighbor_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let z = normal_matrix(500, 8, &mut rng) * normal_matrix(8, 8, &mut rng);
    // few codewords, so many entities share an ID and tie at equal distance
    let config = CodebookConfig {
        size: 3,
        epochs: 3,
        batch_size: 100,
        lr: 1e-2,
        ..CodebookConfig::default()
    };
    let (model, _) = fit_quantizer(&z, 4, EntityKind::User, &config, &mut rng).map_err(|e| e.to_string())?;
    let mut ids: Vec<usize> = (0..500).map(|e| e * 3 + 1).collect();
    ids.shuffle(&mut rng);
    let mut entries: Vec<StoreEntry> = ids
        .iter()
        .enumerate()
        .map(|(r, &e)| {
            let row: Vec<f64> = z.row(r).iter().copied().collect();
            QuantizedRep::new(e, &row, &model).map(|rep| StoreEntry { rep, timestamp: r as u64 })
        })
        .collect::<dqrec::Result<_>>()
        .map_err(|e| e.to_string())?;
    entries.sort_by_key(|e| e.rep.entity);
    let store = RepStore {
        kind: EntityKind::User,
        entries,
    };
    let flat: Vec<(usize, Vec<f64>)> = store.entries.iter().map(|e| (e.rep.entity, e.rep.z_hat.as_slice().to_vec())).collect();

    let mut tied = 0;
    for q in 0..100 {
        // half the queries are stored entities (self excluded), half fresh vectors
        let (rep, exclude) = if q % 2 == 0 {
            let e = &store.entries[rng.random_range(0..store.len())];
            (e.rep.clone(), Some(e.rep.entity))
        } else {
            let v: Vec<f64> = (normal_matrix(1, 8, &mut rng) * normal_matrix(8, 8, &mut rng)).iter().copied().collect();
            (QuantizedRep::new(10_000 + q, &v, &model).map_err(|e| e.to_string())?, None)
        };
        let got = explicit_neighbors(rep.z_hat.as_slice(), &store, 30, exclude);
        let want = sorted_ids(rep.z_hat.as_slice(), &flat, 30, exclude);
        ensure(got == want, format!("explicit mismatch on query {q}: {got:?} vs {want:?}"))?;
        let d_last = sq_dist(rep.z_hat.as_slice(), &flat.iter().find(|(e, _)| *e == want[29]).unwrap().1);
        if flat.iter().filter(|(e, z)| Some(*e) != exclude && sq_dist(rep.z_hat.as_slice(), z) == d_last).count() > 1 {
            tied += 1;
        }

        let got = latent_neighbors(&rep, &store, &model, 2).map_err(|e| e.to_string())?;
        for l in 0..4 {
            let current = rep.semantic_id.0[l];
            let x = rep.latents[l].as_slice();
            let cb = &model.codebooks[l];
            let mut best = (f64::INFINITY, usize::MAX);
            for j in (0..cb.size()).filter(|&j| j != current) {
                let d = sq_dist(x, cb.codeword(j));
                if d < best.0 {
                    best = (d, j);
                }
            }
            let mut id = rep.semantic_id.clone();
            id.0[l] = best.1;
            let mut z_lat = model.basis.mean.clone();
            for (m, &c) in id.0.iter().enumerate() {
                z_lat += &model.basis.blocks[m] * DVector::from_column_slice(model.codebooks[m].codeword(c));
            }
            let want = sorted_ids(z_lat.as_slice(), &flat, 2, Some(rep.entity));
            ensure(got[l] == want, format!("latent mismatch on query {q} layer {l}: {:?} vs {want:?}", got[l]))?;
        }
    }
    Ok(format!("500-entity store, 100 queries: explicit top-30 and latent top-2 x 4 layers match; {tied} queries had ties at the cutoff"))
}

// ---------------------------------------------------------------- 7

fn metric_units() -> Outcome {
    let values = [ndcg_at_k(1, 5), ndcg_at_k(3, 5), ndcg_at_k(7, 5)];
    ensure(values == [1.0, 0.5, 0.0], format!("NDCG@5 at ranks 1,3,7 = {values:?}"))?;
    let records: Vec<InteractionRecord> = (0..10_100)
        .map(|n| InteractionRecord {
            user: n,
            item: n % 101,
            rating: 5,
            timestamp: n as u64,
        })
        .collect();
    let known = NegativeSampler::new(&records, 10_100, 101);
    let mut scorer = RandomScorer::new(77);
    let report = evaluate(&mut scorer, &records, &known, 101, &[5]).map_err(|e| e.to_string())?;
    let recall = report.recall[0];
    let detail = format!("NDCG@5 at ranks 1,3,7 = {values:?}; random Recall@5 {recall:.4} over {} samples", report.samples);
    ensure(report.samples == 10_100 && (recall - 0.05).abs() <= 0.02, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 8, 9, 10

const VARIANTS: [&str; 4] = ["full", "off", "no-semantic", "no-linkage"];

fn variant_config(seed: u64, variant: &str) -> RunConfig {
    let mut config = RunConfig::synthetic();
    config.seed = seed;
    let a = match variant {
        "full" => Augmentation::full(),
        "off" => Augmentation::off(),
        "no-semantic" => Augmentation {
            user_semantic: false,
            item_semantic: false,
            ..Augmentation::full()
        },
        _ => Augmentation {
            user_linkage: false,
            item_linkage: false,
            ..Augmentation::full()
        },
    };
    config.set_augmentation(a);
    config
}

struct SeedRuns {
    seed: u64,
    outcomes: HashMap<&'static str, EvalOutcome>,
    /// (kind, intra overlap, inter overlap)
    overlap: Vec<(EntityKind, f64, f64)>,
}

fn cluster_overlap(pipeline: &Pipeline) -> dqrec::Result<Vec<(EntityKind, f64, f64)>> {
    let prepared = pipeline.load_prepared()?;
    let pre = pipeline.load_pretrained()?;
    let mut out = Vec::new();
    for kind in [EntityKind::User, EntityKind::Item] {
        let quantizer: QuantizerModel = pipeline.load_quantizer(kind)?;
        let store = pipeline.rep_store(kind, &pre, &quantizer)?;
        let ids = prepared.ids(kind);
        let entries: Vec<(usize, &SemanticId)> = store
            .entries
            .iter()
            .map(|e| {
                let external = ids.external(e.rep.entity).unwrap_or("x0");
                (external[1..].parse::<usize>().unwrap_or(0) % 4, &e.rep.semantic_id)
            })
            .collect();
        let (mut intra, mut inter) = ((0.0, 0usize), (0.0, 0usize));
        for (a, (ga, sa)) in entries.iter().enumerate() {
            for (gb, sb) in &entries[a + 1..] {
                let o = sa.overlap(sb) as f64;
                let slot = if ga == gb { &mut intra } else { &mut inter };
                slot.0 += o;
                slot.1 += 1;
            }
        }
        out.push((kind, intra.0 / intra.1 as f64, inter.0 / inter.1 as f64));
    }
    Ok(out)
}

fn run_all(root: &Path) -> dqrec::Result<(Vec<SeedRuns>, f64, f64)> {
    let start = Instant::now();
    let mut efficacy_secs = 0.0;
    let mut runs = Vec::new();
    for seed in 0..3 {
        let mut outcomes = HashMap::new();
        let mut overlap = Vec::new();
        for variant in VARIANTS {
            let t = Instant::now();
            let pipeline = Pipeline::new(variant_config(seed, variant), root)?;
            outcomes.insert(variant, pipeline.run()?);
            if variant == "full" {
                overlap = cluster_overlap(&pipeline)?;
            }
            if variant == "full" || variant == "off" {
                efficacy_secs += t.elapsed().as_secs_f64();
            }
        }
        runs.push(SeedRuns { seed, outcomes, overlap });
    }
    Ok((runs, efficacy_secs, start.elapsed().as_secs_f64()))
}

fn recall5(o: &EvalOutcome) -> f64 {
    o.model.recall_at(5).unwrap_or(f64::NAN)
}

fn efficacy(runs: &[SeedRuns], secs: f64) -> Outcome {
    let mut ok = secs < 300.0;
    let mut parts = Vec::new();
    for r in runs {
        let full = &r.outcomes["full"];
        let (m, pop, off) = (recall5(full), full.popularity.recall_at(5).unwrap_or(f64::NAN), recall5(&r.outcomes["off"]));
        ok &= m > pop && m > off;
        let overlap: Vec<String> = r
            .overlap
            .iter()
            .map(|(k, intra, inter)| {
                ok &= intra > inter;
                format!("{k} {intra:.2}/{inter:.2}")
            })
            .collect();
        parts.push(format!(
            "seed {}: full {m:.3} popularity {pop:.3} off {off:.3}, overlap intra/inter {}",
            r.seed,
            overlap.join(" ")
        ));
    }
    let detail = format!("{}; {secs:.1}s", parts.join("; "));
    ensure(ok, detail.clone())?;
    Ok(detail)
}

fn ablation_direction(runs: &[SeedRuns]) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for ablation in ["no-semantic", "no-linkage"] {
        let wins = runs.iter().filter(|r| recall5(&r.outcomes[ablation]) < recall5(&r.outcomes["full"])).count();
        ok &= wins >= 2;
        let values: Vec<String> = runs
            .iter()
            .map(|r| format!("{:.3} vs {:.3}", recall5(&r.outcomes[ablation]), recall5(&r.outcomes["full"])))
            .collect();
        parts.push(format!("{ablation} lower on {wins}/3 seeds (ablated vs full: {})", values.join(", ")));
    }
    let detail = parts.join("; ");
    ensure(ok, detail.clone())?;
    Ok(detail)
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map(|rd| rd.filter_map(|e| e.ok().map(|e| e.path())).collect())
        .unwrap_or_default();
    out.sort();
    out
}

fn determinism(first_root: &Path, second_root: &Path) -> Outcome {
    let config = variant_config(0, "full");
    let a = Pipeline::new(config.clone(), first_root).map_err(|e| e.to_string())?;
    let b = Pipeline::new(config, second_root).map_err(|e| e.to_string())?;
    b.run().map_err(|e| e.to_string())?;
    let mut compared = 0;
    for stage in Stage::ALL {
        let (da, db) = (a.stage_dir(stage), b.stage_dir(stage));
        let (fa, fb) = (files_under(&da), files_under(&db));
        let names = |v: &[PathBuf]| v.iter().map(|p| p.file_name().unwrap().to_owned()).collect::<Vec<_>>();
        ensure(names(&fa) == names(&fb), format!("{stage} artifacts differ in file set"))?;
        for (pa, pb) in fa.iter().zip(&fb) {
            if pa.file_name().is_some_and(|n| n == "metrics.csv") {
                continue;
            }
            let (ba, bb) = (std::fs::read(pa).map_err(|e| e.to_string())?, std::fs::read(pb).map_err(|e| e.to_string())?);
            ensure(ba == bb, format!("{} differs between runs", pa.display()))?;
            compared += 1;
        }
    }
    let (ma, mb) = (a.load_metrics().map_err(|e| e.to_string())?, b.load_metrics().map_err(|e| e.to_string())?);
    for (x, y) in [(&ma.model, &mb.model), (&ma.popularity, &mb.popularity), (&ma.random, &mb.random)] {
        let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        ensure(
            bits(&x.recall) == bits(&y.recall) && bits(&x.ndcg) == bits(&y.ndcg) && x.samples == y.samples,
            "metrics differ between runs".into(),
        )?;
    }
    Ok(format!("{compared} artifact files bitwise identical; metric values bitwise identical (wall-clock column excluded)"))
}

// ----------------------------------------------------------------

fn report(n: usize, name: &str, outcome: &Outcome) -> bool {
    match outcome {
        Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
        Err(detail) => println!("criterion {n:>2} FAIL  {name}: {detail}"),
    }
    outcome.is_ok()
}

fn main() -> ExitCode {
    let mut passed = 0;
    let unit: [(&str, fn() -> Outcome); 7] = [
        ("basis correctness", basis_correctness),
        ("partition optimality", partition_optimality),
        ("quantizer identities", quantizer_identities),
        ("codebook training quality", codebook_quality),
        ("gradient suite", gradient_suite),
        ("neighbor oracles", neighbor_oracles),
        ("metric unit values", metric_units),
    ];
    for (n, (name, check)) in unit.iter().enumerate() {
        passed += usize::from(report(n + 1, name, &check()));
    }

    let first = tempfile::tempdir().expect("temp dir");
    let second = tempfile::tempdir().expect("temp dir");
    match run_all(first.path()) {
        Ok((runs, efficacy_secs, total)) => {
            passed += usize::from(report(8, "end-to-end efficacy", &efficacy(&runs, efficacy_secs)));
            passed += usize::from(report(9, "ablation direction", &ablation_direction(&runs)));
            println!("             (12 pipeline runs in {total:.1}s)");
        }
        Err(e) => {
            report(8, "end-to-end efficacy", &Err(e.to_string()));
            report(9, "ablation direction", &Err(e.to_string()));
        }
    }
    passed += usize::from(report(10, "determinism", &determinism(first.path(), second.path())));

    println!("acceptance: {passed}/10 criteria passed");
    if passed == 10 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
