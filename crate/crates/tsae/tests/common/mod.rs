//! Shared oracles for the integration suites. Everything here is written
//! against the public API and stays independent of the library's own
//! solver/gradient paths.

#![allow(dead_code)]

use ndarray::{Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tsae::sae::{LossBatch, SaeGradients, SaeModel, SelectionMasks};

/// Iterative least-squares oracle for one ridge transition: conjugate
/// gradient on the centered normal equations, with the sufficient statistics
/// assembled by explicit loops.
pub fn cg_ridge_transition(
    x: &Array2<f64>,
    y: &Array2<f64>,
    lambda: f64,
) -> (Array2<f64>, Array1<f64>) {
    let (n, d) = x.dim();
    let mut x_mean = vec![0.0f64; d];
    let mut y_mean = vec![0.0f64; d];
    for q in 0..n {
        for c in 0..d {
            x_mean[c] += x[(q, c)];
            y_mean[c] += y[(q, c)];
        }
    }
    for (xm, ym) in x_mean.iter_mut().zip(y_mean.iter_mut()) {
        *xm /= n as f64;
        *ym /= n as f64;
    }
    // s_xx = sum xc xc^T + lambda I, s_xy[:, j] = sum xc * yc_j
    let mut s_xx = vec![vec![0.0f64; d]; d];
    let mut s_xy = vec![vec![0.0f64; d]; d]; // indexed [output j][input c]
    for q in 0..n {
        let xc: Vec<f64> = (0..d).map(|c| x[(q, c)] - x_mean[c]).collect();
        let yc: Vec<f64> = (0..d).map(|c| y[(q, c)] - y_mean[c]).collect();
        for a in 0..d {
            for b in 0..d {
                s_xx[a][b] += xc[a] * xc[b];
            }
            for j in 0..d {
                s_xy[j][a] += xc[a] * yc[j];
            }
        }
    }
    for (c, row) in s_xx.iter_mut().enumerate() {
        row[c] += lambda;
    }

    let matvec = |v: &[f64]| -> Vec<f64> {
        (0..d)
            .map(|r| (0..d).map(|c| s_xx[r][c] * v[c]).sum())
            .collect()
    };

    // CG per output row of W
    let mut w = Array2::<f64>::zeros((d, d));
    for j in 0..d {
        let b_vec = &s_xy[j];
        let mut sol = vec![0.0f64; d];
        let mut r: Vec<f64> = b_vec.clone();
        let mut p = r.clone();
        let mut rs: f64 = r.iter().map(|v| v * v).sum();
        let b_norm = rs.sqrt().max(1e-300);
        for _ in 0..(8 * d) {
            if rs.sqrt() <= 1e-13 * b_norm {
                break;
            }
            let ap = matvec(&p);
            let denom: f64 = p.iter().zip(ap.iter()).map(|(a, b)| a * b).sum();
            let alpha = rs / denom;
            for c in 0..d {
                sol[c] += alpha * p[c];
                r[c] -= alpha * ap[c];
            }
            let rs_new: f64 = r.iter().map(|v| v * v).sum();
            let beta = rs_new / rs;
            rs = rs_new;
            for c in 0..d {
                p[c] = r[c] + beta * p[c];
            }
        }
        for c in 0..d {
            w[(j, c)] = sol[c];
        }
    }
    let b = Array1::from_iter(
        (0..d).map(|j| y_mean[j] - (0..d).map(|c| w[(j, c)] * x_mean[c]).sum::<f64>()),
    );
    (w, b)
}

/// CG oracle over every transition of `[n, t, d]` data.
pub fn cg_ridge_chain(data: &Array3<f64>, lambda: f64) -> Vec<(Array2<f64>, Array1<f64>)> {
    let t = data.dim().1;
    (1..t)
        .map(|i| {
            cg_ridge_transition(
                &data.index_axis(Axis(1), i - 1).to_owned(),
                &data.index_axis(Axis(1), i).to_owned(),
                lambda,
            )
        })
        .collect()
}

pub fn rel_frobenius(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let den: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    num / den
}

/// Rebuilds a model with one parameter entry replaced; finite differences
/// work through the public constructor so the library's gradient path is
/// never involved.
pub fn perturbed_model(model: &SaeModel, tensor: usize, index: usize, delta: f64) -> SaeModel {
    let mut w_enc = model.w_enc().clone();
    let mut b_enc = model.b_enc().clone();
    let mut w_dec = model.w_dec().clone();
    let mut b_dec = model.b_dec().clone();
    match tensor {
        0 => w_enc.as_slice_mut().unwrap()[index] += delta,
        1 => b_enc.as_slice_mut().unwrap()[index] += delta,
        2 => w_dec.as_slice_mut().unwrap()[index] += delta,
        _ => b_dec.as_slice_mut().unwrap()[index] += delta,
    }
    let mut out = SaeModel::from_parts(w_enc, b_enc, w_dec, b_dec, model.k_avg()).unwrap();
    if let Some(sizes) = model.group_sizes() {
        let n_groups = sizes.len();
        out.set_groups(n_groups).unwrap();
    }
    out
}

/// Central finite differences of `f` over all four parameter tensors.
pub fn fd_grads<F: Fn(&SaeModel) -> f64>(model: &SaeModel, f: F, step: f64) -> SaeGradients {
    let mut grads = SaeGradients::zeros_like(model);
    let sizes = [
        model.w_enc().len(),
        model.b_enc().len(),
        model.w_dec().len(),
        model.b_dec().len(),
    ];
    for (tensor, len) in sizes.iter().enumerate() {
        for index in 0..*len {
            let up = f(&perturbed_model(model, tensor, index, step));
            let down = f(&perturbed_model(model, tensor, index, -step));
            let g = (up - down) / (2.0 * step);
            match tensor {
                0 => grads.w_enc.as_slice_mut().unwrap()[index] = g,
                1 => grads.b_enc.as_slice_mut().unwrap()[index] = g,
                2 => grads.w_dec.as_slice_mut().unwrap()[index] = g,
                _ => grads.b_dec.as_slice_mut().unwrap()[index] = g,
            }
        }
    }
    grads
}

pub fn max_rel_grad_err(manual: &SaeGradients, fd: &SaeGradients, floor: f64) -> f64 {
    manual
        .w_enc
        .iter()
        .zip(fd.w_enc.iter())
        .chain(manual.b_enc.iter().zip(fd.b_enc.iter()))
        .chain(manual.w_dec.iter().zip(fd.w_dec.iter()))
        .chain(manual.b_dec.iter().zip(fd.b_dec.iter()))
        .fold(0.0f64, |worst, (m, f)| {
            worst.max((m - f).abs() / f.abs().max(floor))
        })
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
}

/// Data from a planted k-sparse dictionary with unit atoms: every sample is a
/// nonnegative combination of exactly `k` atoms with coefficients in
/// [0.5, 1.5].
pub struct DictionaryData {
    pub samples: Array2<f64>,
    pub atoms: Array2<f64>,
}

pub fn dictionary_data(d: usize, m: usize, k: usize, n: usize, seed: u64) -> DictionaryData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut atoms = Array2::<f64>::zeros((d, m));
    for c in 0..m {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (r, x) in v.iter_mut().enumerate() {
            *x /= norm;
            atoms[(r, c)] = *x;
        }
    }
    let mut samples = Array2::<f64>::zeros((n, d));
    for q in 0..n {
        let mut chosen = std::collections::BTreeSet::new();
        while chosen.len() < k {
            chosen.insert(rng.random_range(0..m));
        }
        for j in chosen {
            let coeff = rng.random_range(0.5..1.5);
            for r in 0..d {
                samples[(q, r)] += coeff * atoms[(r, j)];
            }
        }
    }
    DictionaryData { samples, atoms }
}

/// Greedy one-to-one matching of planted atoms to decoder columns by
/// absolute cosine; returns the matched |cos| per atom.
pub fn greedy_atom_match(atoms: &Array2<f64>, decoder: &Array2<f64>) -> Vec<f64> {
    let m_atoms = atoms.ncols();
    let m_dec = decoder.ncols();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for a in 0..m_atoms {
        let atom = atoms.column(a);
        let na = atom.dot(&atom).sqrt();
        for c in 0..m_dec {
            let col = decoder.column(c);
            let nc = col.dot(&col).sqrt();
            if na > 0.0 && nc > 0.0 {
                pairs.push(((atom.dot(&col) / (na * nc)).abs(), a, c));
            }
        }
    }
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut atom_used = vec![false; m_atoms];
    let mut dec_used = vec![false; m_dec];
    let mut scores = vec![0.0f64; m_atoms];
    for (cos, a, c) in pairs {
        if !atom_used[a] && !dec_used[c] {
            atom_used[a] = true;
            dec_used[c] = true;
            scores[a] = cos;
        }
    }
    scores
}

/// Convenience wrapper running the library loss at frozen selections.
pub fn frozen_loss(
    model: &SaeModel,
    batch: &LossBatch,
    masks: &SelectionMasks,
    matryoshka: bool,
) -> f64 {
    if matryoshka {
        tsae::sae::matryoshka_loss_given_masks(model, batch, masks).unwrap()
    } else {
        tsae::sae::loss_given_masks(model, batch, masks).unwrap()
    }
}
