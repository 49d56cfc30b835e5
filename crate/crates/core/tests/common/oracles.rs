//! Brute-force reference implementations written with plain loops over
//! nested vectors. They share no code with the library.
#![allow(dead_code)]

pub type Mat = Vec<Vec<f64>>;

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    super::naive_matmul(a, b)
}

fn softmax(row: &[f64]) -> Vec<f64> {
    super::naive_softmax(row)
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Multi-head attention of `queries` (optionally projected by `w_q`) over
/// `tokens`, heads concatenated then optionally projected by `w_o`.
pub fn query_attention(
    tokens: &Mat,
    queries: &Mat,
    w_q: Option<&Mat>,
    w_k: &Mat,
    w_v: &Mat,
    w_o: Option<&Mat>,
    heads: usize,
) -> Mat {
    let q = w_q.map_or_else(|| queries.clone(), |w| matmul(queries, w));
    let k = matmul(tokens, w_k);
    let v = matmul(tokens, w_v);
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..q.len() {
            let scores: Vec<f64> = (0..k.len())
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let p = softmax(&scores);
            for c in cols.clone() {
                out[i][c] = (0..k.len()).map(|j| p[j] * v[j][c]).sum();
            }
        }
    }
    match w_o {
        Some(w) => matmul(&out, w),
        None => out,
    }
}

/// `sigmoid(relu([I|T]·w1 + b1)·w2 + b2)` per row; returns one gate per row.
pub fn gate(i_n: &Mat, t_n: &Mat, w1: &Mat, b1: &[f64], w2: &Mat, b2: &[f64]) -> Vec<f64> {
    (0..i_n.len())
        .map(|r| {
            let x: Vec<f64> = i_n[r].iter().chain(&t_n[r]).copied().collect();
            let hidden: Vec<f64> = (0..b1.len())
                .map(|j| relu((0..x.len()).map(|p| x[p] * w1[p][j]).sum::<f64>() + b1[j]))
                .collect();
            let z: f64 = (0..hidden.len()).map(|j| hidden[j] * w2[j][0]).sum::<f64>() + b2[0];
            1.0 / (1.0 + (-z).exp())
        })
        .collect()
}

pub fn fuse(i_n: &Mat, t_n: &Mat, a: &[f64]) -> Mat {
    (0..i_n.len())
        .map(|r| (0..i_n[r].len()).map(|c| a[r] * i_n[r][c] + (1.0 - a[r]) * t_n[r][c]).collect())
        .collect()
}

/// Router logits, the top-k experts (ties to the lower index) and their
/// softmax weights renormalized over the selection.
pub fn route(x: &[f64], w: &Mat, b: &[f64], k: usize) -> (Vec<f64>, Vec<usize>, Vec<f64>) {
    let e = b.len();
    let logits: Vec<f64> = (0..e).map(|j| (0..x.len()).map(|p| x[p] * w[p][j]).sum::<f64>() + b[j]).collect();
    let mut taken = vec![false; e];
    let mut selected = Vec::new();
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for j in 0..e {
            if !taken[j] && best.is_none_or(|bj| logits[j] > logits[bj]) {
                best = Some(j);
            }
        }
        let j = best.unwrap();
        taken[j] = true;
        selected.push(j);
    }
    let chosen: Vec<f64> = selected.iter().map(|&j| logits[j]).collect();
    (logits, selected, softmax(&chosen))
}

pub fn mlp(x: &[f64], w1: &Mat, b1: &[f64], w2: &Mat, b2: &[f64]) -> Vec<f64> {
    let hidden: Vec<f64> = (0..b1.len())
        .map(|j| relu((0..x.len()).map(|p| x[p] * w1[p][j]).sum::<f64>() + b1[j]))
        .collect();
    (0..b2.len())
        .map(|c| (0..hidden.len()).map(|j| hidden[j] * w2[j][c]).sum::<f64>() + b2[c])
        .collect()
}

pub fn cross_entropy(logits: &Mat, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

pub fn info_nce(img: &Mat, txt: &Mat, tau: f64) -> f64 {
    let norm = |m: &Mat| -> Mat {
        m.iter()
            .map(|r| {
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter().map(|v| v / n).collect()
            })
            .collect()
    };
    let (a, b) = (norm(img), norm(txt));
    let n = a.len();
    let s: Mat = (0..n)
        .map(|i| (0..n).map(|j| (0..a[i].len()).map(|c| a[i][c] * b[j][c]).sum::<f64>() / tau).collect())
        .collect();
    let st: Mat = (0..n).map(|i| (0..n).map(|j| s[j][i]).collect()).collect();
    let diag: Vec<usize> = (0..n).collect();
    0.5 * (cross_entropy(&s, &diag) + cross_entropy(&st, &diag))
}

/// `E · Σ f_i p_i` with `f` the top-1 share and `p` the mean router softmax.
pub fn load_balance(router_logits: &Mat) -> f64 {
    let e = router_logits[0].len();
    let n = router_logits.len() as f64;
    let mut f = vec![0.0; e];
    let mut p = vec![0.0; e];
    for row in router_logits {
        let mut best = 0;
        for j in 1..e {
            if row[j] > row[best] {
                best = j;
            }
        }
        f[best] += 1.0 / n;
        for (pj, s) in p.iter_mut().zip(softmax(row)) {
            *pj += s / n;
        }
    }
    e as f64 * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>()
}
