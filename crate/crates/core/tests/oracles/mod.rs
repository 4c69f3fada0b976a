//! Scalar-loop reference implementations. Deliberately naive: nested loops
//! over explicit indices, f64 throughout, no shared code with the library.

#![allow(dead_code, clippy::needless_range_loop)]

/// Mean over the hardest `ceil(keep · N)` per-pixel cross-entropies.
/// `logits` is `[N, C]` row-major, one row per pixel.
pub fn ohem(logits: &[f32], targets: &[u8], c: usize, keep: f64) -> f64 {
    let n = targets.len();
    let mut ce = Vec::with_capacity(n);
    for p in 0..n {
        let row = &logits[p * c..(p + 1) * c];
        let mut m = f64::NEG_INFINITY;
        for &v in row {
            m = m.max(v as f64);
        }
        let mut s = 0.0;
        for &v in row {
            s += (v as f64 - m).exp();
        }
        ce.push(-(row[targets[p] as usize] as f64 - m - s.ln()));
    }
    ce.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let k = ((keep * n as f64).ceil() as usize).clamp(1, n);
    let mut total = 0.0;
    for v in &ce[..k] {
        total += v;
    }
    total / k as f64
}

/// `mean_b Σ_d (z_bd − z̄_d)²`.
pub fn latent_reg(z: &[f32], mean: &[f32]) -> f64 {
    let d = mean.len();
    let b = z.len() / d;
    let mut total = 0.0;
    for i in 0..b {
        for j in 0..d {
            let e = z[i * d + j] as f64 - mean[j] as f64;
            total += e * e;
        }
    }
    total / b as f64
}

pub fn hinge_d(real: &[Vec<f32>], fake: &[Vec<f32>]) -> f64 {
    let mut total = 0.0;
    for (r, f) in real.iter().zip(fake) {
        let mut lr = 0.0;
        for &v in r {
            lr += (1.0 - v as f64).max(0.0);
        }
        let mut lf = 0.0;
        for &v in f {
            lf += (1.0 + v as f64).max(0.0);
        }
        total += lr / r.len() as f64 + lf / f.len() as f64;
    }
    total
}

pub fn hinge_g(fake: &[Vec<f32>]) -> f64 {
    let mut total = 0.0;
    for f in fake {
        let mut s = 0.0;
        for &v in f {
            s += v as f64;
        }
        total -= s / f.len() as f64;
    }
    total
}

/// `mean_b (1 − cos(e1_b, e2_b))`.
pub fn identity(e1: &[f32], e2: &[f32], d: usize) -> f64 {
    let b = e1.len() / d;
    let mut total = 0.0;
    for i in 0..b {
        let (mut dot, mut n1, mut n2) = (0.0, 0.0, 0.0);
        for j in 0..d {
            let (x, y) = (e1[i * d + j] as f64, e2[i * d + j] as f64);
            dot += x * y;
            n1 += x * x;
            n2 += y * y;
        }
        total += 1.0 - dot / (n1.sqrt() * n2.sqrt());
    }
    total / b as f64
}

/// `(1/B) · ½ Σ (a − b)²`.
pub fn half_sq(a: &[f32], b: &[f32], batch: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..a.len() {
        let e = a[i] as f64 - b[i] as f64;
        total += e * e;
    }
    0.5 * total / batch as f64
}

pub fn attribute(pa: &[Vec<f32>], pb: &[Vec<f32>], batch: usize) -> f64 {
    let mut total = 0.0;
    for k in 0..pa.len() {
        total += half_sq(&pa[k], &pb[k], batch);
    }
    total
}

pub fn mae(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] as f64 - b[i] as f64).abs();
    }
    s / a.len() as f64
}

pub fn rmse(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let e = a[i] as f64 - b[i] as f64;
        s += e * e;
    }
    (s / a.len() as f64).sqrt()
}

/// SSIM by direct evaluation of every 11×11 window (valid positions only).
/// Images are HWC, `h, w ≥ 11`.
pub fn ssim(a: &[f32], b: &[f32], h: usize, w: usize, c: usize) -> f64 {
    let n = 11;
    let sigma: f64 = 1.5;
    let mut g = [[0.0f64; 11]; 11];
    let mut gs = 0.0;
    for i in 0..n {
        for j in 0..n {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            g[i][j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            gs += g[i][j];
        }
    }
    let (c1, c2) = (0.01f64 * 0.01, 0.03f64 * 0.03);
    let mut total = 0.0;
    for ch in 0..c {
        let mut acc = 0.0;
        let mut count = 0usize;
        for y in 0..=h - n {
            for x in 0..=w - n {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let wt = g[i][j] / gs;
                        let idx = ((y + i) * w + x + j) * c + ch;
                        let (p, q) = (a[idx] as f64, b[idx] as f64);
                        ma += wt * p;
                        mb += wt * q;
                        saa += wt * p * p;
                        sbb += wt * q * q;
                        sab += wt * p * q;
                    }
                }
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cov = sab - ma * mb;
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    total / c as f64
}

/// AUC as the probability that a random positive outscores a random
/// negative, ties counting one half.
pub fn auc(scores: &[f64], same: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        if !same[i] {
            continue;
        }
        for j in 0..scores.len() {
            if same[j] {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Pixel accuracy and mean IoU by counting, classes taken from either map.
pub fn pa_miou(a: &[u8], b: &[u8], n_cls: usize) -> (f64, f64) {
    let mut hit = 0usize;
    for i in 0..a.len() {
        if a[i] == b[i] {
            hit += 1;
        }
    }
    let (mut iou_sum, mut present) = (0.0, 0usize);
    for c in 0..n_cls as u8 {
        let (mut inter, mut uni) = (0usize, 0usize);
        for i in 0..a.len() {
            let (x, y) = (a[i] == c, b[i] == c);
            if x && y {
                inter += 1;
            }
            if x || y {
                uni += 1;
            }
        }
        if uni > 0 {
            iou_sum += inter as f64 / uni as f64;
            present += 1;
        }
    }
    (hit as f64 / a.len() as f64, iou_sum / present as f64)
}
