//! Brute-force reference for the HBA block: explicit sums over heads, tokens
//! and channels in f64, with the relative encodings recomputed from their
//! closed form. Shared by the attention tests and the acceptance suite.

#![allow(dead_code)]

use hba_core::attention::{HbaConfig, HbaParams};
use hba_core::params::ParamStore;

pub struct NaiveHba {
    pub c: usize,
    pub heads: usize,
    pub dk: usize,
    pub dv: usize,
    pub hidden: usize,
    pub grid: usize,
    pub relative: bool,
    pub channel: bool,
    pub scaling: bool,
    pub heads_softmax: bool,
    /// [c][heads·dk]
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    /// [c][heads·dv]
    pub wv: Vec<f64>,
    /// [c][hidden], [hidden], [hidden][c], [c]
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

fn sinusoid(offset: f64, j: usize, dims: usize) -> f64 {
    let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / dims as f64);
    if j % 2 == 0 {
        (offset * freq).sin()
    } else {
        (offset * freq).cos()
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl NaiveHba {
    /// Copies the weights of a block registered in `store`.
    pub fn from_store(cfg: &HbaConfig, params: &HbaParams<f64>, store: &ParamStore<f64>) -> Self {
        let take = |id| store.tensor(id).data().to_vec();
        let (w1, b1, w2, b2) = match &params.mlp {
            Some(m) => (take(m.w1), take(m.b1), take(m.w2), take(m.b2)),
            None => (vec![], vec![], vec![], vec![]),
        };
        NaiveHba {
            c: cfg.channels,
            heads: cfg.heads,
            dk: cfg.key_dim,
            dv: cfg.value_dim,
            hidden: cfg.hidden(),
            grid: cfg.grid,
            relative: cfg.use_relative,
            channel: cfg.use_channel,
            scaling: cfg.use_qk_scaling,
            heads_softmax: cfg.softmax_axis == hba_core::attention::SoftmaxAxis::Heads,
            wq: take(params.wq),
            wk: take(params.wk),
            wv: take(params.wv),
            w1,
            b1,
            w2,
            b2,
        }
    }

    /// Encoding of a (row, column) offset: first ⌈dk/2⌉ dims encode the row
    /// offset, the rest the column offset.
    pub fn relative_encoding(&self, dy: f64, dx: f64, d: usize) -> f64 {
        let rows = self.dk.div_ceil(2);
        let cols = self.dk - rows;
        if d < rows {
            sinusoid(dy, d, rows)
        } else {
            sinusoid(dx, d - rows, cols)
        }
    }

    /// Attention logits [heads][i][j] of one batch element.
    pub fn logits(&self, x: &[f64]) -> Vec<Vec<Vec<f64>>> {
        let t = self.grid * self.grid;
        let q = self.project(x, &self.wq, self.dk);
        let k = self.project(x, &self.wk, self.dk);
        let mut out = vec![vec![vec![0.0; t]; t]; self.heads];
        for h in 0..self.heads {
            for i in 0..t {
                for j in 0..t {
                    let mut s = 0.0;
                    for d in 0..self.dk {
                        s += q[h][i][d] * k[h][j][d];
                    }
                    if self.scaling {
                        s /= (self.dk as f64).sqrt();
                    }
                    if self.relative {
                        let dy = (j / self.grid) as f64 - (i / self.grid) as f64;
                        let dx = (j % self.grid) as f64 - (i % self.grid) as f64;
                        for d in 0..self.dk {
                            s += q[h][i][d] * self.relative_encoding(dy, dx, d);
                        }
                    }
                    out[h][i][j] = s;
                }
            }
        }
        out
    }

    /// [heads][token][dim] projection of one batch element (x is C×S×S).
    fn project(&self, x: &[f64], w: &[f64], dim: usize) -> Vec<Vec<Vec<f64>>> {
        let t = self.grid * self.grid;
        let width = self.heads * dim;
        let mut out = vec![vec![vec![0.0; dim]; t]; self.heads];
        for h in 0..self.heads {
            for tok in 0..t {
                for d in 0..dim {
                    let mut s = 0.0;
                    for c in 0..self.c {
                        s += x[c * t + tok] * w[c * width + h * dim + d];
                    }
                    out[h][tok][d] = s;
                }
            }
        }
        out
    }

    fn mlp(&self, z: &[f64]) -> Vec<f64> {
        let hidden: Vec<f64> = (0..self.hidden)
            .map(|m| {
                let s: f64 = (0..self.c).map(|c| z[c] * self.w1[c * self.hidden + m]).sum::<f64>() + self.b1[m];
                s.max(0.0)
            })
            .collect();
        (0..self.c)
            .map(|c| (0..self.hidden).map(|m| hidden[m] * self.w2[m * self.c + c]).sum::<f64>() + self.b2[c])
            .collect()
    }

    /// Channel gate σ(F_C) for one batch element.
    pub fn gate(&self, x: &[f64]) -> Vec<f64> {
        let t = self.grid * self.grid;
        let avg: Vec<f64> = (0..self.c).map(|c| x[c * t..(c + 1) * t].iter().sum::<f64>() / t as f64).collect();
        let max: Vec<f64> =
            (0..self.c).map(|c| x[c * t..(c + 1) * t].iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
        let (a, m) = (self.mlp(&avg), self.mlp(&max));
        (0..self.c).map(|c| sigmoid(a[c] + m[c])).collect()
    }

    /// Full block on an N×C×S×S input.
    pub fn forward(&self, x: &[f64], n: usize) -> Vec<f64> {
        let t = self.grid * self.grid;
        let per = self.c * t;
        let mut out = vec![0.0; n * per];
        for b in 0..n {
            let xb = &x[b * per..(b + 1) * per];
            let logits = self.logits(xb);
            let v = self.project(xb, &self.wv, self.dv);
            let mut att = logits.clone();
            if self.heads_softmax {
                for i in 0..t {
                    for j in 0..t {
                        let z: f64 = (0..self.heads).map(|h| logits[h][i][j].exp()).sum();
                        for h in 0..self.heads {
                            att[h][i][j] = logits[h][i][j].exp() / z;
                        }
                    }
                }
            } else {
                for h in 0..self.heads {
                    for i in 0..t {
                        let z: f64 = (0..t).map(|j| logits[h][i][j].exp()).sum();
                        for j in 0..t {
                            att[h][i][j] = logits[h][i][j].exp() / z;
                        }
                    }
                }
            }
            let gate = if self.channel { self.gate(xb) } else { vec![1.0; self.c] };
            for h in 0..self.heads {
                for i in 0..t {
                    for e in 0..self.dv {
                        let mut s = 0.0;
                        for j in 0..t {
                            s += att[h][i][j] * v[h][j][e];
                        }
                        let c = h * self.dv + e;
                        out[b * per + c * t + i] = s * gate[c];
                    }
                }
            }
        }
        out
    }
}
