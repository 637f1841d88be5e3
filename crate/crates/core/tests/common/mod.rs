//! Oracles shared by the integration tests and the acceptance target.
#![allow(dead_code)]

mod checks;
#[allow(unused_imports)]
pub use checks::*;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use vflsim::data::{
    generate, Dataset, DatasetRole, GeneratorConfig, SampleRecord, VocabSizes, N_LABEL_SLOTS,
    N_NONLABEL_SLOTS,
};
use vflsim::nn::{
    one_hot, softmax_cross_entropy, Activation, AdamConfig, BatchNormLayer, DenseLayer, EmbeddingTable,
};
use vflsim::protocol::{BranchKind, Federation, LabelParty, ModelConfig};
use vflsim::Tensor;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_tensor(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Relative error with a floor so that two near-zero values compare by absolute error.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central difference of `f` along every coordinate of `x`; returns the largest
/// relative error against `analytic`.
fn fd_max_err(x: &Tensor, analytic: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> f64 {
    assert_eq!(x.shape(), analytic.shape());
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for k in 0..x.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + FD_STEP;
        let up = f(&probe);
        probe.data_mut()[k] = orig - FD_STEP;
        let down = f(&probe);
        probe.data_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(numeric, analytic.data()[k]));
    }
    worst
}

fn weighted_sum(a: &Tensor, w: &Tensor) -> f64 {
    a.data().iter().zip(w.data()).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub kernel: &'static str,
    pub max_rel_err: f64,
}

fn dense_instance(r: &mut ChaCha8Rng) -> GradCheck {
    let n_in = r.random_range(1..=8);
    let n_out = r.random_range(1..=8);
    let b = r.random_range(1..=6);
    let act = [Activation::Identity, Activation::Relu, Activation::Sigmoid][r.random_range(0..3)];
    let w = normal_tensor(n_out, n_in, 0.7, r);
    let bias = normal_tensor(n_out, 1, 0.3, r);
    // keep ReLU pre-activations away from the kink
    let x = loop {
        let x = normal_tensor(b, n_in, 1.0, r);
        let z = DenseLayer::from_parts(w.clone(), bias.clone(), Activation::Identity)
            .unwrap()
            .forward(&x)
            .unwrap();
        if act != Activation::Relu || z.data().iter().all(|v| v.abs() > 1e-3) {
            break x;
        }
    };
    let up = normal_tensor(b, n_out, 1.0, r);
    let layer = DenseLayer::from_parts(w.clone(), bias.clone(), act).unwrap();
    let g = layer.backward(&x, &up).unwrap();
    let e_w = fd_max_err(&w, &g.weight, |p| {
        weighted_sum(&DenseLayer::from_parts(p.clone(), bias.clone(), act).unwrap().forward(&x).unwrap(), &up)
    });
    let e_b = fd_max_err(&bias, &g.bias, |p| {
        weighted_sum(&DenseLayer::from_parts(w.clone(), p.clone(), act).unwrap().forward(&x).unwrap(), &up)
    });
    let e_x = fd_max_err(&x, &g.input, |p| weighted_sum(&layer.forward(p).unwrap(), &up));
    GradCheck {
        kernel: "dense",
        max_rel_err: e_w.max(e_b).max(e_x),
    }
}

fn batchnorm_instance(r: &mut ChaCha8Rng) -> GradCheck {
    let d = r.random_range(1..=8);
    let b = r.random_range(2..=6);
    let mut bn = BatchNormLayer::new(d);
    bn.gamma = normal_tensor(d, 1, 1.0, r);
    bn.beta = normal_tensor(d, 1, 1.0, r);
    let x = normal_tensor(b, d, 1.5, r);
    let up = normal_tensor(b, d, 1.0, r);
    let (_, cache) = bn.clone().forward_train(&x).unwrap();
    let g = bn.backward(&cache, &up).unwrap();
    let eval = |layer: &BatchNormLayer, x: &Tensor| weighted_sum(&layer.clone().forward_train(x).unwrap().0, &up);
    let e_x = fd_max_err(&x, &g.input, |p| eval(&bn, p));
    let e_g = fd_max_err(&bn.gamma, &g.gamma, |p| {
        let mut l = bn.clone();
        l.gamma = p.clone();
        eval(&l, &x)
    });
    let e_b = fd_max_err(&bn.beta, &g.beta, |p| {
        let mut l = bn.clone();
        l.beta = p.clone();
        eval(&l, &x)
    });
    GradCheck {
        kernel: "batchnorm",
        max_rel_err: e_x.max(e_g).max(e_b),
    }
}

fn cross_entropy_instance(r: &mut ChaCha8Rng) -> GradCheck {
    let b = r.random_range(1..=6);
    let logits = normal_tensor(b, 2, 2.0, r);
    let labels: Vec<u8> = (0..b).map(|_| r.random_range(0..2)).collect();
    let y = one_hot(&labels);
    let ce = softmax_cross_entropy(&logits, &y).unwrap();
    GradCheck {
        kernel: "softmax_cross_entropy",
        max_rel_err: fd_max_err(&logits, &ce.grad_logits, |p| softmax_cross_entropy(p, &y).unwrap().loss),
    }
}

fn embedding_instance(r: &mut ChaCha8Rng) -> GradCheck {
    let vocab = r.random_range(1..=8);
    let dim = r.random_range(1..=8);
    let n = r.random_range(1..=8);
    let mut table = EmbeddingTable::new(vocab, dim, r);
    table.rows = normal_tensor(vocab, dim, 1.0, r);
    let idx: Vec<usize> = (0..n).map(|_| r.random_range(0..vocab)).collect();
    let up = normal_tensor(n, dim, 1.0, r);
    let g = table.backward(&idx, &up).unwrap();
    let rows = table.rows.clone();
    let err = fd_max_err(&rows, &g, |p| {
        let mut t = table.clone();
        t.rows = p.clone();
        weighted_sum(&t.forward(&idx).unwrap(), &up)
    });
    GradCheck {
        kernel: "embedding",
        max_rel_err: err,
    }
}

/// A tiny model used wherever the full-size network is not needed.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        embedding_dim: 2,
        nonlabel_hidden: vec![6, 3],
        label_hidden: vec![5, 4],
    }
}

/// Records with uniformly random features and labels.
pub fn random_records(n: usize, vocab: usize, r: &mut impl Rng) -> Dataset {
    let records = (0..n)
        .map(|i| {
            let mut nl = [0u32; N_NONLABEL_SLOTS];
            nl.iter_mut().for_each(|v| *v = r.random_range(0..vocab as u32));
            let mut lf = [0u32; N_LABEL_SLOTS];
            lf.iter_mut().for_each(|v| *v = r.random_range(0..vocab as u32));
            let label = if i < 2 { i as u8 } else { r.random_range(0..2) };
            SampleRecord {
                sample_id: format!("r{i:05}"),
                user_id: r.random_range(0..50),
                nonlabel_features: Some(nl),
                label_features: lf,
                label,
                click_ts: i as i64,
                conv_ts: if label == 1 { i as i64 + 10 } else { -1 },
            }
        })
        .collect();
    Dataset::new(
        records,
        VocabSizes {
            nonlabel: vec![vocab; N_NONLABEL_SLOTS],
            label: vec![vocab; N_LABEL_SLOTS],
        },
        DatasetRole::Aligned,
    )
    .unwrap()
}

/// `∂L/∂h_N` from the label party against central differences of its loss.
/// The cut gradient is sent per sample, i.e. scaled by the batch size.
fn cut_gradient_instance(r: &mut ChaCha8Rng) -> GradCheck {
    let b = r.random_range(2..=6);
    let ds = random_records(b, 4, r);
    let model = tiny_model();
    let mut party = LabelParty::new(&ds.vocab_sizes.label, &model, AdamConfig::default(), r.random()).unwrap();
    party.load_samples(&ds);
    let ids: Vec<String> = ds.records.iter().map(|x| x.sample_id.clone()).collect();
    let h = normal_tensor(b, model.cut_dim(), 1.0, r);
    let out = party.train_step(BranchKind::Federated, &ids, &h, false).unwrap();
    let analytic = out.cut_grad.scale(1.0 / b as f64);
    let err = fd_max_err(&h, &analytic, |p| {
        party.train_step(BranchKind::Federated, &ids, p, false).unwrap().loss
    });
    GradCheck {
        kernel: "cut_gradient",
        max_rel_err: err,
    }
}

/// `per_kernel` randomized instances for each backward kernel and the cut gradient.
pub fn gradient_suite(seed: u64, per_kernel: usize) -> Vec<GradCheck> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    for _ in 0..per_kernel {
        out.push(dense_instance(&mut r));
        out.push(batchnorm_instance(&mut r));
        out.push(cross_entropy_instance(&mut r));
        out.push(embedding_instance(&mut r));
        out.push(cut_gradient_instance(&mut r));
    }
    out
}

// ---------------------------------------------------------------------------
// Monolithic re-implementation of the split network with naive loops.

struct Param {
    val: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Param {
    fn new(t: &Tensor) -> Self {
        Param {
            val: t.data().to_vec(),
            m: vec![0.0; t.len()],
            v: vec![0.0; t.len()],
        }
    }

    fn adam(&mut self, g: &[f64], cfg: &AdamConfig, t: i32) {
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for k in 0..self.val.len() {
            self.m[k] = cfg.beta1 * self.m[k] + (1.0 - cfg.beta1) * g[k];
            self.v[k] = cfg.beta2 * self.v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            self.val[k] -= cfg.lr * (self.m[k] / bc1) / ((self.v[k] / bc2).sqrt() + cfg.eps);
        }
    }
}

struct Linear {
    w: Param,
    b: Param,
    n_in: usize,
    n_out: usize,
    relu: bool,
}

type Rows = Vec<Vec<f64>>;

impl Linear {
    fn from(l: &DenseLayer) -> Self {
        Linear {
            w: Param::new(&l.weight),
            b: Param::new(&l.bias),
            n_in: l.in_dim(),
            n_out: l.out_dim(),
            relu: l.activation == Activation::Relu,
        }
    }

    fn forward(&self, x: &Rows) -> Rows {
        x.iter()
            .map(|row| {
                (0..self.n_out)
                    .map(|o| {
                        let mut s = 0.0;
                        for i in 0..self.n_in {
                            s += row[i] * self.w.val[o * self.n_in + i];
                        }
                        let z = s + self.b.val[o];
                        if self.relu {
                            z.max(0.0)
                        } else {
                            z
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Returns (dW, db, dx) given the input and the gradient w.r.t. the pre-activation.
    fn backward(&self, x: &Rows, delta: &Rows) -> (Vec<f64>, Vec<f64>, Rows) {
        let mut dw = vec![0.0; self.n_out * self.n_in];
        let mut db = vec![0.0; self.n_out];
        let mut dx = vec![vec![0.0; self.n_in]; x.len()];
        for (n, (xr, dr)) in x.iter().zip(delta).enumerate() {
            for o in 0..self.n_out {
                db[o] += dr[o];
                for i in 0..self.n_in {
                    dw[o * self.n_in + i] += dr[o] * xr[i];
                    dx[n][i] += dr[o] * self.w.val[o * self.n_in + i];
                }
            }
        }
        (dw, db, dx)
    }
}

struct Norm {
    gamma: Param,
    beta: Param,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    eps: f64,
    momentum: f64,
}

struct Table {
    rows: Param,
    dim: usize,
    offsets: Vec<usize>,
}

impl Table {
    fn new(t: &Tensor, vocab: &[usize]) -> Self {
        let mut offsets = Vec::new();
        let mut acc = 0;
        for v in vocab {
            offsets.push(acc);
            acc += v;
        }
        assert_eq!(acc, t.rows());
        Table {
            rows: Param::new(t),
            dim: t.cols(),
            offsets,
        }
    }

    fn lookup(&self, ids: &[u32]) -> Vec<f64> {
        let mut out = Vec::new();
        for (s, &id) in ids.iter().enumerate() {
            let r = self.offsets[s] + id as usize;
            out.extend_from_slice(&self.rows.val[r * self.dim..(r + 1) * self.dim]);
        }
        out
    }

    fn grad(&self, batch: &[Vec<u32>], dx: &Rows) -> Vec<f64> {
        let mut g = vec![0.0; self.rows.val.len()];
        for (ids, d) in batch.iter().zip(dx) {
            for (s, &id) in ids.iter().enumerate() {
                let r = self.offsets[s] + id as usize;
                for k in 0..self.dim {
                    g[r * self.dim + k] += d[s * self.dim + k];
                }
            }
        }
        g
    }
}

fn to_f32_and_back(v: f64) -> f64 {
    v as f32 as f64
}

/// Single-process model mirroring the two-party network, including the f32
/// rounding of the values that cross the wire.
pub struct Monolith {
    nl_table: Table,
    nl_layers: Vec<Linear>,
    l_table: Table,
    bottom: Vec<Linear>,
    norms: Vec<Norm>,
    top: Linear,
    adam: AdamConfig,
    step: i32,
}

pub struct MonolithStep {
    pub loss: f64,
    pub h_n: Rows,
    pub cut_grad: Rows,
}

impl Monolith {
    /// Copies the initial parameters of `fed`.
    pub fn mirror(fed: &Federation, vocab: &VocabSizes, adam: AdamConfig) -> Self {
        let norms = fed
            .label
            .federated
            .norms
            .iter()
            .map(|n| Norm {
                gamma: Param::new(&n.gamma),
                beta: Param::new(&n.beta),
                running_mean: n.running_mean.data().to_vec(),
                running_var: n.running_var.data().to_vec(),
                eps: n.epsilon,
                momentum: n.momentum,
            })
            .collect();
        Monolith {
            nl_table: Table::new(&fed.nonlabel.embed.table.rows, &vocab.nonlabel),
            nl_layers: fed.nonlabel.layers.iter().map(Linear::from).collect(),
            l_table: Table::new(&fed.label.embed.table.rows, &vocab.label),
            bottom: fed.label.bottom.iter().map(Linear::from).collect(),
            norms,
            top: Linear::from(&fed.label.federated.top),
            adam,
            step: 0,
        }
    }

    /// Same ordering as the parties' parameter lists: non-label, shared label, federated head.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut p: Vec<&[f64]> = vec![&self.nl_table.rows.val];
        for l in &self.nl_layers {
            p.push(&l.w.val);
            p.push(&l.b.val);
        }
        p.push(&self.l_table.rows.val);
        for l in &self.bottom {
            p.push(&l.w.val);
        }
        for n in &self.norms {
            p.push(&n.gamma.val);
            p.push(&n.beta.val);
        }
        p.push(&self.top.w.val);
        p.push(&self.top.b.val);
        p
    }

    pub fn running_stats(&self) -> Vec<&[f64]> {
        self.norms
            .iter()
            .flat_map(|n| [&n.running_mean[..], &n.running_var[..]])
            .collect()
    }

    /// Forward and backward on one batch; with `update`, one Adam step on every parameter.
    pub fn step(&mut self, batch: &[&SampleRecord], update: bool) -> MonolithStep {
        let b = batch.len();
        let bf = b as f64;
        let nl_ids: Vec<Vec<u32>> = batch.iter().map(|r| r.nonlabel_features.unwrap().to_vec()).collect();
        let l_ids: Vec<Vec<u32>> = batch.iter().map(|r| r.label_features.to_vec()).collect();

        // non-label tower
        let mut nl_acts: Vec<Rows> = vec![nl_ids.iter().map(|ids| self.nl_table.lookup(ids)).collect()];
        for l in &self.nl_layers {
            let next = l.forward(nl_acts.last().unwrap());
            nl_acts.push(next);
        }
        let h_n: Rows = nl_acts
            .last()
            .unwrap()
            .iter()
            .map(|row| row.iter().map(|&v| to_f32_and_back(v)).collect())
            .collect();

        // label tower: dense, batch norm, relu
        let mut acts: Vec<Rows> = vec![l_ids.iter().map(|ids| self.l_table.lookup(ids)).collect()];
        let mut xhats = Vec::new();
        let mut inv_stds = Vec::new();
        for (k, l) in self.bottom.iter().enumerate() {
            let z = l.forward(acts.last().unwrap());
            let norm = &mut self.norms[k];
            let d = l.n_out;
            let mut mean = vec![0.0; d];
            for row in &z {
                for j in 0..d {
                    mean[j] += row[j];
                }
            }
            mean.iter_mut().for_each(|m| *m /= bf);
            let mut var = vec![0.0; d];
            for row in &z {
                for j in 0..d {
                    var[j] += (row[j] - mean[j]) * (row[j] - mean[j]);
                }
            }
            var.iter_mut().for_each(|v| *v /= bf);
            let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + norm.eps).sqrt()).collect();
            let xhat: Rows = z
                .iter()
                .map(|row| (0..d).map(|j| (row[j] - mean[j]) * inv[j]).collect())
                .collect();
            let out: Rows = xhat
                .iter()
                .map(|row| (0..d).map(|j| (norm.gamma.val[j] * row[j] + norm.beta.val[j]).max(0.0)).collect())
                .collect();
            if update {
                for j in 0..d {
                    norm.running_mean[j] = norm.momentum * norm.running_mean[j] + (1.0 - norm.momentum) * mean[j];
                    norm.running_var[j] = norm.momentum * norm.running_var[j] + (1.0 - norm.momentum) * var[j];
                }
            }
            xhats.push(xhat);
            inv_stds.push(inv);
            acts.push(out);
        }

        let cut = h_n[0].len();
        let top_in: Rows = h_n
            .iter()
            .zip(acts.last().unwrap())
            .map(|(a, c)| a.iter().chain(c).copied().collect())
            .collect();
        let logits = self.top.forward(&top_in);
        let mut loss = 0.0;
        let mut d_logits = Vec::with_capacity(b);
        for (l, r) in logits.iter().zip(batch) {
            let max = l[0].max(l[1]);
            let e0 = (l[0] - max).exp();
            let e1 = (l[1] - max).exp();
            let lse = max + (e0 + e1).ln();
            let y = r.label as usize;
            loss += lse - l[y];
            let p = [e0 / (e0 + e1), e1 / (e0 + e1)];
            let onehot = [(y == 0) as u8 as f64, (y == 1) as u8 as f64];
            d_logits.push(vec![(p[0] - onehot[0]) * (1.0 / bf), (p[1] - onehot[1]) * (1.0 / bf)]);
        }
        loss /= bf;

        let (top_dw, top_db, d_top_in) = self.top.backward(&top_in, &d_logits);
        let d_h: Rows = d_top_in.iter().map(|r| r[..cut].to_vec()).collect();
        let mut up: Rows = d_top_in.iter().map(|r| r[cut..].to_vec()).collect();

        let mut bottom_g = Vec::new();
        let mut norm_g = Vec::new();
        for k in (0..self.bottom.len()).rev() {
            let d = self.bottom[k].n_out;
            let post = &acts[k + 1];
            let xhat = &xhats[k];
            let inv = &inv_stds[k];
            let norm = &self.norms[k];
            let dy: Rows = up
                .iter()
                .zip(post)
                .map(|(u, p)| (0..d).map(|j| if p[j] > 0.0 { u[j] } else { 0.0 }).collect())
                .collect();
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            let mut sum_dxhat = vec![0.0; d];
            let mut sum_dxhat_xhat = vec![0.0; d];
            for (dr, xr) in dy.iter().zip(xhat) {
                for j in 0..d {
                    dgamma[j] += dr[j] * xr[j];
                    dbeta[j] += dr[j];
                    let dxh = dr[j] * norm.gamma.val[j];
                    sum_dxhat[j] += dxh;
                    sum_dxhat_xhat[j] += dxh * xr[j];
                }
            }
            let dz: Rows = dy
                .iter()
                .zip(xhat)
                .map(|(dr, xr)| {
                    (0..d)
                        .map(|j| {
                            let dxh = dr[j] * norm.gamma.val[j];
                            inv[j] / bf * (bf * dxh - sum_dxhat[j] - xr[j] * sum_dxhat_xhat[j])
                        })
                        .collect()
                })
                .collect();
            let (dw, db, dx) = self.bottom[k].backward(&acts[k], &dz);
            bottom_g.push((dw, db));
            norm_g.push((dgamma, dbeta));
            up = dx;
        }
        let l_table_g = self.l_table.grad(&l_ids, &up);

        // the wire carries the per-sample gradient in f32; the receiver averages
        let cut_grad: Rows = d_h
            .iter()
            .map(|r| r.iter().map(|&v| to_f32_and_back(v * bf)).collect())
            .collect();
        let mut up: Rows = cut_grad
            .iter()
            .map(|r| r.iter().map(|&v| v * (1.0 / bf)).collect())
            .collect();
        let mut nl_g = Vec::new();
        for k in (0..self.nl_layers.len()).rev() {
            let layer = &self.nl_layers[k];
            let out = &nl_acts[k + 1];
            let delta: Rows = up
                .iter()
                .zip(out)
                .map(|(u, o)| {
                    u.iter()
                        .zip(o)
                        .map(|(&g, &y)| if layer.relu && y <= 0.0 { 0.0 } else { g })
                        .collect()
                })
                .collect();
            let (dw, db, dx) = layer.backward(&nl_acts[k], &delta);
            nl_g.push((dw, db));
            up = dx;
        }
        let nl_table_g = self.nl_table.grad(&nl_ids, &up);

        if update {
            self.step += 1;
            let (cfg, t) = (self.adam, self.step);
            self.nl_table.rows.adam(&nl_table_g, &cfg, t);
            for (layer, (dw, db)) in self.nl_layers.iter_mut().rev().zip(&nl_g) {
                layer.w.adam(dw, &cfg, t);
                layer.b.adam(db, &cfg, t);
            }
            self.l_table.rows.adam(&l_table_g, &cfg, t);
            // bottom biases precede batch norm and are not trained
            for (layer, (dw, _)) in self.bottom.iter_mut().rev().zip(&bottom_g) {
                layer.w.adam(dw, &cfg, t);
            }
            for (norm, (dg, dbt)) in self.norms.iter_mut().rev().zip(&norm_g) {
                norm.gamma.adam(dg, &cfg, t);
                norm.beta.adam(dbt, &cfg, t);
            }
            self.top.w.adam(&top_dw, &cfg, t);
            self.top.b.adam(&top_db, &cfg, t);
        }
        MonolithStep { loss, h_n, cut_grad }
    }
}

pub fn federation_params(fed: &Federation) -> Vec<Vec<f64>> {
    fed.nonlabel
        .params()
        .into_iter()
        .chain(fed.label.shared_params())
        .chain(fed.label.federated.params())
        .map(|t| t.data().to_vec())
        .collect()
}

pub fn max_abs_diff(a: &[&[f64]], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

/// Runs `steps` protocol steps and the monolith side by side; returns the
/// largest parameter difference (including batch-norm running statistics).
pub fn split_vs_monolith(seed: u64, steps: usize, batch: usize) -> f64 {
    use vflsim::protocol::TrainConfig;
    let ds = generate(&GeneratorConfig {
        n_samples: steps * batch,
        n_users: 40,
        n_ads: 12,
        positive_rate: 0.3,
        nonlabel_signal_strength: 1.0,
        seed,
    })
    .unwrap();
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let model = ModelConfig::default();
    let mut fed = Federation::new(&ds.vocab_sizes, &model, &cfg).unwrap();
    fed.load(&ds);
    let mut mono = Monolith::mirror(&fed, &ds.vocab_sizes, cfg.adam);
    let mut worst: f64 = 0.0;
    for chunk in ds.records.chunks(batch).take(steps) {
        let ids: Vec<String> = chunk.iter().map(|r| r.sample_id.clone()).collect();
        let loss = fed.train_step(&ids).unwrap();
        let refs: Vec<&SampleRecord> = chunk.iter().collect();
        let m = mono.step(&refs, true);
        worst = worst.max((loss - m.loss).abs());
    }
    worst = worst.max(max_abs_diff(&mono.params(), &federation_params(&fed)));
    let stats: Vec<Vec<f64>> = fed
        .label
        .federated
        .norms
        .iter()
        .flat_map(|n| [n.running_mean.data().to_vec(), n.running_var.data().to_vec()])
        .collect();
    worst.max(max_abs_diff(&mono.running_stats(), &stats))
}

/// Small generated log with a high positive rate so tests see both classes.
pub fn small_log(n: usize, seed: u64) -> Dataset {
    generate(&GeneratorConfig {
        n_samples: n,
        n_users: (n / 10).max(10),
        n_ads: 20,
        positive_rate: 0.25,
        nonlabel_signal_strength: 1.0,
        seed,
    })
    .unwrap()
}

pub fn ids_of(ds: &Dataset) -> Vec<String> {
    ds.records.iter().map(|r| r.sample_id.clone()).collect()
}
