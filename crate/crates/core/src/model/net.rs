//! Parameters, forward pass, losses and hand-derived gradients of the
//! dual-subspace network. Everything is f64 and row-major: a batch is a
//! `B x D` matrix.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const LN_EPS: f64 = 1e-5;
const COS_EPS: f64 = 1e-8;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn relu(a: Array2<f64>) -> Array2<f64> {
    a.mapv_into(|v| v.max(0.0))
}

/// Zeroes `grad` wherever the rectified activation `h` is zero.
fn relu_backward(grad: &mut Array2<f64>, h: &Array2<f64>) {
    grad.zip_mut_with(h, |g, &v| {
        if v <= 0.0 {
            *g = 0.0;
        }
    });
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Dense {
            w: uniform(rng, fan_in, fan_out, bound),
            b: Array1::zeros(fan_out),
        }
    }

    fn zeros_like(&self) -> Self {
        Dense {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.len()),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Dense) -> Array2<f64> {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }

    fn backward_params_only(x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Dense) {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        out.push((format!("{prefix}.w"), self.w.as_slice().expect("standard layout")));
        out.push((format!("{prefix}.b"), self.b.as_slice().expect("standard layout")));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        out.push((format!("{prefix}.w"), self.w.as_slice_mut().expect("standard layout")));
        out.push((format!("{prefix}.b"), self.b.as_slice_mut().expect("standard layout")));
    }
}

/// Two-layer feed-forward head with a rectified hidden layer. The output
/// nonlinearity (if any) is applied by the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp2 {
    pub l1: Dense,
    pub l2: Dense,
}

impl Mlp2 {
    fn init(input: usize, hidden: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Mlp2 {
            l1: Dense::init(input, hidden, rng),
            l2: Dense::init(hidden, output, rng),
        }
    }

    fn zeros_like(&self) -> Self {
        Mlp2 {
            l1: self.l1.zeros_like(),
            l2: self.l2.zeros_like(),
        }
    }

    /// Returns (hidden activations, raw output).
    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let h = relu(self.l1.forward(x));
        let out = self.l2.forward(&h);
        (h, out)
    }

    fn backward(&self, x: &Array2<f64>, h: &Array2<f64>, dout: &Array2<f64>, grad: &mut Mlp2) -> Array2<f64> {
        let mut dh = self.l2.backward(h, dout, &mut grad.l2);
        relu_backward(&mut dh, h);
        self.l1.backward(x, &dh, &mut grad.l1)
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        self.l1.collect(&format!("{prefix}.l1"), out);
        self.l2.collect(&format!("{prefix}.l2"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        self.l1.collect_mut(&format!("{prefix}.l1"), out);
        self.l2.collect_mut(&format!("{prefix}.l2"), out);
    }
}

/// Gated cross-attention from a key/value subspace into a query subspace:
/// `out = query + sigmoid(gate) * LayerNorm(W_o * Attn)`.
///
/// With one token per record the softmax over a single key is exactly 1, so
/// the query and key projections drop out and receive zero gradient. With
/// `tokens > 1` each d-vector is split into `tokens` chunks and ordinary
/// scaled dot-product attention runs over them.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttention {
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub o: Dense,
    pub ln_g: Array1<f64>,
    pub ln_b: Array1<f64>,
    /// Gate pre-activation; the effective gate is its sigmoid.
    pub gate: Array1<f64>,
}

struct TokenCache {
    xq: Array2<f64>,
    xkv: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    a: Array2<f64>,
}

pub struct AttentionCache {
    att: Array2<f64>,
    normed: Array2<f64>,
    inv_std: Array1<f64>,
    ln_out: Array2<f64>,
    tokens: Vec<TokenCache>,
}

impl CrossAttention {
    fn init(d: usize, tokens: usize, rng: &mut ChaCha8Rng) -> Self {
        let dt = d / tokens;
        CrossAttention {
            q: Dense::init(dt, dt, rng),
            k: Dense::init(dt, dt, rng),
            v: Dense::init(dt, dt, rng),
            o: Dense::init(d, d, rng),
            ln_g: Array1::ones(d),
            ln_b: Array1::zeros(d),
            gate: Array1::zeros(1),
        }
    }

    fn zeros_like(&self) -> Self {
        CrossAttention {
            q: self.q.zeros_like(),
            k: self.k.zeros_like(),
            v: self.v.zeros_like(),
            o: self.o.zeros_like(),
            ln_g: Array1::zeros(self.ln_g.len()),
            ln_b: Array1::zeros(self.ln_b.len()),
            gate: Array1::zeros(1),
        }
    }

    pub fn gate_value(&self) -> f64 {
        sigmoid(self.gate[0])
    }

    fn tokens(&self, d: usize) -> usize {
        d / self.q.w.nrows()
    }

    fn forward(&self, fq: &Array2<f64>, fkv: &Array2<f64>) -> (Array2<f64>, AttentionCache) {
        let (b, d) = fq.dim();
        let t = self.tokens(d);
        let mut token_caches = Vec::new();
        let att = if t == 1 {
            self.v.forward(fkv)
        } else {
            let dt = d / t;
            let scale = 1.0 / (dt as f64).sqrt();
            let mut att = Array2::zeros((b, d));
            for i in 0..b {
                let xq = Array2::from_shape_vec((t, dt), fq.row(i).to_vec()).expect("shape");
                let xkv = Array2::from_shape_vec((t, dt), fkv.row(i).to_vec()).expect("shape");
                let q = self.q.forward(&xq);
                let k = self.k.forward(&xkv);
                let v = self.v.forward(&xkv);
                let mut a = q.dot(&k.t()) * scale;
                for mut row in a.rows_mut() {
                    let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                    row.mapv_inplace(|x| (x - m).exp());
                    let z = row.sum();
                    row /= z;
                }
                let out = a.dot(&v);
                att.row_mut(i).assign(&Array1::from_iter(out.iter().copied()));
                token_caches.push(TokenCache { xq, xkv, q, k, v, a });
            }
            att
        };
        let u = self.o.forward(&att);
        let mut normed = Array2::zeros((b, d));
        let mut inv_std = Array1::zeros(b);
        for i in 0..b {
            let row = u.row(i);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            normed.row_mut(i).assign(&row.mapv(|x| (x - mean) * is));
        }
        let ln_out = &normed * &self.ln_g + &self.ln_b;
        let out = fq + &(&ln_out * self.gate_value());
        (
            out,
            AttentionCache {
                att,
                normed,
                inv_std,
                ln_out,
                tokens: token_caches,
            },
        )
    }

    /// Returns `(dL/d query, dL/d key-value)` given `dL/d out`.
    fn backward(
        &self,
        fkv: &Array2<f64>,
        cache: &AttentionCache,
        dout: &Array2<f64>,
        grad: &mut CrossAttention,
    ) -> (Array2<f64>, Array2<f64>) {
        let (b, d) = dout.dim();
        let g = self.gate_value();
        let mut dq = dout.clone();
        grad.gate[0] += g * (1.0 - g) * (dout * &cache.ln_out).sum();
        let dl = dout * g;
        grad.ln_g += &(&dl * &cache.normed).sum_axis(Axis(0));
        grad.ln_b += &dl.sum_axis(Axis(0));
        let dn = &dl * &self.ln_g;
        let mut du = Array2::zeros((b, d));
        for i in 0..b {
            let dn_i = dn.row(i);
            let n_i = cache.normed.row(i);
            let mean_dn = dn_i.sum() / d as f64;
            let mean_dnn = dn_i.dot(&n_i) / d as f64;
            let is = cache.inv_std[i];
            for j in 0..d {
                du[[i, j]] = is * (dn_i[j] - mean_dn - n_i[j] * mean_dnn);
            }
        }
        let datt = self.o.backward(&cache.att, &du, &mut grad.o);
        let t = self.tokens(d);
        let dkv = if t == 1 {
            self.v.backward(fkv, &datt, &mut grad.v)
        } else {
            let dt = d / t;
            let scale = 1.0 / (dt as f64).sqrt();
            let mut dkv = Array2::zeros((b, d));
            for (i, tc) in cache.tokens.iter().enumerate() {
                let dout_tok = Array2::from_shape_vec((t, dt), datt.row(i).to_vec()).expect("shape");
                let da = dout_tok.dot(&tc.v.t());
                let dv = tc.a.t().dot(&dout_tok);
                let mut ds = Array2::zeros((t, t));
                for r in 0..t {
                    let dot: f64 = (0..t).map(|c| da[[r, c]] * tc.a[[r, c]]).sum();
                    for c in 0..t {
                        ds[[r, c]] = tc.a[[r, c]] * (da[[r, c]] - dot) * scale;
                    }
                }
                let dq_tok = ds.dot(&tc.k);
                let dk_tok = ds.t().dot(&tc.q);
                let dxq = self.q.backward(&tc.xq, &dq_tok, &mut grad.q);
                let dxkv = self.k.backward(&tc.xkv, &dk_tok, &mut grad.k) + self.v.backward(&tc.xkv, &dv, &mut grad.v);
                let mut row = dq.row_mut(i);
                row += &Array1::from_iter(dxq.iter().copied());
                dkv.row_mut(i).assign(&Array1::from_iter(dxkv.iter().copied()));
            }
            dkv
        };
        (dq, dkv)
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        self.q.collect(&format!("{prefix}.q"), out);
        self.k.collect(&format!("{prefix}.k"), out);
        self.v.collect(&format!("{prefix}.v"), out);
        self.o.collect(&format!("{prefix}.o"), out);
        out.push((format!("{prefix}.ln_g"), self.ln_g.as_slice().expect("standard layout")));
        out.push((format!("{prefix}.ln_b"), self.ln_b.as_slice().expect("standard layout")));
        out.push((format!("{prefix}.gate"), self.gate.as_slice().expect("standard layout")));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        self.q.collect_mut(&format!("{prefix}.q"), out);
        self.k.collect_mut(&format!("{prefix}.k"), out);
        self.v.collect_mut(&format!("{prefix}.v"), out);
        self.o.collect_mut(&format!("{prefix}.o"), out);
        out.push((format!("{prefix}.ln_g"), self.ln_g.as_slice_mut().expect("standard layout")));
        out.push((format!("{prefix}.ln_b"), self.ln_b.as_slice_mut().expect("standard layout")));
        out.push((format!("{prefix}.gate"), self.gate.as_slice_mut().expect("standard layout")));
    }
}

/// Sizes that fix every parameter shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub input: usize,
    pub d: usize,
    pub hidden: usize,
    pub domains: usize,
    /// Attention tokens per record (1 unless token splitting is enabled).
    pub tokens: usize,
}

/// Prefix of the domain classifier's tensors; everything else is the
/// generator side.
pub const DOMAIN_CLASSIFIER: &str = "g_shared.";

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub f_specific: Dense,
    pub f_shared: Dense,
    /// Query = shared, key/value = specific; updates the shared subspace.
    pub att_sp2sh: CrossAttention,
    /// Query = specific, key/value = shared; updates the specific subspace.
    pub att_sh2sp: CrossAttention,
    pub g_pred: Mlp2,
    pub g_recons: Mlp2,
    pub g_specific: Mlp2,
    pub g_shared: Mlp2,
}

impl Network {
    pub fn init(shape: Shape, rng: &mut ChaCha8Rng) -> Self {
        let Shape {
            input,
            d,
            hidden,
            domains,
            tokens,
        } = shape;
        Network {
            f_specific: Dense::init(input, d, rng),
            f_shared: Dense::init(input, d, rng),
            att_sp2sh: CrossAttention::init(d, tokens, rng),
            att_sh2sp: CrossAttention::init(d, tokens, rng),
            g_pred: Mlp2::init(2 * d, hidden, 1, rng),
            g_recons: Mlp2::init(2 * d, hidden, input, rng),
            g_specific: Mlp2::init(d, hidden, domains, rng),
            g_shared: Mlp2::init(d, hidden, domains, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Network {
            f_specific: self.f_specific.zeros_like(),
            f_shared: self.f_shared.zeros_like(),
            att_sp2sh: self.att_sp2sh.zeros_like(),
            att_sh2sp: self.att_sh2sp.zeros_like(),
            g_pred: self.g_pred.zeros_like(),
            g_recons: self.g_recons.zeros_like(),
            g_specific: self.g_specific.zeros_like(),
            g_shared: self.g_shared.zeros_like(),
        }
    }

    pub fn shape(&self) -> Shape {
        let d = self.f_specific.w.ncols();
        Shape {
            input: self.f_specific.w.nrows(),
            d,
            hidden: self.g_pred.l1.w.ncols(),
            domains: self.g_specific.l2.w.ncols(),
            tokens: d / self.att_sp2sh.q.w.nrows(),
        }
    }

    /// Every tensor in a fixed order, with a dotted name.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        self.f_specific.collect("f_specific", &mut out);
        self.f_shared.collect("f_shared", &mut out);
        self.att_sp2sh.collect("att_sp2sh", &mut out);
        self.att_sh2sp.collect("att_sh2sp", &mut out);
        self.g_pred.collect("g_pred", &mut out);
        self.g_recons.collect("g_recons", &mut out);
        self.g_specific.collect("g_specific", &mut out);
        self.g_shared.collect("g_shared", &mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        self.f_specific.collect_mut("f_specific", &mut out);
        self.f_shared.collect_mut("f_shared", &mut out);
        self.att_sp2sh.collect_mut("att_sp2sh", &mut out);
        self.att_sh2sp.collect_mut("att_sh2sp", &mut out);
        self.g_pred.collect_mut("g_pred", &mut out);
        self.g_recons.collect_mut("g_recons", &mut out);
        self.g_specific.collect_mut("g_specific", &mut out);
        self.g_shared.collect_mut("g_shared", &mut out);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn forward(&self, x: &Array2<f64>, attention: bool) -> Forward {
        let h_sp = relu(self.f_specific.forward(x));
        let h_sh = relu(self.f_shared.forward(x));
        let (fsp_prime, fsh_prime, caches) = if attention {
            let (fsh_prime, c1) = self.att_sp2sh.forward(&h_sh, &h_sp);
            let (fsp_prime, c2) = self.att_sh2sp.forward(&h_sp, &h_sh);
            (fsp_prime, fsh_prime, Some((c1, c2)))
        } else {
            (h_sp.clone(), h_sh.clone(), None)
        };
        let d = h_sp.ncols();
        let mut z = Array2::zeros((x.nrows(), 2 * d));
        z.slice_mut(s![.., ..d]).assign(&fsp_prime);
        z.slice_mut(s![.., d..]).assign(&fsh_prime);
        let (pred_h, pred_out) = self.g_pred.forward(&z);
        let logits = pred_out.column(0).to_owned();
        let probs = logits.mapv(sigmoid);
        let (recon_h, recon) = self.g_recons.forward(&z);
        let (spec_h, domain_specific) = self.g_specific.forward(&h_sp);
        let (shared_h, shared_raw) = self.g_shared.forward(&h_sh);
        let domain_shared = shared_raw.mapv(sigmoid);
        Forward {
            x: x.clone(),
            h_sp,
            h_sh,
            caches,
            fsp_prime,
            fsh_prime,
            z,
            pred_h,
            logits,
            probs,
            recon_h,
            recon,
            spec_h,
            domain_specific,
            shared_h,
            domain_shared,
        }
    }

    /// Gradient of `sum_t weights[t] * term_t` with respect to every
    /// parameter. Term order matches [`LossBreakdown::terms`].
    pub fn backward(&self, fw: &Forward, y: &Array1<f64>, dom: &Array2<f64>, weights: &[f64; 6], tau: f64) -> Network {
        let mut grad = self.zeros_like();
        let b = fw.x.nrows() as f64;
        let d = fw.h_sp.ncols();

        let mut dlogit = Array2::zeros((fw.logits.len(), 1));
        for i in 0..fw.logits.len() {
            dlogit[[i, 0]] = weights[0] * (fw.probs[i] - y[i]) / b;
        }
        let mut dz = self.g_pred.backward(&fw.z, &fw.pred_h, &dlogit, &mut grad.g_pred);
        let n_recon = fw.recon.len() as f64;
        let drecon = (&fw.recon - &fw.x) * (2.0 * weights[1] / n_recon);
        dz += &self.g_recons.backward(&fw.z, &fw.recon_h, &drecon, &mut grad.g_recons);

        let mut dfsp_p = dz.slice(s![.., ..d]).to_owned();
        let mut dfsh_p = dz.slice(s![.., d..]).to_owned();

        if weights[4] != 0.0 {
            let m = fw.fsp_prime.t().dot(&fw.fsh_prime);
            let c = 2.0 * weights[4] / (b * b);
            dfsp_p += &(fw.fsh_prime.dot(&m.t()) * c);
            dfsh_p += &(fw.fsp_prime.dot(&m) * c);
        }
        if weights[5] != 0.0 {
            for i in 0..fw.fsp_prime.nrows() {
                let a = fw.fsp_prime.row(i);
                let bv = fw.fsh_prime.row(i);
                let na = (a.dot(&a) + COS_EPS).sqrt();
                let nb = (bv.dot(&bv) + COS_EPS).sqrt();
                let sim = a.dot(&bv) / (na * nb);
                let coef = weights[5] * sigmoid((sim - 1.0) / tau) / (tau * b);
                let da = (&bv / (na * nb) - &a * (sim / (na * na))) * coef;
                let db = (&a / (na * nb) - &bv * (sim / (nb * nb))) * coef;
                let mut ra = dfsp_p.row_mut(i);
                ra += &da;
                let mut rb = dfsh_p.row_mut(i);
                rb += &db;
            }
        }

        let (mut dh_sp, mut dh_sh) = match &fw.caches {
            Some((c1, c2)) => {
                let (dq1, dkv1) = self.att_sp2sh.backward(&fw.h_sp, c1, &dfsh_p, &mut grad.att_sp2sh);
                let (dq2, dkv2) = self.att_sh2sp.backward(&fw.h_sh, c2, &dfsp_p, &mut grad.att_sh2sp);
                (dq2 + &dkv1, dq1 + &dkv2)
            }
            None => (dfsp_p, dfsh_p),
        };

        if weights[2] != 0.0 {
            let n = fw.domain_specific.len() as f64;
            let dout = (&fw.domain_specific - dom) * (2.0 * weights[2] / n);
            dh_sp += &self.g_specific.backward(&fw.h_sp, &fw.spec_h, &dout, &mut grad.g_specific);
        }
        if weights[3] != 0.0 {
            let n = fw.domain_shared.len() as f64;
            let mut dout = (&fw.domain_shared - dom) * (2.0 * weights[3] / n);
            dout.zip_mut_with(&fw.domain_shared, |g, &p| *g *= p * (1.0 - p));
            dh_sh += &self.g_shared.backward(&fw.h_sh, &fw.shared_h, &dout, &mut grad.g_shared);
        }

        relu_backward(&mut dh_sp, &fw.h_sp);
        relu_backward(&mut dh_sh, &fw.h_sh);
        Dense::backward_params_only(&fw.x, &dh_sp, &mut grad.f_specific);
        Dense::backward_params_only(&fw.x, &dh_sh, &mut grad.f_shared);
        grad
    }

    /// Domain-classifier loss and its gradient with respect to `g_shared`
    /// only; the rest of `grad` stays zero.
    pub fn shared_head_step(&self, x: &Array2<f64>, dom: &Array2<f64>) -> (f64, Network) {
        let h_sh = relu(self.f_shared.forward(x));
        let (h, raw) = self.g_shared.forward(&h_sh);
        let p = raw.mapv(sigmoid);
        let n = p.len() as f64;
        let loss = (&p - dom).mapv(|v| v * v).sum() / n;
        let mut dout = (&p - dom) * (2.0 / n);
        dout.zip_mut_with(&p, |g, &v| *g *= v * (1.0 - v));
        let mut grad = self.zeros_like();
        let mut dh = self.g_shared.l2.backward(&h, &dout, &mut grad.g_shared.l2);
        relu_backward(&mut dh, &h);
        Dense::backward_params_only(&h_sh, &dh, &mut grad.g_shared.l1);
        (loss, grad)
    }
}

/// Everything the backward pass needs from a forward pass.
pub struct Forward {
    x: Array2<f64>,
    pub h_sp: Array2<f64>,
    pub h_sh: Array2<f64>,
    caches: Option<(AttentionCache, AttentionCache)>,
    pub fsp_prime: Array2<f64>,
    pub fsh_prime: Array2<f64>,
    z: Array2<f64>,
    pred_h: Array2<f64>,
    pub logits: Array1<f64>,
    pub probs: Array1<f64>,
    recon_h: Array2<f64>,
    pub recon: Array2<f64>,
    spec_h: Array2<f64>,
    pub domain_specific: Array2<f64>,
    shared_h: Array2<f64>,
    pub domain_shared: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossBreakdown {
    pub pred: f64,
    pub recon: f64,
    pub specific: f64,
    pub shared: f64,
    pub ortho: f64,
    pub contrast: f64,
    /// Weighted generator objective (the shared term enters negated).
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [f64; 6] {
        [self.pred, self.recon, self.specific, self.shared, self.ortho, self.contrast]
    }

    pub fn is_finite(&self) -> bool {
        self.terms().iter().all(|t| t.is_finite()) && self.total.is_finite()
    }
}

fn mse(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).mapv(|v| v * v).sum() / a.len() as f64
}

/// All six terms for a forward pass; `total` uses `weights`.
pub fn losses(fw: &Forward, y: &Array1<f64>, dom: &Array2<f64>, weights: &[f64; 6], tau: f64) -> LossBreakdown {
    let b = fw.logits.len() as f64;
    let pred = fw
        .logits
        .iter()
        .zip(y)
        .map(|(&z, &t)| softplus(z) - t * z)
        .sum::<f64>()
        / b;
    let m = fw.fsp_prime.t().dot(&fw.fsh_prime);
    let ortho = m.mapv(|v| v * v).sum() / (b * b);
    let contrast = (0..fw.fsp_prime.nrows())
        .map(|i| {
            let a = fw.fsp_prime.row(i);
            let c = fw.fsh_prime.row(i);
            let sim = a.dot(&c) / ((a.dot(&a) + COS_EPS).sqrt() * (c.dot(&c) + COS_EPS).sqrt());
            softplus((sim - 1.0) / tau)
        })
        .sum::<f64>()
        / b;
    let mut out = LossBreakdown {
        pred,
        recon: mse(&fw.recon, &fw.x),
        specific: mse(&fw.domain_specific, dom),
        shared: mse(&fw.domain_shared, dom),
        ortho,
        contrast,
        total: 0.0,
    };
    out.total = out.terms().iter().zip(weights).map(|(t, w)| t * w).sum();
    out
}
