//! Tape-based reverse-mode autodiff over f32 tensors.
//!
//! Each training step records a fresh tape. Parameters live in a `ParamStore`
//! and enter the tape as leaves; `backward` routes gradients back into the
//! store, but only for parameters marked trainable — frozen weights never
//! receive (or even allocate) gradient. All kernels inherit the fixed
//! accumulation order from `tensor`, so a step is bitwise reproducible for
//! any thread count.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{self, Tensor};
use crate::xattn;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Named parameter set with AdamW state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    data: Vec<Tensor>,
    grad: Vec<Tensor>,
    trainable: Vec<bool>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, init: Tensor, trainable: bool) -> ParamId {
        assert!(
            self.find(name).is_none(),
            "duplicate parameter name {name:?}"
        );
        let shape = init.shape().to_vec();
        self.names.push(name.to_string());
        self.grad.push(Tensor::zeros(&shape));
        self.m.push(Tensor::zeros(&shape));
        self.v.push(Tensor::zeros(&shape));
        self.data.push(init);
        self.trainable.push(trainable);
        ParamId(self.names.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.data[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.data[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grad[id.0]
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, t: bool) {
        self.trainable[id.0] = t;
    }

    pub fn freeze_all(&mut self) {
        for t in self.trainable.iter_mut() {
            *t = false;
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn trainable_param_count(&self) -> usize {
        self.ids()
            .filter(|&id| self.trainable(id))
            .map(|id| self.get(id).numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for g in self.grad.iter_mut() {
            g.data_mut().fill(0.0);
        }
    }

    pub fn grad_l2_norm(&self, id: ParamId) -> f64 {
        self.grad[id.0].data().iter().map(|&g| g as f64 * g as f64).sum::<f64>().sqrt()
    }

    /// Decoupled-weight-decay adaptive-moment step on the trainable subset.
    /// Element updates are computed in f64 and stored back as f32.
    pub fn adamw_step(&mut self, cfg: &AdamWConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..self.data.len() {
            if !self.trainable[i] {
                continue;
            }
            let g = self.grad[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = self.data[i].data_mut();
            for j in 0..p.len() {
                let gj = g[j] as f64;
                let mj = cfg.beta1 * m[j] as f64 + (1.0 - cfg.beta1) * gj;
                let vj = cfg.beta2 * v[j] as f64 + (1.0 - cfg.beta2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let m_hat = mj / bc1;
                let v_hat = vj / bc2;
                let upd = m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * p[j] as f64;
                p[j] = (p[j] as f64 - cfg.lr * upd) as f32;
            }
        }
    }

    /// FNV-1a over the bit patterns of every parameter, in name order.
    /// Used to assert the freezing contract.
    pub fn content_hash(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for (name, t) in self.names.iter().zip(self.data.iter()) {
            for b in name.as_bytes() {
                eat(*b);
            }
            for x in t.data() {
                for b in x.to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }

    pub fn hash_subset(&self, pred: impl Fn(&str) -> bool) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for (name, t) in self.names.iter().zip(self.data.iter()) {
            if !pred(name) {
                continue;
            }
            for b in name.as_bytes() {
                eat(*b);
            }
            for x in t.data() {
                for b in x.to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }

    /// Append every parameter (name order = insertion order) to a container.
    pub fn save_into(&self, c: &mut crate::container::Container, prefix: &str) -> Result<()> {
        for id in self.ids() {
            let t = self.get(id);
            c.push_f32(&format!("{prefix}{}", self.name(id)), t.shape(), t.data().to_vec())?;
        }
        Ok(())
    }

    /// Load values for every existing parameter from a container by name.
    pub fn load_from(&mut self, c: &crate::container::Container, prefix: &str) -> Result<()> {
        for i in 0..self.names.len() {
            let key = format!("{prefix}{}", self.names[i]);
            let (dims, vals) = c.get_f32(&key)?;
            if dims != self.data[i].shape() {
                return Err(Error::io(
                    key,
                    format!("shape mismatch: checkpoint {dims:?} vs model {:?}", self.data[i].shape()),
                ));
            }
            self.data[i].data_mut().copy_from_slice(vals);
        }
        Ok(())
    }

    /// Load the parameters that exist in the container, leave the rest at
    /// their current values (e.g. adapters on top of a base checkpoint).
    /// Returns how many were loaded.
    pub fn load_matching(&mut self, c: &crate::container::Container, prefix: &str) -> Result<usize> {
        let mut loaded = 0;
        for i in 0..self.names.len() {
            let key = format!("{prefix}{}", self.names[i]);
            if !c.has(&key) {
                continue;
            }
            let (dims, vals) = c.get_f32(&key)?;
            if dims != self.data[i].shape() {
                return Err(Error::io(
                    key,
                    format!("shape mismatch: checkpoint {dims:?} vs model {:?}", self.data[i].shape()),
                ));
            }
            self.data[i].data_mut().copy_from_slice(vals);
            loaded += 1;
        }
        Ok(loaded)
    }
}

// ---- tape -------------------------------------------------------------------

enum Op {
    Leaf,
    Add(Var, Var),
    Scale(Var, f32),
    Mul(Var, Var),
    Exp(Var),
    Silu(Var),
    Tanh(Var),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, cols: Vec<f32> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<f64>, rstd: Vec<f64> },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    Upsample2x(Var),
    DepthToSpace2x(Var),
    ConcatChan(Var, Var),
    ConcatRows(Var, Var),
    NchwToTokens(Var),
    TokensToNchw { x: Var, h: usize, w: usize },
    AddChanBroadcast { x: Var, t: Var },
    Attention { q: Var, k: Var, v: Var, heads: usize, cross_start: usize, w: Vec<f64>, probs: Vec<f32> },
    MseLoss { pred: Var, target: Tensor, mask: Option<Tensor>, denom: f64 },
    KlNormal { mu: Var, logvar: Var },
}

struct Node {
    value: Tensor,
    wants_grad: bool,
    param: Option<ParamId>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f32 {
        debug_assert_eq!(self.nodes[v.0].value.numel(), 1);
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, wants_grad: bool, param: Option<ParamId>, op: Op) -> Var {
        self.nodes.push(Node { value, wants_grad, param, op });
        Var(self.nodes.len() - 1)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].wants_grad
    }

    /// Constant input (no gradient).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, false, None, Op::Leaf)
    }

    /// Parameter leaf; takes its trainability from the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), store.trainable(id), Some(id), Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let data = ta.data().iter().zip(tb.data().iter()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_vec(ta.shape(), data).unwrap();
        let wants = self.wants(a) || self.wants(b);
        self.push(value, wants, None, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let value = self.nodes[a.0].value.map(|x| x * c);
        let wants = self.wants(a);
        self.push(value, wants, None, Op::Scale(a, c))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let data = ta.data().iter().zip(tb.data().iter()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_vec(ta.shape(), data).unwrap();
        let wants = self.wants(a) || self.wants(b);
        self.push(value, wants, None, Op::Mul(a, b))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(f32::exp);
        let wants = self.wants(a);
        self.push(value, wants, None, Op::Exp(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| x / (1.0 + (-x).exp()));
        let wants = self.wants(a);
        self.push(value, wants, None, Op::Silu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(f32::tanh);
        let wants = self.wants(a);
        self.push(value, wants, None, Op::Tanh(a))
    }

    /// a[m,k] * b[k,n]
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.nodes[a.0].value.shape().to_vec(), self.nodes[b.0].value.shape().to_vec());
        assert_eq!(sa.len(), 2);
        assert_eq!(sb.len(), 2);
        assert_eq!(sa[1], sb[0], "matmul inner dim");
        let mut out = vec![0.0f32; sa[0] * sb[1]];
        tensor::gemm_nn(sa[0], sa[1], sb[1], self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), &mut out);
        let value = Tensor::from_vec(&[sa[0], sb[1]], out).unwrap();
        let wants = self.wants(a) || self.wants(b);
        self.push(value, wants, None, Op::MatMul(a, b))
    }

    /// x[..., din] * w[dout, din]^T + b. Rows = product of leading dims.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let ws = self.nodes[w.0].value.shape().to_vec();
        let din = *xs.last().unwrap();
        assert_eq!(ws.len(), 2);
        assert_eq!(ws[1], din, "linear dims {ws:?} vs x {xs:?}");
        let dout = ws[0];
        let rows = self.nodes[x.0].value.numel() / din;
        let mut out = vec![0.0f32; rows * dout];
        tensor::gemm_nt(rows, din, dout, self.nodes[x.0].value.data(), self.nodes[w.0].value.data(), &mut out);
        if let Some(bv) = b {
            let bias = self.nodes[bv.0].value.data();
            assert_eq!(bias.len(), dout);
            for r in 0..rows {
                for (o, bb) in out[r * dout..(r + 1) * dout].iter_mut().zip(bias.iter()) {
                    *o += *bb;
                }
            }
        }
        let mut oshape = xs.clone();
        *oshape.last_mut().unwrap() = dout;
        let value = Tensor::from_vec(&oshape, out).unwrap();
        let wants = self.wants(x) || self.wants(w) || b.map(|bv| self.wants(bv)).unwrap_or(false);
        self.push(value, wants, None, Op::Linear { x, w, b })
    }

    /// x[B,C,H,W] conv w[O,C,kh,kw] stride/pad, via im2col + one big gemm.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let ws = self.nodes[w.0].value.shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d x {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d w {ws:?}");
        let (bsz, c, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(wc, c, "conv2d channels");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wdt + 2 * pad - kw) / stride + 1;
        let ck2 = c * kh * kw;
        let cols = im2col(self.nodes[x.0].value.data(), bsz, c, h, wdt, kh, kw, stride, pad, ho, wo);
        let mut out_mat = vec![0.0f32; o * bsz * ho * wo];
        tensor::gemm_nn(o, ck2, bsz * ho * wo, self.nodes[w.0].value.data(), &cols, &mut out_mat);
        // [O, B*ho*wo] -> [B, O, ho, wo]
        let plane = ho * wo;
        let mut out = vec![0.0f32; bsz * o * plane];
        for ob in 0..o {
            for bb in 0..bsz {
                let src = &out_mat[ob * bsz * plane + bb * plane..][..plane];
                out[bb * o * plane + ob * plane..][..plane].copy_from_slice(src);
            }
        }
        if let Some(bv) = b {
            let bias = self.nodes[bv.0].value.data();
            for bb in 0..bsz {
                for ob in 0..o {
                    let dst = &mut out[bb * o * plane + ob * plane..][..plane];
                    for v in dst.iter_mut() {
                        *v += bias[ob];
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[bsz, o, ho, wo], out).unwrap();
        let wants = self.wants(x) || self.wants(w) || b.map(|bv| self.wants(bv)).unwrap_or(false);
        self.push(value, wants, None, Op::Conv2d { x, w, b, stride, pad, cols })
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xs = self.nodes[x.0].value.shape().to_vec();
        assert_eq!(xs.len(), 4);
        let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        assert_eq!(c % groups, 0);
        let cg = c / groups;
        let gsz = cg * h * w;
        let xd = self.nodes[x.0].value.data();
        let g = self.nodes[gamma.0].value.data();
        let bt = self.nodes[beta.0].value.data();
        let mut mean = vec![0.0f64; bsz * groups];
        let mut rstd = vec![0.0f64; bsz * groups];
        let mut out = vec![0.0f32; xd.len()];
        for bb in 0..bsz {
            for gg in 0..groups {
                let start = bb * c * h * w + gg * gsz;
                let sl = &xd[start..start + gsz];
                let mu = tensor::sum_f64(sl) / gsz as f64;
                let mut var = 0.0f64;
                for &v in sl {
                    let d = v as f64 - mu;
                    var += d * d;
                }
                var /= gsz as f64;
                let r = 1.0 / (var + 1e-5).sqrt();
                mean[bb * groups + gg] = mu;
                rstd[bb * groups + gg] = r;
                for ci in 0..cg {
                    let ch = gg * cg + ci;
                    let (gc, bc) = (g[ch], bt[ch]);
                    let off = start + ci * h * w;
                    for i in 0..h * w {
                        let xhat = ((xd[off + i] as f64 - mu) * r) as f32;
                        out[off + i] = gc * xhat + bc;
                    }
                }
            }
        }
        let value = Tensor::from_vec(&xs, out).unwrap();
        let wants = self.wants(x) || self.wants(gamma) || self.wants(beta);
        self.push(value, wants, None, Op::GroupNorm { x, gamma, beta, groups, mean, rstd })
    }

    /// Normalize over the last dim of [..., D].
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let d = *xs.last().unwrap();
        let rows = self.nodes[x.0].value.numel() / d;
        let xd = self.nodes[x.0].value.data();
        let g = self.nodes[gamma.0].value.data();
        let bt = self.nodes[beta.0].value.data();
        let mut mean = vec![0.0f64; rows];
        let mut rstd = vec![0.0f64; rows];
        let mut out = vec![0.0f32; xd.len()];
        for r in 0..rows {
            let sl = &xd[r * d..(r + 1) * d];
            let mu = tensor::sum_f64(sl) / d as f64;
            let mut var = 0.0f64;
            for &v in sl {
                let dd = v as f64 - mu;
                var += dd * dd;
            }
            var /= d as f64;
            let rs = 1.0 / (var + 1e-5).sqrt();
            mean[r] = mu;
            rstd[r] = rs;
            for i in 0..d {
                let xhat = ((sl[i] as f64 - mu) * rs) as f32;
                out[r * d + i] = g[i] * xhat + bt[i];
            }
        }
        let value = Tensor::from_vec(&xs, out).unwrap();
        let wants = self.wants(x) || self.wants(gamma) || self.wants(beta);
        self.push(value, wants, None, Op::LayerNorm { x, gamma, beta, mean, rstd })
    }

    /// table[V, D] rows gathered by ids -> [len(ids), D] (caller reshapes).
    pub fn embedding(&mut self, table: Var, ids: &[usize], out_shape: &[usize]) -> Var {
        let ts = self.nodes[table.0].value.shape().to_vec();
        assert_eq!(ts.len(), 2);
        let d = ts[1];
        assert_eq!(out_shape.iter().product::<usize>(), ids.len() * d);
        let td = self.nodes[table.0].value.data();
        let mut out = vec![0.0f32; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < ts[0], "embedding id {id} out of range {}", ts[0]);
            out[i * d..(i + 1) * d].copy_from_slice(&td[id * d..(id + 1) * d]);
        }
        let value = Tensor::from_vec(out_shape, out).unwrap();
        let wants = self.wants(table);
        self.push(value, wants, None, Op::Embedding { table, ids: ids.to_vec() })
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![0.0f32; bsz * c * 4 * h * w];
        for bc in 0..bsz * c {
            let src = &xd[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * 4 * h * w..(bc + 1) * 4 * h * w];
            for y in 0..h {
                for xx in 0..w {
                    let v = src[y * w + xx];
                    let o = 2 * y * 2 * w + 2 * xx;
                    dst[o] = v;
                    dst[o + 1] = v;
                    dst[o + 2 * w] = v;
                    dst[o + 2 * w + 1] = v;
                }
            }
        }
        let value = Tensor::from_vec(&[bsz, c, 2 * h, 2 * w], out).unwrap();
        let wants = self.wants(x);
        self.push(value, wants, None, Op::Upsample2x(x))
    }

    /// [B, 4C, H, W] -> [B, C, 2H, 2W] (sub-pixel upsample layout).
    pub fn depth_to_space2x(&mut self, x: Var) -> Var {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let (bsz, c4, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        assert_eq!(c4 % 4, 0);
        let c = c4 / 4;
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![0.0f32; xd.len()];
        for bb in 0..bsz {
            for ch in 0..c {
                for dy in 0..2usize {
                    for dx in 0..2usize {
                        let src_c = ch * 4 + dy * 2 + dx;
                        let src = &xd[(bb * c4 + src_c) * h * w..][..h * w];
                        let dst = &mut out[(bb * c + ch) * 4 * h * w..][..4 * h * w];
                        for y in 0..h {
                            for xx in 0..w {
                                dst[(2 * y + dy) * 2 * w + 2 * xx + dx] = src[y * w + xx];
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[bsz, c, 2 * h, 2 * w], out).unwrap();
        let wants = self.wants(x);
        self.push(value, wants, None, Op::DepthToSpace2x(x))
    }

    pub fn concat_chan(&mut self, a: Var, b: Var) -> Var {
        let sa = self.nodes[a.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape().to_vec();
        assert_eq!(sa[0], sb[0]);
        assert_eq!(sa[2..], sb[2..]);
        let (bsz, c1, c2, plane) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut out = vec![0.0f32; (c1 + c2) * bsz * plane];
        for bb in 0..bsz {
            out[bb * (c1 + c2) * plane..][..c1 * plane]
                .copy_from_slice(&ad[bb * c1 * plane..(bb + 1) * c1 * plane]);
            out[bb * (c1 + c2) * plane + c1 * plane..][..c2 * plane]
                .copy_from_slice(&bd[bb * c2 * plane..(bb + 1) * c2 * plane]);
        }
        let value = Tensor::from_vec(&[bsz, c1 + c2, sa[2], sa[3]], out).unwrap();
        let wants = self.wants(a) || self.wants(b);
        self.push(value, wants, None, Op::ConcatChan(a, b))
    }

    /// [B,N1,D] ++ [B,N2,D] along the token dim.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let sa = self.nodes[a.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape().to_vec();
        assert_eq!(sa.len(), 3);
        assert_eq!(sa[0], sb[0]);
        assert_eq!(sa[2], sb[2]);
        let (bsz, n1, n2, d) = (sa[0], sa[1], sb[1], sa[2]);
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut out = vec![0.0f32; bsz * (n1 + n2) * d];
        for bb in 0..bsz {
            out[bb * (n1 + n2) * d..][..n1 * d].copy_from_slice(&ad[bb * n1 * d..(bb + 1) * n1 * d]);
            out[bb * (n1 + n2) * d + n1 * d..][..n2 * d]
                .copy_from_slice(&bd[bb * n2 * d..(bb + 1) * n2 * d]);
        }
        let value = Tensor::from_vec(&[bsz, n1 + n2, d], out).unwrap();
        let wants = self.wants(a) || self.wants(b);
        self.push(value, wants, None, Op::ConcatRows(a, b))
    }

    /// [B,C,H,W] -> [B, H*W, C]
    pub fn nchw_to_tokens(&mut self, x: Var) -> Var {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let plane = h * w;
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![0.0f32; xd.len()];
        for bb in 0..bsz {
            for ch in 0..c {
                for p in 0..plane {
                    out[bb * plane * c + p * c + ch] = xd[bb * c * plane + ch * plane + p];
                }
            }
        }
        let value = Tensor::from_vec(&[bsz, plane, c], out).unwrap();
        let wants = self.wants(x);
        self.push(value, wants, None, Op::NchwToTokens(x))
    }

    /// [B, H*W, C] -> [B,C,H,W]
    pub fn tokens_to_nchw(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let (bsz, n, c) = (xs[0], xs[1], xs[2]);
        assert_eq!(n, h * w);
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![0.0f32; xd.len()];
        for bb in 0..bsz {
            for ch in 0..c {
                for p in 0..n {
                    out[bb * c * n + ch * n + p] = xd[bb * n * c + p * c + ch];
                }
            }
        }
        let value = Tensor::from_vec(&[bsz, c, h, w], out).unwrap();
        let wants = self.wants(x);
        self.push(value, wants, None, Op::TokensToNchw { x, h, w })
    }

    /// x[B,C,H,W] + t[B,C] broadcast over the spatial plane.
    pub fn add_chan_broadcast(&mut self, x: Var, t: Var) -> Var {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let ts = self.nodes[t.0].value.shape().to_vec();
        assert_eq!(ts, vec![xs[0], xs[1]]);
        let plane = xs[2] * xs[3];
        let xd = self.nodes[x.0].value.data();
        let td = self.nodes[t.0].value.data();
        let mut out = xd.to_vec();
        for bc in 0..xs[0] * xs[1] {
            let add = td[bc];
            for v in out[bc * plane..(bc + 1) * plane].iter_mut() {
                *v += add;
            }
        }
        let value = Tensor::from_vec(&xs, out).unwrap();
        let wants = self.wants(x) || self.wants(t);
        self.push(value, wants, None, Op::AddChanBroadcast { x, t })
    }

    /// Multi-head scaled-dot attention; columns >= cross_start of the key set
    /// carry the log(w) bias (exact masking at w = 0). q [B,N,D], k/v [B,M,D].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, cross_start: usize, w: f64) -> Var {
        let b = self.nodes[q.0].value.shape()[0];
        self.attention_batchw(q, k, v, heads, cross_start, &vec![w; b])
    }

    /// Attention with one cross-domain weight per batch example.
    pub fn attention_batchw(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        cross_start: usize,
        w: &[f64],
    ) -> Var {
        let qs = self.nodes[q.0].value.shape().to_vec();
        let ks = self.nodes[k.0].value.shape().to_vec();
        let (bsz, n, d) = (qs[0], qs[1], qs[2]);
        let m = ks[1];
        assert_eq!(ks, vec![bsz, m, d]);
        assert_eq!(self.nodes[v.0].value.shape(), &[bsz, m, d]);
        assert_eq!(d % heads, 0);
        assert!(cross_start <= m);
        assert_eq!(w.len(), bsz);
        let dh = d / heads;
        let qd = self.nodes[q.0].value.data();
        let kd = self.nodes[k.0].value.data();
        let vd = self.nodes[v.0].value.data();
        let mut out = vec![0.0f32; bsz * n * d];
        let mut probs = vec![0.0f32; bsz * heads * n * m];

        {
            let shard = |out_b: &mut [f32], probs_b: &mut [f32], bb: usize| {
                let mut qh = vec![0.0f32; n * dh];
                let mut kh = vec![0.0f32; m * dh];
                let mut vh = vec![0.0f32; m * dh];
                let mut oh = vec![0.0f32; n * dh];
                for hh in 0..heads {
                    gather_head(&qd[bb * n * d..], n, d, hh, dh, &mut qh);
                    gather_head(&kd[bb * m * d..], m, d, hh, dh, &mut kh);
                    gather_head(&vd[bb * m * d..], m, d, hh, dh, &mut vh);
                    let p = &mut probs_b[hh * n * m..(hh + 1) * n * m];
                    xattn::attn_core(&qh, n, dh, &kh, m, &vh, dh, cross_start, w[bb], &mut oh, p);
                    scatter_head(&oh, n, d, hh, dh, out_b);
                }
            };
            // deterministic batch-parallel: each sample's math is sequential
            let t = tensor::threads().min(bsz);
            let per = bsz.div_ceil(t.max(1)).max(1);
            std::thread::scope(|scope| {
                let shard = &shard;
                for (ci, (out_c, probs_c)) in out
                    .chunks_mut(per * n * d)
                    .zip(probs.chunks_mut(per * heads * n * m))
                    .enumerate()
                {
                    scope.spawn(move || {
                        for (i, (ob, pb)) in out_c
                            .chunks_mut(n * d)
                            .zip(probs_c.chunks_mut(heads * n * m))
                            .enumerate()
                        {
                            shard(ob, pb, ci * per + i);
                        }
                    });
                }
            });
        }

        let value = Tensor::from_vec(&[bsz, n, d], out).unwrap();
        let wants = self.wants(q) || self.wants(k) || self.wants(v);
        self.push(
            value,
            wants,
            None,
            Op::Attention { q, k, v, heads, cross_start, w: w.to_vec(), probs },
        )
    }

    /// Saved softmax rows [B, heads, N, M] of an attention output var.
    pub fn attention_probs(&self, v: Var) -> Option<&[f32]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean squared error; with a mask: sum(mask*(p-t)^2)/sum(mask).
    pub fn mse(&mut self, pred: Var, target: Tensor, mask: Option<Tensor>) -> Var {
        let p = self.nodes[pred.0].value.data();
        assert_eq!(p.len(), target.numel());
        let denom = match &mask {
            Some(m) => {
                assert_eq!(m.numel(), p.len());
                let d = tensor::sum_f64(m.data());
                if d == 0.0 {
                    1.0
                } else {
                    d
                }
            }
            None => p.len() as f64,
        };
        let mut acc = 0.0f64;
        for i in 0..p.len() {
            let d = (p[i] - target.data()[i]) as f64;
            let w = mask.as_ref().map(|m| m.data()[i] as f64).unwrap_or(1.0);
            acc += w * d * d;
        }
        let value = Tensor::scalar((acc / denom) as f32);
        let wants = self.wants(pred);
        self.push(value, wants, None, Op::MseLoss { pred, target, mask, denom })
    }

    /// 0.5 * mean(mu^2 + exp(logvar) - 1 - logvar)
    pub fn kl_normal(&mut self, mu: Var, logvar: Var) -> Var {
        let m = self.nodes[mu.0].value.data();
        let lv = self.nodes[logvar.0].value.data();
        assert_eq!(m.len(), lv.len());
        let mut acc = 0.0f64;
        for i in 0..m.len() {
            let mu2 = (m[i] as f64) * (m[i] as f64);
            acc += 0.5 * (mu2 + (lv[i] as f64).exp() - 1.0 - lv[i] as f64);
        }
        let value = Tensor::scalar((acc / m.len() as f64) as f32);
        let wants = self.wants(mu) || self.wants(logvar);
        self.push(value, wants, None, Op::KlNormal { mu, logvar })
    }

    /// Reverse sweep from a scalar loss; trainable parameter gradients are
    /// accumulated into the store.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) {
        assert_eq!(self.nodes[loss.0].value.numel(), 1, "backward needs a scalar loss");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..n).rev() {
            if grads[i].is_none() || !self.nodes[i].wants_grad {
                continue;
            }
            let gout = grads[i].take().unwrap();
            self.backward_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(pid), Some(g)) = (node.param, &grads[i]) {
                if store.trainable(pid) {
                    tensor::add_assign(store.grad[pid.0].data_mut(), g.data());
                }
            }
        }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, delta: &[f32]) {
        if !self.nodes[v.0].wants_grad {
            return;
        }
        let g = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        tensor::add_assign(g.data_mut(), delta);
    }

    #[allow(clippy::too_many_lines)]
    fn backward_node(&self, i: usize, gout: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let g = gout.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g);
                self.accum(grads, *b, g);
            }
            Op::Scale(a, c) => {
                let d: Vec<f32> = g.iter().map(|x| x * c).collect();
                self.accum(grads, *a, &d);
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bd = self.nodes[b.0].value.data();
                    let d: Vec<f32> = g.iter().zip(bd.iter()).map(|(x, y)| x * y).collect();
                    self.accum(grads, *a, &d);
                }
                if self.wants(*b) {
                    let ad = self.nodes[a.0].value.data();
                    let d: Vec<f32> = g.iter().zip(ad.iter()).map(|(x, y)| x * y).collect();
                    self.accum(grads, *b, &d);
                }
            }
            Op::Exp(a) => {
                let y = self.nodes[i].value.data();
                let d: Vec<f32> = g.iter().zip(y.iter()).map(|(x, y)| x * y).collect();
                self.accum(grads, *a, &d);
            }
            Op::Silu(a) => {
                let x = self.nodes[a.0].value.data();
                let d: Vec<f32> = g
                    .iter()
                    .zip(x.iter())
                    .map(|(gg, &xx)| {
                        let s = 1.0 / (1.0 + (-xx).exp());
                        gg * s * (1.0 + xx * (1.0 - s))
                    })
                    .collect();
                self.accum(grads, *a, &d);
            }
            Op::Tanh(a) => {
                let y = self.nodes[i].value.data();
                let d: Vec<f32> = g.iter().zip(y.iter()).map(|(gg, &yy)| gg * (1.0 - yy * yy)).collect();
                self.accum(grads, *a, &d);
            }
            Op::MatMul(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (m, k, nn) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let mut da = vec![0.0f32; m * k];
                    tensor::gemm_nt(m, nn, k, g, self.nodes[b.0].value.data(), &mut da);
                    self.accum(grads, *a, &da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0f32; k * nn];
                    tensor::gemm_tn(k, m, nn, self.nodes[a.0].value.data(), g, &mut db);
                    self.accum(grads, *b, &db);
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.nodes[x.0].value.shape();
                let ws = self.nodes[w.0].value.shape();
                let din = ws[1];
                let dout = ws[0];
                let rows = xs.iter().product::<usize>() / din;
                if self.wants(*x) {
                    let mut dx = vec![0.0f32; rows * din];
                    tensor::gemm_nn(rows, dout, din, g, self.nodes[w.0].value.data(), &mut dx);
                    self.accum(grads, *x, &dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0f32; dout * din];
                    tensor::gemm_tn(dout, rows, din, g, self.nodes[x.0].value.data(), &mut dw);
                    self.accum(grads, *w, &dw);
                }
                if let Some(bv) = b {
                    if self.wants(*bv) {
                        let mut db = vec![0.0f32; dout];
                        for r in 0..rows {
                            for (dbv, gg) in db.iter_mut().zip(g[r * dout..(r + 1) * dout].iter()) {
                                *dbv += gg;
                            }
                        }
                        self.accum(grads, *bv, &db);
                    }
                }
            }
            Op::Conv2d { x, w, b, stride, pad, cols } => {
                let xs = self.nodes[x.0].value.shape();
                let ws = self.nodes[w.0].value.shape();
                let (bsz, c, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                let ho = (h + 2 * pad - kh) / stride + 1;
                let wo = (wdt + 2 * pad - kw) / stride + 1;
                let plane = ho * wo;
                let ck2 = c * kh * kw;
                // [B,O,ho,wo] -> [O, B*plane]
                let mut g_mat = vec![0.0f32; o * bsz * plane];
                for bb in 0..bsz {
                    for ob in 0..o {
                        let src = &g[bb * o * plane + ob * plane..][..plane];
                        g_mat[ob * bsz * plane + bb * plane..][..plane].copy_from_slice(src);
                    }
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0f32; o * ck2];
                    tensor::gemm_nt(o, bsz * plane, ck2, &g_mat, cols, &mut dw);
                    self.accum(grads, *w, &dw);
                }
                if let Some(bv) = b {
                    if self.wants(*bv) {
                        let mut db = vec![0.0f32; o];
                        for ob in 0..o {
                            db[ob] =
                                tensor::sum_f64(&g_mat[ob * bsz * plane..(ob + 1) * bsz * plane]) as f32;
                        }
                        self.accum(grads, *bv, &db);
                    }
                }
                if self.wants(*x) {
                    let mut dcols = vec![0.0f32; ck2 * bsz * plane];
                    tensor::gemm_tn(ck2, o, bsz * plane, self.nodes[w.0].value.data(), &g_mat, &mut dcols);
                    let dx = col2im(&dcols, bsz, c, h, wdt, kh, kw, *stride, *pad, ho, wo);
                    self.accum(grads, *x, &dx);
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, mean, rstd } => {
                let groups = *groups;
                let xs = self.nodes[x.0].value.shape();
                let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let cg = c / groups;
                let gsz = cg * h * w;
                let xd = self.nodes[x.0].value.data();
                let gam = self.nodes[gamma.0].value.data();
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                let mut dx = vec![0.0f32; xd.len()];
                for bb in 0..bsz {
                    for gg in 0..groups {
                        let start = bb * c * h * w + gg * gsz;
                        let mu = mean[bb * groups + gg];
                        let r = rstd[bb * groups + gg];
                        // first pass: means of dxhat and dxhat*xhat
                        let mut s1 = 0.0f64;
                        let mut s2 = 0.0f64;
                        for ci in 0..cg {
                            let ch = gg * cg + ci;
                            let off = start + ci * h * w;
                            for ii in 0..h * w {
                                let xhat = (xd[off + ii] as f64 - mu) * r;
                                let dxh = g[off + ii] as f64 * gam[ch] as f64;
                                s1 += dxh;
                                s2 += dxh * xhat;
                            }
                        }
                        s1 /= gsz as f64;
                        s2 /= gsz as f64;
                        for ci in 0..cg {
                            let ch = gg * cg + ci;
                            let off = start + ci * h * w;
                            for ii in 0..h * w {
                                let xhat = (xd[off + ii] as f64 - mu) * r;
                                let dxh = g[off + ii] as f64 * gam[ch] as f64;
                                dx[off + ii] = (r * (dxh - s1 - xhat * s2)) as f32;
                                dgamma[ch] += (g[off + ii] as f64 * xhat) as f32;
                                dbeta[ch] += g[off + ii];
                            }
                        }
                    }
                }
                self.accum(grads, *x, &dx);
                self.accum(grads, *gamma, &dgamma);
                self.accum(grads, *beta, &dbeta);
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let xs = self.nodes[x.0].value.shape();
                let d = *xs.last().unwrap();
                let rows = xs.iter().product::<usize>() / d;
                let xd = self.nodes[x.0].value.data();
                let gam = self.nodes[gamma.0].value.data();
                let mut dgamma = vec![0.0f32; d];
                let mut dbeta = vec![0.0f32; d];
                let mut dx = vec![0.0f32; xd.len()];
                for r in 0..rows {
                    let mu = mean[r];
                    let rs = rstd[r];
                    let mut s1 = 0.0f64;
                    let mut s2 = 0.0f64;
                    for ii in 0..d {
                        let xhat = (xd[r * d + ii] as f64 - mu) * rs;
                        let dxh = g[r * d + ii] as f64 * gam[ii] as f64;
                        s1 += dxh;
                        s2 += dxh * xhat;
                    }
                    s1 /= d as f64;
                    s2 /= d as f64;
                    for ii in 0..d {
                        let xhat = (xd[r * d + ii] as f64 - mu) * rs;
                        let dxh = g[r * d + ii] as f64 * gam[ii] as f64;
                        dx[r * d + ii] = (rs * (dxh - s1 - xhat * s2)) as f32;
                        dgamma[ii] += (g[r * d + ii] as f64 * xhat) as f32;
                        dbeta[ii] += g[r * d + ii];
                    }
                }
                self.accum(grads, *x, &dx);
                self.accum(grads, *gamma, &dgamma);
                self.accum(grads, *beta, &dbeta);
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let ts = self.nodes[table.0].value.shape();
                    let d = ts[1];
                    let mut dt = vec![0.0f32; ts[0] * d];
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, gg) in dt[id * d..(id + 1) * d].iter_mut().zip(g[i * d..(i + 1) * d].iter())
                        {
                            *o += gg;
                        }
                    }
                    self.accum(grads, *table, &dt);
                }
            }
            Op::Upsample2x(x) => {
                let xs = self.nodes[x.0].value.shape();
                let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let mut dx = vec![0.0f32; bsz * c * h * w];
                for bc in 0..bsz * c {
                    let src = &g[bc * 4 * h * w..(bc + 1) * 4 * h * w];
                    let dst = &mut dx[bc * h * w..(bc + 1) * h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            let o = 2 * y * 2 * w + 2 * xx;
                            dst[y * w + xx] =
                                src[o] + src[o + 1] + src[o + 2 * w] + src[o + 2 * w + 1];
                        }
                    }
                }
                self.accum(grads, *x, &dx);
            }
            Op::DepthToSpace2x(x) => {
                let xs = self.nodes[x.0].value.shape();
                let (bsz, c4, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let c = c4 / 4;
                let mut dx = vec![0.0f32; g.len()];
                for bb in 0..bsz {
                    for ch in 0..c {
                        for dy in 0..2usize {
                            for dxx in 0..2usize {
                                let src_c = ch * 4 + dy * 2 + dxx;
                                let dst = &mut dx[(bb * c4 + src_c) * h * w..][..h * w];
                                let src = &g[(bb * c + ch) * 4 * h * w..][..4 * h * w];
                                for y in 0..h {
                                    for xx in 0..w {
                                        dst[y * w + xx] = src[(2 * y + dy) * 2 * w + 2 * xx + dxx];
                                    }
                                }
                            }
                        }
                    }
                }
                self.accum(grads, *x, &dx);
            }
            Op::ConcatChan(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (bsz, c1, c2, plane) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                if self.wants(*a) {
                    let mut da = vec![0.0f32; bsz * c1 * plane];
                    for bb in 0..bsz {
                        da[bb * c1 * plane..(bb + 1) * c1 * plane]
                            .copy_from_slice(&g[bb * (c1 + c2) * plane..][..c1 * plane]);
                    }
                    self.accum(grads, *a, &da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0f32; bsz * c2 * plane];
                    for bb in 0..bsz {
                        db[bb * c2 * plane..(bb + 1) * c2 * plane]
                            .copy_from_slice(&g[bb * (c1 + c2) * plane + c1 * plane..][..c2 * plane]);
                    }
                    self.accum(grads, *b, &db);
                }
            }
            Op::ConcatRows(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (bsz, n1, n2, d) = (sa[0], sa[1], sb[1], sa[2]);
                if self.wants(*a) {
                    let mut da = vec![0.0f32; bsz * n1 * d];
                    for bb in 0..bsz {
                        da[bb * n1 * d..(bb + 1) * n1 * d]
                            .copy_from_slice(&g[bb * (n1 + n2) * d..][..n1 * d]);
                    }
                    self.accum(grads, *a, &da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0f32; bsz * n2 * d];
                    for bb in 0..bsz {
                        db[bb * n2 * d..(bb + 1) * n2 * d]
                            .copy_from_slice(&g[bb * (n1 + n2) * d + n1 * d..][..n2 * d]);
                    }
                    self.accum(grads, *b, &db);
                }
            }
            Op::NchwToTokens(x) => {
                let xs = self.nodes[x.0].value.shape();
                let (bsz, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                let mut dx = vec![0.0f32; g.len()];
                for bb in 0..bsz {
                    for ch in 0..c {
                        for p in 0..plane {
                            dx[bb * c * plane + ch * plane + p] = g[bb * plane * c + p * c + ch];
                        }
                    }
                }
                self.accum(grads, *x, &dx);
            }
            Op::TokensToNchw { x, h, w } => {
                let xs = self.nodes[x.0].value.shape();
                let (bsz, n, c) = (xs[0], xs[1], xs[2]);
                debug_assert_eq!(n, h * w);
                let mut dx = vec![0.0f32; g.len()];
                for bb in 0..bsz {
                    for ch in 0..c {
                        for p in 0..n {
                            dx[bb * n * c + p * c + ch] = g[bb * c * n + ch * n + p];
                        }
                    }
                }
                self.accum(grads, *x, &dx);
            }
            Op::AddChanBroadcast { x, t } => {
                let xs = self.nodes[x.0].value.shape();
                let plane = xs[2] * xs[3];
                self.accum(grads, *x, g);
                if self.wants(*t) {
                    let mut dt = vec![0.0f32; xs[0] * xs[1]];
                    for bc in 0..xs[0] * xs[1] {
                        dt[bc] = tensor::sum_f64(&g[bc * plane..(bc + 1) * plane]) as f32;
                    }
                    self.accum(grads, *t, &dt);
                }
            }
            Op::Attention { q, k, v, heads, cross_start, w, probs } => {
                let qs = self.nodes[q.0].value.shape();
                let ks = self.nodes[k.0].value.shape();
                let (bsz, n, d) = (qs[0], qs[1], qs[2]);
                let m = ks[1];
                let dh = d / heads;
                let qd = self.nodes[q.0].value.data();
                let kd = self.nodes[k.0].value.data();
                let vd = self.nodes[v.0].value.data();
                let mut dq = vec![0.0f32; bsz * n * d];
                let mut dk = vec![0.0f32; bsz * m * d];
                let mut dv = vec![0.0f32; bsz * m * d];
                {
                    let t = tensor::threads().min(bsz);
                    let per = bsz.div_ceil(t.max(1)).max(1);
                    std::thread::scope(|scope| {
                        let (qd, kd, vd, probs, g) = (&qd, &kd, &vd, &probs, &g);
                        for (ci, ((dq_c, dk_c), dv_c)) in dq
                            .chunks_mut(per * n * d)
                            .zip(dk.chunks_mut(per * m * d))
                            .zip(dv.chunks_mut(per * m * d))
                            .enumerate()
                        {
                            let heads = *heads;
                            let cross_start = *cross_start;
                            let w = &w[..];
                            scope.spawn(move || {
                                let mut qh = vec![0.0f32; n * dh];
                                let mut kh = vec![0.0f32; m * dh];
                                let mut vh = vec![0.0f32; m * dh];
                                let mut goh = vec![0.0f32; n * dh];
                                let mut dqh = vec![0.0f32; n * dh];
                                let mut dkh = vec![0.0f32; m * dh];
                                let mut dvh = vec![0.0f32; m * dh];
                                for (ib, ((dq_b, dk_b), dv_b)) in dq_c
                                    .chunks_mut(n * d)
                                    .zip(dk_c.chunks_mut(m * d))
                                    .zip(dv_c.chunks_mut(m * d))
                                    .enumerate()
                                {
                                    let bb = ci * per + ib;
                                    for hh in 0..heads {
                                        gather_head(&qd[bb * n * d..], n, d, hh, dh, &mut qh);
                                        gather_head(&kd[bb * m * d..], m, d, hh, dh, &mut kh);
                                        gather_head(&vd[bb * m * d..], m, d, hh, dh, &mut vh);
                                        gather_head(&g[bb * n * d..], n, d, hh, dh, &mut goh);
                                        dqh.fill(0.0);
                                        dkh.fill(0.0);
                                        dvh.fill(0.0);
                                        let p = &probs[(bb * heads + hh) * n * m..][..n * m];
                                        xattn::attn_core_backward(
                                            &qh, n, dh, &kh, m, &vh, dh, cross_start, w[bb], p,
                                            &goh, &mut dqh, &mut dkh, &mut dvh,
                                        );
                                        scatter_head(&dqh, n, d, hh, dh, dq_b);
                                        scatter_head(&dkh, m, d, hh, dh, dk_b);
                                        scatter_head(&dvh, m, d, hh, dh, dv_b);
                                    }
                                }
                            });
                        }
                    });
                }
                self.accum(grads, *q, &dq);
                self.accum(grads, *k, &dk);
                self.accum(grads, *v, &dv);
            }
            Op::MseLoss { pred, target, mask, denom } => {
                let p = self.nodes[pred.0].value.data();
                let gscale = g[0] as f64 * 2.0 / denom;
                let d: Vec<f32> = (0..p.len())
                    .map(|ii| {
                        let w = mask.as_ref().map(|m| m.data()[ii] as f64).unwrap_or(1.0);
                        (gscale * w * (p[ii] - target.data()[ii]) as f64) as f32
                    })
                    .collect();
                self.accum(grads, *pred, &d);
            }
            Op::KlNormal { mu, logvar } => {
                let m = self.nodes[mu.0].value.data();
                let lv = self.nodes[logvar.0].value.data();
                let gscale = g[0] as f64 / m.len() as f64;
                if self.wants(*mu) {
                    let d: Vec<f32> = m.iter().map(|&x| (gscale * x as f64) as f32).collect();
                    self.accum(grads, *mu, &d);
                }
                if self.wants(*logvar) {
                    let d: Vec<f32> = lv
                        .iter()
                        .map(|&x| (gscale * 0.5 * ((x as f64).exp() - 1.0)) as f32)
                        .collect();
                    self.accum(grads, *logvar, &d);
                }
            }
        }
    }
}

fn gather_head(src: &[f32], rows: usize, d: usize, head: usize, dh: usize, dst: &mut [f32]) {
    for r in 0..rows {
        dst[r * dh..(r + 1) * dh].copy_from_slice(&src[r * d + head * dh..r * d + (head + 1) * dh]);
    }
}

fn scatter_head(src: &[f32], rows: usize, d: usize, head: usize, dh: usize, dst: &mut [f32]) {
    for r in 0..rows {
        dst[r * d + head * dh..r * d + (head + 1) * dh].copy_from_slice(&src[r * dh..(r + 1) * dh]);
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    bsz: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f32> {
    let ck2 = c * kh * kw;
    let cols_w = bsz * ho * wo;
    let mut cols = vec![0.0f32; ck2 * cols_w];
    for bb in 0..bsz {
        for ch in 0..c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = ch * kh * kw + ky * kw + kx;
                    for oy in 0..ho {
                        let iy = oy * stride + ky;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        let iy = iy - pad;
                        let dst_base = row * cols_w + bb * ho * wo + oy * wo;
                        let src_base = bb * c * h * w + ch * h * w + iy * w;
                        for ox in 0..wo {
                            let ix = ox * stride + kx;
                            if ix < pad || ix >= w + pad {
                                continue;
                            }
                            cols[dst_base + ox] = x[src_base + ix - pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &[f32],
    bsz: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f32> {
    let cols_w = bsz * ho * wo;
    let mut dx = vec![0.0f32; bsz * c * h * w];
    for bb in 0..bsz {
        for ch in 0..c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = ch * kh * kw + ky * kw + kx;
                    for oy in 0..ho {
                        let iy = oy * stride + ky;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        let iy = iy - pad;
                        let src_base = row * cols_w + bb * ho * wo + oy * wo;
                        let dst_base = bb * c * h * w + ch * h * w + iy * w;
                        for ox in 0..wo {
                            let ix = ox * stride + kx;
                            if ix < pad || ix >= w + pad {
                                continue;
                            }
                            dx[dst_base + ix - pad] += dcols[src_base + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// He-style normal init for a [fan_out, fan_in...] weight.
pub fn init_weight(shape: &[usize], rng: &mut Rng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in as f64).sqrt() * 0.5;
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = (rng.normal() * std) as f32;
    }
    t
}
