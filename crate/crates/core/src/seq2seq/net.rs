//! Forward and backward passes, generic over the scalar type.

use crate::corpus::{BOS, EOS};
use crate::tensor::{axpy, dot, matvec_acc, outer_acc, sigmoid, softmax_in_place, vecmat_acc, Real};

use super::weights::{EncoderMode, Gru, Weights};

pub(crate) struct GruCache<T> {
    x: Vec<T>,
    h: Vec<T>,
    r: Vec<T>,
    z: Vec<T>,
    n: Vec<T>,
    ahn: Vec<T>,
}

pub(crate) fn gru_step<T: Real>(g: &Gru<T>, x: &[T], h: &[T]) -> (Vec<T>, GruCache<T>) {
    let d = h.len();
    let mut ax = g.bx.data().to_vec();
    vecmat_acc(&mut ax, x, g.wx.data());
    let mut ah = g.bh.data().to_vec();
    vecmat_acc(&mut ah, h, g.wh.data());

    let mut r = vec![T::zero(); d];
    let mut z = vec![T::zero(); d];
    let mut n = vec![T::zero(); d];
    let mut out = vec![T::zero(); d];
    for k in 0..d {
        r[k] = sigmoid(ax[k] + ah[k]);
        z[k] = sigmoid(ax[d + k] + ah[d + k]);
        n[k] = (ax[2 * d + k] + r[k] * ah[2 * d + k]).tanh();
        out[k] = (T::one() - z[k]) * n[k] + z[k] * h[k];
    }
    let cache = GruCache {
        x: x.to_vec(),
        h: h.to_vec(),
        r,
        z,
        n,
        ahn: ah[2 * d..].to_vec(),
    };
    (out, cache)
}

/// Accumulates parameter gradients into `grad`; returns `(dx, dh_prev)`.
pub(crate) fn gru_backward<T: Real>(
    g: &Gru<T>,
    grad: &mut Gru<T>,
    c: &GruCache<T>,
    dout: &[T],
) -> (Vec<T>, Vec<T>) {
    let d = dout.len();
    let one = T::one();
    let mut dax = vec![T::zero(); 3 * d];
    let mut dah = vec![T::zero(); 3 * d];
    let mut dh = vec![T::zero(); d];
    for k in 0..d {
        let dn = dout[k] * (one - c.z[k]);
        let dz = dout[k] * (c.h[k] - c.n[k]);
        dh[k] = dout[k] * c.z[k];
        let dan = dn * (one - c.n[k] * c.n[k]);
        let dr = dan * c.ahn[k];
        let dar = dr * c.r[k] * (one - c.r[k]);
        let daz = dz * c.z[k] * (one - c.z[k]);
        dax[k] = dar;
        dax[d + k] = daz;
        dax[2 * d + k] = dan;
        dah[k] = dar;
        dah[d + k] = daz;
        dah[2 * d + k] = dan * c.r[k];
    }
    outer_acc(grad.wx.data_mut(), &c.x, &dax);
    axpy(grad.bx.data_mut(), one, &dax);
    outer_acc(grad.wh.data_mut(), &c.h, &dah);
    axpy(grad.bh.data_mut(), one, &dah);
    let mut dx = vec![T::zero(); c.x.len()];
    matvec_acc(&mut dx, g.wx.data(), &dax);
    matvec_acc(&mut dh, g.wh.data(), &dah);
    (dx, dh)
}

/// Encoder output rows plus the attention keys of every decoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Memory<T> {
    pub(crate) d: usize,
    pub(crate) rows: Vec<T>,
    pub(crate) keys: Vec<Vec<T>>,
}

impl<T: Real> Memory<T> {
    pub(crate) fn new(d: usize, n_dec_layers: usize) -> Self {
        Memory {
            d,
            rows: Vec::new(),
            keys: vec![Vec::new(); n_dec_layers],
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, j: usize) -> &[T] {
        &self.rows[j * self.d..(j + 1) * self.d]
    }

    fn key(&self, layer: usize, j: usize) -> &[T] {
        &self.keys[layer][j * self.d..(j + 1) * self.d]
    }

    /// Appends one encoder output row and derives its keys.
    pub(crate) fn push_row(&mut self, w: &Weights<T>, row: &[T]) {
        self.rows.extend_from_slice(row);
        for (layer, keys) in w.dec.iter().zip(self.keys.iter_mut()) {
            let mut k = vec![T::zero(); self.d];
            vecmat_acc(&mut k, row, layer.wk.data());
            keys.extend_from_slice(&k);
        }
    }
}

fn add<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

/// Running state of a causal encoder: one carry per layer.
#[derive(Debug, Clone)]
pub(crate) struct CausalCarry<T> {
    carry: Vec<Vec<T>>,
}

impl<T: Real> CausalCarry<T> {
    pub(crate) fn new(n_layers: usize, d: usize) -> Self {
        CausalCarry {
            carry: vec![vec![T::zero(); d]; n_layers],
        }
    }

    /// Encodes one more source token; returns the top-layer output row.
    pub(crate) fn push(&mut self, w: &Weights<T>, token: u32) -> Vec<T> {
        let mut u = w.src_emb.row(token as usize).to_vec();
        for (layer, carry) in w.enc.iter().zip(self.carry.iter_mut()) {
            let (h, _) = gru_step(&layer.fwd, &u, carry);
            u = add(&u, &h);
            *carry = h;
        }
        u
    }
}

pub(crate) struct EncoderTape<T> {
    /// Per layer, per position caches for each direction.
    fwd: Vec<Vec<GruCache<T>>>,
    bwd: Vec<Vec<GruCache<T>>>,
}

/// Batch encoder. Causal mode runs the same per-token steps as
/// [`CausalCarry::push`], so both paths agree bit for bit.
pub(crate) fn encode_rows<T: Real>(
    w: &Weights<T>,
    mode: EncoderMode,
    source: &[u32],
    keep_tape: bool,
) -> (Vec<Vec<T>>, Option<EncoderTape<T>>) {
    let d = w.src_emb.cols();
    let n = source.len();
    let mut u: Vec<Vec<T>> = source.iter().map(|&t| w.src_emb.row(t as usize).to_vec()).collect();
    let mut tape = EncoderTape {
        fwd: Vec::new(),
        bwd: Vec::new(),
    };
    for layer in &w.enc {
        let mut hf = Vec::with_capacity(n);
        let mut fc = Vec::with_capacity(n);
        let mut carry = vec![T::zero(); d];
        for uj in &u {
            let (h, c) = gru_step(&layer.fwd, uj, &carry);
            carry.clone_from(&h);
            hf.push(h);
            if keep_tape {
                fc.push(c);
            }
        }
        let mut out: Vec<Vec<T>> = u.iter().zip(&hf).map(|(a, b)| add(a, b)).collect();
        let mut bc = Vec::new();
        if mode == EncoderMode::Full {
            let b = layer.bwd.as_ref().expect("full-mode model without backward cells");
            let mut carry = vec![T::zero(); d];
            let mut hb = vec![Vec::new(); n];
            let mut caches: Vec<Option<GruCache<T>>> = (0..n).map(|_| None).collect();
            for j in (0..n).rev() {
                let (h, c) = gru_step(b, &u[j], &carry);
                carry.clone_from(&h);
                hb[j] = h;
                if keep_tape {
                    caches[j] = Some(c);
                }
            }
            for (o, h) in out.iter_mut().zip(&hb) {
                *o = add(o, h);
            }
            if keep_tape {
                bc = caches.into_iter().map(|c| c.unwrap()).collect();
            }
        }
        tape.fwd.push(fc);
        tape.bwd.push(bc);
        u = out;
    }
    (u, keep_tape.then_some(tape))
}

/// Backpropagates `d_out` (gradient w.r.t. top-layer encoder rows).
pub(crate) fn encode_backward<T: Real>(
    w: &Weights<T>,
    grad: &mut Weights<T>,
    source: &[u32],
    tape: &EncoderTape<T>,
    mut d_out: Vec<Vec<T>>,
) {
    let n = source.len();
    let d = w.src_emb.cols();
    for l in (0..w.enc.len()).rev() {
        // out = u + hf (+ hb)
        let mut du = d_out.clone();
        let mut carry = vec![T::zero(); d];
        for j in (0..n).rev() {
            let dh = add(&d_out[j], &carry);
            let (dx, dprev) = gru_backward(&w.enc[l].fwd, &mut grad.enc[l].fwd, &tape.fwd[l][j], &dh);
            axpy(&mut du[j], T::one(), &dx);
            carry = dprev;
        }
        if let Some(b) = &w.enc[l].bwd {
            let gb = grad.enc[l].bwd.as_mut().expect("gradient layout mismatch");
            let mut carry = vec![T::zero(); d];
            for j in 0..n {
                let dh = add(&d_out[j], &carry);
                let (dx, dprev) = gru_backward(b, gb, &tape.bwd[l][j], &dh);
                axpy(&mut du[j], T::one(), &dx);
                carry = dprev;
            }
        }
        d_out = du;
    }
    for (j, &t) in source.iter().enumerate() {
        axpy(grad.src_emb.row_mut(t as usize), T::one(), &d_out[j]);
    }
}

/// Per-layer decoder states `s^l`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState<T = f32> {
    pub(crate) layers: Vec<Vec<T>>,
}

impl<T: Real> DecoderState<T> {
    pub(crate) fn initial(w: &Weights<T>) -> Self {
        DecoderState {
            layers: w.dec.iter().map(|l| l.init.data().to_vec()).collect(),
        }
    }

    /// State of the last decoder layer, the `s_i` the policy looks at.
    pub fn top(&self) -> &[T] {
        self.layers.last().expect("at least one decoder layer")
    }
}

pub(crate) struct StepCache<T> {
    layers: Vec<LayerCache<T>>,
    /// `[s_top ; c_top]`, the output layer input.
    z: Vec<T>,
}

struct LayerCache<T> {
    s_prev: Vec<T>,
    q: Vec<T>,
    alpha: Vec<T>,
    gru: GruCache<T>,
}

pub(crate) struct StepOutput<T> {
    pub state: DecoderState<T>,
    pub attention: Vec<T>,
    pub logits: Vec<T>,
    pub cache: StepCache<T>,
}

/// One decoder step attending over the first `visible` memory rows only.
pub(crate) fn decoder_step<T: Real>(
    w: &Weights<T>,
    mem: &Memory<T>,
    visible: usize,
    y_prev: u32,
    state: &DecoderState<T>,
) -> StepOutput<T> {
    let d = mem.d;
    let scale = T::one() / T::from_f64(d as f64).sqrt();
    let mut input = w.tgt_emb.row(y_prev as usize).to_vec();
    let mut new_layers = Vec::with_capacity(w.dec.len());
    let mut caches = Vec::with_capacity(w.dec.len());
    let mut context = Vec::new();
    let mut alpha_top = Vec::new();
    for (l, layer) in w.dec.iter().enumerate() {
        let s_prev = &state.layers[l];
        let mut q = vec![T::zero(); d];
        vecmat_acc(&mut q, s_prev, layer.wq.data());
        let mut alpha: Vec<T> = (0..visible).map(|j| dot(&q, mem.key(l, j)) * scale).collect();
        softmax_in_place(&mut alpha);
        let mut c = vec![T::zero(); d];
        for (j, &a) in alpha.iter().enumerate() {
            axpy(&mut c, a, mem.row(j));
        }
        let mut gin = input;
        gin.extend_from_slice(&c);
        let (s, gc) = gru_step(&layer.gru, &gin, s_prev);
        input = s.clone();
        new_layers.push(s);
        caches.push(LayerCache {
            s_prev: s_prev.clone(),
            q,
            alpha: alpha.clone(),
            gru: gc,
        });
        context = c;
        alpha_top = alpha;
    }
    let mut z = input;
    z.extend_from_slice(&context);
    let mut logits = w.bo.data().to_vec();
    vecmat_acc(&mut logits, &z, w.wo.data());
    StepOutput {
        state: DecoderState { layers: new_layers },
        attention: alpha_top,
        logits,
        cache: StepCache { layers: caches, z },
    }
}

/// Teacher-forced negative log-likelihood (summed over the `|y| + 1`
/// predictions, EOS included). `visible[i]` limits prediction `i` to the
/// first source states; all are visible by default. When `grad` is given,
/// adds `scale * dLoss/dθ` into it.
pub(crate) fn pair_loss<T: Real>(
    w: &Weights<T>,
    mode: EncoderMode,
    source: &[u32],
    target: &[u32],
    visible: Option<&[usize]>,
    grad: Option<(&mut Weights<T>, T)>,
) -> T {
    let d = w.src_emb.cols();
    let n = source.len();
    let want_grad = grad.is_some();
    let (rows, tape) = encode_rows(w, mode, source, want_grad);
    let mut mem = Memory::new(d, w.dec.len());
    for r in &rows {
        mem.push_row(w, r);
    }

    let mut state = DecoderState::initial(w);
    let mut prev = BOS;
    let mut loss = T::zero();
    let mut steps = Vec::with_capacity(target.len() + 1);
    for (i, &gold) in target.iter().chain(std::iter::once(&EOS)).enumerate() {
        let v = visible.map_or(n, |v| v[i]);
        let out = decoder_step(w, &mem, v, prev, &state);
        let mut probs = out.logits.clone();
        softmax_in_place(&mut probs);
        loss -= probs[gold as usize].max(T::min_positive_value()).ln();
        state = out.state;
        if want_grad {
            steps.push((prev, gold, probs, out.cache));
        }
        prev = gold;
    }

    let Some((grad, scale)) = grad else {
        return loss;
    };
    let tape = tape.expect("tape requested");
    let n_layers = w.dec.len();
    let att_scale = T::one() / T::from_f64(d as f64).sqrt();
    let mut d_rows = vec![vec![T::zero(); d]; n];
    let mut d_keys = vec![vec![vec![T::zero(); d]; n]; n_layers];
    let mut carry = vec![vec![T::zero(); d]; n_layers];

    for (prev, gold, probs, cache) in steps.iter().rev() {
        let mut dlogits = probs.clone();
        dlogits[*gold as usize] -= T::one();
        for v in dlogits.iter_mut() {
            *v *= scale;
        }
        outer_acc(grad.wo.data_mut(), &cache.z, &dlogits);
        axpy(grad.bo.data_mut(), T::one(), &dlogits);
        let mut dz = vec![T::zero(); 2 * d];
        matvec_acc(&mut dz, w.wo.data(), &dlogits);

        let mut ds = carry.clone();
        axpy(&mut ds[n_layers - 1], T::one(), &dz[..d]);
        let mut dc_top = dz[d..].to_vec();

        for l in (0..n_layers).rev() {
            let lc = &cache.layers[l];
            let layer = &w.dec[l];
            let (dgin, dh_prev) = gru_backward(&layer.gru, &mut grad.dec[l].gru, &lc.gru, &ds[l]);
            if l > 0 {
                axpy(&mut ds[l - 1], T::one(), &dgin[..d]);
            } else {
                axpy(grad.tgt_emb.row_mut(*prev as usize), T::one(), &dgin[..d]);
            }
            let mut dc = dgin[d..].to_vec();
            if l == n_layers - 1 {
                axpy(&mut dc, T::one(), &dc_top);
                dc_top.clear();
            }
            // context = sum_j alpha_j h_j
            let dalpha: Vec<T> = (0..lc.alpha.len()).map(|j| dot(&dc, mem.row(j))).collect();
            for (j, &a) in lc.alpha.iter().enumerate() {
                axpy(&mut d_rows[j], a, &dc);
            }
            let inner: T = lc.alpha.iter().zip(&dalpha).map(|(&a, &g)| a * g).sum();
            let mut dq = vec![T::zero(); d];
            for (j, (&a, &g)) in lc.alpha.iter().zip(&dalpha).enumerate() {
                let de = a * (g - inner) * att_scale;
                axpy(&mut dq, de, mem.key(l, j));
                axpy(&mut d_keys[l][j], de, &lc.q);
            }
            let mut dprev = dh_prev;
            matvec_acc(&mut dprev, layer.wq.data(), &dq);
            outer_acc(grad.dec[l].wq.data_mut(), &lc.s_prev, &dq);
            carry[l] = dprev;
        }
    }
    for l in 0..n_layers {
        axpy(grad.dec[l].init.data_mut(), T::one(), &carry[l]);
        for j in 0..n {
            outer_acc(grad.dec[l].wk.data_mut(), mem.row(j), &d_keys[l][j]);
            matvec_acc(&mut d_rows[j], w.dec[l].wk.data(), &d_keys[l][j]);
        }
    }
    encode_backward(w, grad, source, &tape, d_rows);
    loss
}
