//! Batched forward pass with saved activations, and its exact backward pass.

use crate::error::{Error, Result};
use crate::linalg::{
    self, gelu_backward, gelu_forward, layer_norm_backward, layer_norm_forward, linear_backward,
    linear_forward, matmul, softmax_in_place, NormCache, Op, Real,
};
use crate::model::params::{Linear, ModelParams, Norm};
use crate::tensorize::validate_window;
use crate::toydata::TokenId;

pub(crate) fn lin_fwd<F: Real>(p: &[F], l: &Linear, x: &[F], n: usize, y: &mut [F]) {
    let b = l.b().map(|r| &p[r]);
    linear_forward(x, n, l.d_in, &p[l.w()], b, l.d_out, y);
}

pub(crate) fn lin_bwd<F: Real>(
    p: &[F],
    g: &mut [F],
    l: &Linear,
    x: &[F],
    dy: &[F],
    n: usize,
    dx: Option<&mut [F]>,
) {
    let (dw, db) = g[l.all()].split_at_mut(l.d_in * l.d_out);
    let db = if l.bias { Some(db) } else { None };
    linear_backward(x, dy, n, l.d_in, l.d_out, &p[l.w()], dw, db, dx);
}

pub(crate) fn norm_fwd<F: Real>(
    p: &[F],
    nm: &Norm,
    x: &[F],
    y: &mut [F],
    cache: Option<&mut NormCache<F>>,
) {
    layer_norm_forward(x, nm.d, &p[nm.gain()], &p[nm.bias()], y, cache);
}

pub(crate) fn norm_bwd<F: Real>(
    p: &[F],
    g: &mut [F],
    nm: &Norm,
    dy: &[F],
    cache: &NormCache<F>,
    dx: &mut [F],
) {
    let (dg, db) = g[nm.all()].split_at_mut(nm.d);
    layer_norm_backward(dy, nm.d, &p[nm.gain()], cache, dg, db, dx);
}

/// Scaled dot-product attention of one query over `len` keys stored with a
/// row stride. Writes the softmax weights to `probs[..len]` and the
/// attended value to `out`.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn attend_row<F: Real>(
    q: &[F],
    kv: &[F],
    stride: usize,
    k_off: usize,
    v_off: usize,
    len: usize,
    scale: F,
    probs: &mut [F],
    out: &mut [F],
) {
    let dh = q.len();
    for j in 0..len {
        let base = j * stride;
        probs[j] = linalg::dot(q, &kv[base + k_off..base + k_off + dh]) * scale;
    }
    softmax_in_place(&mut probs[..len]);
    out.fill(F::ZERO);
    for j in 0..len {
        let base = j * stride + v_off;
        linalg::axpy(probs[j], &kv[base..base + dh], out);
    }
}

/// Per-layer key and value tables of the input query module: every
/// vocabulary row (including padding) and every slot embedding projected
/// once, so a window's keys are sums of two table rows plus bias.
#[derive(Debug, Clone)]
pub struct QInTables<F> {
    pub(crate) layers: Vec<SlotTables<F>>,
}

#[derive(Debug, Clone)]
pub(crate) struct SlotTables<F> {
    token_keys: Vec<F>,
    slot_keys: Vec<F>,
    token_values: Vec<F>,
    slot_values: Vec<F>,
}

pub fn q_in_tables<F: Real>(params: &ModelParams<F>) -> QInTables<F> {
    let p = &params.data[..];
    let lay = &params.layout;
    let d = params.config.d_model;
    let rows = params.config.vocab_size + 1;
    let k = params.config.k;
    let emb = &p[lay.token_embedding.clone()];
    let slots = &p[lay.q_in.slot_pos.clone()];
    let project = |x: &[F], n: usize, l: &Linear| {
        let mut y = vec![F::ZERO; n * d];
        matmul(n, d, d, F::ONE, x, Op::N, &p[l.w()], Op::N, F::ZERO, &mut y);
        y
    };
    QInTables {
        layers: lay
            .q_in
            .layers
            .iter()
            .map(|l| SlotTables {
                token_keys: project(emb, rows, &l.k),
                slot_keys: project(slots, k, &l.k),
                token_values: project(emb, rows, &l.v),
                slot_values: project(slots, k, &l.v),
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Default)]
pub(crate) struct QInLayerCache<F> {
    ln: NormCache<F>,
    lnq: Vec<F>,
    qp: Vec<F>,
    keys: Vec<F>,
    values: Vec<F>,
    probs: Vec<F>,
    ctx: Vec<F>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct QInCache<F> {
    n: usize,
    symbols: Vec<TokenId>,
    layers: Vec<QInLayerCache<F>>,
    ln_mlp: NormCache<F>,
    z: Vec<F>,
    f1: Vec<F>,
    g: Vec<F>,
    r: Vec<F>,
}

/// Encodes `n` windows (`symbols` is `n × k`) into `n × d` vectors:
/// `embed(w[0]) + gate(Q_in(w))`.
pub(crate) fn q_in_forward<F: Real>(
    params: &ModelParams<F>,
    tables: &QInTables<F>,
    symbols: &[TokenId],
    n: usize,
) -> (Vec<F>, QInCache<F>) {
    let p = &params.data[..];
    let cfg = &params.config;
    let lay = &params.layout.q_in;
    let (d, k, heads, dh) = (cfg.d_model, cfg.k, cfg.n_heads, cfg.head_dim());
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    debug_assert_eq!(symbols.len(), n * k);

    let mut q: Vec<F> = p[lay.query.clone()].repeat(n);
    let mut layer_caches = Vec::with_capacity(lay.layers.len());
    for (ll, tab) in lay.layers.iter().zip(&tables.layers) {
        let mut c = QInLayerCache {
            lnq: vec![F::ZERO; n * d],
            qp: vec![F::ZERO; n * d],
            keys: vec![F::ZERO; n * k * d],
            values: vec![F::ZERO; n * k * d],
            probs: vec![F::ZERO; n * heads * k],
            ctx: vec![F::ZERO; n * d],
            ..Default::default()
        };
        norm_fwd(p, &ll.ln, &q, &mut c.lnq, Some(&mut c.ln));
        lin_fwd(p, &ll.q, &c.lnq, n, &mut c.qp);
        let bk = &p[ll.k.b().expect("bias")];
        let bv = &p[ll.v.b().expect("bias")];
        for row in 0..n * k {
            let s = symbols[row] as usize;
            let slot = row % k;
            let kr = &mut c.keys[row * d..(row + 1) * d];
            let vr = &mut c.values[row * d..(row + 1) * d];
            for e in 0..d {
                kr[e] = tab.token_keys[s * d + e] + tab.slot_keys[slot * d + e] + bk[e];
                vr[e] = tab.token_values[s * d + e] + tab.slot_values[slot * d + e] + bv[e];
            }
        }
        let mut kv = vec![F::ZERO; k * 2 * d];
        for i in 0..n {
            // Interleave this window's keys and values for `attend_row`.
            for s in 0..k {
                let src = (i * k + s) * d;
                kv[s * 2 * d..s * 2 * d + d].copy_from_slice(&c.keys[src..src + d]);
                kv[s * 2 * d + d..(s + 1) * 2 * d].copy_from_slice(&c.values[src..src + d]);
            }
            for h in 0..heads {
                let o = h * dh;
                attend_row(
                    &c.qp[i * d + o..i * d + o + dh],
                    &kv,
                    2 * d,
                    o,
                    d + o,
                    k,
                    scale,
                    &mut c.probs[(i * heads + h) * k..(i * heads + h + 1) * k],
                    &mut c.ctx[i * d + o..i * d + o + dh],
                );
            }
        }
        let mut upd = vec![F::ZERO; n * d];
        lin_fwd(p, &ll.o, &c.ctx, n, &mut upd);
        linalg::add_assign(&mut q, &upd);
        layer_caches.push(c);
    }

    let qh = cfg.query_mlp_hidden();
    let mut ln_mlp = NormCache::default();
    let mut z = vec![F::ZERO; n * d];
    norm_fwd(p, &lay.ln_mlp, &q, &mut z, Some(&mut ln_mlp));
    let mut f1 = vec![F::ZERO; n * qh];
    lin_fwd(p, &lay.fc1, &z, n, &mut f1);
    let mut g = vec![F::ZERO; n * qh];
    gelu_forward(&f1, &mut g);
    let mut r = vec![F::ZERO; n * d];
    lin_fwd(p, &lay.fc2, &g, n, &mut r);
    linalg::add_assign(&mut r, &q);

    let mut enc = vec![F::ZERO; n * d];
    lin_fwd(p, &lay.gate, &r, n, &mut enc);
    let emb = &p[params.layout.token_embedding.clone()];
    for i in 0..n {
        let s = symbols[i * k] as usize;
        linalg::add_assign(&mut enc[i * d..(i + 1) * d], &emb[s * d..(s + 1) * d]);
    }
    let cache = QInCache {
        n,
        symbols: symbols.to_vec(),
        layers: layer_caches,
        ln_mlp,
        z,
        f1,
        g,
        r,
    };
    (enc, cache)
}

pub(crate) fn q_in_backward<F: Real>(
    params: &ModelParams<F>,
    cache: &QInCache<F>,
    denc: &[F],
    grads: &mut [F],
) {
    let p = &params.data[..];
    let cfg = &params.config;
    let layout = &params.layout;
    let lay = &layout.q_in;
    let (d, k, heads, dh) = (cfg.d_model, cfg.k, cfg.n_heads, cfg.head_dim());
    let rows = cfg.vocab_size + 1;
    let qh = cfg.query_mlp_hidden();
    let n = cache.n;
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());

    let te = layout.token_embedding.start;
    for i in 0..n {
        let s = cache.symbols[i * k] as usize;
        linalg::add_assign(&mut grads[te + s * d..te + (s + 1) * d], &denc[i * d..(i + 1) * d]);
    }
    let mut dq = vec![F::ZERO; n * d];
    lin_bwd(p, grads, &lay.gate, &cache.r, denc, n, Some(&mut dq));
    let mut dg = vec![F::ZERO; n * qh];
    lin_bwd(p, grads, &lay.fc2, &cache.g, &dq, n, Some(&mut dg));
    let mut df1 = vec![F::ZERO; n * qh];
    gelu_backward(&cache.f1, &dg, &mut df1);
    let mut dz = vec![F::ZERO; n * d];
    lin_bwd(p, grads, &lay.fc1, &cache.z, &df1, n, Some(&mut dz));
    norm_bwd(p, grads, &lay.ln_mlp, &dz, &cache.ln_mlp, &mut dq);

    let emb = &p[layout.token_embedding.clone()];
    let slots = &p[lay.slot_pos.clone()];
    for (ll, c) in lay.layers.iter().zip(&cache.layers).rev() {
        let mut dctx = vec![F::ZERO; n * d];
        lin_bwd(p, grads, &ll.o, &c.ctx, &dq, n, Some(&mut dctx));

        let mut dqp = vec![F::ZERO; n * d];
        let mut dkeys = vec![F::ZERO; n * k * d];
        let mut dvalues = vec![F::ZERO; n * k * d];
        let mut dprob = vec![F::ZERO; k];
        for i in 0..n {
            for h in 0..heads {
                let o = h * dh;
                let probs = &c.probs[(i * heads + h) * k..(i * heads + h + 1) * k];
                let dc = &dctx[i * d + o..i * d + o + dh];
                let mut acc = F::ZERO;
                for s in 0..k {
                    let vr = (i * k + s) * d + o;
                    dprob[s] = linalg::dot(dc, &c.values[vr..vr + dh]);
                    acc += probs[s] * dprob[s];
                    linalg::axpy(probs[s], dc, &mut dvalues[vr..vr + dh]);
                }
                for s in 0..k {
                    let ds = probs[s] * (dprob[s] - acc) * scale;
                    let kr = (i * k + s) * d + o;
                    let qr = i * d + o;
                    for e in 0..dh {
                        dqp[qr + e] += ds * c.keys[kr + e];
                        dkeys[kr + e] += ds * c.qp[qr + e];
                    }
                }
            }
        }

        for (proj, dx_rows) in [(&ll.k, &dkeys), (&ll.v, &dvalues)] {
            let mut d_token = vec![F::ZERO; rows * d];
            let mut d_slot = vec![F::ZERO; k * d];
            let mut d_bias = vec![F::ZERO; d];
            for row in 0..n * k {
                let s = cache.symbols[row] as usize;
                let slot = row % k;
                let src = &dx_rows[row * d..(row + 1) * d];
                linalg::add_assign(&mut d_token[s * d..(s + 1) * d], src);
                linalg::add_assign(&mut d_slot[slot * d..(slot + 1) * d], src);
                linalg::add_assign(&mut d_bias, src);
            }
            let (dw, db) = grads[proj.all()].split_at_mut(d * d);
            linalg::add_assign(db, &d_bias);
            let w = &p[proj.w()];
            matmul(d, rows, d, F::ONE, emb, Op::T, &d_token, Op::N, F::ONE, dw);
            matmul(d, k, d, F::ONE, slots, Op::T, &d_slot, Op::N, F::ONE, dw);
            let g_emb = &mut grads[layout.token_embedding.clone()];
            matmul(rows, d, d, F::ONE, &d_token, Op::N, w, Op::T, F::ONE, g_emb);
            let g_slot = &mut grads[lay.slot_pos.clone()];
            matmul(k, d, d, F::ONE, &d_slot, Op::N, w, Op::T, F::ONE, g_slot);
        }

        let mut dlnq = vec![F::ZERO; n * d];
        lin_bwd(p, grads, &ll.q, &c.lnq, &dqp, n, Some(&mut dlnq));
        norm_bwd(p, grads, &ll.ln, &dlnq, &c.ln, &mut dq);
    }

    let gq = &mut grads[lay.query.clone()];
    for row in dq.chunks_exact(d) {
        linalg::add_assign(gq, row);
    }
}

#[derive(Debug, Clone, Default)]
pub(crate) struct QOutCache<F> {
    n: usize,
    u: Vec<Vec<F>>,
    ln_mlp: NormCache<F>,
    z: Vec<F>,
    f1: Vec<F>,
    g: Vec<F>,
    r: Vec<F>,
    out: Vec<F>,
}

/// Expands `n` hidden states into `n × k × V` logits:
/// slot `j` reads `head(h + gate(Q_out_j(h)))`.
pub(crate) fn q_out_forward<F: Real>(
    params: &ModelParams<F>,
    hidden: &[F],
    n: usize,
) -> (Vec<F>, QOutCache<F>) {
    let p = &params.data[..];
    let cfg = &params.config;
    let lay = &params.layout.q_out;
    let (d, k, v, qh) = (cfg.d_model, cfg.k, cfg.vocab_size, cfg.query_mlp_hidden());
    let nk = n * k;

    let mut attn = vec![F::ZERO; n * d];
    let mut u_all = Vec::with_capacity(lay.layers.len());
    let mut tmp = vec![F::ZERO; n * d];
    for ll in &lay.layers {
        let mut u = vec![F::ZERO; n * d];
        lin_fwd(p, &ll.v, hidden, n, &mut u);
        lin_fwd(p, &ll.o, &u, n, &mut tmp);
        linalg::add_assign(&mut attn, &tmp);
        u_all.push(u);
    }
    let queries = &p[lay.slot_queries.clone()];
    let mut q = vec![F::ZERO; nk * d];
    for i in 0..n {
        for j in 0..k {
            let row = &mut q[(i * k + j) * d..(i * k + j + 1) * d];
            for e in 0..d {
                row[e] = queries[j * d + e] + attn[i * d + e];
            }
        }
    }
    let mut ln_mlp = NormCache::default();
    let mut z = vec![F::ZERO; nk * d];
    norm_fwd(p, &lay.ln_mlp, &q, &mut z, Some(&mut ln_mlp));
    let mut f1 = vec![F::ZERO; nk * qh];
    lin_fwd(p, &lay.fc1, &z, nk, &mut f1);
    let mut g = vec![F::ZERO; nk * qh];
    gelu_forward(&f1, &mut g);
    let mut r = vec![F::ZERO; nk * d];
    lin_fwd(p, &lay.fc2, &g, nk, &mut r);
    linalg::add_assign(&mut r, &q);

    let mut out = vec![F::ZERO; nk * d];
    lin_fwd(p, &lay.gate, &r, nk, &mut out);
    for i in 0..n {
        let h = &hidden[i * d..(i + 1) * d];
        for j in 0..k {
            linalg::add_assign(&mut out[(i * k + j) * d..(i * k + j + 1) * d], h);
        }
    }
    let mut logits = vec![F::ZERO; nk * v];
    lin_fwd(p, &params.layout.head, &out, nk, &mut logits);
    let cache = QOutCache {
        n,
        u: u_all,
        ln_mlp,
        z,
        f1,
        g,
        r,
        out,
    };
    (logits, cache)
}

/// Accumulates parameter gradients and adds the hidden-state gradient to `dhidden`.
pub(crate) fn q_out_backward<F: Real>(
    params: &ModelParams<F>,
    cache: &QOutCache<F>,
    hidden: &[F],
    dlogits: &[F],
    grads: &mut [F],
    dhidden: &mut [F],
) {
    let p = &params.data[..];
    let cfg = &params.config;
    let lay = &params.layout.q_out;
    let (d, k, qh) = (cfg.d_model, cfg.k, cfg.query_mlp_hidden());
    let n = cache.n;
    let nk = n * k;

    let mut dout = vec![F::ZERO; nk * d];
    lin_bwd(p, grads, &params.layout.head, &cache.out, dlogits, nk, Some(&mut dout));
    for i in 0..n {
        let dh = &mut dhidden[i * d..(i + 1) * d];
        for j in 0..k {
            linalg::add_assign(dh, &dout[(i * k + j) * d..(i * k + j + 1) * d]);
        }
    }
    let mut dq = vec![F::ZERO; nk * d];
    lin_bwd(p, grads, &lay.gate, &cache.r, &dout, nk, Some(&mut dq));
    let mut dg = vec![F::ZERO; nk * qh];
    lin_bwd(p, grads, &lay.fc2, &cache.g, &dq, nk, Some(&mut dg));
    let mut df1 = vec![F::ZERO; nk * qh];
    gelu_backward(&cache.f1, &dg, &mut df1);
    let mut dz = vec![F::ZERO; nk * d];
    lin_bwd(p, grads, &lay.fc1, &cache.z, &df1, nk, Some(&mut dz));
    norm_bwd(p, grads, &lay.ln_mlp, &dz, &cache.ln_mlp, &mut dq);

    let mut dattn = vec![F::ZERO; n * d];
    {
        let gs = &mut grads[lay.slot_queries.clone()];
        for i in 0..n {
            for j in 0..k {
                let row = &dq[(i * k + j) * d..(i * k + j + 1) * d];
                linalg::add_assign(&mut gs[j * d..(j + 1) * d], row);
                linalg::add_assign(&mut dattn[i * d..(i + 1) * d], row);
            }
        }
    }
    for (ll, u) in lay.layers.iter().zip(&cache.u) {
        let mut du = vec![F::ZERO; n * d];
        lin_bwd(p, grads, &ll.o, u, &dattn, n, Some(&mut du));
        lin_bwd(p, grads, &ll.v, hidden, &du, n, Some(&mut *dhidden));
    }
}

#[derive(Debug, Clone, Default)]
pub(crate) struct BlockCache<F> {
    ln1: NormCache<F>,
    a1: Vec<F>,
    qkv: Vec<F>,
    probs: Vec<F>,
    ctx: Vec<F>,
    ln2: NormCache<F>,
    a2: Vec<F>,
    h1: Vec<F>,
    g: Vec<F>,
}

/// One causal sequence as the model sees it: the class label and its input
/// windows, flat (`window t = windows[t*k..(t+1)*k]`). Only the first
/// `T − 1` windows influence the outputs.
#[derive(Debug, Clone, Copy)]
pub struct SequenceInput<'a> {
    pub class_label: usize,
    pub windows: &'a [TokenId],
}

/// Activations saved by [`forward_batch`] for [`backward_batch`].
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    batch: usize,
    classes: Vec<usize>,
    q_in: QInCache<F>,
    blocks: Vec<BlockCache<F>>,
    ln_f: NormCache<F>,
    hidden: Vec<F>,
    q_out: QOutCache<F>,
}

impl<F> ForwardCache<F> {
    /// Final-norm hidden states, `B × T × d`.
    pub fn hidden(&self) -> &[F] {
        &self.hidden
    }
}

pub(crate) fn check_inputs<F: Real>(params: &ModelParams<F>, inputs: &[SequenceInput]) -> Result<()> {
    let cfg = &params.config;
    let need = (cfg.seq_len - 1) * cfg.k;
    for (b, s) in inputs.iter().enumerate() {
        if s.class_label >= cfg.num_classes {
            return Err(Error::param(format!(
                "sequence {b}: class {} out of range ({} classes)",
                s.class_label, cfg.num_classes
            )));
        }
        if s.windows.len() < need || s.windows.len() % cfg.k != 0 {
            return Err(Error::param(format!(
                "sequence {b}: {} window symbols, need at least {need} in windows of {}",
                s.windows.len(),
                cfg.k
            )));
        }
        for w in s.windows[..need].chunks(cfg.k) {
            validate_window(w, cfg.vocab_size)?;
        }
    }
    Ok(())
}

/// Teacher-forced forward pass over a batch. Returns logits laid out
/// `B × T × k × V`, where output row `t` of a sequence predicts window `t`.
pub fn forward_batch<F: Real>(
    params: &ModelParams<F>,
    inputs: &[SequenceInput],
) -> Result<(Vec<F>, ForwardCache<F>)> {
    check_inputs(params, inputs)?;
    let tables = q_in_tables(params);
    Ok(forward_batch_unchecked(params, &tables, inputs))
}

pub(crate) fn forward_batch_unchecked<F: Real>(
    params: &ModelParams<F>,
    tables: &QInTables<F>,
    inputs: &[SequenceInput],
) -> (Vec<F>, ForwardCache<F>) {
    let p = &params.data[..];
    let cfg = &params.config;
    let layout = &params.layout;
    let (d, k, heads, dh) = (cfg.d_model, cfg.k, cfg.n_heads, cfg.head_dim());
    let l = cfg.seq_len;
    let bsz = inputs.len();
    let rows = bsz * l;
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());

    let nw = l - 1;
    let mut symbols = Vec::with_capacity(bsz * nw * k);
    for s in inputs {
        symbols.extend_from_slice(&s.windows[..nw * k]);
    }
    let (enc, q_in_cache) = q_in_forward(params, tables, &symbols, bsz * nw);

    let cls = &p[layout.class_embedding.clone()];
    let pos = &p[layout.position_embedding.clone()];
    let mut x = vec![F::ZERO; rows * d];
    for (b, s) in inputs.iter().enumerate() {
        let c = s.class_label;
        for t in 0..l {
            let row = &mut x[(b * l + t) * d..(b * l + t + 1) * d];
            let src = if t == 0 {
                &cls[c * d..(c + 1) * d]
            } else {
                &enc[(b * nw + t - 1) * d..(b * nw + t) * d]
            };
            for e in 0..d {
                row[e] = src[e] + pos[t * d + e];
            }
        }
    }

    let hid = cfg.mlp_hidden();
    let mut blocks = Vec::with_capacity(layout.blocks.len());
    let mut tmp = vec![F::ZERO; rows * d];
    for bl in &layout.blocks {
        let mut c = BlockCache {
            a1: vec![F::ZERO; rows * d],
            qkv: vec![F::ZERO; rows * 3 * d],
            probs: vec![F::ZERO; bsz * heads * l * l],
            ctx: vec![F::ZERO; rows * d],
            a2: vec![F::ZERO; rows * d],
            h1: vec![F::ZERO; rows * hid],
            g: vec![F::ZERO; rows * hid],
            ..Default::default()
        };
        norm_fwd(p, &bl.ln1, &x, &mut c.a1, Some(&mut c.ln1));
        lin_fwd(p, &bl.qkv, &c.a1, rows, &mut c.qkv);
        for b in 0..bsz {
            let kv = &c.qkv[b * l * 3 * d..(b + 1) * l * 3 * d];
            for h in 0..heads {
                let o = h * dh;
                for i in 0..l {
                    let prow = ((b * heads + h) * l + i) * l;
                    let qs = i * 3 * d + o;
                    let cs = (b * l + i) * d + o;
                    attend_row(
                        &kv[qs..qs + dh],
                        kv,
                        3 * d,
                        d + o,
                        2 * d + o,
                        i + 1,
                        scale,
                        &mut c.probs[prow..prow + l],
                        &mut c.ctx[cs..cs + dh],
                    );
                }
            }
        }
        lin_fwd(p, &bl.proj, &c.ctx, rows, &mut tmp);
        linalg::add_assign(&mut x, &tmp);
        norm_fwd(p, &bl.ln2, &x, &mut c.a2, Some(&mut c.ln2));
        lin_fwd(p, &bl.fc1, &c.a2, rows, &mut c.h1);
        gelu_forward(&c.h1, &mut c.g);
        lin_fwd(p, &bl.fc2, &c.g, rows, &mut tmp);
        linalg::add_assign(&mut x, &tmp);
        blocks.push(c);
    }
    let mut ln_f = NormCache::default();
    let mut hidden = vec![F::ZERO; rows * d];
    norm_fwd(p, &layout.ln_f, &x, &mut hidden, Some(&mut ln_f));
    let (logits, q_out_cache) = q_out_forward(params, &hidden, rows);
    let cache = ForwardCache {
        batch: bsz,
        classes: inputs.iter().map(|s| s.class_label).collect(),
        q_in: q_in_cache,
        blocks,
        ln_f,
        hidden,
        q_out: q_out_cache,
    };
    (logits, cache)
}

/// Gradient of `sum(dlogits ⊙ logits)` with respect to every parameter.
pub fn backward_batch<F: Real>(
    params: &ModelParams<F>,
    cache: &ForwardCache<F>,
    dlogits: &[F],
) -> Vec<F> {
    let mut grads = vec![F::ZERO; params.data.len()];
    backward_batch_into(params, cache, dlogits, &mut grads);
    grads
}

pub(crate) fn backward_batch_into<F: Real>(
    params: &ModelParams<F>,
    cache: &ForwardCache<F>,
    dlogits: &[F],
    grads: &mut [F],
) {
    let p = &params.data[..];
    let cfg = &params.config;
    let layout = &params.layout;
    let (d, heads, dh) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
    let l = cfg.seq_len;
    let bsz = cache.batch;
    let rows = bsz * l;
    let hid = cfg.mlp_hidden();
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());

    let mut dhidden = vec![F::ZERO; rows * d];
    q_out_backward(params, &cache.q_out, &cache.hidden, dlogits, grads, &mut dhidden);
    let mut dx = vec![F::ZERO; rows * d];
    norm_bwd(p, grads, &layout.ln_f, &dhidden, &cache.ln_f, &mut dx);

    let mut dg = vec![F::ZERO; rows * hid];
    let mut dh1 = vec![F::ZERO; rows * hid];
    let mut da = vec![F::ZERO; rows * d];
    let mut dctx = vec![F::ZERO; rows * d];
    let mut dqkv = vec![F::ZERO; rows * 3 * d];
    let mut dprob = vec![F::ZERO; l];
    for (bl, c) in layout.blocks.iter().zip(&cache.blocks).rev() {
        dg.fill(F::ZERO);
        lin_bwd(p, grads, &bl.fc2, &c.g, &dx, rows, Some(&mut dg));
        gelu_backward(&c.h1, &dg, &mut dh1);
        da.fill(F::ZERO);
        lin_bwd(p, grads, &bl.fc1, &c.a2, &dh1, rows, Some(&mut da));
        norm_bwd(p, grads, &bl.ln2, &da, &c.ln2, &mut dx);

        dctx.fill(F::ZERO);
        lin_bwd(p, grads, &bl.proj, &c.ctx, &dx, rows, Some(&mut dctx));
        dqkv.fill(F::ZERO);
        for b in 0..bsz {
            let base = b * l * 3 * d;
            let qkv = &c.qkv[base..base + l * 3 * d];
            let dq = &mut dqkv[base..base + l * 3 * d];
            for h in 0..heads {
                let o = h * dh;
                for i in 0..l {
                    let probs = &c.probs[((b * heads + h) * l + i) * l..][..i + 1];
                    let dc = &dctx[(b * l + i) * d + o..(b * l + i) * d + o + dh];
                    let mut acc = F::ZERO;
                    for j in 0..=i {
                        let vs = j * 3 * d + 2 * d + o;
                        dprob[j] = linalg::dot(dc, &qkv[vs..vs + dh]);
                        acc += probs[j] * dprob[j];
                        linalg::axpy(probs[j], dc, &mut dq[vs..vs + dh]);
                    }
                    let qs = i * 3 * d + o;
                    for j in 0..=i {
                        let ds = probs[j] * (dprob[j] - acc) * scale;
                        let ks = j * 3 * d + d + o;
                        for e in 0..dh {
                            dq[qs + e] += ds * qkv[ks + e];
                            dq[ks + e] += ds * qkv[qs + e];
                        }
                    }
                }
            }
        }
        da.fill(F::ZERO);
        lin_bwd(p, grads, &bl.qkv, &c.a1, &dqkv, rows, Some(&mut da));
        norm_bwd(p, grads, &bl.ln1, &da, &c.ln1, &mut dx);
    }

    let nw = l - 1;
    let mut denc = vec![F::ZERO; bsz * nw * d];
    {
        let pos_start = layout.position_embedding.start;
        let cls_start = layout.class_embedding.start;
        for b in 0..bsz {
            for t in 0..l {
                let src = &dx[(b * l + t) * d..(b * l + t + 1) * d];
                linalg::add_assign(&mut grads[pos_start + t * d..pos_start + (t + 1) * d], src);
                if t == 0 {
                    let c = cache.classes[b];
                    linalg::add_assign(&mut grads[cls_start + c * d..cls_start + (c + 1) * d], src);
                } else {
                    denc[(b * nw + t - 1) * d..(b * nw + t) * d].copy_from_slice(src);
                }
            }
        }
    }
    q_in_backward(params, &cache.q_in, &denc, grads);
}
