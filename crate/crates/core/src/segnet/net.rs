//! U-shaped encoder-decoder: forward passes with and without a tape, and the
//! reverse pass over the tape.

use super::layers::*;
use super::real::Real;
use super::weights::{BnP, Layout, UnitP, WeightStore};
use crate::error::{Error, Result};
use crate::rng::Rng;

struct UnitCache<T> {
    input: Act<T>,
    bn: BnCache<T>,
    out: Act<T>,
}

struct BlockCache<T> {
    u1: UnitCache<T>,
    u2: UnitCache<T>,
    drop: Option<Vec<T>>,
}

struct EncCache<T> {
    block: BlockCache<T>,
    /// Pooling argmax and the pre-pool spatial size.
    pool: Option<(Vec<u8>, usize, usize)>,
}

struct DecCache<T> {
    up: UnitCache<T>,
    block: BlockCache<T>,
}

pub(crate) struct Tape<T> {
    enc: Vec<EncCache<T>>,
    dec: Vec<Option<DecCache<T>>>,
    head_in: Act<T>,
    pub bn_stats: Vec<(BnP, BnStats)>,
}

pub(crate) struct Net<'a, T> {
    store: &'a WeightStore<T>,
    layout: Layout,
    scratch: Vec<T>,
}

fn two_mut<T>(v: &mut [Vec<T>], a: usize, b: usize) -> (&mut [T], &mut [T]) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

fn check(x: &Act<impl Real>, name: impl FnOnce() -> String) -> Result<()> {
    if x.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(name()))
    }
}

impl<'a, T: Real> Net<'a, T> {
    pub fn new(store: &'a WeightStore<T>) -> Self {
        Net {
            store,
            layout: Layout::new(&store.config),
            scratch: Vec::new(),
        }
    }

    fn p(&self, i: usize) -> &'a [T] {
        &self.store.tensors[i].data
    }

    fn depth(&self) -> usize {
        self.store.config.depth
    }

    fn dropout(&self, x: &mut Act<T>, rngs: Option<&mut [Rng]>) -> Option<Vec<T>> {
        let cfg = &self.store.config;
        rngs.map(|r| dropout_forward(x, cfg.dropout_rate, cfg.dropout_style, r))
    }

    fn unit_infer(&mut self, u: &UnitP, x: &Act<T>) -> Act<T> {
        let y = conv_forward(x, self.p(u.conv.w), self.p(u.conv.b), u.conv.cout, u.conv.k, &mut self.scratch);
        let mut z = bn_forward_eval(
            &y,
            self.p(u.bn.gamma),
            self.p(u.bn.beta),
            self.p(u.bn.mean),
            self.p(u.bn.var),
        );
        relu_inplace(&mut z);
        z
    }

    fn block_infer(&mut self, units: &[UnitP; 2], x: &Act<T>, rngs: Option<&mut [Rng]>) -> Act<T> {
        let h = self.unit_infer(&units[0], x);
        let mut z = self.unit_infer(&units[1], &h);
        self.dropout(&mut z, rngs);
        z
    }

    /// Logits for a batch using running batch-norm statistics. Dropout is
    /// active when `rngs` is given.
    pub fn forward_infer(&mut self, x: &Act<T>, mut rngs: Option<&mut [Rng]>) -> Result<Act<T>> {
        let layout = self.layout.clone();
        let depth = self.depth();
        let mut skips = Vec::with_capacity(depth);
        let mut cur = x.clone();
        for (l, units) in layout.enc.iter().enumerate() {
            let out = self.block_infer(units, &cur, rngs.as_deref_mut());
            check(&out, || format!("enc{l}"))?;
            if l + 1 < depth {
                cur = maxpool_forward(&out).0;
                skips.push(out);
            } else {
                cur = out;
            }
        }
        for l in (0..depth - 1).rev() {
            let up = self.unit_infer(&layout.up[l], &upsample_forward(&cur));
            let cat = concat(&skips[l], &up);
            skips.truncate(l);
            cur = self.block_infer(&layout.dec[l], &cat, rngs.as_deref_mut());
            check(&cur, || format!("dec{l}"))?;
        }
        let h = layout.head;
        let logits = conv_forward(&cur, self.p(h.w), self.p(h.b), h.cout, 1, &mut self.scratch);
        check(&logits, || "head".into())?;
        Ok(logits)
    }

    fn unit_train(&mut self, u: &UnitP, x: Act<T>, stats: &mut Vec<(BnP, BnStats)>) -> (Act<T>, UnitCache<T>) {
        let y = conv_forward(&x, self.p(u.conv.w), self.p(u.conv.b), u.conv.cout, u.conv.k, &mut self.scratch);
        let (mut z, bn, st) = bn_forward_train(&y, self.p(u.bn.gamma), self.p(u.bn.beta));
        relu_inplace(&mut z);
        stats.push((u.bn, st));
        let cache = UnitCache {
            input: x,
            bn,
            out: z.clone(),
        };
        (z, cache)
    }

    fn block_train(
        &mut self,
        units: &[UnitP; 2],
        x: Act<T>,
        rngs: Option<&mut [Rng]>,
        stats: &mut Vec<(BnP, BnStats)>,
    ) -> (Act<T>, BlockCache<T>) {
        let (h, u1) = self.unit_train(&units[0], x, stats);
        let (mut z, u2) = self.unit_train(&units[1], h, stats);
        let drop = self.dropout(&mut z, rngs);
        (z, BlockCache { u1, u2, drop })
    }

    /// Train-mode forward: batch statistics, dropout when `rngs` is given.
    pub fn forward_train(&mut self, x: Act<T>, mut rngs: Option<&mut [Rng]>) -> Result<(Act<T>, Tape<T>)> {
        let layout = self.layout.clone();
        let depth = self.depth();
        let mut stats = Vec::new();
        let mut enc = Vec::with_capacity(depth);
        let mut skips = Vec::with_capacity(depth);
        let mut cur = x;
        for (l, units) in layout.enc.iter().enumerate() {
            let (out, block) = self.block_train(units, cur, rngs.as_deref_mut(), &mut stats);
            check(&out, || format!("enc{l}"))?;
            if l + 1 < depth {
                let (pooled, arg) = maxpool_forward(&out);
                enc.push(EncCache {
                    block,
                    pool: Some((arg, out.h, out.w)),
                });
                skips.push(out);
                cur = pooled;
            } else {
                enc.push(EncCache { block, pool: None });
                cur = out;
            }
        }
        let mut dec: Vec<Option<DecCache<T>>> = (0..depth - 1).map(|_| None).collect();
        for l in (0..depth - 1).rev() {
            let (up_out, up) = self.unit_train(&layout.up[l], upsample_forward(&cur), &mut stats);
            let cat = concat(&skips[l], &up_out);
            skips.truncate(l);
            let (out, block) = self.block_train(&layout.dec[l], cat, rngs.as_deref_mut(), &mut stats);
            check(&out, || format!("dec{l}"))?;
            dec[l] = Some(DecCache { up, block });
            cur = out;
        }
        let h = layout.head;
        let logits = conv_forward(&cur, self.p(h.w), self.p(h.b), h.cout, 1, &mut self.scratch);
        check(&logits, || "head".into())?;
        Ok((
            logits,
            Tape {
                enc,
                dec,
                head_in: cur,
                bn_stats: stats,
            },
        ))
    }

    fn unit_backward(
        &mut self,
        u: &UnitP,
        cache: UnitCache<T>,
        mut dy: Act<T>,
        need_dx: bool,
        grads: &mut [Vec<T>],
    ) -> Option<Act<T>> {
        relu_backward(&mut dy, &cache.out);
        let (gg, gb) = two_mut(grads, u.bn.gamma, u.bn.beta);
        let dbn = bn_backward(&dy, &cache.bn, self.p(u.bn.gamma), gg, gb);
        let (gw, gb) = two_mut(grads, u.conv.w, u.conv.b);
        conv_backward(&cache.input, self.p(u.conv.w), &dbn, u.conv.k, gw, gb, need_dx, &mut self.scratch)
    }

    fn block_backward(
        &mut self,
        units: &[UnitP; 2],
        cache: BlockCache<T>,
        mut dy: Act<T>,
        need_dx: bool,
        grads: &mut [Vec<T>],
    ) -> Option<Act<T>> {
        if let Some(scale) = &cache.drop {
            dropout_backward(&mut dy, scale);
        }
        let dh = self
            .unit_backward(&units[1], cache.u2, dy, true, grads)
            .expect("inner gradient requested");
        self.unit_backward(&units[0], cache.u1, dh, need_dx, grads)
    }

    /// Accumulates parameter gradients for `dlogits` into `grads` (one buffer
    /// per tensor of the store).
    pub fn backward(&mut self, tape: Tape<T>, dlogits: Act<T>, grads: &mut [Vec<T>]) {
        let layout = self.layout.clone();
        let depth = self.depth();
        let h = layout.head;
        let (gw, gb) = two_mut(grads, h.w, h.b);
        let mut cur = conv_backward(&tape.head_in, self.p(h.w), &dlogits, 1, gw, gb, true, &mut self.scratch)
            .expect("head input gradient");
        let mut dskips = Vec::with_capacity(depth);
        for (l, dc) in tape.dec.into_iter().enumerate() {
            let dc = dc.expect("decoder level recorded");
            let dcat = self
                .block_backward(&layout.dec[l], dc.block, cur, true, grads)
                .expect("decoder input gradient");
            let (dskip, dup) = split(dcat, layout.dec[l][0].conv.cin / 2);
            dskips.push(dskip);
            let dup_in = self
                .unit_backward(&layout.up[l], dc.up, dup, true, grads)
                .expect("upsample gradient");
            cur = upsample_backward(&dup_in);
        }
        for (l, ec) in tape.enc.into_iter().enumerate().rev() {
            let mut dy = cur;
            if let Some((arg, hh, ww)) = &ec.pool {
                let mut d = maxpool_backward(&dy, arg, *hh, *ww);
                for (a, b) in d.data.iter_mut().zip(&dskips[l].data) {
                    *a += *b;
                }
                dy = d;
            }
            match self.block_backward(&layout.enc[l], ec.block, dy, l > 0, grads) {
                Some(dx) => cur = dx,
                None => break,
            }
        }
    }
}
