//! Reverse-mode differentiation over [`Tensor4`] values.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the node
//! list is a reverse topological order and visits each node exactly once.

use std::rc::Rc;

use crate::error::{ensure, Result};
use crate::norm::{compute_stats, StatLayout};
use crate::ops::{self, check_conv, conv_backward, conv_forward, Kernel};
use crate::real::Real;
use crate::tensor::{Dims, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, k: Kernel },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddConst(Var),
    AddScalar(Var, f64),
    Scale(Var, T),
    ChannelAffine { x: Var, scale: Option<Var>, shift: Option<Var> },
    Stats { src: Var, layout: StatLayout, mask: Option<Rc<Vec<bool>>> },
    Normalize { x: Var, stats: Var, layout: StatLayout },
    StraightThrough(Var),
    Select { mask: Var, on: Var, off: Var },
    MaskMul { x: Var, mask: Var },
    Sum(Var),
    Mean(Var),
    SquaredNorm(Var),
    Square(Var),
    Focal { logits: Var, targets: Rc<Vec<u16>>, gamma: T, alpha: T },
}

struct Node<T> {
    value: Tensor4<T>,
    op: Op<T>,
    requires_grad: bool,
    /// f64 accumulator result for scalar nodes.
    wide: Option<f64>,
}

/// Single-owner computation record for one training step.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Accumulated ∂loss/∂leaf for every leaf that requires a gradient.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor4<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor4<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor4<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Statistics node value layout: (1, partitions, 1, 2) with (mean, std) pairs.
fn stats_tensor<T: Real>(means: &[T], stds: &[T]) -> Tensor4<T> {
    let data = means.iter().zip(stds).flat_map(|(&m, &s)| [m, s]).collect();
    Tensor4::from_vec(Dims::new(1, means.len(), 1, 2), data).expect("stats dims")
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> Dims {
        self.nodes[v.0].value.dims()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>, requires_grad: bool) -> Var {
        let wide = if value.len() == 1 { self.wide_value(&op) } else { None };
        self.nodes.push(Node { value, op, requires_grad, wide });
        Var(self.nodes.len() - 1)
    }

    /// Scalar value at f64 precision: reductions accumulate in f64 and scalar
    /// arithmetic on their results is carried out in f64 as well.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        n.wide.unwrap_or_else(|| n.value.data()[0].f64())
    }

    fn wide_value(&self, op: &Op<T>) -> Option<f64> {
        let scalar_in = |v: &Var| (self.value(*v).len() == 1).then(|| self.scalar(*v));
        match op {
            Op::Add(a, b) => Some(scalar_in(a)? + scalar_in(b)?),
            Op::Sub(a, b) => Some(scalar_in(a)? - scalar_in(b)?),
            Op::Mul(a, b) => Some(scalar_in(a)? * scalar_in(b)?),
            Op::Scale(x, s) => Some(scalar_in(x)? * s.f64()),
            Op::AddScalar(x, c) => Some(scalar_in(x)? + c),
            Op::Square(x) => Some(scalar_in(x)?.powi(2)),
            _ => None,
        }
    }

    fn push_reduced(&mut self, x: Var, wide: f64, op: Op<T>) -> Var {
        let rg = self.requires(x);
        self.nodes.push(Node { value: Tensor4::scalar(T::lit(wide)), op, requires_grad: rg, wide: Some(wide) });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor4<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor4<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn unary(&mut self, x: Var, value: Tensor4<T>, op: Op<T>) -> Var {
        let rg = self.requires(x);
        self.push(value, op, rg)
    }

    fn same_dims(&self, a: Var, b: Var) -> Result<()> {
        ensure!(self.dims(a) == self.dims(b), "operand dims {} vs {}", self.dims(a), self.dims(b));
        Ok(())
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, padding: usize) -> Result<Var> {
        let k = check_conv(self.dims(x), self.value(w), padding, 1)?;
        if let Some(b) = b {
            ensure!(
                self.dims(b) == Dims::new(1, self.dims(w).b, 1, 1),
                "bias dims {} for {} output channels",
                self.dims(b),
                self.dims(w).b
            );
        }
        let value = conv_forward(self.value(x), self.value(w), b.map(|b| self.value(b).data()), k);
        let rg = self.requires(x) || self.requires(w) || b.is_some_and(|b| self.requires(b));
        Ok(self.push(value, Op::Conv { x, w, b, k }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = ops::relu(self.value(x));
        self.unary(x, v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = ops::sigmoid(self.value(x));
        self.unary(x, v, Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b)?;
        let v = self.value(a).add(self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b)?;
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b)?;
        let v = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// `x + c` for a constant tensor of the same dims.
    pub fn add_const(&mut self, x: Var, c: &Tensor4<T>) -> Result<Var> {
        let v = self.value(x).add(c)?;
        Ok(self.unary(x, v, Op::AddConst(x)))
    }

    /// `x + c` for a plain number; exact in the f64 shadow of scalar nodes.
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let cv = T::lit(c);
        let v = self.value(x).map(|p| p + cv);
        self.unary(x, v, Op::AddScalar(x, c))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).scale(s);
        self.unary(x, v, Op::Scale(x, s))
    }

    /// `scale_c · x + shift_c` with (1, C, 1, 1) vectors; either may be absent.
    pub fn channel_affine(&mut self, x: Var, scale: Option<Var>, shift: Option<Var>) -> Result<Var> {
        let d = self.dims(x);
        for v in [scale, shift].into_iter().flatten() {
            ensure!(self.dims(v) == Dims::new(1, d.c, 1, 1), "affine vector dims {} for {} channels", self.dims(v), d.c);
        }
        let ones = vec![T::one(); d.c];
        let zeros = vec![T::zero(); d.c];
        let s = scale.map_or(&ones[..], |v| self.value(v).data());
        let b = shift.map_or(&zeros[..], |v| self.value(v).data());
        let value = crate::norm::channel_affine(self.value(x), s, b)?;
        let rg = self.requires(x) || [scale, shift].into_iter().flatten().any(|v| self.requires(v));
        Ok(self.push(value, Op::ChannelAffine { x, scale, shift }, rg))
    }

    /// Partition statistics of `src` as a differentiable node.
    pub fn stats(&mut self, src: Var, layout: StatLayout, mask: Option<Rc<Vec<bool>>>) -> Result<Var> {
        let s = compute_stats(self.value(src), layout, mask.as_deref().map(|m| m.as_slice()))?;
        let v = stats_tensor(&s.means, &s.stds);
        Ok(self.unary(src, v, Op::Stats { src, layout, mask }))
    }

    /// Splits a stats node value back into (means, stds).
    pub fn stats_values(&self, stats: Var) -> (Vec<T>, Vec<T>) {
        let d = self.value(stats).data();
        (d.iter().step_by(2).copied().collect(), d.iter().skip(1).step_by(2).copied().collect())
    }

    /// `(x − mean_p) / std_p` using a stats node computed with the same layout.
    pub fn normalize(&mut self, x: Var, stats: Var, layout: StatLayout) -> Result<Var> {
        let d = self.dims(x);
        layout.check(d)?;
        let parts = layout.partitions(d.b);
        ensure!(
            self.dims(stats) == Dims::new(1, parts, 1, 2),
            "stats node dims {} do not fit {} partitions",
            self.dims(stats),
            parts
        );
        let sv = self.value(stats).data();
        let mut out = Vec::with_capacity(d.numel());
        for b in 0..d.b {
            for c in 0..d.c {
                let p = layout.partition(d.c, b, c);
                let (mu, sd) = (sv[2 * p], sv[2 * p + 1]);
                out.extend(self.value(x).plane(b, c).iter().map(|&v| (v - mu) / sd));
            }
        }
        let value = Tensor4::from_vec(d, out)?;
        let rg = self.requires(x) || self.requires(stats);
        Ok(self.push(value, Op::Normalize { x, stats, layout }, rg))
    }

    /// Forward: `x > 0.5` as 0/1. Backward: identity (straight-through).
    pub fn straight_through(&mut self, x: Var) -> Var {
        let half = T::lit(0.5);
        let v = self.value(x).map(|p| if p > half { T::one() } else { T::zero() });
        self.unary(x, v, Op::StraightThrough(x))
    }

    /// `mask · on + (1 − mask) · off` with a (B,1,H,W) mask broadcast over channels.
    pub fn select(&mut self, mask: Var, on: Var, off: Var) -> Result<Var> {
        self.same_dims(on, off)?;
        let (md, d) = (self.dims(mask), self.dims(on));
        ensure!(md.c == 1 && md.spatial_eq(&d), "mask dims {md} do not gate {d}");
        let m = self.value(mask).data();
        let (a, b) = (self.value(on), self.value(off));
        let hw = d.plane();
        let mut out = Vec::with_capacity(d.numel());
        for bi in 0..d.b {
            let mp = &m[bi * hw..(bi + 1) * hw];
            for c in 0..d.c {
                out.extend(
                    a.plane(bi, c)
                        .iter()
                        .zip(b.plane(bi, c))
                        .zip(mp)
                        .map(|((&p, &q), &k)| k * p + (T::one() - k) * q),
                );
            }
        }
        let value = Tensor4::from_vec(d, out)?;
        let rg = self.requires(mask) || self.requires(on) || self.requires(off);
        Ok(self.push(value, Op::Select { mask, on, off }, rg))
    }

    /// `x · mask` with a (B,1,H,W) mask broadcast over channels.
    pub fn mask_mul(&mut self, x: Var, mask: Var) -> Result<Var> {
        let (md, d) = (self.dims(mask), self.dims(x));
        ensure!(md.c == 1 && md.spatial_eq(&d), "mask dims {md} do not gate {d}");
        let m = self.value(mask).data();
        let hw = d.plane();
        let mut out = Vec::with_capacity(d.numel());
        for bi in 0..d.b {
            let mp = &m[bi * hw..(bi + 1) * hw];
            for c in 0..d.c {
                out.extend(self.value(x).plane(bi, c).iter().zip(mp).map(|(&v, &k)| v * k));
            }
        }
        let value = Tensor4::from_vec(d, out)?;
        let rg = self.requires(mask) || self.requires(x);
        Ok(self.push(value, Op::MaskMul { x, mask }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push_reduced(x, s, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.value(x).sum() / n;
        self.push_reduced(x, s, Op::Mean(x))
    }

    /// Squared Frobenius norm.
    pub fn squared_norm(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.f64().powi(2)).sum();
        self.push_reduced(x, s, Op::SquaredNorm(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|p| p * p);
        self.unary(x, v, Op::Square(x))
    }

    /// Mean over pixels of the per-pixel sum over classes of the binary focal
    /// loss. `targets[(b·H + y)·W + x]` holds a class id, 0 for background;
    /// id `k > 0` sets channel `k − 1` positive.
    pub fn focal_loss(&mut self, logits: Var, targets: Rc<Vec<u16>>, gamma: T, alpha: T) -> Result<Var> {
        let d = self.dims(logits);
        ensure!(targets.len() == d.b * d.plane(), "{} targets for logits {d}", targets.len());
        ensure!(targets.iter().all(|&t| (t as usize) <= d.c), "target class id exceeds {} channels", d.c);
        let z = self.value(logits);
        let mut total = 0.0f64;
        for_each_focal(z, &targets, |zv, t| total += focal_value(zv.f64(), t, gamma.f64(), alpha.f64()));
        let mean = total / (d.b * d.plane()).max(1) as f64;
        Ok(self.push_reduced(logits, mean, Op::Focal { logits, targets, gamma, alpha }))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        ensure!(self.value(loss).len() == 1, "loss must be scalar, got dims {}", self.dims(loss));
        let mut grads: Vec<Option<Tensor4<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor4::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor4<T>>], v: Var, g: Tensor4<T>) {
        if !self.requires(v) {
            return;
        }
        match &mut grads[v.0] {
            slot @ None => *slot = Some(g),
            Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a = *a + b),
        }
    }

    fn backprop(&self, node: &Node<T>, g: &Tensor4<T>, grads: &mut [Option<Tensor4<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, k } => {
                let cg = conv_backward(self.value(*x), self.value(*w), g, *k, self.requires(*x));
                if let Some(dx) = cg.input {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, cg.weight);
                if let Some(b) = b {
                    self.accumulate(grads, *b, Tensor4::channel_vector(cg.bias));
                }
            }
            Op::Relu(x) => {
                let dx = self.value(*x).zip_map(g, |v, gv| if v > T::zero() { gv } else { T::zero() })?;
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = node.value.zip_map(g, |y, gv| gv * y * (T::one() - y))?;
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                let da = g.zip_map(self.value(*b), |p, q| p * q)?;
                let db = g.zip_map(self.value(*a), |p, q| p * q)?;
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::AddConst(x) | Op::AddScalar(x, _) | Op::StraightThrough(x) => self.accumulate(grads, *x, g.clone()),
            Op::Scale(x, s) => self.accumulate(grads, *x, g.scale(*s)),
            Op::ChannelAffine { x, scale, shift } => {
                let d = g.dims();
                let xv = self.value(*x);
                let mut ds = vec![T::zero(); d.c];
                let mut db = vec![T::zero(); d.c];
                for b in 0..d.b {
                    for c in 0..d.c {
                        let (gp, xp) = (g.plane(b, c), xv.plane(b, c));
                        db[c] = db[c] + gp.iter().copied().sum::<T>();
                        if scale.is_some() {
                            ds[c] = ds[c] + gp.iter().zip(xp).map(|(&a, &v)| a * v).sum::<T>();
                        }
                    }
                }
                if self.requires(*x) {
                    let sv: Vec<T> = scale.map_or(vec![T::one(); d.c], |s| self.value(s).data().to_vec());
                    let dx = crate::norm::channel_affine(g, &sv, &vec![T::zero(); d.c])?;
                    self.accumulate(grads, *x, dx);
                }
                if let Some(s) = scale {
                    self.accumulate(grads, *s, Tensor4::channel_vector(ds));
                }
                if let Some(sh) = shift {
                    self.accumulate(grads, *sh, Tensor4::channel_vector(db));
                }
            }
            Op::Stats { src, layout, mask } => {
                let sv = self.value(*src);
                let d = sv.dims();
                let hw = d.plane();
                let parts = layout.partitions(d.b);
                let st = node.value.data();
                let gd = g.data();
                let mut counts = vec![0usize; parts];
                for b in 0..d.b {
                    let active = mask.as_ref().map_or(hw, |m| m[b * hw..(b + 1) * hw].iter().filter(|&&on| on).count());
                    for c in 0..d.c {
                        counts[layout.partition(d.c, b, c)] += active;
                    }
                }
                let mut ds = Vec::with_capacity(d.numel());
                for b in 0..d.b {
                    let m = mask.as_ref().map(|m| &m[b * hw..(b + 1) * hw]);
                    for c in 0..d.c {
                        let p = layout.partition(d.c, b, c);
                        let n = counts[p];
                        let (mu, sd) = (st[2 * p], st[2 * p + 1]);
                        let (gm, gs) = (gd[2 * p], gd[2 * p + 1]);
                        let inv_n = if n == 0 { T::zero() } else { T::one() / T::lit(n as f64) };
                        for (k, &v) in sv.plane(b, c).iter().enumerate() {
                            let on = m.is_none_or(|m| m[k]);
                            ds.push(if on { (gm + gs * (v - mu) / sd) * inv_n } else { T::zero() });
                        }
                    }
                }
                self.accumulate(grads, *src, Tensor4::from_vec(d, ds)?);
            }
            Op::Normalize { x, stats, layout } => {
                let xv = self.value(*x);
                let d = xv.dims();
                let st = self.value(*stats).data();
                let mut dstat = vec![T::zero(); st.len()];
                let mut dx = Vec::with_capacity(d.numel());
                for b in 0..d.b {
                    for c in 0..d.c {
                        let p = layout.partition(d.c, b, c);
                        let (mu, sd) = (st[2 * p], st[2 * p + 1]);
                        let (mut gsum, mut gxsum) = (T::zero(), T::zero());
                        for (&gv, &v) in g.plane(b, c).iter().zip(xv.plane(b, c)) {
                            dx.push(gv / sd);
                            gsum = gsum + gv;
                            gxsum = gxsum + gv * (v - mu);
                        }
                        dstat[2 * p] = dstat[2 * p] - gsum / sd;
                        dstat[2 * p + 1] = dstat[2 * p + 1] - gxsum / (sd * sd);
                    }
                }
                self.accumulate(grads, *x, Tensor4::from_vec(d, dx)?);
                self.accumulate(grads, *stats, Tensor4::from_vec(self.dims(*stats), dstat)?);
            }
            Op::Select { mask, on, off } => {
                let m = self.value(*mask);
                let (a, b) = (self.value(*on), self.value(*off));
                let d = g.dims();
                let hw = d.plane();
                let mut da = Vec::with_capacity(d.numel());
                let mut db = Vec::with_capacity(d.numel());
                let mut dm = vec![T::zero(); d.b * hw];
                for bi in 0..d.b {
                    let mp = &m.data()[bi * hw..(bi + 1) * hw];
                    let dmp = &mut dm[bi * hw..(bi + 1) * hw];
                    for c in 0..d.c {
                        for (k, ((&gv, &p), &q)) in g.plane(bi, c).iter().zip(a.plane(bi, c)).zip(b.plane(bi, c)).enumerate() {
                            da.push(gv * mp[k]);
                            db.push(gv * (T::one() - mp[k]));
                            dmp[k] = dmp[k] + gv * (p - q);
                        }
                    }
                }
                self.accumulate(grads, *on, Tensor4::from_vec(d, da)?);
                self.accumulate(grads, *off, Tensor4::from_vec(d, db)?);
                self.accumulate(grads, *mask, Tensor4::from_vec(m.dims(), dm)?);
            }
            Op::MaskMul { x, mask } => {
                let m = self.value(*mask);
                let xv = self.value(*x);
                let d = g.dims();
                let hw = d.plane();
                let mut dx = Vec::with_capacity(d.numel());
                let mut dm = vec![T::zero(); d.b * hw];
                for bi in 0..d.b {
                    let mp = &m.data()[bi * hw..(bi + 1) * hw];
                    let dmp = &mut dm[bi * hw..(bi + 1) * hw];
                    for c in 0..d.c {
                        for (k, (&gv, &v)) in g.plane(bi, c).iter().zip(xv.plane(bi, c)).enumerate() {
                            dx.push(gv * mp[k]);
                            dmp[k] = dmp[k] + gv * v;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor4::from_vec(d, dx)?);
                self.accumulate(grads, *mask, Tensor4::from_vec(m.dims(), dm)?);
            }
            Op::Sum(x) => {
                let gv = g.item();
                self.accumulate(grads, *x, Tensor4::full(self.dims(*x), gv));
            }
            Op::Mean(x) => {
                let n = T::lit(self.value(*x).len().max(1) as f64);
                self.accumulate(grads, *x, Tensor4::full(self.dims(*x), g.item() / n));
            }
            Op::SquaredNorm(x) => {
                let two_g = T::lit(2.0) * g.item();
                self.accumulate(grads, *x, self.value(*x).scale(two_g));
            }
            Op::Square(x) => {
                let dx = self.value(*x).zip_map(g, |v, gv| T::lit(2.0) * v * gv)?;
                self.accumulate(grads, *x, dx);
            }
            Op::Focal { logits, targets, gamma, alpha } => {
                let z = self.value(*logits);
                let d = z.dims();
                let scale = g.item().f64() / (d.b * d.plane()).max(1) as f64;
                let mut dz = Vec::with_capacity(d.numel());
                for_each_focal(z, targets, |zv, t| dz.push(T::lit(scale * focal_grad(zv.f64(), t, gamma.f64(), alpha.f64()))));
                self.accumulate(grads, *logits, Tensor4::from_vec(d, dz)?);
            }
        }
        Ok(())
    }
}

/// Visits every logit in storage order with its binary target.
fn for_each_focal<T: Real>(z: &Tensor4<T>, targets: &[u16], mut f: impl FnMut(T, bool)) {
    let d = z.dims();
    let hw = d.plane();
    for b in 0..d.b {
        let tp = &targets[b * hw..(b + 1) * hw];
        for c in 0..d.c {
            for (&zv, &t) in z.plane(b, c).iter().zip(tp) {
                f(zv, t as usize == c + 1);
            }
        }
    }
}

/// `ln σ(x)` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `−α_t (1 − p_t)^γ ln p_t` for a single logit.
pub fn focal_value(z: f64, positive: bool, gamma: f64, alpha: f64) -> f64 {
    let s = if positive { 1.0 } else { -1.0 };
    let a = if positive { alpha } else { 1.0 - alpha };
    let q = sigmoid64(s * z);
    -a * (1.0 - q).powf(gamma) * log_sigmoid(s * z)
}

pub fn focal_grad(z: f64, positive: bool, gamma: f64, alpha: f64) -> f64 {
    let s = if positive { 1.0 } else { -1.0 };
    let a = if positive { alpha } else { 1.0 - alpha };
    let q = sigmoid64(s * z);
    let one_minus = 1.0 - q;
    -a * s * one_minus.powf(gamma) * (one_minus - gamma * q * log_sigmoid(s * z))
}
