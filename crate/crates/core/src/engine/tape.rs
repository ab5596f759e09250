//! Reverse-mode tape over whole-tensor ops.
//!
//! Every op appends one node holding its output value. Backward walks the
//! nodes in exact reverse order, so a parameter consumed by `k` ops
//! accumulates `k` contributions.
//!
//! The tape also keeps an exact account of the scalars that backward needs
//! (inputs or outputs an adjoint reads, plus auxiliary buffers such as fire
//! masks). Parameters are not counted. [`Tape::release`] drops values that
//! backward does not need, and in [`TapeMode::Accounting`] drops everything,
//! which lets a rollout be measured without holding its activations.

use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::{self, AxisTaps, ResampleMode};
use super::{shape_err, EngineError, Result, Scalar, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapeMode {
    /// Values needed by backward are retained.
    Train,
    /// Only sizes are recorded once released; backward is unavailable.
    Accounting,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Conv { x: Var, w: Var, b: Var },
    Dense { x: Var, w: Var, b: Option<Var> },
    Relu { x: Var },
    Concat { parts: Vec<Var> },
    Resample { x: Var, rows: AxisTaps, cols: AxisTaps, in_shape: [usize; 3] },
    Crop { x: Var, y0: usize, x0: usize, in_shape: [usize; 3] },
    ReplaceChannel { x: Var, channel: usize },
    SelectChannel { x: Var, channel: usize, in_channels: usize },
    Sigmoid { x: Var },
    CellMask { x: Var, mask: Vec<S> },
    Mul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sum { x: Var },
    Scale { x: Var, factor: S },
    Dice { prob: Var, target: Var, eps: S },
    Bce { prob: Var, target: Var },
}

#[derive(Debug)]
struct Node<S> {
    op: Op<S>,
    shape: Vec<usize>,
    value: Option<Tensor<S>>,
    param: bool,
    requires_grad: bool,
    /// Backward of some later node reads this value.
    saved: bool,
}

/// Recorded computation supporting reverse-mode gradients.
#[derive(Debug)]
pub struct Tape<S> {
    id: u64,
    mode: TapeMode,
    nodes: Vec<Node<S>>,
    aux_saved: usize,
}

/// Parameter gradients returned by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    tape: u64,
    grads: Vec<(usize, Tensor<S>)>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, var: Var) -> Option<&Tensor<S>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.binary_search_by_key(&var.index, |(i, _)| *i).ok().map(|pos| &self.grads[pos].1)
    }

    /// Removes and returns the gradient of `var`.
    pub fn take(&mut self, var: Var) -> Option<Tensor<S>> {
        if var.tape != self.tape {
            return None;
        }
        let pos = self.grads.binary_search_by_key(&var.index, |(i, _)| *i).ok()?;
        Some(std::mem::replace(&mut self.grads[pos].1, Tensor::zeros(&[0])))
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self::with_mode(TapeMode::Train)
    }

    pub fn with_mode(mode: TapeMode) -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), mode, nodes: Vec::new(), aux_saved: 0 }
    }

    pub fn mode(&self) -> TapeMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, var: Var) -> Result<&Node<S>> {
        if var.tape != self.id {
            return Err(EngineError::UnknownVar(var.index));
        }
        self.nodes.get(var.index).ok_or(EngineError::UnknownVar(var.index))
    }

    pub fn value(&self, var: Var) -> Result<&Tensor<S>> {
        self.node(var)?.value.as_ref().ok_or(EngineError::Released(var.index))
    }

    pub fn shape(&self, var: Var) -> Result<&[usize]> {
        Ok(&self.node(var)?.shape)
    }

    fn leaf(&mut self, value: Tensor<S>, param: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            shape: value.shape().to_vec(),
            value: Some(value),
            param,
            requires_grad: param,
            saved: false,
        });
        Var { tape: self.id, index }
    }

    /// Registers a trainable leaf; [`Tape::backward`] returns its gradient.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    fn push(
        &mut self,
        op: &'static str,
        node_op: Op<S>,
        value: Tensor<S>,
        inputs: &[Var],
        saves: &[Var],
    ) -> Result<Var> {
        let value = value.ensure_finite(op)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        for s in saves {
            self.nodes[s.index].saved = true;
        }
        let index = self.nodes.len();
        self.nodes.push(Node {
            op: node_op,
            shape: value.shape().to_vec(),
            value: Some(value),
            param: false,
            requires_grad,
            saved: false,
        });
        Ok(Var { tape: self.id, index })
    }

    fn mark_self_saved(&mut self, var: Var) {
        self.nodes[var.index].saved = true;
    }

    pub fn conv3x3_reflect(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::conv3x3_reflect(self.value(x)?, self.value(w)?, self.value(b)?)?;
        self.push("conv3x3_reflect", Op::Conv { x, w, b }, out, &[x, w, b], &[x, w])
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let bias = match b {
            Some(b) => Some(self.value(b)?),
            None => None,
        };
        let out = ops::dense_per_cell(self.value(x)?, self.value(w)?, bias)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("dense_per_cell", Op::Dense { x, w, b }, out, &inputs, &[x, w])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = ops::relu(self.value(x)?)?;
        let v = self.push("relu", Op::Relu { x }, out, &[x], &[])?;
        self.mark_self_saved(v);
        Ok(v)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values = parts.iter().map(|&p| self.value(p)).collect::<Result<Vec<_>>>()?;
        let out = ops::concat_channels(&values)?;
        self.push("concat_channels", Op::Concat { parts: parts.to_vec() }, out, parts, &[])
    }

    pub fn resample(&mut self, x: Var, out_h: usize, out_w: usize, mode: ResampleMode) -> Result<Var> {
        let input = self.value(x)?;
        let (c, h, w) = input.chw()?;
        let rows = ops::axis_taps(h, out_h, mode)?;
        let cols = ops::axis_taps(w, out_w, mode)?;
        let out = ops::resample_taps(input, &rows, &cols)?;
        let op = Op::Resample { x, rows, cols, in_shape: [c, h, w] };
        self.push("resample", op, out, &[x], &[])
    }

    pub fn crop(&mut self, x: Var, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var> {
        let input = self.value(x)?;
        let (c, ih, iw) = input.chw()?;
        let out = ops::crop(input, y0, x0, h, w)?;
        let op = Op::Crop { x, y0, x0, in_shape: [c, ih, iw] };
        self.push("crop", op, out, &[x], &[])
    }

    /// Overwrites one channel with constant data; no gradient flows into it.
    pub fn replace_channel(&mut self, x: Var, channel: usize, data: &Tensor<S>) -> Result<Var> {
        let mut out = self.value(x)?.clone();
        let (_, h, w) = out.chw()?;
        if data.len() != h * w {
            return shape_err("replace_channel", format!("{:?} into {h}x{w}", data.shape()));
        }
        out.channel_mut(channel)?.copy_from_slice(data.data());
        self.push("replace_channel", Op::ReplaceChannel { x, channel }, out, &[x], &[])
    }

    pub fn select_channel(&mut self, x: Var, channel: usize) -> Result<Var> {
        let input = self.value(x)?;
        let (c, h, w) = input.chw()?;
        let out = Tensor::from_vec(&[1, h, w], input.channel(channel)?.to_vec())?;
        self.push("select_channel", Op::SelectChannel { x, channel, in_channels: c }, out, &[x], &[])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = ops::sigmoid(self.value(x)?);
        let v = self.push("sigmoid", Op::Sigmoid { x }, out, &[x], &[])?;
        self.mark_self_saved(v);
        Ok(v)
    }

    /// Multiplies every channel of `x` by an `H x W` constant mask.
    pub fn cell_mask(&mut self, x: Var, mask: Vec<S>) -> Result<Var> {
        let input = self.value(x)?;
        let (_, h, w) = input.chw()?;
        if mask.len() != h * w {
            return shape_err("cell_mask", format!("mask of {} for {h}x{w}", mask.len()));
        }
        let mut out = input.clone();
        for plane in out.data_mut().chunks_mut(h * w) {
            for (v, &m) in plane.iter_mut().zip(&mask) {
                *v = *v * m;
            }
        }
        self.aux_saved += mask.len();
        self.push("cell_mask", Op::CellMask { x, mask }, out, &[x], &[])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a)?, self.value(b)?);
        if va.shape() != vb.shape() {
            return shape_err("mul", format!("{:?} vs {:?}", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        self.push("mul", Op::Mul { a, b }, out, &[a, b], &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut out = self.value(a)?.clone();
        out.add_assign(self.value(b)?)?;
        self.push("add", Op::Add { a, b }, out, &[a, b], &[])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x)?.sum());
        self.push("sum", Op::Sum { x }, out, &[x], &[])
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Result<Var> {
        let mut out = self.value(x)?.clone();
        out.scale(factor);
        self.push("scale", Op::Scale { x, factor }, out, &[x], &[])
    }

    /// Smoothed Dice loss `1 - (2 sum(p t) + eps) / (sum p + sum t + eps)`.
    pub fn dice_loss(&mut self, prob: Var, target: Var, eps: S) -> Result<Var> {
        let loss = crate::losses::dice_loss(self.value(prob)?, self.value(target)?, eps)
            .map_err(|e| EngineError::Invalid { op: "dice_loss", detail: e.to_string() })?;
        let op = Op::Dice { prob, target, eps };
        self.push("dice_loss", op, Tensor::scalar(loss), &[prob, target], &[prob, target])
    }

    /// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce_loss(&mut self, prob: Var, target: Var) -> Result<Var> {
        let loss = crate::losses::bce_loss(self.value(prob)?, self.value(target)?)
            .map_err(|e| EngineError::Invalid { op: "bce_loss", detail: e.to_string() })?;
        let op = Op::Bce { prob, target };
        self.push("bce_loss", op, Tensor::scalar(loss), &[prob, target], &[prob, target])
    }

    /// Scalars backward would read: saved node values plus auxiliary buffers.
    pub fn saved_scalars(&self) -> usize {
        let values: usize =
            self.nodes.iter().filter(|n| n.saved && !n.param).map(|n| n.shape.iter().product::<usize>()).sum();
        values + self.aux_saved
    }

    /// Scalars currently held in node values, parameters excluded.
    pub fn live_scalars(&self) -> usize {
        self.nodes.iter().filter(|n| !n.param).filter_map(|n| n.value.as_ref().map(Tensor::len)).sum()
    }

    /// Drops node values that are no longer needed. `keep` lists the vars the
    /// caller still reads. In train mode values backward needs are retained;
    /// in accounting mode everything except `keep` and parameters is dropped.
    pub fn release(&mut self, keep: &[Var]) {
        let accounting = self.mode == TapeMode::Accounting;
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if node.param || keep.iter().any(|k| k.index == i) {
                continue;
            }
            if accounting || !node.saved {
                node.value = None;
            }
        }
    }

    /// Reverse-mode sweep from a scalar `loss`, returning gradients of every
    /// registered parameter (zeros for parameters the loss does not reach).
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.mode == TapeMode::Accounting {
            return Err(EngineError::AccountingOnly);
        }
        let loss_node = self.node(loss)?;
        if loss_node.shape.iter().product::<usize>() != 1 {
            return Err(EngineError::NonScalarLoss(loss_node.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..=loss.index).map(|_| None).collect();
        grads[loss.index] = Some(Tensor::from_vec(&loss_node.shape, vec![S::one()])?);

        let mut out = Vec::new();
        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if node.param {
                out.push((i, g));
                continue;
            }
            self.backprop_node(node, g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.param && !out.iter().any(|(j, _)| *j == i) {
                out.push((i, Tensor::zeros(&node.shape)));
            }
        }
        out.sort_by_key(|(i, _)| *i);
        Ok(Gradients { tape: self.id, grads: out })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    fn backprop_node(&self, node: &Node<S>, g: Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor<S>| -> Result<()> {
            match &mut grads[v.index] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b } => {
                let (dx, dw, db) =
                    ops::conv3x3_reflect_backward(self.value(*x)?, self.value(*w)?, g.data(), self.wants(*x));
                if let Some(dx) = dx {
                    acc(*x, dx)?;
                }
                if self.wants(*w) {
                    acc(*w, dw)?;
                }
                if self.wants(*b) {
                    acc(*b, db)?;
                }
            }
            Op::Dense { x, w, b } => {
                let (dx, dw, db) =
                    ops::dense_backward(self.value(*x)?, self.value(*w)?, g.data(), b.is_some(), self.wants(*x));
                if let Some(dx) = dx {
                    acc(*x, dx)?;
                }
                if self.wants(*w) {
                    acc(*w, dw)?;
                }
                if let (Some(b), Some(db)) = (b, db) {
                    if self.wants(*b) {
                        acc(*b, db)?;
                    }
                }
            }
            Op::Relu { x } => {
                let y = node.value.as_ref().ok_or(EngineError::Released(x.index))?;
                let mut d = g;
                for (dv, &yv) in d.data_mut().iter_mut().zip(y.data()) {
                    if yv <= S::zero() {
                        *dv = S::zero();
                    }
                }
                acc(*x, d)?;
            }
            Op::Concat { parts } => {
                let (_, h, w) = g.chw()?;
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p.index].shape[0];
                    if self.wants(p) {
                        let slice = g.data()[offset * h * w..(offset + c) * h * w].to_vec();
                        acc(p, Tensor::from_vec(&[c, h, w], slice)?)?;
                    }
                    offset += c;
                }
            }
            Op::Resample { x, rows, cols, in_shape } => {
                let [c, h, w] = *in_shape;
                acc(*x, ops::resample_taps_backward(g.data(), c, h, w, rows, cols))?;
            }
            Op::Crop { x, y0, x0, in_shape } => {
                let [c, ih, iw] = *in_shape;
                let (_, h, w) = g.chw()?;
                let mut d = vec![S::zero(); c * ih * iw];
                for ch in 0..c {
                    for y in 0..h {
                        let src = &g.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
                        let start = ch * ih * iw + (y0 + y) * iw + x0;
                        d[start..start + w].copy_from_slice(src);
                    }
                }
                acc(*x, Tensor::from_vec(&[c, ih, iw], d)?)?;
            }
            Op::ReplaceChannel { x, channel } => {
                let mut d = g;
                d.channel_mut(*channel)?.iter_mut().for_each(|v| *v = S::zero());
                acc(*x, d)?;
            }
            Op::SelectChannel { x, channel, in_channels } => {
                let (_, h, w) = g.chw()?;
                let mut d = Tensor::zeros(&[*in_channels, h, w]);
                d.channel_mut(*channel)?.copy_from_slice(g.data());
                acc(*x, d)?;
            }
            Op::Sigmoid { x } => {
                let y = node.value.as_ref().ok_or(EngineError::Released(x.index))?;
                let mut d = g;
                for (dv, &yv) in d.data_mut().iter_mut().zip(y.data()) {
                    *dv = *dv * yv * (S::one() - yv);
                }
                acc(*x, d)?;
            }
            Op::CellMask { x, mask } => {
                let mut d = g;
                let hw = mask.len();
                for plane in d.data_mut().chunks_mut(hw) {
                    for (v, &m) in plane.iter_mut().zip(mask) {
                        *v = *v * m;
                    }
                }
                acc(*x, d)?;
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a)?, self.value(*b)?);
                if self.wants(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(&gv, &bv)| gv * bv).collect();
                    acc(*a, Tensor::from_vec(va.shape(), d)?)?;
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(&gv, &av)| gv * av).collect();
                    acc(*b, Tensor::from_vec(vb.shape(), d)?)?;
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    acc(*a, g.clone())?;
                }
                if self.wants(*b) {
                    acc(*b, g)?;
                }
            }
            Op::Sum { x } => {
                let shape = &self.nodes[x.index].shape;
                acc(*x, Tensor::full(shape, g.item()?))?;
            }
            Op::Scale { x, factor } => {
                let mut d = g;
                d.scale(*factor);
                acc(*x, d)?;
            }
            Op::Dice { prob, target, eps } => {
                let gp = crate::losses::dice_loss_grad(self.value(*prob)?, self.value(*target)?, *eps);
                let mut d = gp;
                d.scale(g.item()?);
                acc(*prob, d)?;
            }
            Op::Bce { prob, target } => {
                let mut d = crate::losses::bce_loss_grad(self.value(*prob)?, self.value(*target)?);
                d.scale(g.item()?);
                acc(*prob, d)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(Tensor::from_f64(&[3], &[1.0, -2.0, 5.0]).unwrap());
        let l = tape.sum(p).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_at_three_gives_six() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(Tensor::scalar(3.0));
        let sq = tape.mul(p, p).unwrap();
        let l = tape.sum(sq).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn reused_param_accumulates() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(Tensor::scalar(2.0));
        let a = tape.scale(p, 3.0).unwrap();
        let b = tape.scale(p, 4.0).unwrap();
        let c = tape.add(a, b).unwrap();
        let l = tape.add(c, p).unwrap();
        assert_eq!(tape.backward(l).unwrap().get(p).unwrap().item().unwrap(), 8.0);
    }

    #[test]
    fn rejects_non_scalar_and_foreign_loss() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(p), Err(EngineError::NonScalarLoss(_))));
        let mut other = Tape::<f64>::new();
        let q = other.param(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(q), Err(EngineError::UnknownVar(_))));
    }

    #[test]
    fn unreached_param_gets_zeros() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(Tensor::scalar(1.0));
        let q = tape.param(Tensor::zeros(&[2, 2]));
        let l = tape.sum(p).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(q).unwrap(), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn accounting_tape_refuses_backward_and_releases() {
        let mut tape = Tape::<f64>::with_mode(TapeMode::Accounting);
        let x = tape.constant(Tensor::full(&[1, 2, 2], 1.0));
        let y = tape.relu(x).unwrap();
        let z = tape.sum(y).unwrap();
        assert_eq!(tape.saved_scalars(), 4);
        tape.release(&[z]);
        assert_eq!(tape.live_scalars(), 1);
        assert_eq!(tape.saved_scalars(), 4);
        assert!(matches!(tape.backward(z), Err(EngineError::AccountingOnly)));
        assert!(matches!(tape.value(y), Err(EngineError::Released(_))));
    }
}
