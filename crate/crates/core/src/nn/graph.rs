//! Tape of coarse tensor operations with reverse-mode accumulation.
//!
//! Nodes are appended in execution order, so the tape is already
//! topologically sorted and `backward` is a single reverse sweep.

use matrixmultiply::sgemm;
use rayon::prelude::*;

use super::contrastive::{contrastive_forward_backward, ContrastiveGroup};
use super::regression::{
    finetune_loss_with_grad, CameraDecoding, FineTuneLossWeights, FrameTarget, LossTerms,
    HEAD_DIM,
};
use super::{NnError, Tensor};
use crate::hand::KinematicTemplate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        cols: Vec<f32>,
    },
    Relu(Var),
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    SumSquares(Var),
    /// Loss ops keep their own gradient from the forward pass.
    Loss {
        input: Var,
        grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    loss: Option<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradient of a scalar with respect to every node that requires one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

struct ConvGeom {
    batch: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let p = self.p();
        for c in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * p;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let dst = &mut cols[row + oy * self.ow..row + (oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], dx: &mut [f32]) {
        let p = self.p();
        for c in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * p;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += cols[row + oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c = a · b` for row-major `a` (m×k) and `b` (k×n), with optional
/// transposes expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    beta: f32,
    c: &mut [f32],
) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover the m×k, k×n and m×n extents addressed by
    // the strides above, and `c` does not alias `a` or `b`.
    unsafe {
        sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            loss: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node, NnError> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| NnError::GraphNotBuilt(format!("variable {} is not on this tape", v.0)))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Double-precision value of a loss node.
    pub fn loss_value(&self, v: Var) -> Option<f64> {
        self.nodes.get(v.0).and_then(|n| n.loss)
    }

    fn conv_geom(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<ConvGeom, NnError> {
        let xs = &self.node(x)?.value.shape;
        let ws = &self.node(w)?.value.shape;
        let bs = &self.node(b)?.value.shape;
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || bs != &vec![ws[0]] || stride == 0 {
            return Err(NnError::ShapeMismatch(format!(
                "conv2d input {xs:?}, weight {ws:?}, bias {bs:?}"
            )));
        }
        let (h, wd, kh, kw) = (xs[2], xs[3], ws[2], ws[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(NnError::ShapeMismatch("conv2d kernel larger than padded input".into()));
        }
        Ok(ConvGeom {
            batch: xs[0],
            c: xs[1],
            h,
            w: wd,
            o: ws[0],
            kh,
            kw,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        })
    }

    /// 2D convolution of `x` (`B×C×H×W`) with `w` (`O×C×kh×kw`) and bias `b` (`O`).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, NnError> {
        let g = self.conv_geom(x, w, b, stride, pad)?;
        let (k, p) = (g.k(), g.p());
        let xv = &self.nodes[x.0].value.data;
        let wv = &self.nodes[w.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let mut cols = vec![0.0f32; g.batch * k * p];
        let mut out = vec![0.0f32; g.batch * g.o * p];
        let in_len = g.c * g.h * g.w;
        out.par_chunks_mut(g.o * p)
            .zip(cols.par_chunks_mut(k * p))
            .enumerate()
            .for_each(|(i, (out_b, cols_b))| {
                g.im2col(&xv[i * in_len..(i + 1) * in_len], cols_b);
                gemm(g.o, k, p, wv, false, cols_b, false, 0.0, out_b);
                for (row, bias) in out_b.chunks_mut(p).zip(bv) {
                    row.iter_mut().for_each(|v| *v += bias);
                }
            });
        let value = Tensor::new(vec![g.batch, g.o, g.oh, g.ow], out)?;
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = &self.nodes[x.0].value;
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|v| v.max(0.0)).collect(),
        };
        let rg = self.needs(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    /// Mean over the spatial axes of a `B×C×H×W` tensor.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, NnError> {
        let src = &self.node(x)?.value;
        if src.shape.len() != 4 {
            return Err(NnError::ShapeMismatch(format!("pooling expects 4 axes, got {:?}", src.shape)));
        }
        let (b, c) = (src.shape[0], src.shape[1]);
        let hw = src.shape[2] * src.shape[3];
        let data = src
            .data
            .chunks(hw.max(1))
            .map(|ch| ch.iter().sum::<f32>() / hw as f32)
            .collect();
        let value = Tensor::new(vec![b, c], data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    /// `y = x Wᵀ + b` for `x` (`B×I`), `w` (`O×I`), `b` (`O`).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let (xs, ws, bs) = (
            &self.node(x)?.value.shape,
            &self.node(w)?.value.shape,
            &self.node(b)?.value.shape,
        );
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != &vec![ws[0]] {
            return Err(NnError::ShapeMismatch(format!(
                "linear input {xs:?}, weight {ws:?}, bias {bs:?}"
            )));
        }
        let (bsz, i, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0f32; bsz * o];
        gemm(
            bsz,
            i,
            o,
            &self.nodes[x.0].value.data,
            false,
            &self.nodes[w.0].value.data,
            true,
            0.0,
            &mut out,
        );
        let bv = &self.nodes[b.0].value.data;
        for row in out.chunks_mut(o.max(1)) {
            row.iter_mut().zip(bv).for_each(|(v, b)| *v += b);
        }
        let value = Tensor::new(vec![bsz, o], out)?;
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    /// `Σ x²`.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.data.iter().map(|v| (*v as f64).powi(2)).sum();
        let rg = self.needs(&[x]);
        let v = self.push(Tensor::scalar(s as f32), Op::SumSquares(x), rg);
        self.nodes[v.0].loss = Some(s);
        v
    }

    fn push_loss(&mut self, input: Var, loss: f64, grad: Vec<f64>) -> Var {
        let rg = self.needs(&[input]);
        let v = self.push(Tensor::scalar(loss as f32), Op::Loss { input, grad }, rg);
        self.nodes[v.0].loss = Some(loss);
        v
    }

    /// Mean NT-Xent loss over `groups`, which index rows of `z` (`R×E`).
    pub fn contrastive_loss(
        &mut self,
        z: Var,
        groups: &[ContrastiveGroup],
        tau: f64,
        include_positive: bool,
    ) -> Result<Var, NnError> {
        let zv = &self.node(z)?.value;
        if zv.shape.len() != 2 {
            return Err(NnError::ShapeMismatch(format!("embeddings must be R×E, got {:?}", zv.shape)));
        }
        let want = self.nodes[z.0].requires_grad;
        let (loss, grad) =
            contrastive_forward_backward(&zv.data, zv.shape[1], groups, tau, include_positive, want)?;
        Ok(self.push_loss(z, loss, grad))
    }

    /// Mean fine-tuning loss of a `B×109` head output against `targets`.
    pub fn regression_loss(
        &mut self,
        head: Var,
        targets: &[FrameTarget],
        weights: &FineTuneLossWeights,
        cam: &CameraDecoding,
        tmpl: &KinematicTemplate,
    ) -> Result<(Var, LossTerms), NnError> {
        let hv = &self.node(head)?.value;
        if hv.shape != [targets.len(), HEAD_DIM] {
            return Err(NnError::ShapeMismatch(format!(
                "head output {:?} for {} targets",
                hv.shape,
                targets.len()
            )));
        }
        if targets.is_empty() {
            return Err(NnError::EmptyBatch);
        }
        let want = self.nodes[head.0].requires_grad;
        let per_row: Vec<(LossTerms, Vec<f64>)> = hv
            .data
            .par_chunks(HEAD_DIM)
            .zip(targets.par_iter())
            .map(|(row, t)| {
                let raw: Vec<f64> = row.iter().map(|v| *v as f64).collect();
                finetune_loss_with_grad(&raw, t, weights, cam, tmpl, want)
            })
            .collect::<Result<_, _>>()?;
        let n = targets.len() as f64;
        let mut terms = LossTerms::default();
        let mut grad = Vec::with_capacity(if want { hv.data.len() } else { 0 });
        for (t, g) in &per_row {
            terms.l2d += t.l2d / n;
            terms.l3d += t.l3d / n;
            terms.theta += t.theta / n;
            terms.total += t.total / n;
            grad.extend(g.iter().map(|v| v / n));
        }
        Ok((self.push_loss(head, terms.total, grad), terms))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        let root = self.node(loss)?;
        if root.value.len() != 1 {
            return Err(NnError::ShapeMismatch(format!(
                "backward needs a scalar, got shape {:?}",
                root.value.shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor {
            shape: root.value.shape.clone(),
            data: vec![1.0],
        });
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), NnError> {
        match &node.op {
            Op::Leaf => {}
            Op::Relu(x) => {
                let xv = &self.nodes[x.0].value;
                let data = xv
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(v, d)| if *v > 0.0 { *d } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape.clone(), data)?);
            }
            Op::GlobalAvgPool(x) => {
                let xv = &self.nodes[x.0].value;
                let hw = xv.shape[2] * xv.shape[3];
                let mut data = vec![0.0f32; xv.len()];
                for (ch, d) in data.chunks_mut(hw.max(1)).zip(&g.data) {
                    ch.fill(d / hw as f32);
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape.clone(), data)?);
            }
            Op::SumSquares(x) => {
                let xv = &self.nodes[x.0].value;
                let s = g.data[0];
                let data = xv.data.iter().map(|v| 2.0 * v * s).collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape.clone(), data)?);
            }
            Op::Loss { input, grad } => {
                let xv = &self.nodes[input.0].value;
                let s = g.data[0] as f64;
                let data = grad.iter().map(|v| (v * s) as f32).collect();
                self.accumulate(grads, *input, Tensor::new(xv.shape.clone(), data)?);
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let (bsz, i, o) = (xv.shape[0], xv.shape[1], wv.shape[0]);
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0f32; bsz * i];
                    gemm(bsz, o, i, &g.data, false, &wv.data, false, 0.0, &mut dx);
                    self.accumulate(grads, *x, Tensor::new(xv.shape.clone(), dx)?);
                }
                if self.nodes[w.0].requires_grad {
                    let mut dw = vec![0.0f32; o * i];
                    gemm(o, bsz, i, &g.data, true, &xv.data, false, 0.0, &mut dw);
                    self.accumulate(grads, *w, Tensor::new(wv.shape.clone(), dw)?);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0f32; o];
                    for row in g.data.chunks(o.max(1)) {
                        db.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![o], db)?);
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let geo = self.conv_geom(*x, *w, *b, *stride, *pad)?;
                let (k, p, o) = (geo.k(), geo.p(), geo.o);
                let wv = &self.nodes[w.0].value;
                if self.nodes[w.0].requires_grad {
                    let mut dw = vec![0.0f32; o * k];
                    for (gb, cb) in g.data.chunks(o * p).zip(cols.chunks(k * p)) {
                        gemm(o, p, k, gb, false, cb, true, 1.0, &mut dw);
                    }
                    self.accumulate(grads, *w, Tensor::new(wv.shape.clone(), dw)?);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0f32; o];
                    for gb in g.data.chunks(o * p) {
                        for (d, row) in db.iter_mut().zip(gb.chunks(p)) {
                            *d += row.iter().sum::<f32>();
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![o], db)?);
                }
                if self.nodes[x.0].requires_grad {
                    let in_len = geo.c * geo.h * geo.w;
                    let mut dx = vec![0.0f32; geo.batch * in_len];
                    dx.par_chunks_mut(in_len)
                        .zip(g.data.par_chunks(o * p))
                        .for_each(|(dxb, gb)| {
                            let mut dcols = vec![0.0f32; k * p];
                            gemm(k, o, p, &wv.data, true, gb, false, 0.0, &mut dcols);
                            geo.col2im(&dcols, dxb);
                        });
                    let shape = self.nodes[x.0].value.shape.clone();
                    self.accumulate(grads, *x, Tensor::new(shape, dx)?);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn sum_squares_gradient_is_twice_input() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let l = g.sum_squares(x);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data, vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_foreign_and_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(NnError::ShapeMismatch(_))));
        let empty = Graph::new();
        assert!(matches!(empty.backward(x), Err(NnError::GraphNotBuilt(_))));
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (b, c, h, w, o) = (2, 3, 7, 6, 4);
        let xt = random(&[b, c, h, w], &mut rng);
        let wt = random(&[o, c, 3, 3], &mut rng);
        let bt = random(&[o], &mut rng);
        let mut g = Graph::new();
        let (x, wv, bv) = (g.input(xt.clone()), g.param(wt.clone()), g.param(bt.clone()));
        let y = g.conv2d(x, wv, bv, 2, 1).unwrap();
        let out = g.value(y);
        assert_eq!(out.shape, vec![b, o, 4, 3]);
        for n in 0..b {
            for oc in 0..o {
                for oy in 0..4 {
                    for ox in 0..3 {
                        let mut s = bt.data[oc] as f64;
                        for ic in 0..c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = ((n * c + ic) * h + iy as usize) * w + ix as usize;
                                    let wi = ((oc * c + ic) * 3 + ky) * 3 + kx;
                                    s += xt.data[xi] as f64 * wt.data[wi] as f64;
                                }
                            }
                        }
                        let got = out.data[((n * o + oc) * 4 + oy) * 3 + ox] as f64;
                        assert!((got - s).abs() < 1e-5, "{got} vs {s}");
                    }
                }
            }
        }
    }

    fn chain_loss(xt: &Tensor, params: &[Tensor]) -> (f64, Vec<Tensor>, Tensor) {
        let mut g = Graph::new();
        let x = g.param(xt.clone());
        let p: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
        let c = g.conv2d(x, p[0], p[1], 2, 1).unwrap();
        let r = g.relu(c);
        let pool = g.global_avg_pool(r).unwrap();
        let lin = g.linear(pool, p[2], p[3]).unwrap();
        let l = g.sum_squares(lin);
        let grads = g.backward(l).unwrap();
        (
            g.loss_value(l).unwrap(),
            p.iter().map(|v| grads.get(*v).unwrap().clone()).collect(),
            grads.get(x).unwrap().clone(),
        )
    }

    #[test]
    fn chain_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xt = random(&[2, 2, 5, 5], &mut rng);
        let params = vec![
            random(&[3, 2, 3, 3], &mut rng),
            random(&[3], &mut rng),
            random(&[4, 3], &mut rng),
            random(&[4], &mut rng),
        ];
        let (_, gp, gx) = chain_loss(&xt, &params);
        let h = 1e-3f32;
        let check = |analytic: f32, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * h as f64);
            let err = (analytic as f64 - fd).abs() / fd.abs().max(analytic.abs() as f64).max(1e-2);
            assert!(err < 2e-2, "analytic {analytic} fd {fd}");
        };
        for (pi, t) in params.iter().enumerate() {
            for e in 0..t.len() {
                let mut up = params.clone();
                up[pi].data[e] += h;
                let mut dn = params.clone();
                dn[pi].data[e] -= h;
                check(gp[pi].data[e], chain_loss(&xt, &up).0, chain_loss(&xt, &dn).0);
            }
        }
        for e in 0..xt.len() {
            let mut up = xt.clone();
            up.data[e] += h;
            let mut dn = xt.clone();
            dn.data[e] -= h;
            check(gx.data[e], chain_loss(&up, &params).0, chain_loss(&dn, &params).0);
        }
    }
}
