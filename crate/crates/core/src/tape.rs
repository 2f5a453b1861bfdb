//! Reverse-mode differentiation over a Wengert list.
//!
//! Every differentiable operation appends one node holding its output value.
//! Nodes are only ever appended after their inputs, so walking the list
//! backwards from the loss visits each record once in reverse topological
//! order.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch-norm normalisation source.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    /// Normalise by the statistics of the current batch.
    Train,
    /// Normalise by tracked running statistics.
    Eval {
        running_mean: &'a [T],
        running_var: &'a [T],
    },
}

/// Statistics of one training-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (Bessel-corrected) variance, the quantity tracked as running variance.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geometry: ConvGeometry,
    },
    Relu(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    AvgPool(Var),
    Reshape(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Rows {
        input: Var,
        start: usize,
    },
    Distance {
        a: Var,
        b: Var,
    },
    Contrastive {
        distance: Var,
        different: Vec<bool>,
        margin: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
}

/// Ordered record of executed operations.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by the last [`Tape::backward`], if the node was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of `v`, zero-filled when the loss does not depend on it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("conv2d")?;
        let [k, kc, kh, kw] = self.value(kernel).dims4("conv2d")?;
        if kc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels, kernel expects {kc}"),
            ));
        }
        let (out_h, out_w) = match (
            kernels::conv_out_dim(h, kh, stride, padding),
            kernels::conv_out_dim(w, kw, stride, padding),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("{h}x{w} input too small for {kh}x{kw} kernel (stride {stride}, padding {padding})"),
                ))
            }
        };
        let geometry = ConvGeometry {
            batch: n,
            in_channels: c,
            height: h,
            width: w,
            out_channels: k,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h,
            out_w,
        };
        let out = kernels::conv2d_forward(&geometry, self.value(input).data(), self.value(kernel).data());
        let value = Tensor::new(&[n, k, out_h, out_w], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geometry,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(value, Op::Relu(input))
    }

    /// Per-channel batch normalisation with scale `gamma` and shift `beta`.
    ///
    /// In training mode the returned statistics feed the caller's running
    /// averages; in eval mode they are `None`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let [n, c, h, w] = self.value(input).dims4("batch_norm")?;
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.value(p).shape() != [c] {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{name} shape {:?}, expected [{c}]", self.value(p).shape()),
                ));
            }
        }
        let plane = h * w;
        let eps = T::of(BN_EPSILON);
        let x = self.value(input).data();
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                if n * plane == 0 {
                    return Err(Error::Contract("batch_norm needs at least one value per channel".into()));
                }
                let (mean, var) = kernels::channel_stats(x, n, c, plane);
                let count = (n * plane) as f64;
                let correction = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let unbiased = var.iter().map(|&v| v * T::of(correction)).collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval {
                running_mean,
                running_var,
            } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(Error::shape("batch_norm", "running statistics length differs from channels"));
                }
                (running_mean.to_vec(), running_var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut normalized = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..n {
            for ch in 0..c {
                let base = (bi * c + ch) * plane;
                for i in base..base + plane {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    normalized[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        let var = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                training: stats.is_some(),
            },
        );
        Ok((var, stats))
    }

    /// Mean over each `H × W` plane; output `[N, C, 1, 1]`.
    pub fn adaptive_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("adaptive_avg_pool")?;
        let plane = h * w;
        if plane == 0 {
            return Err(Error::shape("adaptive_avg_pool", "empty spatial plane"));
        }
        let denom = T::of(plane as f64);
        let x = self.value(input).data();
        let out = (0..n * c)
            .map(|i| x[i * plane..(i + 1) * plane].iter().copied().sum::<T>() / denom)
            .collect();
        let value = Tensor::new(&[n, c, 1, 1], out)?;
        Ok(self.push(value, Op::AvgPool(input)))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(input)))
    }

    /// Affine map `input · weightᵀ + bias`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let [n, d_in] = self.value(input).dims2("fully_connected")?;
        let [d_out, w_in] = self.value(weight).dims2("fully_connected")?;
        if w_in != d_in || self.value(bias).shape() != [d_out] {
            return Err(Error::shape(
                "fully_connected",
                format!(
                    "input [{n}, {d_in}], weight [{d_out}, {w_in}], bias {:?}",
                    self.value(bias).shape()
                ),
            ));
        }
        let w_t = kernels::transpose(self.value(weight).data(), d_out, d_in);
        let bias_v = self.value(bias).data();
        let mut out: Vec<T> = (0..n).flat_map(|_| bias_v.iter().copied()).collect();
        kernels::gemm_acc(self.value(input).data(), &w_t, &mut out, n, d_in, d_out);
        let value = Tensor::new(&[n, d_out], out)?;
        Ok(self.push(value, Op::Linear { input, weight, bias }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let value = self.value(input).map(|x| x * factor);
        self.push(value, Op::Scale(input, factor))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        self.push(value, Op::Sum(input))
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn rows(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(input);
        let total = *src
            .shape()
            .first()
            .ok_or_else(|| Error::shape("rows", "rank-0 input"))?;
        if start + len > total {
            return Err(Error::shape("rows", format!("rows {start}..{} of {total}", start + len)));
        }
        let stride = src.numel() / total.max(1);
        let mut shape = src.shape().to_vec();
        shape[0] = len;
        let value = Tensor::new(&shape, src.data()[start * stride..(start + len) * stride].to_vec())?;
        Ok(self.push(value, Op::Rows { input, start }))
    }

    /// Euclidean distance along the last axis; the output drops that axis.
    ///
    /// A `[D]` pair yields a scalar, an `[N, D]` pair yields `[N]`.
    pub fn l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l2_distance", a, b)?;
        let shape = self.value(a).shape();
        let Some((&dim, lead)) = shape.split_last() else {
            return Err(Error::shape("l2_distance", "rank-0 input"));
        };
        let lead = lead.to_vec();
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let out: Vec<T> = x
            .chunks(dim.max(1))
            .zip(y.chunks(dim.max(1)))
            .map(|(r, s)| {
                r.iter()
                    .zip(s)
                    .map(|(&p, &q)| (p - q) * (p - q))
                    .sum::<T>()
                    .sqrt()
            })
            .collect();
        let value = Tensor::new(&lead, out)?;
        Ok(self.push(value, Op::Distance { a, b }))
    }

    /// Per-pair contrastive terms: `½D²` for same-class pairs and
    /// `½max(0, margin − D)²` for different-class pairs.
    pub fn contrastive(&mut self, distance: Var, different: &[bool], margin: T) -> Result<Var> {
        let d = self.value(distance);
        if d.numel() != different.len() {
            return Err(Error::shape(
                "contrastive",
                format!("{} distances, {} labels", d.numel(), different.len()),
            ));
        }
        let half = T::of(0.5);
        let out = d
            .data()
            .iter()
            .zip(different)
            .map(|(&dist, &diff)| {
                if diff {
                    let gap = (margin - dist).max(T::zero());
                    half * gap * gap
                } else {
                    half * dist * dist
                }
            })
            .collect();
        let value = Tensor::new(d.shape(), out)?;
        Ok(self.push(
            value,
            Op::Contrastive {
                distance,
                different: different.to_vec(),
                margin,
            },
        ))
    }

    /// Propagates gradients from scalar `loss` to every node it depends on.
    ///
    /// Gradients from an earlier call are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss does not belong to this tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let seed = Tensor::full(self.value(loss).shape(), T::one());
        self.nodes[loss.0].grad = Some(seed);
        for i in (0..=loss.0).rev() {
            let Some(grad) = self.nodes[i].grad.as_ref() else {
                continue;
            };
            let contributions = self.local_gradients(i, grad)?;
            for (target, g) in contributions {
                self.accumulate(target, g);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, target: Var, g: Tensor<T>) {
        match &mut self.nodes[target.0].grad {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn local_gradients(&self, i: usize, grad: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let g = grad.data();
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                kernel,
                geometry,
            } => {
                let (d_in, d_k) = kernels::conv2d_backward(
                    geometry,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g,
                );
                vec![
                    (*input, Tensor::new(self.value(*input).shape(), d_in)?),
                    (*kernel, Tensor::new(self.value(*kernel).shape(), d_k)?),
                ]
            }
            Op::Relu(input) => {
                let x = self.value(*input).data();
                let d = x
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                vec![(*input, Tensor::new(self.value(*input).shape(), d)?)]
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                training,
            } => {
                let [n, c, h, w] = self.value(*input).dims4("batch_norm")?;
                let plane = h * w;
                let gam = self.value(*gamma).data();
                let mut d_gamma = vec![T::zero(); c];
                let mut d_beta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        for j in base..base + plane {
                            d_beta[ch] += g[j];
                            d_gamma[ch] += g[j] * normalized[j];
                        }
                    }
                }
                let mut d_in = vec![T::zero(); g.len()];
                let count = T::of((n * plane) as f64);
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        let k = gam[ch] * inv_std[ch];
                        for j in base..base + plane {
                            d_in[j] = if *training {
                                k / count * (count * g[j] - d_beta[ch] - normalized[j] * d_gamma[ch])
                            } else {
                                k * g[j]
                            };
                        }
                    }
                }
                vec![
                    (*input, Tensor::new(&[n, c, h, w], d_in)?),
                    (*gamma, Tensor::new(&[c], d_gamma)?),
                    (*beta, Tensor::new(&[c], d_beta)?),
                ]
            }
            Op::AvgPool(input) => {
                let [_, _, h, w] = self.value(*input).dims4("adaptive_avg_pool")?;
                let plane = h * w;
                let scale = T::one() / T::of(plane as f64);
                let d = g
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv * scale, plane))
                    .collect();
                vec![(*input, Tensor::new(self.value(*input).shape(), d)?)]
            }
            Op::Reshape(input) => {
                vec![(*input, grad.clone().reshape(self.value(*input).shape())?)]
            }
            Op::Linear { input, weight, bias } => {
                let [n, d_in] = self.value(*input).dims2("fully_connected")?;
                let [d_out, _] = self.value(*weight).dims2("fully_connected")?;
                let mut dx = vec![T::zero(); n * d_in];
                kernels::gemm_acc(g, self.value(*weight).data(), &mut dx, n, d_out, d_in);
                let g_t = kernels::transpose(g, n, d_out);
                let mut dw = vec![T::zero(); d_out * d_in];
                kernels::gemm_acc(&g_t, self.value(*input).data(), &mut dw, d_out, n, d_in);
                let mut db = vec![T::zero(); d_out];
                for row in g.chunks(d_out) {
                    for (acc, &v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![
                    (*input, Tensor::new(&[n, d_in], dx)?),
                    (*weight, Tensor::new(&[d_out, d_in], dw)?),
                    (*bias, Tensor::new(&[d_out], db)?),
                ]
            }
            Op::Add(a, b) => vec![(*a, grad.clone()), (*b, grad.clone())],
            Op::Mul(a, b) => {
                let da = g.iter().zip(self.value(*b).data()).map(|(&gv, &y)| gv * y).collect();
                let db = g.iter().zip(self.value(*a).data()).map(|(&gv, &x)| gv * x).collect();
                vec![
                    (*a, Tensor::new(grad.shape(), da)?),
                    (*b, Tensor::new(grad.shape(), db)?),
                ]
            }
            Op::Scale(input, factor) => vec![(*input, grad.map(|x| x * *factor))],
            Op::Sum(input) => {
                let gv = g[0];
                vec![(*input, Tensor::full(self.value(*input).shape(), gv))]
            }
            Op::Rows { input, start } => {
                let src = self.value(*input);
                let stride = src.numel() / src.shape()[0].max(1);
                let mut d = vec![T::zero(); src.numel()];
                d[start * stride..start * stride + g.len()].copy_from_slice(g);
                vec![(*input, Tensor::new(src.shape(), d)?)]
            }
            Op::Distance { a, b } => {
                let x = self.value(*a).data();
                let y = self.value(*b).data();
                let dim = x.len() / g.len().max(1);
                let dist = node.value.data();
                let mut da = vec![T::zero(); x.len()];
                for (r, (&gv, &dv)) in g.iter().zip(dist).enumerate() {
                    // At zero distance the norm has no gradient; use the zero subgradient.
                    if dv == T::zero() {
                        continue;
                    }
                    for j in r * dim..(r + 1) * dim {
                        da[j] = gv * (x[j] - y[j]) / dv;
                    }
                }
                let db = da.iter().map(|&v| -v).collect();
                vec![
                    (*a, Tensor::new(self.value(*a).shape(), da)?),
                    (*b, Tensor::new(self.value(*b).shape(), db)?),
                ]
            }
            Op::Contrastive {
                distance,
                different,
                margin,
            } => {
                let dist = self.value(*distance).data();
                let d = dist
                    .iter()
                    .zip(different)
                    .zip(g)
                    .map(|((&dv, &diff), &gv)| gv * crate::contrastive::pair_loss_slope(dv, diff, *margin))
                    .collect();
                vec![(*distance, Tensor::new(self.value(*distance).shape(), d)?)]
            }
        };
        Ok(out)
    }
}
