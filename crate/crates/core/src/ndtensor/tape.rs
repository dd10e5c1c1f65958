use super::kernels::{self, ConvGeom, ConvSpec};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::par;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
    },
    GlobalAvgPool {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Abs(Var),
    Clamp {
        input: Var,
        lo: f64,
        hi: f64,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    ScalarMul(Var, f64),
    Sum(Var),
    Mean(Var),
    SumPerItem(Var),
    Concat(Vec<Var>),
    ChannelScale {
        input: Var,
        scale: Var,
    },
    Column {
        input: Var,
        index: usize,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Conv2d {
                input,
                weight,
                bias,
                ..
            }
            | Linear {
                input,
                weight,
                bias,
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            MaxPool { input, .. }
            | Upsample { input }
            | GlobalAvgPool { input }
            | Clamp { input, .. }
            | Column { input, .. } => vec![*input],
            Relu(a) | Sigmoid(a) | Ln(a) | Abs(a) | AddScalar(a) | ScalarMul(a, _) | Sum(a)
            | Mean(a) | SumPerItem(a) => vec![*a],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![*a, *b],
            Concat(v) => v.clone(),
            ChannelScale { input, scale } => vec![*input, *scale],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Reverse-mode differentiation tape. Operations are appended in execution
/// order; [`Tape::backward`] replays them in exact reverse order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Records a leaf that accumulates gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, present once a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Same value as `v`, cut off from the producing graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, requires_grad, op)
    }

    // ---- convolution family -------------------------------------------

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    ) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("conv2d")?;
        let [o, wc, kh, kw] = self.value(weight).dims4("conv2d weight")?;
        if kh != kw {
            return Err(Error::shape("conv2d", format!("non-square kernel {kh}x{kw}")));
        }
        if wc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels, weight expects {wc}"),
            ));
        }
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(Error::shape("conv2d", "stride and dilation must be >= 1"));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [o] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?}, expected [{o}]", self.value(b).shape()),
                ));
            }
        }
        let (Some(ho), Some(wo)) = (spec.out_len(h, kh), spec.out_len(w, kw)) else {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh} with {spec:?} does not fit a {h}x{w} input"),
            ));
        };
        let g = ConvGeom {
            c,
            h,
            w,
            k: kh,
            ho,
            wo,
            spec,
        };
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let b = bias.map(|b| self.value(b).data());
        let per_in = c * h * w;
        let items = par::map_indexed(n, |i| {
            kernels::conv_forward_item(&x[i * per_in..(i + 1) * per_in], wt, b, o, &g)
        });
        let out = Tensor::new(&[n, o, ho, wo], items.concat())?;
        Ok(self.record(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            },
        ))
    }

    pub fn maxpool2d(
        &mut self,
        input: Var,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("maxpool2d")?;
        // every window must contain at least one real pixel
        if kernel == 0 || stride == 0 || 2 * padding > kernel {
            return Err(Error::shape(
                "maxpool2d",
                format!("invalid kernel {kernel}, stride {stride}, padding {padding}"),
            ));
        }
        let spec = ConvSpec {
            stride,
            padding,
            dilation: 1,
        };
        let (Some(ho), Some(wo)) = (spec.out_len(h, kernel), spec.out_len(w, kernel)) else {
            return Err(Error::shape("maxpool2d", format!("kernel {kernel} exceeds {h}x{w}")));
        };
        let x = self.value(input).data();
        let planes = par::map_indexed(n * c, |p| {
            kernels::maxpool_plane(
                &x[p * h * w..(p + 1) * h * w],
                h,
                w,
                kernel,
                stride,
                padding,
                ho,
                wo,
            )
        });
        let mut vals = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for (p, (v, a)) in planes.into_iter().enumerate() {
            vals.extend(v);
            argmax.extend(a.into_iter().map(|i| p * h * w + i));
        }
        let out = Tensor::new(&[n, c, ho, wo], vals)?;
        Ok(self.record(out, Op::MaxPool { input, argmax }))
    }

    /// Bilinear upsampling by an integer factor, align-corners=false.
    pub fn bilinear_upsample(&mut self, input: Var, scale: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("bilinear_upsample")?;
        if scale == 0 {
            return Err(Error::shape("bilinear_upsample", "scale must be >= 1"));
        }
        let (ho, wo) = (h * scale, w * scale);
        let ys = kernels::bilinear_taps(h, ho);
        let xs = kernels::bilinear_taps(w, wo);
        let x = self.value(input).data();
        let mut out = vec![0.0; n * c * ho * wo];
        par::for_each_chunk_mut(&mut out, ho * wo, |p, dst| {
            kernels::bilinear_plane(&x[p * h * w..(p + 1) * h * w], w, &ys, &xs, dst)
        });
        let out = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.record(out, Op::Upsample { input }))
    }

    /// Mean over each H×W plane; output is batch×channels×1×1.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("global_avg_pool")?;
        let plane = h * w;
        let out: Vec<f64> = self
            .value(input)
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let out = Tensor::new(&[n, c, 1, 1], out)?;
        Ok(self.record(out, Op::GlobalAvgPool { input }))
    }

    /// Affine map on the flattened trailing axes: input batch×in, weight out×in.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.value(input).shape();
        let n = xs[0];
        let fan_in = self.value(input).numel() / n.max(1);
        let ws = self.value(weight).shape();
        if ws.len() != 2 || ws[1] != fan_in {
            return Err(Error::shape(
                "linear",
                format!("input {xs:?} does not match weight {ws:?}"),
            ));
        }
        let o = ws[0];
        if let Some(b) = bias {
            if self.value(b).shape() != [o] {
                return Err(Error::shape("linear", format!("bias must be [{o}]")));
            }
        }
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let b = bias.map(|b| self.value(b).data());
        let mut out = Vec::with_capacity(n * o);
        for i in 0..n {
            let row = &x[i * fan_in..(i + 1) * fan_in];
            for j in 0..o {
                let base = b.map_or(0.0, |b| b[j]);
                out.push(base + kernels::dot(&wt[j * fan_in..(j + 1) * fan_in], row));
            }
        }
        let out = Tensor::new(&[n, o], out)?;
        Ok(self.record(
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    // ---- elementwise ---------------------------------------------------

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        self.record(out, op)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |v| v.clamp(lo, hi), Op::Clamp { input: a, lo, hi })
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |v| v + s, Op::AddScalar(a))
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |v| v * s, Op::ScalarMul(a, s))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.record(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    // ---- reductions and reshaping ---------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.record(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.record(Tensor::scalar(s), Op::Mean(a))
    }

    /// Sums everything but the leading axis; output is batch×1.
    pub fn sum_per_item(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.shape()[0];
        let per = t.numel() / n.max(1);
        let data: Vec<f64> = t.data().chunks(per).map(|c| c.iter().sum()).collect();
        let out = Tensor::new(&[n, 1], data).expect("n×1");
        self.record(out, Op::SumPerItem(a))
    }

    /// Concatenates along axis 1. All inputs share axis 0 and the trailing axes.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat", "nothing to concatenate"))?;
        let s0 = self.shape(first).to_vec();
        if s0.len() < 2 {
            return Err(Error::shape("concat", "inputs need rank >= 2"));
        }
        let (n, tail) = (s0[0], &s0[2..]);
        let inner: usize = tail.iter().product();
        let mut chans = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len() || s[0] != n || &s[2..] != tail {
                return Err(Error::shape("concat", format!("{s:?} vs {s0:?}")));
            }
            chans += s[1];
        }
        let mut data = Vec::with_capacity(n * chans * inner);
        for i in 0..n {
            for &p in parts {
                let t = self.value(p);
                let per = t.shape()[1] * inner;
                data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
            }
        }
        let mut shape = vec![n, chans];
        shape.extend_from_slice(tail);
        let out = Tensor::new(&shape, data)?;
        Ok(self.record(out, Op::Concat(parts.to_vec())))
    }

    /// Multiplies each (item, channel) plane of `input` by a scale. `scale`
    /// holds either one value per item or one per item and channel.
    pub fn channel_scale(&mut self, input: Var, scale: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("channel_scale")?;
        let sn = self.value(scale).numel();
        if self.shape(scale)[0] != n || (sn != n && sn != n * c) {
            return Err(Error::shape(
                "channel_scale",
                format!("scale {:?} for input {:?}", self.shape(scale), [n, c, h, w]),
            ));
        }
        let per_item = sn / n;
        let (x, s) = (self.value(input).data(), self.value(scale).data());
        let plane = h * w;
        let data = x
            .chunks(plane)
            .enumerate()
            .flat_map(|(p, chunk)| {
                let f = s[scale_index(p, c, per_item)];
                chunk.iter().map(move |&v| v * f)
            })
            .collect();
        let out = Tensor::new(&[n, c, h, w], data)?;
        Ok(self.record(out, Op::ChannelScale { input, scale }))
    }

    /// Column `index` of a batch×k matrix, as batch×1.
    pub fn column(&mut self, input: Var, index: usize) -> Result<Var> {
        let s = self.shape(input);
        if s.len() != 2 || index >= s[1] {
            return Err(Error::shape("column", format!("column {index} of {s:?}")));
        }
        let (n, k) = (s[0], s[1]);
        let x = self.value(input).data();
        let data = (0..n).map(|i| x[i * k + index]).collect();
        let out = Tensor::new(&[n, 1], data)?;
        Ok(self.record(out, Op::Column { input, index }))
    }

    // ---- backward -------------------------------------------------------

    /// Back-propagates from a scalar `loss`, adding into the stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                match &mut self.grads[i] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(a, b)| *a += b),
                    slot => {
                        *slot = Some(
                            Tensor::new(node.value.shape(), g.clone()).expect("grad shape"),
                        )
                    }
                }
            }
            self.propagate(i, &g, &mut local);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut give = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = local[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        let out = node.value.data();

        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => {
                let x = &self.nodes[input.0].value;
                let [n, c, h, w] = x.dims4("conv2d").expect("checked in forward");
                let wt = &self.nodes[weight.0].value;
                let [o, _, k, _] = wt.dims4("conv2d").expect("checked in forward");
                let [_, _, ho, wo] = node.value.dims4("conv2d").expect("rank 4");
                let geom = ConvGeom {
                    c,
                    h,
                    w,
                    k,
                    ho,
                    wo,
                    spec: *spec,
                };
                let need_input = wants(*input);
                let (per_in, per_out) = (c * h * w, o * ho * wo);
                let items = par::map_indexed(n, |b| {
                    kernels::conv_backward_item(
                        &x.data()[b * per_in..(b + 1) * per_in],
                        wt.data(),
                        &g[b * per_out..(b + 1) * per_out],
                        o,
                        &geom,
                        need_input,
                    )
                });
                give(*input, &|dst| {
                    for (b, it) in items.iter().enumerate() {
                        dst[b * per_in..(b + 1) * per_in]
                            .iter_mut()
                            .zip(&it.input)
                            .for_each(|(d, s)| *d += s);
                    }
                });
                give(*weight, &|dst| {
                    for it in &items {
                        dst.iter_mut().zip(&it.weight).for_each(|(d, s)| *d += s);
                    }
                });
                if let Some(b) = bias {
                    give(*b, &|dst| {
                        for it in &items {
                            dst.iter_mut().zip(&it.bias).for_each(|(d, s)| *d += s);
                        }
                    });
                }
            }
            Op::MaxPool { input, argmax } => give(*input, &|dst| {
                for (&a, &gv) in argmax.iter().zip(g) {
                    dst[a] += gv;
                }
            }),
            Op::Upsample { input } => {
                let [n, c, h, w] = self.nodes[input.0].value.dims4("upsample").expect("rank 4");
                let [_, _, ho, wo] = node.value.dims4("upsample").expect("rank 4");
                let ys = kernels::bilinear_taps(h, ho);
                let xs = kernels::bilinear_taps(w, wo);
                give(*input, &|dst| {
                    for p in 0..n * c {
                        kernels::bilinear_plane_backward(
                            &g[p * ho * wo..(p + 1) * ho * wo],
                            w,
                            &ys,
                            &xs,
                            &mut dst[p * h * w..(p + 1) * h * w],
                        );
                    }
                });
            }
            Op::GlobalAvgPool { input } => {
                let plane = self.nodes[input.0].value.numel() / out.len();
                give(*input, &|dst| {
                    for (p, chunk) in dst.chunks_mut(plane).enumerate() {
                        let v = g[p] / plane as f64;
                        chunk.iter_mut().for_each(|d| *d += v);
                    }
                });
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = val(*input);
                let wt = val(*weight);
                let o = self.nodes[weight.0].value.shape()[0];
                let fan_in = wt.len() / o;
                let n = x.len() / fan_in;
                give(*input, &|dst| {
                    for i in 0..n {
                        for j in 0..o {
                            let gv = g[i * o + j];
                            let row = &wt[j * fan_in..(j + 1) * fan_in];
                            dst[i * fan_in..(i + 1) * fan_in]
                                .iter_mut()
                                .zip(row)
                                .for_each(|(d, w)| *d += gv * w);
                        }
                    }
                });
                give(*weight, &|dst| {
                    for i in 0..n {
                        let row = &x[i * fan_in..(i + 1) * fan_in];
                        for j in 0..o {
                            let gv = g[i * o + j];
                            dst[j * fan_in..(j + 1) * fan_in]
                                .iter_mut()
                                .zip(row)
                                .for_each(|(d, xv)| *d += gv * xv);
                        }
                    }
                });
                if let Some(b) = bias {
                    give(*b, &|dst| {
                        for i in 0..n {
                            dst.iter_mut()
                                .zip(&g[i * o..(i + 1) * o])
                                .for_each(|(d, gv)| *d += gv);
                        }
                    });
                }
            }
            Op::Relu(a) => {
                let x = val(*a);
                give(*a, &|dst| {
                    for ((d, &xv), &gv) in dst.iter_mut().zip(x).zip(g) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                })
            }
            Op::Sigmoid(a) => give(*a, &|dst| {
                for ((d, &y), &gv) in dst.iter_mut().zip(out).zip(g) {
                    *d += gv * y * (1.0 - y);
                }
            }),
            Op::Ln(a) => {
                let x = val(*a);
                give(*a, &|dst| {
                    for ((d, &xv), &gv) in dst.iter_mut().zip(x).zip(g) {
                        *d += gv / xv;
                    }
                })
            }
            Op::Abs(a) => {
                let x = val(*a);
                give(*a, &|dst| {
                    for ((d, &xv), &gv) in dst.iter_mut().zip(x).zip(g) {
                        if xv > 0.0 {
                            *d += gv;
                        } else if xv < 0.0 {
                            *d -= gv;
                        }
                    }
                })
            }
            Op::Clamp { input, lo, hi } => {
                let x = val(*input);
                give(*input, &|dst| {
                    for ((d, &xv), &gv) in dst.iter_mut().zip(x).zip(g) {
                        if xv >= *lo && xv <= *hi {
                            *d += gv;
                        }
                    }
                })
            }
            Op::Add(a, b) => {
                give(*a, &|dst| add_into(dst, g));
                give(*b, &|dst| add_into(dst, g));
            }
            Op::Sub(a, b) => {
                give(*a, &|dst| add_into(dst, g));
                give(*b, &|dst| dst.iter_mut().zip(g).for_each(|(d, gv)| *d -= gv));
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                give(*a, &|dst| {
                    for ((d, &yv), &gv) in dst.iter_mut().zip(y).zip(g) {
                        *d += gv * yv;
                    }
                });
                give(*b, &|dst| {
                    for ((d, &xv), &gv) in dst.iter_mut().zip(x).zip(g) {
                        *d += gv * xv;
                    }
                });
            }
            Op::Div(a, b) => {
                let (x, y) = (val(*a), val(*b));
                give(*a, &|dst| {
                    for ((d, &yv), &gv) in dst.iter_mut().zip(y).zip(g) {
                        *d += gv / yv;
                    }
                });
                give(*b, &|dst| {
                    for (((d, &xv), &yv), &gv) in dst.iter_mut().zip(x).zip(y).zip(g) {
                        *d -= gv * xv / (yv * yv);
                    }
                });
            }
            Op::AddScalar(a) => give(*a, &|dst| add_into(dst, g)),
            Op::ScalarMul(a, s) => give(*a, &|dst| {
                dst.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * s)
            }),
            Op::Sum(a) => give(*a, &|dst| dst.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => give(*a, &|dst| {
                let v = g[0] / dst.len() as f64;
                dst.iter_mut().for_each(|d| *d += v)
            }),
            Op::SumPerItem(a) => give(*a, &|dst| {
                let per = dst.len() / g.len();
                for (chunk, &gv) in dst.chunks_mut(per).zip(g) {
                    chunk.iter_mut().for_each(|d| *d += gv);
                }
            }),
            Op::Concat(parts) => {
                let s = node.value.shape();
                let n = s[0];
                let inner: usize = s[2..].iter().product();
                let total = s[1] * inner;
                let mut offset = 0;
                for &p in parts {
                    let per = self.nodes[p.0].value.shape()[1] * inner;
                    give(p, &|dst| {
                        for i in 0..n {
                            let src = &g[i * total + offset..i * total + offset + per];
                            add_into(&mut dst[i * per..(i + 1) * per], src);
                        }
                    });
                    offset += per;
                }
            }
            Op::ChannelScale { input, scale } => {
                let [_, c, h, w] = self.nodes[input.0].value.dims4("channel_scale").expect("rank 4");
                let plane = h * w;
                let (x, s) = (val(*input), val(*scale));
                let per_item = s.len() / self.nodes[scale.0].value.shape()[0];
                give(*input, &|dst| {
                    for (p, chunk) in dst.chunks_mut(plane).enumerate() {
                        let f = s[scale_index(p, c, per_item)];
                        chunk
                            .iter_mut()
                            .zip(&g[p * plane..(p + 1) * plane])
                            .for_each(|(d, gv)| *d += gv * f);
                    }
                });
                give(*scale, &|dst| {
                    for p in 0..x.len() / plane {
                        let r = p * plane..(p + 1) * plane;
                        dst[scale_index(p, c, per_item)] += kernels::dot(&g[r.clone()], &x[r]);
                    }
                });
            }
            Op::Column { input, index } => {
                let k = self.nodes[input.0].value.shape()[1];
                give(*input, &|dst| {
                    for (i, &gv) in g.iter().enumerate() {
                        dst[i * k + index] += gv;
                    }
                })
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[inline]
fn scale_index(plane: usize, channels: usize, per_item: usize) -> usize {
    let item = plane / channels;
    if per_item == 1 {
        item
    } else {
        plane
    }
}

/// Logistic function that does not overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
