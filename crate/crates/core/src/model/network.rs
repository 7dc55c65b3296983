use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayD, ArrayView2, ArrayView3, ArrayView4, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Architecture, CnnSpec, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
enum Op {
    Conv { weight: usize, bias: usize },
    Relu,
    Pool,
    Flatten,
    Dense { weight: usize, bias: usize },
}

const CNN_OPS: &[Op] = &[
    Op::Conv { weight: 0, bias: 1 },
    Op::Relu,
    Op::Pool,
    Op::Conv { weight: 2, bias: 3 },
    Op::Relu,
    Op::Pool,
    Op::Flatten,
    Op::Dense { weight: 4, bias: 5 },
    Op::Relu,
    Op::Dense { weight: 6, bias: 7 },
];

const LINEAR_OPS: &[Op] = &[Op::Flatten, Op::Dense { weight: 0, bias: 1 }];

enum Act<T> {
    Map(Array4<T>),
    Flat(Array2<T>),
}

impl<T: Real> Act<T> {
    fn into_map(self) -> Array4<T> {
        match self {
            Act::Map(a) => a,
            Act::Flat(_) => unreachable!("layer order guarantees a feature map"),
        }
    }

    fn into_flat(self) -> Array2<T> {
        match self {
            Act::Flat(a) => a,
            Act::Map(_) => unreachable!("layer order guarantees a flat activation"),
        }
    }
}

enum Cache<T> {
    Conv { cols: Vec<Array2<T>>, in_dim: (usize, usize, usize, usize) },
    Relu { out: Act<T> },
    Pool { argmax: Vec<usize>, in_dim: (usize, usize, usize, usize) },
    Flatten { in_dim: (usize, usize, usize, usize) },
    Dense { input: Array2<T> },
}

/// What the input gradient differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Cross-entropy of the softmax output against the label.
    CrossEntropy,
    /// The raw class score (logit) of the label.
    Logit,
}

/// One gradient tensor per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T>(pub Vec<ArrayD<T>>);

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T: Real> {
    spec: CnnSpec,
    params: Vec<ArrayD<T>>,
}

impl<T: Real> Network<T> {
    /// He-normal weights and zero biases from a seeded stream.
    pub fn init(spec: CnnSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = spec
            .parameter_shapes()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with(".bias") {
                    return ArrayD::zeros(IxDyn(&shape));
                }
                let fan_in: usize = shape[1..].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let n: usize = shape.iter().product();
                let data: Vec<T> = (0..n).map(|_| T::of(normal.sample(&mut rng))).collect();
                ArrayD::from_shape_vec(IxDyn(&shape), data).expect("length matches shape")
            })
            .collect();
        Ok(Self { spec, params })
    }

    pub fn zeros(spec: CnnSpec) -> Result<Self> {
        spec.validate()?;
        let params = spec
            .parameter_shapes()
            .into_iter()
            .map(|(_, shape)| ArrayD::zeros(IxDyn(&shape)))
            .collect();
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: CnnSpec, params: Vec<ArrayD<T>>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.parameter_shapes();
        if shapes.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in shapes.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{name}: expected shape {shape:?}, got {:?}",
                    p.shape()
                )));
            }
        }
        let params = params.into_iter().map(|p| p.as_standard_layout().into_owned()).collect();
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &CnnSpec {
        &self.spec
    }

    pub fn params(&self) -> &[ArrayD<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ArrayD<T>] {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            spec: self.spec,
            params: self
                .params
                .iter()
                .map(|p| p.mapv(|v| U::from_f64(v.to_f64().expect("finite")).expect("finite")))
                .collect(),
        }
    }

    fn ops(&self) -> &'static [Op] {
        match self.spec.architecture {
            Architecture::Cnn { .. } => CNN_OPS,
            Architecture::Linear => LINEAR_OPS,
        }
    }

    fn check_input(&self, x: &ArrayView4<T>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.spec.input_channels {
            return Err(Error::ChannelMismatch {
                expected: self.spec.input_channels,
                found: c,
            });
        }
        let s = self.spec.input_size;
        if (h, w) != (s, s) {
            return Err(Error::DimensionMismatch {
                expected: (s, s),
                found: (w, h),
            });
        }
        Ok(())
    }

    fn run(&self, x: ArrayView4<T>, keep: bool) -> Result<(Array2<T>, Vec<Cache<T>>)> {
        self.check_input(&x)?;
        let mut act = Act::Map(x.as_standard_layout().into_owned());
        let mut caches = Vec::new();
        for op in self.ops() {
            act = match *op {
                Op::Conv { weight, bias } => {
                    let input = act.into_map();
                    let (out, cols) = conv_forward(&input, &self.params[weight], &self.params[bias]);
                    if keep {
                        caches.push(Cache::Conv {
                            cols,
                            in_dim: input.dim(),
                        });
                    }
                    Act::Map(out)
                }
                Op::Relu => {
                    let out = match act {
                        Act::Map(a) => Act::Map(a.mapv_into(relu)),
                        Act::Flat(a) => Act::Flat(a.mapv_into(relu)),
                    };
                    if keep {
                        let copy = match &out {
                            Act::Map(a) => Act::Map(a.clone()),
                            Act::Flat(a) => Act::Flat(a.clone()),
                        };
                        caches.push(Cache::Relu { out: copy });
                    }
                    out
                }
                Op::Pool => {
                    let input = act.into_map();
                    let (out, argmax) = pool_forward(&input);
                    if keep {
                        caches.push(Cache::Pool {
                            argmax,
                            in_dim: input.dim(),
                        });
                    }
                    Act::Map(out)
                }
                Op::Flatten => {
                    let input = act.into_map();
                    let in_dim = input.dim();
                    if keep {
                        caches.push(Cache::Flatten { in_dim });
                    }
                    let (n, c, h, w) = in_dim;
                    Act::Flat(input.into_shape_with_order((n, c * h * w)).expect("standard layout"))
                }
                Op::Dense { weight, bias } => {
                    let input = act.into_flat();
                    let w = as_matrix(&self.params[weight]);
                    let mut out = input.dot(&w.t());
                    out += &self.params[bias].view().into_dimensionality::<ndarray::Ix1>().expect("rank 1");
                    if keep {
                        caches.push(Cache::Dense { input });
                    }
                    Act::Flat(out)
                }
            };
        }
        Ok((act.into_flat(), caches))
    }

    /// Raw class scores, one row per batch item.
    pub fn logits(&self, x: ArrayView4<T>) -> Result<Array2<T>> {
        Ok(self.run(x, false)?.0)
    }

    /// Softmax probabilities, one row per batch item.
    pub fn predict_proba(&self, x: ArrayView4<T>) -> Result<Array2<T>> {
        Ok(softmax(&self.logits(x)?))
    }

    fn backward(&self, caches: Vec<Cache<T>>, dlogits: Array2<T>, want_input: bool) -> (Gradients<T>, Option<Array4<T>>) {
        let mut grads: Vec<ArrayD<T>> = self.params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        let mut delta = Act::Flat(dlogits);
        let ops = self.ops();
        for (idx, (op, cache)) in ops.iter().zip(caches).enumerate().rev() {
            let first = idx == 0;
            delta = match (*op, cache) {
                (Op::Dense { weight, bias }, Cache::Dense { input }) => {
                    let d = delta.into_flat();
                    let w = as_matrix(&self.params[weight]);
                    let mut gw = as_matrix_mut(&mut grads[weight]);
                    general_mat_mul(T::one(), &d.t(), &input, T::one(), &mut gw);
                    let gb = d.sum_axis(Axis(0));
                    grads[bias] += &gb.into_dyn();
                    Act::Flat(d.dot(&w))
                }
                (Op::Relu, Cache::Relu { out }) => match (delta, out) {
                    (Act::Flat(d), Act::Flat(o)) => Act::Flat(relu_backward(d, &o)),
                    (Act::Map(d), Act::Map(o)) => Act::Map(relu_backward(d, &o)),
                    _ => unreachable!("activation kinds agree"),
                },
                (Op::Flatten, Cache::Flatten { in_dim }) => {
                    let d = delta.into_flat();
                    Act::Map(d.into_shape_with_order(in_dim).expect("standard layout"))
                }
                (Op::Pool, Cache::Pool { argmax, in_dim }) => Act::Map(pool_backward(&delta.into_map(), &argmax, in_dim)),
                (Op::Conv { weight, bias }, Cache::Conv { cols, in_dim }) => {
                    let d = delta.into_map();
                    let (gw, gb, dx) = conv_backward(&d, &cols, &self.params[weight], in_dim, want_input || !first);
                    grads[weight] += &gw;
                    grads[bias] += &gb;
                    match dx {
                        Some(dx) => Act::Map(dx),
                        None => Act::Map(Array4::zeros((0, 0, 0, 0))),
                    }
                }
                _ => unreachable!("caches recorded in op order"),
            };
        }
        let input_grad = match delta {
            Act::Map(d) if want_input => Some(d),
            _ => None,
        };
        (Gradients(grads), input_grad)
    }

    /// Mean cross-entropy over the batch and its parameter gradients.
    pub fn loss_and_gradients(&self, x: ArrayView4<T>, labels: &[usize]) -> Result<(T, Gradients<T>)> {
        self.check_labels(x.dim().0, labels)?;
        let (logits, caches) = self.run(x, true)?;
        let (loss, dlogits) = cross_entropy(&logits, labels);
        let (grads, _) = self.backward(caches, dlogits, false);
        Ok((loss, grads))
    }

    pub(crate) fn train_step_parts(&self, x: ArrayView4<T>, labels: &[usize]) -> Result<(T, Gradients<T>, Array2<T>)> {
        self.check_labels(x.dim().0, labels)?;
        let (logits, caches) = self.run(x, true)?;
        let (loss, dlogits) = cross_entropy(&logits, labels);
        let (grads, _) = self.backward(caches, dlogits, false);
        Ok((loss, grads, logits))
    }

    /// Mean cross-entropy without gradients.
    pub fn loss(&self, x: ArrayView4<T>, labels: &[usize]) -> Result<T> {
        self.check_labels(x.dim().0, labels)?;
        let logits = self.logits(x)?;
        Ok(cross_entropy(&logits, labels).0)
    }

    /// Gradient of the objective with respect to the input batch. For
    /// cross-entropy this is the gradient of the summed (not averaged) loss,
    /// so each item's gradient is independent of the batch size.
    pub fn input_gradient(&self, x: ArrayView4<T>, labels: &[usize], objective: Objective) -> Result<Array4<T>> {
        self.check_labels(x.dim().0, labels)?;
        let (logits, caches) = self.run(x, true)?;
        let dlogits = match objective {
            Objective::CrossEntropy => {
                let mut p = softmax(&logits);
                for (row, &label) in labels.iter().enumerate() {
                    p[[row, label]] -= T::one();
                }
                p
            }
            Objective::Logit => {
                let mut d = Array2::zeros(logits.raw_dim());
                for (row, &label) in labels.iter().enumerate() {
                    d[[row, label]] = T::one();
                }
                d
            }
        };
        let (_, dx) = self.backward(caches, dlogits, true);
        Ok(dx.expect("input gradient requested"))
    }

    fn check_labels(&self, batch: usize, labels: &[usize]) -> Result<()> {
        if labels.len() != batch {
            return Err(Error::invalid("labels", format!("{} labels for a batch of {batch}", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= self.spec.classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.spec.classes,
            });
        }
        Ok(())
    }
}

fn relu<T: Real>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

fn relu_backward<T: Real, D: ndarray::Dimension>(
    mut d: ndarray::Array<T, D>,
    out: &ndarray::Array<T, D>,
) -> ndarray::Array<T, D> {
    d.zip_mut_with(out, |g, &o| {
        if o <= T::zero() {
            *g = T::zero();
        }
    });
    d
}

fn as_matrix<T: Real>(p: &ArrayD<T>) -> ArrayView2<'_, T> {
    let rows = p.shape()[0];
    let cols = p.len() / rows.max(1);
    p.view().into_shape_with_order((rows, cols)).expect("standard layout")
}

fn as_matrix_mut<T: Real>(p: &mut ArrayD<T>) -> ndarray::ArrayViewMut2<'_, T> {
    let rows = p.shape()[0];
    let cols = p.len() / rows.max(1);
    p.view_mut().into_shape_with_order((rows, cols)).expect("standard layout")
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax<T: Real>(logits: &Array2<T>) -> Array2<T> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.iter().copied().fold(T::zero(), |a, b| a + b);
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Mean cross-entropy and its gradient with respect to the logits.
fn cross_entropy<T: Real>(logits: &Array2<T>, labels: &[usize]) -> (T, Array2<T>) {
    let n = T::of(labels.len() as f64);
    let mut loss = T::zero();
    let mut grad = Array2::zeros(logits.raw_dim());
    for (row, &label) in labels.iter().enumerate() {
        let z = logits.row(row);
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = z.iter().map(|&v| (v - max).exp()).fold(T::zero(), |a, b| a + b).ln() + max;
        loss += lse - z[label];
        for (c, &v) in z.iter().enumerate() {
            let p = (v - lse).exp();
            let target = if c == label { T::one() } else { T::zero() };
            grad[[row, c]] = (p - target) / n;
        }
    }
    (loss / n, grad)
}

/// Unfolds a `C×H×W` input into `(C·9) × (H·W)` columns for a 3×3 kernel
/// with zero padding 1.
fn im2col<T: Real>(x: ArrayView3<T>) -> Array2<T> {
    let (c, h, w) = x.dim();
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut cols = Array2::zeros((c * 9, h * w));
    let dst = cols.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = ((ci * 3 + ky) * 3 + kx) * h * w;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sbase = (ci * h + sy as usize) * w;
                    let dbase = row + y * w;
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dst[dbase + xx] = src[sbase + sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &Array2<T>, c: usize, h: usize, w: usize) -> Array3<T> {
    let mut out = Array3::zeros((c, h, w));
    let dst = out.as_slice_mut().expect("fresh array");
    let src = cols.as_slice().expect("standard layout");
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = ((ci * 3 + ky) * 3 + kx) * h * w;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dbase = (ci * h + sy as usize) * w;
                    let sbase = row + y * w;
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dst[dbase + sx as usize] += src[sbase + xx];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_forward<T: Real>(input: &Array4<T>, weight: &ArrayD<T>, bias: &ArrayD<T>) -> (Array4<T>, Vec<Array2<T>>) {
    let (n, _, h, w) = input.dim();
    let wmat = as_matrix(weight);
    let f = wmat.nrows();
    let bias = bias.view().into_dimensionality::<ndarray::Ix1>().expect("rank 1");
    let mut out = Array4::zeros((n, f, h, w));
    let mut all_cols = Vec::with_capacity(n);
    for i in 0..n {
        let cols = im2col(input.index_axis(Axis(0), i));
        let mut o = out
            .index_axis_mut(Axis(0), i)
            .into_shape_with_order((f, h * w))
            .expect("standard layout");
        for (mut row, &b) in o.rows_mut().into_iter().zip(bias.iter()) {
            row.fill(b);
        }
        general_mat_mul(T::one(), &wmat, &cols, T::one(), &mut o);
        all_cols.push(cols);
    }
    (out, all_cols)
}

type ConvGrads<T> = (ArrayD<T>, ArrayD<T>, Option<Array4<T>>);

fn conv_backward<T: Real>(
    delta: &Array4<T>,
    cols: &[Array2<T>],
    weight: &ArrayD<T>,
    in_dim: (usize, usize, usize, usize),
    want_input: bool,
) -> ConvGrads<T> {
    let (n, c, h, w) = in_dim;
    let wmat = as_matrix(weight);
    let f = wmat.nrows();
    let mut gw = Array2::<T>::zeros(wmat.raw_dim());
    let mut gb = Array1::<T>::zeros(f);
    let mut dx = want_input.then(|| Array4::zeros(in_dim));
    for i in 0..n {
        let d = delta
            .index_axis(Axis(0), i)
            .into_shape_with_order((f, h * w))
            .expect("standard layout");
        general_mat_mul(T::one(), &d, &cols[i].t(), T::one(), &mut gw);
        gb += &d.sum_axis(Axis(1));
        if let Some(dx) = dx.as_mut() {
            let dcols = wmat.t().dot(&d);
            dx.slice_mut(s![i, .., .., ..]).assign(&col2im(&dcols, c, h, w));
        }
    }
    let gw = gw.into_shape_with_order(weight.raw_dim()).expect("same element count");
    (gw, gb.into_dyn(), dx)
}

fn pool_forward<T: Real>(input: &Array4<T>) -> (Array4<T>, Vec<usize>) {
    let (n, c, h, w) = input.dim();
    let (oh, ow) = (h / 2, w / 2);
    let src = input.as_slice().expect("standard layout");
    let mut out = Array4::zeros((n, c, oh, ow));
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let dst = out.as_slice_mut().expect("fresh array");
    let mut k = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * x + dx;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                dst[k] = src[best];
                argmax.push(best);
                k += 1;
            }
        }
    }
    (out, argmax)
}

fn pool_backward<T: Real>(delta: &Array4<T>, argmax: &[usize], in_dim: (usize, usize, usize, usize)) -> Array4<T> {
    let mut dx = Array4::zeros(in_dim);
    let dst = dx.as_slice_mut().expect("fresh array");
    let d = delta.as_standard_layout();
    for (&idx, &g) in argmax.iter().zip(d.as_slice().expect("standard layout")) {
        dst[idx] += g;
    }
    dx
}
