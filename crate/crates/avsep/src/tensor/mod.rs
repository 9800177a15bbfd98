//! Reverse-mode automatic differentiation over f64 ndarrays.
//!
//! A [`Tape`] records each operation as it executes; [`Tape::backward`]
//! sweeps the recording in reverse and accumulates gradients for every
//! parameter leaf. With gradients disabled the same ops run value-only and
//! intermediates are freed as soon as the last handle drops, so forward
//! evaluation and training share one code path.
//!
//! Everything is f64 and every stored value is in standard (row-major)
//! layout. Shape errors in graph construction are programmer errors and
//! panic with context; fallible validation belongs at module boundaries.

pub mod kernels;

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix3, Ix4, IxDyn};

use crate::error::{AvsepError, Result};
use kernels::{conv2d_backward, conv2d_forward, softmax_rows};

/// A value in the computation graph. Cloning is cheap (shared storage).
#[derive(Debug, Clone)]
pub struct Tensor {
    value: Arc<ArrayD<f64>>,
    node: Option<usize>,
}

impl Tensor {
    pub fn value(&self) -> &ArrayD<f64> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.len() == 0
    }

    /// Single-element tensors only.
    pub fn scalar(&self) -> f64 {
        assert_eq!(self.value.len(), 1, "scalar() on tensor of shape {:?}", self.shape());
        *self.value.iter().next().unwrap()
    }

    pub fn to_array2(&self) -> Array2<f64> {
        self.value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("tensor is 2-D")
            .to_owned()
    }
}

/// Named parameter storage shared by a model and its optimizer.
#[derive(Debug, Default)]
pub struct ParamStore {
    values: Vec<Arc<ArrayD<f64>>>,
    names: Vec<String>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> usize {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name:?}"
        );
        let id = self.values.len();
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Arc::new(value));
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: usize) -> &ArrayD<f64> {
        &self.values[id]
    }

    /// Mutable access for the optimizer; clones only if a tape still holds
    /// the old value.
    pub fn value_mut(&mut self, id: usize) -> &mut ArrayD<f64> {
        Arc::make_mut(&mut self.values[id])
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter().map(|v| v.as_ref()))
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    AddScalar,
    MulScalar(f64),
    Silu,
    Matmul,
    Bmm,
    Affine,
    Conv2d {
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        groups: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    LayerNormLast {
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    WeightStandardize {
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxLast,
    Reshape {
        parent_shape: Vec<usize>,
    },
    Transpose {
        axes: Vec<usize>,
    },
    Concat2 {
        axis: usize,
        first_len: usize,
    },
    Slice1d {
        start: usize,
        parent_len: usize,
    },
    UpsampleNearest2,
    TileChannel,
    GlobalAvgPool,
    MeanAll,
    MulChannel,
    AddChannel,
}

#[derive(Debug)]
struct Node {
    value: Arc<ArrayD<f64>>,
    parents: Vec<usize>,
    op: Op,
    param: Option<usize>,
}

/// Operation recorder. Build one per forward pass.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    enabled: bool,
}

impl Tape {
    pub fn new(grad: bool) -> Self {
        Self {
            nodes: Vec::new(),
            enabled: grad,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.enabled
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: ArrayD<f64>, parents: Vec<usize>, op: Op, param: Option<usize>) -> Tensor {
        debug_assert!(value.is_standard_layout());
        let value = Arc::new(value);
        if !self.enabled {
            return Tensor { value, node: None };
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            value: Arc::clone(&value),
            parents,
            op,
            param,
        });
        Tensor {
            value,
            node: Some(id),
        }
    }

    fn parent_ids(&self, ts: &[&Tensor]) -> Vec<usize> {
        if !self.enabled {
            return Vec::new();
        }
        ts.iter()
            .map(|t| t.node.expect("tensor from a different or disabled tape"))
            .collect()
    }

    /// A graph input (gradients flow through it but are not collected).
    pub fn constant(&mut self, value: ArrayD<f64>) -> Tensor {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        self.push(value, Vec::new(), Op::Leaf, None)
    }

    /// A parameter leaf; its gradient is collected under `id`.
    pub fn param(&mut self, store: &ParamStore, id: usize) -> Tensor {
        let value = Arc::clone(&store.values[id]);
        if !self.enabled {
            return Tensor { value, node: None };
        }
        let nid = self.nodes.len();
        self.nodes.push(Node {
            value: Arc::clone(&value),
            parents: Vec::new(),
            op: Op::Leaf,
            param: Some(id),
        });
        Tensor {
            value,
            node: Some(nid),
        }
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let value = a.value.as_ref() + b.value.as_ref();
        let parents = self.parent_ids(&[a, b]);
        self.push(value, parents, Op::Add, None)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        let value = a.value.as_ref() - b.value.as_ref();
        let parents = self.parent_ids(&[a, b]);
        self.push(value, parents, Op::Sub, None)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let value = a.value.as_ref() * b.value.as_ref();
        let parents = self.parent_ids(&[a, b]);
        self.push(value, parents, Op::Mul, None)
    }

    pub fn add_scalar(&mut self, a: &Tensor, c: f64) -> Tensor {
        let value = a.value.as_ref() + c;
        let parents = self.parent_ids(&[a]);
        self.push(value, parents, Op::AddScalar, None)
    }

    pub fn mul_scalar(&mut self, a: &Tensor, c: f64) -> Tensor {
        let value = a.value.as_ref() * c;
        let parents = self.parent_ids(&[a]);
        self.push(value, parents, Op::MulScalar(c), None)
    }

    /// x * sigmoid(x).
    pub fn silu(&mut self, a: &Tensor) -> Tensor {
        let value = a.value.mapv(|x| x * sigmoid(x));
        let parents = self.parent_ids(&[a]);
        self.push(value, parents, Op::Silu, None)
    }

    /// [M,K] x [K,N] -> [M,N].
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        let av = a.value.view().into_dimensionality::<Ix2>().expect("matmul lhs 2-D");
        let bv = b.value.view().into_dimensionality::<Ix2>().expect("matmul rhs 2-D");
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims");
        let value = av.dot(&bv).into_dyn();
        let parents = self.parent_ids(&[a, b]);
        self.push(value, parents, Op::Matmul, None)
    }

    /// Batched matmul: [B,M,K] x [B,K,N] -> [B,M,N].
    pub fn bmm(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        let av = a.value.view().into_dimensionality::<Ix3>().expect("bmm lhs 3-D");
        let bv = b.value.view().into_dimensionality::<Ix3>().expect("bmm rhs 3-D");
        let (ba, m, k) = av.dim();
        let (bb, k2, n) = bv.dim();
        assert_eq!(ba, bb, "bmm batch dims");
        assert_eq!(k, k2, "bmm inner dims");
        let mut out = ndarray::Array3::<f64>::zeros((ba, m, n));
        for i in 0..ba {
            let slice = av.index_axis(Axis(0), i).dot(&bv.index_axis(Axis(0), i));
            out.index_axis_mut(Axis(0), i).assign(&slice);
        }
        let parents = self.parent_ids(&[a, b]);
        self.push(out.into_dyn(), parents, Op::Bmm, None)
    }

    /// w [O,I] * x [I] + b [O] -> [O].
    pub fn affine(&mut self, x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let xv = x.value.view().into_dimensionality::<Ix1>().expect("affine x 1-D");
        let wv = w.value.view().into_dimensionality::<Ix2>().expect("affine w 2-D");
        let bv = b.value.view().into_dimensionality::<Ix1>().expect("affine b 1-D");
        assert_eq!(wv.ncols(), xv.len(), "affine dims");
        assert_eq!(wv.nrows(), bv.len(), "affine bias dim");
        let value = (wv.dot(&xv) + bv).into_dyn();
        let parents = self.parent_ids(&[x, w, b]);
        self.push(value, parents, Op::Affine, None)
    }

    /// x [Cin,H,W] conv w [Cout,Cin,kh,kw] + b [Cout].
    pub fn conv2d(&mut self, x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let xv = x.value.view().into_dimensionality::<Ix3>().expect("conv input 3-D");
        let wv = w.value.view().into_dimensionality::<Ix4>().expect("conv weight 4-D");
        let bv = b
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("conv bias 1-D")
            .to_owned();
        let value = conv2d_forward(&xv, &wv, &bv, stride, pad).into_dyn();
        let parents = self.parent_ids(&[x, w, b]);
        self.push(value, parents, Op::Conv2d { stride, pad }, None)
    }

    /// Group normalization with per-channel affine over [C,H,W].
    pub fn group_norm(&mut self, x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize, eps: f64) -> Tensor {
        let xv = x.value.view().into_dimensionality::<Ix3>().expect("group_norm input 3-D");
        let (c, h, w) = xv.dim();
        assert!(c % groups == 0, "channels {c} not divisible by groups {groups}");
        assert_eq!(gamma.len(), c, "gamma length");
        assert_eq!(beta.len(), c, "beta length");
        let cg = c / groups;
        let m = cg * h * w;

        let xs = xv.as_slice().expect("standard layout");
        let gm = gamma.value.as_slice().expect("standard layout");
        let bt = beta.value.as_slice().expect("standard layout");

        let mut mean = vec![0.0; groups];
        let mut rstd = vec![0.0; groups];
        let mut out = vec![0.0; c * h * w];
        for g in 0..groups {
            let base = g * m;
            let slice = &xs[base..base + m];
            let mu: f64 = slice.iter().sum::<f64>() / m as f64;
            let var: f64 = slice.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
            let rs = 1.0 / (var + eps).sqrt();
            mean[g] = mu;
            rstd[g] = rs;
            for (i, &v) in slice.iter().enumerate() {
                let ch = g * cg + i / (h * w);
                out[base + i] = (v - mu) * rs * gm[ch] + bt[ch];
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[c, h, w]), out).unwrap();
        let parents = self.parent_ids(&[x, gamma, beta]);
        self.push(value, parents, Op::GroupNorm { groups, mean, rstd }, None)
    }

    /// Layer normalization over the last axis with affine, any rank >= 1.
    pub fn layer_norm_last(&mut self, x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        let c = *x.shape().last().expect("layer_norm on rank >= 1");
        assert_eq!(gamma.len(), c, "gamma length");
        assert_eq!(beta.len(), c, "beta length");
        let rows = x.len() / c;

        let xs = x.value.as_slice().expect("standard layout");
        let gm = gamma.value.as_slice().expect("standard layout");
        let bt = beta.value.as_slice().expect("standard layout");

        let mut mean = vec![0.0; rows];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let base = r * c;
            let slice = &xs[base..base + c];
            let mu: f64 = slice.iter().sum::<f64>() / c as f64;
            let var: f64 = slice.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            mean[r] = mu;
            rstd[r] = rs;
            for (i, &v) in slice.iter().enumerate() {
                out[base + i] = (v - mu) * rs * gm[i] + bt[i];
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(x.shape()), out).unwrap();
        let parents = self.parent_ids(&[x, gamma, beta]);
        self.push(value, parents, Op::LayerNormLast { mean, rstd }, None)
    }

    /// Standardize a conv kernel [O,I,kh,kw] per output channel:
    /// (w - mean) / sqrt(var + eps).
    pub fn weight_standardize(&mut self, w: &Tensor, eps: f64) -> Tensor {
        assert_eq!(w.value.ndim(), 4, "weight_standardize expects 4-D kernel");
        let o = w.shape()[0];
        let m = w.len() / o;
        let ws = w.value.as_slice().expect("standard layout");
        let mut mean = vec![0.0; o];
        let mut rstd = vec![0.0; o];
        let mut out = vec![0.0; w.len()];
        for oi in 0..o {
            let base = oi * m;
            let slice = &ws[base..base + m];
            let mu: f64 = slice.iter().sum::<f64>() / m as f64;
            let var: f64 = slice.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
            let rs = 1.0 / (var + eps).sqrt();
            mean[oi] = mu;
            rstd[oi] = rs;
            for (i, &v) in slice.iter().enumerate() {
                out[base + i] = (v - mu) * rs;
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(w.shape()), out).unwrap();
        let parents = self.parent_ids(&[w]);
        self.push(value, parents, Op::WeightStandardize { mean, rstd }, None)
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: &Tensor) -> Tensor {
        let c = *x.shape().last().expect("softmax on rank >= 1");
        let rows = x.len() / c;
        let mut mat = Array2::from_shape_vec(
            (rows, c),
            x.value.as_slice().expect("standard layout").to_vec(),
        )
        .unwrap();
        softmax_rows(&mut mat);
        let value = ArrayD::from_shape_vec(IxDyn(x.shape()), mat.into_raw_vec_and_offset().0).unwrap();
        let parents = self.parent_ids(&[x]);
        self.push(value, parents, Op::SoftmaxLast, None)
    }

    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Tensor {
        assert_eq!(
            x.len(),
            shape.iter().product::<usize>(),
            "reshape {:?} -> {:?}",
            x.shape(),
            shape
        );
        let parent_shape = x.shape().to_vec();
        let value = x
            .value
            .as_ref()
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape standard layout");
        let parents = self.parent_ids(&[x]);
        self.push(value, parents, Op::Reshape { parent_shape }, None)
    }

    pub fn transpose(&mut self, x: &Tensor, axes: &[usize]) -> Tensor {
        assert_eq!(axes.len(), x.value.ndim(), "transpose axes rank");
        let value = x
            .value
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let parents = self.parent_ids(&[x]);
        self.push(value, parents, Op::Transpose { axes: axes.to_vec() }, None)
    }

    /// Concatenate two tensors along `axis`.
    pub fn concat2(&mut self, a: &Tensor, b: &Tensor, axis: usize) -> Tensor {
        let value = ndarray::concatenate(Axis(axis), &[a.value.view(), b.value.view()])
            .expect("concat shapes")
            .as_standard_layout()
            .to_owned();
        let first_len = a.shape()[axis];
        let parents = self.parent_ids(&[a, b]);
        self.push(value, parents, Op::Concat2 { axis, first_len }, None)
    }

    /// Slice a 1-D tensor.
    pub fn slice1d(&mut self, x: &Tensor, start: usize, len: usize) -> Tensor {
        assert_eq!(x.value.ndim(), 1, "slice1d expects 1-D");
        let parent_len = x.len();
        assert!(start + len <= parent_len, "slice1d out of range");
        let value = x
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap()
            .slice(ndarray::s![start..start + len])
            .to_owned()
            .into_dyn();
        let parents = self.parent_ids(&[x]);
        self.push(value, parents, Op::Slice1d { start, parent_len }, None)
    }

    /// Nearest-neighbor 2x upsampling of [C,H,W].
    pub fn upsample_nearest2(&mut self, x: &Tensor) -> Tensor {
        let xv = x.value.view().into_dimensionality::<Ix3>().expect("upsample input 3-D");
        let (c, h, w) = xv.dim();
        let mut out = ndarray::Array3::zeros((c, 2 * h, 2 * w));
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = xv[[ci, i, j]];
                    out[[ci, 2 * i, 2 * j]] = v;
                    out[[ci, 2 * i + 1, 2 * j]] = v;
                    out[[ci, 2 * i, 2 * j + 1]] = v;
                    out[[ci, 2 * i + 1, 2 * j + 1]] = v;
                }
            }
        }
        let parents = self.parent_ids(&[x]);
        self.push(out.into_dyn(), parents, Op::UpsampleNearest2, None)
    }

    /// Broadcast a vector [C] to [C,H,W].
    pub fn tile_channel(&mut self, v: &Tensor, h: usize, w: usize) -> Tensor {
        let vv = v.value.view().into_dimensionality::<Ix1>().expect("tile input 1-D");
        let c = vv.len();
        let mut out = ndarray::Array3::zeros((c, h, w));
        for ci in 0..c {
            out.index_axis_mut(Axis(0), ci).fill(vv[ci]);
        }
        let parents = self.parent_ids(&[v]);
        self.push(out.into_dyn(), parents, Op::TileChannel, None)
    }

    /// Spatial mean of [C,H,W] -> [C].
    pub fn global_avg_pool(&mut self, x: &Tensor) -> Tensor {
        let xv = x.value.view().into_dimensionality::<Ix3>().expect("gap input 3-D");
        let (c, h, w) = xv.dim();
        let value = Array1::from_iter(
            (0..c).map(|ci| xv.index_axis(Axis(0), ci).sum() / (h * w) as f64),
        )
        .into_dyn();
        let parents = self.parent_ids(&[x]);
        self.push(value, parents, Op::GlobalAvgPool, None)
    }

    /// Mean of all elements -> shape [1].
    pub fn mean_all(&mut self, x: &Tensor) -> Tensor {
        let m = x.value.iter().sum::<f64>() / x.len() as f64;
        let value = ArrayD::from_shape_vec(IxDyn(&[1]), vec![m]).unwrap();
        let parents = self.parent_ids(&[x]);
        self.push(value, parents, Op::MeanAll, None)
    }

    /// Per-channel scale: x [C,H,W] * v[c].
    pub fn mul_channel(&mut self, x: &Tensor, v: &Tensor) -> Tensor {
        let xv = x.value.view().into_dimensionality::<Ix3>().expect("mul_channel x 3-D");
        let vv = v.value.view().into_dimensionality::<Ix1>().expect("mul_channel v 1-D");
        assert_eq!(xv.dim().0, vv.len(), "channel count");
        let mut out = xv.to_owned();
        for (mut plane, &s) in out.axis_iter_mut(Axis(0)).zip(vv.iter()) {
            plane *= s;
        }
        let parents = self.parent_ids(&[x, v]);
        self.push(out.into_dyn(), parents, Op::MulChannel, None)
    }

    /// Per-channel shift: x [C,H,W] + v[c].
    pub fn add_channel(&mut self, x: &Tensor, v: &Tensor) -> Tensor {
        let xv = x.value.view().into_dimensionality::<Ix3>().expect("add_channel x 3-D");
        let vv = v.value.view().into_dimensionality::<Ix1>().expect("add_channel v 1-D");
        assert_eq!(xv.dim().0, vv.len(), "channel count");
        let mut out = xv.to_owned();
        for (mut plane, &s) in out.axis_iter_mut(Axis(0)).zip(vv.iter()) {
            plane += s;
        }
        let parents = self.parent_ids(&[x, v]);
        self.push(out.into_dyn(), parents, Op::AddChannel, None)
    }

    /// Reverse sweep from a single-element root. Returns per-parameter
    /// gradients indexed by parameter id; parameters not reached get None.
    pub fn backward(&self, root: &Tensor, num_params: usize) -> Result<Vec<Option<ArrayD<f64>>>> {
        let root_id = root.node.ok_or_else(|| {
            AvsepError::InvalidInput("backward on a tensor without a recorded node".into())
        })?;
        if root.len() != 1 {
            return Err(AvsepError::InvalidInput(format!(
                "backward root must be a single element, got shape {:?}",
                root.shape()
            )));
        }

        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root_id] = Some(ArrayD::from_elem(IxDyn(root.shape()), 1.0));
        let mut param_grads: Vec<Option<ArrayD<f64>>> = vec![None; num_params];

        for i in (0..=root_id).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(pid) = node.param {
                match &mut param_grads[pid] {
                    Some(acc) => *acc += &gy,
                    slot => *slot = Some(gy),
                }
                continue;
            }
            self.apply_vjp(node, &gy, &mut grads);
        }
        Ok(param_grads)
    }

    fn accumulate(grads: &mut [Option<ArrayD<f64>>], id: usize, g: ArrayD<f64>) {
        match &mut grads[id] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }

    fn apply_vjp(&self, node: &Node, gy: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        let p = &node.parents;
        let pv = |k: usize| -> &ArrayD<f64> { &self.nodes[p[k]].value };
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                Self::accumulate(grads, p[0], gy.clone());
                Self::accumulate(grads, p[1], gy.clone());
            }
            Op::Sub => {
                Self::accumulate(grads, p[0], gy.clone());
                Self::accumulate(grads, p[1], gy * -1.0);
            }
            Op::Mul => {
                Self::accumulate(grads, p[0], gy * pv(1));
                Self::accumulate(grads, p[1], gy * pv(0));
            }
            Op::AddScalar => Self::accumulate(grads, p[0], gy.clone()),
            Op::MulScalar(c) => Self::accumulate(grads, p[0], gy * *c),
            Op::Silu => {
                let x = pv(0);
                let dx = ndarray::Zip::from(gy).and(x).map_collect(|&g, &xv| {
                    let s = sigmoid(xv);
                    g * s * (1.0 + xv * (1.0 - s))
                });
                Self::accumulate(grads, p[0], dx);
            }
            Op::Matmul => {
                let a = pv(0).view().into_dimensionality::<Ix2>().unwrap();
                let b = pv(1).view().into_dimensionality::<Ix2>().unwrap();
                let g = gy.view().into_dimensionality::<Ix2>().unwrap();
                Self::accumulate(grads, p[0], g.dot(&b.t()).into_dyn());
                Self::accumulate(grads, p[1], a.t().dot(&g).into_dyn());
            }
            Op::Bmm => {
                let a = pv(0).view().into_dimensionality::<Ix3>().unwrap();
                let b = pv(1).view().into_dimensionality::<Ix3>().unwrap();
                let g = gy.view().into_dimensionality::<Ix3>().unwrap();
                let (nb, m, k) = a.dim();
                let n = b.dim().2;
                let mut da = ndarray::Array3::zeros((nb, m, k));
                let mut db = ndarray::Array3::zeros((nb, k, n));
                for i in 0..nb {
                    let gi = g.index_axis(Axis(0), i);
                    da.index_axis_mut(Axis(0), i)
                        .assign(&gi.dot(&b.index_axis(Axis(0), i).t()));
                    db.index_axis_mut(Axis(0), i)
                        .assign(&a.index_axis(Axis(0), i).t().dot(&gi));
                }
                Self::accumulate(grads, p[0], da.into_dyn());
                Self::accumulate(grads, p[1], db.into_dyn());
            }
            Op::Affine => {
                let x = pv(0).view().into_dimensionality::<Ix1>().unwrap();
                let w = pv(1).view().into_dimensionality::<Ix2>().unwrap();
                let g = gy.view().into_dimensionality::<Ix1>().unwrap();
                let dx = w.t().dot(&g);
                let (o, i) = w.dim();
                let mut dw = Array2::zeros((o, i));
                for oi in 0..o {
                    let go = g[oi];
                    for ii in 0..i {
                        dw[[oi, ii]] = go * x[ii];
                    }
                }
                Self::accumulate(grads, p[0], dx.into_dyn());
                Self::accumulate(grads, p[1], dw.into_dyn());
                Self::accumulate(grads, p[2], g.to_owned().into_dyn());
            }
            Op::Conv2d { stride, pad } => {
                let x = pv(0).view().into_dimensionality::<Ix3>().unwrap();
                let w = pv(1).view().into_dimensionality::<Ix4>().unwrap();
                let g = gy.view().into_dimensionality::<Ix3>().unwrap();
                let (dx, dw, db) = conv2d_backward(&x, &w, &g, *stride, *pad);
                Self::accumulate(grads, p[0], dx.into_dyn());
                Self::accumulate(grads, p[1], dw.into_dyn());
                Self::accumulate(grads, p[2], db.into_dyn());
            }
            Op::GroupNorm { groups, mean, rstd, .. } => {
                let x = pv(0);
                let gamma = pv(1).as_slice().unwrap();
                let shape = x.shape();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let cg = c / groups;
                let m = cg * h * w;
                let xs = x.as_slice().unwrap();
                let gys = gy.as_slice().unwrap();

                let mut dx = vec![0.0; c * h * w];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for g in 0..*groups {
                    let base = g * m;
                    let mu = mean[g];
                    let rs = rstd[g];
                    // First pass: per-channel affine grads and group means of
                    // dxhat and dxhat*xhat.
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for i in 0..m {
                        let ch = g * cg + i / (h * w);
                        let xh = (xs[base + i] - mu) * rs;
                        let gyv = gys[base + i];
                        dgamma[ch] += gyv * xh;
                        dbeta[ch] += gyv;
                        let dxh = gyv * gamma[ch];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                    }
                    let mean_dxh = sum_dxh / m as f64;
                    let mean_dxh_xh = sum_dxh_xh / m as f64;
                    for i in 0..m {
                        let ch = g * cg + i / (h * w);
                        let xh = (xs[base + i] - mu) * rs;
                        let dxh = gys[base + i] * gamma[ch];
                        dx[base + i] = rs * (dxh - mean_dxh - xh * mean_dxh_xh);
                    }
                }
                Self::accumulate(grads, p[0], ArrayD::from_shape_vec(IxDyn(shape), dx).unwrap());
                Self::accumulate(grads, p[1], ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).unwrap());
                Self::accumulate(grads, p[2], ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).unwrap());
            }
            Op::LayerNormLast { mean, rstd, .. } => {
                let x = pv(0);
                let gamma = pv(1).as_slice().unwrap();
                let c = *x.shape().last().unwrap();
                let rows = x.len() / c;
                let xs = x.as_slice().unwrap();
                let gys = gy.as_slice().unwrap();

                let mut dx = vec![0.0; x.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for r in 0..rows {
                    let base = r * c;
                    let mu = mean[r];
                    let rs = rstd[r];
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for i in 0..c {
                        let xh = (xs[base + i] - mu) * rs;
                        let gyv = gys[base + i];
                        dgamma[i] += gyv * xh;
                        dbeta[i] += gyv;
                        let dxh = gyv * gamma[i];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                    }
                    let mean_dxh = sum_dxh / c as f64;
                    let mean_dxh_xh = sum_dxh_xh / c as f64;
                    for i in 0..c {
                        let xh = (xs[base + i] - mu) * rs;
                        let dxh = gys[base + i] * gamma[i];
                        dx[base + i] = rs * (dxh - mean_dxh - xh * mean_dxh_xh);
                    }
                }
                Self::accumulate(grads, p[0], ArrayD::from_shape_vec(IxDyn(x.shape()), dx).unwrap());
                Self::accumulate(grads, p[1], ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).unwrap());
                Self::accumulate(grads, p[2], ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).unwrap());
            }
            Op::WeightStandardize { mean, rstd, .. } => {
                let w = pv(0);
                let o = w.shape()[0];
                let m = w.len() / o;
                let ws = w.as_slice().unwrap();
                let gys = gy.as_slice().unwrap();
                let mut dw = vec![0.0; w.len()];
                for oi in 0..o {
                    let base = oi * m;
                    let mu = mean[oi];
                    let rs = rstd[oi];
                    let mut sum_g = 0.0;
                    let mut sum_g_wh = 0.0;
                    for i in 0..m {
                        let wh = (ws[base + i] - mu) * rs;
                        sum_g += gys[base + i];
                        sum_g_wh += gys[base + i] * wh;
                    }
                    let mean_g = sum_g / m as f64;
                    let mean_g_wh = sum_g_wh / m as f64;
                    for i in 0..m {
                        let wh = (ws[base + i] - mu) * rs;
                        dw[base + i] = rs * (gys[base + i] - mean_g - wh * mean_g_wh);
                    }
                }
                Self::accumulate(grads, p[0], ArrayD::from_shape_vec(IxDyn(w.shape()), dw).unwrap());
            }
            Op::SoftmaxLast => {
                let y = &node.value;
                let c = *y.shape().last().unwrap();
                let rows = y.len() / c;
                let ys = y.as_slice().unwrap();
                let gys = gy.as_slice().unwrap();
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let base = r * c;
                    let dot: f64 = (0..c).map(|i| gys[base + i] * ys[base + i]).sum();
                    for i in 0..c {
                        dx[base + i] = ys[base + i] * (gys[base + i] - dot);
                    }
                }
                Self::accumulate(grads, p[0], ArrayD::from_shape_vec(IxDyn(y.shape()), dx).unwrap());
            }
            Op::Reshape { parent_shape } => {
                let g = gy
                    .clone()
                    .into_shape_with_order(IxDyn(parent_shape))
                    .expect("reshape grad");
                Self::accumulate(grads, p[0], g);
            }
            Op::Transpose { axes } => {
                let mut inverse = vec![0usize; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let g = gy
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned();
                Self::accumulate(grads, p[0], g);
            }
            Op::Concat2 { axis, first_len } => {
                let total = gy.shape()[*axis];
                let ga = gy
                    .slice_axis(Axis(*axis), ndarray::Slice::from(0..*first_len))
                    .as_standard_layout()
                    .to_owned();
                let gb = gy
                    .slice_axis(Axis(*axis), ndarray::Slice::from(*first_len..total))
                    .as_standard_layout()
                    .to_owned();
                Self::accumulate(grads, p[0], ga);
                Self::accumulate(grads, p[1], gb);
            }
            Op::Slice1d { start, parent_len } => {
                let mut g = ArrayD::zeros(IxDyn(&[*parent_len]));
                g.as_slice_mut().unwrap()[*start..start + gy.len()]
                    .copy_from_slice(gy.as_slice().unwrap());
                Self::accumulate(grads, p[0], g);
            }
            Op::UpsampleNearest2 => {
                let g = gy.view().into_dimensionality::<Ix3>().unwrap();
                let (c, h2, w2) = g.dim();
                let (h, w) = (h2 / 2, w2 / 2);
                let mut dx = ndarray::Array3::zeros((c, h, w));
                for ci in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            dx[[ci, i, j]] = g[[ci, 2 * i, 2 * j]]
                                + g[[ci, 2 * i + 1, 2 * j]]
                                + g[[ci, 2 * i, 2 * j + 1]]
                                + g[[ci, 2 * i + 1, 2 * j + 1]];
                        }
                    }
                }
                Self::accumulate(grads, p[0], dx.into_dyn());
            }
            Op::TileChannel => {
                let g = gy.view().into_dimensionality::<Ix3>().unwrap();
                let dv = Array1::from_iter(g.axis_iter(Axis(0)).map(|plane| plane.sum()));
                Self::accumulate(grads, p[0], dv.into_dyn());
            }
            Op::GlobalAvgPool => {
                let x = pv(0);
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let g = gy.view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = ndarray::Array3::zeros((c, h, w));
                for ci in 0..c {
                    dx.index_axis_mut(Axis(0), ci).fill(g[ci] / (h * w) as f64);
                }
                Self::accumulate(grads, p[0], dx.into_dyn());
            }
            Op::MeanAll => {
                let x = pv(0);
                let scale = gy.as_slice().unwrap()[0] / x.len() as f64;
                Self::accumulate(grads, p[0], ArrayD::from_elem(IxDyn(x.shape()), scale));
            }
            Op::MulChannel => {
                let x = pv(0).view().into_dimensionality::<Ix3>().unwrap();
                let v = pv(1).view().into_dimensionality::<Ix1>().unwrap();
                let g = gy.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = g.to_owned();
                for (mut plane, &s) in dx.axis_iter_mut(Axis(0)).zip(v.iter()) {
                    plane *= s;
                }
                let dv = Array1::from_iter(
                    g.axis_iter(Axis(0))
                        .zip(x.axis_iter(Axis(0)))
                        .map(|(gp, xp)| (&gp * &xp).sum()),
                );
                Self::accumulate(grads, p[0], dx.into_dyn());
                Self::accumulate(grads, p[1], dv.into_dyn());
            }
            Op::AddChannel => {
                let g = gy.view().into_dimensionality::<Ix3>().unwrap();
                let dv = Array1::from_iter(g.axis_iter(Axis(0)).map(|plane| plane.sum()));
                Self::accumulate(grads, p[0], gy.clone());
                Self::accumulate(grads, p[1], dv.into_dyn());
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
