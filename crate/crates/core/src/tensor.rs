//! Dense row-major tensors and the numeric kernels used by the rest of the crate.
//!
//! Tensors are immutable values: every kernel returns a fresh tensor. Floating point
//! kernels are implemented once, generically, and instantiated for `f32` and `f64`.
//! Mixing element kinds is an error, never an implicit cast.
//!
//! Broadcasting is limited to two cases: equal shapes, or one operand of rank 0.

use std::fmt;

use num_traits::Float;

/// Element kind of a [`Tensor`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
    I64,
    U8,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::I64 => "i64",
            DType::U8 => "u8",
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, DType::F32 | DType::F64)
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("dtype mismatch in {op}: {left} vs {right}")]
    DtypeMismatch {
        op: &'static str,
        left: DType,
        right: DType,
    },
    #[error("{op} is not defined for dtype {dtype}")]
    UnsupportedDtype { op: &'static str, dtype: DType },
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    })
}

/// Typed backing buffer of a tensor.
#[derive(Clone, Debug, PartialEq)]
pub enum Storage {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
    U8(Vec<u8>),
}

impl Storage {
    pub fn len(&self) -> usize {
        match self {
            Storage::F32(v) => v.len(),
            Storage::F64(v) => v.len(),
            Storage::I64(v) => v.len(),
            Storage::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            Storage::F32(_) => DType::F32,
            Storage::F64(_) => DType::F64,
            Storage::I64(_) => DType::I64,
            Storage::U8(_) => DType::U8,
        }
    }
}

/// Floating point element types the arithmetic kernels are instantiated for.
pub trait Real: Float + Send + Sync + fmt::Debug + Default + 'static {
    fn from_f64(v: f64) -> Self;
    fn wrap(v: Vec<Self>) -> Storage;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn wrap(v: Vec<Self>) -> Storage {
        Storage::F32(v)
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn wrap(v: Vec<Self>) -> Storage {
        Storage::F64(v)
    }
}

// Runs `$body` with `$x` bound to the float slice of `$t`, producing a `Result<Storage>`.
macro_rules! unary_float {
    ($op:expr, $t:expr, |$x:ident| $body:expr) => {
        match &$t.data {
            Storage::F32($x) => {
                let $x: &[f32] = $x;
                $body.map(<f32 as Real>::wrap)
            }
            Storage::F64($x) => {
                let $x: &[f64] = $x;
                $body.map(<f64 as Real>::wrap)
            }
            other => Err(TensorError::UnsupportedDtype {
                op: $op,
                dtype: other.dtype(),
            }),
        }
    };
}

macro_rules! binary_float {
    ($op:expr, $a:expr, $b:expr, |$x:ident, $y:ident| $body:expr) => {
        match (&$a.data, &$b.data) {
            (Storage::F32($x), Storage::F32($y)) => {
                let ($x, $y): (&[f32], &[f32]) = ($x, $y);
                $body.map(<f32 as Real>::wrap)
            }
            (Storage::F64($x), Storage::F64($y)) => {
                let ($x, $y): (&[f64], &[f64]) = ($x, $y);
                $body.map(<f64 as Real>::wrap)
            }
            (l, r) if l.dtype() == r.dtype() => Err(TensorError::UnsupportedDtype {
                op: $op,
                dtype: l.dtype(),
            }),
            (l, r) => Err(TensorError::DtypeMismatch {
                op: $op,
                left: l.dtype(),
                right: r.dtype(),
            }),
        }
    };
}

macro_rules! ternary_float {
    ($op:expr, $a:expr, $b:expr, $c:expr, |$x:ident, $y:ident, $z:ident| $body:expr) => {
        match (&$a.data, &$b.data, &$c.data) {
            (Storage::F32($x), Storage::F32($y), Storage::F32($z)) => {
                let ($x, $y, $z): (&[f32], &[f32], &[f32]) = ($x, $y, $z);
                $body.map(<f32 as Real>::wrap)
            }
            (Storage::F64($x), Storage::F64($y), Storage::F64($z)) => {
                let ($x, $y, $z): (&[f64], &[f64], &[f64]) = ($x, $y, $z);
                $body.map(<f64 as Real>::wrap)
            }
            (l, r, s) => {
                let right = if l.dtype() != r.dtype() { r.dtype() } else { s.dtype() };
                if l.dtype() == right {
                    Err(TensorError::UnsupportedDtype {
                        op: $op,
                        dtype: right,
                    })
                } else {
                    Err(TensorError::DtypeMismatch {
                        op: $op,
                        left: l.dtype(),
                        right,
                    })
                }
            }
        }
    };
}

/// Dense row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Storage,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Storage) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return shape_err(
                "new",
                format!("shape {:?} holds {} elements, got {}", shape, numel, data.len()),
            );
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f64(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::new(shape.to_vec(), Storage::F64(data))
    }

    pub fn from_f32(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        Self::new(shape.to_vec(), Storage::F32(data))
    }

    pub fn from_i64(shape: &[usize], data: Vec<i64>) -> Result<Self> {
        Self::new(shape.to_vec(), Storage::I64(data))
    }

    pub fn from_u8(shape: &[usize], data: Vec<u8>) -> Result<Self> {
        Self::new(shape.to_vec(), Storage::U8(data))
    }

    /// Rank-0 tensor.
    pub fn scalar(dtype: DType, value: f64) -> Self {
        Self::full(dtype, &[], value)
    }

    pub fn zeros(dtype: DType, shape: &[usize]) -> Self {
        Self::full(dtype, shape, 0.0)
    }

    pub fn ones(dtype: DType, shape: &[usize]) -> Self {
        Self::full(dtype, shape, 1.0)
    }

    pub fn full(dtype: DType, shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        let data = match dtype {
            DType::F32 => Storage::F32(vec![value as f32; n]),
            DType::F64 => Storage::F64(vec![value; n]),
            DType::I64 => Storage::I64(vec![value as i64; n]),
            DType::U8 => Storage::U8(vec![value as u8; n]),
        };
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn storage(&self) -> &Storage {
        &self.data
    }

    pub fn into_storage(self) -> Storage {
        self.data
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            Storage::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match &self.data {
            Storage::F64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<&[i64]> {
        match &self.data {
            Storage::I64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            Storage::U8(v) => Some(v),
            _ => None,
        }
    }

    /// Values widened to `f64`, whatever the dtype.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            Storage::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Storage::F64(v) => v.clone(),
            Storage::I64(v) => v.iter().map(|&x| x as f64).collect(),
            Storage::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn cast(&self, dtype: DType) -> Tensor {
        if dtype == self.dtype() {
            return self.clone();
        }
        let data = match (&self.data, dtype) {
            (Storage::F64(v), DType::F32) => Storage::F32(v.iter().map(|&x| x as f32).collect()),
            (Storage::F32(v), DType::F64) => Storage::F64(v.iter().map(|&x| x as f64).collect()),
            (_, DType::F64) => Storage::F64(self.to_f64_vec()),
            (_, DType::F32) => Storage::F32(self.to_f64_vec().iter().map(|&x| x as f32).collect()),
            (_, DType::I64) => Storage::I64(self.to_f64_vec().iter().map(|&x| x as i64).collect()),
            (_, DType::U8) => Storage::U8(
                self.to_f64_vec()
                    .iter()
                    .map(|&x| x.round().clamp(0.0, 255.0) as u8)
                    .collect(),
            ),
        };
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return shape_err(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            );
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Element at a flat row-major offset, widened to `f64`.
    pub fn get_f64(&self, offset: usize) -> f64 {
        match &self.data {
            Storage::F32(v) => v[offset] as f64,
            Storage::F64(v) => v[offset],
            Storage::I64(v) => v[offset] as f64,
            Storage::U8(v) => v[offset] as f64,
        }
    }

    /// Rows `[start, end)` along the leading axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        if self.shape.is_empty() || start > end || end > self.shape[0] {
            return shape_err(
                "slice_rows",
                format!("rows {start}..{end} of {:?}", self.shape),
            );
        }
        let row: usize = self.shape[1..].iter().product();
        let (a, b) = (start * row, end * row);
        let data = match &self.data {
            Storage::F32(v) => Storage::F32(v[a..b].to_vec()),
            Storage::F64(v) => Storage::F64(v[a..b].to_vec()),
            Storage::I64(v) => Storage::I64(v[a..b].to_vec()),
            Storage::U8(v) => Storage::U8(v[a..b].to_vec()),
        };
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor { shape, data })
    }

    /// Selects rows along the leading axis, in the given order.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor> {
        if self.shape.is_empty() {
            return shape_err("gather_rows", "rank-0 tensor has no rows");
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.shape[0]) {
            return shape_err(
                "gather_rows",
                format!("row {bad} out of range for {:?}", self.shape),
            );
        }
        let row: usize = self.shape[1..].iter().product();
        fn pick<T: Clone>(v: &[T], rows: &[usize], row: usize) -> Vec<T> {
            rows.iter()
                .flat_map(|&r| v[r * row..(r + 1) * row].iter().cloned())
                .collect()
        }
        let data = match &self.data {
            Storage::F32(v) => Storage::F32(pick(v, rows, row)),
            Storage::F64(v) => Storage::F64(pick(v, rows, row)),
            Storage::I64(v) => Storage::I64(pick(v, rows, row)),
            Storage::U8(v) => Storage::U8(pick(v, rows, row)),
        };
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Tensor { shape, data })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = match items.first() {
            Some(t) => t,
            None => return shape_err("stack", "no tensors to stack"),
        };
        let mut shape = vec![items.len()];
        shape.extend_from_slice(first.shape());
        macro_rules! collect {
            ($variant:ident) => {{
                let mut out = Vec::with_capacity(first.len() * items.len());
                for t in items {
                    if t.shape() != first.shape() {
                        return shape_err(
                            "stack",
                            format!("{:?} vs {:?}", t.shape(), first.shape()),
                        );
                    }
                    match &t.data {
                        Storage::$variant(v) => out.extend_from_slice(v),
                        other => {
                            return Err(TensorError::DtypeMismatch {
                                op: "stack",
                                left: first.dtype(),
                                right: other.dtype(),
                            })
                        }
                    }
                }
                Storage::$variant(out)
            }};
        }
        let data = match &first.data {
            Storage::F32(_) => collect!(F32),
            Storage::F64(_) => collect!(F64),
            Storage::I64(_) => collect!(I64),
            Storage::U8(_) => collect!(U8),
        };
        Ok(Tensor { shape, data })
    }

    fn with_data(&self, data: Storage) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    fn map_float<F32F, F64F>(&self, op: &'static str, f32f: F32F, f64f: F64F) -> Result<Tensor>
    where
        F32F: Fn(f32) -> f32,
        F64F: Fn(f64) -> f64,
    {
        let data = match &self.data {
            Storage::F32(v) => Storage::F32(v.iter().map(|&x| f32f(x)).collect()),
            Storage::F64(v) => Storage::F64(v.iter().map(|&x| f64f(x)).collect()),
            other => {
                return Err(TensorError::UnsupportedDtype {
                    op,
                    dtype: other.dtype(),
                })
            }
        };
        Ok(self.with_data(data))
    }
}

macro_rules! float_map {
    ($(#[$doc:meta])* $name:ident, |$x:ident| $body:expr) => {
        $(#[$doc])*
        pub fn $name(t: &Tensor) -> Result<Tensor> {
            fn inner<T: Real>($x: T) -> T {
                $body
            }
            t.map_float(stringify!($name), inner::<f32>, inner::<f64>)
        }
    };
}

float_map!(relu, |x| if x > T::zero() { x } else { T::zero() });
float_map!(
    /// `max(x, 0)`.
    pos,
    |x| if x > T::zero() { x } else { T::zero() }
);
float_map!(
    /// `min(x, 0)`.
    neg,
    |x| if x < T::zero() { x } else { T::zero() }
);
float_map!(
    /// `+1` where `x >= 0`, `-1` elsewhere. Zero maps to `+1`.
    sign0,
    |x| if x >= T::zero() { T::one() } else { -T::one() }
);
float_map!(abs, |x| x.abs());
float_map!(square, |x| x * x);
float_map!(
    /// `1` where `x > 0`, else `0`.
    step,
    |x| if x > T::zero() { T::one() } else { T::zero() }
);

pub fn scale(t: &Tensor, factor: f64) -> Result<Tensor> {
    t.map_float("scale", |x| x * factor as f32, |x| x * factor)
}

pub fn add_scalar(t: &Tensor, value: f64) -> Result<Tensor> {
    t.map_float("add_scalar", |x| x + value as f32, |x| x + value)
}

fn broadcast<T: Real>(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    x: &[T],
    y: &[T],
    f: impl Fn(T, T) -> T,
) -> Result<Vec<T>> {
    if a.shape == b.shape {
        Ok(x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect())
    } else if b.shape.is_empty() {
        let q = y[0];
        Ok(x.iter().map(|&p| f(p, q)).collect())
    } else if a.shape.is_empty() {
        let p = x[0];
        Ok(y.iter().map(|&q| f(p, q)).collect())
    } else {
        shape_err(op, format!("{:?} vs {:?}", a.shape, b.shape))
    }
}

fn out_shape(a: &Tensor, b: &Tensor) -> Vec<usize> {
    if a.shape.is_empty() {
        b.shape.clone()
    } else {
        a.shape.clone()
    }
}

macro_rules! float_binary {
    ($(#[$doc:meta])* $name:ident, |$p:ident, $q:ident| $body:expr) => {
        $(#[$doc])*
        pub fn $name(a: &Tensor, b: &Tensor) -> Result<Tensor> {
            fn inner<T: Real>($p: T, $q: T) -> T {
                $body
            }
            let data = binary_float!(stringify!($name), a, b, |x, y| {
                broadcast(stringify!($name), a, b, x, y, inner)
            })?;
            Ok(Tensor { shape: out_shape(a, b), data })
        }
    };
}

float_binary!(add, |p, q| p + q);
float_binary!(sub, |p, q| p - q);
float_binary!(mul, |p, q| p * q);
float_binary!(div, |p, q| p / q);
float_binary!(maximum, |p, q| p.max(q));

/// `a / (b + eps * sign0(b))`: the stabilised quotient used by the relevance rules.
pub fn div_stable(a: &Tensor, b: &Tensor, eps: f64) -> Result<Tensor> {
    fn inner<T: Real>(p: T, q: T, eps: T) -> T {
        let s = if q >= T::zero() { T::one() } else { -T::one() };
        p / (q + eps * s)
    }
    let data = binary_float!("div_stable", a, b, |x, y| {
        broadcast("div_stable", a, b, x, y, |p, q| inner(p, q, Real::from_f64(eps)))
    })?;
    Ok(Tensor {
        shape: out_shape(a, b),
        data,
    })
}

pub fn sum(t: &Tensor) -> f64 {
    t.to_f64_vec().iter().sum()
}

pub fn max(t: &Tensor) -> Option<f64> {
    t.to_f64_vec().into_iter().reduce(f64::max)
}

pub fn min(t: &Tensor) -> Option<f64> {
    t.to_f64_vec().into_iter().reduce(f64::min)
}

/// Flat index of the first maximum.
pub fn argmax(t: &Tensor) -> Option<usize> {
    let v = t.to_f64_vec();
    let mut best: Option<(usize, f64)> = None;
    for (i, x) in v.into_iter().enumerate() {
        if best.is_none_or(|(_, b)| x > b) {
            best = Some((i, x));
        }
    }
    best.map(|(i, _)| i)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 {
        return shape_err(
            "matmul",
            format!("expected matrices, got {:?} and {:?}", a.shape, b.shape),
        );
    }
    let (m, k, k2, n) = (a.shape[0], a.shape[1], b.shape[0], b.shape[1]);
    if k != k2 {
        return shape_err("matmul", format!("{m}x{k} times {k2}x{n}"));
    }
    fn kernel<T: Real>(x: &[T], y: &[T], m: usize, k: usize, n: usize) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for t in 0..k {
                let av = x[i * k + t];
                if av == T::zero() {
                    continue;
                }
                for (o, &bv) in row.iter_mut().zip(&y[t * n..(t + 1) * n]) {
                    *o = *o + av * bv;
                }
            }
        }
        Ok(out)
    }
    let data = binary_float!("matmul", a, b, |x, y| kernel(x, y, m, k, n))?;
    Ok(Tensor {
        shape: vec![m, n],
        data,
    })
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 {
        return shape_err("transpose", format!("expected a matrix, got {:?}", a.shape));
    }
    let (m, n) = (a.shape[0], a.shape[1]);
    fn kernel<T: Copy>(x: &[T], m: usize, n: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(m * n);
        for j in 0..n {
            for i in 0..m {
                out.push(x[i * n + j]);
            }
        }
        out
    }
    let data = match &a.data {
        Storage::F32(v) => Storage::F32(kernel(v, m, n)),
        Storage::F64(v) => Storage::F64(kernel(v, m, n)),
        Storage::I64(v) => Storage::I64(kernel(v, m, n)),
        Storage::U8(v) => Storage::U8(kernel(v, m, n)),
    };
    Ok(Tensor {
        shape: vec![n, m],
        data,
    })
}

/// Spatial geometry shared by convolution and pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Window {
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
}

impl Window {
    fn output(&self, op: &'static str, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.sh == 0 || self.sw == 0 {
            return shape_err(op, "stride must be positive");
        }
        if self.kh == 0 || self.kw == 0 {
            return shape_err(op, "window must be non-empty");
        }
        if self.kh > h + 2 * self.ph || self.kw > w + 2 * self.pw {
            return shape_err(
                op,
                format!(
                    "window {}x{} larger than padded input {}x{}",
                    self.kh,
                    self.kw,
                    h + 2 * self.ph,
                    w + 2 * self.pw
                ),
            );
        }
        Ok((
            (h + 2 * self.ph - self.kh) / self.sh + 1,
            (w + 2 * self.pw - self.kw) / self.sw + 1,
        ))
    }
}

fn chw(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => shape_err(op, format!("expected CxHxW, got {s:?}")),
    }
}

/// Output extents of [`conv2d`] for an input of `h x w`.
pub fn conv2d_output_hw(
    h: usize,
    w: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<(usize, usize)> {
    Window {
        kh: kernel.0,
        kw: kernel.1,
        sh: stride.0,
        sw: stride.1,
        ph: pad.0,
        pw: pad.1,
    }
    .output("conv2d", h, w)
}

fn conv_geometry(
    op: &'static str,
    input: (usize, usize, usize),
    w: &Tensor,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<(usize, Window, usize, usize)> {
    let (c, h, wd) = input;
    let (o, wc, kh, kw) = match w.shape() {
        &[o, wc, kh, kw] => (o, wc, kh, kw),
        s => return shape_err(op, format!("kernel must be OxCxKhxKw, got {s:?}")),
    };
    if wc != c {
        return shape_err(op, format!("kernel expects {wc} channels, input has {c}"));
    }
    let win = Window {
        kh,
        kw,
        sh: stride.0,
        sw: stride.1,
        ph: pad.0,
        pw: pad.1,
    };
    let (oh, ow) = win.output(op, h, wd)?;
    Ok((o, win, oh, ow))
}

/// 2-D cross-correlation with zero padding.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Tensor> {
    let (c, h, wd) = chw("conv2d", x)?;
    let (o, win, oh, ow) = conv_geometry("conv2d", (c, h, wd), w, stride, pad)?;
    if b.shape() != [o] {
        return shape_err("conv2d", format!("bias {:?} for {o} filters", b.shape()));
    }
    #[allow(clippy::too_many_arguments)]
    fn kernel<T: Real>(
        x: &[T],
        w: &[T],
        b: &[T],
        (c, h, wd): (usize, usize, usize),
        o: usize,
        win: Window,
        oh: usize,
        ow: usize,
    ) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); o * oh * ow];
        for f in 0..o {
            let plane = &mut out[f * oh * ow..(f + 1) * oh * ow];
            plane.iter_mut().for_each(|v| *v = b[f]);
            for ch in 0..c {
                let xin = &x[ch * h * wd..(ch + 1) * h * wd];
                for ki in 0..win.kh {
                    for kj in 0..win.kw {
                        let wv = w[((f * c + ch) * win.kh + ki) * win.kw + kj];
                        if wv == T::zero() {
                            continue;
                        }
                        for oi in 0..oh {
                            let ii = (oi * win.sh + ki) as isize - win.ph as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            let xrow = &xin[ii as usize * wd..(ii as usize + 1) * wd];
                            let orow = &mut plane[oi * ow..(oi + 1) * ow];
                            for (oj, ov) in orow.iter_mut().enumerate() {
                                let jj = (oj * win.sw + kj) as isize - win.pw as isize;
                                if jj >= 0 && jj < wd as isize {
                                    *ov = *ov + wv * xrow[jj as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
    let data = ternary_float!("conv2d", x, w, b, |xs, ws, bs| kernel(
        xs,
        ws,
        bs,
        (c, h, wd),
        o,
        win,
        oh,
        ow
    ))?;
    Ok(Tensor {
        shape: vec![o, oh, ow],
        data,
    })
}

/// Vector-Jacobian product of [`conv2d`] with respect to its input (a transposed convolution).
pub fn conv2d_input_vjp(
    grad_out: &Tensor,
    w: &Tensor,
    stride: (usize, usize),
    pad: (usize, usize),
    input_shape: &[usize],
) -> Result<Tensor> {
    let (c, h, wd) = match input_shape {
        &[c, h, w] => (c, h, w),
        s => return shape_err("conv2d_input_vjp", format!("input shape {s:?} is not CxHxW")),
    };
    let (o, win, oh, ow) = conv_geometry("conv2d_input_vjp", (c, h, wd), w, stride, pad)?;
    if grad_out.shape() != [o, oh, ow] {
        return shape_err(
            "conv2d_input_vjp",
            format!(
                "grad {:?} does not match conv output [{o}, {oh}, {ow}]",
                grad_out.shape()
            ),
        );
    }
    #[allow(clippy::too_many_arguments)]
    fn kernel<T: Real>(
        g: &[T],
        w: &[T],
        (c, h, wd): (usize, usize, usize),
        o: usize,
        win: Window,
        oh: usize,
        ow: usize,
    ) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); c * h * wd];
        for f in 0..o {
            let gplane = &g[f * oh * ow..(f + 1) * oh * ow];
            for ch in 0..c {
                let xin = &mut out[ch * h * wd..(ch + 1) * h * wd];
                for ki in 0..win.kh {
                    for kj in 0..win.kw {
                        let wv = w[((f * c + ch) * win.kh + ki) * win.kw + kj];
                        if wv == T::zero() {
                            continue;
                        }
                        for oi in 0..oh {
                            let ii = (oi * win.sh + ki) as isize - win.ph as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            let grow = &gplane[oi * ow..(oi + 1) * ow];
                            let xrow = &mut xin[ii as usize * wd..(ii as usize + 1) * wd];
                            for (oj, &gv) in grow.iter().enumerate() {
                                let jj = (oj * win.sw + kj) as isize - win.pw as isize;
                                if jj >= 0 && jj < wd as isize {
                                    xrow[jj as usize] = xrow[jj as usize] + wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
    let data = binary_float!("conv2d_input_vjp", grad_out, w, |gs, ws| kernel(
        gs,
        ws,
        (c, h, wd),
        o,
        win,
        oh,
        ow
    ))?;
    Ok(Tensor {
        shape: vec![c, h, wd],
        data,
    })
}

/// Vector-Jacobian product of [`conv2d`] with respect to its kernel.
pub fn conv2d_weight_vjp(
    x: &Tensor,
    grad_out: &Tensor,
    kernel_shape: &[usize],
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Tensor> {
    let (c, h, wd) = chw("conv2d_weight_vjp", x)?;
    let probe = Tensor::zeros(x.dtype(), kernel_shape);
    let (o, win, oh, ow) = conv_geometry("conv2d_weight_vjp", (c, h, wd), &probe, stride, pad)?;
    if grad_out.shape() != [o, oh, ow] {
        return shape_err(
            "conv2d_weight_vjp",
            format!("grad {:?} vs conv output [{o}, {oh}, {ow}]", grad_out.shape()),
        );
    }
    #[allow(clippy::too_many_arguments)]
    fn kernel<T: Real>(
        x: &[T],
        g: &[T],
        (c, h, wd): (usize, usize, usize),
        o: usize,
        win: Window,
        oh: usize,
        ow: usize,
    ) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); o * c * win.kh * win.kw];
        for f in 0..o {
            let gplane = &g[f * oh * ow..(f + 1) * oh * ow];
            for ch in 0..c {
                let xin = &x[ch * h * wd..(ch + 1) * h * wd];
                for ki in 0..win.kh {
                    for kj in 0..win.kw {
                        let mut acc = T::zero();
                        for oi in 0..oh {
                            let ii = (oi * win.sh + ki) as isize - win.ph as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            let xrow = &xin[ii as usize * wd..(ii as usize + 1) * wd];
                            for (oj, &gv) in gplane[oi * ow..(oi + 1) * ow].iter().enumerate() {
                                let jj = (oj * win.sw + kj) as isize - win.pw as isize;
                                if jj >= 0 && jj < wd as isize {
                                    acc = acc + gv * xrow[jj as usize];
                                }
                            }
                        }
                        out[((f * c + ch) * win.kh + ki) * win.kw + kj] = acc;
                    }
                }
            }
        }
        Ok(out)
    }
    let data = binary_float!("conv2d_weight_vjp", x, grad_out, |xs, gs| kernel(
        xs,
        gs,
        (c, h, wd),
        o,
        win,
        oh,
        ow
    ))?;
    Ok(Tensor {
        shape: kernel_shape.to_vec(),
        data,
    })
}

/// Output of [`maxpool2d`]: pooled values plus, per output cell, the flat input offset of
/// the winning element.
#[derive(Clone, Debug, PartialEq)]
pub struct MaxPool {
    pub output: Tensor,
    pub argmax: Vec<usize>,
}

fn pool_geometry(
    op: &'static str,
    x: &Tensor,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<(usize, usize, usize, Window, usize, usize)> {
    let (c, h, w) = chw(op, x)?;
    let win = Window {
        kh: window.0,
        kw: window.1,
        sh: stride.0,
        sw: stride.1,
        ph: 0,
        pw: 0,
    };
    let (oh, ow) = win.output(op, h, w)?;
    Ok((c, h, w, win, oh, ow))
}

/// Per-window maximum; ties go to the first element in row-major order.
pub fn maxpool2d(x: &Tensor, window: (usize, usize), stride: (usize, usize)) -> Result<MaxPool> {
    let (c, h, w, win, oh, ow) = pool_geometry("maxpool2d", x, window, stride)?;
    let mut argmax = Vec::with_capacity(c * oh * ow);
    let vals = x.to_f64_vec();
    for ch in 0..c {
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = ch * h * w + (oi * win.sh) * w + oj * win.sw;
                for ki in 0..win.kh {
                    for kj in 0..win.kw {
                        let idx = ch * h * w + (oi * win.sh + ki) * w + oj * win.sw + kj;
                        if vals[idx] > vals[best] {
                            best = idx;
                        }
                    }
                }
                argmax.push(best);
            }
        }
    }
    let data = match &x.data {
        Storage::F32(v) => Storage::F32(argmax.iter().map(|&i| v[i]).collect()),
        Storage::F64(v) => Storage::F64(argmax.iter().map(|&i| v[i]).collect()),
        other => {
            return Err(TensorError::UnsupportedDtype {
                op: "maxpool2d",
                dtype: other.dtype(),
            })
        }
    };
    Ok(MaxPool {
        output: Tensor {
            shape: vec![c, oh, ow],
            data,
        },
        argmax,
    })
}

/// Routes `grad_out` back to the stored argmax positions.
pub fn maxpool2d_vjp(grad_out: &Tensor, argmax: &[usize], input_shape: &[usize]) -> Result<Tensor> {
    if grad_out.len() != argmax.len() {
        return shape_err(
            "maxpool2d_vjp",
            format!("{} gradients for {} argmax entries", grad_out.len(), argmax.len()),
        );
    }
    let n: usize = input_shape.iter().product();
    if argmax.iter().any(|&i| i >= n) {
        return shape_err("maxpool2d_vjp", "argmax outside input");
    }
    let data = unary_float!("maxpool2d_vjp", grad_out, |g| {
        let mut out = vec![Default::default(); n];
        for (&i, &gv) in argmax.iter().zip(g) {
            out[i] = out[i] + gv;
        }
        Ok::<_, TensorError>(out)
    })?;
    Tensor::new(input_shape.to_vec(), data)
}

/// Per-window mean.
pub fn avgpool2d(x: &Tensor, window: (usize, usize), stride: (usize, usize)) -> Result<Tensor> {
    let (c, h, w, win, oh, ow) = pool_geometry("avgpool2d", x, window, stride)?;
    fn kernel<T: Real>(
        x: &[T],
        (c, h, w): (usize, usize, usize),
        win: Window,
        oh: usize,
        ow: usize,
    ) -> Result<Vec<T>> {
        let inv = T::from_f64(1.0 / (win.kh * win.kw) as f64);
        let mut out = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = T::zero();
                    for ki in 0..win.kh {
                        for kj in 0..win.kw {
                            acc = acc + x[ch * h * w + (oi * win.sh + ki) * w + oj * win.sw + kj];
                        }
                    }
                    out.push(acc * inv);
                }
            }
        }
        Ok(out)
    }
    let data = unary_float!("avgpool2d", x, |xs| kernel(xs, (c, h, w), win, oh, ow))?;
    Ok(Tensor {
        shape: vec![c, oh, ow],
        data,
    })
}

/// Spreads each output gradient uniformly over its window.
pub fn avgpool2d_vjp(
    grad_out: &Tensor,
    window: (usize, usize),
    stride: (usize, usize),
    input_shape: &[usize],
) -> Result<Tensor> {
    let probe = Tensor::zeros(grad_out.dtype(), input_shape);
    let (c, h, w, win, oh, ow) = pool_geometry("avgpool2d_vjp", &probe, window, stride)?;
    if grad_out.shape() != [c, oh, ow] {
        return shape_err(
            "avgpool2d_vjp",
            format!("grad {:?} vs pooled [{c}, {oh}, {ow}]", grad_out.shape()),
        );
    }
    fn kernel<T: Real>(
        g: &[T],
        (c, h, w): (usize, usize, usize),
        win: Window,
        oh: usize,
        ow: usize,
    ) -> Result<Vec<T>> {
        let inv = T::from_f64(1.0 / (win.kh * win.kw) as f64);
        let mut out = vec![T::zero(); c * h * w];
        for ch in 0..c {
            for oi in 0..oh {
                for oj in 0..ow {
                    let gv = g[(ch * oh + oi) * ow + oj] * inv;
                    for ki in 0..win.kh {
                        for kj in 0..win.kw {
                            let idx = ch * h * w + (oi * win.sh + ki) * w + oj * win.sw + kj;
                            out[idx] = out[idx] + gv;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
    let data = unary_float!("avgpool2d_vjp", grad_out, |gs| kernel(gs, (c, h, w), win, oh, ow))?;
    Tensor::new(input_shape.to_vec(), data)
}
