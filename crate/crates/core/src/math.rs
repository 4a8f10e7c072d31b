//! Flat parameter vectors and the handful of dense kernels the simulator needs.
//!
//! Summation orders are fixed so results are reproducible bit for bit:
//! [`dot`] and [`lincomb`] accumulate strictly in index order.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl LayoutEntry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            shape,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered list of named tensors packed into a [`ParamVec`].
///
/// Cheap to clone; the entries are shared.
#[derive(Clone)]
pub struct Layout(Arc<[LayoutEntry]>);

impl Layout {
    pub fn new(entries: Vec<LayoutEntry>) -> Self {
        Layout(entries.into())
    }

    /// A single one-dimensional entry named `values`.
    pub fn flat(len: usize) -> Self {
        Layout::new(vec![LayoutEntry::new("values", vec![len])])
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.0
    }

    pub fn numel(&self) -> usize {
        self.0.iter().map(LayoutEntry::numel).sum()
    }

    /// Offset of each entry inside the flat buffer.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.0
            .iter()
            .map(|e| {
                let at = acc;
                acc += e.numel();
                at
            })
            .collect()
    }
}

impl PartialEq for Layout {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0) || self.0 == other.0
    }
}

impl Eq for Layout {}

impl fmt::Debug for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
    }
}

/// Flat vector of model parameters plus the layout describing it.
///
/// Constructors reject non-finite entries. Mutable access is available for
/// in-place optimizers; callers that can overflow re-check with
/// [`ParamVec::check_finite`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVec {
    values: Vec<f64>,
    layout: Layout,
}

impl ParamVec {
    pub fn new(values: Vec<f64>, layout: Layout) -> Result<Self> {
        if layout.numel() != values.len() {
            return Err(Error::invalid(alloc::format!(
                "layout describes {} elements but {} values were given",
                layout.numel(),
                values.len()
            )));
        }
        let pv = ParamVec { values, layout };
        pv.check_finite("ParamVec::new")?;
        Ok(pv)
    }

    /// Convenience constructor with a [`Layout::flat`] layout.
    pub fn from_slice(values: &[f64]) -> Result<Self> {
        ParamVec::new(values.to_vec(), Layout::flat(values.len()))
    }

    pub fn zeros(layout: Layout) -> Self {
        ParamVec {
            values: vec![0.0; layout.numel()],
            layout,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn check_finite(&self, location: &str) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::overflow(alloc::format!(
                "{location} (element {i} = {})",
                self.values[i]
            ))),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    /// `self - other`, elementwise.
    pub fn sub(&self, other: &ParamVec) -> Result<ParamVec> {
        same_layout(self, other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(ParamVec {
            values,
            layout: self.layout.clone(),
        })
    }

    /// Replaces `self` with `other - self`, elementwise, without allocating.
    pub fn sub_from(&mut self, other: &ParamVec) -> Result<()> {
        same_layout(self, other)?;
        for (s, o) in self.values.iter_mut().zip(&other.values) {
            *s = o - *s;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &ParamVec) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality of values and layout. Distinguishes `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &ParamVec) -> bool {
        self.layout == other.layout
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn same_layout(a: &ParamVec, b: &ParamVec) -> Result<()> {
    if a.layout != b.layout || a.values.len() != b.values.len() {
        return Err(Error::invalid("parameter layouts differ"));
    }
    Ok(())
}

/// Numerically stable softmax.
///
/// The normalizer is accumulated over the exponentials sorted ascending, so
/// the result is exactly permutation-equivariant.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if let Some(x) = logits.iter().find(|x| !x.is_finite()) {
        return Err(Error::invalid(alloc::format!(
            "softmax input {x} is not finite"
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| libm::exp(x - max)).collect();
    let mut sorted = exps.clone();
    sorted.sort_by(f64::total_cmp);
    let total: f64 = sorted.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

const DOT_LANES: usize = 8;

/// Dot product of two slices. Element `i` goes to partial sum `i % 8`; the
/// partial sums are combined pairwise at the end, so the result depends only
/// on the inputs.
pub fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; DOT_LANES];
    let (a_head, a_tail) = a.split_at(n - n % DOT_LANES);
    let (b_head, b_tail) = b.split_at(n - n % DOT_LANES);
    for (x, y) in a_head
        .chunks_exact(DOT_LANES)
        .zip(b_head.chunks_exact(DOT_LANES))
    {
        for l in 0..DOT_LANES {
            acc[l] += x[l] * y[l];
        }
    }
    for (l, (x, y)) in a_tail.iter().zip(b_tail).enumerate() {
        acc[l] += x * y;
    }
    let quad = [
        acc[0] + acc[4],
        acc[1] + acc[5],
        acc[2] + acc[6],
        acc[3] + acc[7],
    ];
    (quad[0] + quad[2]) + (quad[1] + quad[3])
}

/// Dot product of two equally long vectors.
pub fn dot(a: &ParamVec, b: &ParamVec) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(alloc::format!(
            "dot of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(dot_slices(&a.values, &b.values))
}

/// `Σ_k coeffs[k] · vecs[k]`, accumulated over `k` in index order starting
/// from zero.
pub fn lincomb(coeffs: &[f64], vecs: &[&ParamVec]) -> Result<ParamVec> {
    if coeffs.len() != vecs.len() {
        return Err(Error::invalid(alloc::format!(
            "{} coefficients for {} vectors",
            coeffs.len(),
            vecs.len()
        )));
    }
    let first = vecs
        .first()
        .ok_or_else(|| Error::invalid("linear combination of zero vectors"))?;
    for v in &vecs[1..] {
        same_layout(first, v)?;
    }
    let mut out = ParamVec::zeros(first.layout.clone());
    for (&c, v) in coeffs.iter().zip(vecs) {
        for (o, x) in out.values.iter_mut().zip(&v.values) {
            *o += c * x;
        }
    }
    Ok(out)
}

pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

/// Strided read-only view of a dense matrix.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> MatRef<'a> {
    pub(crate) fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        MatRef {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub(crate) fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = alpha · a · b + beta · c` with `c` row-major `a.rows × b.cols`.
pub(crate) fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!((m - 1) * a.rs + (k - 1) * a.cs < a.data.len());
        assert!((k - 1) * b.rs + (n - 1) * b.cs < b.data.len());
    }
    // SAFETY: every index touched by dgemm lies inside the bounds asserted
    // above, and `c` does not alias `a` or `b` (it is a unique borrow).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
