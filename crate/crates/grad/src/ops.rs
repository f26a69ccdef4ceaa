use std::sync::Arc;

use crate::{GradError, Result, Tensor};

/// Batched toroidal grid geometry used by [`Op::NeighborLinear`].
///
/// A grid tensor is stored as `[batch * height * width, channels]`, with the
/// row index `(b * height + u) * width + v`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridDims {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl GridDims {
    pub fn new(batch: usize, height: usize, width: usize) -> Self {
        Self {
            batch,
            height,
            width,
        }
    }

    pub fn cells(&self) -> usize {
        self.batch * self.height * self.width
    }

    /// Row indices of the 3x3 Moore neighborhood of `row`, wrapping at the
    /// edges. Order is row-major over offsets (-1,-1), (-1,0), ..., (1,1).
    #[inline]
    pub fn neighborhood(&self, row: usize) -> [usize; 9] {
        let (h, w) = (self.height, self.width);
        let plane = h * w;
        let b = row / plane;
        let rem = row % plane;
        let (u, v) = (rem / w, rem % w);
        let mut out = [0usize; 9];
        let mut i = 0;
        for du in [h - 1, 0, 1] {
            let nu = (u + du) % h;
            for dv in [w - 1, 0, 1] {
                let nv = (v + dv) % w;
                out[i] = b * plane + nu * w + nv;
                i += 1;
            }
        }
        out
    }
}

/// Operation recorded on a [`crate::Tape`].
///
/// Binary `Add`/`Mul` broadcast only their right operand: a one-element
/// tensor, a column `[rows, 1]` against `[rows, n]`, or a rank-1 row of the
/// left operand's last-axis length.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Constant,
    Add,
    Mul,
    MatMul,
    Sum,
    Relu,
    Tanh,
    /// Softmax over the last axis. Masked-out entries (false) receive exactly
    /// zero weight and no gradient.
    Softmax {
        mask: Option<Arc<[bool]>>,
    },
    Clip {
        lo: f32,
        hi: f32,
    },
    /// Row-wise cosine similarity over the last axis, `eps` added to each norm.
    Cosine {
        eps: f32,
    },
    Log,
    Neg,
    Scale(f32),
    Offset(f32),
    SliceCols {
        start: usize,
        len: usize,
    },
    ConcatCols,
    /// Places input rows at the given output rows of a zero `[total, cols]`
    /// tensor. Duplicate targets accumulate.
    ScatterRows {
        rows: Arc<[u32]>,
        total: usize,
    },
    /// `patches(x)[cells] @ w + b` where each patch is the flattened 3x3
    /// neighborhood of a grid cell. Patches are rebuilt in backward instead of
    /// being stored.
    NeighborLinear {
        grid: GridDims,
        cells: Arc<[u32]>,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::MatMul => "matmul",
            Op::Sum => "sum",
            Op::Relu => "relu",
            Op::Tanh => "tanh",
            Op::Softmax { .. } => "softmax",
            Op::Clip { .. } => "clip",
            Op::Cosine { .. } => "cosine",
            Op::Log => "log",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::Offset(_) => "offset",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols => "concat_cols",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::NeighborLinear { .. } => "neighbor_linear",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Leaf | Op::Constant => Some(0),
            Op::Add | Op::Mul | Op::MatMul | Op::Cosine { .. } => Some(2),
            Op::NeighborLinear { .. } => Some(3),
            Op::ConcatCols => None,
            _ => Some(1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    Col,
    Row,
}

fn bcast(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Result<Bcast> {
    if lhs.shape() == rhs.shape() {
        Ok(Bcast::Same)
    } else if rhs.numel() == 1 {
        Ok(Bcast::Scalar)
    } else if lhs.rank() >= 1 && rhs.rank() >= 1 && rhs.last_dim() == 1 && rhs.numel() == lhs.rows()
    {
        Ok(Bcast::Col)
    } else if rhs.rank() == 1 && rhs.numel() == lhs.last_dim() {
        Ok(Bcast::Row)
    } else {
        Err(GradError::ShapeMismatch {
            op,
            lhs: lhs.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        })
    }
}

fn binary(
    op: &'static str,
    lhs: &Tensor,
    rhs: &Tensor,
    f: impl Fn(f32, f32) -> f32,
) -> Result<Tensor> {
    let kind = bcast(op, lhs, rhs)?;
    let cols = lhs.last_dim().max(1);
    Ok(lhs.with_shape_of(zip_bcast(kind, lhs.data(), rhs.data(), cols, f)))
}

/// Elementwise `f(l, r)` with `r` broadcast according to `kind`.
fn zip_bcast(
    kind: Bcast,
    l: &[f32],
    r: &[f32],
    cols: usize,
    f: impl Fn(f32, f32) -> f32,
) -> Vec<f32> {
    match kind {
        Bcast::Same => l.iter().zip(r).map(|(&a, &b)| f(a, b)).collect(),
        Bcast::Scalar => {
            let b = r[0];
            l.iter().map(|&a| f(a, b)).collect()
        }
        Bcast::Col => {
            let mut out = Vec::with_capacity(l.len());
            for (row, &b) in l.chunks_exact(cols).zip(r) {
                out.extend(row.iter().map(|&a| f(a, b)));
            }
            out
        }
        Bcast::Row => {
            let mut out = Vec::with_capacity(l.len());
            for row in l.chunks_exact(cols) {
                out.extend(row.iter().zip(r).map(|(&a, &b)| f(a, b)));
            }
            out
        }
    }
}

/// Reduce a full-size gradient back onto a broadcast right operand.
fn reduce_to_rhs(kind: Bcast, full: Vec<f32>, rhs: &Tensor, cols: usize) -> Tensor {
    let mut out = match kind {
        Bcast::Same => return rhs.with_shape_of(full),
        _ => vec![0.0f32; rhs.numel()],
    };
    match kind {
        Bcast::Scalar => out[0] = full.iter().sum(),
        Bcast::Col => {
            for (o, row) in out.iter_mut().zip(full.chunks_exact(cols)) {
                *o = row.iter().sum();
            }
        }
        _ => {
            for row in full.chunks_exact(cols) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
    }
    rhs.with_shape_of(out)
}

fn mismatch(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> GradError {
    GradError::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

/// `c (+)= a @ b` with arbitrary strides, `a: m x k`, `b: k x n`, `c: m x n`
/// row-major contiguous.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    c: &mut [f32],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    debug_assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides describe in-bounds views of `a`, `b` and `c` for the
    // given dimensions; every caller derives them from the slice shapes.
    unsafe {
        matrixmultiply::sgemm(
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

fn check_grid(op: &'static str, grid: &GridDims, cells: &[u32], x: &Tensor) -> Result<()> {
    if x.rank() != 2 || x.shape()[0] != grid.cells() {
        return Err(GradError::InvalidArgument {
            op,
            reason: format!("grid {grid:?} does not match input shape {:?}", x.shape()),
        });
    }
    if grid.height == 0 || grid.width == 0 {
        return Err(GradError::InvalidArgument {
            op,
            reason: "empty grid".into(),
        });
    }
    if let Some(&bad) = cells.iter().find(|&&c| c as usize >= grid.cells()) {
        return Err(GradError::InvalidArgument {
            op,
            reason: format!("cell {bad} out of range"),
        });
    }
    Ok(())
}

/// Rows of im2col patches processed at a time, small enough to stay in cache.
const PATCH_BLOCK: usize = 256;

/// Fill `out` with the 3x3 patches of `cells`, one row of `9 * C` per cell.
fn build_patches(grid: &GridDims, cells: &[u32], x: &Tensor, out: &mut Vec<f32>) {
    let c = x.last_dim();
    let xd = x.data();
    out.clear();
    for &cell in cells {
        for nb in grid.neighborhood(cell as usize) {
            out.extend_from_slice(&xd[nb * c..(nb + 1) * c]);
        }
    }
}

/// Evaluate `op` on `inputs`.
pub(crate) fn eval(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    if let Some(n) = op.arity() {
        if inputs.len() != n {
            return Err(GradError::InvalidArgument {
                op: op.name(),
                reason: format!("expected {n} inputs, got {}", inputs.len()),
            });
        }
    }
    let out = match op {
        Op::Leaf | Op::Constant => unreachable!("leaves are not evaluated"),
        Op::Add => binary("add", inputs[0], inputs[1], |a, b| a + b)?,
        Op::Mul => binary("mul", inputs[0], inputs[1], |a, b| a * b)?,
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(mismatch("matmul", a, b));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![0.0f32; m * n];
            gemm(
                m,
                k,
                n,
                a.data(),
                (k as isize, 1),
                b.data(),
                (n as isize, 1),
                &mut out,
                false,
            );
            Tensor::new([m, n], out)?
        }
        Op::Sum => Tensor::scalar(inputs[0].data().iter().map(|&v| v as f64).sum::<f64>() as f32),
        Op::Relu => inputs[0].map(|v| v.max(0.0)),
        Op::Tanh => inputs[0].map(tanh),
        Op::Softmax { mask } => softmax(inputs[0], mask.as_deref())?,
        Op::Clip { lo, hi } => {
            if !(lo <= hi) {
                return Err(GradError::InvalidArgument {
                    op: "clip",
                    reason: format!("lo {lo} > hi {hi}"),
                });
            }
            inputs[0].map(|v| v.clamp(*lo, *hi))
        }
        Op::Cosine { eps } => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() || a.rank() == 0 {
                return Err(mismatch("cosine", a, b));
            }
            let d = a.last_dim();
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = 1;
            let data = a
                .data()
                .chunks_exact(d)
                .zip(b.data().chunks_exact(d))
                .map(|(ra, rb)| {
                    let (s, na, nb) = dots(ra, rb);
                    s / ((na + eps) * (nb + eps))
                })
                .collect();
            Tensor::new(shape, data)?
        }
        Op::Log => inputs[0].map(f32::ln),
        Op::Neg => inputs[0].map(|v| -v),
        Op::Scale(s) => inputs[0].map(|v| v * s),
        Op::Offset(o) => inputs[0].map(|v| v + o),
        Op::SliceCols { start, len } => {
            let x = inputs[0];
            let c = x.last_dim();
            if x.rank() == 0 || start + len > c {
                return Err(GradError::InvalidArgument {
                    op: "slice_cols",
                    reason: format!("columns {start}..{} of {c}", start + len),
                });
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = *len;
            let data = x
                .data()
                .chunks_exact(c)
                .flat_map(|r| r[*start..start + len].iter().copied())
                .collect();
            Tensor::new(shape, data)?
        }
        Op::ConcatCols => {
            let first = inputs.first().ok_or(GradError::InvalidArgument {
                op: "concat_cols",
                reason: "no inputs".into(),
            })?;
            let rows = first.rows();
            for t in inputs {
                if t.rank() == 0 || t.rows() != rows {
                    return Err(mismatch("concat_cols", first, t));
                }
            }
            let total: usize = inputs.iter().map(|t| t.last_dim()).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for t in inputs {
                    let c = t.last_dim();
                    data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
                }
            }
            Tensor::new([rows, total], data)?
        }
        Op::ScatterRows { rows, total } => {
            let x = inputs[0];
            if x.rows() != rows.len() || x.rank() == 0 {
                return Err(GradError::InvalidArgument {
                    op: "scatter_rows",
                    reason: format!("{} index rows for input {:?}", rows.len(), x.shape()),
                });
            }
            let c = x.last_dim();
            let mut data = vec![0.0f32; total * c];
            for (src, &dst) in x.data().chunks_exact(c).zip(rows.iter()) {
                let dst = dst as usize;
                if dst >= *total {
                    return Err(GradError::InvalidArgument {
                        op: "scatter_rows",
                        reason: format!("row {dst} out of range {total}"),
                    });
                }
                for (o, s) in data[dst * c..(dst + 1) * c].iter_mut().zip(src) {
                    *o += s;
                }
            }
            Tensor::new([*total, c], data)?
        }
        Op::NeighborLinear { grid, cells } => {
            let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
            check_grid("neighbor_linear", grid, cells, x)?;
            let c = x.last_dim();
            if w.rank() != 2 || w.shape()[0] != 9 * c {
                return Err(mismatch("neighbor_linear", x, w));
            }
            let o = w.shape()[1];
            if b.rank() != 1 || b.numel() != o {
                return Err(mismatch("neighbor_linear", w, b));
            }
            let m = cells.len();
            let k = 9 * c;
            let mut out = Vec::with_capacity(m * o);
            for _ in 0..m {
                out.extend_from_slice(b.data());
            }
            let mut patches = Vec::with_capacity(PATCH_BLOCK * k);
            for (block, dst) in cells
                .chunks(PATCH_BLOCK)
                .zip(out.chunks_mut(PATCH_BLOCK * o))
            {
                build_patches(grid, block, x, &mut patches);
                gemm(
                    block.len(),
                    k,
                    o,
                    &patches,
                    (k as isize, 1),
                    w.data(),
                    (o as isize, 1),
                    dst,
                    true,
                );
            }
            Tensor::new([m, o], out)?
        }
    };
    if !out.is_finite() {
        return Err(GradError::NonFinite(op.name()));
    }
    Ok(out)
}

/// Rational minimax approximation of `tanh`, within a few ulp of the exact
/// value over all of f32. Much faster than libm and auto-vectorizes.
#[inline]
pub(crate) fn tanh(x: f32) -> f32 {
    const CLAMP: f32 = 7.905_311;
    const A1: f32 = 4.893_524_5e-3;
    const A3: f32 = 6.372_619_3e-4;
    const A5: f32 = 1.485_722_4e-5;
    const A7: f32 = 5.122_297e-8;
    const A9: f32 = -8.604_672e-11;
    const A11: f32 = 2.000_188e-13;
    const A13: f32 = -2.760_768_5e-16;
    const B0: f32 = 4.893_525e-3;
    const B2: f32 = 2.268_434_6e-3;
    const B4: f32 = 1.185_347_1e-4;
    const B6: f32 = 1.198_258_4e-6;
    let small = x.abs() < 4e-4;
    let y = x.clamp(-CLAMP, CLAMP);
    let y2 = y * y;
    let p = ((((((A13 * y2 + A11) * y2 + A9) * y2 + A7) * y2 + A5) * y2 + A3) * y2 + A1) * y;
    let q = ((B6 * y2 + B4) * y2 + B2) * y2 + B0;
    if small {
        x
    } else {
        p / q
    }
}

#[inline]
fn dots(a: &[f32], b: &[f32]) -> (f32, f32, f32) {
    let (mut s, mut aa, mut bb) = (0.0f32, 0.0f32, 0.0f32);
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
        aa += x * x;
        bb += y * y;
    }
    (s, aa.sqrt(), bb.sqrt())
}

fn softmax(x: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    if x.rank() == 0 {
        return Err(GradError::InvalidArgument {
            op: "softmax",
            reason: "scalar input".into(),
        });
    }
    if let Some(m) = mask {
        if m.len() != x.numel() {
            return Err(GradError::InvalidArgument {
                op: "softmax",
                reason: format!("mask length {} for {} values", m.len(), x.numel()),
            });
        }
    }
    let c = x.last_dim();
    let mut out = vec![0.0f32; x.numel()];
    for (r, (row, dst)) in x
        .data()
        .chunks_exact(c)
        .zip(out.chunks_exact_mut(c))
        .enumerate()
    {
        let keep = |j: usize| mask.map_or(true, |m| m[r * c + j]);
        let max = (0..c)
            .filter(|&j| keep(j))
            .map(|j| row[j])
            .fold(f32::NEG_INFINITY, f32::max);
        if max == f32::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0f32;
        for j in 0..c {
            if keep(j) {
                let e = (row[j] - max).exp();
                dst[j] = e;
                total += e;
            }
        }
        for v in dst.iter_mut() {
            *v /= total;
        }
    }
    x.clone_shape(out)
}

impl Tensor {
    fn clone_shape(&self, data: Vec<f32>) -> Result<Tensor> {
        Tensor::new(self.shape().to_vec(), data)
    }
}

/// Vector-Jacobian product: gradients for the inputs flagged in `needs`.
pub(crate) fn vjp(
    op: &Op,
    inputs: &[&Tensor],
    output: &Tensor,
    grad: &Tensor,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let g = grad.data();
    let mut out: Vec<Option<Tensor>> = vec![None; inputs.len()];
    match op {
        Op::Leaf | Op::Constant => {}
        Op::Add => {
            let (a, b) = (inputs[0], inputs[1]);
            let kind = bcast("add", a, b)?;
            if needs[0] {
                out[0] = Some(a.with_shape_of(g.to_vec()));
            }
            if needs[1] {
                out[1] = Some(reduce_to_rhs(kind, g.to_vec(), b, a.last_dim().max(1)));
            }
        }
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let kind = bcast("mul", a, b)?;
            let cols = a.last_dim().max(1);
            if needs[0] {
                out[0] =
                    Some(a.with_shape_of(zip_bcast(kind, g, b.data(), cols, |gi, bi| gi * bi)));
            }
            if needs[1] {
                let full = g.iter().zip(a.data()).map(|(&gi, &ai)| gi * ai).collect();
                out[1] = Some(reduce_to_rhs(kind, full, b, cols));
            }
        }
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            if needs[0] {
                // dA = G B^T
                let mut d = vec![0.0f32; m * k];
                gemm(
                    m,
                    n,
                    k,
                    g,
                    (n as isize, 1),
                    b.data(),
                    (1, n as isize),
                    &mut d,
                    false,
                );
                out[0] = Some(Tensor::new([m, k], d)?);
            }
            if needs[1] {
                // dB = A^T G
                let mut d = vec![0.0f32; k * n];
                gemm(
                    k,
                    m,
                    n,
                    a.data(),
                    (1, k as isize),
                    g,
                    (n as isize, 1),
                    &mut d,
                    false,
                );
                out[1] = Some(Tensor::new([k, n], d)?);
            }
        }
        Op::Sum => {
            let gv = g[0];
            out[0] = Some(inputs[0].with_shape_of(vec![gv; inputs[0].numel()]));
        }
        Op::Relu => {
            let d = g
                .iter()
                .zip(inputs[0].data())
                .map(|(&gi, &x)| if x > 0.0 { gi } else { 0.0 })
                .collect();
            out[0] = Some(inputs[0].with_shape_of(d));
        }
        Op::Tanh => {
            let d = g
                .iter()
                .zip(output.data())
                .map(|(&gi, &y)| gi * (1.0 - y * y))
                .collect();
            out[0] = Some(inputs[0].with_shape_of(d));
        }
        Op::Softmax { .. } => {
            let c = output.last_dim();
            let mut d = vec![0.0f32; output.numel()];
            for ((y, gr), dr) in output
                .data()
                .chunks_exact(c)
                .zip(g.chunks_exact(c))
                .zip(d.chunks_exact_mut(c))
            {
                let dot: f32 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    dr[j] = y[j] * (gr[j] - dot);
                }
            }
            out[0] = Some(inputs[0].with_shape_of(d));
        }
        Op::Clip { lo, hi } => {
            let d = g
                .iter()
                .zip(inputs[0].data())
                .map(|(&gi, &x)| if x >= *lo && x <= *hi { gi } else { 0.0 })
                .collect();
            out[0] = Some(inputs[0].with_shape_of(d));
        }
        Op::Cosine { eps } => {
            let (a, b) = (inputs[0], inputs[1]);
            let dim = a.last_dim();
            let mut da = if needs[0] {
                vec![0.0f32; a.numel()]
            } else {
                Vec::new()
            };
            let mut db = if needs[1] {
                vec![0.0f32; b.numel()]
            } else {
                Vec::new()
            };
            for (r, (ra, rb)) in a
                .data()
                .chunks_exact(dim)
                .zip(b.data().chunks_exact(dim))
                .enumerate()
            {
                let gr = g[r];
                if gr == 0.0 {
                    continue;
                }
                let (_, na, nb) = dots(ra, rb);
                let cval = output.data()[r];
                let inv = 1.0 / ((na + eps) * (nb + eps));
                if needs[0] {
                    let ka = if na > 0.0 {
                        cval / (na * (na + eps))
                    } else {
                        0.0
                    };
                    for ((d, &x), &y) in da[r * dim..(r + 1) * dim].iter_mut().zip(ra).zip(rb) {
                        *d = gr * (y * inv - ka * x);
                    }
                }
                if needs[1] {
                    let kb = if nb > 0.0 {
                        cval / (nb * (nb + eps))
                    } else {
                        0.0
                    };
                    for ((d, &x), &y) in db[r * dim..(r + 1) * dim].iter_mut().zip(ra).zip(rb) {
                        *d = gr * (x * inv - kb * y);
                    }
                }
            }
            if needs[0] {
                out[0] = Some(a.with_shape_of(da));
            }
            if needs[1] {
                out[1] = Some(b.with_shape_of(db));
            }
        }
        Op::Log => {
            let d = g
                .iter()
                .zip(inputs[0].data())
                .map(|(&gi, &x)| gi / x)
                .collect();
            out[0] = Some(inputs[0].with_shape_of(d));
        }
        Op::Neg => out[0] = Some(inputs[0].with_shape_of(g.iter().map(|v| -v).collect())),
        Op::Scale(s) => out[0] = Some(inputs[0].with_shape_of(g.iter().map(|v| v * s).collect())),
        Op::Offset(_) => out[0] = Some(inputs[0].with_shape_of(g.to_vec())),
        Op::SliceCols { start, len } => {
            let x = inputs[0];
            let c = x.last_dim();
            let mut d = vec![0.0f32; x.numel()];
            for (dr, gr) in d.chunks_exact_mut(c).zip(g.chunks_exact(*len)) {
                dr[*start..start + len].copy_from_slice(gr);
            }
            out[0] = Some(x.with_shape_of(d));
        }
        Op::ConcatCols => {
            let total = output.last_dim();
            let mut offset = 0;
            for (i, t) in inputs.iter().enumerate() {
                let c = t.last_dim();
                if needs[i] {
                    let d = g
                        .chunks_exact(total)
                        .flat_map(|r| r[offset..offset + c].iter().copied())
                        .collect();
                    out[i] = Some(t.with_shape_of(d));
                }
                offset += c;
            }
        }
        Op::ScatterRows { rows, .. } => {
            let x = inputs[0];
            let c = x.last_dim();
            let d = rows
                .iter()
                .flat_map(|&r| g[r as usize * c..(r as usize + 1) * c].iter().copied())
                .collect();
            out[0] = Some(x.with_shape_of(d));
        }
        Op::NeighborLinear { grid, cells } => {
            let (x, w) = (inputs[0], inputs[1]);
            let c = x.last_dim();
            let k = 9 * c;
            let o = w.shape()[1];
            if needs[2] {
                let mut db = vec![0.0f32; o];
                for row in g.chunks_exact(o) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                out[2] = Some(inputs[2].with_shape_of(db));
            }
            if !needs[0] && !needs[1] {
                return Ok(out);
            }
            let mut dw = if needs[1] {
                vec![0.0f32; k * o]
            } else {
                Vec::new()
            };
            let mut dx = if needs[0] {
                vec![0.0f32; x.numel()]
            } else {
                Vec::new()
            };
            let mut patches = Vec::with_capacity(PATCH_BLOCK * k);
            let mut dp = vec![0.0f32; PATCH_BLOCK * k];
            for (block, gb) in cells.chunks(PATCH_BLOCK).zip(g.chunks(PATCH_BLOCK * o)) {
                let rows = block.len();
                if needs[1] {
                    // dW += P^T G
                    build_patches(grid, block, x, &mut patches);
                    gemm(
                        k,
                        rows,
                        o,
                        &patches,
                        (1, k as isize),
                        gb,
                        (o as isize, 1),
                        &mut dw,
                        true,
                    );
                }
                if needs[0] {
                    // dP = G W^T, folded back onto the grid.
                    let dp = &mut dp[..rows * k];
                    gemm(
                        rows,
                        o,
                        k,
                        gb,
                        (o as isize, 1),
                        w.data(),
                        (1, o as isize),
                        dp,
                        false,
                    );
                    for (row, &cell) in dp.chunks_exact(k).zip(block) {
                        for (slot, nb) in row.chunks_exact(c).zip(grid.neighborhood(cell as usize))
                        {
                            for (d, v) in dx[nb * c..(nb + 1) * c].iter_mut().zip(slot) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            if needs[1] {
                out[1] = Some(w.with_shape_of(dw));
            }
            if needs[0] {
                out[0] = Some(x.with_shape_of(dx));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn clip_saturates_both_ends() {
        let out = eval(
            &Op::Clip { lo: -1.0, hi: 1.0 },
            &[&t(&[3], &[-2.0, 0.5, 3.0])],
        )
        .unwrap();
        assert_eq!(out.data(), &[-1.0, 0.5, 1.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let out = eval(&Op::Softmax { mask: None }, &[&t(&[3], &[0.0, 0.0, 0.0])]).unwrap();
        for v in out.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn masked_softmax_zeroes_excluded_entries() {
        let mask: Arc<[bool]> = vec![true, false, true].into();
        let out = eval(
            &Op::Softmax { mask: Some(mask) },
            &[&t(&[1, 3], &[0.0, 50.0, 0.0])],
        )
        .unwrap();
        assert_eq!(out.data(), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn cosine_of_orthogonal_vectors_is_zero() {
        let out = eval(
            &Op::Cosine { eps: 1e-8 },
            &[&t(&[1, 2], &[1.0, 0.0]), &t(&[1, 2], &[0.0, 1.0])],
        )
        .unwrap();
        assert_eq!(out.shape(), &[1, 1]);
        assert_eq!(out.data(), &[0.0]);
    }

    #[test]
    fn cosine_of_zero_vector_is_zero() {
        let out = eval(
            &Op::Cosine { eps: 1e-8 },
            &[&t(&[1, 2], &[0.0, 0.0]), &t(&[1, 2], &[0.3, 1.0])],
        )
        .unwrap();
        assert_eq!(out.data(), &[0.0]);
    }

    #[test]
    fn broadcast_rules() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let col = eval(&Op::Mul, &[&a, &t(&[2, 1], &[10.0, 100.0])]).unwrap();
        assert_eq!(col.data(), &[10.0, 20.0, 30.0, 400.0, 500.0, 600.0]);
        let row = eval(&Op::Add, &[&a, &t(&[3], &[1.0, 0.0, -1.0])]).unwrap();
        assert_eq!(row.data(), &[2.0, 2.0, 2.0, 5.0, 5.0, 5.0]);
        let sc = eval(&Op::Add, &[&a, &Tensor::scalar(1.0)]).unwrap();
        assert_eq!(sc.data()[5], 7.0);
        assert!(matches!(
            eval(&Op::Add, &[&a, &t(&[2], &[1.0, 2.0])]),
            Err(GradError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn tanh_approximation_is_tight() {
        let mut worst = 0.0f64;
        for i in -200_000..=200_000 {
            let x = i as f32 * 1e-4;
            let err = (tanh(x) as f64 - (x as f64).tanh()).abs();
            worst = worst.max(err);
        }
        assert!(worst < 5e-7, "max abs error {worst}");
        assert_eq!(tanh(100.0), tanh(7.905_311));
        assert!(tanh(100.0) <= 1.0 && tanh(-100.0) >= -1.0);
    }

    #[test]
    fn log_of_zero_is_rejected() {
        assert_eq!(
            eval(&Op::Log, &[&t(&[1], &[0.0])]),
            Err(GradError::NonFinite("log"))
        );
    }

    #[test]
    fn neighborhood_wraps_toroidally() {
        let g = GridDims::new(2, 3, 4);
        // replica 1, cell (0, 0)
        let row = 12;
        let nb = g.neighborhood(row);
        assert_eq!(nb[4], row);
        assert_eq!(nb[0], 12 + 2 * 4 + 3); // (-1,-1) -> (2,3)
        assert_eq!(nb[8], 12 + 4 + 1);
        assert!(nb.iter().all(|&r| (12..24).contains(&r)));
    }

    #[test]
    fn neighbor_linear_matches_explicit_patches() {
        let g = GridDims::new(1, 3, 3);
        let x = Tensor::from_fn([9, 1], |i| i as f32);
        let w = Tensor::from_fn([9, 1], |i| if i == 4 { 1.0 } else { 0.0 });
        let b = t(&[1], &[0.5]);
        let cells: Arc<[u32]> = vec![0, 4, 8].into();
        let out = eval(&Op::NeighborLinear { grid: g, cells }, &[&x, &w, &b]).unwrap();
        assert_eq!(out.data(), &[0.5, 4.5, 8.5]);
    }
}
