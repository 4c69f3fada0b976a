//! Hand-written CPU kernels for the hot elementwise and reduction ops.
//!
//! Each op has a fixed loop order, so results do not depend on threading.
//! Backward passes are themselves kernels applied without gradient tracking;
//! only first derivatives are supported, except for the resampling pair
//! which are adjoint to each other.

use candle_core::{bail, CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Result, Shape, Tensor, WithDType};

fn contiguous<'a, T>(v: &'a [T], l: &Layout) -> Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => bail!("kernel expects a contiguous input"),
    }
}

macro_rules! dispatch {
    ($s:expr, $l:expr, |$v:ident| $body:expr) => {
        match $s {
            CpuStorage::F32(v) => {
                let $v = contiguous(v, $l)?;
                CpuStorage::F32($body)
            }
            CpuStorage::F64(v) => {
                let $v = contiguous(v, $l)?;
                CpuStorage::F64($body)
            }
            _ => bail!("kernel supports f32 and f64 only"),
        }
    };
}

macro_rules! dispatch2 {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                let ($a, $b) = (contiguous(a, $l1)?, contiguous(b, $l2)?);
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                let ($a, $b) = (contiguous(a, $l1)?, contiguous(b, $l2)?);
                CpuStorage::F64($body)
            }
            _ => bail!("kernel needs matching f32 or f64 inputs"),
        }
    };
}

// ---- 3x3 convolution ----

#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

pub(crate) fn im2col_kernel<T: Copy + Default>(src: &[T], batch: usize, g: Geometry) -> Vec<T> {
    let Geometry {
        height: h,
        width: w,
        channels: c,
    } = g;
    let zeros = vec![T::default(); 3 * c];
    let mut out = Vec::with_capacity(batch * h * w * 9 * c);
    for b in 0..batch {
        for y in 0..h {
            for x in 0..w {
                for ky in 0..3 {
                    let yy = y as isize + ky as isize - 1;
                    if yy < 0 || yy >= h as isize {
                        out.extend_from_slice(&zeros);
                        continue;
                    }
                    let base = (b * h + yy as usize) * w;
                    let (lo, hi) = (x.saturating_sub(1), (x + 2).min(w));
                    if x == 0 {
                        out.extend_from_slice(&zeros[..c]);
                    }
                    out.extend_from_slice(&src[(base + lo) * c..(base + hi) * c]);
                    if x + 1 == w {
                        out.extend_from_slice(&zeros[..c]);
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn col2im_kernel<T: Copy + Default + std::ops::AddAssign>(
    src: &[T],
    batch: usize,
    g: Geometry,
) -> Vec<T> {
    let Geometry {
        height: h,
        width: w,
        channels: c,
    } = g;
    let mut out = vec![T::default(); batch * h * w * c];
    for b in 0..batch {
        for y in 0..h {
            for x in 0..w {
                let row = ((b * h + y) * w + x) * 9 * c;
                for ky in 0..3 {
                    let yy = y as isize + ky as isize - 1;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let xx = x as isize + kx as isize - 1;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let d = ((b * h + yy as usize) * w + xx as usize) * c;
                        let s = row + (ky * 3 + kx) * c;
                        for (o, v) in out[d..d + c].iter_mut().zip(&src[s..s + c]) {
                            *o += *v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Strided row-major matrix view.
struct MatRef<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    fn dense(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, rs: cols, cs: 1 }
    }

    fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn in_bounds(&self) -> bool {
        self.rows == 0 || self.cols == 0 || (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < self.data.len()
    }
}

/// `dst (+)= a · b` for a dense row-major `dst`, single-threaded.
fn gemm_into<T: WithDType>(dst: &mut [T], a: MatRef<T>, b: MatRef<T>, accumulate: bool) -> Result<()> {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if b.rows != k || dst.len() != m * n || !a.in_bounds() || !b.in_bounds() {
        bail!("gemm operands do not line up");
    }
    if m == 0 || n == 0 {
        return Ok(());
    }
    if k == 0 {
        if !accumulate {
            dst.fill(T::zero());
        }
        return Ok(());
    }
    // SAFETY: every operand index `(r, c)` maps to `r*rs + c*cs`, which the
    // bounds checks above keep inside each slice; `dst` is exclusively
    // borrowed and distinct from the inputs.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            a.data.as_ptr(),
            a.cs as isize,
            a.rs as isize,
            b.data.as_ptr(),
            b.cs as isize,
            b.rs as isize,
            T::one(),
            T::one(),
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
    Ok(())
}

/// `y = im2col(x) · w + b` with `x: [B,H,W,Cin]`, `w: [9·Cin, Cout]`, `b: [Cout]`.
pub(crate) struct Conv3x3;
struct Conv3x3Data(Geometry);
struct Conv3x3Filter(Geometry);

fn geometry(l: &Layout) -> Result<(usize, Geometry)> {
    let (b, h, w, c) = dims4(l)?;
    Ok((
        b,
        Geometry {
            height: h,
            width: w,
            channels: c,
        },
    ))
}

fn conv_fwd<T: WithDType + Default>(x: &[T], w: &[T], bias: &[T], batch: usize, g: Geometry, cout: usize) -> Result<Vec<T>> {
    let rows = batch * g.height * g.width;
    let k = 9 * g.channels;
    let cols = im2col_kernel(x, batch, g);
    let mut out: Vec<T> = Vec::with_capacity(rows * cout);
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    gemm_into(&mut out, MatRef::dense(&cols, rows, k), MatRef::dense(w, k, cout), true)?;
    Ok(out)
}

impl CustomOp3 for Conv3x3 {
    fn name(&self) -> &'static str {
        "conv3x3"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (batch, g) = geometry(l1)?;
        let (k, cout) = l2.shape().dims2()?;
        if k != 9 * g.channels || l3.shape().dims() != [cout] {
            bail!("conv3x3 weights {:?} / bias {:?} do not fit {} input channels", l2.shape(), l3.shape(), g.channels);
        }
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(w), CpuStorage::F32(b)) => CpuStorage::F32(conv_fwd(
                contiguous(x, l1)?,
                contiguous(w, l2)?,
                contiguous(b, l3)?,
                batch,
                g,
                cout,
            )?),
            (CpuStorage::F64(x), CpuStorage::F64(w), CpuStorage::F64(b)) => CpuStorage::F64(conv_fwd(
                contiguous(x, l1)?,
                contiguous(w, l2)?,
                contiguous(b, l3)?,
                batch,
                g,
                cout,
            )?),
            _ => bail!("conv3x3 needs matching f32 or f64 inputs"),
        };
        Ok((out, Shape::from((batch, g.height, g.width, cout))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (_, h, wd, c) = x.dims4()?;
        let g = Geometry {
            height: h,
            width: wd,
            channels: c,
        };
        let grad = grad.contiguous()?;
        let dx = if x.track_op() {
            Some(grad.apply_op2_no_bwd(&w.contiguous()?, &Conv3x3Data(g))?)
        } else {
            None
        };
        let dw = if w.track_op() {
            Some(x.contiguous()?.apply_op2_no_bwd(&grad, &Conv3x3Filter(g))?)
        } else {
            None
        };
        let db = if b.track_op() {
            let (n, hh, ww, co) = grad.dims4()?;
            Some(grad.reshape((1, n * hh * ww, co))?.apply_op1_no_bwd(&ChannelSum)?.reshape(co)?)
        } else {
            None
        };
        Ok((dx, dw, db))
    }
}

impl CustomOp2 for Conv3x3Data {
    fn name(&self) -> &'static str {
        "conv3x3_data_grad"
    }

    /// A convolution of `grad` with the spatially flipped, channel-transposed
    /// kernel: `w'[(2-ky, 2-kx, co), ci] = w[(ky, kx, ci), co]`.
    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = self.0;
        let (batch, h, w, cout) = dims4(l1)?;
        let cin = g.channels;
        fn run<T: WithDType + Default>(gr: &[T], wt: &[T], batch: usize, h: usize, w: usize, cin: usize, cout: usize) -> Result<Vec<T>> {
            let mut flipped = vec![T::zero(); 9 * cout * cin];
            for tap in 0..9 {
                for ci in 0..cin {
                    for co in 0..cout {
                        flipped[((8 - tap) * cout + co) * cin + ci] = wt[(tap * cin + ci) * cout + co];
                    }
                }
            }
            let geom = Geometry {
                height: h,
                width: w,
                channels: cout,
            };
            conv_fwd(gr, &flipped, &vec![T::zero(); cin], batch, geom, cin)
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                CpuStorage::F32(run(contiguous(a, l1)?, contiguous(b, l2)?, batch, h, w, cin, cout)?)
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                CpuStorage::F64(run(contiguous(a, l1)?, contiguous(b, l2)?, batch, h, w, cin, cout)?)
            }
            _ => bail!("conv3x3 grad needs matching f32 or f64 inputs"),
        };
        Ok((out, Shape::from((batch, h, w, cin))))
    }
}

impl CustomOp2 for Conv3x3Filter {
    fn name(&self) -> &'static str {
        "conv3x3_filter_grad"
    }

    /// `im2col(x)ᵀ · grad`.
    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = self.0;
        let (batch, h, w, _) = dims4(l1)?;
        let cout = dims4(l2)?.3;
        let k = 9 * g.channels;
        let rows = batch * h * w;
        fn run<T: WithDType + Default>(x: &[T], gr: &[T], rows: usize, k: usize, cout: usize, batch: usize, g: Geometry) -> Result<Vec<T>> {
            let cols = im2col_kernel(x, batch, g);
            let mut dw = vec![T::zero(); k * cout];
            gemm_into(&mut dw, MatRef::dense(&cols, rows, k).t(), MatRef::dense(gr, rows, cout), false)?;
            Ok(dw)
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                CpuStorage::F32(run(contiguous(a, l1)?, contiguous(b, l2)?, rows, k, cout, batch, g)?)
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                CpuStorage::F64(run(contiguous(a, l1)?, contiguous(b, l2)?, rows, k, cout, batch, g)?)
            }
            _ => bail!("conv3x3 grad needs matching f32 or f64 inputs"),
        };
        Ok((out, Shape::from((k, cout))))
    }
}

fn dims4(l: &Layout) -> Result<(usize, usize, usize, usize)> {
    l.shape().dims4()
}

// ---- leaky relu ----

pub(crate) struct LeakyRelu(pub f64);
struct LeakyReluGrad(f64);

impl CustomOp1 for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let k = self.0;
        fn run<T: WithDType>(x: &[T], k: f64) -> Vec<T> {
            let k = T::from_f64(k);
            x.iter().map(|&v| if v > T::zero() { v } else { v * k }).collect()
        }
        let out = dispatch!(s, l, |x| run(x, k));
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(arg.contiguous()?.apply_op2_no_bwd(&grad.contiguous()?, &LeakyReluGrad(self.0))?))
    }
}

impl CustomOp2 for LeakyReluGrad {
    fn name(&self) -> &'static str {
        "leaky_relu_grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let k = self.0;
        fn run<T: WithDType>(x: &[T], g: &[T], k: f64) -> Vec<T> {
            let k = T::from_f64(k);
            x.iter().zip(g).map(|(&v, &d)| if v > T::zero() { d } else { d * k }).collect()
        }
        let out = dispatch2!(s1, l1, s2, l2, |x, g| run(x, g, k));
        Ok((out, l1.shape().clone()))
    }
}

// ---- 2x nearest upsampling and its adjoint (2x2 block sums) ----

#[derive(Clone, Copy)]
pub(crate) enum Resample {
    Up,
    /// Sum of each 2×2 block times the factor.
    Down(f64),
}

fn upsample_kernel<T: WithDType>(x: &[T], (b, h, w, c): (usize, usize, usize, usize)) -> Vec<T> {
    let mut out = Vec::with_capacity(b * h * w * c * 4);
    for bi in 0..b {
        for y in 0..h {
            let row = &x[(bi * h + y) * w * c..(bi * h + y + 1) * w * c];
            for _ in 0..2 {
                for px in row.chunks_exact(c) {
                    out.extend_from_slice(px);
                    out.extend_from_slice(px);
                }
            }
        }
    }
    out
}

fn downsample_kernel<T: WithDType>(x: &[T], (b, h, w, c): (usize, usize, usize, usize), k: f64) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * oh * ow * c);
    for bi in 0..b {
        for y in 0..oh {
            for xx in 0..ow {
                let at = |dy: usize, dx: usize, ch: usize| x[((bi * h + 2 * y + dy) * w + 2 * xx + dx) * c + ch].to_f64();
                for ch in 0..c {
                    let s = at(0, 0, ch) + at(0, 1, ch) + at(1, 0, ch) + at(1, 1, ch);
                    out.push(WithDType::from_f64(s * k));
                }
            }
        }
    }
    out
}

impl CustomOp1 for Resample {
    fn name(&self) -> &'static str {
        match self {
            Resample::Up => "upsample2",
            Resample::Down(_) => "downsample2",
        }
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let d = dims4(l)?;
        let (b, h, w, c) = d;
        match *self {
            Resample::Up => Ok((dispatch!(s, l, |x| upsample_kernel(x, d)), Shape::from((b, 2 * h, 2 * w, c)))),
            Resample::Down(k) => {
                if h % 2 != 0 || w % 2 != 0 {
                    bail!("downsampling needs even spatial dims, got {h}x{w}");
                }
                Ok((dispatch!(s, l, |x| downsample_kernel(x, d, k)), Shape::from((b, h / 2, w / 2, c))))
            }
        }
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let g = grad.contiguous()?;
        Ok(Some(match *self {
            Resample::Up => g.apply_op1(Resample::Down(1.0))?,
            Resample::Down(k) => (g.apply_op1(Resample::Up)? * k)?,
        }))
    }
}

// ---- instance norm over the spatial dims of NHWC ----

pub(crate) struct InstanceNorm(pub f64);
struct InstanceNormGrad(f64);

/// Per-(batch, channel) mean and inverse std.
fn moments<T: WithDType>(x: &[T], (b, h, w, c): (usize, usize, usize, usize), eps: f64) -> Vec<(f64, f64)> {
    let n = (h * w) as f64;
    let mut stats = Vec::with_capacity(b * c);
    for bi in 0..b {
        let plane = &x[bi * h * w * c..(bi + 1) * h * w * c];
        let mut mean = vec![0f64; c];
        for px in plane.chunks_exact(c) {
            for (m, v) in mean.iter_mut().zip(px) {
                *m += v.to_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0f64; c];
        for px in plane.chunks_exact(c) {
            for ((s, v), m) in var.iter_mut().zip(px).zip(&mean) {
                let d = v.to_f64() - m;
                *s += d * d;
            }
        }
        stats.extend(mean.into_iter().zip(var).map(|(m, v)| (m, 1.0 / (v / n + eps).sqrt())));
    }
    stats
}

fn instance_norm_kernel<T: WithDType>(x: &[T], d: (usize, usize, usize, usize), eps: f64) -> Vec<T> {
    let (b, h, w, c) = d;
    let stats = moments(x, d, eps);
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        let range = bi * h * w * c..(bi + 1) * h * w * c;
        let mean: Vec<T> = stats[bi * c..(bi + 1) * c].iter().map(|s| T::from_f64(s.0)).collect();
        let rstd: Vec<T> = stats[bi * c..(bi + 1) * c].iter().map(|s| T::from_f64(s.1)).collect();
        for (o, px) in out[range.clone()].chunks_exact_mut(c).zip(x[range].chunks_exact(c)) {
            for k in 0..c {
                o[k] = (px[k] - mean[k]) * rstd[k];
            }
        }
    }
    out
}

/// `dx = r · (g − mean(g) − ŷ · mean(g ŷ))` per (batch, channel).
fn instance_norm_grad_kernel<T: WithDType>(x: &[T], g: &[T], d: (usize, usize, usize, usize), eps: f64) -> Vec<T> {
    let (b, h, w, c) = d;
    let n = (h * w) as f64;
    let stats = moments(x, d, eps);
    let mut out = Vec::with_capacity(x.len());
    for bi in 0..b {
        let range = bi * h * w * c..(bi + 1) * h * w * c;
        let (xp, gp) = (&x[range.clone()], &g[range]);
        let st = &stats[bi * c..(bi + 1) * c];
        let mut gm = vec![0f64; c];
        let mut gy = vec![0f64; c];
        for (px, pg) in xp.chunks_exact(c).zip(gp.chunks_exact(c)) {
            for k in 0..c {
                let y = (px[k].to_f64() - st[k].0) * st[k].1;
                gm[k] += pg[k].to_f64();
                gy[k] += pg[k].to_f64() * y;
            }
        }
        let mean: Vec<T> = st.iter().map(|s| T::from_f64(s.0)).collect();
        let rstd: Vec<T> = st.iter().map(|s| T::from_f64(s.1)).collect();
        let gmean: Vec<T> = gm.iter().map(|v| T::from_f64(v / n)).collect();
        let gymean: Vec<T> = gy.iter().map(|v| T::from_f64(v / n)).collect();
        for (px, pg) in xp.chunks_exact(c).zip(gp.chunks_exact(c)) {
            for k in 0..c {
                let y = (px[k] - mean[k]) * rstd[k];
                out.push(rstd[k] * (pg[k] - gmean[k] - y * gymean[k]));
            }
        }
    }
    out
}

impl CustomOp1 for InstanceNorm {
    fn name(&self) -> &'static str {
        "instance_norm"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let d = dims4(l)?;
        Ok((dispatch!(s, l, |x| instance_norm_kernel(x, d, self.0)), l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(arg.contiguous()?.apply_op2_no_bwd(&grad.contiguous()?, &InstanceNormGrad(self.0))?))
    }
}

impl CustomOp2 for InstanceNormGrad {
    fn name(&self) -> &'static str {
        "instance_norm_grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let d = dims4(l1)?;
        let out = dispatch2!(s1, l1, s2, l2, |x, g| instance_norm_grad_kernel(x, g, d, self.0));
        Ok((out, l1.shape().clone()))
    }
}

// ---- per-(batch, channel) scale and shift of [B, R, C] ----

pub(crate) struct ScaleShift;
struct ChannelSum;
struct ChannelDot;

fn brc(l: &Layout) -> Result<(usize, usize, usize)> {
    l.shape().dims3()
}

impl CustomOp3 for ScaleShift {
    fn name(&self) -> &'static str {
        "scale_shift"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (b, r, c) = brc(l1)?;
        if l2.shape().dims() != [b, c] || l3.shape().dims() != [b, c] {
            bail!("scale and shift must be [{b}, {c}]");
        }
        fn run<T: WithDType>(x: &[T], s: &[T], t: &[T], r: usize, c: usize) -> Vec<T> {
            let mut out = vec![T::zero(); x.len()];
            for (bi, (op, xp)) in out.chunks_exact_mut(r * c).zip(x.chunks_exact(r * c)).enumerate() {
                let (s, t) = (&s[bi * c..(bi + 1) * c], &t[bi * c..(bi + 1) * c]);
                for (o, px) in op.chunks_exact_mut(c).zip(xp.chunks_exact(c)) {
                    for k in 0..c {
                        o[k] = px[k] * s[k] + t[k];
                    }
                }
            }
            out
        }
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(s), CpuStorage::F32(t)) => {
                CpuStorage::F32(run(contiguous(x, l1)?, contiguous(s, l2)?, contiguous(t, l3)?, r, c))
            }
            (CpuStorage::F64(x), CpuStorage::F64(s), CpuStorage::F64(t)) => {
                CpuStorage::F64(run(contiguous(x, l1)?, contiguous(s, l2)?, contiguous(t, l3)?, r, c))
            }
            _ => bail!("scale_shift needs matching f32 or f64 inputs"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        scale: &Tensor,
        shift: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let g = grad.contiguous()?;
        let dx = g.apply_op3_no_bwd(&scale.contiguous()?, &shift.zeros_like()?, &ScaleShift)?;
        let ds = g.apply_op2_no_bwd(&x.contiguous()?, &ChannelDot)?;
        let dt = g.apply_op1_no_bwd(&ChannelSum)?;
        Ok((Some(dx), Some(ds), Some(dt)))
    }
}

impl CustomOp1 for ChannelSum {
    fn name(&self) -> &'static str {
        "channel_sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (b, r, c) = brc(l)?;
        fn run<T: WithDType>(x: &[T], r: usize, c: usize) -> Vec<T> {
            x.chunks_exact(r * c)
                .flat_map(|plane| {
                    let mut acc = vec![0f64; c];
                    for px in plane.chunks_exact(c) {
                        for (a, v) in acc.iter_mut().zip(px) {
                            *a += v.to_f64();
                        }
                    }
                    acc.into_iter().map(WithDType::from_f64)
                })
                .collect()
        }
        Ok((dispatch!(s, l, |x| run(x, r, c)), Shape::from((b, c))))
    }
}

impl CustomOp2 for ChannelDot {
    fn name(&self) -> &'static str {
        "channel_dot"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let (b, r, c) = brc(l1)?;
        fn run<T: WithDType>(g: &[T], x: &[T], r: usize, c: usize) -> Vec<T> {
            g.chunks_exact(r * c)
                .zip(x.chunks_exact(r * c))
                .flat_map(|(gp, xp)| {
                    let mut acc = vec![0f64; c];
                    for (pg, px) in gp.chunks_exact(c).zip(xp.chunks_exact(c)) {
                        for k in 0..c {
                            acc[k] += pg[k].to_f64() * px[k].to_f64();
                        }
                    }
                    acc.into_iter().map(WithDType::from_f64)
                })
                .collect()
        }
        Ok((dispatch2!(s1, l1, s2, l2, |g, x| run(g, x, r, c)), Shape::from((b, c))))
    }
}

/// `x + bias` for `x: [N, C]`, `bias: [C]`.
pub(crate) struct BiasAdd;

impl CustomOp2 for BiasAdd {
    fn name(&self) -> &'static str {
        "bias_add"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let (_, c) = l1.shape().dims2()?;
        if l2.shape().dims() != [c] {
            bail!("bias must have {c} entries");
        }
        fn run<T: WithDType>(x: &[T], bias: &[T], c: usize) -> Vec<T> {
            let mut out = x.to_vec();
            for row in out.chunks_exact_mut(c) {
                for k in 0..c {
                    row[k] += bias[k];
                }
            }
            out
        }
        let out = dispatch2!(s1, l1, s2, l2, |x, bias| run(x, bias, c));
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, _b: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let (n, c) = grad.dims2()?;
        let db = grad.contiguous()?.reshape((1, n, c))?.apply_op1_no_bwd(&ChannelSum)?.reshape(c)?;
        Ok((Some(grad.clone()), Some(db)))
    }
}
