//! Forward pass and exact backpropagation for the fixed layer set.
//!
//! Activations inside the conv stack are laid out `[channel][sample][time]`
//! so each convolution is a single GEMM over an im2col buffer. Features and
//! FC activations are `[sample][unit]`.

use num_complex::Complex64;

use super::arch::{ArchitectureSpec, KERNEL};
use super::params::NetworkParams;
use super::real::{gemm, Mat, Real};
use crate::error::{Error, Result};
use crate::signal::Fid;

/// Which parameters receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    Full,
    /// Conv part frozen: its gradient entries are left untouched.
    FcOnly,
}

#[derive(Default, Clone, Debug)]
struct BlockTape<T> {
    col: Vec<T>,
    pre: Vec<T>,
    argmax: Vec<u32>,
}

/// Intermediate values of one forward pass, reused across calls.
#[derive(Default, Clone, Debug)]
pub struct Tape<T> {
    batch: usize,
    blocks: Vec<BlockTape<T>>,
    features: Vec<T>,
    hidden_pre: Vec<T>,
    hidden: Vec<T>,
    outputs: Vec<T>,
    scratch: Vec<T>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            batch: 0,
            blocks: Vec::new(),
            features: Vec::new(),
            hidden_pre: Vec::new(),
            hidden: Vec::new(),
            outputs: Vec::new(),
            scratch: Vec::new(),
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// `[sample][output]` values of the last forward pass.
    pub fn outputs(&self) -> &[T] {
        &self.outputs
    }

    /// Flattened conv features `[sample][feature]` of the last forward pass.
    pub fn features(&self) -> &[T] {
        &self.features
    }
}

struct Offsets {
    conv_w: Vec<usize>,
    conv_b: Vec<usize>,
    slope: Vec<usize>,
    fc1_w: usize,
    fc1_b: usize,
    fc1_s: usize,
    fc2_w: usize,
    fc2_b: usize,
}

impl Offsets {
    fn new(arch: &ArchitectureSpec) -> Self {
        let slots = arch.layout();
        let nb = arch.blocks.len();
        let at = |i: usize| slots[i].offset;
        Offsets {
            conv_w: (0..nb).map(|b| at(3 * b)).collect(),
            conv_b: (0..nb).map(|b| at(3 * b + 1)).collect(),
            slope: (0..nb).map(|b| at(3 * b + 2)).collect(),
            fc1_w: at(3 * nb),
            fc1_b: at(3 * nb + 1),
            fc1_s: at(3 * nb + 2),
            fc2_w: at(3 * nb + 3),
            fc2_b: at(3 * nb + 4),
        }
    }
}

#[inline]
fn prelu<T: Real>(x: T, a: T) -> T {
    if x > T::zero() {
        x
    } else {
        a * x
    }
}

/// Packs FIDs into the `[channel][sample][time]` input layout: channel 0
/// holds real parts, channel 1 imaginary parts.
pub fn encode_fids<'a, T: Real>(
    fids: impl ExactSizeIterator<Item = &'a [Complex64]>,
    len: usize,
) -> Result<Vec<T>> {
    let batch = fids.len();
    let mut out = vec![T::zero(); 2 * batch * len];
    for (b, fid) in fids.enumerate() {
        if fid.len() != len {
            return Err(Error::shape(format!("FID of {len} samples"), fid.len()));
        }
        let (re, im) = out.split_at_mut(batch * len);
        for (i, s) in fid.iter().enumerate() {
            re[b * len + i] = T::of(s.re);
            im[b * len + i] = T::of(s.im);
        }
    }
    Ok(out)
}

fn im2col<T: Real>(x: &[T], cin: usize, batch: usize, len: usize, col: &mut Vec<T>) {
    let bl = batch * len;
    col.clear();
    col.resize(cin * KERNEL * bl, T::zero());
    for ci in 0..cin {
        for k in 0..KERNEL {
            let row = &mut col[(ci * KERNEL + k) * bl..(ci * KERNEL + k + 1) * bl];
            for b in 0..batch {
                let src = &x[(ci * batch + b) * len..(ci * batch + b + 1) * len];
                let dst = &mut row[b * len..(b + 1) * len];
                // output position i reads input i + k - 1
                match k {
                    0 => dst[1..].copy_from_slice(&src[..len - 1]),
                    1 => dst.copy_from_slice(src),
                    _ => dst[..len - 1].copy_from_slice(&src[1..]),
                }
            }
        }
    }
}

fn col2im<T: Real>(dcol: &[T], cin: usize, batch: usize, len: usize, dx: &mut [T]) {
    let bl = batch * len;
    dx.iter_mut().for_each(|v| *v = T::zero());
    for ci in 0..cin {
        for k in 0..KERNEL {
            let row = &dcol[(ci * KERNEL + k) * bl..(ci * KERNEL + k + 1) * bl];
            for b in 0..batch {
                let src = &row[b * len..(b + 1) * len];
                let dst = &mut dx[(ci * batch + b) * len..(ci * batch + b + 1) * len];
                match k {
                    0 => dst[..len - 1]
                        .iter_mut()
                        .zip(&src[1..])
                        .for_each(|(d, s)| *d += *s),
                    1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s),
                    _ => dst[1..]
                        .iter_mut()
                        .zip(&src[..len - 1])
                        .for_each(|(d, s)| *d += *s),
                }
            }
        }
    }
}

fn conv_forward<T: Real>(
    arch: &ArchitectureSpec,
    p: &[T],
    off: &Offsets,
    input: &[T],
    batch: usize,
    tape: &mut Tape<T>,
) {
    let lens = arch.lengths();
    tape.blocks.resize_with(arch.blocks.len(), Default::default);
    let mut x: Vec<T> = input.to_vec();
    for (bi, block) in arch.blocks.iter().enumerate() {
        let cin = arch.in_channels(bi);
        let cout = block.channels;
        let len = lens[bi];
        let bl = batch * len;
        let bt = &mut tape.blocks[bi];
        im2col(&x, cin, batch, len, &mut bt.col);

        bt.pre.clear();
        bt.pre.resize(cout * bl, T::zero());
        let bias = &p[off.conv_b[bi]..off.conv_b[bi] + cout];
        for (co, row) in bt.pre.chunks_mut(bl).enumerate() {
            row.fill(bias[co]);
        }
        let w = &p[off.conv_w[bi]..off.conv_w[bi] + cout * cin * KERNEL];
        gemm(
            T::one(),
            Mat::row_major(w, cout, cin * KERNEL),
            Mat::row_major(&bt.col, cin * KERNEL, bl),
            T::one(),
            &mut bt.pre,
        );

        let pool = block.pool;
        let lo = len / pool;
        let slopes = &p[off.slope[bi]..off.slope[bi] + cout];
        x.clear();
        x.resize(cout * batch * lo, T::zero());
        bt.argmax.clear();
        bt.argmax.resize(cout * batch * lo, 0);
        for co in 0..cout {
            let a = slopes[co];
            for b in 0..batch {
                let base = (co * batch + b) * len;
                let obase = (co * batch + b) * lo;
                for j in 0..lo {
                    let start = base + j * pool;
                    let mut best = prelu(bt.pre[start], a);
                    let mut arg = start;
                    for i in start + 1..start + pool {
                        let v = prelu(bt.pre[i], a);
                        // strict comparison keeps the first index on ties
                        if v > best {
                            best = v;
                            arg = i;
                        }
                    }
                    x[obase + j] = best;
                    bt.argmax[obase + j] = arg as u32;
                }
            }
        }
    }
    let c = arch.blocks.last().unwrap().channels;
    let lf = *lens.last().unwrap();
    let f = c * lf;
    tape.features.clear();
    tape.features.resize(batch * f, T::zero());
    for ch in 0..c {
        for b in 0..batch {
            let src = &x[(ch * batch + b) * lf..(ch * batch + b + 1) * lf];
            tape.features[b * f + ch * lf..b * f + (ch + 1) * lf].copy_from_slice(src);
        }
    }
}

fn head_forward<T: Real>(arch: &ArchitectureSpec, p: &[T], off: &Offsets, tape: &mut Tape<T>) {
    let batch = tape.batch;
    let (f, h, o) = (arch.flatten_len(), arch.hidden, arch.outputs);
    let b1 = &p[off.fc1_b..off.fc1_b + h];
    tape.hidden_pre.clear();
    for _ in 0..batch {
        tape.hidden_pre.extend_from_slice(b1);
    }
    gemm(
        T::one(),
        Mat::row_major(&tape.features, batch, f),
        Mat::row_major(&p[off.fc1_w..off.fc1_w + h * f], h, f).t(),
        T::one(),
        &mut tape.hidden_pre,
    );
    let slopes = &p[off.fc1_s..off.fc1_s + h];
    tape.hidden.clear();
    tape.hidden.extend(
        tape.hidden_pre
            .iter()
            .enumerate()
            .map(|(i, &v)| prelu(v, slopes[i % h])),
    );
    let b2 = &p[off.fc2_b..off.fc2_b + o];
    tape.outputs.clear();
    for _ in 0..batch {
        tape.outputs.extend_from_slice(b2);
    }
    gemm(
        T::one(),
        Mat::row_major(&tape.hidden, batch, h),
        Mat::row_major(&p[off.fc2_w..off.fc2_w + o * h], o, h).t(),
        T::one(),
        &mut tape.outputs,
    );
}

/// Full forward pass over a batch in the [`encode_fids`] layout. Returns
/// the raw `[sample][output]` values.
pub fn forward_batch<'t, T: Real>(
    params: &NetworkParams<T>,
    input: &[T],
    batch: usize,
    tape: &'t mut Tape<T>,
) -> Result<&'t [T]> {
    let arch = params.arch();
    let expected = arch.input_channels * arch.input_len * batch;
    if input.len() != expected || batch == 0 {
        return Err(Error::shape(expected.max(1), input.len()));
    }
    let off = Offsets::new(arch);
    tape.batch = batch;
    conv_forward(arch, params.data(), &off, input, batch, tape);
    head_forward(arch, params.data(), &off, tape);
    Ok(&tape.outputs)
}

/// Conv-stack features `[sample][feature]` for a batch.
pub fn conv_features<T: Real>(
    params: &NetworkParams<T>,
    input: &[T],
    batch: usize,
    tape: &mut Tape<T>,
) -> Result<Vec<T>> {
    forward_batch(params, input, batch, tape)?;
    Ok(tape.features.clone())
}

/// FC head only, from precomputed features (the conv part is not run).
pub fn head_forward_features<'t, T: Real>(
    params: &NetworkParams<T>,
    features: &[T],
    batch: usize,
    tape: &'t mut Tape<T>,
) -> Result<&'t [T]> {
    let arch = params.arch();
    if features.len() != batch * arch.flatten_len() || batch == 0 {
        return Err(Error::shape(batch * arch.flatten_len(), features.len()));
    }
    let off = Offsets::new(arch);
    tape.batch = batch;
    tape.blocks.clear();
    tape.features.clear();
    tape.features.extend_from_slice(features);
    head_forward(arch, params.data(), &off, tape);
    Ok(&tape.outputs)
}

/// Accumulates `d loss / d params` into `grads` given `d loss / d outputs`
/// for the batch recorded on `tape`.
///
/// Max-pool gradients go to the recorded argmax (first index on ties).
/// PReLU at exactly zero takes the negative-side branch.
pub fn backward<T: Real>(
    params: &NetworkParams<T>,
    tape: &mut Tape<T>,
    d_out: &[T],
    grads: &mut [T],
    mode: GradMode,
) -> Result<()> {
    let arch = params.arch();
    let p = params.data();
    let batch = tape.batch;
    let (f, h, o) = (arch.flatten_len(), arch.hidden, arch.outputs);
    if d_out.len() != batch * o {
        return Err(Error::shape(batch * o, d_out.len()));
    }
    if grads.len() != p.len() {
        return Err(Error::shape(p.len(), grads.len()));
    }
    if mode == GradMode::Full && tape.blocks.len() != arch.blocks.len() {
        return Err(Error::invalid(
            "full backward needs a tape from forward_batch",
        ));
    }
    let off = Offsets::new(arch);

    gemm(
        T::one(),
        Mat::row_major(d_out, batch, o).t(),
        Mat::row_major(&tape.hidden, batch, h),
        T::one(),
        &mut grads[off.fc2_w..off.fc2_w + o * h],
    );
    for row in d_out.chunks(o) {
        for (g, d) in grads[off.fc2_b..off.fc2_b + o].iter_mut().zip(row) {
            *g += *d;
        }
    }
    let mut dh = vec![T::zero(); batch * h];
    gemm(
        T::one(),
        Mat::row_major(d_out, batch, o),
        Mat::row_major(&p[off.fc2_w..off.fc2_w + o * h], o, h),
        T::zero(),
        &mut dh,
    );
    let slopes = &p[off.fc1_s..off.fc1_s + h];
    for (i, d) in dh.iter_mut().enumerate() {
        let u = i % h;
        let pre = tape.hidden_pre[i];
        if pre <= T::zero() {
            grads[off.fc1_s + u] += *d * pre;
            *d *= slopes[u];
        }
    }
    gemm(
        T::one(),
        Mat::row_major(&dh, batch, h).t(),
        Mat::row_major(&tape.features, batch, f),
        T::one(),
        &mut grads[off.fc1_w..off.fc1_w + h * f],
    );
    for row in dh.chunks(h) {
        for (g, d) in grads[off.fc1_b..off.fc1_b + h].iter_mut().zip(row) {
            *g += *d;
        }
    }
    if mode == GradMode::FcOnly {
        return Ok(());
    }

    let lens = arch.lengths();
    let nb = arch.blocks.len();
    let c_last = arch.blocks[nb - 1].channels;
    let lf = lens[nb];
    // d features, then back into [channel][sample][time]
    let mut dfeat = vec![T::zero(); batch * f];
    gemm(
        T::one(),
        Mat::row_major(&dh, batch, h),
        Mat::row_major(&p[off.fc1_w..off.fc1_w + h * f], h, f),
        T::zero(),
        &mut dfeat,
    );
    let mut dpooled = vec![T::zero(); c_last * batch * lf];
    for ch in 0..c_last {
        for b in 0..batch {
            dpooled[(ch * batch + b) * lf..(ch * batch + b + 1) * lf]
                .copy_from_slice(&dfeat[b * f + ch * lf..b * f + (ch + 1) * lf]);
        }
    }

    for bi in (0..nb).rev() {
        let cin = arch.in_channels(bi);
        let cout = arch.blocks[bi].channels;
        let len = lens[bi];
        let bl = batch * len;
        let bt = &tape.blocks[bi];
        let a_off = off.slope[bi];

        let dpre = &mut tape.scratch;
        dpre.clear();
        dpre.resize(cout * bl, T::zero());
        let per_channel = batch * lens[bi + 1];
        for (k, (&arg, &d)) in bt.argmax.iter().zip(&dpooled).enumerate() {
            let co = k / per_channel;
            let arg = arg as usize;
            let pre = bt.pre[arg];
            if pre > T::zero() {
                dpre[arg] += d;
            } else {
                dpre[arg] += p[a_off + co] * d;
                grads[a_off + co] += d * pre;
            }
        }
        gemm(
            T::one(),
            Mat::row_major(dpre, cout, bl),
            Mat::row_major(&bt.col, cin * KERNEL, bl).t(),
            T::one(),
            &mut grads[off.conv_w[bi]..off.conv_w[bi] + cout * cin * KERNEL],
        );
        for (co, row) in dpre.chunks(bl).enumerate() {
            grads[off.conv_b[bi] + co] += row.iter().copied().sum::<T>();
        }
        if bi == 0 {
            break;
        }
        let mut dcol = vec![T::zero(); cin * KERNEL * bl];
        gemm(
            T::one(),
            Mat::row_major(&p[off.conv_w[bi]..off.conv_w[bi] + cout * cin * KERNEL], cout, cin * KERNEL)
                .t(),
            Mat::row_major(dpre, cout, bl),
            T::zero(),
            &mut dcol,
        );
        dpooled.clear();
        dpooled.resize(cin * bl, T::zero());
        col2im(&dcol, cin, batch, len, &mut dpooled);
    }
    Ok(())
}

/// Mean squared error `(1/N) sum_i |pred_i - target_i|^2` over `[sample][output]`
/// rows. Writes `d loss / d pred` into `grad` when given.
pub(crate) fn mse_flat<T: Real>(
    pred: &[T],
    target: &[T],
    width: usize,
    grad: Option<&mut [T]>,
) -> Result<f64> {
    if pred.len() != target.len() || width == 0 || pred.len() % width != 0 {
        return Err(Error::shape(pred.len(), target.len()));
    }
    let n = pred.len() / width;
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let loss = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p.as_f64() - t.as_f64();
            d * d
        })
        .sum::<f64>()
        / n as f64;
    if let Some(g) = grad {
        let scale = T::of(2.0 / n as f64);
        for ((g, p), t) in g.iter_mut().zip(pred).zip(target) {
            *g = scale * (*p - *t);
        }
    }
    Ok(loss)
}

/// Mean squared error between predicted and target amplitude vectors.
pub fn mse_loss(predictions: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if predictions.len() != targets.len() {
        return Err(Error::shape(targets.len(), predictions.len()));
    }
    let width = predictions[0].len();
    if predictions.iter().chain(targets).any(|v| v.len() != width) {
        return Err(Error::invalid("ragged prediction/target widths"));
    }
    let flat_p: Vec<f64> = predictions.iter().flatten().copied().collect();
    let flat_t: Vec<f64> = targets.iter().flatten().copied().collect();
    mse_flat(&flat_p, &flat_t, width, None)
}

/// Raw network outputs for each FID, evaluated in chunks.
pub fn predict_raw<T: Real>(params: &NetworkParams<T>, fids: &[&Fid]) -> Result<Vec<Vec<f64>>> {
    const CHUNK: usize = 64;
    let arch = params.arch();
    let mut tape = Tape::new();
    let mut out = Vec::with_capacity(fids.len());
    for chunk in fids.chunks(CHUNK) {
        let input = encode_fids::<T>(chunk.iter().map(|f| f.samples.as_slice()), arch.input_len)?;
        let y = forward_batch(params, &input, chunk.len(), &mut tape)?;
        out.extend(
            y.chunks(arch.outputs)
                .map(|r| r.iter().map(|v| v.as_f64()).collect()),
        );
    }
    Ok(out)
}

/// Raw (unclamped) amplitude vector for one FID.
pub fn forward<T: Real>(params: &NetworkParams<T>, fid: &Fid) -> Result<Vec<f64>> {
    Ok(predict_raw(params, &[fid])?.pop().unwrap())
}

/// Amplitudes as reported to users: negative raw outputs clamp to zero.
pub fn report(raw: &[f64]) -> Vec<f64> {
    raw.iter().map(|v| v.max(0.0)).collect()
}
