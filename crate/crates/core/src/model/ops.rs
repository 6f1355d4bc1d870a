//! Activations and layer kernels. Tensors are flat, channel-major
//! (`x[c * len + t]`). Every kernel that performs multiply-accumulates takes a
//! [`MacMeter`]; the unit meter `()` compiles away.

/// Lorentzian transfer function constants: `sigma(x) = x^2 / (x^2 + (B + A x)^2)`.
pub const SIGMA_A: f64 = 0.25;
pub const SIGMA_B: f64 = 0.3;

pub fn lorentzian(x: f64) -> f64 {
    let d = SIGMA_B + SIGMA_A * x;
    let x2 = x * x;
    x2 / (x2 + d * d)
}

pub fn lorentzian_deriv(x: f64) -> f64 {
    let d = SIGMA_B + SIGMA_A * x;
    let den = x * x + d * d;
    (2.0 * x * d * d - 2.0 * x * x * SIGMA_A * d) / (den * den)
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn elu_deriv(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// Counts multiply-accumulates as a kernel executes them.
pub trait MacMeter {
    fn tick(&mut self);
}

impl MacMeter for () {
    #[inline(always)]
    fn tick(&mut self) {}
}

impl MacMeter for u64 {
    #[inline(always)]
    fn tick(&mut self) {
        *self += 1;
    }
}

/// Dot product with four interleaved partial sums.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut tail = 0.0;
    for i in 4 * chunks..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy<M: MacMeter>(y: &mut [f64], a: f64, x: &[f64], meter: &mut M) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += a * x;
        meter.tick();
    }
}

/// Borrowed parameters of a PRNN cell with `neurons` leaky integrators fed by
/// `inputs` channels.
#[derive(Debug, Clone, Copy)]
pub struct PrnnCell<'a> {
    pub inputs: usize,
    pub neurons: usize,
    /// `neurons x inputs`
    pub w_in: &'a [f64],
    /// `neurons x neurons`
    pub w_rec: &'a [f64],
    pub b: &'a [f64],
    /// Leak rate `dt / tau` per neuron.
    pub alpha: &'a [f64],
}

/// One forward-Euler update:
/// `s' = (1 - alpha) s + alpha (W_in x + W_rec sigma(s) + b)`.
pub fn prnn_step(s: &[f64], x: &[f64], cell: &PrnnCell) -> Vec<f64> {
    let (h, c) = (cell.neurons, cell.inputs);
    let sig: Vec<f64> = s.iter().map(|&v| lorentzian(v)).collect();
    (0..h)
        .map(|i| {
            let u = cell.b[i]
                + dot(&cell.w_in[i * c..(i + 1) * c], x)
                + dot(&cell.w_rec[i * h..(i + 1) * h], &sig);
            (1.0 - cell.alpha[i]) * s[i] + cell.alpha[i] * u
        })
        .collect()
}

/// Runs the cell over `x` (`inputs x steps`) from a zero state and returns
/// `sigma(s_t)` as `neurons x steps`.
pub fn prnn_forward(x: &[f64], steps: usize, cell: &PrnnCell) -> Vec<f64> {
    let mut cache = PrnnCache::default();
    prnn_forward_cached(x, steps, cell, &mut cache, &mut ())
}

/// Activations kept for backpropagation through time.
#[derive(Debug, Clone, Default)]
pub(crate) struct PrnnCache {
    /// States `s_0..=s_T`, time-major `(T + 1) x H`; `s_0 = 0`.
    pub s: Vec<f64>,
    /// Pre-leak drive `u_t`, time-major `T x H`.
    pub u: Vec<f64>,
}

pub(crate) fn prnn_forward_cached<M: MacMeter>(
    x: &[f64],
    steps: usize,
    cell: &PrnnCell,
    cache: &mut PrnnCache,
    meter: &mut M,
) -> Vec<f64> {
    let (h, c) = (cell.neurons, cell.inputs);
    // Input projection for all steps at once: proj[i][t] = sum_c W_in[i][c] x[c][t].
    let mut proj = vec![0.0; h * steps];
    for i in 0..h {
        let row = &mut proj[i * steps..(i + 1) * steps];
        for ch in 0..c {
            axpy(row, cell.w_in[i * c + ch], &x[ch * steps..(ch + 1) * steps], meter);
        }
    }
    cache.s.clear();
    cache.s.resize((steps + 1) * h, 0.0);
    cache.u.clear();
    cache.u.resize(steps * h, 0.0);
    let mut y = vec![0.0; h * steps];
    let mut sig = vec![0.0; h];
    for t in 0..steps {
        let (prev, next) = cache.s.split_at_mut((t + 1) * h);
        let s_prev = &prev[t * h..];
        for (g, &v) in sig.iter_mut().zip(s_prev) {
            *g = lorentzian(v);
        }
        for i in 0..h {
            let mut r = 0.0;
            for j in 0..h {
                r += cell.w_rec[i * h + j] * sig[j];
                meter.tick();
            }
            let u = cell.b[i] + proj[i * steps + t] + r;
            cache.u[t * h + i] = u;
            let a = cell.alpha[i];
            let s_new = (1.0 - a) * s_prev[i] + a * u;
            next[i] = s_new;
            y[i * steps + t] = lorentzian(s_new);
        }
    }
    y
}

/// Gradients of a PRNN cell, same layout as [`PrnnCell`].
pub(crate) struct PrnnGrad<'a> {
    pub w_in: &'a mut [f64],
    pub w_rec: &'a mut [f64],
    pub b: &'a mut [f64],
    pub alpha: &'a mut [f64],
}

/// Backpropagation through time from `dy` (`H x T`). The input gradient is
/// not needed (the PRNN is always the first layer) and is not computed.
pub(crate) fn prnn_backward(
    x: &[f64],
    steps: usize,
    cell: &PrnnCell,
    cache: &PrnnCache,
    dy: &[f64],
    grad: PrnnGrad,
) {
    let (h, c) = (cell.neurons, cell.inputs);
    let mut carry = vec![0.0; h];
    let mut ds = vec![0.0; h];
    let mut du_all = vec![0.0; h * steps];
    let mut sig_prev = vec![0.0; h];
    let mut back = vec![0.0; h];
    for t in (0..steps).rev() {
        let s_t = &cache.s[(t + 1) * h..(t + 2) * h];
        let s_prev = &cache.s[t * h..(t + 1) * h];
        let u_t = &cache.u[t * h..(t + 1) * h];
        for i in 0..h {
            ds[i] = carry[i] + dy[i * steps + t] * lorentzian_deriv(s_t[i]);
            let du = cell.alpha[i] * ds[i];
            du_all[i * steps + t] = du;
            grad.alpha[i] += ds[i] * (u_t[i] - s_prev[i]);
            grad.b[i] += du;
        }
        for (g, &v) in sig_prev.iter_mut().zip(s_prev) {
            *g = lorentzian(v);
        }
        back.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..h {
            let du = du_all[i * steps + t];
            let row = &cell.w_rec[i * h..(i + 1) * h];
            axpy(&mut grad.w_rec[i * h..(i + 1) * h], du, &sig_prev, &mut ());
            axpy(&mut back, du, row, &mut ());
        }
        for j in 0..h {
            carry[j] = (1.0 - cell.alpha[j]) * ds[j] + lorentzian_deriv(s_prev[j]) * back[j];
        }
    }
    for i in 0..h {
        let du = &du_all[i * steps..(i + 1) * steps];
        for ch in 0..c {
            grad.w_in[i * c + ch] += dot(du, &x[ch * steps..(ch + 1) * steps]);
        }
    }
}

/// Valid cross-correlation, stride 1. `w` is `c_out x c_in x k`.
pub fn conv1d_valid(
    x: &[f64],
    c_in: usize,
    len: usize,
    w: &[f64],
    b: &[f64],
    c_out: usize,
    k: usize,
) -> crate::Result<Vec<f64>> {
    if len < k || x.len() != c_in * len || w.len() != c_out * c_in * k || b.len() != c_out {
        return Err(crate::Error::Shape {
            stage: "conv1d",
            detail: format!("input {c_in}x{len}, kernel {c_out}x{c_in}x{k}"),
        });
    }
    Ok(conv1d_forward(x, c_in, len, w, b, c_out, k, &mut ()))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_forward<M: MacMeter>(
    x: &[f64],
    c_in: usize,
    len: usize,
    w: &[f64],
    b: &[f64],
    c_out: usize,
    k: usize,
    meter: &mut M,
) -> Vec<f64> {
    let out_len = len + 1 - k;
    let mut y = vec![0.0; c_out * out_len];
    for co in 0..c_out {
        let row = &mut y[co * out_len..(co + 1) * out_len];
        row.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..c_in {
            let xin = &x[ci * len..(ci + 1) * len];
            for j in 0..k {
                axpy(row, w[(co * c_in + ci) * k + j], &xin[j..j + out_len], meter);
            }
        }
    }
    y
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `want_dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_backward(
    x: &[f64],
    c_in: usize,
    len: usize,
    w: &[f64],
    c_out: usize,
    k: usize,
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    want_dx: bool,
) -> Vec<f64> {
    let out_len = len + 1 - k;
    let mut dx = if want_dx { vec![0.0; c_in * len] } else { Vec::new() };
    for co in 0..c_out {
        let g = &dy[co * out_len..(co + 1) * out_len];
        db[co] += g.iter().sum::<f64>();
        for ci in 0..c_in {
            let xin = &x[ci * len..(ci + 1) * len];
            for j in 0..k {
                let idx = (co * c_in + ci) * k + j;
                dw[idx] += dot(g, &xin[j..j + out_len]);
                if want_dx {
                    axpy(&mut dx[ci * len + j..ci * len + j + out_len], w[idx], g, &mut ());
                }
            }
        }
    }
    dx
}

/// Non-overlapping width-2 max over each channel; an odd trailing element is
/// dropped.
pub fn maxpool2(x: &[f64], channels: usize, len: usize) -> Vec<f64> {
    maxpool2_forward(x, channels, len).0
}

/// Also returns the routed input index of every output; ties go to the
/// first element of the pair.
pub(crate) fn maxpool2_forward(x: &[f64], channels: usize, len: usize) -> (Vec<f64>, Vec<u32>) {
    let half = len / 2;
    let mut y = Vec::with_capacity(channels * half);
    let mut idx = Vec::with_capacity(channels * half);
    for c in 0..channels {
        for i in 0..half {
            let a = c * len + 2 * i;
            let (v, j) = if x[a + 1] > x[a] { (x[a + 1], a + 1) } else { (x[a], a) };
            y.push(v);
            idx.push(j as u32);
        }
    }
    (y, idx)
}

/// `W x + b` with `W` as `outputs x inputs`.
pub(crate) fn dense_forward<M: MacMeter>(x: &[f64], w: &[f64], b: &[f64], meter: &mut M) -> Vec<f64> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bias)| {
            let row = &w[o * n_in..(o + 1) * n_in];
            let mut acc = [0.0f64; 4];
            let chunks = n_in / 4;
            for i in 0..chunks {
                for l in 0..4 {
                    acc[l] += row[4 * i + l] * x[4 * i + l];
                    meter.tick();
                }
            }
            let mut tail = 0.0;
            for i in 4 * chunks..n_in {
                tail += row[i] * x[i];
                meter.tick();
            }
            bias + (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
        })
        .collect()
}

pub(crate) fn dense_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    want_dx: bool,
) -> Vec<f64> {
    let n_in = x.len();
    let mut dx = if want_dx { vec![0.0; n_in] } else { Vec::new() };
    for (o, &g) in dy.iter().enumerate() {
        db[o] += g;
        if g == 0.0 {
            continue;
        }
        axpy(&mut dw[o * n_in..(o + 1) * n_in], g, x, &mut ());
        if want_dx {
            axpy(&mut dx, g, &w[o * n_in..(o + 1) * n_in], &mut ());
        }
    }
    dx
}

/// `z - logsumexp(z)`.
pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Dense layer followed by log-softmax.
pub fn dense_logsoftmax(x: &[f64], w: &[f64], b: &[f64]) -> crate::Result<Vec<f64>> {
    if b.is_empty() || w.len() != b.len() * x.len() {
        return Err(crate::Error::Shape {
            stage: "dense",
            detail: format!("{} weights for {} inputs and {} outputs", w.len(), x.len(), b.len()),
        });
    }
    Ok(log_softmax(&dense_forward(x, w, b, &mut ())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lorentzian_values() {
        assert_eq!(lorentzian(0.0), 0.0);
        assert!((lorentzian(1.0) - 1.0 / (1.0 + 0.55f64.powi(2))).abs() < 1e-15);
        assert!((lorentzian(1.0) - 0.767_754).abs() < 1e-6);
        assert!((lorentzian(1e9) - 1.0 / 1.0625).abs() < 1e-6);
        assert!((lorentzian(-1e9) - 0.941_176).abs() < 1e-6);
    }

    #[test]
    fn lorentzian_derivative_matches_differences() {
        for x in [-5.0, -1.2, -0.3, 0.0, 0.1, 0.8, 4.0] {
            let h = 1e-6;
            let fd = (lorentzian(x + h) - lorentzian(x - h)) / (2.0 * h);
            assert!((fd - lorentzian_deriv(x)).abs() < 1e-7, "x={x}");
        }
    }

    #[test]
    fn elu_values() {
        assert_eq!(elu(0.0), 0.0);
        assert_eq!(elu(2.0), 2.0);
        assert!((elu(-1.0) - (-0.632_121)).abs() < 1e-6);
        assert_eq!(elu_deriv(3.0), 1.0);
        assert!((elu_deriv(-1.0) - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn lorentzian_bounded_by_scanned_maximum() {
        let mut max = 0.0f64;
        let mut x = -50.0;
        while x <= 50.0 {
            max = max.max(lorentzian(x));
            x += 1e-4;
        }
        assert!(max < 1.07);
        for x in [-1e6, -1e3, -37.0, -1.2, 0.5, 1e3, 1e6] {
            assert!((0.0..=max + 1e-9).contains(&lorentzian(x)));
        }
    }

    fn scalar_cell<'a>(w_rec: &'a [f64], alpha: &'a [f64]) -> PrnnCell<'a> {
        PrnnCell {
            inputs: 1,
            neurons: 1,
            w_in: &[0.0],
            w_rec,
            b: &[0.0],
            alpha,
        }
    }

    #[test]
    fn prnn_step_examples() {
        let frozen = scalar_cell(&[0.7], &[0.0]);
        assert_eq!(prnn_step(&[0.4], &[1.0], &frozen), vec![0.4]);
        let leak = PrnnCell {
            inputs: 2,
            neurons: 2,
            w_in: &[0.0; 4],
            w_rec: &[0.0; 4],
            b: &[0.0; 2],
            alpha: &[0.5; 2],
        };
        assert_eq!(prnn_step(&[1.0, 1.0], &[3.0, -2.0], &leak), vec![0.5, 0.5]);
        let cell = scalar_cell(&[1.0], &[0.5]);
        let s = prnn_step(&[1.0], &[0.0], &cell)[0];
        assert!((s - 0.883_877).abs() < 1e-6);
    }

    #[test]
    fn prnn_forward_unrolls_steps() {
        let cell = PrnnCell {
            inputs: 1,
            neurons: 1,
            w_in: &[0.8],
            w_rec: &[1.3],
            b: &[0.1],
            alpha: &[0.5],
        };
        let x = [0.5, -0.25];
        let y = prnn_forward(&x, 2, &cell);
        // Hand unrolled: s1 = 0.5 (0.4 + 0 + 0.1) = 0.25, s2 = 0.5 s1 + 0.5 (-0.2 + 1.3 sigma(s1) + 0.1).
        let s1 = 0.25;
        let s2 = 0.5 * s1 + 0.5 * (-0.2 + 1.3 * lorentzian(s1) + 0.1);
        assert!((y[0] - lorentzian(s1)).abs() < 1e-15);
        assert!((y[1] - lorentzian(s2)).abs() < 1e-15);
        let s1b = prnn_step(&[0.0], &[0.5], &cell);
        let s2b = prnn_step(&s1b, &[-0.25], &cell);
        assert_eq!(y[1], lorentzian(s2b[0]));
    }

    #[test]
    fn prnn_zero_input_zero_output() {
        let w = vec![0.3; 16 * 64];
        let r = vec![0.1; 256];
        let cell = PrnnCell {
            inputs: 64,
            neurons: 16,
            w_in: &w,
            w_rec: &r,
            b: &[0.0; 16],
            alpha: &[0.5; 16],
        };
        let y = prnn_forward(&vec![0.0; 64 * 32], 32, &cell);
        assert_eq!(y.len(), 16 * 32);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_examples() {
        let x: Vec<f64> = (0..7).map(|v| v as f64).collect();
        assert_eq!(conv1d_valid(&x, 1, 7, &[1.0], &[0.0], 1, 1).unwrap(), x);
        assert_eq!(
            conv1d_valid(&[1.0; 5], 1, 5, &[1.0; 3], &[0.0], 1, 3).unwrap(),
            vec![3.0; 3]
        );
        let y = conv1d_valid(&vec![0.1; 16 * 32], 16, 32, &vec![0.0; 16 * 16 * 5], &[0.0; 16], 16, 5)
            .unwrap();
        assert_eq!(y.len(), 16 * 28);
        assert!(conv1d_valid(&[1.0; 2], 1, 2, &[1.0; 3], &[0.0], 1, 3).is_err());
    }

    #[test]
    fn pool_examples() {
        assert_eq!(maxpool2(&[1.0, 3.0, 2.0, 0.0], 1, 4), vec![3.0, 2.0]);
        assert_eq!(maxpool2(&vec![0.0; 16 * 28], 16, 28).len(), 16 * 14);
        assert_eq!(maxpool2(&[1.0, 2.0, 5.0], 1, 3), vec![2.0]);
        let (_, idx) = maxpool2_forward(&[4.0, 4.0], 1, 2);
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn dense_logsoftmax_examples() {
        let out = dense_logsoftmax(&[0.3; 96], &vec![0.0; 30 * 96], &[0.0; 30]).unwrap();
        assert!(out.iter().all(|&v| (v + 30f64.ln()).abs() < 1e-12));
        assert!((out[0] + 3.4012).abs() < 1e-4);
        let z = [0.5, -1.0, 2.0];
        let shifted: Vec<f64> = z.iter().map(|v| v + 100.0).collect();
        let (a, b) = (log_softmax(&z), log_softmax(&shifted));
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
        assert!(dense_logsoftmax(&[1.0; 3], &[0.0; 5], &[0.0; 2]).is_err());
    }

    proptest! {
        #[test]
        fn log_softmax_normalises(z in proptest::collection::vec(-50.0f64..50.0, 1..40)) {
            let s: f64 = log_softmax(&z).iter().map(|v| v.exp()).sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }

        #[test]
        fn pool_dominates_inputs(start in -10.0f64..10.0, steps in proptest::collection::vec(0.0f64..3.0, 2..30)) {
            let x: Vec<f64> = steps.iter().scan(start, |acc, d| { *acc += d; Some(*acc) }).collect();
            let y = maxpool2(&x, 1, x.len());
            for (i, v) in y.iter().enumerate() {
                prop_assert!(*v >= x[2 * i] && *v >= x[2 * i + 1]);
            }
        }

        #[test]
        fn lorentzian_in_range(x in -1e6f64..1e6) {
            let v = lorentzian(x);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        }
    }
}
