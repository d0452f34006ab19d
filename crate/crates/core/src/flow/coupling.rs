use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

/// Bound on the magnitude of the emitted log-scale.
pub const LOG_SCALE_MAX: f64 = 2.0;

/// Affine coupling layer.
///
/// Generative direction: `x_t = z_t * exp(s(z_p)) + t(z_p)`, `x_p = z_p`.
/// The dimensions are cut once into a first half of `ceil(D/2)` entries and a
/// second half of the rest; parity 0 passes the first half through, parity 1
/// the second. `s` and `t` are tanh perceptrons with one hidden layer, and the
/// raw scale output is squashed to `LOG_SCALE_MAX * tanh(raw / LOG_SCALE_MAX)`.
///
/// Parameter block at `offset`, in order: scale net `w1 (H x P)`, `b1 (H)`,
/// `w2 (T x H)`, `b2 (T)`, then the translate net with the same layout.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingLayer {
    pub dim: usize,
    pub mask_parity: usize,
    pub hidden_width: usize,
    pub offset: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct NetLayout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    end: usize,
}

pub(crate) struct Net<'a> {
    w1: ArrayView2<'a, f64>,
    b1: ArrayView1<'a, f64>,
    w2: ArrayView2<'a, f64>,
    b2: ArrayView1<'a, f64>,
}

impl Net<'_> {
    /// Returns `(hidden activations, output)`.
    fn forward(&self, input: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let mut h = input.dot(&self.w1.t());
        h += &self.b1;
        h.mapv_inplace(f64::tanh);
        let mut out = h.dot(&self.w2.t());
        out += &self.b2;
        (h, out)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct CouplingCache {
    x_pass: Array2<f64>,
    h_scale: Array2<f64>,
    h_shift: Array2<f64>,
    log_scale: Array2<f64>,
    inv_scale: Array2<f64>,
    y_trans: Array2<f64>,
}

impl CouplingLayer {
    pub fn new(dim: usize, mask_parity: usize, hidden_width: usize, offset: usize) -> Self {
        Self {
            dim,
            mask_parity: mask_parity % 2,
            hidden_width,
            offset,
        }
    }

    fn half(&self) -> usize {
        self.dim.div_ceil(2)
    }

    pub fn passthrough(&self) -> Range<usize> {
        if self.mask_parity == 0 {
            0..self.half()
        } else {
            self.half()..self.dim
        }
    }

    pub fn transformed(&self) -> Range<usize> {
        if self.mask_parity == 0 {
            self.half()..self.dim
        } else {
            0..self.half()
        }
    }

    fn net_layout(&self, start: usize) -> NetLayout {
        let p = self.passthrough().len();
        let t = self.transformed().len();
        let h = self.hidden_width;
        let w1 = start;
        let b1 = w1 + h * p;
        let w2 = b1 + h;
        let b2 = w2 + t * h;
        NetLayout {
            w1,
            b1,
            w2,
            b2,
            end: b2 + t,
        }
    }

    pub(crate) fn layouts(&self) -> (NetLayout, NetLayout) {
        let scale = self.net_layout(self.offset);
        let shift = self.net_layout(scale.end);
        (scale, shift)
    }

    pub fn num_params(&self) -> usize {
        let scale = self.net_layout(0);
        self.net_layout(scale.end).end
    }

    /// Index ranges `(w1, b1, w2, b2)` of the scale net, then the translate net,
    /// in the flat store.
    pub fn param_ranges(&self) -> [[Range<usize>; 4]; 2] {
        let (a, b) = self.layouts();
        let r = |l: NetLayout| [l.w1..l.b1, l.b1..l.w2, l.w2..l.b2, l.b2..l.end];
        [r(a), r(b)]
    }

    fn net<'a>(&self, params: &'a [f64], l: NetLayout) -> Net<'a> {
        let p = self.passthrough().len();
        let t = self.transformed().len();
        let h = self.hidden_width;
        Net {
            w1: ArrayView2::from_shape((h, p), &params[l.w1..l.b1]).expect("layout"),
            b1: ArrayView1::from(&params[l.b1..l.w2]),
            w2: ArrayView2::from_shape((t, h), &params[l.w2..l.b2]).expect("layout"),
            b2: ArrayView1::from(&params[l.b2..l.end]),
        }
    }

    /// Log-scale and shift for a batch of passthrough inputs.
    fn scale_shift(
        &self,
        params: &[f64],
        x_pass: ArrayView2<f64>,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>) {
        let (ls, lt) = self.layouts();
        let (h_scale, raw) = self.net(params, ls).forward(x_pass);
        let (h_shift, shift) = self.net(params, lt).forward(x_pass);
        let log_scale = raw.mapv(|r| LOG_SCALE_MAX * (r / LOG_SCALE_MAX).tanh());
        (h_scale, log_scale, h_shift, shift)
    }

    /// Normalizing map in place; returns per-sample log-determinants.
    pub(crate) fn normalize(&self, params: &[f64], x: &mut Array2<f64>) -> Array1<f64> {
        let (y, ld, _) = self.normalize_batch(params, x.view());
        *x = y;
        ld
    }

    /// Generative map in place.
    pub(crate) fn generate(&self, params: &[f64], y: &mut Array2<f64>) {
        let x_pass = y.slice(s![.., self.passthrough()]).to_owned();
        let (_, log_scale, _, shift) = self.scale_shift(params, x_pass.view());
        let mut y_trans = y.slice_mut(s![.., self.transformed()]);
        y_trans *= &log_scale.mapv(f64::exp);
        y_trans += &shift;
    }

    pub(crate) fn normalize_batch(
        &self,
        params: &[f64],
        x: ArrayView2<f64>,
    ) -> (Array2<f64>, Array1<f64>, CouplingCache) {
        let x_pass = x.slice(s![.., self.passthrough()]).to_owned();
        let (h_scale, log_scale, h_shift, shift) = self.scale_shift(params, x_pass.view());
        let inv_scale = log_scale.mapv(|v| (-v).exp());
        let y_trans = (&x.slice(s![.., self.transformed()]) - &shift) * &inv_scale;
        let mut y = x.to_owned();
        y.slice_mut(s![.., self.transformed()]).assign(&y_trans);
        let ld = -log_scale.sum_axis(Axis(1));
        (
            y,
            ld,
            CouplingCache {
                x_pass,
                h_scale,
                h_shift,
                log_scale,
                inv_scale,
                y_trans,
            },
        )
    }

    pub(crate) fn backward(
        &self,
        params: &[f64],
        cache: &CouplingCache,
        g_y: &Array2<f64>,
        g_ld: &Array1<f64>,
        grad: &mut [f64],
    ) -> Array2<f64> {
        let (ls, lt) = self.layouts();
        let g_yt = g_y.slice(s![.., self.transformed()]);

        let mut g_x = g_y.clone();
        g_x.slice_mut(s![.., self.transformed()])
            .assign(&(&g_yt * &cache.inv_scale));

        // ld = -sum(s) and y_t = (x_t - t) exp(-s)
        let mut g_log_scale = -(&g_yt * &cache.y_trans);
        g_log_scale -= &g_ld.view().insert_axis(Axis(1));
        let g_shift = -(&g_yt * &cache.inv_scale);

        let g_raw = g_log_scale
            * &cache
                .log_scale
                .mapv(|v| 1.0 - (v / LOG_SCALE_MAX) * (v / LOG_SCALE_MAX));

        let mut g_pass = self.net_backward(params, ls, &cache.x_pass, &cache.h_scale, &g_raw, grad);
        g_pass += &self.net_backward(params, lt, &cache.x_pass, &cache.h_shift, &g_shift, grad);

        let mut pass = g_x.slice_mut(s![.., self.passthrough()]);
        pass += &g_pass;
        g_x
    }

    fn net_backward(
        &self,
        params: &[f64],
        layout: NetLayout,
        input: &Array2<f64>,
        hidden: &Array2<f64>,
        g_out: &Array2<f64>,
        grad: &mut [f64],
    ) -> Array2<f64> {
        let net = self.net(params, layout);
        accumulate(&mut grad[layout.w2..layout.b2], g_out.t().dot(hidden).iter());
        accumulate(&mut grad[layout.b2..layout.end], g_out.sum_axis(Axis(0)).iter());
        let g_hidden = g_out.dot(&net.w2) * &hidden.mapv(|h| 1.0 - h * h);
        accumulate(&mut grad[layout.w1..layout.b1], g_hidden.t().dot(input).iter());
        accumulate(&mut grad[layout.b1..layout.w2], g_hidden.sum_axis(Axis(0)).iter());
        g_hidden.dot(&net.w1)
    }
}

fn accumulate<'a>(dst: &mut [f64], src: impl Iterator<Item = &'a f64>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
