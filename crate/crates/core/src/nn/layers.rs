use super::math::{self, matmul_wt};
use super::{debug_check_finite, NnError, Tensor};
use serde::{Deserialize, Serialize};

/// How a parameter is filled by random initialisation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    Uniform { fan_in: usize },
    Const(f32),
}

/// One learnable parameter exposed to archive loading, saving and init.
pub struct ParamSlot<'a> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: &'a mut Vec<f32>,
    pub init: Init,
}

pub type Visitor<'v> = dyn FnMut(ParamSlot<'_>) + 'v;

fn slot<'a>(prefix: &str, name: &str, dims: Vec<usize>, data: &'a mut Vec<f32>, init: Init) -> ParamSlot<'a> {
    ParamSlot {
        name: format!("{prefix}.{name}"),
        dims,
        data,
        init,
    }
}

/// Fully connected layer, weight `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn forward_into(&self, x: &[f32], rows: usize, out: &mut [f32]) {
        debug_assert_eq!(x.len(), rows * self.in_dim);
        for r in out[..rows * self.out_dim].chunks_exact_mut(self.out_dim) {
            r.copy_from_slice(&self.bias);
        }
        matmul_wt(x, rows, self.in_dim, &self.weight, self.out_dim, 1.0, out);
    }

    pub fn forward(&self, x: &[f32], rows: usize) -> Vec<f32> {
        let mut out = vec![0.0; rows * self.out_dim];
        self.forward_into(x, rows, &mut out);
        out
    }

    pub fn visit(&mut self, prefix: &str, v: &mut Visitor<'_>) {
        let init = Init::Uniform { fan_in: self.in_dim };
        v(slot(prefix, "weight", vec![self.out_dim, self.in_dim], &mut self.weight, init));
        v(slot(prefix, "bias", vec![self.out_dim], &mut self.bias, init));
    }
}

/// Layer normalisation over the trailing (channel) axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub dim: usize,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub eps: f32,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            eps: 1e-5,
        }
    }

    pub fn apply(&self, data: &mut [f32]) {
        for row in data.chunks_exact_mut(self.dim) {
            normalize(row, &self.gamma, &self.beta, self.eps);
        }
    }

    pub fn visit(&mut self, prefix: &str, v: &mut Visitor<'_>) {
        v(slot(prefix, "gamma", vec![self.dim], &mut self.gamma, Init::Const(1.0)));
        v(slot(prefix, "beta", vec![self.dim], &mut self.beta, Init::Const(0.0)));
    }
}

fn normalize(row: &mut [f32], gamma: &[f32], beta: &[f32], eps: f32) {
    let n = row.len() as f32;
    let mean = row.iter().sum::<f32>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    for ((x, g), b) in row.iter_mut().zip(gamma).zip(beta) {
        *x = (*x - mean) * inv * g + b;
    }
}

/// Normalisation over a whole `[freqs, channels]` token with per-element affine.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub freqs: usize,
    pub channels: usize,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub eps: f32,
}

impl GroupNorm {
    pub fn new(freqs: usize, channels: usize) -> Self {
        Self {
            freqs,
            channels,
            gamma: vec![1.0; freqs * channels],
            beta: vec![0.0; freqs * channels],
            eps: 1e-5,
        }
    }

    pub fn apply(&self, tokens: &mut [f32]) {
        for tok in tokens.chunks_exact_mut(self.freqs * self.channels) {
            normalize(tok, &self.gamma, &self.beta, self.eps);
        }
    }

    pub fn visit(&mut self, prefix: &str, v: &mut Visitor<'_>) {
        let dims = vec![self.freqs, self.channels];
        v(slot(prefix, "gamma", dims.clone(), &mut self.gamma, Init::Const(1.0)));
        v(slot(prefix, "beta", dims, &mut self.beta, Init::Const(0.0)));
    }
}

/// Parametric ReLU with one shared slope.
#[derive(Debug, Clone)]
pub struct PRelu {
    pub slope: Vec<f32>,
}

impl Default for PRelu {
    fn default() -> Self {
        Self { slope: vec![0.25] }
    }
}

impl PRelu {
    pub fn apply(&self, data: &mut [f32]) {
        let a = self.slope[0];
        for x in data {
            if *x < 0.0 {
                *x *= a;
            }
        }
    }

    pub fn visit(&mut self, prefix: &str, v: &mut Visitor<'_>) {
        v(slot(prefix, "slope", vec![1], &mut self.slope, Init::Const(0.25)));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Bidirectional,
}

/// Running `(h, c)` of one LSTM layer for `batch` sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmState {
    pub h: Vec<f32>,
    pub c: Vec<f32>,
}

impl LstmState {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        Self {
            h: vec![0.0; batch * hidden],
            c: vec![0.0; batch * hidden],
        }
    }

    pub fn reset(&mut self) {
        self.h.fill(0.0);
        self.c.fill(0.0);
    }
}

const SMALL_BATCH: usize = 8;

/// Single-direction LSTM layer with gate order input, forget, cell, output.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub input: usize,
    pub hidden: usize,
    pub w_ih: Vec<f32>,
    pub w_hh: Vec<f32>,
    pub b_ih: Vec<f32>,
    pub b_hh: Vec<f32>,
}

impl Lstm {
    pub fn new(input: usize, hidden: usize) -> Self {
        Self {
            input,
            hidden,
            w_ih: vec![0.0; 4 * hidden * input],
            w_hh: vec![0.0; 4 * hidden * hidden],
            b_ih: vec![0.0; 4 * hidden],
            b_hh: vec![0.0; 4 * hidden],
        }
    }

    /// Runs `len` steps over time-major `x: [len, batch, input]`, writing
    /// `out: [len, batch, hidden]`. With `reverse` the sequence is consumed
    /// from the last step to the first; outputs stay at their step index.
    pub fn forward(
        &self,
        x: &[f32],
        len: usize,
        batch: usize,
        state: &mut LstmState,
        reverse: bool,
        out: &mut [f32],
    ) {
        let h4 = 4 * self.hidden;
        let hid = self.hidden;
        assert_eq!(x.len(), len * batch * self.input);
        assert_eq!(out.len(), len * batch * hid);
        assert_eq!(state.h.len(), batch * hid);
        let bias: Vec<f32> = self.b_ih.iter().zip(&self.b_hh).map(|(a, b)| a + b).collect();
        let mut gates = vec![0.0f32; len * batch * h4];
        for r in gates.chunks_exact_mut(h4) {
            r.copy_from_slice(&bias);
        }
        matmul_wt(x, len * batch, self.input, &self.w_ih, h4, 1.0, &mut gates);
        // small batches: axpy over a transposed recurrent matrix beats gemm packing
        let w_hh_t: Vec<f32> = if batch <= SMALL_BATCH {
            let mut t = vec![0.0; h4 * hid];
            for j in 0..h4 {
                for k in 0..hid {
                    t[k * h4 + j] = self.w_hh[j * hid + k];
                }
            }
            t
        } else {
            Vec::new()
        };
        let mut rec = Recurrence {
            gates: &mut gates,
            len,
            batch,
            hid,
            w_hh: &self.w_hh,
            w_hh_t: &w_hh_t,
            state,
            reverse,
            out,
        };
        #[cfg(target_arch = "x86_64")]
        {
            if math::has_avx2_fma() {
                // SAFETY: the required CPU features were detected at runtime.
                unsafe { rec.run_avx2() };
                return;
            }
        }
        rec.run_inner::<false>();
    }

    pub fn visit(&mut self, prefix: &str, v: &mut Visitor<'_>) {
        let init = Init::Uniform { fan_in: self.hidden };
        let h4 = 4 * self.hidden;
        v(slot(prefix, "w_ih", vec![h4, self.input], &mut self.w_ih, init));
        v(slot(prefix, "w_hh", vec![h4, self.hidden], &mut self.w_hh, init));
        v(slot(prefix, "b_ih", vec![h4], &mut self.b_ih, init));
        v(slot(prefix, "b_hh", vec![h4], &mut self.b_hh, init));
    }
}

/// `g += W h` for one sequence, with `w_t` the transposed recurrent matrix
/// `[hidden, 4 * hidden]`. Gates are accumulated in 64-wide register blocks.
#[inline(always)]
fn recurrent_axpy<const FMA: bool>(g: &mut [f32], h: &[f32], w_t: &[f32]) {
    const BLK: usize = 64;
    let h4 = g.len();
    let mut start = 0;
    while start + BLK <= h4 {
        let mut acc = [0.0f32; BLK];
        acc.copy_from_slice(&g[start..start + BLK]);
        for (k, &hk) in h.iter().enumerate() {
            let w: &[f32; BLK] = w_t[k * h4 + start..k * h4 + start + BLK].try_into().expect("block");
            for i in 0..BLK {
                acc[i] = math::madd::<FMA>(hk, w[i], acc[i]);
            }
        }
        g[start..start + BLK].copy_from_slice(&acc);
        start += BLK;
    }
    if start < h4 {
        for (k, &hk) in h.iter().enumerate() {
            for (gv, w) in g[start..].iter_mut().zip(&w_t[k * h4 + start..(k + 1) * h4]) {
                *gv = math::madd::<FMA>(hk, *w, *gv);
            }
        }
    }
}

struct Recurrence<'a> {
    gates: &'a mut [f32],
    len: usize,
    batch: usize,
    hid: usize,
    w_hh: &'a [f32],
    w_hh_t: &'a [f32],
    state: &'a mut LstmState,
    reverse: bool,
    out: &'a mut [f32],
}

impl Recurrence<'_> {
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn run_avx2(&mut self) {
        self.run_inner::<true>();
    }

    #[inline(always)]
    fn run_inner<const FMA: bool>(&mut self) {
        let (len, batch, hid) = (self.len, self.batch, self.hid);
        let h4 = 4 * hid;
        let state = &mut *self.state;
        for s in 0..len {
            let t = if self.reverse { len - 1 - s } else { s };
            let g = &mut self.gates[t * batch * h4..(t + 1) * batch * h4];
            if batch <= SMALL_BATCH {
                for b in 0..batch {
                    let gb = &mut g[b * h4..(b + 1) * h4];
                    recurrent_axpy::<FMA>(gb, &state.h[b * hid..(b + 1) * hid], self.w_hh_t);
                }
            } else {
                matmul_wt(&state.h, batch, hid, self.w_hh, h4, 1.0, g);
            }
            for b in 0..batch {
                let gb = &mut g[b * h4..(b + 1) * h4];
                for v in &mut gb[..2 * hid] {
                    *v = math::sigmoid_with::<FMA>(*v);
                }
                for v in &mut gb[2 * hid..3 * hid] {
                    *v = math::tanh_with::<FMA>(*v);
                }
                for v in &mut gb[3 * hid..] {
                    *v = math::sigmoid_with::<FMA>(*v);
                }
                let c = &mut state.c[b * hid..(b + 1) * hid];
                let h = &mut state.h[b * hid..(b + 1) * hid];
                let o = &mut self.out[(t * batch + b) * hid..(t * batch + b + 1) * hid];
                for j in 0..hid {
                    let cj = math::madd::<FMA>(gb[hid + j], c[j], gb[j] * gb[2 * hid + j]);
                    c[j] = cj;
                    let hj = gb[3 * hid + j] * math::tanh_with::<FMA>(cj);
                    h[j] = hj;
                    o[j] = hj;
                }
            }
        }
    }
}

/// Stack of LSTM layers, unidirectional or bidirectional.
#[derive(Debug, Clone)]
pub struct StackedLstm {
    pub direction: Direction,
    pub hidden: usize,
    pub layers: Vec<(Lstm, Option<Lstm>)>,
}

impl StackedLstm {
    pub fn new(input: usize, hidden: usize, num_layers: usize, direction: Direction) -> Self {
        let width = match direction {
            Direction::Forward => hidden,
            Direction::Bidirectional => 2 * hidden,
        };
        let layers = (0..num_layers)
            .map(|l| {
                let inp = if l == 0 { input } else { width };
                let bwd = (direction == Direction::Bidirectional).then(|| Lstm::new(inp, hidden));
                (Lstm::new(inp, hidden), bwd)
            })
            .collect();
        Self {
            direction,
            hidden,
            layers,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0.input
    }

    pub fn output_dim(&self) -> usize {
        match self.direction {
            Direction::Forward => self.hidden,
            Direction::Bidirectional => 2 * self.hidden,
        }
    }

    pub fn zero_state(&self, batch: usize) -> Vec<LstmState> {
        self.layers
            .iter()
            .map(|_| LstmState::zeros(batch, self.hidden))
            .collect()
    }

    /// Whole-sequence or chunked evaluation over time-major `x`.
    ///
    /// A carried `state` is only accepted in forward mode; bidirectional
    /// layers always see the whole segment.
    pub fn run(
        &self,
        x: &[f32],
        len: usize,
        batch: usize,
        state: Option<Vec<LstmState>>,
    ) -> Result<(Vec<f32>, Vec<LstmState>), NnError> {
        if x.len() != len * batch * self.input_dim() {
            return Err(NnError::Shape(format!(
                "lstm input has {} values, expected {len}x{batch}x{}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut state = match (state, self.direction) {
            (Some(_), Direction::Bidirectional) => {
                return Err(NnError::Shape(
                    "bidirectional LSTM cannot carry state across calls".into(),
                ))
            }
            (Some(s), Direction::Forward) => {
                if s.len() != self.layers.len()
                    || s.iter().any(|st| st.h.len() != batch * self.hidden || st.c.len() != batch * self.hidden)
                {
                    return Err(NnError::Shape(format!(
                        "lstm state width mismatch: expected {} layers of {batch}x{}",
                        self.layers.len(),
                        self.hidden
                    )));
                }
                s
            }
            (None, _) => self.zero_state(batch),
        };
        let mut cur = x.to_vec();
        for (layer, st) in self.layers.iter().zip(state.iter_mut()) {
            cur = self.layer_forward(layer, &cur, len, batch, st);
        }
        Ok((cur, state))
    }

    /// Forward pass for internal callers that already validated shapes.
    pub fn forward(&self, x: &[f32], len: usize, batch: usize, state: Option<&mut [LstmState]>) -> Vec<f32> {
        let mut fresh;
        let states = match state {
            Some(s) => s,
            None => {
                fresh = self.zero_state(batch);
                &mut fresh[..]
            }
        };
        let mut cur: Option<Vec<f32>> = None;
        for (layer, st) in self.layers.iter().zip(states.iter_mut()) {
            let inp = cur.as_deref().unwrap_or(x);
            cur = Some(self.layer_forward(layer, inp, len, batch, st));
        }
        cur.expect("at least one layer")
    }

    fn layer_forward(&self, layer: &(Lstm, Option<Lstm>), x: &[f32], len: usize, batch: usize, st: &mut LstmState) -> Vec<f32> {
        let h = self.hidden;
        match &layer.1 {
            None => {
                let mut out = vec![0.0; len * batch * h];
                layer.0.forward(x, len, batch, st, false, &mut out);
                debug_check_finite("lstm", &out);
                out
            }
            Some(bwd) => {
                let mut fo = vec![0.0; len * batch * h];
                let mut bo = vec![0.0; len * batch * h];
                layer.0.forward(x, len, batch, &mut LstmState::zeros(batch, h), false, &mut fo);
                bwd.forward(x, len, batch, &mut LstmState::zeros(batch, h), true, &mut bo);
                let mut out = vec![0.0; len * batch * 2 * h];
                for ((o, f), b) in out.chunks_exact_mut(2 * h).zip(fo.chunks_exact(h)).zip(bo.chunks_exact(h)) {
                    o[..h].copy_from_slice(f);
                    o[h..].copy_from_slice(b);
                }
                debug_check_finite("bilstm", &out);
                out
            }
        }
    }

    pub fn visit(&mut self, prefix: &str, v: &mut Visitor<'_>) {
        for (l, (f, b)) in self.layers.iter_mut().enumerate() {
            f.visit(&format!("{prefix}.l{l}.fwd"), v);
            if let Some(b) = b {
                b.visit(&format!("{prefix}.l{l}.bwd"), v);
            }
        }
    }
}

/// The two most recent input frames seen by a causal 3x3 layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvHistory {
    pub freqs: usize,
    pub channels: usize,
    pub frames: Vec<f32>,
}

impl ConvHistory {
    pub fn new(freqs: usize, channels: usize) -> Self {
        Self {
            freqs,
            channels,
            frames: vec![0.0; 2 * freqs * channels],
        }
    }

    pub fn reset(&mut self) {
        self.frames.fill(0.0);
    }

    fn update(&mut self, x: &[f32], steps: usize) {
        let fs = self.freqs * self.channels;
        if steps >= 2 {
            self.frames.copy_from_slice(&x[(steps - 2) * fs..steps * fs]);
        } else if steps == 1 {
            self.frames.copy_within(fs.., 0);
            self.frames[fs..].copy_from_slice(&x[..fs]);
        }
    }
}

/// Builds im2col patches `[steps * freqs, channels * 9]` with patch index
/// `c * 9 + i * 3 + j` reading `x[t + time_off(j)][f + freq_off(i)][c]`.
fn im2col(
    x: &[f32],
    steps: usize,
    hist: &ConvHistory,
    time_off: impl Fn(usize) -> isize,
    freq_off: impl Fn(usize) -> isize,
) -> Vec<f32> {
    let (freqs, ch) = (hist.freqs, hist.channels);
    let fs = freqs * ch;
    let width = ch * 9;
    let mut patches = vec![0.0f32; steps * freqs * width];
    for t in 0..steps {
        for j in 0..3 {
            let tt = t as isize + time_off(j);
            let frame: &[f32] = if tt >= 0 {
                &x[tt as usize * fs..(tt as usize + 1) * fs]
            } else if tt >= -2 {
                let h = (tt + 2) as usize;
                &hist.frames[h * fs..(h + 1) * fs]
            } else {
                continue;
            };
            for i in 0..3 {
                for f in 0..freqs {
                    let ff = f as isize + freq_off(i);
                    if ff < 0 || ff >= freqs as isize {
                        continue;
                    }
                    let src = &frame[ff as usize * ch..(ff as usize + 1) * ch];
                    let row = &mut patches[(t * freqs + f) * width..(t * freqs + f + 1) * width];
                    for c in 0..ch {
                        row[c * 9 + i * 3 + j] = src[c];
                    }
                }
            }
        }
    }
    patches
}

/// 3x3 convolution, causal in time (two leading zero steps) and centred in
/// frequency. Weight `[cout, cin, 3, 3]` indexed `[o][c][freq tap][time tap]`.
#[derive(Debug, Clone)]
pub struct CausalConv2d {
    pub cin: usize,
    pub cout: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl CausalConv2d {
    pub fn new(cin: usize, cout: usize) -> Self {
        Self {
            cin,
            cout,
            weight: vec![0.0; cout * cin * 9],
            bias: vec![0.0; cout],
        }
    }

    /// Frames `[steps, freqs, cin]` to `[steps, freqs, cout]`.
    pub fn forward(&self, x: &[f32], steps: usize, hist: &mut ConvHistory) -> Vec<f32> {
        assert_eq!(hist.channels, self.cin);
        let freqs = hist.freqs;
        assert_eq!(x.len(), steps * freqs * self.cin);
        let patches = im2col(x, steps, hist, |j| j as isize - 2, |i| i as isize - 1);
        let mut out = vec![0.0; steps * freqs * self.cout];
        for r in out.chunks_exact_mut(self.cout) {
            r.copy_from_slice(&self.bias);
        }
        matmul_wt(&patches, steps * freqs, self.cin * 9, &self.weight, self.cout, 1.0, &mut out);
        hist.update(x, steps);
        debug_check_finite("causal_conv2d", &out);
        out
    }

    pub fn visit(&mut self, prefix: &str, v: &mut Visitor<'_>) {
        let init = Init::Uniform { fan_in: self.cin * 9 };
        v(slot(prefix, "weight", vec![self.cout, self.cin, 3, 3], &mut self.weight, init));
        v(slot(prefix, "bias", vec![self.cout], &mut self.bias, init));
    }
}

/// Transposed 3x3 convolution with stride 1, causal in time. Weight
/// `[cin, cout, 3, 3]`; input `(t, f)` contributes to `(t + j, f + i - 1)`.
#[derive(Debug, Clone)]
pub struct CausalDeconv2d {
    pub cin: usize,
    pub cout: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl CausalDeconv2d {
    pub fn new(cin: usize, cout: usize) -> Self {
        Self {
            cin,
            cout,
            weight: vec![0.0; cin * cout * 9],
            bias: vec![0.0; cout],
        }
    }

    pub fn forward(&self, x: &[f32], steps: usize, hist: &mut ConvHistory) -> Vec<f32> {
        assert_eq!(hist.channels, self.cin);
        let freqs = hist.freqs;
        assert_eq!(x.len(), steps * freqs * self.cin);
        // gather form: y[t, f, o] = sum W[c, o, i, j] x[t - j, f + 1 - i, c]
        let patches = im2col(x, steps, hist, |j| -(j as isize), |i| 1 - i as isize);
        let mut gather = vec![0.0f32; self.cout * self.cin * 9];
        for c in 0..self.cin {
            for o in 0..self.cout {
                for k in 0..9 {
                    gather[(o * self.cin + c) * 9 + k] = self.weight[(c * self.cout + o) * 9 + k];
                }
            }
        }
        let mut out = vec![0.0; steps * freqs * self.cout];
        for r in out.chunks_exact_mut(self.cout) {
            r.copy_from_slice(&self.bias);
        }
        matmul_wt(&patches, steps * freqs, self.cin * 9, &gather, self.cout, 1.0, &mut out);
        hist.update(x, steps);
        debug_check_finite("deconv2d", &out);
        out
    }

    pub fn visit(&mut self, prefix: &str, v: &mut Visitor<'_>) {
        let init = Init::Uniform { fan_in: self.cin * 9 };
        v(slot(prefix, "weight", vec![self.cin, self.cout, 3, 3], &mut self.weight, init));
        v(slot(prefix, "bias", vec![self.cout], &mut self.bias, init));
    }
}

fn frames_from_cfl(input: &Tensor) -> Result<(usize, usize, usize, Vec<f32>), NnError> {
    let &[c, f, l] = input.dims() else {
        return Err(NnError::Shape(format!("expected [C, F, L], got {:?}", input.dims())));
    };
    Ok((c, f, l, input.permute(&[2, 1, 0]).into_data()))
}

fn cfl_from_frames(frames: Vec<f32>, c: usize, f: usize, l: usize) -> Tensor {
    Tensor::new(vec![l, f, c], frames)
        .expect("consistent dims")
        .permute(&[2, 1, 0])
}

/// Causal 3x3 convolution of a `[Cin, F, L]` tensor with weight `[Cout, Cin, 3, 3]`.
pub fn causal_conv2d(input: &Tensor, weight: &Tensor, bias: &[f32]) -> Result<Tensor, NnError> {
    let (cin, f, l, frames) = frames_from_cfl(input)?;
    let &[cout, wc, 3, 3] = weight.dims() else {
        return Err(NnError::Shape(format!("conv weight dims {:?}", weight.dims())));
    };
    if wc != cin || bias.len() != cout {
        return Err(NnError::Shape(format!(
            "conv weight {:?} / bias {} incompatible with {cin} input channels",
            weight.dims(),
            bias.len()
        )));
    }
    let conv = CausalConv2d {
        cin,
        cout,
        weight: weight.data().to_vec(),
        bias: bias.to_vec(),
    };
    let out = conv.forward(&frames, l, &mut ConvHistory::new(f, cin));
    Ok(cfl_from_frames(out, cout, f, l))
}

/// Causal transposed 3x3 convolution of `[Cin, F, L]` with weight `[Cin, Cout, 3, 3]`.
pub fn deconv2d(input: &Tensor, weight: &Tensor, bias: &[f32]) -> Result<Tensor, NnError> {
    let (cin, f, l, frames) = frames_from_cfl(input)?;
    let &[wc, cout, 3, 3] = weight.dims() else {
        return Err(NnError::Shape(format!("deconv weight dims {:?}", weight.dims())));
    };
    if wc != cin || bias.len() != cout {
        return Err(NnError::Shape(format!(
            "deconv weight {:?} / bias {} incompatible with {cin} input channels",
            weight.dims(),
            bias.len()
        )));
    }
    let deconv = CausalDeconv2d {
        cin,
        cout,
        weight: weight.data().to_vec(),
        bias: bias.to_vec(),
    };
    let out = deconv.forward(&frames, l, &mut ConvHistory::new(f, cin));
    Ok(cfl_from_frames(out, cout, f, l))
}

/// 1-D transposed convolution used to fold unfolded sequences back.
/// Weight `[cin, kernel, cout]`; position `p` writes `p * stride + i`.
#[derive(Debug, Clone)]
pub struct ConvTranspose1d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvTranspose1d {
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Self {
            cin,
            cout,
            kernel,
            stride,
            weight: vec![0.0; cin * kernel * cout],
            bias: vec![0.0; cout],
        }
    }

    /// Per-position tap contributions `[rows, kernel * cout]` (no bias).
    pub fn taps(&self, h: &[f32], rows: usize) -> Vec<f32> {
        let n = self.kernel * self.cout;
        let mut y = vec![0.0; rows * n];
        math::gemm(rows, self.cin, n, h, self.cin, 1, &self.weight, n, 1, 0.0, &mut y);
        y
    }

    /// Adds the folded output of `h: [positions, batch, cin]` into `out`,
    /// where element `(t, b)` of the output starts at
    /// `t * len_stride + b * batch_stride`. Outputs at `t >= out_len` are dropped.
    #[allow(clippy::too_many_arguments)]
    pub fn add_into(
        &self,
        h: &[f32],
        positions: usize,
        batch: usize,
        out: &mut [f32],
        out_len: usize,
        len_stride: usize,
        batch_stride: usize,
    ) {
        let y = self.taps(h, positions * batch);
        let n = self.kernel * self.cout;
        for t in 0..out_len {
            for b in 0..batch {
                let o = &mut out[t * len_stride + b * batch_stride..][..self.cout];
                for (v, bias) in o.iter_mut().zip(&self.bias) {
                    *v += bias;
                }
            }
        }
        for p in 0..positions {
            for i in 0..self.kernel {
                let t = p * self.stride + i;
                if t >= out_len {
                    continue;
                }
                for b in 0..batch {
                    let src = &y[(p * batch + b) * n + i * self.cout..][..self.cout];
                    let o = &mut out[t * len_stride + b * batch_stride..][..self.cout];
                    for (v, s) in o.iter_mut().zip(src) {
                        *v += s;
                    }
                }
            }
        }
    }

    pub fn visit(&mut self, prefix: &str, v: &mut Visitor<'_>) {
        let init = Init::Uniform { fan_in: self.cin * self.kernel };
        v(slot(prefix, "weight", vec![self.cin, self.kernel, self.cout], &mut self.weight, init));
        v(slot(prefix, "bias", vec![self.cout], &mut self.bias, init));
    }
}

/// Number of zero steps appended so that `kernel`/`stride` windows tile `len`.
pub(crate) fn unfold_pad(len: usize, kernel: usize, stride: usize) -> usize {
    if len <= kernel {
        kernel - len
    } else {
        (stride - (len - kernel) % stride) % stride
    }
}

pub(crate) fn unfold_positions(len: usize, kernel: usize, stride: usize) -> usize {
    (len + unfold_pad(len, kernel, stride) - kernel) / stride + 1
}

/// Gathers sliding windows along one axis into `[positions, batch, kernel * c]`.
/// Element `(t, b)` of the source starts at `t * len_stride + b * batch_stride`;
/// steps past `len` read as zero.
#[allow(clippy::too_many_arguments)]
pub(crate) fn unfold_strided(
    x: &[f32],
    len: usize,
    batch: usize,
    c: usize,
    len_stride: usize,
    batch_stride: usize,
    kernel: usize,
    stride: usize,
) -> (Vec<f32>, usize) {
    let positions = unfold_positions(len, kernel, stride);
    let width = kernel * c;
    let mut out = vec![0.0; positions * batch * width];
    for p in 0..positions {
        for b in 0..batch {
            let row = &mut out[(p * batch + b) * width..][..width];
            for i in 0..kernel {
                let t = p * stride + i;
                if t < len {
                    row[i * c..(i + 1) * c].copy_from_slice(&x[t * len_stride + b * batch_stride..][..c]);
                }
            }
        }
    }
    (out, positions)
}

/// Result of [`unfold_time`]: `[positions, batch, kernel * C]` plus the
/// number of zero steps appended.
#[derive(Debug, Clone, PartialEq)]
pub struct Unfolded {
    pub data: Tensor,
    pub pad: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Stacks `kernel` consecutive steps of a time-major `[L, B, C]` tensor.
pub fn unfold_time(x: &Tensor, kernel: usize, stride: usize) -> Result<Unfolded, NnError> {
    let &[len, batch, c] = x.dims() else {
        return Err(NnError::Shape(format!("expected [L, B, C], got {:?}", x.dims())));
    };
    if kernel == 0 || stride == 0 || stride > kernel {
        return Err(NnError::Shape(format!("invalid unfold kernel {kernel} stride {stride}")));
    }
    let pad = unfold_pad(len, kernel, stride);
    let (data, positions) = unfold_strided(x.data(), len, batch, c, batch * c, c, kernel, stride);
    Ok(Unfolded {
        data: Tensor::new(vec![positions, batch, kernel * c], data)?,
        pad,
        kernel,
        stride,
    })
}

/// Inverse of [`unfold_time`] on the unpadded length.
pub fn refold_time(u: &Unfolded) -> Tensor {
    let &[positions, batch, width] = u.data.dims() else {
        unreachable!("unfold output is rank 3")
    };
    let c = width / u.kernel;
    let padded = (positions - 1) * u.stride + u.kernel;
    let len = padded - u.pad;
    let mut out = vec![0.0; len * batch * c];
    for t in 0..len {
        let p = (t / u.stride).min(positions - 1);
        let i = t - p * u.stride;
        for b in 0..batch {
            let src = &u.data.data()[(p * batch + b) * width + i * c..][..c];
            out[(t * batch + b) * c..][..c].copy_from_slice(src);
        }
    }
    Tensor::new(vec![len, batch, c], out).expect("consistent dims")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn rand_lstm(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Lstm {
        let mut l = Lstm::new(input, hidden);
        l.w_ih = rand_vec(l.w_ih.len(), rng);
        l.w_hh = rand_vec(l.w_hh.len(), rng);
        l.b_ih = rand_vec(l.b_ih.len(), rng);
        l.b_hh = rand_vec(l.b_hh.len(), rng);
        l
    }

    #[test]
    fn zero_lstm_outputs_zero() {
        let s = StackedLstm::new(3, 4, 2, Direction::Bidirectional);
        let x = vec![0.7; 5 * 2 * 3];
        let (y, _) = s.run(&x, 5, 2, None).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lstm_chunked_equals_whole() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = StackedLstm::new(6, 8, 2, Direction::Forward);
        for (f, _) in &mut s.layers {
            *f = rand_lstm(f.input, 8, &mut rng);
        }
        let x = rand_vec(64 * 3 * 6, &mut rng);
        let (whole, _) = s.run(&x, 64, 3, None).unwrap();
        let mut state = Some(s.zero_state(3));
        let mut parts = Vec::new();
        for (a, b) in [(0, 10), (10, 11), (11, 40), (40, 64)] {
            let (y, st) = s.run(&x[a * 18..b * 18], b - a, 3, state.take()).unwrap();
            parts.extend(y);
            state = Some(st);
        }
        let diff = whole.iter().zip(&parts).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(diff <= 1e-6, "{diff}");
    }

    #[test]
    fn lstm_cell_matches_scalar_equations() {
        let mut l = Lstm::new(2, 2);
        l.w_ih = vec![0.1, -0.2, 0.3, 0.05, -0.1, 0.2, 0.15, -0.25, 0.3, 0.1, -0.05, 0.2, 0.25, 0.1, -0.3, 0.05];
        l.w_hh = vec![0.05, 0.1, -0.1, 0.2, 0.3, -0.2, 0.1, 0.1, -0.15, 0.05, 0.2, -0.1, 0.1, 0.3, 0.05, -0.05];
        l.b_ih = vec![0.01, -0.02, 0.03, 0.0, 0.02, 0.01, -0.01, 0.04];
        l.b_hh = vec![0.0, 0.01, 0.0, -0.02, 0.01, 0.0, 0.02, 0.0];
        let h0 = [0.2f64, -0.1];
        let c0 = [0.5f64, 0.3];
        let x = [0.4f64, -0.7];
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let pre = |row: usize| -> f64 {
            (0..2).map(|k| l.w_ih[row * 2 + k] as f64 * x[k]).sum::<f64>()
                + (0..2).map(|k| l.w_hh[row * 2 + k] as f64 * h0[k]).sum::<f64>()
                + l.b_ih[row] as f64
                + l.b_hh[row] as f64
        };
        let mut expected = [0.0f64; 2];
        for j in 0..2 {
            let i = sig(pre(j));
            let f = sig(pre(2 + j));
            let g = pre(4 + j).tanh();
            let o = sig(pre(6 + j));
            let c = f * c0[j] + i * g;
            expected[j] = o * c.tanh();
        }
        let mut st = LstmState {
            h: vec![0.2, -0.1],
            c: vec![0.5, 0.3],
        };
        let mut out = vec![0.0; 2];
        l.forward(&[0.4, -0.7], 1, 1, &mut st, false, &mut out);
        for j in 0..2 {
            assert!((out[j] as f64 - expected[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn bidirectional_refuses_state() {
        let s = StackedLstm::new(2, 2, 1, Direction::Bidirectional);
        let st = s.zero_state(1);
        assert!(s.run(&[0.0; 4], 2, 1, Some(st)).is_err());
        let f = StackedLstm::new(2, 2, 1, Direction::Forward);
        assert!(f.run(&[0.0; 4], 2, 1, Some(vec![LstmState::zeros(1, 3)])).is_err());
    }

    /// Direct-summation conv oracle over `[C, F, L]`.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: &[f32]) -> Tensor {
        let (c, f, l) = (x.dims()[0], x.dims()[1], x.dims()[2]);
        let cout = w.dims()[0];
        let mut y = Tensor::zeros(vec![cout, f, l]);
        for o in 0..cout {
            for ff in 0..f {
                for t in 0..l {
                    let mut s = b[o] as f64;
                    for ci in 0..c {
                        for i in 0..3 {
                            for j in 0..3 {
                                let fi = ff as isize + i as isize - 1;
                                let tj = t as isize + j as isize - 2;
                                if fi >= 0 && (fi as usize) < f && tj >= 0 {
                                    s += (w.at(&[o, ci, i, j]) * x.at(&[ci, fi as usize, tj as usize])) as f64;
                                }
                            }
                        }
                    }
                    y.set(&[o, ff, t], s as f32);
                }
            }
        }
        y
    }

    /// Scatter-form transposed conv oracle.
    fn deconv_oracle(x: &Tensor, w: &Tensor, b: &[f32]) -> Tensor {
        let (c, f, l) = (x.dims()[0], x.dims()[1], x.dims()[2]);
        let cout = w.dims()[1];
        let mut full = vec![0.0f64; cout * (f + 2) * (l + 2)];
        for ci in 0..c {
            for ff in 0..f {
                for t in 0..l {
                    for o in 0..cout {
                        for i in 0..3 {
                            for j in 0..3 {
                                full[(o * (f + 2) + ff + i) * (l + 2) + t + j] +=
                                    (x.at(&[ci, ff, t]) * w.at(&[ci, o, i, j])) as f64;
                            }
                        }
                    }
                }
            }
        }
        let mut y = Tensor::zeros(vec![cout, f, l]);
        for o in 0..cout {
            for ff in 0..f {
                for t in 0..l {
                    y.set(&[o, ff, t], (full[(o * (f + 2) + ff + 1) * (l + 2) + t] + b[o] as f64) as f32);
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::new(vec![3, 7, 9], rand_vec(189, &mut rng)).unwrap();
        let w = Tensor::new(vec![4, 3, 3, 3], rand_vec(108, &mut rng)).unwrap();
        let b = rand_vec(4, &mut rng);
        let y = causal_conv2d(&x, &w, &b).unwrap();
        assert!(y.max_abs_diff(&conv_oracle(&x, &w, &b)) < 1e-5);
        let wd = Tensor::new(vec![3, 4, 3, 3], rand_vec(108, &mut rng)).unwrap();
        let yd = deconv2d(&x, &wd, &b).unwrap();
        assert!(yd.max_abs_diff(&deconv_oracle(&x, &wd, &b)) < 1e-5);
    }

    #[test]
    fn conv_delta_and_impulse() {
        let mut w = Tensor::zeros(vec![1, 1, 3, 3]);
        w.set(&[0, 0, 1, 2], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::new(vec![1, 5, 6], rand_vec(30, &mut rng)).unwrap();
        assert_eq!(causal_conv2d(&x, &w, &[0.0]).unwrap(), x);
        let mut wd = Tensor::zeros(vec![1, 1, 3, 3]);
        wd.set(&[0, 0, 1, 0], 1.0);
        assert_eq!(deconv2d(&x, &wd, &[0.0]).unwrap(), x);

        let ones = Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let mut imp = Tensor::zeros(vec![1, 5, 8]);
        imp.set(&[0, 2, 3], 1.0);
        for y in [causal_conv2d(&imp, &ones, &[0.0]).unwrap(), deconv2d(&imp, &ones, &[0.0]).unwrap()] {
            for t in 0..8 {
                let any = (0..5).any(|f| y.at(&[0, f, t]) != 0.0);
                assert_eq!(any, (3..=5).contains(&t), "step {t}");
            }
        }
        let z = Tensor::zeros(vec![2, 4, 4]);
        let w2 = Tensor::new(vec![3, 2, 3, 3], vec![0.3; 54]).unwrap();
        assert!(causal_conv2d(&z, &w2, &[0.0; 3]).unwrap().data().iter().all(|v| *v == 0.0));
        let wd2 = Tensor::new(vec![2, 3, 3, 3], vec![0.3; 54]).unwrap();
        let yb = deconv2d(&z, &wd2, &[1.0, 2.0, 3.0]).unwrap();
        assert!((0..3).all(|o| (0..16).all(|k| yb.data()[o * 16 + k] == (o + 1) as f32)));
        assert!(causal_conv2d(&z, &w, &[0.0]).is_err());
    }

    #[test]
    fn conv_streaming_equals_whole() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = CausalConv2d::new(2, 3);
        conv.weight = rand_vec(54, &mut rng);
        conv.bias = rand_vec(3, &mut rng);
        let x = rand_vec(10 * 4 * 2, &mut rng);
        let whole = conv.forward(&x, 10, &mut ConvHistory::new(4, 2));
        let mut hist = ConvHistory::new(4, 2);
        let mut stream = Vec::new();
        for t in 0..10 {
            stream.extend(conv.forward(&x[t * 8..(t + 1) * 8], 1, &mut hist));
        }
        assert_eq!(whole, stream);
    }

    #[test]
    fn unfold_examples() {
        let x = Tensor::new(vec![4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let u = unfold_time(&x, 2, 2).unwrap();
        assert_eq!(u.data.dims(), &[2, 1, 2]);
        assert_eq!(u.data.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(u.pad, 0);
        assert_eq!(refold_time(&u), x);
        let x5 = Tensor::new(vec![5, 2, 3], (0..30).map(|v| v as f32).collect()).unwrap();
        let u5 = unfold_time(&x5, 2, 2).unwrap();
        assert_eq!(u5.pad, 1);
        assert_eq!(u5.data.dims(), &[3, 2, 6]);
        assert_eq!(refold_time(&u5), x5);
        let u4 = unfold_time(&x5, 4, 1).unwrap();
        assert_eq!(refold_time(&u4), x5);
    }

    #[test]
    fn conv_transpose_1d_stride_two() {
        let mut d = ConvTranspose1d::new(1, 1, 2, 2);
        d.weight = vec![1.0, 10.0];
        d.bias = vec![0.5];
        let h = vec![1.0, 2.0, 3.0];
        let mut out = vec![0.0; 5];
        d.add_into(&h, 3, 1, &mut out, 5, 1, 1);
        assert_eq!(out, vec![1.5, 10.5, 2.5, 20.5, 3.5]);
    }
}
