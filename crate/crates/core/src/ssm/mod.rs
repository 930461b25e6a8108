//! Selective state-space layers: discretisation, the input-dependent scan, and the
//! bidirectional gated block applied to raster-flattened feature maps.

pub mod scan;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::tape::{softplus_inv, Tape, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};
pub use scan::{sequences_scanned, ScanPath};

/// Direction setting of a Mamba layer; `None` disables it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MambaMode {
    None,
    Uni,
    #[default]
    Bi,
}

impl std::str::FromStr for MambaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MambaMode::None),
            "uni" => Ok(MambaMode::Uni),
            "bi" => Ok(MambaMode::Bi),
            other => Err(Error::Config(format!("unknown mamba mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MambaConfig {
    pub mode: MambaMode,
    /// State size `N` of the diagonal SSM.
    pub state: usize,
    #[serde(default)]
    pub scan_path: ScanPath,
}

impl Default for MambaConfig {
    fn default() -> Self {
        MambaConfig { mode: MambaMode::Bi, state: 8, scan_path: ScanPath::Sequential }
    }
}

/// A sequence batch `[B, L, D]` plus the raster it was flattened from.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub data: Tensor,
    pub origin_shape: (usize, usize),
}

pub(crate) fn flatten_data(src: &[f64], n: usize, c: usize, l: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for b in 0..n {
        for ch in 0..c {
            for p in 0..l {
                out[(b * l + p) * c + ch] = src[(b * c + ch) * l + p];
            }
        }
    }
    out
}

pub(crate) fn unflatten_data(src: &[f64], n: usize, c: usize, l: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for b in 0..n {
        for p in 0..l {
            for ch in 0..c {
                out[(b * c + ch) * l + p] = src[(b * l + p) * c + ch];
            }
        }
    }
    out
}

pub(crate) fn flip_data(src: &[f64], n: usize, l: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for b in 0..n {
        for t in 0..l {
            let from = (b * l + t) * d;
            let to = (b * l + (l - 1 - t)) * d;
            out[to..to + d].copy_from_slice(&src[from..from + d]);
        }
    }
    out
}

/// Row-major raster flattening of a `[B, C, H, W]` feature map into `[B, H*W, C]`.
pub fn raster_flatten(f: &Tensor) -> Result<SequenceBatch> {
    let (n, c, h, w) = f.dims4()?;
    let data = Tensor::from_vec(&[n, h * w, c], flatten_data(f.data(), n, c, h * w))?;
    Ok(SequenceBatch { data, origin_shape: (h, w) })
}

pub fn raster_unflatten(s: &SequenceBatch) -> Result<Tensor> {
    let (n, l, c) = s.data.dims3()?;
    let (h, w) = s.origin_shape;
    ensure_shape!(l == h * w, "sequence length {l} does not match raster {h}x{w}");
    Tensor::from_vec(&[n, c, h, w], unflatten_data(s.data.data(), n, c, l))
}

/// Reverses the sequence axis.
pub fn reverse(s: &SequenceBatch) -> Result<SequenceBatch> {
    let (n, l, d) = s.data.dims3()?;
    Ok(SequenceBatch {
        data: Tensor::from_vec(&[n, l, d], flip_data(s.data.data(), n, l, d))?,
        origin_shape: s.origin_shape,
    })
}

/// Zero-order-hold discretisation of the diagonal state matrix with the simplified
/// (Euler) input matrix.
///
/// `delta`: `[B, L, D]`, `a`: `[D, N]` (already negative), `b_in`: `[B, L, N]`.
/// Returns `(A_bar, B_bar)`, each `[B, L, D, N]`.
pub fn discretize(delta: &Tensor, a: &Tensor, b_in: &Tensor) -> Result<(Tensor, Tensor)> {
    let (bs, l, d) = delta.dims3()?;
    let sa = a.shape();
    ensure_shape!(sa.len() == 2 && sa[0] == d, "A {sa:?} for {d} channels");
    let n = sa[1];
    ensure_shape!(b_in.shape() == [bs, l, n], "B {:?}, expected [{bs}, {l}, {n}]", b_in.shape());
    if let Some(bad) = delta.data().iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Precondition(format!("step size must be positive, got {bad}")));
    }
    let mut a_bar = Vec::with_capacity(bs * l * d * n);
    let mut b_bar = Vec::with_capacity(bs * l * d * n);
    for b in 0..bs {
        for t in 0..l {
            for ch in 0..d {
                let dt = delta.data()[(b * l + t) * d + ch];
                for s in 0..n {
                    a_bar.push((dt * a.data()[ch * n + s]).exp());
                    b_bar.push(dt * b_in.data()[(b * l + t) * n + s]);
                }
            }
        }
    }
    let shape = [bs, l, d, n];
    Ok((Tensor::from_vec(&shape, a_bar)?, Tensor::from_vec(&shape, b_bar)?))
}

/// Learned parameters of one selective SSM over `dim` channels with `state` states.
#[derive(Clone, Debug)]
pub struct SsmParams {
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub w_delta: ParamId,
    pub b_delta: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub dim: usize,
    pub state: usize,
}

/// Initial step sizes are drawn log-uniformly from this range.
pub const DELTA_INIT_RANGE: (f64, f64) = (1e-3, 1e-1);

impl SsmParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, path: &str, dim: usize, state: usize, rng: &mut R) -> Self {
        // S4D-real: A = -(1..=N) on every channel
        let a_log: Vec<f64> = (0..dim).flat_map(|_| (1..=state).map(|n| (n as f64).ln())).collect();
        let (lo, hi) = DELTA_INIT_RANGE;
        let b_delta: Vec<f64> = (0..dim)
            .map(|_| {
                let dt = (rng.random_range(lo.ln()..hi.ln())).exp();
                softplus_inv(dt)
            })
            .collect();
        let bound = 1.0 / (dim as f64).sqrt();
        SsmParams {
            a_log: store.add(format!("{path}.a_log"), Tensor::from_vec(&[dim, state], a_log).expect("shape")),
            d_skip: store.add(format!("{path}.d_skip"), Tensor::full(&[dim], 1.0)),
            w_delta: store.add(format!("{path}.w_delta"), Tensor::uniform(&[dim, dim], 0.1 * bound, rng)),
            b_delta: store.add(format!("{path}.b_delta"), Tensor::from_vec(&[dim], b_delta).expect("shape")),
            w_b: store.add(format!("{path}.w_b"), Tensor::uniform(&[state, dim], bound, rng)),
            w_c: store.add(format!("{path}.w_c"), Tensor::uniform(&[state, dim], bound, rng)),
            dim,
            state,
        }
    }

    fn check(&self, store: &ParamStore) -> Result<()> {
        let expect = [
            (self.a_log, vec![self.dim, self.state]),
            (self.d_skip, vec![self.dim]),
            (self.w_delta, vec![self.dim, self.dim]),
            (self.b_delta, vec![self.dim]),
            (self.w_b, vec![self.state, self.dim]),
            (self.w_c, vec![self.state, self.dim]),
        ];
        for (id, shape) in expect {
            if store.get(id).shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "{} has shape {:?}, expected {shape:?}",
                    store.name(id),
                    store.get(id).shape()
                )));
            }
        }
        Ok(())
    }
}

/// Reads a parameter as trainable or frozen depending on `train`.
pub(crate) fn read(tape: &mut Tape, store: &ParamStore, id: ParamId, train: bool) -> Var {
    if train {
        tape.param(store, id)
    } else {
        tape.frozen(store, id)
    }
}

/// Input-dependent selective scan over `u: [B, L, D]`:
/// `delta = softplus(u W_delta^T + b_delta)`, `B = u W_B^T`, `C = u W_C^T`.
pub fn selective_scan(
    tape: &mut Tape,
    store: &ParamStore,
    p: &SsmParams,
    u: Var,
    path: ScanPath,
    train: bool,
) -> Result<Var> {
    p.check(store)?;
    let (_, _, d) = tape.value(u).dims3()?;
    if d != p.dim {
        return Err(Error::Config(format!("scan over {d} channels with parameters for {}", p.dim)));
    }
    let w_delta = read(tape, store, p.w_delta, train);
    let b_delta = read(tape, store, p.b_delta, train);
    let w_b = read(tape, store, p.w_b, train);
    let w_c = read(tape, store, p.w_c, train);
    let a_log = read(tape, store, p.a_log, train);
    let d_skip = read(tape, store, p.d_skip, train);
    let pre = tape.linear(u, w_delta, Some(b_delta))?;
    let delta = tape.softplus(pre);
    let b = tape.linear(u, w_b, None)?;
    let c = tape.linear(u, w_c, None)?;
    tape.selective_scan(u, delta, a_log, b, c, d_skip, path)
}

/// Vision-Mamba style block on a sequence: pre-norm, gated projection, forward scan
/// plus reversed backward scan fused by sum, output projection, residual.
#[derive(Clone, Debug)]
pub struct BiMamba {
    pub cfg: MambaConfig,
    pub dim: usize,
    norm_gain: ParamId,
    norm_bias: ParamId,
    w_in: ParamId,
    w_gate: ParamId,
    w_out: ParamId,
    pub fwd: SsmParams,
    pub bwd: Option<SsmParams>,
}

impl BiMamba {
    /// Returns `None` when the mode is [`MambaMode::None`]; no parameters are registered then.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        path: &str,
        dim: usize,
        cfg: MambaConfig,
        rng: &mut R,
    ) -> Option<Self> {
        if cfg.mode == MambaMode::None {
            return None;
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let norm_gain = store.add(format!("{path}.norm.gain"), Tensor::full(&[dim], 1.0));
        let norm_bias = store.add(format!("{path}.norm.bias"), Tensor::zeros(&[dim]));
        let w_in = store.add(format!("{path}.in_proj"), Tensor::uniform(&[dim, dim], bound, rng));
        let w_gate = store.add(format!("{path}.gate_proj"), Tensor::uniform(&[dim, dim], bound, rng));
        let w_out = store.add(format!("{path}.out_proj"), Tensor::uniform(&[dim, dim], 0.5 * bound, rng));
        let fwd = SsmParams::init(store, &format!("{path}.fwd"), dim, cfg.state, rng);
        let bwd = (cfg.mode == MambaMode::Bi).then(|| SsmParams::init(store, &format!("{path}.bwd"), dim, cfg.state, rng));
        Some(BiMamba { cfg, dim, norm_gain, norm_bias, w_in, w_gate, w_out, fwd, bwd })
    }

    /// Scan core on an already projected sequence: `scan_f(x) [+ flip(scan_b(flip(x)))]`.
    pub fn core(&self, tape: &mut Tape, store: &ParamStore, x: Var, train: bool) -> Result<Var> {
        let path = self.cfg.scan_path;
        let f = selective_scan(tape, store, &self.fwd, x, path, train)?;
        match &self.bwd {
            Some(bwd) => {
                let xr = tape.flip(x)?;
                let br = selective_scan(tape, store, bwd, xr, path, train)?;
                let b = tape.flip(br)?;
                tape.add(f, b)
            }
            None => Ok(f),
        }
    }

    /// Full block on `[B, L, D]`.
    pub fn forward_seq(&self, tape: &mut Tape, store: &ParamStore, u: Var, train: bool) -> Result<Var> {
        let gain = read(tape, store, self.norm_gain, train);
        let bias = read(tape, store, self.norm_bias, train);
        let w_in = read(tape, store, self.w_in, train);
        let w_gate = read(tape, store, self.w_gate, train);
        let w_out = read(tape, store, self.w_out, train);
        let normed = tape.layer_norm(u, gain, bias)?;
        let xin = tape.linear(normed, w_in, None)?;
        let x = tape.silu(xin);
        let zin = tape.linear(normed, w_gate, None)?;
        let z = tape.silu(zin);
        let core = self.core(tape, store, x, train)?;
        let gated = tape.mul(core, z)?;
        let out = tape.linear(gated, w_out, None)?;
        tape.add(u, out)
    }

    /// Full block on a `[B, C, H, W]` map through raster flattening.
    pub fn forward_map(&self, tape: &mut Tape, store: &ParamStore, f: Var, train: bool) -> Result<Var> {
        let (_, _, h, w) = tape.value(f).dims4()?;
        let seq = tape.raster_flatten(f)?;
        let out = self.forward_seq(tape, store, seq, train)?;
        tape.raster_unflatten(out, h, w)
    }
}

/// Applies an optional block to a feature map; identity when absent.
pub fn apply_optional(block: Option<&BiMamba>, tape: &mut Tape, store: &ParamStore, f: Var, train: bool) -> Result<Var> {
    match block {
        Some(b) => b.forward_map(tape, store, f, train),
        None => Ok(f),
    }
}

/// Tensor-level selective scan outside any tape. Shapes as in [`Tape::selective_scan`];
/// `chunk` sets the block length of the two-level path and of the state checkpoints.
#[allow(clippy::too_many_arguments)]
pub fn scan_values(
    u: &Tensor,
    delta: &Tensor,
    a_log: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d_skip: &Tensor,
    path: ScanPath,
    chunk: usize,
) -> Result<Tensor> {
    let (n, l, d) = u.dims3()?;
    ensure_shape!(delta.shape() == u.shape(), "scan: delta {:?} vs u {:?}", delta.shape(), u.shape());
    let sa = a_log.shape();
    ensure_shape!(sa.len() == 2 && sa[0] == d, "scan: A_log {sa:?} for {d} channels");
    let s = sa[1];
    ensure_shape!(b.shape() == [n, l, s] && c.shape() == [n, l, s], "scan: B {:?} / C {:?}", b.shape(), c.shape());
    ensure_shape!(d_skip.shape() == [d], "scan: D {:?}", d_skip.shape());
    if chunk == 0 {
        return Err(Error::Config("scan chunk length must be positive".into()));
    }
    if let Some(bad) = delta.data().iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Precondition(format!("step size must be positive, got {bad}")));
    }
    let a = scan::negated_exp(a_log.data());
    let mut y = vec![0.0; n * l * d];
    for i in 0..n {
        let x = scan::ScanInputs {
            u: &u.data()[i * l * d..(i + 1) * l * d],
            delta: &delta.data()[i * l * d..(i + 1) * l * d],
            a: &a,
            b: &b.data()[i * l * s..(i + 1) * l * s],
            c: &c.data()[i * l * s..(i + 1) * l * s],
            d_skip: d_skip.data(),
            len: l,
            dim: d,
            state: s,
            chunk,
        };
        scan::forward(&x, path, &mut y[i * l * d..(i + 1) * l * d]);
    }
    Tensor::from_vec(&[n, l, d], y)
}
