//! Fused selective-scan kernels over one sequence `[L, D]` with state size `S`.
//!
//! The recurrence per channel `d` and state `s`:
//!
//! ```text
//! h[t] = exp(delta[t,d] * A[d,s]) * h[t-1] + delta[t,d] * B[t,s] * u[t,d]
//! y[t,d] = sum_s C[t,s] * h[t,d,s] + D[d] * u[t,d]
//! ```
//!
//! with `A = -exp(a_log)`. The backward pass recomputes states chunk by chunk from
//! checkpoints saved at chunk boundaries, so memory stays `O(L/chunk * D * S)`.

/// Chunk length used for state checkpoints and the two-level scan.
pub const SCAN_CHUNK: usize = 64;

/// Which forward evaluation strategy to use. Both produce the same states up to rounding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanPath {
    /// Plain left-to-right recurrence.
    #[default]
    Sequential,
    /// Two-level scan: independent zero-initialised scans per chunk, then a carry pass
    /// that composes the chunk summaries `(prod A_bar, local h)`.
    Chunked,
}

pub(crate) struct ScanInputs<'a> {
    pub u: &'a [f64],
    pub delta: &'a [f64],
    pub a: &'a [f64],
    pub b: &'a [f64],
    pub c: &'a [f64],
    pub d_skip: &'a [f64],
    pub len: usize,
    pub dim: usize,
    pub state: usize,
    /// Chunk length for checkpoints and the two-level scan.
    pub chunk: usize,
}

pub(crate) fn negated_exp(a_log: &[f64]) -> Vec<f64> {
    a_log.iter().map(|v| -v.exp()).collect()
}

thread_local! {
    static SEQUENCES_SCANNED: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

/// Number of sequences the forward kernel has processed on the calling thread.
pub fn sequences_scanned() -> u64 {
    SEQUENCES_SCANNED.with(|c| c.get())
}

/// Runs the forward scan, writing `y` and returning the state at the start of each chunk.
pub(crate) fn forward(x: &ScanInputs<'_>, path: ScanPath, y: &mut [f64]) -> Vec<f64> {
    SEQUENCES_SCANNED.with(|c| c.set(c.get() + 1));
    match path {
        ScanPath::Sequential => forward_sequential(x, y),
        ScanPath::Chunked => forward_chunked(x, y),
    }
}

fn forward_sequential(x: &ScanInputs<'_>, y: &mut [f64]) -> Vec<f64> {
    let (dim, state) = (x.dim, x.state);
    let n_chunks = x.len.div_ceil(x.chunk);
    let mut checkpoints = Vec::with_capacity(n_chunks * dim * state);
    let mut h = vec![0.0; dim * state];
    for t in 0..x.len {
        if t % x.chunk == 0 {
            checkpoints.extend_from_slice(&h);
        }
        let bt = &x.b[t * state..(t + 1) * state];
        let ct = &x.c[t * state..(t + 1) * state];
        for d in 0..dim {
            let dt = x.delta[t * dim + d];
            let ut = x.u[t * dim + d];
            let hd = &mut h[d * state..(d + 1) * state];
            let ad = &x.a[d * state..(d + 1) * state];
            let mut acc = 0.0;
            for s in 0..state {
                let hv = (dt * ad[s]).exp() * hd[s] + dt * bt[s] * ut;
                hd[s] = hv;
                acc += ct[s] * hv;
            }
            y[t * dim + d] = acc + x.d_skip[d] * ut;
        }
    }
    checkpoints
}

fn forward_chunked(x: &ScanInputs<'_>, y: &mut [f64]) -> Vec<f64> {
    let (dim, state) = (x.dim, x.state);
    let ds = dim * state;
    let n_chunks = x.len.div_ceil(x.chunk);

    // Pass 1: per-chunk summaries, each computed from a zero state.
    let mut local_end = vec![0.0; n_chunks * ds];
    let mut decay_end = vec![1.0; n_chunks * ds];
    for k in 0..n_chunks {
        let hl = &mut local_end[k * ds..(k + 1) * ds];
        let pr = &mut decay_end[k * ds..(k + 1) * ds];
        for t in k * x.chunk..((k + 1) * x.chunk).min(x.len) {
            for d in 0..dim {
                let dt = x.delta[t * dim + d];
                let ut = x.u[t * dim + d];
                for s in 0..state {
                    let ab = (dt * x.a[d * state + s]).exp();
                    hl[d * state + s] = ab * hl[d * state + s] + dt * x.b[t * state + s] * ut;
                    pr[d * state + s] *= ab;
                }
            }
        }
    }

    // Pass 2: carry composition across chunks (the only sequential dependency).
    let mut checkpoints = vec![0.0; n_chunks * ds];
    for k in 1..n_chunks {
        for i in 0..ds {
            checkpoints[k * ds + i] =
                local_end[(k - 1) * ds + i] + decay_end[(k - 1) * ds + i] * checkpoints[(k - 1) * ds + i];
        }
    }

    // Pass 3: outputs inside each chunk from local states plus decayed carry.
    let mut hl = vec![0.0; ds];
    let mut pr = vec![0.0; ds];
    for k in 0..n_chunks {
        hl.fill(0.0);
        pr.fill(1.0);
        let carry = &checkpoints[k * ds..(k + 1) * ds];
        for t in k * x.chunk..((k + 1) * x.chunk).min(x.len) {
            for d in 0..dim {
                let dt = x.delta[t * dim + d];
                let ut = x.u[t * dim + d];
                let mut acc = 0.0;
                for s in 0..state {
                    let i = d * state + s;
                    let ab = (dt * x.a[i]).exp();
                    hl[i] = ab * hl[i] + dt * x.b[t * state + s] * ut;
                    pr[i] *= ab;
                    acc += x.c[t * state + s] * (hl[i] + pr[i] * carry[i]);
                }
                y[t * dim + d] = acc + x.d_skip[d] * ut;
            }
        }
    }
    checkpoints
}

/// Gradient buffers; each is accumulated into.
pub(crate) struct ScanGrads<'a> {
    pub u: &'a mut [f64],
    pub delta: &'a mut [f64],
    pub a: &'a mut [f64],
    pub b: &'a mut [f64],
    pub c: &'a mut [f64],
    pub d_skip: &'a mut [f64],
}

pub(crate) fn backward(x: &ScanInputs<'_>, checkpoints: &[f64], dy: &[f64], g: ScanGrads<'_>) {
    let (dim, state) = (x.dim, x.state);
    let ds = dim * state;
    let n_chunks = x.len.div_ceil(x.chunk);
    // states[j] = h at time t0 + j - 1 (states[0] is the chunk's incoming state)
    let mut states = vec![0.0; (x.chunk + 1) * ds];
    // decay factors of the chunk being replayed, reused by the reverse sweep
    let mut decay = vec![0.0; x.chunk * ds];
    let mut carry = vec![0.0; ds];
    for k in (0..n_chunks).rev() {
        let t0 = k * x.chunk;
        let t1 = ((k + 1) * x.chunk).min(x.len);
        states[..ds].copy_from_slice(&checkpoints[k * ds..(k + 1) * ds]);
        for t in t0..t1 {
            let j = t - t0;
            let (prev, next) = states.split_at_mut((j + 1) * ds);
            let prev = &prev[j * ds..];
            let ab_t = &mut decay[j * ds..(j + 1) * ds];
            for d in 0..dim {
                let dt = x.delta[t * dim + d];
                let ut = x.u[t * dim + d];
                for s in 0..state {
                    let i = d * state + s;
                    let ab = (dt * x.a[i]).exp();
                    ab_t[i] = ab;
                    next[i] = ab * prev[i] + dt * x.b[t * state + s] * ut;
                }
            }
        }
        for t in (t0..t1).rev() {
            let j = t - t0;
            let h_prev = &states[j * ds..(j + 1) * ds];
            let h_cur = &states[(j + 1) * ds..(j + 2) * ds];
            let ab_t = &decay[j * ds..(j + 1) * ds];
            for d in 0..dim {
                let dt = x.delta[t * dim + d];
                let ut = x.u[t * dim + d];
                let gy = dy[t * dim + d];
                g.d_skip[d] += gy * ut;
                let mut gu = gy * x.d_skip[d];
                let mut gdt = 0.0;
                for s in 0..state {
                    let i = d * state + s;
                    let cts = x.c[t * state + s];
                    let bts = x.b[t * state + s];
                    let a = x.a[i];
                    let ab = ab_t[i];
                    let gh = carry[i] + gy * cts;
                    g.c[t * state + s] += gy * h_cur[i];
                    let g_ab = gh * h_prev[i] * ab;
                    gdt += g_ab * a + gh * bts * ut;
                    g.a[i] += g_ab * dt;
                    g.b[t * state + s] += gh * dt * ut;
                    gu += gh * dt * bts;
                    carry[i] = gh * ab;
                }
                g.u[t * dim + d] += gu;
                g.delta[t * dim + d] += gdt;
            }
        }
    }
}
