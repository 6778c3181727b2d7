//! Linear recurrences `h_t = a_t * h_{t-1} + b_t` over many independent
//! lanes, and the selective state-space scan built on them.

use crate::real::Real;

pub const DEFAULT_BLOCK: usize = 64;

/// Blocked two-pass scan over `len` steps of `width` lanes, `h_0 = 0`.
///
/// Pass one reduces every block to its transfer pair `(prod a, local h)`;
/// the carries are chained across blocks; pass two replays each block from
/// its true incoming state. Blocks are independent in both passes.
pub fn blocked_linear_scan<R: Real>(a: &[R], b: &[R], len: usize, width: usize, block: usize) -> Vec<R> {
    assert_eq!(a.len(), len * width);
    assert_eq!(b.len(), len * width);
    let block = block.max(1);
    let n_blocks = len.div_ceil(block);
    let mut h = vec![R::zero(); len * width];
    if len == 0 {
        return h;
    }

    // Pass one: per-block transfer.
    let mut prod = vec![R::one(); n_blocks * width];
    let mut local = vec![R::zero(); n_blocks * width];
    for blk in 0..n_blocks {
        let p = &mut prod[blk * width..(blk + 1) * width];
        let l = &mut local[blk * width..(blk + 1) * width];
        for t in blk * block..((blk + 1) * block).min(len) {
            let at = &a[t * width..(t + 1) * width];
            let bt = &b[t * width..(t + 1) * width];
            for s in 0..width {
                l[s] = at[s] * l[s] + bt[s];
                p[s] *= at[s];
            }
        }
    }

    // Carry chain.
    let mut carry = vec![R::zero(); n_blocks * width];
    for blk in 1..n_blocks {
        for s in 0..width {
            let prev = carry[(blk - 1) * width + s];
            carry[blk * width + s] = prod[(blk - 1) * width + s] * prev + local[(blk - 1) * width + s];
        }
    }

    // Pass two: replay from the incoming state.
    for blk in 0..n_blocks {
        let mut state = carry[blk * width..(blk + 1) * width].to_vec();
        for t in blk * block..((blk + 1) * block).min(len) {
            let at = &a[t * width..(t + 1) * width];
            let bt = &b[t * width..(t + 1) * width];
            let ht = &mut h[t * width..(t + 1) * width];
            for s in 0..width {
                state[s] = at[s] * state[s] + bt[s];
                ht[s] = state[s];
            }
        }
    }
    h
}

/// Shapes of one selective scan: `len` steps, `channels` lanes of `state`
/// dimensions each.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

/// Forward selective scan.
///
/// `u, delta: [L, E]`, `a: [E, N]`, `b, c: [L, N]`. Discretization is
/// `abar = exp(delta * a)`, `bbar u = delta * b * u`; the output is
/// `y_t = sum_n c_t[n] h_t[., n]`. Returns `(y, h, abar)`, the latter two
/// `[L, E, N]`.
pub fn selective_scan_forward<R: Real>(
    dims: ScanDims,
    u: &[R],
    delta: &[R],
    a: &[R],
    b: &[R],
    c: &[R],
) -> (Vec<R>, Vec<R>, Vec<R>) {
    let ScanDims { len, channels: e, state: n } = dims;
    let width = e * n;
    let mut abar = vec![R::zero(); len * width];
    let mut bx = vec![R::zero(); len * width];
    for t in 0..len {
        for ch in 0..e {
            let dt = delta[t * e + ch];
            let du = dt * u[t * e + ch];
            let base = (t * e + ch) * n;
            for s in 0..n {
                abar[base + s] = (dt * a[ch * n + s]).exp();
                bx[base + s] = du * b[t * n + s];
            }
        }
    }
    let h = blocked_linear_scan(&abar, &bx, len, width, DEFAULT_BLOCK);
    let mut y = vec![R::zero(); len * e];
    for t in 0..len {
        let ct = &c[t * n..(t + 1) * n];
        for ch in 0..e {
            let base = (t * e + ch) * n;
            y[t * e + ch] = R::dot(ct, &h[base..base + n]);
        }
    }
    (y, h, abar)
}

/// Output of [`selective_scan_forward`] computed with a running state and
/// no history; for passes that never go backward.
pub fn selective_scan_streaming<R: Real>(dims: ScanDims, u: &[R], delta: &[R], a: &[R], b: &[R], c: &[R]) -> Vec<R> {
    let ScanDims { len, channels: e, state: n } = dims;
    let mut h = vec![R::zero(); e * n];
    let mut y = vec![R::zero(); len * e];
    for t in 0..len {
        let (bt, ct) = (&b[t * n..(t + 1) * n], &c[t * n..(t + 1) * n]);
        for ch in 0..e {
            let dt = delta[t * e + ch];
            let du = dt * u[t * e + ch];
            let hs = &mut h[ch * n..(ch + 1) * n];
            let mut acc = R::zero();
            for s in 0..n {
                hs[s] = (dt * a[ch * n + s]).exp() * hs[s] + du * bt[s];
                acc += ct[s] * hs[s];
            }
            y[t * e + ch] = acc;
        }
    }
    y
}

/// Gradients of the selective scan with respect to `(u, delta, a, b, c)`.
pub struct ScanGrads<R> {
    pub u: Vec<R>,
    pub delta: Vec<R>,
    pub a: Vec<R>,
    pub b: Vec<R>,
    pub c: Vec<R>,
}

#[allow(clippy::too_many_arguments)]
pub fn selective_scan_backward<R: Real>(
    dims: ScanDims,
    u: &[R],
    delta: &[R],
    a: &[R],
    b: &[R],
    c: &[R],
    h: &[R],
    abar: &[R],
    gy: &[R],
) -> ScanGrads<R> {
    let ScanDims { len, channels: e, state: n } = dims;
    let mut g = ScanGrads {
        u: vec![R::zero(); len * e],
        delta: vec![R::zero(); len * e],
        a: vec![R::zero(); e * n],
        b: vec![R::zero(); len * n],
        c: vec![R::zero(); len * n],
    };
    // dL/dh_t, carried backwards through abar.
    let mut gh = vec![R::zero(); e * n];
    for t in (0..len).rev() {
        for ch in 0..e {
            let gyv = gy[t * e + ch];
            let base = (t * e + ch) * n;
            let dt = delta[t * e + ch];
            let ut = u[t * e + ch];
            let mut g_delta = R::zero();
            let mut g_u = R::zero();
            for s in 0..n {
                let idx = ch * n + s;
                gh[idx] += c[t * n + s] * gyv;
                g.c[t * n + s] += gyv * h[base + s];
                let h_prev = if t > 0 { h[base - e * n + s] } else { R::zero() };
                let ghv = gh[idx];
                let d_abar = ghv * h_prev * abar[base + s];
                g_delta += d_abar * a[idx] + ghv * b[t * n + s] * ut;
                g.a[idx] += d_abar * dt;
                g.b[t * n + s] += ghv * dt * ut;
                g_u += ghv * dt * b[t * n + s];
                gh[idx] = ghv * abar[base + s];
            }
            g.delta[t * e + ch] += g_delta;
            g.u[t * e + ch] += g_u;
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_recurrence() {
        let h = blocked_linear_scan(&[0.5f64, 0.5, 0.5], &[1.0, 0.0, 0.0], 3, 1, 2);
        assert_eq!(h, vec![1.0, 0.5, 0.25]);
    }

    #[test]
    fn memoryless_passes_input_through() {
        let b = [0.3f32, -1.0, 2.5, 4.0];
        let h = blocked_linear_scan(&[0.0; 4], &b, 4, 1, 3);
        assert_eq!(h, b.to_vec());
    }

    #[test]
    fn empty_sequence() {
        assert!(blocked_linear_scan::<f32>(&[], &[], 0, 4, 8).is_empty());
    }
}
