//! Layer building blocks shared by the codec, the denoiser and the controller.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;

use super::graph::{AttentionSpec, BucketGrid, Graph, Var};
use super::params::{ParamId, ParamStore};
use super::Mat;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        let std = (1.0 / din as f64).sqrt();
        Self { w: store.normal(format!("{name}.w"), din, dout, std, rng), b: store.zeros(format!("{name}.b"), 1, dout) }
    }

    pub fn with_std<R: Rng>(store: &mut ParamStore, name: &str, din: usize, dout: usize, std: f64, rng: &mut R) -> Self {
        Self { w: store.normal(format!("{name}.w"), din, dout, std, rng), b: store.zeros(format!("{name}.b"), 1, dout) }
    }

    /// Zero weight and zero bias.
    pub fn zeros(store: &mut ParamStore, name: &str, din: usize, dout: usize) -> Self {
        Self { w: store.zeros(format!("{name}.w"), din, dout), b: store.zeros(format!("{name}.b"), 1, dout) }
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, p: &'p ParamStore, x: Var) -> Var {
        let w = g.param(p, self.w);
        let b = g.param(p, self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// Layer norm with learned gain and bias.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self { gain: store.filled(format!("{name}.gain"), 1, d, 1.0), bias: store.zeros(format!("{name}.bias"), 1, d) }
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, p: &'p ParamStore, x: Var) -> Var {
        let n = g.layer_norm(x);
        let gain = g.param(p, self.gain);
        let bias = g.param(p, self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    /// `[heads, buckets]` additive bias table, looked up by relative distance.
    pub rel_bias: Option<ParamId>,
}

impl Attention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rel_buckets: Option<usize>,
        rng: &mut R,
    ) -> Self {
        assert!(d % heads == 0, "width {d} not divisible by {heads} heads");
        let rel_bias = rel_buckets.map(|nb| store.normal(format!("{name}.rel_bias"), heads, nb, 0.1, rng));
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
            heads,
            rel_bias,
        }
    }

    pub fn forward<'p>(
        &self,
        g: &mut Graph<'p>,
        p: &'p ParamStore,
        x: Var,
        context: Var,
        grid: Option<&Arc<BucketGrid>>,
        key_mask: Option<&[bool]>,
    ) -> Var {
        let q = self.q.forward(g, p, x);
        let k = self.k.forward(g, p, context);
        let v = self.v.forward(g, p, context);
        let bias = match (self.rel_bias, grid) {
            (Some(id), Some(grid)) => Some((g.param(p, id), Arc::clone(grid))),
            _ => None,
        };
        let a = g.attention(q, k, v, AttentionSpec { heads: self.heads, bias, key_mask });
        self.o.forward(g, p, a)
    }
}

/// Feed-forward layer with a GeGLU activation.
#[derive(Clone, Debug)]
pub struct GeGluFfn {
    pub up: Linear,
    pub down: Linear,
}

impl GeGluFfn {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d, 2 * hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, d, rng),
        }
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, p: &'p ParamStore, x: Var) -> Var {
        let h = self.up.forward(g, p, x);
        let h = g.geglu(h);
        self.down.forward(g, p, h)
    }
}

/// Bidirectional log-bucketed relative position, with `rel = key - query`.
pub fn relative_bucket(rel: i64, num_buckets: usize, max_distance: usize) -> usize {
    let half = num_buckets / 2;
    let mut bucket = if rel > 0 { half } else { 0 };
    let n = rel.unsigned_abs() as usize;
    let max_exact = (half / 2).max(1);
    if n < max_exact {
        bucket += n;
    } else {
        let scaled = ((n as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln()
            * (half - max_exact) as f64) as usize;
        bucket += (max_exact + scaled).min(half - 1);
    }
    bucket
}

pub fn bucket_grid(queries: usize, keys: usize, num_buckets: usize, max_distance: usize) -> Arc<BucketGrid> {
    let mut index = Vec::with_capacity(queries * keys);
    for i in 0..queries {
        for j in 0..keys {
            index.push(relative_bucket(j as i64 - i as i64, num_buckets, max_distance));
        }
    }
    Arc::new(BucketGrid { queries, keys, index })
}

/// Sinusoidal features of a scalar position or time step, `[1, d]`.
pub fn sinusoidal(t: f64, d: usize) -> Mat {
    let half = d / 2;
    let mut out = Array2::zeros((1, d));
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[[0, i]] = (t * freq).sin();
        out[[0, half + i]] = (t * freq).cos();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buckets_are_in_range_and_signed() {
        for rel in -100..100 {
            let b = relative_bucket(rel, 32, 128);
            assert!(b < 32);
        }
        assert_eq!(relative_bucket(0, 32, 128), 0);
        assert_eq!(relative_bucket(-3, 32, 128), 3);
        assert_eq!(relative_bucket(3, 32, 128), 19);
        assert_ne!(relative_bucket(-1, 32, 128), relative_bucket(1, 32, 128));
    }

    #[test]
    fn sinusoidal_at_zero() {
        let e = sinusoidal(0.0, 8);
        assert_eq!(e.row(0).to_vec(), vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }
}
