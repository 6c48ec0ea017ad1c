//! Layers built on the autodiff tape.

pub mod attention;

pub use attention::{AttentionConfig, AttentionLayer, EntityEmbeddings, SaqaOutput};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::params::{ParamId, ParamStore};
use rand::Rng;

/// Affine map `x W (+ b)` with fan-in uniform init.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), d_in, d_out, d_in, rng);
        let bias =
            with_bias.then(|| store.add_uniform(format!("{name}.bias"), 1, d_out, d_in, rng));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        if g.value(x).cols() != self.d_in {
            return Err(shape_err(
                "linear",
                format!("input width {} but layer expects {}", g.value(x).cols(), self.d_in),
            ));
        }
        let w = g.bind(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.bind(store, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// GRU cell with gates ordered (reset, update, candidate):
///
/// ```text
/// r  = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
/// z  = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
/// n  = tanh(x W_in + b_in + r * (h W_hn + b_hn))
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub b_input: ParamId,
    pub b_hidden: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w_input: store.add_uniform(format!("{name}.w_input"), d_in, 3 * hidden, hidden, rng),
            w_hidden: store.add_uniform(format!("{name}.w_hidden"), hidden, 3 * hidden, hidden, rng),
            b_input: store.add_uniform(format!("{name}.b_input"), 1, 3 * hidden, hidden, rng),
            b_hidden: store.add_uniform(format!("{name}.b_hidden"), 1, 3 * hidden, hidden, rng),
            d_in,
            hidden,
        }
    }

    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, h_prev: Var) -> Result<Var> {
        let (rows, xin) = g.value(x).dims();
        let (hrows, hd) = g.value(h_prev).dims();
        if xin != self.d_in || hd != self.hidden || rows != hrows {
            return Err(shape_err(
                "gru_step",
                format!(
                    "x [{rows}, {xin}] h [{hrows}, {hd}] for cell {}->{}",
                    self.d_in, self.hidden
                ),
            ));
        }
        let d = self.hidden;
        let wi = g.bind(store, self.w_input);
        let wh = g.bind(store, self.w_hidden);
        let bi = g.bind(store, self.b_input);
        let bh = g.bind(store, self.b_hidden);
        let gi = g.matmul(x, wi)?;
        let gi = g.add_row(gi, bi)?;
        let gh = g.matmul(h_prev, wh)?;
        let gh = g.add_row(gh, bh)?;

        let gi_r = g.slice_cols(gi, 0, d)?;
        let gh_r = g.slice_cols(gh, 0, d)?;
        let r = g.add(gi_r, gh_r)?;
        let r = g.sigmoid(r);

        let gi_z = g.slice_cols(gi, d, d)?;
        let gh_z = g.slice_cols(gh, d, d)?;
        let z = g.add(gi_z, gh_z)?;
        let z = g.sigmoid(z);

        let gi_n = g.slice_cols(gi, 2 * d, d)?;
        let gh_n = g.slice_cols(gh, 2 * d, d)?;
        let rn = g.mul(r, gh_n)?;
        let n = g.add(gi_n, rn)?;
        let n = g.tanh(n);

        // h' = n + z * (h - n)
        let diff = g.sub(h_prev, n)?;
        let zd = g.mul(z, diff)?;
        g.add(n, zd)
    }
}
