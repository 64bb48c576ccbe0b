//! Temporal encoding: a stacked GRU followed by multi-head self-attention
//! over the time positions of each vehicle.
//!
//! Sequences are batched time-major: row `t·N + i` holds vehicle `i` at step
//! `t`. Attention is restricted to rows of the same vehicle, so vehicles never
//! mix here.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{glorot, Activation, Bindings, ParameterStore, Tape, Tensor2D, Var};

/// Parameter paths of one GRU layer. Row-vector convention: `x·W + h·U + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruLayer {
    pub input_dim: usize,
    pub hidden: usize,
    prefix: String,
}

impl GruLayer {
    fn path(&self, name: &str) -> String {
        format!("{}/{name}", self.prefix)
    }

    pub fn init(store: &mut ParameterStore, rng: &mut impl Rng, prefix: &str, input_dim: usize, hidden: usize) -> Result<Self> {
        let layer = Self {
            input_dim,
            hidden,
            prefix: prefix.to_string(),
        };
        for g in ["z", "r", "h"] {
            store.insert(layer.path(&format!("w_{g}")), glorot(rng, input_dim, hidden))?;
            store.insert(layer.path(&format!("u_{g}")), glorot(rng, hidden, hidden))?;
            store.insert(layer.path(&format!("b_{g}")), Tensor2D::zeros(1, hidden))?;
        }
        Ok(layer)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub layers: Vec<GruLayer>,
}

impl GruParams {
    pub fn init(
        store: &mut ParameterStore,
        rng: &mut impl Rng,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        layers: usize,
    ) -> Result<Self> {
        if layers == 0 || hidden == 0 {
            return Err(Error::Config("GRU needs ≥ 1 layer and a nonzero hidden size".into()));
        }
        let mut ls = Vec::with_capacity(layers);
        for l in 0..layers {
            let d_in = if l == 0 { input_dim } else { hidden };
            ls.push(GruLayer::init(store, rng, &format!("{prefix}/layer{l}"), d_in, hidden)?);
        }
        Ok(Self { layers: ls })
    }

    pub fn hidden(&self) -> usize {
        self.layers.last().map_or(0, |l| l.hidden)
    }
}

fn gate(tape: &mut Tape, x: Var, h: Var, layer: &GruLayer, g: &str, b: &Bindings) -> Result<Var> {
    let xw = tape.matmul(x, b.var(&layer.path(&format!("w_{g}")))?)?;
    let hu = tape.matmul(h, b.var(&layer.path(&format!("u_{g}")))?)?;
    let s = tape.add(xw, hu)?;
    tape.add_row(s, b.var(&layer.path(&format!("b_{g}")))?)
}

/// One GRU update for a batch of rows:
/// `z = σ(xW_z + hU_z + b_z)`, `r = σ(xW_r + hU_r + b_r)`,
/// `h̃ = tanh(xW_h + (r⊙h)U_h + b_h)`, `h' = (1−z)⊙h + z⊙h̃`.
pub fn gru_cell(tape: &mut Tape, x: Var, h_prev: Var, layer: &GruLayer, b: &Bindings) -> Result<Var> {
    let (bx, dx) = tape.value(x).shape();
    let (bh, dh) = tape.value(h_prev).shape();
    if dx != layer.input_dim || dh != layer.hidden || bx != bh {
        return Err(Error::Shape {
            op: "gru_cell",
            left: (bx, dx),
            right: (bh, dh),
        });
    }
    let z = gate(tape, x, h_prev, layer, "z", b)?;
    let z = tape.activation(z, Activation::Sigmoid);
    let r = gate(tape, x, h_prev, layer, "r", b)?;
    let r = tape.activation(r, Activation::Sigmoid);
    let rh = tape.mul(r, h_prev)?;
    let cand = gate(tape, x, rh, layer, "h", b)?;
    let cand = tape.activation(cand, Activation::Tanh);
    let zh = tape.mul(z, h_prev)?;
    let keep = tape.sub(h_prev, zh)?;
    let zc = tape.mul(z, cand)?;
    tape.add(keep, zc)
}

/// Runs the GRU stack over `steps` (each `B × D_in`) from a zero state and
/// returns the top layer's hidden state at every step.
pub fn gru_encode(tape: &mut Tape, steps: &[Var], p: &GruParams, b: &Bindings) -> Result<Vec<Var>> {
    if steps.is_empty() {
        return Err(Error::Empty("GRU input sequence"));
    }
    let batch = tape.value(steps[0]).rows();
    let mut seq = steps.to_vec();
    for layer in &p.layers {
        let mut h = tape.leaf(Tensor2D::zeros(batch, layer.hidden));
        let mut out = Vec::with_capacity(seq.len());
        for &x in &seq {
            h = gru_cell(tape, x, h, layer, b)?;
            out.push(h);
        }
        seq = out;
    }
    Ok(seq)
}

/// Per-head `W_Q, W_K, W_V` (`D × d_k`) plus the output projection `W^O`
/// (`M·d_k × D`).
#[derive(Clone, Debug, PartialEq)]
pub struct MhaParams {
    pub heads: usize,
    pub model_dim: usize,
    prefix: String,
}

impl MhaParams {
    pub fn init(store: &mut ParameterStore, rng: &mut impl Rng, prefix: &str, model_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || model_dim % heads != 0 {
            return Err(Error::Config(format!(
                "model dim {model_dim} not divisible by {heads} attention heads"
            )));
        }
        let p = Self {
            heads,
            model_dim,
            prefix: prefix.to_string(),
        };
        let dk = p.key_dim();
        for m in 0..heads {
            for w in ["q", "k", "v"] {
                store.insert(p.head_path(m, w), glorot(rng, model_dim, dk))?;
            }
        }
        store.insert(p.out_path(), glorot(rng, heads * dk, model_dim))?;
        Ok(p)
    }

    pub fn key_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn head_path(&self, m: usize, which: &str) -> String {
        format!("{}/head{m}/w_{which}", self.prefix)
    }

    pub fn out_path(&self) -> String {
        format!("{}/w_o", self.prefix)
    }
}

/// `Concat(head_1..head_M)·W^O` with `head_m = softmax(QKᵀ/√d_k)·V`.
/// `mask` (`rows × rows`) restricts which positions each row may attend to;
/// `None` means full attention.
pub fn multi_head_self_attention(
    tape: &mut Tape,
    seq: Var,
    p: &MhaParams,
    mask: Option<&[bool]>,
    b: &Bindings,
) -> Result<Var> {
    let (rows, d) = tape.value(seq).shape();
    if d != p.model_dim {
        return Err(Error::Shape {
            op: "multi_head_self_attention",
            left: (rows, d),
            right: (rows, p.model_dim),
        });
    }
    let scale = 1.0 / (p.key_dim() as f64).sqrt();
    let mut heads = Vec::with_capacity(p.heads);
    for m in 0..p.heads {
        let q = tape.matmul(seq, b.var(&p.head_path(m, "q"))?)?;
        let k = tape.matmul(seq, b.var(&p.head_path(m, "k"))?)?;
        let v = tape.matmul(seq, b.var(&p.head_path(m, "v"))?)?;
        let scores = tape.matmul_transposed(q, k)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax_rows(scores, mask)?;
        heads.push(tape.matmul(weights, v)?);
    }
    let cat = tape.concat_cols(&heads)?;
    tape.matmul(cat, b.var(&p.out_path())?)
}

/// Mask for a time-major batch of `n` vehicles: row `t·n + i` may attend to
/// row `s·n + j` iff `i = j`.
pub fn same_vehicle_mask(n: usize, steps: usize) -> Vec<bool> {
    let rows = n * steps;
    let mut m = vec![false; rows * rows];
    for r in 0..rows {
        for c in (r % n..rows).step_by(n) {
            m[r * rows + c] = true;
        }
    }
    m
}

/// Context row for each vehicle: the attention output at the final time
/// position. `seq` is time-major with `n` vehicles per step.
pub fn collapse_to_context(tape: &mut Tape, seq: Var, n: usize) -> Result<Var> {
    let rows = tape.value(seq).rows();
    if n == 0 || rows < n || rows % n != 0 {
        return Err(Error::Empty("temporal sequence"));
    }
    tape.slice_rows(seq, rows - n, n)
}
