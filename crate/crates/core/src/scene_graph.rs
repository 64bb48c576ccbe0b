//! Per-frame interaction graphs and the multi-head graph attention stack.
//!
//! Vehicles within `radius` metres of each other (strictly) are neighbors and
//! every vehicle is its own neighbor. Attention scores are only evaluated on
//! existing edges, so the work per frame is `Σ|N_i|` rather than `N²`.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{glorot, Activation, Bindings, NeighborLists, ParameterStore, Tape, Tensor2D, Var, LEAKY_SLOPE};

/// Number of per-vehicle input channels:
/// `x, y, vx, vy, ax, ay, length, width`.
pub const FEATURE_DIM: usize = 8;

/// One tracked vehicle at one instant. Positions in metres, velocities in
/// m/s, accelerations in m/s², footprint in metres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleObservation {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub ax: f64,
    pub ay: f64,
    pub length: f64,
    pub width: f64,
}

impl VehicleObservation {
    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn velocity(&self) -> [f64; 2] {
        [self.vx, self.vy]
    }

    pub fn acceleration(&self) -> [f64; 2] {
        [self.ax, self.ay]
    }

    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }

    fn values(&self) -> [f64; FEATURE_DIM] {
        [
            self.x,
            self.y,
            self.vx,
            self.vy,
            self.ax,
            self.ay,
            self.length,
            self.width,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFrame {
    pub timestamp: f64,
    pub vehicles: Vec<VehicleObservation>,
}

impl SceneFrame {
    pub fn len(&self) -> usize {
        self.vehicles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vehicles.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.vehicles.is_empty() {
            return Err(Error::Empty("scene frame"));
        }
        for v in &self.vehicles {
            if !v.values().iter().all(|x| x.is_finite()) || !self.timestamp.is_finite() {
                return Err(Error::NonFinite(format!("vehicle {} at t={}", v.id, self.timestamp)));
            }
            if v.length <= 0.0 || v.width <= 0.0 {
                return Err(Error::range(
                    "vehicle footprint",
                    format!("vehicle {}: {}×{}", v.id, v.length, v.width),
                ));
            }
        }
        Ok(())
    }

    /// `N × 8` feature matrix with positions taken relative to `origin`.
    pub fn features(&self, origin: [f64; 2]) -> Tensor2D {
        let mut t = Tensor2D::zeros(self.vehicles.len(), FEATURE_DIM);
        for (i, v) in self.vehicles.iter().enumerate() {
            let mut vals = v.values();
            vals[0] -= origin[0];
            vals[1] -= origin[1];
            t.row_mut(i).copy_from_slice(&vals);
        }
        t
    }

    pub fn centroid(&self) -> [f64; 2] {
        let n = self.vehicles.len().max(1) as f64;
        let (sx, sy) = self
            .vehicles
            .iter()
            .fold((0.0, 0.0), |(sx, sy), v| (sx + v.x, sy + v.y));
        [sx / n, sy / n]
    }
}

/// Symmetric binary adjacency with self-loops.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdjacencyMatrix {
    n: usize,
    entries: Vec<bool>,
}

impl AdjacencyMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.entries[i * self.n + j]
    }

    pub fn as_mask(&self) -> &[bool] {
        &self.entries
    }

    /// Directed edge count `Σ|N_i|`, self-loops included.
    pub fn edge_count(&self) -> usize {
        self.entries.iter().filter(|&&e| e).count()
    }

    pub fn neighbor_lists(&self) -> NeighborLists {
        let lists: Vec<Vec<usize>> = (0..self.n)
            .map(|i| (0..self.n).filter(|&j| self.get(i, j)).collect())
            .collect();
        NeighborLists::new(&lists)
    }
}

/// Radius graph over vehicle reference points; strict `<` at the radius.
pub fn build_adjacency(frame: &SceneFrame, radius: f64) -> Result<AdjacencyMatrix> {
    if !(radius > 0.0) {
        return Err(Error::range("neighborhood radius", radius.to_string()));
    }
    let n = frame.vehicles.len();
    let mut entries = vec![false; n * n];
    for i in 0..n {
        entries[i * n + i] = true;
        let a = &frame.vehicles[i];
        for j in (i + 1)..n {
            let b = &frame.vehicles[j];
            if (a.x - b.x).hypot(a.y - b.y) < radius {
                entries[i * n + j] = true;
                entries[j * n + i] = true;
            }
        }
    }
    Ok(AdjacencyMatrix { n, entries })
}

/// `H⁰ = ELU(X·W_e + b_e)`.
pub fn embed_frame(tape: &mut Tape, x: Var, w_e: Var, b_e: Var) -> Result<Var> {
    let y = tape.linear(x, w_e, Some(b_e))?;
    Ok(tape.activation(y, Activation::Elu))
}

/// How a layer merges its attention heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Combine {
    Concat,
    Average,
}

/// Parameter paths of one attention head: `w` is `D_in × D_out`, `a` is
/// `2·D_out × 1` (destination half first).
#[derive(Clone, Debug, PartialEq)]
pub struct GatHead {
    pub w: String,
    pub a: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatLayerParams {
    pub heads: Vec<GatHead>,
    pub combine: Combine,
    pub input_dim: usize,
    pub head_dim: usize,
}

impl GatLayerParams {
    pub fn output_dim(&self) -> usize {
        match self.combine {
            Combine::Concat => self.heads.len() * self.head_dim,
            Combine::Average => self.head_dim,
        }
    }

    /// Registers freshly initialised head parameters under `prefix`.
    pub fn init(
        store: &mut ParameterStore,
        rng: &mut impl Rng,
        prefix: &str,
        input_dim: usize,
        output_dim: usize,
        heads: usize,
        combine: Combine,
    ) -> Result<Self> {
        if heads == 0 {
            return Err(Error::Config("attention head count must be ≥ 1".into()));
        }
        let head_dim = match combine {
            Combine::Concat if output_dim % heads != 0 => {
                return Err(Error::Config(format!(
                    "concat layer: output dim {output_dim} not divisible by {heads} heads"
                )))
            }
            Combine::Concat => output_dim / heads,
            Combine::Average => output_dim,
        };
        let mut hs = Vec::with_capacity(heads);
        for k in 0..heads {
            let head = GatHead {
                w: format!("{prefix}/head{k}/w"),
                a: format!("{prefix}/head{k}/a"),
            };
            store.insert(&head.w, glorot(rng, input_dim, head_dim))?;
            store.insert(&head.a, glorot(rng, 2 * head_dim, 1))?;
            hs.push(head);
        }
        Ok(Self {
            heads: hs,
            combine,
            input_dim,
            head_dim,
        })
    }
}

/// Attention weights of one head over the edges of `graph` (`E × 1`) and the
/// transformed features `W·h` (`N × D_out`).
pub fn head_attention(
    tape: &mut Tape,
    h: Var,
    graph: &Arc<NeighborLists>,
    head: &GatHead,
    bindings: &Bindings,
) -> Result<(Var, Var)> {
    let w = bindings.var(&head.w)?;
    let a = bindings.var(&head.a)?;
    let z = tape.matmul(h, w)?;
    let d = tape.value(z).cols();
    if tape.value(a).shape() != (2 * d, 1) {
        return Err(Error::Shape {
            op: "gat attention vector",
            left: tape.value(a).shape(),
            right: (2 * d, 1),
        });
    }
    let a_dst = tape.slice_rows(a, 0, d)?;
    let a_src = tape.slice_rows(a, d, d)?;
    let s_dst = tape.matmul(z, a_dst)?;
    let s_src = tape.matmul(z, a_src)?;
    let alpha = tape.edge_softmax(s_dst, s_src, graph, LEAKY_SLOPE)?;
    Ok((alpha, z))
}

/// One multi-head GAT layer: each head aggregates `Σ_j α_ij W h_j`; concat
/// layers apply ELU per head then concatenate, average layers average the
/// heads then apply ELU.
pub fn gat_layer_forward(
    tape: &mut Tape,
    h: Var,
    graph: &Arc<NeighborLists>,
    layer: &GatLayerParams,
    bindings: &Bindings,
) -> Result<Var> {
    let (n, d) = tape.value(h).shape();
    if n != graph.nodes() || d != layer.input_dim {
        return Err(Error::Shape {
            op: "gat_layer_forward",
            left: (n, d),
            right: (graph.nodes(), layer.input_dim),
        });
    }
    let mut outs = Vec::with_capacity(layer.heads.len());
    for head in &layer.heads {
        let (alpha, z) = head_attention(tape, h, graph, head, bindings)?;
        outs.push(tape.edge_aggregate(alpha, z, graph)?);
    }
    match layer.combine {
        Combine::Concat => {
            let acts: Vec<Var> = outs
                .into_iter()
                .map(|o| tape.activation(o, Activation::Elu))
                .collect();
            tape.concat_cols(&acts)
        }
        Combine::Average => {
            let k = outs.len() as f64;
            let mut acc = outs[0];
            for &o in &outs[1..] {
                acc = tape.add(acc, o)?;
            }
            let mean = tape.scale(acc, 1.0 / k);
            Ok(tape.activation(mean, Activation::Elu))
        }
    }
}

/// Dense `N × N` attention weights of a single head (zeros off-graph).
pub fn gat_attention(h: &Tensor2D, adj: &AdjacencyMatrix, w: &Tensor2D, a: &Tensor2D) -> Result<Tensor2D> {
    if adj.n() != h.rows() {
        return Err(Error::Shape {
            op: "gat_attention",
            left: h.shape(),
            right: (adj.n(), adj.n()),
        });
    }
    let mut store = ParameterStore::new();
    store.insert("w", w.clone())?;
    store.insert("a", a.clone())?;
    let mut tape = Tape::new();
    let b = tape.bind(&store);
    let hv = tape.leaf(h.clone());
    let graph = Arc::new(adj.neighbor_lists());
    let head = GatHead {
        w: "w".into(),
        a: "a".into(),
    };
    let (alpha, _) = head_attention(&mut tape, hv, &graph, &head, &b)?;
    let mut dense = Tensor2D::zeros(adj.n(), adj.n());
    for i in 0..adj.n() {
        for e in graph.edges_of(i) {
            dense.set(i, graph.target(e), tape.value(alpha).data()[e]);
        }
    }
    Ok(dense)
}

/// Stack of GAT layers: hidden layers concatenate heads, the last averages,
/// so every layer maps `D_h → D_h`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatStack {
    pub layers: Vec<GatLayerParams>,
}

impl GatStack {
    pub fn init(
        store: &mut ParameterStore,
        rng: &mut impl Rng,
        prefix: &str,
        dim: usize,
        layers: usize,
        heads: usize,
    ) -> Result<Self> {
        let mut ls = Vec::with_capacity(layers);
        for l in 0..layers {
            let combine = if l + 1 == layers {
                Combine::Average
            } else {
                Combine::Concat
            };
            ls.push(GatLayerParams::init(
                store,
                rng,
                &format!("{prefix}/layer{l}"),
                dim,
                dim,
                heads,
                combine,
            )?);
        }
        Ok(Self { layers: ls })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        h: Var,
        graph: &Arc<NeighborLists>,
        bindings: &Bindings,
    ) -> Result<Var> {
        let mut h = h;
        for layer in &self.layers {
            h = gat_layer_forward(tape, h, graph, layer, bindings)?;
        }
        Ok(h)
    }
}
