//! Bipartite crop/map graph with cosine edges and a one-layer GCN.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{seeded_rng, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::ingest::CropSequence;
use crate::nn::ImageEncoder;
use crate::physmaps::PhysMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Map,
    Crop,
}

/// `2T` node rows: `T` map nodes followed by `T` crop nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatures {
    features: Array2<f64>,
}

impl NodeFeatures {
    /// Wraps precomputed features, e.g. from an external encoder.
    pub fn new(features: Array2<f64>) -> Result<Self> {
        let n = features.nrows();
        if n == 0 || !n.is_multiple_of(2) {
            return Err(Error::ShapeMismatch(format!("{n} nodes is not 2T")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation("node features".into()));
        }
        Ok(Self { features })
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn frames(&self) -> usize {
        self.features.nrows() / 2
    }

    pub fn kind(&self, node: usize) -> NodeKind {
        if node < self.frames() {
            NodeKind::Map
        } else {
            NodeKind::Crop
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    #[default]
    SeededCnn,
    /// Node features are supplied by the caller through [`NodeFeatures::new`].
    ExternalAdapter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub seed: u64,
    pub output_dim: usize,
    pub channels: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::SeededCnn,
            seed: 0,
            output_dim: 512,
            channels: vec![3, 8, 16, 32],
        }
    }
}

impl EncoderConfig {
    pub fn build(&self, store: &mut ParamStore, name: &str) -> ImageEncoder {
        let mut rng = seeded_rng(self.seed);
        ImageEncoder::new(store, &mut rng, name, &self.channels, self.output_dim)
    }
}

/// Node images as `[2T, 3, H, W]`: maps (upsampled nearest-neighbour to the
/// crop size, gray broadcast to three channels) then crops.
pub fn node_images(crops: &CropSequence, maps: &PhysMap) -> Result<(Vec<f64>, [usize; 4])> {
    let (t, h, w, c) = crops.frames().dim();
    let (mt, ms, _, mc) = maps.values.dim();
    if t != mt {
        return Err(Error::ShapeMismatch(format!(
            "{t} crop frames but {mt} map frames"
        )));
    }
    if h < ms {
        return Err(Error::ShapeMismatch(format!(
            "crops of {h}px are smaller than the {ms}px map"
        )));
    }
    let plane = h * w;
    let mut out = vec![0.0; 2 * t * c * plane];
    let frames = crops.frames();
    for f in 0..t {
        for ch in 0..c {
            let mch = if mc == 1 { 0 } else { ch };
            for i in 0..h {
                for j in 0..w {
                    let px = i * w + j;
                    out[(f * c + ch) * plane + px] =
                        maps.values[[f, i * ms / h, j * ms / w, mch]] as f64;
                    out[((t + f) * c + ch) * plane + px] = frames[[f, i, j, ch]] as f64;
                }
            }
        }
    }
    Ok((out, [2 * t, c, h, w]))
}

/// Runs each frame and each per-frame map through the same seeded encoder.
pub fn encode_nodes(
    crops: &CropSequence,
    maps: &PhysMap,
    enc: &EncoderConfig,
) -> Result<NodeFeatures> {
    if enc.kind == EncoderKind::ExternalAdapter {
        return Err(Error::Config(
            "external_adapter encoders take precomputed features via NodeFeatures::new".into(),
        ));
    }
    let (images, shape) = node_images(crops, maps)?;
    let mut store = ParamStore::new();
    let encoder = enc.build(&mut store, "node_encoder");
    let mut tape = Tape::new();
    let x = tape.constant(images, &shape);
    let y = encoder.forward(&mut tape, &store, x);
    let features = Array2::from_shape_vec((shape[0], enc.output_dim), tape.value(y).to_vec())
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    NodeFeatures::new(features)
}

/// Cosine similarity clamped to `[0, 1]`; a zero vector gives 0.
pub fn edge_weight(x1: &[f64], x2: &[f64]) -> f64 {
    assert_eq!(x1.len(), x2.len(), "edge_weight dims");
    let n1 = x1.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n2 = x2.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        log::debug!("zero feature vector, edge weight set to 0");
        return 0.0;
    }
    let dot: f64 = x1.iter().zip(x2).map(|(a, b)| a * b).sum();
    (dot / (n1 * n2)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionGraph {
    pub adjacency: Array2<f64>,
}

impl FusionGraph {
    pub fn nodes(&self) -> usize {
        self.adjacency.nrows()
    }

    /// Nonzero entries above the diagonal.
    pub fn edge_count(&self) -> usize {
        let n = self.nodes();
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.adjacency[[i, j]] != 0.0)
            .count()
    }

    /// `D^{-1/2} (A + I) D^{-1/2}` with `D` the degree matrix of `A + I`.
    pub fn normalized(&self) -> Array2<f64> {
        let n = self.nodes();
        let mut a = self.adjacency.clone();
        for i in 0..n {
            a[[i, i]] += 1.0;
        }
        let inv: Vec<f64> = a
            .rows()
            .into_iter()
            .map(|r| canonical_sum(r.iter().copied()).powf(-0.5))
            .collect();
        Array2::from_shape_fn((n, n), |(i, j)| inv[i] * a[[i, j]] * inv[j])
    }
}

/// Sum in sorted order, so the result does not depend on term order.
fn canonical_sum(terms: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = terms.collect();
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Connects every map node to every crop node.
pub fn build_graph(nf: &NodeFeatures) -> FusionGraph {
    let t = nf.frames();
    let x = nf.features();
    let mut adjacency = Array2::zeros((2 * t, 2 * t));
    for i in 0..t {
        let mi = x.row(i);
        for j in t..2 * t {
            let w = edge_weight(mi.as_slice().unwrap(), x.row(j).as_slice().unwrap());
            adjacency[[i, j]] = w;
            adjacency[[j, i]] = w;
        }
    }
    FusionGraph { adjacency }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    pub weight: Array2<f64>,
    pub activation: Activation,
}

/// `act(Â H W)`.
pub fn gcn_forward(g: &FusionGraph, nf: &NodeFeatures, p: &GcnParams) -> Result<Array2<f64>> {
    if g.nodes() != nf.features.nrows() || nf.features.ncols() != p.weight.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "graph of {} nodes, features {:?}, weight {:?}",
            g.nodes(),
            nf.features.dim(),
            p.weight.dim()
        )));
    }
    // Neighbour sums use a canonical order, which keeps the layer exactly
    // equivariant under node permutations.
    let a = g.normalized();
    let h = &nf.features;
    let (n, d) = h.dim();
    let ah = Array2::from_shape_fn((n, d), |(i, k)| {
        canonical_sum((0..n).map(|j| a[[i, j]] * h[[j, k]]))
    });
    // Row by row rather than a blocked product, so each output row depends
    // only on its input row.
    let w = &p.weight;
    let mut out = Array2::from_shape_fn((n, w.ncols()), |(i, o)| {
        (0..d).map(|k| ah[[i, k]] * w[[k, o]]).sum::<f64>()
    });
    if p.activation == Activation::Relu {
        out.mapv_inplace(|v| v.max(0.0));
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteActivation("gcn output".into()));
    }
    Ok(out)
}

/// Normalized adjacency built on the tape from node features `h: [2T, d]`,
/// so gradients flow through the edge weights.
pub fn normalized_adjacency_tape(t: &mut Tape<'_>, h: Var) -> Var {
    let n = t.shape(h)[0];
    let half = n / 2;
    let hn = t.row_normalize(h);
    let ht = t.transpose(hn);
    let sim = t.matmul(hn, ht);
    let sim = t.relu(sim);
    let sim = t.clamp_max(sim, 1.0);
    let mask: Vec<f64> = (0..n * n)
        .map(|k| {
            if (k / n < half) != (k % n < half) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let mask = t.constant(mask, &[n, n]);
    let a = t.mul(sim, mask);
    let eye: Vec<f64> = (0..n * n)
        .map(|k| if k / n == k % n { 1.0 } else { 0.0 })
        .collect();
    let eye = t.constant(eye, &[n, n]);
    let a = t.add(a, eye);
    let deg = t.row_sum(a);
    let inv = t.pow(deg, -0.5);
    t.diag_scale(a, inv)
}

/// Normalized adjacency from current feature values, as a constant.
pub fn normalized_adjacency_const(t: &mut Tape<'_>, h: Var) -> Result<Var> {
    let shape = t.shape(h).to_vec();
    let features = Array2::from_shape_vec((shape[0], shape[1]), t.value(h).to_vec())
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let graph = build_graph(&NodeFeatures::new(features)?);
    let n = graph.nodes();
    Ok(t.constant(graph.normalized().into_raw_vec_and_offset().0, &[n, n]))
}

/// `relu(adj h w)` on the tape.
pub fn gcn_tape(t: &mut Tape<'_>, adj: Var, h: Var, w: Var) -> Var {
    let ah = t.matmul(adj, h);
    let y = t.matmul(ah, w);
    t.relu(y)
}

/// Which node embeddings are appended to the video feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConcatMode {
    #[default]
    Crops,
    All,
    Mean,
}

impl ConcatMode {
    pub fn width(self, frames: usize, gcn_out: usize) -> usize {
        match self {
            ConcatMode::Crops => frames * gcn_out,
            ConcatMode::All => 2 * frames * gcn_out,
            ConcatMode::Mean => gcn_out,
        }
    }
}

/// Selects the node embeddings to concatenate, on the tape.
pub fn select_nodes_tape(t: &mut Tape<'_>, emb: Var, mode: ConcatMode) -> Var {
    let n = t.shape(emb)[0];
    match mode {
        ConcatMode::Crops => t.slice_rows(emb, n / 2, n / 2),
        ConcatMode::All => emb,
        ConcatMode::Mean => {
            let crops = t.slice_rows(emb, n / 2, n / 2);
            t.mean_rows(crops)
        }
    }
}

/// Trainable projection applied to `[f_v_raw ‖ nodes]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FuseProjection {
    pub weight: Array2<f64>,
    pub bias: Vec<f64>,
}

/// `[f_v_raw ‖ selected node embeddings] · W + b`.
pub fn fuse(
    f_v_raw: &[f64],
    node_emb: ArrayView2<'_, f64>,
    mode: ConcatMode,
    proj: &FuseProjection,
) -> Result<Vec<f64>> {
    let n = node_emb.nrows();
    if !n.is_multiple_of(2) {
        return Err(Error::ShapeMismatch(format!(
            "{n} node embeddings is not 2T"
        )));
    }
    let mut input = f_v_raw.to_vec();
    match mode {
        ConcatMode::Crops => input.extend(node_emb.slice(ndarray::s![n / 2.., ..]).iter()),
        ConcatMode::All => input.extend(node_emb.iter()),
        ConcatMode::Mean => {
            let crops = node_emb.slice(ndarray::s![n / 2.., ..]);
            input.extend(crops.mean_axis(ndarray::Axis(0)).unwrap().iter());
        }
    }
    if input.len() != proj.weight.nrows() || proj.bias.len() != proj.weight.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "fused input of {} values against projection {:?}",
            input.len(),
            proj.weight.dim()
        )));
    }
    let out = ndarray::Array1::from(input).dot(&proj.weight);
    Ok(out.iter().zip(&proj.bias).map(|(a, b)| a + b).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physmaps::{MapMode, Signal};
    use ndarray::{array, Array4};

    #[test]
    fn cosine_examples() {
        assert!((edge_weight(&[1.0, 0.0], &[1.0, 1.0]) - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(edge_weight(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert_eq!(edge_weight(&[1.0, 0.0], &[-1.0, 0.0]), 0.0);
        assert_eq!(edge_weight(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((edge_weight(&[0.3, -2.0, 5.0], &[0.3, -2.0, 5.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn two_node_propagation() {
        let nf = NodeFeatures::new(array![[1.0], [2.0]]).unwrap();
        let g = build_graph(&nf);
        assert_eq!(g.adjacency, array![[0.0, 1.0], [1.0, 0.0]]);
        let p = GcnParams {
            weight: array![[1.0]],
            activation: Activation::Identity,
        };
        let out = gcn_forward(&g, &nf, &p).unwrap();
        assert!((out[[0, 0]] - 1.5).abs() < 1e-15 && (out[[1, 0]] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn bipartite_edge_count() {
        let nf = NodeFeatures::new(Array2::from_elem((4, 3), 1.0)).unwrap();
        let g = build_graph(&nf);
        assert_eq!(g.edge_count(), 4);
        assert_eq!(g.adjacency[[0, 1]], 0.0);
        assert_eq!(g.adjacency[[2, 3]], 0.0);
        assert_eq!(g.adjacency[[0, 2]], 1.0);
    }

    #[test]
    fn tape_adjacency_matches_dense() {
        let feats = Array2::from_shape_fn((6, 4), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 1.5);
        let nf = NodeFeatures::new(feats.clone()).unwrap();
        let dense = build_graph(&nf).normalized();
        let mut t = Tape::new();
        let h = t.constant(feats.into_raw_vec_and_offset().0, &[6, 4]);
        let a = normalized_adjacency_tape(&mut t, h);
        for (x, y) in t.value(a).iter().zip(dense.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_nodes_shape_and_determinism() {
        let crops = CropSequence::new(Array4::from_elem((3, 12, 12, 3), 0.4), 30.0).unwrap();
        let maps = PhysMap::all_ones(3, 12, Signal::Hr, MapMode::Gray);
        let enc = EncoderConfig {
            output_dim: 8,
            ..Default::default()
        };
        let a = encode_nodes(&crops, &maps, &enc).unwrap();
        assert_eq!(a.features().dim(), (6, 8));
        assert_eq!(a, encode_nodes(&crops, &maps, &enc).unwrap());
        assert_eq!(a.features().row(3), a.features().row(4));
        assert_eq!(a.kind(2), NodeKind::Map);
        assert_eq!(a.kind(3), NodeKind::Crop);
    }

    #[test]
    fn fuse_dimensions() {
        let proj = FuseProjection {
            weight: Array2::zeros((512 + 480, 512)),
            bias: vec![0.0; 512],
        };
        let emb = Array2::zeros((60, 16));
        let out = fuse(&[0.0; 512], emb.view(), ConcatMode::Crops, &proj).unwrap();
        assert_eq!(out.len(), 512);
        assert_eq!(ConcatMode::Crops.width(25, 16), 400);
        assert!(fuse(&[0.0; 512], emb.view(), ConcatMode::All, &proj).is_err());
    }
}
