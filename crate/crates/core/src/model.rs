//! The heterogeneous point set transformer.
//!
//! A UNet over point sets. The encoder runs `n` stages of `m` attention
//! blocks, each stage followed by per-view voxel pooling; the decoder runs
//! `n` stages, each starting with an unpool that restores the coordinates of
//! the matching encoder stage and concatenates its features. Widths double
//! per encoder stage and halve per decoder stage.
//!
//! Every block mixes two attention paths over the same normalized input:
//! intra-view attention (scaled dot product plus a relative-position term
//! from the coordinate difference) and inter-view attention (scaled dot
//! product only, with projections specific to the ordered view pair).
//! Neighbor graphs are rebuilt at every resolution.
//!
//! Parameter layout for width `d` of one block (`16d² + 23d + 1` scalars
//! with inter-view attention, `8d² + 15d + 1` without):
//!
//! | path                               | shape         |
//! |------------------------------------|---------------|
//! | `ln_attn/{gain,shift}`             | `[d]`         |
//! | `intra/{q,k,v,o}/w`, `.../b`       | `[d,d]`, `[d]`|
//! | `intra/rpe1/w`, `intra/rpe1/b`     | `[2,d]`, `[d]`|
//! | `intra/rpe2/w`, `intra/rpe2/b`     | `[d,1]`, `[1]`|
//! | `inter01/{q,k,v,o}/...` (0 -> 1)   | as intra      |
//! | `inter10/{q,k,v,o}/...` (1 -> 0)   | as intra      |
//! | `ln_mlp/{gain,shift}`              | `[d]`         |
//! | `mlp1/w`, `mlp1/b`                 | `[d,2d]`, `[2d]` |
//! | `mlp2/w`, `mlp2/b`                 | `[2d,d]`, `[d]`  |
//!
//! Outside the blocks: `embed` (`[3,base]`), `enc{s}/up` (`[w/2,w]`, s ≥ 1),
//! `dec{t}/unpool` (`[w_in+w, w]`), `sem_head` (`[base,C]`) and `ins_head`
//! (`[base,S]`), each with a bias.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::event::{Event, GRID_PLANES, GRID_TRANSVERSE};
use crate::graph::{knn_inter, knn_intra, voxel_assign, EdgeSet, VoxelAssignment};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
    #[error("missing parameter {0}")]
    MissingParameter(String),
    #[error("pool record holds {expected} groups, pooled features have {found} rows")]
    RecordMismatch { expected: usize, found: usize },
}

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    /// Half depth; the UNet has `2n` stages.
    pub n: usize,
    /// Attention blocks per stage.
    pub m: usize,
    pub base_dim: usize,
    pub k_nn: usize,
    /// Voxel edge at the first pooling step, doubled at each further one.
    pub base_voxel_size: f64,
    pub n_classes: usize,
    pub instance_slots: usize,
    /// Inter-view attention in every block; `false` gives the view-separated
    /// ablation.
    pub inter_view: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            n: 2,
            m: 1,
            base_dim: 32,
            k_nn: 8,
            base_voxel_size: 2.0,
            n_classes: 6,
            instance_slots: 8,
            inter_view: true,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidHyper(m.into()));
        if self.n < 1 {
            return bad("n must be at least 1");
        }
        if self.m < 1 {
            return bad("m must be at least 1");
        }
        if self.base_dim < 2 || self.base_dim % 2 != 0 {
            return bad("base_dim must be even and positive");
        }
        if self.k_nn < 1 {
            return bad("k_nn must be at least 1");
        }
        if !(self.base_voxel_size > 0.0 && self.base_voxel_size.is_finite()) {
            return bad("base_voxel_size must be positive");
        }
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2");
        }
        if self.instance_slots < 1 {
            return bad("instance_slots must be at least 1");
        }
        Ok(())
    }

    /// Feature width at resolution level `level` (0 = input resolution).
    pub fn width(&self, level: usize) -> usize {
        self.base_dim << level
    }

    pub fn voxel_size(&self, level: usize) -> f64 {
        self.base_voxel_size * (1u64 << level) as f64
    }

    /// Flat `(key, value)` view used by checkpoints.
    pub fn to_pairs(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("n", self.n as f64),
            ("m", self.m as f64),
            ("base_dim", self.base_dim as f64),
            ("k_nn", self.k_nn as f64),
            ("base_voxel_size", self.base_voxel_size),
            ("n_classes", self.n_classes as f64),
            ("instance_slots", self.instance_slots as f64),
            ("inter_view", if self.inter_view { 1.0 } else { 0.0 }),
        ]
    }

    pub fn from_pairs(pairs: &[(String, f64)]) -> Result<Self> {
        let map: HashMap<&str, f64> = pairs.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        let get = |k: &str| {
            map.get(k)
                .copied()
                .ok_or_else(|| ModelError::InvalidHyper(format!("missing key {k}")))
        };
        let count = |k: &str| -> Result<usize> {
            let v = get(k)?;
            if v < 0.0 || v.fract() != 0.0 || v > 1e9 {
                return Err(ModelError::InvalidHyper(format!(
                    "{k} = {v} is not a count"
                )));
            }
            Ok(v as usize)
        };
        if map.len() != 8 {
            return Err(ModelError::InvalidHyper(format!(
                "expected 8 keys, found {}",
                map.len()
            )));
        }
        let h = Self {
            n: count("n")?,
            m: count("m")?,
            base_dim: count("base_dim")?,
            k_nn: count("k_nn")?,
            base_voxel_size: get("base_voxel_size")?,
            n_classes: count("n_classes")?,
            instance_slots: count("instance_slots")?,
            inter_view: get("inter_view")? != 0.0,
        };
        h.validate()?;
        Ok(h)
    }
}

fn linear_shapes(out: &mut Vec<(String, Vec<usize>)>, path: &str, din: usize, dout: usize) {
    out.push((format!("{path}/w"), vec![din, dout]));
    out.push((format!("{path}/b"), vec![dout]));
}

fn block_shapes(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, d: usize, inter: bool) {
    for ln in ["ln_attn", "ln_mlp"] {
        out.push((format!("{prefix}/{ln}/gain"), vec![d]));
        out.push((format!("{prefix}/{ln}/shift"), vec![d]));
    }
    let mut attn = vec!["intra"];
    if inter {
        attn.extend(["inter01", "inter10"]);
    }
    for a in attn {
        for role in ["q", "k", "v", "o"] {
            linear_shapes(out, &format!("{prefix}/{a}/{role}"), d, d);
        }
    }
    linear_shapes(out, &format!("{prefix}/intra/rpe1"), 2, d);
    linear_shapes(out, &format!("{prefix}/intra/rpe2"), d, 1);
    linear_shapes(out, &format!("{prefix}/mlp1"), d, 2 * d);
    linear_shapes(out, &format!("{prefix}/mlp2"), 2 * d, d);
}

/// Every parameter the forward pass reads, with its shape, in forward order.
pub fn parameter_shapes(h: &HyperParams) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    linear_shapes(&mut out, "embed", 3, h.width(0));
    for s in 0..h.n {
        if s > 0 {
            linear_shapes(&mut out, &format!("enc{s}/up"), h.width(s - 1), h.width(s));
        }
        for b in 0..h.m {
            block_shapes(
                &mut out,
                &format!("enc{s}/blk{b}"),
                h.width(s),
                h.inter_view,
            );
        }
    }
    for t in 0..h.n {
        let level = h.n - 1 - t;
        let w_in = if t == 0 {
            h.width(h.n - 1)
        } else {
            h.width(level + 1)
        };
        linear_shapes(
            &mut out,
            &format!("dec{t}/unpool"),
            w_in + h.width(level),
            h.width(level),
        );
        for b in 0..h.m {
            block_shapes(
                &mut out,
                &format!("dec{t}/blk{b}"),
                h.width(level),
                h.inter_view,
            );
        }
    }
    linear_shapes(&mut out, "sem_head", h.width(0), h.n_classes);
    linear_shapes(&mut out, "ins_head", h.width(0), h.instance_slots);
    out
}

/// All learned tensors, keyed by parameter path.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModelWeights {
    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.tensors.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(path)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Checks that the set of paths and shapes is exactly what `h` needs.
    pub fn check_against(&self, h: &HyperParams) -> std::result::Result<(), String> {
        let expected = parameter_shapes(h);
        if expected.len() != self.tensors.len() {
            return Err(format!(
                "expected {} tensors, found {}",
                expected.len(),
                self.tensors.len()
            ));
        }
        for (path, shape) in expected {
            match self.tensors.get(&path) {
                None => return Err(format!("missing tensor {path}")),
                Some(t) if t.shape != shape => {
                    return Err(format!(
                        "tensor {path} has shape {:?}, expected {shape:?}",
                        t.shape
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Records every tensor on `tape`, as parameters or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    tape.param(t)
                } else {
                    tape.constant(t)
                };
                (k.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }
}

/// Deterministic initialization: Glorot-uniform weights, zero biases, unit
/// layer-norm gains.
pub fn init_weights(h: &HyperParams, seed: u64) -> Result<ModelWeights> {
    h.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for (path, shape) in parameter_shapes(h) {
        let t = if path.ends_with("/w") {
            let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
            let n = shape[0] * shape[1];
            Tensor::new(
                shape,
                (0..n).map(|_| rng.random_range(-limit..limit)).collect(),
            )?
        } else if path.ends_with("/gain") {
            Tensor::filled(shape, 1.0)
        } else {
            Tensor::zeros(shape)
        };
        tensors.insert(path, t);
    }
    Ok(ModelWeights { tensors })
}

/// Tape handles for every parameter path.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, path: &str) -> Result<Var> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| ModelError::MissingParameter(path.to_string()))
    }

    fn has(&self, path: &str) -> bool {
        self.vars.contains_key(path)
    }

    fn linear(&self, tape: &mut Tape, x: Var, path: &str) -> Result<Var> {
        let w = self.get(&format!("{path}/w"))?;
        let b = self.get(&format!("{path}/b"))?;
        Ok(tape.linear(x, w, Some(b))?)
    }

    fn layer_norm(&self, tape: &mut Tape, x: Var, path: &str) -> Result<Var> {
        let g = self.get(&format!("{path}/gain"))?;
        let s = self.get(&format!("{path}/shift"))?;
        Ok(tape.layer_norm(x, g, s)?)
    }
}

fn zeros(tape: &mut Tape, rows: usize, cols: usize) -> Var {
    tape.constant_matrix(rows, cols, vec![0.0; rows * cols])
}

/// Intra-view attention for one view.
///
/// Per edge `k' -> k` the logit is `q_k·k_k' / sqrt(d) + r((x_k - x_k') / scale)`
/// with `r` a 2 -> d -> 1 ReLU network. Points without neighbors get zeros.
pub fn intra_attention(
    tape: &mut Tape,
    features: Var,
    coords: &[[f64; 2]],
    edges: &EdgeSet,
    params: &BoundParams,
    prefix: &str,
    rpe_scale: f64,
) -> Result<Var> {
    let (k, d) = tape.shape(features);
    if edges.n_edges() == 0 {
        return Ok(zeros(tape, k, d));
    }
    let (dst, src) = edges.edge_index();
    let q = params.linear(tape, features, &format!("{prefix}/q"))?;
    let kk = params.linear(tape, features, &format!("{prefix}/k"))?;
    let v = params.linear(tape, features, &format!("{prefix}/v"))?;
    let qg = tape.gather(q, dst.clone())?;
    let kg = tape.gather(kk, src.clone())?;
    let vg = tape.gather(v, src.clone())?;
    let dotp = tape.row_dot(qg, kg)?;
    let scaled = tape.scale(dotp, 1.0 / (d as f64).sqrt())?;

    let rel: Vec<f64> = dst
        .iter()
        .zip(&src)
        .flat_map(|(&a, &b)| {
            [
                (coords[a][0] - coords[b][0]) / rpe_scale,
                (coords[a][1] - coords[b][1]) / rpe_scale,
            ]
        })
        .collect();
    let rel = tape.constant_matrix(dst.len(), 2, rel);
    let hidden = params.linear(tape, rel, &format!("{prefix}/rpe1"))?;
    let hidden = tape.relu(hidden)?;
    let bias = params.linear(tape, hidden, &format!("{prefix}/rpe2"))?;
    let logits = tape.add(scaled, bias)?;

    let dst: std::rc::Rc<[usize]> = dst.into();
    let attn = tape.segment_softmax(logits, dst.clone(), k)?;
    let weighted = tape.scale_rows(vg, attn)?;
    Ok(tape.segment_sum(weighted, dst, k)?)
}

/// Inter-view attention into the destination view. Queries come from the
/// destination features, keys and values from the source view, all through
/// the projections of this ordered pair. No relative-position term.
pub fn inter_attention(
    tape: &mut Tape,
    dst_features: Var,
    src_features: Var,
    edges: &EdgeSet,
    params: &BoundParams,
    prefix: &str,
) -> Result<Var> {
    let (k, d) = tape.shape(dst_features);
    if edges.n_edges() == 0 {
        return Ok(zeros(tape, k, d));
    }
    let (dst, src) = edges.edge_index();
    let q = params.linear(tape, dst_features, &format!("{prefix}/q"))?;
    let kk = params.linear(tape, src_features, &format!("{prefix}/k"))?;
    let v = params.linear(tape, src_features, &format!("{prefix}/v"))?;
    let qg = tape.gather(q, dst.clone())?;
    let kg = tape.gather(kk, src.clone())?;
    let vg = tape.gather(v, src)?;
    let dotp = tape.row_dot(qg, kg)?;
    let logits = tape.scale(dotp, 1.0 / (d as f64).sqrt())?;
    let dst: std::rc::Rc<[usize]> = dst.into();
    let attn = tape.segment_softmax(logits, dst.clone(), k)?;
    let weighted = tape.scale_rows(vg, attn)?;
    Ok(tape.segment_sum(weighted, dst, k)?)
}

/// Neighbor graphs of both views at one resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct StageGraph {
    pub intra: [EdgeSet; 2],
    /// `inter[j]` carries edges from view `1 - j` into view `j`.
    pub inter: [EdgeSet; 2],
}

impl StageGraph {
    pub fn build(coords: &[Vec<[f64; 2]>; 2], k_nn: usize) -> Self {
        Self {
            intra: [
                knn_intra(&coords[0], k_nn, 0),
                knn_intra(&coords[1], k_nn, 1),
            ],
            inter: [
                knn_inter(&coords[1], &coords[0], k_nn, 1, 0),
                knn_inter(&coords[0], &coords[1], k_nn, 0, 1),
            ],
        }
    }
}

fn inter_prefix(block: &str, dst_view: usize) -> String {
    if dst_view == 0 {
        format!("{block}/inter10")
    } else {
        format!("{block}/inter01")
    }
}

/// One pre-norm residual block over both views:
/// `h += o(intra(LN h)) + o'(inter(LN h, LN h_other))`, then
/// `h += MLP(LN h)`.
pub fn block_forward(
    tape: &mut Tape,
    features: [Var; 2],
    coords: &[Vec<[f64; 2]>; 2],
    graph: &StageGraph,
    params: &BoundParams,
    prefix: &str,
    rpe_scale: f64,
) -> Result<[Var; 2]> {
    let normed = [
        params.layer_norm(tape, features[0], &format!("{prefix}/ln_attn"))?,
        params.layer_norm(tape, features[1], &format!("{prefix}/ln_attn"))?,
    ];
    let mut out = features;
    for j in 0..2 {
        let intra_prefix = format!("{prefix}/intra");
        let a = intra_attention(
            tape,
            normed[j],
            &coords[j],
            &graph.intra[j],
            params,
            &intra_prefix,
            rpe_scale,
        )?;
        let a = params.linear(tape, a, &format!("{intra_prefix}/o"))?;
        let mut h = tape.add(features[j], a)?;
        let ip = inter_prefix(prefix, j);
        if params.has(&format!("{ip}/q/w")) {
            let b = inter_attention(tape, normed[j], normed[1 - j], &graph.inter[j], params, &ip)?;
            let b = params.linear(tape, b, &format!("{ip}/o"))?;
            h = tape.add(h, b)?;
        }
        let y = params.layer_norm(tape, h, &format!("{prefix}/ln_mlp"))?;
        let y = params.linear(tape, y, &format!("{prefix}/mlp1"))?;
        let y = tape.relu(y)?;
        let y = params.linear(tape, y, &format!("{prefix}/mlp2"))?;
        out[j] = tape.add(h, y)?;
    }
    Ok(out)
}

/// What one pooling step leaves behind for the matching unpool.
#[derive(Debug, Clone)]
pub struct PoolRecord {
    pub assignment: VoxelAssignment,
    pub pre_coords: Vec<[f64; 2]>,
    pub skip: Var,
}

/// Mean-pools features per voxel and moves each pooled point to the
/// barycenter of its members.
pub fn voxel_pool(
    tape: &mut Tape,
    coords: &[[f64; 2]],
    features: Var,
    voxel_size: f64,
) -> Result<(Vec<[f64; 2]>, Var, PoolRecord)> {
    let assignment = voxel_assign(coords, voxel_size);
    let g = assignment.n_groups();
    let summed = tape.segment_sum(features, assignment.group_of.clone(), g)?;
    let inv: Vec<f64> = assignment
        .groups
        .iter()
        .map(|m| 1.0 / m.len() as f64)
        .collect();
    let inv = tape.constant_matrix(g, 1, inv);
    let pooled = tape.scale_rows(summed, inv)?;
    let new_coords = assignment.barycenters.clone();
    Ok((
        new_coords,
        pooled,
        PoolRecord {
            assignment,
            pre_coords: coords.to_vec(),
            skip: features,
        },
    ))
}

/// Copies each voxel's features back to its member points, concatenates the
/// recorded skip features and projects to the skip width.
pub fn unpool(
    tape: &mut Tape,
    pooled: Var,
    record: &PoolRecord,
    params: &BoundParams,
    path: &str,
) -> Result<Var> {
    let rows = tape.shape(pooled).0;
    if rows != record.assignment.n_groups() {
        return Err(ModelError::RecordMismatch {
            expected: record.assignment.n_groups(),
            found: rows,
        });
    }
    let spread = tape.gather(pooled, record.assignment.group_of.clone())?;
    let cat = tape.concat_cols(&[spread, record.skip])?;
    params.linear(tape, cat, path)
}

/// Per-hit network inputs: `[transverse / 80, plane / 100, value]`.
pub fn input_features(event: &Event, view: usize) -> Vec<f64> {
    event.views[view]
        .hits
        .iter()
        .flat_map(|h| {
            [
                h.coord[0] / GRID_TRANSVERSE as f64,
                h.coord[1] / GRID_PLANES as f64,
                h.value,
            ]
        })
        .collect()
}

/// Logits of both heads, one row per hit.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub sem: [Var; 2],
    pub ins: [Var; 2],
}

pub fn forward(
    tape: &mut Tape,
    event: &Event,
    params: &BoundParams,
    h: &HyperParams,
) -> Result<ForwardOutput> {
    let mut coords: [Vec<[f64; 2]>; 2] = [event.views[0].coords(), event.views[1].coords()];
    let mut feats = [0, 1].map(|j| {
        let k = event.views[j].len();
        tape.constant_matrix(k, 3, input_features(event, j))
    });
    for f in feats.iter_mut() {
        *f = params.linear(tape, *f, "embed")?;
    }

    let mut graphs: Vec<StageGraph> = Vec::with_capacity(h.n);
    let mut records: Vec<[PoolRecord; 2]> = Vec::with_capacity(h.n);
    for s in 0..h.n {
        if s > 0 {
            for f in feats.iter_mut() {
                *f = params.linear(tape, *f, &format!("enc{s}/up"))?;
            }
        }
        let graph = StageGraph::build(&coords, h.k_nn);
        for b in 0..h.m {
            feats = block_forward(
                tape,
                feats,
                &coords,
                &graph,
                params,
                &format!("enc{s}/blk{b}"),
                h.voxel_size(s),
            )?;
        }
        let (c0, f0, r0) = voxel_pool(tape, &coords[0], feats[0], h.voxel_size(s))?;
        let (c1, f1, r1) = voxel_pool(tape, &coords[1], feats[1], h.voxel_size(s))?;
        coords = [c0, c1];
        feats = [f0, f1];
        records.push([r0, r1]);
        graphs.push(graph);
    }

    for t in 0..h.n {
        let level = h.n - 1 - t;
        let rec = &records[level];
        for j in 0..2 {
            feats[j] = unpool(tape, feats[j], &rec[j], params, &format!("dec{t}/unpool"))?;
        }
        coords = [rec[0].pre_coords.clone(), rec[1].pre_coords.clone()];
        for b in 0..h.m {
            feats = block_forward(
                tape,
                feats,
                &coords,
                &graphs[level],
                params,
                &format!("dec{t}/blk{b}"),
                h.voxel_size(level),
            )?;
        }
    }

    let sem = [
        params.linear(tape, feats[0], "sem_head")?,
        params.linear(tape, feats[1], "sem_head")?,
    ];
    let ins = [
        params.linear(tape, feats[0], "ins_head")?,
        params.linear(tape, feats[1], "ins_head")?,
    ];
    Ok(ForwardOutput { sem, ins })
}

/// Inference-only outputs for one event; rows follow view 0 then view 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Per-hit class probabilities, `n_classes` per row.
    pub class_probs: Vec<Vec<f64>>,
    /// Per-hit class argmax.
    pub classes: Vec<usize>,
    /// Per-hit instance-slot argmax.
    pub slots: Vec<usize>,
    /// Hits in view 0; the remaining rows are view 1.
    pub n_view0: usize,
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Reads class probabilities and slot argmaxes off a finished forward pass.
pub fn prediction_from_output(tape: &Tape, out: &ForwardOutput, h: &HyperParams) -> Prediction {
    let mut class_probs = Vec::new();
    let mut slots = Vec::new();
    for j in 0..2 {
        let sem = tape.value(out.sem[j]);
        for row in sem.chunks(h.n_classes) {
            class_probs.push(softmax_row(row));
        }
        let ins = tape.value(out.ins[j]);
        slots.extend(ins.chunks(h.instance_slots).map(argmax));
    }
    let classes = class_probs.iter().map(|p| argmax(p)).collect();
    Prediction {
        class_probs,
        classes,
        slots,
        n_view0: tape.shape(out.sem[0]).0,
    }
}

pub fn predict(event: &Event, weights: &ModelWeights, h: &HyperParams) -> Result<Prediction> {
    let mut tape = Tape::new();
    let params = weights.bind(&mut tape, false);
    let out = forward(&mut tape, event, &params, h)?;
    Ok(prediction_from_output(&tape, &out, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::Hit;

    fn small_hyper() -> HyperParams {
        HyperParams {
            base_dim: 4,
            k_nn: 3,
            ..HyperParams::default()
        }
    }

    #[test]
    fn init_is_deterministic() {
        let h = small_hyper();
        assert_eq!(init_weights(&h, 1).unwrap(), init_weights(&h, 1).unwrap());
        assert_ne!(init_weights(&h, 1).unwrap(), init_weights(&h, 2).unwrap());
        let w = init_weights(&h, 1).unwrap();
        assert!(w
            .get("enc0/blk0/ln_attn/gain")
            .unwrap()
            .data
            .iter()
            .all(|&v| v == 1.0));
        assert!(w.get("embed/b").unwrap().data.iter().all(|&v| v == 0.0));
        let lim = (6.0f64 / 8.0).sqrt();
        assert!(w
            .get("enc0/blk0/intra/q/w")
            .unwrap()
            .data
            .iter()
            .all(|v| v.abs() <= lim));
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        // embed + up + unpool + heads, plus 16d²+23d+1 per block
        let count = |base: usize, inter: bool| {
            let (d0, d1) = (base, 2 * base);
            let block = |d: usize| {
                if inter {
                    16 * d * d + 23 * d + 1
                } else {
                    8 * d * d + 15 * d + 1
                }
            };
            let embed = 3 * d0 + d0;
            let up = d0 * d1 + d1;
            let unpool0 = (d1 + d1) * d1 + d1;
            let unpool1 = (d1 + d0) * d0 + d0;
            let heads = d0 * 6 + 6 + d0 * 8 + 8;
            embed + up + unpool0 + unpool1 + heads + 2 * block(d0) + 2 * block(d1)
        };
        let h = HyperParams::default();
        assert_eq!(init_weights(&h, 0).unwrap().param_count(), count(32, true));
        assert_eq!(count(32, true), 182_322);
        let h = HyperParams {
            inter_view: false,
            ..HyperParams::default()
        };
        assert_eq!(init_weights(&h, 0).unwrap().param_count(), count(32, false));
    }

    #[test]
    fn hyper_round_trips_through_pairs() {
        let h = small_hyper();
        let pairs: Vec<(String, f64)> = h
            .to_pairs()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        assert_eq!(HyperParams::from_pairs(&pairs).unwrap(), h);
    }

    fn bound_identity_attention(
        tape: &mut Tape,
        d: usize,
        prefix: &str,
        zero_rpe: bool,
    ) -> BoundParams {
        let mut vars = BTreeMap::new();
        let eye: Vec<f64> = (0..d * d)
            .map(|i| if i / d == i % d { 1.0 } else { 0.0 })
            .collect();
        for role in ["q", "k", "v"] {
            vars.insert(
                format!("{prefix}/{role}/w"),
                tape.param(&Tensor::matrix(d, d, eye.clone()).unwrap()),
            );
            vars.insert(
                format!("{prefix}/{role}/b"),
                tape.param(&Tensor::zeros(vec![d])),
            );
        }
        let fill = if zero_rpe { 0.0 } else { 0.5 };
        vars.insert(
            format!("{prefix}/rpe1/w"),
            tape.param(&Tensor::filled(vec![2, d], fill)),
        );
        vars.insert(
            format!("{prefix}/rpe1/b"),
            tape.param(&Tensor::zeros(vec![d])),
        );
        vars.insert(
            format!("{prefix}/rpe2/w"),
            tape.param(&Tensor::filled(vec![d, 1], fill)),
        );
        vars.insert(
            format!("{prefix}/rpe2/b"),
            tape.param(&Tensor::zeros(vec![1])),
        );
        BoundParams { vars }
    }

    #[test]
    fn intra_single_neighbor_returns_its_value() {
        let mut tape = Tape::new();
        let p = bound_identity_attention(&mut tape, 2, "a", false);
        let x = tape.constant_matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let coords = [[0.0, 0.0], [1.0, 1.0]];
        let edges = knn_intra(&coords, 4, 0);
        let out = intra_attention(&mut tape, x, &coords, &edges, &p, "a", 1.0).unwrap();
        assert_eq!(tape.value(out), &[3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn intra_uniform_attention_averages() {
        let mut tape = Tape::new();
        let mut p = bound_identity_attention(&mut tape, 2, "a", true);
        // zero keys make every logit equal
        p.vars
            .insert("a/k/w".into(), tape.param(&Tensor::zeros(vec![2, 2])));
        let x = tape.constant_matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 5.0, 5.0]);
        let coords = [[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]];
        let edges = knn_intra(&coords, 8, 0);
        let out = intra_attention(&mut tape, x, &coords, &edges, &p, "a", 1.0).unwrap();
        let v = tape.value(out);
        assert_eq!(&v[0..2], &[2.5, 3.0]);
        assert_eq!(&v[2..4], &[3.0, 2.5]);
        assert_eq!(&v[4..6], &[0.5, 0.5]);
    }

    #[test]
    fn intra_line_graph_matches_hand_evaluation() {
        // 4 collinear points, d = 1, q = k = v = identity, rpe = relu(0.5 dx + 0.5 dz) * 0.5
        let mut tape = Tape::new();
        let p = bound_identity_attention(&mut tape, 1, "a", false);
        let xs = [1.0, -1.0, 2.0, 0.5];
        let x = tape.constant_matrix(4, 1, xs.to_vec());
        let coords = [[0.0, 0.0], [0.0, 1.0], [0.0, 2.0], [0.0, 3.0]];
        let edges = knn_intra(&coords, 2, 0);
        let out = intra_attention(&mut tape, x, &coords, &edges, &p, "a", 1.0).unwrap();
        let rpe = |dz: f64| (0.5 * dz).max(0.0) * 0.5;
        for (k, nbrs) in edges.neighbors.iter().enumerate() {
            let logits: Vec<f64> = nbrs
                .iter()
                .map(|&n| xs[k] * xs[n] + rpe(coords[k][1] - coords[n][1]))
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let expect: f64 = nbrs
                .iter()
                .zip(&logits)
                .map(|(&n, l)| (l - m).exp() / z * xs[n])
                .sum();
            assert!((tape.value(out)[k] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn inter_attention_cases() {
        let mut tape = Tape::new();
        let p = bound_identity_attention(&mut tape, 2, "x", true);
        let dst = tape.constant_matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let empty = tape.constant_matrix(0, 2, vec![]);
        let e = knn_inter(&[], &[[0.0, 1.0], [0.0, 2.0]], 4, 1, 0);
        let out = inter_attention(&mut tape, dst, empty, &e, &p, "x").unwrap();
        assert_eq!(tape.value(out), &[0.0; 4]);

        let one = tape.constant_matrix(1, 2, vec![7.0, -3.0]);
        let e = knn_inter(&[[5.0, 5.0]], &[[0.0, 1.0], [0.0, 2.0]], 4, 1, 0);
        let out = inter_attention(&mut tape, dst, one, &e, &p, "x").unwrap();
        assert_eq!(tape.value(out), &[7.0, -3.0, 7.0, -3.0]);

        // two sources, identity projections, d = 2
        let src = tape.constant_matrix(2, 2, vec![1.0, 2.0, -1.0, 0.5]);
        let e = knn_inter(
            &[[0.0, 1.0], [0.0, 2.0]],
            &[[0.0, 1.0], [0.0, 2.0]],
            4,
            1,
            0,
        );
        let out = inter_attention(&mut tape, dst, src, &e, &p, "x").unwrap();
        let q = [[1.0, 0.0], [0.0, 1.0]];
        let s = [[1.0, 2.0], [-1.0, 0.5]];
        for k in 0..2 {
            let l: Vec<f64> = e.neighbors[k]
                .iter()
                .map(|&n| (q[k][0] * s[n][0] + q[k][1] * s[n][1]) / 2f64.sqrt())
                .collect();
            let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = l.iter().map(|v| (v - m).exp()).sum();
            for c in 0..2 {
                let expect: f64 = e.neighbors[k]
                    .iter()
                    .zip(&l)
                    .map(|(&n, v)| (v - m).exp() / z * s[n][c])
                    .sum();
                assert!((tape.value(out)[k * 2 + c] - expect).abs() < 1e-14);
            }
        }
    }

    fn toy_event() -> Event {
        Event::new(
            0,
            vec![
                Hit::new(10.0, 5.0, 1.0, 1, 0),
                Hit::new(11.0, 6.0, 0.8, 1, 0),
                Hit::new(30.0, 20.0, 2.0, 0, 1),
            ],
            vec![
                Hit::new(40.0, 5.0, 1.1, 1, 0),
                Hit::new(41.0, 7.0, 0.9, 1, 0),
                Hit::new(50.0, 21.0, 1.7, 0, 1),
            ],
        )
    }

    #[test]
    fn zero_output_projections_make_block_identity() {
        let h = small_hyper();
        let mut w = init_weights(&h, 3).unwrap();
        for (path, t) in w.tensors.iter_mut() {
            if path.starts_with("enc0/blk0/") && (path.contains("/o/") || path.contains("mlp2/")) {
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let e = toy_event();
        let mut tape = Tape::new();
        let p = w.bind(&mut tape, false);
        let coords = [e.views[0].coords(), e.views[1].coords()];
        let feats = [0, 1]
            .map(|j| tape.constant_matrix(3, 4, (0..12).map(|i| (i + j) as f64 * 0.3).collect()));
        let graph = StageGraph::build(&coords, h.k_nn);
        let out = block_forward(&mut tape, feats, &coords, &graph, &p, "enc0/blk0", 2.0).unwrap();
        for j in 0..2 {
            assert_eq!(tape.value(out[j]), tape.value(feats[j]));
        }
    }

    #[test]
    fn empty_view_gets_no_inter_contribution() {
        let h = small_hyper();
        let w = init_weights(&h, 4).unwrap();
        let e = Event::new(0, toy_event().views[0].hits.clone(), vec![]);
        let coords = [e.views[0].coords(), e.views[1].coords()];
        let graph = StageGraph::build(&coords, h.k_nn);
        let run = |with_inter: bool| {
            let mut tape = Tape::new();
            let mut p = w.bind(&mut tape, false);
            if !with_inter {
                p.vars.retain(|k, _| !k.contains("/inter"));
            }
            let f0 = tape.constant_matrix(3, 4, (0..12).map(|i| i as f64 * 0.1).collect());
            let f1 = tape.constant_matrix(0, 4, vec![]);
            let out =
                block_forward(&mut tape, [f0, f1], &coords, &graph, &p, "enc0/blk0", 2.0).unwrap();
            (tape.value(out[0]).to_vec(), tape.shape(out[1]))
        };
        let (with, s1) = run(true);
        let (without, _) = run(false);
        assert_eq!(s1, (0, 4));
        // inter adds only the constant output bias, which init sets to zero
        assert_eq!(with, without);
    }

    #[test]
    fn pooling_cases() {
        let mut tape = Tape::new();
        let coords = [[0.5, 0.5], [4.5, 4.5], [9.0, 1.0]];
        let f = tape.constant_matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let (c, pooled, rec) = voxel_pool(&mut tape, &coords, f, 2.0).unwrap();
        assert_eq!(c.len(), 3);
        for (i, &g) in rec.assignment.group_of.iter().enumerate() {
            assert_eq!(
                &tape.value(pooled)[g * 2..g * 2 + 2],
                &tape.value(f)[i * 2..i * 2 + 2]
            );
            assert_eq!(c[g], coords[i]);
        }
        let (c, pooled, _) = voxel_pool(&mut tape, &coords, f, 100.0).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(tape.value(pooled), &[3.0, 4.0]);
    }

    #[test]
    fn pooling_matches_sequential_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let coords: Vec<[f64; 2]> = (0..30)
            .map(|_| [rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)])
            .collect();
        let data: Vec<f64> = (0..90).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let f = tape.constant_matrix(30, 3, data.clone());
        let (_, pooled, rec) = voxel_pool(&mut tape, &coords, f, 2.0).unwrap();
        for (g, members) in rec.assignment.groups.iter().enumerate() {
            for c in 0..3 {
                let mut s = 0.0;
                for &i in members {
                    s += data[i * 3 + c];
                }
                let mean = s * (1.0 / members.len() as f64);
                assert_eq!(tape.value(pooled)[g * 3 + c], mean);
            }
        }
    }

    fn identity_unpool_params(tape: &mut Tape, d: usize) -> BoundParams {
        // [pooled | skip] -> pooled
        let mut w = vec![0.0; 2 * d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        let mut vars = BTreeMap::new();
        vars.insert(
            "u/w".to_string(),
            tape.param(&Tensor::matrix(2 * d, d, w).unwrap()),
        );
        vars.insert("u/b".to_string(), tape.param(&Tensor::zeros(vec![d])));
        BoundParams { vars }
    }

    #[test]
    fn unpool_restores_voxel_means() {
        let mut tape = Tape::new();
        let p = identity_unpool_params(&mut tape, 2);
        let coords = [[0.5, 0.5], [1.5, 0.5], [9.0, 1.0]];
        let f = tape.constant_matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let (_, pooled, mut rec) = voxel_pool(&mut tape, &coords, f, 2.0).unwrap();
        rec.skip = tape.constant_matrix(3, 2, vec![0.0; 6]);
        let up = unpool(&mut tape, pooled, &rec, &p, "u").unwrap();
        assert_eq!(tape.shape(up), (3, 2));
        assert_eq!(tape.value(up), &[2.0, 3.0, 2.0, 3.0, 5.0, 6.0]);

        let bad = tape.constant_matrix(5, 2, vec![0.0; 10]);
        assert!(matches!(
            unpool(&mut tape, bad, &rec, &p, "u"),
            Err(ModelError::RecordMismatch {
                expected: 2,
                found: 5
            })
        ));
    }

    #[test]
    fn forward_shapes_and_empty_event() {
        let h = small_hyper();
        let w = init_weights(&h, 5).unwrap();
        let e = toy_event();
        let mut tape = Tape::new();
        let p = w.bind(&mut tape, true);
        let out = forward(&mut tape, &e, &p, &h).unwrap();
        assert_eq!(tape.shape(out.sem[0]), (3, 6));
        assert_eq!(tape.shape(out.ins[1]), (3, 8));

        let empty = Event::new(1, vec![], vec![]);
        let mut tape = Tape::new();
        let p = w.bind(&mut tape, true);
        let out = forward(&mut tape, &empty, &p, &h).unwrap();
        assert_eq!(tape.shape(out.sem[0]), (0, 6));
        assert_eq!(tape.shape(out.ins[1]), (0, 8));
        let pred = predict(&empty, &w, &h).unwrap();
        assert!(pred.classes.is_empty());
    }
}
