//! Phased fusion encoder.
//!
//! The first `L - 1` pre-norm transformer layers run over visual tokens only.
//! The last layer runs over `[visual ; attribute queries]` with unmasked
//! attention, and its attribute-position outputs are the per-attribute
//! features read by the heads. Attribute queries carry no positional
//! embedding, so the fusion layer is equivariant to query order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DatasetId, DatasetSpec};
use crate::error::{config_err, data_err, shape_err, Error, Result};
use crate::numerics::{Graph, NodeId, ParamId, ParamStore, RngState, Scalar, Tensor};

pub const LN_EPS: Scalar = 1e-6;
pub const MLP_RATIO: usize = 4;
pub const QUERY_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub o: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
    pub heads: usize,
    pub dim: usize,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &RngState,
        prefix: &str,
        dim: usize,
        heads: usize,
        init_std: f64,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(config_err!("width {dim} is not divisible by {heads} heads"));
        }
        let mut weight = |name: &str, rows: usize, cols: usize| -> Result<ParamId> {
            let full = format!("{prefix}.{name}");
            let data = rng.fork_str(&full).gaussian_vec(rows * cols, init_std);
            store.add_trainable(&full, Tensor::new(&[rows, cols], data)?)
        };
        let q = weight("attn.q", dim, dim)?;
        let k = weight("attn.k", dim, dim)?;
        let v = weight("attn.v", dim, dim)?;
        let o = weight("attn.o", dim, dim)?;
        let fc1_w = weight("mlp.fc1.w", dim, MLP_RATIO * dim)?;
        let fc2_w = weight("mlp.fc2.w", MLP_RATIO * dim, dim)?;
        let mut vector = |name: &str, n: usize, value: Scalar| {
            store.add_trainable(&format!("{prefix}.{name}"), Tensor::filled(&[n], value))
        };
        Ok(Self {
            ln1_gain: vector("ln1.gain", dim, 1.0)?,
            ln1_bias: vector("ln1.bias", dim, 0.0)?,
            ln2_gain: vector("ln2.gain", dim, 1.0)?,
            ln2_bias: vector("ln2.bias", dim, 0.0)?,
            fc1_b: vector("mlp.fc1.b", MLP_RATIO * dim, 0.0)?,
            fc2_b: vector("mlp.fc2.b", dim, 0.0)?,
            q,
            k,
            v,
            o,
            fc1_w,
            fc2_w,
            heads,
            dim,
        })
    }

    /// `x + Attn(LN(x))`, then `+ MLP(LN(.))` over a `[s, d]` sequence.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let s = g.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.dim {
            return Err(shape_err!(
                "encoder layer of width {} got input {:?}",
                self.dim,
                s
            ));
        }
        let (g1, b1) = (g.param(store, self.ln1_gain), g.param(store, self.ln1_bias));
        let h = g.layer_norm(x, g1, b1, LN_EPS)?;
        let a = self.attention(g, store, h)?;
        let x = g.add(x, a)?;

        let (g2, b2) = (g.param(store, self.ln2_gain), g.param(store, self.ln2_bias));
        let h = g.layer_norm(x, g2, b2, LN_EPS)?;
        let (w1, c1) = (g.param(store, self.fc1_w), g.param(store, self.fc1_b));
        let (w2, c2) = (g.param(store, self.fc2_w), g.param(store, self.fc2_b));
        let h = g.matmul(h, w1)?;
        let h = g.add_row(h, c1)?;
        let h = g.gelu(h);
        let h = g.matmul(h, w2)?;
        let h = g.add_row(h, c2)?;
        g.add(x, h)
    }

    fn attention(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let (wq, wk, wv, wo) = (
            g.param(store, self.q),
            g.param(store, self.k),
            g.param(store, self.v),
            g.param(store, self.o),
        );
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        let hd = self.dim / self.heads;
        let scale = 1.0 / (hd as Scalar).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * hd, hd)?;
            let kh = g.slice_cols(k, h * hd, hd)?;
            let vh = g.slice_cols(v, h * hd, hd)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            outs.push(g.matmul(attn, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        g.matmul(cat, wo)
    }
}

/// Runs the visual-only layers. Needs at least one layer.
pub fn encode_visual(
    g: &mut Graph,
    store: &ParamStore,
    f_vis0: NodeId,
    layers: &[EncoderLayer],
) -> Result<NodeId> {
    if layers.is_empty() {
        return Err(config_err!(
            "phased encoder needs L >= 2 (at least one visual layer before fusion)"
        ));
    }
    let mut x = f_vis0;
    for layer in layers {
        x = layer.forward(g, store, x)?;
    }
    Ok(x)
}

/// Joint pass over `[f_vis ; queries]`; returns `(visual part, attribute part)`.
pub fn fuse(
    g: &mut Graph,
    store: &ParamStore,
    f_vis: NodeId,
    queries: NodeId,
    final_layer: &EncoderLayer,
) -> Result<(NodeId, NodeId)> {
    let vs = g.shape(f_vis).to_vec();
    let qs = g.shape(queries).to_vec();
    if vs.len() != 2 || qs.len() != 2 {
        return Err(shape_err!("fuse expects rank-2 inputs, got {:?} and {:?}", vs, qs));
    }
    if qs[1] != vs[1] {
        return Err(shape_err!(
            "query width {} does not match visual width {}",
            qs[1],
            vs[1]
        ));
    }
    let (n, c) = (vs[0], qs[0]);
    let seq = g.concat_rows(&[f_vis, queries])?;
    let out = final_layer.forward(g, store, seq)?;
    let vis = g.slice_rows(out, 0, n)?;
    let attr = g.slice_rows(out, n, c)?;
    Ok((vis, attr))
}

#[derive(Debug, Clone)]
pub struct PhasedEncoder {
    pub visual: Vec<EncoderLayer>,
    pub fusion: EncoderLayer,
}

impl PhasedEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &RngState,
        depth: usize,
        dim: usize,
        heads: usize,
        init_std: f64,
    ) -> Result<Self> {
        if depth < 2 {
            return Err(config_err!("encoder depth L={depth}; the phased split needs L >= 2"));
        }
        let visual = (0..depth - 1)
            .map(|i| EncoderLayer::new(store, rng, &format!("enc.{i}"), dim, heads, init_std))
            .collect::<Result<Vec<_>>>()?;
        let fusion = EncoderLayer::new(store, rng, "enc.fusion", dim, heads, init_std)?;
        Ok(Self { visual, fusion })
    }

    pub fn depth(&self) -> usize {
        self.visual.len() + 1
    }
}

/// How a dataset's attribute query tokens are obtained.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", content = "path")]
pub enum QueryMode {
    /// Trainable, seeded Gaussian initialization.
    #[default]
    Learnable,
    /// Frozen vectors loaded from an attribute-embedding file, optionally
    /// followed by a trainable projection when the file width differs.
    ExternalFile(PathBuf),
    /// Trainable slots with a zero (identity-free) start.
    None,
}

impl QueryMode {
    pub fn label(&self) -> &'static str {
        match self {
            QueryMode::Learnable => "learnable",
            QueryMode::ExternalFile(_) => "external_file",
            QueryMode::None => "none",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttributeQuerySet {
    pub dataset_id: DatasetId,
    /// `[C, d]`, or `[C, d_ext]` for external files.
    pub queries: ParamId,
    pub mode: QueryMode,
    /// `[d_ext, d]` when the external width differs from the model width.
    pub projection: Option<ParamId>,
    pub count: usize,
}

impl AttributeQuerySet {
    /// `[C, d]` query tokens in attribute order.
    pub fn tokens(&self, g: &mut Graph, store: &ParamStore) -> Result<NodeId> {
        let q = g.param(store, self.queries);
        match self.projection {
            Some(p) => {
                let p = g.param(store, p);
                g.matmul(q, p)
            }
            None => Ok(q),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.queries).chain(self.projection).collect()
    }
}

pub fn build_attribute_queries(
    store: &mut ParamStore,
    rng: &RngState,
    spec: &DatasetSpec,
    mode: &QueryMode,
    dim: usize,
) -> Result<AttributeQuerySet> {
    let c = spec.attribute_count();
    if c == 0 {
        return Err(config_err!("dataset {} has an empty attribute set", spec.dataset_id));
    }
    let name = format!("queries.{}", spec.dataset_id);
    let (queries, projection) = match mode {
        QueryMode::Learnable => {
            let data = rng.fork_str(&name).gaussian_vec(c * dim, QUERY_INIT_STD);
            (store.add_trainable(&name, Tensor::new(&[c, dim], data)?)?, None)
        }
        QueryMode::None => (store.add_trainable(&name, Tensor::zeros(&[c, dim]))?, None),
        QueryMode::ExternalFile(path) => {
            let table = read_attribute_embeddings(path)?;
            let (rows, d_ext) = (table.shape()[0], table.shape()[1]);
            if rows != c {
                return Err(data_err!(
                    "{} holds {rows} attribute vectors, dataset {} has {c} attributes",
                    path.display(),
                    spec.dataset_id
                ));
            }
            let q = store.add_frozen(&name, table)?;
            let proj = if d_ext != dim {
                let pname = format!("{name}.proj");
                let data = rng
                    .fork_str(&pname)
                    .gaussian_vec(d_ext * dim, 1.0 / (d_ext as f64).sqrt());
                Some(store.add_trainable(&pname, Tensor::new(&[d_ext, dim], data)?)?)
            } else {
                None
            };
            (q, proj)
        }
    };
    Ok(AttributeQuerySet {
        dataset_id: spec.dataset_id.clone(),
        queries,
        mode: mode.clone(),
        projection,
        count: c,
    })
}

/// Reads an attribute-embedding file: `u32 C`, `u32 d_ext` (little-endian),
/// then `C * d_ext` little-endian `f32` values, row-major.
pub fn read_attribute_embeddings(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header = [0u8; 8];
    r.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    let rows = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    if rows == 0 || cols == 0 {
        return Err(data_err!("{}: empty embedding matrix {rows}x{cols}", path.display()));
    }
    let mut body = Vec::new();
    r.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    if body.len() != rows * cols * 4 {
        return Err(data_err!(
            "{}: header declares {rows}x{cols} values but body holds {} bytes",
            path.display(),
            body.len()
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as Scalar)
        .collect();
    Tensor::new(&[rows, cols], data)
}

pub fn write_attribute_embeddings(path: &Path, table: &Tensor) -> Result<()> {
    if table.rank() != 2 {
        return Err(shape_err!("embedding table must be rank 2, got {:?}", table.shape()));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(&(table.shape()[0] as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(table.shape()[1] as u32).to_le_bytes()).map_err(io)?;
    for v in table.data() {
        w.write_all(&(*v as f32).to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}
