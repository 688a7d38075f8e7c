//! Multi-modal visual embedding.
//!
//! Turns a `[T, ch, H, W]` frame stack into the `[n, d]` visual token sequence
//! consumed by the encoder:
//!
//! 1. modality-specific patch projection (one stem per modality),
//! 2. additive spatial, temporal (T > 1) and modality (auxiliary inputs only)
//!    embeddings, applied per frame,
//! 3. the time adapter, which concatenates the `T` tokens at each spatial
//!    position and compresses them with `linear -> GELU -> linear`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::numerics::{Graph, NodeId, ParamId, ParamStore, RngState, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityKind {
    Rgb,
    Video,
    Event,
}

impl ModalityKind {
    pub const ALL: [ModalityKind; 3] = [ModalityKind::Rgb, ModalityKind::Video, ModalityKind::Event];

    /// Auxiliary modalities carry a learned modality-type embedding.
    pub fn is_auxiliary(self) -> bool {
        matches!(self, ModalityKind::Event)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModalityKind::Rgb => "rgb",
            ModalityKind::Video => "video",
            ModalityKind::Event => "event",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" => Ok(ModalityKind::Rgb),
            "video" => Ok(ModalityKind::Video),
            "event" => Ok(ModalityKind::Event),
            other => Err(Error::Data(format!("unknown modality {other:?}"))),
        }
    }

    /// Checks the frame-count rule: RGB carries exactly one frame.
    pub fn check_frames(self, frames: usize) -> Result<()> {
        match (self, frames) {
            (_, 0) => Err(config_err!("{self} input needs at least one frame")),
            (ModalityKind::Rgb, t) if t != 1 => {
                Err(config_err!("rgb input carries exactly one frame, got {t}"))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for ModalityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Geometry shared by every stem: input resolution and patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, channels: usize, patch: usize) -> Result<Self> {
        if patch == 0 || height % patch != 0 || width % patch != 0 {
            return Err(config_err!(
                "image {height}x{width} is not divisible by patch size {patch}"
            ));
        }
        if channels == 0 {
            return Err(config_err!("channel count must be >= 1"));
        }
        Ok(Self {
            height,
            width,
            channels,
            patch,
        })
    }

    pub fn rows(&self) -> usize {
        self.height / self.patch
    }

    pub fn cols(&self) -> usize {
        self.width / self.patch
    }

    pub fn n_patches(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// Rearranges `[T, ch, H, W]` into `[T * n, P * P * ch]`, frame-major, patches
/// row-major from the top-left, each patch flattened as `(ch, y, x)`.
pub fn extract_patches(frames: &Tensor, grid: &PatchGrid) -> Result<Tensor> {
    let s = frames.shape();
    if s.len() != 4 {
        return Err(shape_err!("frames must be [T, ch, H, W], got {:?}", s));
    }
    let (t, ch, h, w) = (s[0], s[1], s[2], s[3]);
    let p = grid.patch;
    if h % p != 0 || w % p != 0 {
        return Err(config_err!("H={h}, W={w} not divisible by P={p}"));
    }
    if ch != grid.channels || h != grid.height || w != grid.width {
        return Err(shape_err!(
            "frames {:?} do not match stem geometry {}x{}x{}",
            s,
            grid.channels,
            grid.height,
            grid.width
        ));
    }
    let (gr, gc) = (h / p, w / p);
    let pd = p * p * ch;
    let src = frames.data();
    let mut out = Vec::with_capacity(t * gr * gc * pd);
    for f in 0..t {
        for py in 0..gr {
            for px in 0..gc {
                for c in 0..ch {
                    for y in 0..p {
                        let row = ((f * ch + c) * h + py * p + y) * w + px * p;
                        out.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(&[t * gr * gc, pd], out)
}

#[derive(Debug, Clone)]
pub struct ModalityStem {
    pub modality: ModalityKind,
    /// `[P * P * ch, d]`
    pub projection: ParamId,
    /// `[d]`
    pub bias: ParamId,
    pub grid: PatchGrid,
}

impl ModalityStem {
    pub fn new(
        store: &mut ParamStore,
        rng: &RngState,
        modality: ModalityKind,
        grid: PatchGrid,
        dim: usize,
        init_std: f64,
    ) -> Result<Self> {
        let name = format!("stem.{modality}");
        let w = rng
            .fork_str(&format!("{name}.proj"))
            .gaussian_vec(grid.patch_dim() * dim, init_std);
        let projection =
            store.add_trainable(&format!("{name}.proj"), Tensor::new(&[grid.patch_dim(), dim], w)?)?;
        let bias = store.add_trainable(&format!("{name}.bias"), Tensor::zeros(&[dim]))?;
        Ok(Self {
            modality,
            projection,
            bias,
            grid,
        })
    }
}

/// Patch projection of every frame: `[T, ch, H, W] -> [T, n, d]`.
pub fn patch_embed(
    g: &mut Graph,
    store: &ParamStore,
    frames: &Tensor,
    stem: &ModalityStem,
) -> Result<NodeId> {
    let t = frames.shape().first().copied().unwrap_or(0);
    let patches = extract_patches(frames, &stem.grid)?;
    let x = g.constant(patches);
    let w = g.param(store, stem.projection);
    let b = g.param(store, stem.bias);
    let proj = g.matmul(x, w)?;
    let out = g.add_row(proj, b)?;
    let d = g.shape(w)[1];
    g.reshape(out, &[t, stem.grid.n_patches(), d])
}

#[derive(Debug, Clone)]
pub struct PositionalTables {
    /// `[n, d]`
    pub spatial: ParamId,
    /// `[T_max, d]`
    pub temporal: ParamId,
    /// `[d]` per auxiliary modality. Primary modalities have none (zero).
    pub modality: Vec<(ModalityKind, ParamId)>,
    pub max_frames: usize,
}

impl PositionalTables {
    pub fn new(
        store: &mut ParamStore,
        rng: &RngState,
        n_patches: usize,
        max_frames: usize,
        dim: usize,
        modalities: &[ModalityKind],
        init_std: f64,
    ) -> Result<Self> {
        let spatial = store.add_trainable(
            "pos.spatial",
            Tensor::new(
                &[n_patches, dim],
                rng.fork_str("pos.spatial").gaussian_vec(n_patches * dim, init_std),
            )?,
        )?;
        let temporal = store.add_trainable(
            "pos.temporal",
            Tensor::new(
                &[max_frames, dim],
                rng.fork_str("pos.temporal").gaussian_vec(max_frames * dim, init_std),
            )?,
        )?;
        let mut modality = Vec::new();
        for &m in modalities.iter().filter(|m| m.is_auxiliary()) {
            let name = format!("pos.modality.{m}");
            let id = store.add_trainable(
                &name,
                Tensor::new(&[dim], rng.fork_str(&name).gaussian_vec(dim, init_std))?,
            )?;
            modality.push((m, id));
        }
        Ok(Self {
            spatial,
            temporal,
            modality,
            max_frames,
        })
    }

    pub fn modality_param(&self, m: ModalityKind) -> Option<ParamId> {
        self.modality.iter().find(|(k, _)| *k == m).map(|(_, id)| *id)
    }
}

/// Adds the spatial table to every frame, the temporal row `t` to frame `t`
/// when `T > 1`, and the modality vector for auxiliary modalities.
pub fn add_positional(
    g: &mut Graph,
    store: &ParamStore,
    tokens: NodeId,
    tables: &PositionalTables,
    modality: ModalityKind,
) -> Result<NodeId> {
    let s = g.shape(tokens).to_vec();
    if s.len() != 3 {
        return Err(shape_err!("tokens must be [T, n, d], got {:?}", s));
    }
    let (t, n, d) = (s[0], s[1], s[2]);
    if t > tables.max_frames {
        return Err(config_err!(
            "{t} frames exceed the temporal table size {}",
            tables.max_frames
        ));
    }
    let spatial = g.param(store, tables.spatial);
    if g.shape(spatial) != [n, d] {
        return Err(shape_err!(
            "spatial table {:?} does not match {n} tokens of width {d}",
            g.shape(spatial)
        ));
    }
    let flat = g.reshape(tokens, &[t * n, d])?;
    let spatial_idx: Vec<usize> = (0..t).flat_map(|_| 0..n).collect();
    let sp = g.gather_rows(spatial, &spatial_idx)?;
    let mut x = g.add(flat, sp)?;
    if t > 1 {
        let temporal = g.param(store, tables.temporal);
        let temporal_idx: Vec<usize> = (0..t).flat_map(|f| std::iter::repeat_n(f, n)).collect();
        let tp = g.gather_rows(temporal, &temporal_idx)?;
        x = g.add(x, tp)?;
    }
    if modality.is_auxiliary() {
        let id = tables
            .modality_param(modality)
            .ok_or_else(|| Error::Routing(format!("no modality embedding for {modality}")))?;
        let m = g.param(store, id);
        x = g.add_row(x, m)?;
    }
    g.reshape(x, &[t, n, d])
}

#[derive(Debug, Clone)]
pub struct TimeAdapter {
    /// `[T * d, h]`
    pub w1: ParamId,
    pub b1: ParamId,
    /// `[h, d]`
    pub w2: ParamId,
    pub b2: ParamId,
    pub frames: usize,
    pub hidden: usize,
}

impl TimeAdapter {
    pub fn new(
        store: &mut ParamStore,
        rng: &RngState,
        frames: usize,
        dim: usize,
        hidden: usize,
        init_std: f64,
    ) -> Result<Self> {
        let w1 = store.add_trainable(
            "adapter.w1",
            Tensor::new(
                &[frames * dim, hidden],
                rng.fork_str("adapter.w1").gaussian_vec(frames * dim * hidden, init_std),
            )?,
        )?;
        let b1 = store.add_trainable("adapter.b1", Tensor::zeros(&[hidden]))?;
        let w2 = store.add_trainable(
            "adapter.w2",
            Tensor::new(
                &[hidden, dim],
                rng.fork_str("adapter.w2").gaussian_vec(hidden * dim, init_std),
            )?,
        )?;
        let b2 = store.add_trainable("adapter.b2", Tensor::zeros(&[dim]))?;
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            frames,
            hidden,
        })
    }
}

/// Compresses `[T, n, d]` to `[n, d]`. Single-frame input bypasses the MLP.
pub fn apply_time_adapter(
    g: &mut Graph,
    store: &ParamStore,
    tokens: NodeId,
    adapter: &TimeAdapter,
) -> Result<NodeId> {
    let s = g.shape(tokens).to_vec();
    if s.len() != 3 {
        return Err(shape_err!("tokens must be [T, n, d], got {:?}", s));
    }
    let (t, n, d) = (s[0], s[1], s[2]);
    if t == 1 {
        return g.reshape(tokens, &[n, d]);
    }
    if t != adapter.frames {
        return Err(config_err!(
            "time adapter is configured for {} frames, input has {t}",
            adapter.frames
        ));
    }
    let flat = g.reshape(tokens, &[t * n, d])?;
    // position-major order: row i*T + f holds frame f at position i
    let order: Vec<usize> = (0..n).flat_map(|i| (0..t).map(move |f| f * n + i)).collect();
    let grouped = g.gather_rows(flat, &order)?;
    let stacked = g.reshape(grouped, &[n, t * d])?;
    let w1 = g.param(store, adapter.w1);
    let b1 = g.param(store, adapter.b1);
    let w2 = g.param(store, adapter.w2);
    let b2 = g.param(store, adapter.b2);
    let h = g.matmul(stacked, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.gelu(h);
    let o = g.matmul(h, w2)?;
    g.add_row(o, b2)
}

/// All embedding parameters of a model.
#[derive(Debug, Clone)]
pub struct Embedder {
    pub stems: Vec<ModalityStem>,
    pub tables: PositionalTables,
    pub adapter: TimeAdapter,
    pub grid: PatchGrid,
    pub dim: usize,
}

impl Embedder {
    pub fn stem(&self, modality: ModalityKind) -> Result<&ModalityStem> {
        self.stems
            .iter()
            .find(|s| s.modality == modality)
            .ok_or_else(|| Error::Routing(format!("no stem registered for modality {modality}")))
    }

    /// `patch_embed -> add_positional -> apply_time_adapter`.
    pub fn embed(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        frames: &Tensor,
        modality: ModalityKind,
    ) -> Result<NodeId> {
        let stem = self.stem(modality)?;
        modality.check_frames(frames.shape()[0])?;
        let tokens = patch_embed(g, store, frames, stem)?;
        let tokens = add_positional(g, store, tokens, &self.tables, modality)?;
        apply_time_adapter(g, store, tokens, &self.adapter)
    }
}
