//! The hypernetwork, the per-cell target network it generates, and FluxNet.
//!
//! Each network has two forward implementations: one on plain arrays for fast
//! rollouts and one on a [`Tape`] for training. Both call the same convolution
//! kernels.

mod checkpoint;
mod params;

use std::rc::Rc;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{conv1d_forward, ConvShape, Padding, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{BoundaryCondition, Grid, State};
use crate::weno::LINEAR_WEIGHTS;

pub(crate) use checkpoint::Reader;
pub use checkpoint::{decode_entries, encode_entries, load_entries, save_entries, CHECKPOINT_MAGIC};
pub use params::ParamStore;

thread_local! {
    static HYPERNET_CALLS: std::cell::Cell<usize> = const { std::cell::Cell::new(0) };
}

/// Hypernetwork evaluations (plain or on a tape) made on the current thread.
pub fn hypernet_evaluations() -> usize {
    HYPERNET_CALLS.with(|c| c.get())
}

fn count_hypernet_call() {
    HYPERNET_CALLS.with(|c| c.set(c.get() + 1));
}

/// Number of logits per cell: three left-biased then three right-biased.
pub const N_LOGITS: usize = 6;
/// Kernel width of the target network's first layer.
pub const TARGET_KERNEL: usize = 5;

/// Shape of the per-cell target network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TargetLayout {
    pub n_components: usize,
    pub hidden: usize,
}

impl TargetLayout {
    pub fn new(n_components: usize) -> Self {
        TargetLayout { n_components, hidden: 6 }
    }

    pub fn w1_len(&self) -> usize {
        TARGET_KERNEL * self.n_components * self.hidden
    }

    pub fn b1_offset(&self) -> usize {
        self.w1_len()
    }

    pub fn w2_offset(&self) -> usize {
        self.b1_offset() + self.hidden
    }

    pub fn b2_offset(&self) -> usize {
        self.w2_offset() + self.hidden * N_LOGITS
    }

    /// Parameters per cell, `H (5 C + 1) + 6 (H + 1)`.
    pub fn p_cell(&self) -> usize {
        self.b2_offset() + N_LOGITS
    }

    pub fn total(&self, n_cells: usize) -> usize {
        n_cells * self.p_cell()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HyperNetConfig {
    pub layers: usize,
    pub channels: usize,
    pub kernel: usize,
    pub target: TargetLayout,
}

impl HyperNetConfig {
    pub fn new(n_components: usize) -> Self {
        HyperNetConfig { layers: 6, channels: 32, kernel: 5, target: TargetLayout::new(n_components) }
    }

    /// `dx`, normalized cell centre, then the initial state.
    pub fn in_channels(&self) -> usize {
        2 + self.target.n_components
    }

    pub fn out_channels(&self) -> usize {
        self.target.p_cell()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 || self.channels < 1 || self.kernel % 2 == 0 || self.target.hidden < 1 {
            return Err(Error::invalid(format!("bad hypernetwork config {self:?}")));
        }
        if !(1..=3).contains(&self.target.n_components) {
            return Err(Error::invalid("target network supports 1 to 3 components"));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        layer_dims(self.layers, self.in_channels(), self.channels, self.out_channels())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FluxNetConfig {
    pub layers: usize,
    pub channels: usize,
    pub kernel: usize,
    pub n_components: usize,
}

impl FluxNetConfig {
    pub fn new(n_components: usize, kernel: usize) -> Self {
        FluxNetConfig { layers: 4, channels: 32, kernel, n_components }
    }

    pub fn in_channels(&self) -> usize {
        2 * self.n_components
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 || self.channels < 1 || self.kernel % 2 == 0 || !(1..=3).contains(&self.n_components) {
            return Err(Error::invalid(format!("bad FluxNet config {self:?}")));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        layer_dims(self.layers, self.in_channels(), self.channels, self.n_components)
    }
}

fn layer_dims(layers: usize, c_in: usize, hidden: usize, c_out: usize) -> Vec<(usize, usize)> {
    (0..layers)
        .map(|l| (if l == 0 { c_in } else { hidden }, if l + 1 == layers { c_out } else { hidden }))
        .collect()
}

pub const HYPER_PREFIX: &str = "hyper.";
pub const FLUX_PREFIX: &str = "flux.";

fn weight_name(prefix: &str, l: usize) -> String {
    format!("{prefix}{l}.weight")
}

fn bias_name(prefix: &str, l: usize) -> String {
    format!("{prefix}{l}.bias")
}

fn init_conv_stack(
    store: &mut ParamStore,
    prefix: &str,
    dims: &[(usize, usize)],
    kernel: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for (l, &(ci, co)) in dims.iter().enumerate() {
        let bound = 1.0 / ((kernel * ci) as f64).sqrt();
        let last = l + 1 == dims.len();
        let mut sample = |n: usize| -> Vec<f64> {
            if last { vec![0.0; n] } else { (0..n).map(|_| rng.gen_range(-bound..bound)).collect() }
        };
        let w = Tensor::new(vec![kernel, ci, co], sample(kernel * ci * co))?;
        let b = Tensor::new(vec![co], sample(co))?;
        store.insert(weight_name(prefix, l), w)?;
        store.insert(bias_name(prefix, l), b)?;
    }
    Ok(())
}

/// Fresh hypernetwork parameters. Hidden layers are fan-in uniform; the final
/// layer has zero weights and a bias that makes every generated cell emit the
/// logits `ln d_k`, so the initial scheme uses the optimal linear weights.
pub fn init_hypernet(cfg: &HyperNetConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_conv_stack(&mut store, HYPER_PREFIX, &cfg.layer_dims(), cfg.kernel, &mut rng)?;
    let last = bias_name(HYPER_PREFIX, cfg.layers - 1);
    let b = store.get_mut(&last).expect("just inserted").data_mut();
    let off = cfg.target.b2_offset();
    for k in 0..3 {
        b[off + k] = LINEAR_WEIGHTS[k].ln();
        b[off + 3 + k] = LINEAR_WEIGHTS[k].ln();
    }
    Ok(store)
}

/// Fresh FluxNet parameters; the final layer is zero so every flux starts at 0.
pub fn init_fluxnet(cfg: &FluxNetConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut store = ParamStore::new();
    init_conv_stack(&mut store, FLUX_PREFIX, &cfg.layer_dims(), cfg.kernel, &mut rng)?;
    Ok(store)
}

/// Conditioning field `N x (2 + C)`: `dx`, cell centres mapped to `[-1, 1]`, `u0`.
pub fn build_metadata(grid: &Grid, initial: &State) -> Result<Array2<f64>> {
    if initial.n_cells() != grid.n_cells {
        return Err(Error::shape(format!("state has {} cells, grid {}", initial.n_cells(), grid.n_cells)));
    }
    let xs = grid.normalized_centers();
    let c = initial.n_components();
    Ok(Array2::from_shape_fn((grid.n_cells, 2 + c), |(i, k)| match k {
        0 => grid.dx,
        1 => xs[i],
        _ => initial.u[[i, k - 2]],
    }))
}

fn stack_forward(
    store: &ParamStore,
    prefix: &str,
    dims: &[(usize, usize)],
    pad: Padding,
    input: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    let len = input.nrows();
    if input.ncols() != dims[0].0 {
        return Err(Error::shape(format!("network expects {} input channels, got {}", dims[0].0, input.ncols())));
    }
    let mut x: Vec<f64> = input.iter().copied().collect();
    for (l, &(ci, co)) in dims.iter().enumerate() {
        let w = store.require(&weight_name(prefix, l))?;
        let b = store.require(&bias_name(prefix, l))?;
        let shape = ConvShape::infer(&[len, ci], w.shape(), b.shape(), false)?;
        x = conv1d_forward(shape, pad, &x, w.data(), b.data());
        if l + 1 < dims.len() {
            x.iter_mut().for_each(|v| *v = v.tanh());
        }
        debug_assert_eq!(x.len(), len * co);
    }
    Ok(Array2::from_shape_vec((len, dims.last().unwrap().1), x).expect("conv output length"))
}

fn stack_tape<'t>(
    params: &[Var<'t>],
    dims: &[(usize, usize)],
    pad: Padding,
    input: Var<'t>,
) -> Result<Var<'t>> {
    if params.len() != 2 * dims.len() {
        return Err(Error::shape(format!("{} parameter nodes for {} layers", params.len(), dims.len())));
    }
    let mut x = input;
    for l in 0..dims.len() {
        x = x.conv1d(params[2 * l], params[2 * l + 1], pad)?;
        if l + 1 < dims.len() {
            x = x.tanh();
        }
    }
    Ok(x)
}

/// Per-cell target-network parameters generated for one problem instance.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetNetParams {
    /// `N x P_cell`.
    pub slab: Array2<f64>,
    pub layout: TargetLayout,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl TargetNetParams {
    pub fn from_slab(slab: Array2<f64>, layout: TargetLayout) -> Result<Self> {
        let p = layout.p_cell();
        if slab.ncols() != p {
            return Err(Error::shape(format!("slab has {} columns, layout needs {p}", slab.ncols())));
        }
        let n = slab.nrows();
        let cols = |lo: usize, hi: usize| -> Vec<f64> {
            (0..n).flat_map(|i| (lo..hi).map(move |k| (i, k))).map(|(i, k)| slab[[i, k]]).collect()
        };
        let w1 = cols(0, layout.b1_offset());
        let b1 = cols(layout.b1_offset(), layout.w2_offset());
        let w2 = cols(layout.w2_offset(), layout.b2_offset());
        let b2 = cols(layout.b2_offset(), p);
        Ok(TargetNetParams { slab, layout, w1, b1, w2, b2 })
    }

    pub fn n_cells(&self) -> usize {
        self.slab.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.slab.len()
    }

    /// Logits `N x 6` for the cell averages `u`.
    pub fn logits(&self, u: ArrayView2<'_, f64>, pad: Padding) -> Result<Array2<f64>> {
        let n = self.n_cells();
        let lay = self.layout;
        if u.dim() != (n, lay.n_components) {
            return Err(Error::shape(format!(
                "target network built for {n} x {}, got {:?}",
                lay.n_components,
                u.dim()
            )));
        }
        let x: Vec<f64> = u.iter().copied().collect();
        let s1 = ConvShape { len: n, kernel: TARGET_KERNEL, c_in: lay.n_components, c_out: lay.hidden, local: true };
        let mut h = conv1d_forward(s1, pad, &x, &self.w1, &self.b1);
        h.iter_mut().for_each(|v| *v = v.tanh());
        let s2 = ConvShape { len: n, kernel: 1, c_in: lay.hidden, c_out: N_LOGITS, local: true };
        let out = conv1d_forward(s2, pad, &h, &self.w2, &self.b2);
        Ok(Array2::from_shape_vec((n, N_LOGITS), out).expect("conv output length"))
    }
}

/// Runs the hypernetwork on plain arrays.
pub fn hypernet_forward(
    cfg: &HyperNetConfig,
    store: &ParamStore,
    metadata: ArrayView2<'_, f64>,
    bc: BoundaryCondition,
) -> Result<TargetNetParams> {
    if metadata.ncols() != cfg.in_channels() {
        return Err(Error::shape(format!(
            "metadata has {} channels, hypernetwork expects {}",
            metadata.ncols(),
            cfg.in_channels()
        )));
    }
    count_hypernet_call();
    let slab = stack_forward(store, HYPER_PREFIX, &cfg.layer_dims(), bc.into(), metadata)?;
    TargetNetParams::from_slab(slab, cfg.target)
}

/// Target-network parameters as tape nodes.
#[derive(Clone, Copy)]
pub struct TargetVars<'t> {
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
    pub layout: TargetLayout,
}

fn slab_gather<'t>(slab: Var<'t>, n: usize, p: usize, lo: usize, hi: usize, shape: Vec<usize>) -> Result<Var<'t>> {
    let idx: Vec<usize> = (0..n).flat_map(|i| (lo..hi).map(move |k| i * p + k)).collect();
    slab.gather(Rc::new(idx), shape)
}

impl<'t> TargetVars<'t> {
    pub fn unpack(slab: Var<'t>, layout: TargetLayout) -> Result<Self> {
        let (n, p) = slab.dims2()?;
        if p != layout.p_cell() {
            return Err(Error::shape(format!("slab has {p} columns, layout needs {}", layout.p_cell())));
        }
        let (c, h) = (layout.n_components, layout.hidden);
        Ok(TargetVars {
            w1: slab_gather(slab, n, p, 0, layout.b1_offset(), vec![n, TARGET_KERNEL, c, h])?,
            b1: slab_gather(slab, n, p, layout.b1_offset(), layout.w2_offset(), vec![n, h])?,
            w2: slab_gather(slab, n, p, layout.w2_offset(), layout.b2_offset(), vec![n, 1, h, N_LOGITS])?,
            b2: slab_gather(slab, n, p, layout.b2_offset(), p, vec![n, N_LOGITS])?,
            layout,
        })
    }

    /// Logits `N x 6` for the state node `u` (`N x C`).
    pub fn logits(&self, u: Var<'t>, pad: Padding) -> Result<Var<'t>> {
        u.conv1d_local(self.w1, self.b1, pad)?.tanh().conv1d_local(self.w2, self.b2, pad)
    }
}

/// Hypernetwork on the tape; `params` are the store's entries in order.
pub fn hypernet_tape<'t>(
    cfg: &HyperNetConfig,
    params: &[Var<'t>],
    metadata: Var<'t>,
    bc: BoundaryCondition,
) -> Result<TargetVars<'t>> {
    count_hypernet_call();
    let slab = stack_tape(params, &cfg.layer_dims(), bc.into(), metadata)?;
    TargetVars::unpack(slab, cfg.target)
}

/// Rows fed to FluxNet: faces `1..=N` under periodic boundaries (face 0
/// duplicates face N), all faces `0..=N` otherwise.
pub fn fluxnet_face_range(bc: BoundaryCondition, n_faces: usize) -> std::ops::Range<usize> {
    match bc {
        BoundaryCondition::Periodic => 1..n_faces,
        BoundaryCondition::NoFlux => 0..n_faces,
    }
}

/// FluxNet input rows `(u^-_0, u^+_0, u^-_1, u^+_1, ...)` for the given faces.
pub fn fluxnet_features(u_minus: ArrayView2<'_, f64>, u_plus: ArrayView2<'_, f64>, rows: std::ops::Range<usize>) -> Array2<f64> {
    let c = u_minus.ncols();
    let first = rows.start;
    Array2::from_shape_fn((rows.len(), 2 * c), |(j, k)| {
        let src = if k % 2 == 0 { u_minus } else { u_plus };
        src[[first + j, k / 2]]
    })
}

/// FluxNet on plain arrays: one flux per face, `(N + 1) x C`.
pub fn fluxnet_forward(
    cfg: &FluxNetConfig,
    store: &ParamStore,
    bc: BoundaryCondition,
    u_minus: ArrayView2<'_, f64>,
    u_plus: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    let faces = u_minus.nrows();
    if u_minus.dim() != u_plus.dim() || u_minus.ncols() != cfg.n_components {
        return Err(Error::shape(format!("FluxNet inputs {:?} / {:?}", u_minus.dim(), u_plus.dim())));
    }
    let rows = fluxnet_face_range(bc, faces);
    let x = fluxnet_features(u_minus, u_plus, rows.clone());
    let y = stack_forward(store, FLUX_PREFIX, &cfg.layer_dims(), bc.into(), x.view())?;
    let mut out = Array2::zeros((faces, cfg.n_components));
    for (j, row) in rows.enumerate() {
        out.row_mut(row).assign(&y.row(j));
    }
    if bc == BoundaryCondition::Periodic {
        let last = out.row(faces - 1).to_owned();
        out.row_mut(0).assign(&last);
    }
    Ok(out)
}

/// FluxNet on the tape; `u_minus`, `u_plus` are `(N + 1) x C`.
pub fn fluxnet_tape<'t>(
    cfg: &FluxNetConfig,
    params: &[Var<'t>],
    bc: BoundaryCondition,
    u_minus: Var<'t>,
    u_plus: Var<'t>,
) -> Result<Var<'t>> {
    let (faces, c) = u_minus.dims2()?;
    if u_plus.dims2()? != (faces, c) || c != cfg.n_components {
        return Err(Error::shape("FluxNet input shapes"));
    }
    let rows = fluxnet_face_range(bc, faces);
    let face_ids: Vec<usize> = rows.clone().collect();
    let um = u_minus.rows(&face_ids)?;
    let up = u_plus.rows(&face_ids)?;
    let mut parts = Vec::with_capacity(2 * c);
    for k in 0..c {
        parts.push(um.col(k)?);
        parts.push(up.col(k)?);
    }
    let x = Var::concat_cols(&parts)?;
    let y = stack_tape(params, &cfg.layer_dims(), bc.into(), x)?;
    let map: Vec<usize> = match bc {
        BoundaryCondition::Periodic => std::iter::once(faces - 2).chain(0..faces - 1).collect(),
        BoundaryCondition::NoFlux => (0..faces).collect(),
    };
    y.rows(&map)
}

/// A trainable learned scheme: the hypernetwork, optionally with FluxNet.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub hyper: HyperNetConfig,
    pub flux: Option<FluxNetConfig>,
    /// `hyper.*` entries followed by `flux.*` entries.
    pub params: ParamStore,
}

impl Model {
    pub fn new(n_components: usize, flux_kernel: Option<usize>, seed: u64) -> Result<Self> {
        let hyper = HyperNetConfig::new(n_components);
        let flux = flux_kernel.map(|k| FluxNetConfig::new(n_components, k));
        Model::from_configs(hyper, flux, seed)
    }

    pub fn from_configs(hyper: HyperNetConfig, flux: Option<FluxNetConfig>, seed: u64) -> Result<Self> {
        let mut params = init_hypernet(&hyper, seed)?;
        if let Some(f) = &flux {
            if f.n_components != hyper.target.n_components {
                return Err(Error::invalid("FluxNet and hypernetwork disagree on component count"));
            }
            let fp = init_fluxnet(f, seed)?;
            for (n, t) in fp.iter() {
                params.insert(n, t.clone())?;
            }
        }
        Ok(Model { hyper, flux, params })
    }

    pub fn n_components(&self) -> usize {
        self.hyper.target.n_components
    }

    pub fn has_flux(&self) -> bool {
        self.flux.is_some()
    }

    pub fn hyper_store(&self) -> ParamStore {
        self.sub_store(HYPER_PREFIX)
    }

    pub fn flux_store(&self) -> ParamStore {
        self.sub_store(FLUX_PREFIX)
    }

    fn sub_store(&self, prefix: &str) -> ParamStore {
        let mut s = ParamStore::new();
        for i in self.params.with_prefix(prefix) {
            s.insert(self.params.names()[i].clone(), self.params.tensors()[i].clone()).expect("unique names");
        }
        s
    }

    pub fn generate(&self, grid: &Grid, bc: BoundaryCondition, initial: &State) -> Result<TargetNetParams> {
        let meta = build_metadata(grid, initial)?;
        hypernet_forward(&self.hyper, &self.params, meta.view(), bc)
    }

    /// Splits parameter nodes (in store order) into hypernetwork and FluxNet parts.
    pub fn split_vars<'a, 't>(&self, vars: &'a [Var<'t>]) -> (&'a [Var<'t>], &'a [Var<'t>]) {
        let nh = self.params.with_prefix(HYPER_PREFIX).len();
        vars.split_at(nh)
    }

    fn meta_entries(&self) -> Vec<(String, Tensor)> {
        let h = &self.hyper;
        let mut v = vec![(
            "meta.hyper".to_string(),
            Tensor::from_vec(
                [h.layers, h.channels, h.kernel, h.target.hidden, h.target.n_components].map(|x| x as f64).to_vec(),
            ),
        )];
        if let Some(f) = &self.flux {
            v.push((
                "meta.flux".to_string(),
                Tensor::from_vec([f.layers, f.channels, f.kernel, f.n_components].map(|x| x as f64).to_vec()),
            ));
        }
        v
    }

    pub fn encode(&self) -> Vec<u8> {
        self.encode_with(&[])
    }

    /// Encodes the model plus extra entries (optimizer state, training info).
    pub fn encode_with(&self, extra: &[(String, Tensor)]) -> Vec<u8> {
        let meta = self.meta_entries();
        encode_entries(
            meta.iter()
                .chain(extra.iter())
                .map(|(n, t)| (n.as_str(), t))
                .chain(self.params.iter()),
        )
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::io::write_atomic(path, &self.encode())
    }

    pub fn save_with(&self, path: &std::path::Path, extra: &[(String, Tensor)]) -> Result<()> {
        crate::io::write_atomic(path, &self.encode_with(extra))
    }

    /// Decodes a model; unrecognized non-parameter entries are returned separately.
    pub fn decode(bytes: &[u8]) -> Result<(Self, Vec<(String, Tensor)>)> {
        let entries = decode_entries(bytes)?;
        let find = |name: &str| entries.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let ints = |t: &Tensor| -> Vec<usize> { t.data().iter().map(|&v| v as usize).collect() };
        let bad = |reason: String| Error::Format { offset: 0, reason };
        let h = ints(find("meta.hyper").ok_or_else(|| bad("checkpoint lacks meta.hyper".into()))?);
        if h.len() != 5 {
            return Err(bad("meta.hyper must hold 5 values".into()));
        }
        let hyper = HyperNetConfig {
            layers: h[0],
            channels: h[1],
            kernel: h[2],
            target: TargetLayout { hidden: h[3], n_components: h[4] },
        };
        hyper.validate().map_err(|e| bad(e.to_string()))?;
        let flux = match find("meta.flux") {
            Some(t) => {
                let f = ints(t);
                if f.len() != 4 {
                    return Err(bad("meta.flux must hold 4 values".into()));
                }
                let cfg = FluxNetConfig { layers: f[0], channels: f[1], kernel: f[2], n_components: f[3] };
                cfg.validate().map_err(|e| bad(e.to_string()))?;
                Some(cfg)
            }
            None => None,
        };
        let mut params = ParamStore::new();
        let mut extra = Vec::new();
        for (n, t) in entries {
            if n.starts_with(HYPER_PREFIX) || n.starts_with(FLUX_PREFIX) {
                params.insert(n, t)?;
            } else if !n.starts_with("meta.") {
                extra.push((n, t));
            }
        }
        // shapes must match a fresh model of the same configuration
        let fresh = Model::from_configs(hyper, flux, 0)?;
        if fresh.params.names() != params.names()
            || fresh.params.tensors().iter().zip(params.tensors()).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(bad("parameter names or shapes do not match the stored configuration".into()));
        }
        Ok((Model { hyper, flux, params }, extra))
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, Vec<(String, Tensor)>)> {
        Model::decode(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::grid::make_grid;
    use ndarray::Array2;

    fn sine_state(g: &Grid) -> State {
        State::new(Array2::from_shape_fn((g.n_cells, 1), |(i, _)| g.x_mid[i].sin()), 0.0)
    }

    fn perturbed(model: &mut Model, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in model.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += scale * rng.gen_range(-1.0..1.0));
        }
    }

    #[test]
    fn scalar_target_has_78_parameters_per_cell() {
        assert_eq!(TargetLayout::new(1).p_cell(), 78);
        assert_eq!(TargetLayout::new(2).p_cell(), 6 * 11 + 42);
        for n in [32, 64, 128, 256] {
            assert_eq!(TargetLayout::new(1).total(n), n * 78);
        }
    }

    #[test]
    fn metadata_channels() {
        let g = make_grid(0.0, 1.0, 8).unwrap();
        let st = State::new(Array2::from_shape_fn((8, 1), |(i, _)| i as f64 * 0.5), 0.0);
        let m = build_metadata(&g, &st).unwrap();
        assert!(m.column(0).iter().all(|&v| v == 0.125));
        assert!((m[[0, 1]] - (-1.0 + 0.125)).abs() < 1e-15);
        assert!((m[[7, 1]] - (1.0 - 0.125)).abs() < 1e-15);
        assert_eq!(m.column(2), st.u.column(0));
        assert!(build_metadata(&make_grid(0.0, 1.0, 9).unwrap(), &st).is_err());
    }

    #[test]
    fn init_generates_linear_weight_logits() {
        let model = Model::new(1, None, 7).unwrap();
        let g = make_grid(0.0, 2.0 * std::f64::consts::PI, 32).unwrap();
        let st = sine_state(&g);
        let t = model.generate(&g, BoundaryCondition::Periodic, &st).unwrap();
        assert_eq!(t.n_params(), 32 * 78);
        let z = t.logits(st.u.view(), Padding::Circular).unwrap();
        for row in z.rows() {
            for half in [0, 3] {
                let e: Vec<f64> = (0..3).map(|k| row[half + k].exp()).collect();
                let s: f64 = e.iter().sum();
                for k in 0..3 {
                    assert!((e[k] / s - LINEAR_WEIGHTS[k]).abs() < 1e-15);
                }
            }
        }
        let g64 = make_grid(0.0, 2.0 * std::f64::consts::PI, 64).unwrap();
        let t64 = model.generate(&g64, BoundaryCondition::Periodic, &sine_state(&g64)).unwrap();
        assert_eq!(t64.slab.ncols(), t.slab.ncols());
        assert_eq!(t64.n_params(), 64 * 78);
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::new(2, Some(5), 11).unwrap();
        let b = Model::new(2, Some(5), 11).unwrap();
        let c = Model::new(2, Some(5), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let fs = a.flux_store();
        let last = fs.get("flux.3.weight").unwrap();
        assert!(last.data().iter().all(|&v| v == 0.0));
        assert!(fs.get("flux.3.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn slab_permutes_with_cyclic_shift() {
        let mut model = Model::new(1, None, 3).unwrap();
        perturbed(&mut model, 4, 0.05);
        let g = make_grid(0.0, 2.0 * std::f64::consts::PI, 32).unwrap();
        let st = sine_state(&g);
        let meta = build_metadata(&g, &st).unwrap();
        let shift = 5;
        let shifted = Array2::from_shape_fn(meta.dim(), |(i, k)| meta[[(i + 32 - shift) % 32, k]]);
        let a = hypernet_forward(&model.hyper, &model.params, meta.view(), BoundaryCondition::Periodic).unwrap();
        let b = hypernet_forward(&model.hyper, &model.params, shifted.view(), BoundaryCondition::Periodic).unwrap();
        for i in 0..32 {
            for k in 0..78 {
                assert!((b.slab[[(i + shift) % 32, k]] - a.slab[[i, k]]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn targetnet_examples() {
        let lay = TargetLayout::new(1);
        let mut slab = Array2::zeros((10, lay.p_cell()));
        for (o, v) in [0.5, -1.0, 2.0, 0.0, 0.25, 3.0].iter().enumerate() {
            slab.column_mut(lay.b2_offset() + o).fill(*v);
        }
        let t = TargetNetParams::from_slab(slab, lay).unwrap();
        let u = Array2::from_shape_fn((10, 1), |(i, _)| i as f64);
        let z = t.logits(u.view(), Padding::Replicate).unwrap();
        assert_eq!(z.dim(), (10, 6));
        for row in z.rows() {
            assert_eq!(row.to_vec(), vec![0.5, -1.0, 2.0, 0.0, 0.25, 3.0]);
        }
        assert!(t.logits(Array2::zeros((9, 1)).view(), Padding::Replicate).is_err());
    }

    #[test]
    fn tape_and_plain_forwards_agree() {
        let mut model = Model::new(2, Some(5), 21).unwrap();
        perturbed(&mut model, 22, 0.1);
        let g = make_grid(-5.0, 5.0, 16).unwrap();
        let st = State::new(
            Array2::from_shape_fn((16, 2), |(i, c)| 1.0 + 0.3 * ((i + 3 * c) as f64).sin()),
            0.0,
        );
        let meta = build_metadata(&g, &st).unwrap();
        for bc in [BoundaryCondition::Periodic, BoundaryCondition::NoFlux] {
            let plain = model.generate(&g, bc, &st).unwrap();
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = model.params.tensors().iter().map(|t| tape.param(t.clone())).collect();
            let (hv, fv) = model.split_vars(&vars);
            let mv = tape.constant(Tensor::from_array2(meta.view()));
            let tv = hypernet_tape(&model.hyper, hv, mv, bc).unwrap();
            let uv = tape.constant(Tensor::from_array2(st.u.view()));
            let z_tape = tv.logits(uv, bc.into()).unwrap().value().to_array2().unwrap();
            let z_plain = plain.logits(st.u.view(), bc.into()).unwrap();
            assert!((&z_tape - &z_plain).iter().all(|d| d.abs() < 1e-13));

            let um = Array2::from_shape_fn((17, 2), |(j, c)| 1.0 + 0.1 * (j * (c + 1)) as f64);
            let up = um.mapv(|v| v * 1.01);
            let fp = fluxnet_forward(model.flux.as_ref().unwrap(), &model.params, bc, um.view(), up.view()).unwrap();
            let ft = fluxnet_tape(
                model.flux.as_ref().unwrap(),
                fv,
                bc,
                tape.constant(Tensor::from_array2(um.view())),
                tape.constant(Tensor::from_array2(up.view())),
            )
            .unwrap()
            .value()
            .to_array2()
            .unwrap();
            assert!((&fp - &ft).iter().all(|d| d.abs() < 1e-13));
            if bc == BoundaryCondition::Periodic {
                assert_eq!(fp.row(0), fp.row(16));
            }
        }
    }

    #[test]
    fn pointwise_fluxnet_is_local() {
        let mut model = Model::new(3, Some(1), 5).unwrap();
        perturbed(&mut model, 6, 0.2);
        let cfg = model.flux.unwrap();
        let um = Array2::from_shape_fn((17, 3), |(j, c)| 1.0 + 0.05 * (j + c) as f64);
        let up = um.mapv(|v| v + 0.1);
        let a = fluxnet_forward(&cfg, &model.params, BoundaryCondition::NoFlux, um.view(), up.view()).unwrap();
        let mut um2 = um.clone();
        um2[[8, 1]] += 0.5;
        let b = fluxnet_forward(&cfg, &model.params, BoundaryCondition::NoFlux, um2.view(), up.view()).unwrap();
        for j in 0..17 {
            if j == 8 {
                assert_ne!(a.row(j), b.row(j));
            } else {
                assert_eq!(a.row(j), b.row(j));
            }
        }
    }

    #[test]
    fn fresh_fluxnet_outputs_zero_and_is_shift_equivariant() {
        let model = Model::new(1, Some(5), 5).unwrap();
        let cfg = model.flux.unwrap();
        let um = Array2::from_shape_fn((17, 1), |(j, _)| (j as f64).cos());
        let f = fluxnet_forward(&cfg, &model.params, BoundaryCondition::Periodic, um.view(), um.view()).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));

        let mut model = model;
        perturbed(&mut model, 8, 0.2);
        let um = Array2::from_shape_fn((17, 1), |(j, _)| ((j % 16) as f64 * 0.7).sin());
        let up = um.mapv(|v| 0.5 * v + 0.1);
        let shift = 3;
        // faces 1..=16 carry the data; shifting them cyclically shifts the output
        let sh = |a: &Array2<f64>| {
            Array2::from_shape_fn((17, 1), |(j, _)| {
                let face = if j == 0 { 16 } else { j };
                let src = (face - 1 + 16 - shift) % 16 + 1;
                a[[src, 0]]
            })
        };
        let a = fluxnet_forward(&cfg, &model.params, BoundaryCondition::Periodic, um.view(), up.view()).unwrap();
        let b = fluxnet_forward(&cfg, &model.params, BoundaryCondition::Periodic, sh(&um).view(), sh(&up).view()).unwrap();
        let a_sh = sh(&a);
        assert!((&a_sh - &b).iter().all(|d| d.abs() < 1e-13));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut model = Model::new(1, Some(5), 9).unwrap();
        perturbed(&mut model, 10, 0.3);
        let extra = vec![("train.epoch".to_string(), Tensor::scalar(4.0))];
        let bytes = model.encode_with(&extra);
        let (back, ex) = Model::decode(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(ex, extra);
        for (a, b) in model.params.tensors().iter().zip(back.params.tensors()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.hwck");
        model.save(&p).unwrap();
        assert_eq!(Model::load(&p).unwrap().0, model);
        assert!(matches!(Model::decode(&bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
    }
}
