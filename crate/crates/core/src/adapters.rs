//! Low-rank adapters over a frozen velocity network, plus the optional
//! learned projection of the prefix mask.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_dim, Error, Result};
use crate::numerics::{Adam, Matrix, Rng};
use crate::policy::{ActionChunk, ChunkRole, ChunkSpec, Normalizer, PolicyParams, VelocityField};
use crate::remac::PrefixMask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterTargets {
    All,
    Layers(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: AdapterTargets,
    pub mask_embedding: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 4.0,
            targets: AdapterTargets::All,
            mask_embedding: true,
        }
    }
}

impl AdapterConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Raw mask bits, or their projection when an embedding is present.
pub fn mask_features(mask: &PrefixMask, projection: Option<&Matrix>) -> Vec<f64> {
    let bits = mask.weights();
    match projection {
        Some(p) => p.matvec(&bits),
        None => bits,
    }
}

/// `W += scale · up · down` applied to one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowRankPair {
    pub layer: usize,
    /// `r × in`.
    pub down: Matrix,
    /// `out × r`.
    pub up: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterGrads {
    pub down: Vec<Matrix>,
    pub up: Vec<Matrix>,
    pub projection: Option<Matrix>,
}

impl AdapterGrads {
    pub fn accumulate(&mut self, other: &AdapterGrads, scale: f64) {
        for (a, b) in self.down.iter_mut().zip(&other.down) {
            a.add_scaled(scale, b).expect("same adapter");
        }
        for (a, b) in self.up.iter_mut().zip(&other.up) {
            a.add_scaled(scale, b).expect("same adapter");
        }
        if let (Some(a), Some(b)) = (self.projection.as_mut(), other.projection.as_ref()) {
            a.add_scaled(scale, b).expect("same adapter");
        }
    }

    /// Same block order as [`AdaptedPolicy::flat_trainable`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (d, u) in self.down.iter().zip(&self.up) {
            out.extend_from_slice(d.as_slice());
            out.extend_from_slice(u.as_slice());
        }
        if let Some(p) = &self.projection {
            out.extend_from_slice(p.as_slice());
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Intermediate values of one adapted forward pass.
#[derive(Clone, Debug)]
pub struct AdaptedCache {
    /// `inputs[i]` feeds layer `i`; the last entry is the output.
    values: Vec<Vec<f64>>,
    /// `down · input` for each adapted layer, indexed like `pairs`.
    low: Vec<Vec<f64>>,
    mask_bits: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedPolicy {
    base: PolicyParams,
    pub config: AdapterConfig,
    pub pairs: Vec<LowRankPair>,
    pub mask_projection: Option<Matrix>,
    pub enabled: bool,
    merged: bool,
}

impl AdaptedPolicy {
    /// Attach fresh adapters: Gaussian `down`, zero `up`, identity mask
    /// projection. The adapted output equals the base output at this point.
    pub fn attach(base: PolicyParams, cfg: &AdapterConfig, rng: &mut Rng) -> Result<Self> {
        base.validate()?;
        if cfg.rank == 0 {
            return Err(Error::Adapter("rank must be >= 1".into()));
        }
        if !(cfg.alpha.is_finite() && cfg.alpha > 0.0) {
            return Err(Error::Adapter("alpha must be > 0".into()));
        }
        let n_layers = base.net.layers.len();
        let targets: Vec<usize> = match &cfg.targets {
            AdapterTargets::All => (0..n_layers).collect(),
            AdapterTargets::Layers(ls) => {
                let mut v: Vec<usize> = ls.iter().copied().filter(|&l| l < n_layers).collect();
                v.sort_unstable();
                v.dedup();
                v
            }
        };
        if targets.is_empty() {
            return Err(Error::Adapter("target selection matches no layer".into()));
        }
        let time_cols = base.layout().time;
        let pairs = targets
            .into_iter()
            .map(|l| {
                let layer = &base.net.layers[l];
                let (out, inp) = (layer.output_dim(), layer.input_dim());
                let std = 1.0 / (inp as f64).sqrt();
                let down = Matrix::from_fn(cfg.rank, inp, |_, c| {
                    let v = rng.normal() * std;
                    if l == 0 && (time_cols.0..time_cols.1).contains(&c) {
                        0.0
                    } else {
                        v
                    }
                });
                LowRankPair {
                    layer: l,
                    down,
                    up: Matrix::zeros(out, cfg.rank),
                }
            })
            .collect();
        let p = base.spec.horizon;
        Ok(Self {
            mask_projection: cfg.mask_embedding.then(|| Matrix::identity(p)),
            base,
            config: cfg.clone(),
            pairs,
            enabled: true,
            merged: false,
        })
    }

    /// Rebuild an unmerged adapter from stored parts, checking every shape
    /// against the base network.
    pub fn from_parts(
        base: PolicyParams,
        config: AdapterConfig,
        pairs: Vec<LowRankPair>,
        mask_projection: Option<Matrix>,
    ) -> Result<Self> {
        base.validate()?;
        for pair in &pairs {
            let layer = base
                .net
                .layers
                .get(pair.layer)
                .ok_or_else(|| Error::Adapter(format!("adapter targets missing layer {}", pair.layer)))?;
            check_dim("adapter down rows", config.rank, pair.down.rows())?;
            check_dim("adapter down cols", layer.input_dim(), pair.down.cols())?;
            check_dim("adapter up rows", layer.output_dim(), pair.up.rows())?;
            check_dim("adapter up cols", config.rank, pair.up.cols())?;
        }
        if let Some(m) = &mask_projection {
            check_dim("mask projection", base.spec.horizon, m.rows())?;
            check_dim("mask projection", base.spec.horizon, m.cols())?;
        }
        Ok(Self {
            base,
            config,
            pairs,
            mask_projection,
            enabled: true,
            merged: false,
        })
    }

    pub fn base(&self) -> &PolicyParams {
        &self.base
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    /// Columns of layer 0 that stay out of the adapter (time features).
    fn frozen_columns(&self, pair: &LowRankPair) -> (usize, usize) {
        if pair.layer == 0 {
            self.base.layout().time
        } else {
            (0, 0)
        }
    }

    pub fn trainable_param_count(&self) -> usize {
        let mut n = 0;
        for pair in &self.pairs {
            let (a, b) = self.frozen_columns(pair);
            n += pair.down.rows() * (pair.down.cols() - (b - a));
            n += pair.up.rows() * pair.up.cols();
        }
        n + self.mask_projection.as_ref().map_or(0, |m| m.rows() * m.cols())
    }

    /// Added parameters relative to the base network.
    pub fn param_ratio(&self) -> f64 {
        self.trainable_param_count() as f64 / self.base.net.param_count() as f64
    }

    pub fn mask_features(&self, mask: Option<&PrefixMask>) -> Vec<f64> {
        match mask {
            Some(m) => mask_features(m, self.mask_projection.as_ref()),
            None => vec![0.0; self.base.spec.horizon],
        }
    }

    /// Adapted forward in normalized coordinates with an activation record.
    pub fn forward_train(
        &self,
        chunk_n: &[f64],
        obs_n: &[f64],
        tau: f64,
        mask: Option<&PrefixMask>,
    ) -> Result<(Vec<f64>, AdaptedCache)> {
        let x = self
            .base
            .layout()
            .assemble(chunk_n, obs_n, tau, &self.mask_features(mask));
        check_dim("net input", self.base.net.input_dim(), x.len())?;
        let mut values = Vec::with_capacity(self.base.net.layers.len() + 1);
        let mut low = Vec::with_capacity(self.pairs.len());
        values.push(x);
        let mut p = 0;
        for (i, layer) in self.base.net.layers.iter().enumerate() {
            let input = values.last().unwrap();
            let mut z = layer.affine(input);
            if p < self.pairs.len() && self.pairs[p].layer == i {
                let pair = &self.pairs[p];
                let h = pair.down.matvec(input);
                let scale = self.config.scale();
                let bump = pair.up.matvec(&h);
                for (zi, bi) in z.iter_mut().zip(&bump) {
                    *zi += scale * bi;
                }
                low.push(h);
                p += 1;
            }
            layer.activate(&mut z);
            values.push(z);
        }
        let y = values.last().unwrap().clone();
        Ok((
            y,
            AdaptedCache {
                values,
                low,
                mask_bits: mask.map(|m| m.weights()),
            },
        ))
    }

    pub fn zero_grads(&self) -> AdapterGrads {
        AdapterGrads {
            down: self
                .pairs
                .iter()
                .map(|p| Matrix::zeros(p.down.rows(), p.down.cols()))
                .collect(),
            up: self
                .pairs
                .iter()
                .map(|p| Matrix::zeros(p.up.rows(), p.up.cols()))
                .collect(),
            projection: self.mask_projection.as_ref().map(|m| Matrix::zeros(m.rows(), m.cols())),
        }
    }

    /// Gradients of `y · dy` with respect to adapter parameters only. Frozen
    /// columns get their true gradient here and are masked in the update.
    pub fn backward_train(&self, cache: &AdaptedCache, dy: &[f64]) -> Result<AdapterGrads> {
        let layers = &self.base.net.layers;
        if cache.values.len() != layers.len() + 1 || cache.low.len() != self.pairs.len() {
            return Err(Error::StaleCache("adapter cache does not match this policy".into()));
        }
        check_dim("backward seed", self.base.net.output_dim(), dy.len())?;
        let scale = self.config.scale();
        let mut grads = self.zero_grads();
        let mut delta = dy.to_vec();
        let mut p = self.pairs.len();
        for (i, layer) in layers.iter().enumerate().rev() {
            layer.backprop_activation(&cache.values[i + 1], &mut delta);
            let input = &cache.values[i];
            let mut next = layer.weight.matvec_t(&delta);
            if p > 0 && self.pairs[p - 1].layer == i {
                p -= 1;
                let pair = &self.pairs[p];
                let h = &cache.low[p];
                grads.up[p].add_outer(scale, &delta, h);
                let dh: Vec<f64> = pair.up.matvec_t(&delta).into_iter().map(|v| v * scale).collect();
                grads.down[p].add_outer(1.0, &dh, input);
                if i > 0 || grads.projection.is_some() {
                    for (n, v) in next.iter_mut().zip(pair.down.matvec_t(&dh)) {
                        *n += v;
                    }
                }
            }
            delta = next;
        }
        if let (Some(gp), Some(bits)) = (grads.projection.as_mut(), cache.mask_bits.as_ref()) {
            let (a, b) = self.base.layout().mask;
            gp.add_outer(1.0, &delta[a..b], bits);
        }
        Ok(grads)
    }

    fn param_blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for pair in self.pairs.iter_mut() {
            out.push((format!("adapter{}.down", pair.layer), pair.down.as_mut_slice()));
            out.push((format!("adapter{}.up", pair.layer), pair.up.as_mut_slice()));
        }
        if let Some(m) = self.mask_projection.as_mut() {
            out.push(("mask_projection".to_string(), m.as_mut_slice()));
        }
        out
    }

    pub fn apply_grads(&mut self, adam: &mut Adam, grads: &AdapterGrads) -> Result<()> {
        if self.merged {
            return Err(Error::Adapter("adapters already merged".into()));
        }
        // time-feature columns of the first layer are not adapted
        let mut down = grads.down.clone();
        for (g, pair) in down.iter_mut().zip(&self.pairs) {
            let (a, b) = self.frozen_columns(pair);
            for r in 0..g.rows() {
                for c in a..b {
                    g.set(r, c, 0.0);
                }
            }
        }
        let mut flat: Vec<&[f64]> = Vec::new();
        for (d, u) in down.iter().zip(&grads.up) {
            flat.push(d.as_slice());
            flat.push(u.as_slice());
        }
        if let Some(p) = &grads.projection {
            flat.push(p.as_slice());
        }
        let mut blocks = self.param_blocks_mut();
        adam.step(&mut blocks, &flat)
    }

    /// Adapter parameters in a fixed order, for gradient checks.
    pub fn flat_trainable(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for pair in &self.pairs {
            out.extend_from_slice(pair.down.as_slice());
            out.extend_from_slice(pair.up.as_slice());
        }
        if let Some(m) = &self.mask_projection {
            out.extend_from_slice(m.as_slice());
        }
        out
    }

    pub fn set_flat_trainable(&mut self, flat: &[f64]) -> Result<()> {
        check_dim("adapter params", self.flat_trainable().len(), flat.len())?;
        let mut off = 0;
        for (_, block) in self.param_blocks_mut() {
            let n = block.len();
            block.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Fold the adapters into standalone parameters. Allowed once.
    pub fn merge(&mut self) -> Result<PolicyParams> {
        if self.merged {
            return Err(Error::Adapter("adapters were already merged; attach again".into()));
        }
        let scale = self.config.scale();
        let mut out = self.base.clone();
        for pair in &self.pairs {
            let delta = pair.up.matmul(&pair.down)?;
            out.net.layers[pair.layer].weight.add_scaled(scale, &delta)?;
        }
        out.mask_projection = self.mask_projection.clone();
        self.merged = true;
        Ok(out)
    }
}

impl VelocityField for AdaptedPolicy {
    fn chunk_spec(&self) -> &ChunkSpec {
        &self.base.spec
    }

    fn normalizer(&self) -> &Normalizer {
        &self.base.norm
    }

    fn velocity(&self, state: &ActionChunk, obs: &[f64], tau: f64, mask: Option<&PrefixMask>) -> Result<ActionChunk> {
        if !self.enabled {
            return self.base.velocity(state, obs, tau, None);
        }
        // shape and range checks are shared with the base path
        let spec = &self.base.spec;
        check_dim("chunk rows", spec.horizon, state.values.rows())?;
        check_dim("chunk cols", spec.action_dim, state.values.cols())?;
        check_dim("observation", self.base.obs_dim, obs.len())?;
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::InvalidArgument(format!("flow time {tau} outside [0, 1]")));
        }
        if !state.values.is_finite() || obs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("velocity input".into()));
        }
        if let Some(m) = mask {
            check_dim("mask length", spec.horizon, m.len())?;
        }
        let norm = &self.base.norm;
        let (y, _) = self.forward_train(&norm.norm_chunk(&state.values), &norm.norm_obs(obs), tau, mask)?;
        Ok(ActionChunk {
            role: ChunkRole::Intermediate,
            values: norm.denorm_velocity(&y, spec.horizon),
        })
    }
}

/// SHA-256 over the little-endian bytes of every network parameter.
pub fn params_checksum(params: &PolicyParams) -> String {
    let mut h = Sha256::new();
    for v in params.net.flat_params() {
        h.update(v.to_le_bytes());
    }
    if let Some(m) = &params.mask_projection {
        for v in m.as_slice() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Largest absolute output difference between two velocity fields over
/// random probes.
pub fn max_probe_gap<A: VelocityField + ?Sized, B: VelocityField + ?Sized>(
    a: &A,
    b: &B,
    obs_dim: usize,
    probes: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let spec = *a.chunk_spec();
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let state = ActionChunk {
            role: ChunkRole::Intermediate,
            values: Matrix::from_fn(spec.horizon, spec.action_dim, |_, _| rng.normal()),
        };
        let obs: Vec<f64> = (0..obs_dim).map(|_| rng.normal()).collect();
        let tau = rng.uniform();
        let d = rng.int_inclusive(0, spec.horizon - 1);
        let mask = crate::remac::prefix_mask(d, spec.horizon)?;
        let va = a.velocity(&state, &obs, tau, Some(&mask))?;
        let vb = b.velocity(&state, &obs, tau, Some(&mask))?;
        for (x, y) in va.values.as_slice().iter().zip(vb.values.as_slice()) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(worst)
}
