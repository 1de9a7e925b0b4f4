//! Masked-autoencoder transformer over point-cloud patches.
//!
//! The encoder only ever sees patches the masking plan left visible; masked
//! patches enter the decoder as a shared learnable token placed at their
//! centers, and dropped patches are never referenced at all. Projection
//! heads map the pooled scene feature and per-mask pooled decoder features
//! into the teacher embedding spaces.
//!
//! A forward pass returns an output bundle plus a cache; the backward pass
//! consumes the cache and accumulates into a gradient mirror of the model
//! (`zeros_like`), so training can share one `&PretrainModel` across scene
//! workers that each own their caches and mirrors.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::{expect_f64, read_array, write_array, ArrayData, ArrayEntry};
use crate::error::{Error, Result};
use crate::masking::MaskingPlan;
use crate::nn::{
    trunc_normal, Block, BlockCache, DropDecision, LayerNorm, LayerNormCache, Linear, Mlp,
    MlpCache, ParamVisitor,
};
use crate::pointcloud::PatchSet;
use crate::seeding::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub n_heads: usize,
    pub mlp_ratio: f64,
    pub drop_path: f64,
    /// Points per patch (K).
    pub patch_size: usize,
    /// Patches per scene (M).
    pub n_patches: usize,
    pub d_img: usize,
    pub d_txt: usize,
}

impl ModelConfig {
    /// Full-size configuration.
    pub fn base() -> Self {
        ModelConfig {
            embed_dim: 384,
            encoder_depth: 6,
            decoder_depth: 3,
            n_heads: 6,
            mlp_ratio: 4.0,
            drop_path: 0.1,
            patch_size: 32,
            n_patches: 128,
            d_img: 64,
            d_txt: 64,
        }
    }

    /// Reduced configuration that pretrains in minutes on a CPU.
    pub fn desk() -> Self {
        ModelConfig {
            embed_dim: 64,
            encoder_depth: 6,
            decoder_depth: 3,
            n_heads: 4,
            mlp_ratio: 4.0,
            drop_path: 0.1,
            patch_size: 16,
            n_patches: 64,
            d_img: 64,
            d_txt: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.n_heads == 0 {
            return Err(Error::Config("embed_dim and n_heads must be positive".into()));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.encoder_depth == 0 || self.decoder_depth == 0 {
            return Err(Error::Config("encoder and decoder need at least one block".into()));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::Config("drop_path must be in [0, 1)".into()));
        }
        if self.patch_size == 0 || self.n_patches == 0 {
            return Err(Error::Config("patch_size and n_patches must be positive".into()));
        }
        if self.d_img == 0 || self.d_txt == 0 {
            return Err(Error::Config("teacher dims must be positive".into()));
        }
        Ok(())
    }
}

/// Stochastic-depth rates rising linearly from 0 to `max_rate` across a
/// stack of `depth` blocks.
pub fn drop_schedule(depth: usize, max_rate: f64) -> Vec<f64> {
    if depth <= 1 {
        return vec![max_rate; depth];
    }
    (0..depth)
        .map(|i| max_rate * i as f64 / (depth - 1) as f64)
        .collect()
}

fn centers_matrix(patches: &PatchSet, indices: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((indices.len(), 3), |(i, j)| patches.centers[indices[i]][j])
}

/// Per-point shared MLP followed by a channelwise max over the patch.
/// The output is invariant to point order and to duplicated points.
#[derive(Debug, Clone)]
pub struct PointTokenizer {
    pub mlp: Mlp,
}

#[derive(Debug)]
pub struct TokenizerCache {
    per_patch: Vec<MlpCache>,
    /// For each patch, the point index that won the max in each channel.
    argmax: Vec<Vec<usize>>,
    patch_size: usize,
}

impl PointTokenizer {
    fn new(embed_dim: usize, rng: &mut impl Rng) -> Self {
        PointTokenizer {
            mlp: Mlp::new(3, embed_dim, embed_dim, rng),
        }
    }

    fn zeros_like(&self) -> Self {
        PointTokenizer {
            mlp: self.mlp.zeros_like(),
        }
    }

    /// Embeds the listed patches into (len, embed_dim) tokens from their
    /// center-relative coordinates.
    pub fn forward(&self, patches: &PatchSet, indices: &[usize]) -> (Array2<f64>, TokenizerCache) {
        let d = self.mlp.fc2.out_dim();
        let mut tokens = Array2::zeros((indices.len(), d));
        let mut per_patch = Vec::with_capacity(indices.len());
        let mut argmax = Vec::with_capacity(indices.len());
        for (row, &patch) in indices.iter().enumerate() {
            let locals = patches.locals(patch);
            let x = Array2::from_shape_fn((locals.len(), 3), |(i, j)| locals[i][j]);
            let (y, cache) = self.mlp.forward(&x);
            let mut winners = vec![0usize; d];
            for c in 0..d {
                let mut best = 0usize;
                for r in 1..y.nrows() {
                    if y[[r, c]] > y[[best, c]] {
                        best = r;
                    }
                }
                winners[c] = best;
                tokens[[row, c]] = y[[best, c]];
            }
            per_patch.push(cache);
            argmax.push(winners);
        }
        (
            tokens,
            TokenizerCache {
                per_patch,
                argmax,
                patch_size: patches.patch_size,
            },
        )
    }

    fn backward(&self, cache: &TokenizerCache, d_tokens: &Array2<f64>, grad: &mut PointTokenizer) {
        let d = d_tokens.ncols();
        for (row, (mlp_cache, winners)) in cache.per_patch.iter().zip(&cache.argmax).enumerate() {
            let mut dy = Array2::zeros((cache.patch_size, d));
            for c in 0..d {
                dy[[winners[c], c]] += d_tokens[[row, c]];
            }
            self.mlp.backward(mlp_cache, &dy, &mut grad.mlp);
        }
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        self.mlp.visit_params(prefix, f);
    }
}

/// Transformer stack over visible patches. The positional embedding is
/// re-added at every block input, so attention always knows where each
/// patch sits even deep in the stack.
#[derive(Debug, Clone)]
pub struct EncoderStack {
    pub tokenizer: PointTokenizer,
    pub pos: Mlp,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

#[derive(Debug)]
pub struct EncoderCache {
    tokens: TokenizerCache,
    pos: MlpCache,
    blocks: Vec<BlockCache>,
    norm: LayerNormCache,
}

impl EncoderStack {
    fn new(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = config.embed_dim;
        EncoderStack {
            tokenizer: PointTokenizer::new(d, rng),
            pos: Mlp::new(3, d, d, rng),
            blocks: (0..config.encoder_depth)
                .map(|_| Block::new(d, config.n_heads, config.mlp_ratio, rng))
                .collect(),
            norm: LayerNorm::new(d),
        }
    }

    fn zeros_like(&self) -> Self {
        EncoderStack {
            tokenizer: self.tokenizer.zeros_like(),
            pos: self.pos.zeros_like(),
            blocks: self.blocks.iter().map(Block::zeros_like).collect(),
            norm: self.norm.zeros_like(),
        }
    }

    /// Encodes the listed patches; `drops` holds one decision per block.
    pub fn forward(
        &self,
        patches: &PatchSet,
        visible: &[usize],
        drops: &[DropDecision],
    ) -> Result<(Array2<f64>, EncoderCache)> {
        if drops.len() != self.blocks.len() {
            return Err(Error::Contract(format!(
                "expected {} encoder drop decisions, got {}",
                self.blocks.len(),
                drops.len()
            )));
        }
        if visible.is_empty() {
            return Err(Error::Degenerate("no visible patches to encode".into()));
        }
        let (tokens, tok_cache) = self.tokenizer.forward(patches, visible);
        let centers = centers_matrix(patches, visible);
        let (pos, pos_cache) = self.pos.forward(&centers);
        let mut x = tokens;
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for (block, &drop) in self.blocks.iter().zip(drops) {
            let (y, cache) = block.forward(&(&x + &pos), drop);
            block_caches.push(cache);
            x = y;
        }
        let (y, norm_cache) = self.norm.forward(&x);
        Ok((
            y,
            EncoderCache {
                tokens: tok_cache,
                pos: pos_cache,
                blocks: block_caches,
                norm: norm_cache,
            },
        ))
    }

    /// Encodes every patch with no masking and no stochastic depth; the
    /// feature extractor used by probing.
    pub fn encode_full(&self, patches: &PatchSet) -> Result<Array2<f64>> {
        let all: Vec<usize> = (0..patches.centers.len()).collect();
        let drops = vec![DropDecision::keep_all(); self.blocks.len()];
        Ok(self.forward(patches, &all, &drops)?.0)
    }

    fn backward(&self, cache: &EncoderCache, dy: &Array2<f64>, grad: &mut EncoderStack) {
        let mut dx = self.norm.backward(&cache.norm, dy, &mut grad.norm);
        let mut dpos = Array2::zeros(dx.raw_dim());
        for i in (0..self.blocks.len()).rev() {
            let d_in = self.blocks[i].backward(&cache.blocks[i], &dx, &mut grad.blocks[i]);
            dpos += &d_in;
            dx = d_in;
        }
        self.pos.backward(&cache.pos, &dpos, &mut grad.pos);
        self.tokenizer.backward(&cache.tokens, &dx, &mut grad.tokenizer);
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        self.tokenizer.visit_params(&format!("{prefix}.tokenizer"), f);
        self.pos.visit_params(&format!("{prefix}.pos"), f);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_params(&format!("{prefix}.block{i}"), f);
        }
        self.norm.visit_params(&format!("{prefix}.norm"), f);
    }
}

/// Decoder stack: runs over encoded visible tokens plus one shared mask
/// token per masked patch, each position re-injected at every block.
#[derive(Debug, Clone)]
pub struct DecoderStack {
    pub pos: Mlp,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

#[derive(Debug)]
pub struct DecoderCache {
    pos: MlpCache,
    blocks: Vec<BlockCache>,
    norm: LayerNormCache,
    n_visible: usize,
}

impl DecoderStack {
    fn new(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = config.embed_dim;
        DecoderStack {
            pos: Mlp::new(3, d, d, rng),
            blocks: (0..config.decoder_depth)
                .map(|_| Block::new(d, config.n_heads, config.mlp_ratio, rng))
                .collect(),
            norm: LayerNorm::new(d),
        }
    }

    fn zeros_like(&self) -> Self {
        DecoderStack {
            pos: self.pos.zeros_like(),
            blocks: self.blocks.iter().map(Block::zeros_like).collect(),
            norm: self.norm.zeros_like(),
        }
    }

    fn forward(
        &self,
        encoded_visible: &Array2<f64>,
        mask_token: &Array1<f64>,
        patches: &PatchSet,
        plan: &MaskingPlan,
        drops: &[DropDecision],
    ) -> Result<(Array2<f64>, DecoderCache)> {
        if drops.len() != self.blocks.len() {
            return Err(Error::Contract(format!(
                "expected {} decoder drop decisions, got {}",
                self.blocks.len(),
                drops.len()
            )));
        }
        let visible = plan.visible_indices();
        let masked = plan.masked_indices();
        if encoded_visible.nrows() != visible.len() {
            return Err(Error::Contract(format!(
                "decoder got {} visible tokens for a plan with {} visible patches",
                encoded_visible.nrows(),
                visible.len()
            )));
        }
        let d = encoded_visible.ncols();
        let n = visible.len() + masked.len();
        let mut x = Array2::zeros((n, d));
        x.slice_mut(s![..visible.len(), ..]).assign(encoded_visible);
        for i in 0..masked.len() {
            x.row_mut(visible.len() + i).assign(mask_token);
        }
        let mut order = visible.clone();
        order.extend_from_slice(&masked);
        let centers = centers_matrix(patches, &order);
        let (pos, pos_cache) = self.pos.forward(&centers);
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for (block, &drop) in self.blocks.iter().zip(drops) {
            let (y, cache) = block.forward(&(&x + &pos), drop);
            block_caches.push(cache);
            x = y;
        }
        let (y, norm_cache) = self.norm.forward(&x);
        Ok((
            y,
            DecoderCache {
                pos: pos_cache,
                blocks: block_caches,
                norm: norm_cache,
                n_visible: visible.len(),
            },
        ))
    }

    /// Returns (d encoded_visible, d mask_token).
    fn backward(
        &self,
        cache: &DecoderCache,
        dy: &Array2<f64>,
        grad: &mut DecoderStack,
    ) -> (Array2<f64>, Array1<f64>) {
        let mut dx = self.norm.backward(&cache.norm, dy, &mut grad.norm);
        let mut dpos = Array2::zeros(dx.raw_dim());
        for i in (0..self.blocks.len()).rev() {
            let d_in = self.blocks[i].backward(&cache.blocks[i], &dx, &mut grad.blocks[i]);
            dpos += &d_in;
            dx = d_in;
        }
        self.pos.backward(&cache.pos, &dpos, &mut grad.pos);
        let d_visible = dx.slice(s![..cache.n_visible, ..]).to_owned();
        let d_mask_token = dx.slice(s![cache.n_visible.., ..]).sum_axis(Axis(0));
        (d_visible, d_mask_token)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        self.pos.visit_params(&format!("{prefix}.pos"), f);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_params(&format!("{prefix}.block{i}"), f);
        }
        self.norm.visit_params(&format!("{prefix}.norm"), f);
    }
}

/// Which projection head to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    SceneImage,
    SceneText,
    ObjectImage,
    ObjectText,
}

/// How one instance mask pools decoder tokens: each entry is a decoder row
/// and the fraction of the mask's points that row's patch owns.
#[derive(Debug, Clone)]
pub struct MaskPool {
    pub mask_id: i32,
    pub label_id: i32,
    pub is_foreground: bool,
    pub weights: Vec<(usize, f64)>,
}

/// Decoder row of each patch under the fixed ordering: visible patches
/// first (ascending patch index), then masked patches (ascending). Dropped
/// patches have no row.
pub fn decoder_rows(plan: &MaskingPlan) -> Vec<Option<usize>> {
    let visible = plan.visible_indices();
    let masked = plan.masked_indices();
    let mut rows = vec![None; plan.counts.n_total];
    for (r, &p) in visible.iter().enumerate() {
        rows[p] = Some(r);
    }
    for (r, &p) in masked.iter().enumerate() {
        rows[p] = Some(visible.len() + r);
    }
    rows
}

/// Everything a loss needs from one scene pass.
#[derive(Debug)]
pub struct SceneForward {
    /// Encoder output over visible patches, (n_visible, embed_dim).
    pub encoded_visible: Array2<f64>,
    /// Decoder output over visible then masked rows.
    pub decoded: Array2<f64>,
    /// Reconstruction head output, (n_masked, 3*K); row i belongs to
    /// `plan.masked_indices()[i]`, coordinates relative to that center.
    pub recon: Array2<f64>,
    /// Mean of `encoded_visible` rows.
    pub scene_feature: Array1<f64>,
    pub scene_img_pred: Array1<f64>,
    pub scene_txt_pred: Array1<f64>,
    /// One prediction per entry of the `pools` argument, in order.
    pub object_img_preds: Vec<Array1<f64>>,
    pub object_txt_preds: Vec<Array1<f64>>,
}

/// Upstream gradients for every `SceneForward` output that losses consume.
#[derive(Debug)]
pub struct SceneGrad {
    pub d_recon: Array2<f64>,
    pub d_scene_img_pred: Array1<f64>,
    pub d_scene_txt_pred: Array1<f64>,
    pub d_object_img_preds: Vec<Array1<f64>>,
    pub d_object_txt_preds: Vec<Array1<f64>>,
}

impl SceneGrad {
    pub fn zeros_for(fwd: &SceneForward) -> Self {
        SceneGrad {
            d_recon: Array2::zeros(fwd.recon.raw_dim()),
            d_scene_img_pred: Array1::zeros(fwd.scene_img_pred.raw_dim()),
            d_scene_txt_pred: Array1::zeros(fwd.scene_txt_pred.raw_dim()),
            d_object_img_preds: fwd
                .object_img_preds
                .iter()
                .map(|p| Array1::zeros(p.raw_dim()))
                .collect(),
            d_object_txt_preds: fwd
                .object_txt_preds
                .iter()
                .map(|p| Array1::zeros(p.raw_dim()))
                .collect(),
        }
    }
}

#[derive(Debug)]
pub struct SceneCache {
    enc: EncoderCache,
    dec: DecoderCache,
    /// Decoder rows for masked patches, the reconstruction head input.
    masked_rows: Array2<f64>,
    n_visible: usize,
    scene_img: MlpCache,
    scene_txt: MlpCache,
    pools: Vec<MaskPool>,
    pool_img: Vec<MlpCache>,
    pool_txt: Vec<MlpCache>,
}

#[derive(Debug, Clone)]
pub struct PretrainModel {
    pub config: ModelConfig,
    pub enc: EncoderStack,
    pub mask_token: Array1<f64>,
    pub dec: DecoderStack,
    /// embed_dim -> 3*K, applied to masked decoder rows.
    pub recon: Linear,
    pub scene_img_head: Mlp,
    pub scene_txt_head: Mlp,
    pub object_img_head: Mlp,
    pub object_txt_head: Mlp,
}

impl PretrainModel {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, "model.init", &[]);
        let d = config.embed_dim;
        let enc = EncoderStack::new(config, &mut rng);
        let mask_token = Array1::from_shape_fn(d, |_| trunc_normal(&mut rng, 0.02));
        let dec = DecoderStack::new(config, &mut rng);
        let recon = Linear::new(d, 3 * config.patch_size, &mut rng);
        let scene_img_head = Mlp::new(d, d, config.d_img, &mut rng);
        let scene_txt_head = Mlp::new(d, d, config.d_txt, &mut rng);
        let object_img_head = Mlp::new(d, d, config.d_img, &mut rng);
        let object_txt_head = Mlp::new(d, d, config.d_txt, &mut rng);
        Ok(PretrainModel {
            config: config.clone(),
            enc,
            mask_token,
            dec,
            recon,
            scene_img_head,
            scene_txt_head,
            object_img_head,
            object_txt_head,
        })
    }

    pub fn zeros_like(&self) -> Self {
        PretrainModel {
            config: self.config.clone(),
            enc: self.enc.zeros_like(),
            mask_token: Array1::zeros(self.mask_token.raw_dim()),
            dec: self.dec.zeros_like(),
            recon: self.recon.zeros_like(),
            scene_img_head: self.scene_img_head.zeros_like(),
            scene_txt_head: self.scene_txt_head.zeros_like(),
            object_img_head: self.object_img_head.zeros_like(),
            object_txt_head: self.object_txt_head.zeros_like(),
        }
    }

    pub fn visit_params(&mut self, f: &mut ParamVisitor) {
        self.enc.visit_params("enc", f);
        f(
            "mask_token",
            self.mask_token.as_slice_mut().expect("contiguous"),
            false,
        );
        self.dec.visit_params("dec", f);
        self.recon.visit_params("recon", f);
        self.scene_img_head.visit_params("head.scene_img", f);
        self.scene_txt_head.visit_params("head.scene_txt", f);
        self.object_img_head.visit_params("head.object_img", f);
        self.object_txt_head.visit_params("head.object_txt", f);
    }

    pub fn n_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, data, _| n += data.len());
        n
    }

    /// One keep-everything decision per encoder and decoder block, the
    /// evaluation-time setting.
    pub fn keep_all_drops(&self) -> Vec<DropDecision> {
        vec![DropDecision::keep_all(); self.enc.blocks.len() + self.dec.blocks.len()]
    }

    /// Samples stochastic-depth decisions for one training pass, one per
    /// block, rates rising linearly to `config.drop_path` in each stack.
    pub fn sample_drops(&self, rng: &mut impl Rng) -> Vec<DropDecision> {
        let mut out = Vec::new();
        let rates = drop_schedule(self.enc.blocks.len(), self.config.drop_path)
            .into_iter()
            .chain(drop_schedule(self.dec.blocks.len(), self.config.drop_path));
        for rate in rates {
            out.push(DropDecision {
                keep_attn: rng.random::<f64>() >= rate,
                keep_mlp: rng.random::<f64>() >= rate,
                scale: 1.0 / (1.0 - rate),
            });
        }
        out
    }

    fn head(&self, kind: HeadKind) -> &Mlp {
        match kind {
            HeadKind::SceneImage => &self.scene_img_head,
            HeadKind::SceneText => &self.scene_txt_head,
            HeadKind::ObjectImage => &self.object_img_head,
            HeadKind::ObjectText => &self.object_txt_head,
        }
    }

    /// Projects one pooled feature through the chosen head.
    pub fn apply_head(&self, kind: HeadKind, x: &Array1<f64>) -> Result<Array1<f64>> {
        let head = self.head(kind);
        if x.len() != head.fc1.in_dim() {
            return Err(Error::Contract(format!(
                "head expects input of {} dims, got {}",
                head.fc1.in_dim(),
                x.len()
            )));
        }
        let row = x.clone().insert_axis(Axis(0));
        let (y, _) = head.forward(&row);
        Ok(y.row(0).to_owned())
    }

    /// Full pass over one scene: encode visible patches, decode with mask
    /// tokens, reconstruct masked coordinates, and project the scene and
    /// per-mask pooled features into the teacher spaces.
    ///
    /// `drops` holds one decision per encoder block then per decoder block.
    /// `pools` describe how each instance mask pools decoder rows; rows
    /// must come from `decoder_rows` of the same plan.
    pub fn forward_scene(
        &self,
        patches: &PatchSet,
        plan: &MaskingPlan,
        pools: &[MaskPool],
        drops: &[DropDecision],
    ) -> Result<(SceneForward, SceneCache)> {
        if plan.counts.n_total != patches.centers.len() {
            return Err(Error::Contract(format!(
                "plan covers {} patches but the scene has {}",
                plan.counts.n_total,
                patches.centers.len()
            )));
        }
        if patches.patch_size != self.config.patch_size {
            return Err(Error::Contract(format!(
                "model expects patches of {} points, got {}",
                self.config.patch_size, patches.patch_size
            )));
        }
        let n_enc = self.enc.blocks.len();
        let n_dec = self.dec.blocks.len();
        if drops.len() != n_enc + n_dec {
            return Err(Error::Contract(format!(
                "expected {} drop decisions, got {}",
                n_enc + n_dec,
                drops.len()
            )));
        }

        let visible = plan.visible_indices();
        let (encoded_visible, enc_cache) =
            self.enc.forward(patches, &visible, &drops[..n_enc])?;
        let (decoded, dec_cache) = self.dec.forward(
            &encoded_visible,
            &self.mask_token,
            patches,
            plan,
            &drops[n_enc..],
        )?;
        let n_visible = visible.len();
        let n_rows = decoded.nrows();
        let masked_rows = decoded.slice(s![n_visible.., ..]).to_owned();
        let recon = self.recon.forward(&masked_rows);

        let scene_feature = encoded_visible
            .mean_axis(Axis(0))
            .expect("at least one visible token");
        let feature_row = scene_feature.clone().insert_axis(Axis(0));
        let (img_row, scene_img_cache) = self.scene_img_head.forward(&feature_row);
        let (txt_row, scene_txt_cache) = self.scene_txt_head.forward(&feature_row);

        let mut object_img_preds = Vec::with_capacity(pools.len());
        let mut object_txt_preds = Vec::with_capacity(pools.len());
        let mut pool_img = Vec::with_capacity(pools.len());
        let mut pool_txt = Vec::with_capacity(pools.len());
        for pool in pools {
            let mut pooled = Array2::zeros((1, self.config.embed_dim));
            for &(row, w) in &pool.weights {
                if row >= n_rows {
                    return Err(Error::Contract(format!(
                        "mask {} pools decoder row {row} but only {n_rows} rows exist",
                        pool.mask_id
                    )));
                }
                let mut acc = pooled.row_mut(0);
                acc.scaled_add(w, &decoded.row(row));
            }
            let (img, img_cache) = self.object_img_head.forward(&pooled);
            let (txt, txt_cache) = self.object_txt_head.forward(&pooled);
            object_img_preds.push(img.row(0).to_owned());
            object_txt_preds.push(txt.row(0).to_owned());
            pool_img.push(img_cache);
            pool_txt.push(txt_cache);
        }

        Ok((
            SceneForward {
                encoded_visible,
                decoded,
                recon,
                scene_feature,
                scene_img_pred: img_row.row(0).to_owned(),
                scene_txt_pred: txt_row.row(0).to_owned(),
                object_img_preds,
                object_txt_preds,
            },
            SceneCache {
                enc: enc_cache,
                dec: dec_cache,
                masked_rows,
                n_visible,
                scene_img: scene_img_cache,
                scene_txt: scene_txt_cache,
                pools: pools.to_vec(),
                pool_img,
                pool_txt,
            },
        ))
    }

    /// Propagates output gradients back through the whole scene pass,
    /// accumulating parameter gradients into `grad`.
    pub fn backward_scene(
        &self,
        cache: &SceneCache,
        d: &SceneGrad,
        grad: &mut PretrainModel,
    ) -> Result<()> {
        if d.d_recon.nrows() != cache.masked_rows.nrows()
            || d.d_recon.ncols() != self.recon.out_dim()
        {
            return Err(Error::Contract(format!(
                "recon gradient is {}x{} but the pass produced {}x{}",
                d.d_recon.nrows(),
                d.d_recon.ncols(),
                cache.masked_rows.nrows(),
                self.recon.out_dim()
            )));
        }
        if d.d_object_img_preds.len() != cache.pools.len()
            || d.d_object_txt_preds.len() != cache.pools.len()
        {
            return Err(Error::Contract(format!(
                "object gradients cover {} masks but the pass had {}",
                d.d_object_img_preds.len(),
                cache.pools.len()
            )));
        }
        let n_visible = cache.n_visible;
        let n_rows = n_visible + cache.masked_rows.nrows();
        let embed = self.config.embed_dim;
        let mut d_decoded = Array2::zeros((n_rows, embed));

        let d_masked = self
            .recon
            .backward(&cache.masked_rows, &d.d_recon, &mut grad.recon);
        d_decoded.slice_mut(s![n_visible.., ..]).assign(&d_masked);

        for (i, pool) in cache.pools.iter().enumerate() {
            let d_img = d.d_object_img_preds[i].clone().insert_axis(Axis(0));
            let d_txt = d.d_object_txt_preds[i].clone().insert_axis(Axis(0));
            let d_pooled_img =
                self.object_img_head
                    .backward(&cache.pool_img[i], &d_img, &mut grad.object_img_head);
            let d_pooled_txt =
                self.object_txt_head
                    .backward(&cache.pool_txt[i], &d_txt, &mut grad.object_txt_head);
            let d_pooled = &d_pooled_img + &d_pooled_txt;
            for &(row, w) in &pool.weights {
                let mut acc = d_decoded.row_mut(row);
                acc.scaled_add(w, &d_pooled.row(0));
            }
        }

        let (d_encoded_from_dec, d_mask_token) =
            self.dec.backward(&cache.dec, &d_decoded, &mut grad.dec);
        grad.mask_token += &d_mask_token;

        let d_scene_img = d.d_scene_img_pred.clone().insert_axis(Axis(0));
        let d_scene_txt = d.d_scene_txt_pred.clone().insert_axis(Axis(0));
        let d_feat = &self.scene_img_head.backward(
            &cache.scene_img,
            &d_scene_img,
            &mut grad.scene_img_head,
        ) + &self.scene_txt_head.backward(
            &cache.scene_txt,
            &d_scene_txt,
            &mut grad.scene_txt_head,
        );

        let mut d_encoded = d_encoded_from_dec;
        let share = 1.0 / n_visible as f64;
        for mut row in d_encoded.rows_mut() {
            row.scaled_add(share, &d_feat.row(0));
        }
        self.enc.backward(&cache.enc, &d_encoded, &mut grad.enc);
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut copy = self.clone();
        let mut slots = Vec::new();
        copy.visit_params(&mut |name, data, _| slots.push((name.to_string(), data.to_vec())));
        write_checkpoint(dir, "pretrain", &self.config, &slots)
    }

    /// Writes only the encoder stack, the artifact downstream probing uses.
    pub fn save_encoder(&self, dir: &Path) -> Result<()> {
        let mut enc = self.enc.clone();
        let mut slots = Vec::new();
        enc.visit_params("enc", &mut |name, data, _| {
            slots.push((name.to_string(), data.to_vec()))
        });
        write_checkpoint(dir, "encoder", &self.config, &slots)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_checkpoint_manifest(dir)?;
        if manifest.kind != "pretrain" {
            return Err(Error::Contract(format!(
                "expected a pretrain checkpoint, found kind {:?}",
                manifest.kind
            )));
        }
        let mut model = PretrainModel::new(&manifest.config, 0)?;
        fill_params(dir, &manifest, &mut |f| model.visit_params(f))?;
        Ok(model)
    }
}

/// Extracts 3D points from one reconstruction row.
pub fn recon_patch_points(recon: &Array2<f64>, row: usize) -> Vec<[f64; 3]> {
    let r = recon.row(row);
    (0..r.len() / 3)
        .map(|i| [r[3 * i], r[3 * i + 1], r[3 * i + 2]])
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    kind: String,
    config: ModelConfig,
    arrays: Vec<ArrayEntry>,
}

const CHECKPOINT_MANIFEST: &str = "checkpoint.json";

fn write_checkpoint(
    dir: &Path,
    kind: &str,
    config: &ModelConfig,
    slots: &[(String, Vec<f64>)],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut arrays = Vec::with_capacity(slots.len());
    for (name, data) in slots {
        arrays.push(write_array(
            dir,
            name,
            &[data.len()],
            &ArrayData::F64(data.clone()),
        )?);
    }
    let manifest = CheckpointManifest {
        kind: kind.to_string(),
        config: config.clone(),
        arrays,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join(CHECKPOINT_MANIFEST), text)?;
    Ok(())
}

fn read_checkpoint_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    if !path.is_file() {
        return Err(Error::MissingFile(path));
    }
    let text = std::fs::read_to_string(path)?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    manifest.config.validate()?;
    Ok(manifest)
}

/// Overwrites every visited parameter slot from the checkpoint arrays,
/// requiring an exact one-to-one match between slots and stored arrays.
fn fill_params(
    dir: &Path,
    manifest: &CheckpointManifest,
    visit: &mut dyn FnMut(&mut ParamVisitor),
) -> Result<()> {
    let by_name: BTreeMap<&str, &ArrayEntry> = manifest
        .arrays
        .iter()
        .map(|e| (e.name.as_str(), e))
        .collect();
    let mut used = 0usize;
    let mut failure: Option<Error> = None;
    visit(&mut |name, data, _| {
        if failure.is_some() {
            return;
        }
        let entry = match by_name.get(name) {
            Some(e) => *e,
            None => {
                failure = Some(Error::MissingArray(name.to_string()));
                return;
            }
        };
        match read_array(dir, entry).and_then(|a| expect_f64(a, name)) {
            Ok(values) => {
                if values.len() != data.len() {
                    failure = Some(Error::ShapeMismatch {
                        name: name.to_string(),
                        expected: vec![data.len()],
                        actual: vec![values.len()],
                    });
                    return;
                }
                data.copy_from_slice(&values);
                used += 1;
            }
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if used != manifest.arrays.len() {
        return Err(Error::Contract(format!(
            "checkpoint stores {} arrays but the model consumed {used}",
            manifest.arrays.len()
        )));
    }
    Ok(())
}

/// Loads the encoder stack from either an encoder export or a full
/// pretrain checkpoint.
pub fn load_encoder(dir: &Path) -> Result<(ModelConfig, EncoderStack)> {
    let manifest = read_checkpoint_manifest(dir)?;
    match manifest.kind.as_str() {
        "pretrain" => {
            let model = PretrainModel::load(dir)?;
            Ok((model.config, model.enc))
        }
        "encoder" => {
            let mut rng = rng_for(0, "model.init", &[]);
            let mut enc = EncoderStack::new(&manifest.config, &mut rng);
            fill_params(dir, &manifest, &mut |f| enc.visit_params("enc", f))?;
            Ok((manifest.config, enc))
        }
        other => Err(Error::Contract(format!(
            "unknown checkpoint kind {other:?}"
        ))),
    }
}
