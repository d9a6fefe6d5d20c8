//! Attentive neural process disturbance model.
//!
//! Maps a context set of (state-action, next-state-residual) pairs to a
//! predictive Gaussian over residuals at query inputs, through two paths:
//! a deterministic path with one self-attention layer over the context and
//! dot-product cross-attention per query, and a latent path that
//! mean-aggregates per-element embeddings into a factorized Gaussian over a
//! global latent vector. Training maximizes the ELBO with a single
//! reparameterized latent sample.

use crate::autodiff::{
    load_checkpoint, save_checkpoint, AdamState, DiagGaussian, NodeId, Tape, Tensor, LOG_VAR_MAX,
    LOG_VAR_MIN,
};
use crate::error::{CoreError, Result};
use crate::linalg::Mat;
use crate::nn::{Activation, Mlp, Normalizer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::path::Path;

/// Hard clamp written as the same primitive sequence the tape uses, so the
/// training and inference paths agree bitwise.
#[inline]
pub(crate) fn clamp_via_relu(x: f64, lo: f64, hi: f64) -> f64 {
    ((x + (-lo)).max(0.0) - (x + (-hi)).max(0.0)) + lo
}

#[inline]
pub(crate) fn std_from_log_var(lv: f64) -> f64 {
    (lv * 0.5).exp()
}

/// Ordered collection of observed input/output pairs from the current
/// episode. Inputs are state-action vectors, outputs next-state residuals.
#[derive(Debug, Clone)]
pub struct ContextSet {
    xs: Mat,
    ys: Mat,
}

impl ContextSet {
    pub fn empty(d_x: usize, d_y: usize) -> Self {
        ContextSet {
            xs: Mat::zeros(0, d_x),
            ys: Mat::zeros(0, d_y),
        }
    }

    pub fn from_mats(xs: Mat, ys: Mat) -> Self {
        assert_eq!(xs.rows, ys.rows, "context input/output counts differ");
        ContextSet { xs, ys }
    }

    pub fn push(&mut self, x: &[f64], y: &[f64]) {
        assert_eq!(x.len(), self.xs.cols);
        assert_eq!(y.len(), self.ys.cols);
        self.xs.data.extend_from_slice(x);
        self.xs.rows += 1;
        self.ys.data.extend_from_slice(y);
        self.ys.rows += 1;
    }

    pub fn len(&self) -> usize {
        self.xs.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn xs(&self) -> &Mat {
        &self.xs
    }

    pub fn ys(&self) -> &Mat {
        &self.ys
    }

    /// New set with rows reordered by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.len());
        let mut out = ContextSet::empty(self.xs.cols, self.ys.cols);
        for &i in perm {
            out.push(self.xs.row(i), self.ys.row(i));
        }
        out
    }
}

/// Query inputs, with outputs present during training.
#[derive(Debug, Clone)]
pub struct TargetBatch {
    pub xs: Mat,
    pub ys: Option<Mat>,
}

impl TargetBatch {
    pub fn new(xs: Mat, ys: Option<Mat>) -> Self {
        if let Some(y) = &ys {
            assert_eq!(xs.rows, y.rows, "target input/output counts differ");
        }
        TargetBatch { xs, ys }
    }

    pub fn len(&self) -> usize {
        self.xs.rows
    }

    pub fn is_empty(&self) -> bool {
        self.xs.rows == 0
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AnpConfig {
    pub d_x: usize,
    pub d_y: usize,
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub det_dim: usize,
}

impl AnpConfig {
    pub fn new(d_x: usize, d_y: usize) -> Self {
        AnpConfig {
            d_x,
            d_y,
            hidden: vec![128, 128],
            latent_dim: 8,
            det_dim: 8,
        }
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }

    fn dims(&self, d_in: usize, d_out: usize) -> Vec<usize> {
        let mut v = vec![d_in];
        v.extend_from_slice(&self.hidden);
        v.push(d_out);
        v
    }
}

/// Precomputed per-context quantities reused across many queries: the latent
/// posterior, cross-attention keys, and self-attended context values.
#[derive(Debug, Clone)]
pub struct AnpContextCache {
    pub latent: DiagGaussian,
    keys: Mat,
    svals: Mat,
    n: usize,
}

impl AnpContextCache {
    pub fn context_len(&self) -> usize {
        self.n
    }
}

/// Which latent to decode with at prediction time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentMode {
    /// Decode at the mean of q(z | context); deterministic.
    Mean,
    /// Draw one latent sample per call.
    Sampled,
}

pub struct AnpModel {
    pub cfg: AnpConfig,
    pub normalizer: Normalizer,
    latent_mlp: Mlp,
    latent_head: Mlp,
    pair_mlp: Mlp,
    x_mlp: Mlp,
    decoder: Mlp,
}

impl AnpModel {
    pub fn init(cfg: AnpConfig, rng: &mut ChaCha8Rng) -> Self {
        let d_xy = cfg.d_x + cfg.d_y;
        let latent_mlp = Mlp::init(&cfg.dims(d_xy, cfg.latent_dim), Activation::Tanh, rng);
        let latent_head = Mlp::init(&[cfg.latent_dim, 2 * cfg.latent_dim], Activation::Tanh, rng);
        let pair_mlp = Mlp::init(&cfg.dims(d_xy, cfg.det_dim), Activation::Tanh, rng);
        let x_mlp = Mlp::init(&cfg.dims(cfg.d_x, cfg.det_dim), Activation::Tanh, rng);
        let decoder = Mlp::init(
            &cfg.dims(cfg.d_x + cfg.latent_dim + cfg.det_dim, 2 * cfg.d_y),
            Activation::Tanh,
            rng,
        );
        AnpModel {
            normalizer: Normalizer::identity(cfg.d_x),
            cfg,
            latent_mlp,
            latent_head,
            pair_mlp,
            x_mlp,
            decoder,
        }
    }

    fn attn_scale(&self) -> f64 {
        1.0 / (self.cfg.det_dim as f64).sqrt()
    }

    fn check_ctx(&self, ctx: &ContextSet) -> Result<()> {
        if ctx.xs.cols != self.cfg.d_x || ctx.ys.cols != self.cfg.d_y {
            return Err(CoreError::ShapeMismatch {
                op: "anp_context",
                lhs: vec![ctx.xs.cols, ctx.ys.cols],
                rhs: vec![self.cfg.d_x, self.cfg.d_y],
            });
        }
        Ok(())
    }

    fn check_query(&self, xq: &Mat) -> Result<()> {
        if xq.cols != self.cfg.d_x {
            return Err(CoreError::ShapeMismatch {
                op: "anp_query",
                lhs: vec![xq.cols],
                rhs: vec![self.cfg.d_x],
            });
        }
        Ok(())
    }

    /// Normalized [x ‖ y] rows for the encoders.
    fn pair_inputs(&self, xs: &Mat, ys: &Mat) -> Mat {
        let xn = self.normalizer.apply(xs);
        Mat::hcat(&[&xn, ys])
    }

    // ── Latent path ──────────────────────────────────────────────────

    /// Mean-aggregated latent encoding of a set; the empty set returns the
    /// standard normal prior.
    pub fn encode_latent(&self, xs: &Mat, ys: &Mat) -> Result<DiagGaussian> {
        if xs.rows != ys.rows || ys.cols != self.cfg.d_y {
            return Err(CoreError::ShapeMismatch {
                op: "encode_latent",
                lhs: vec![xs.rows, ys.cols],
                rhs: vec![ys.rows, self.cfg.d_y],
            });
        }
        self.check_query(xs)?;
        if xs.rows == 0 {
            return Ok(DiagGaussian::standard(self.cfg.latent_dim));
        }
        let pairs = self.pair_inputs(xs, ys);
        let embed = self.latent_mlp.forward_values(&pairs);
        let agg = Mat::row_vec(&embed.col_mean());
        let head = self.latent_head.forward_values(&agg);
        let ld = self.cfg.latent_dim;
        let mean = head.data[..ld].to_vec();
        let std: Vec<f64> = head.data[ld..]
            .iter()
            .map(|&lv| std_from_log_var(clamp_via_relu(lv, LOG_VAR_MIN, LOG_VAR_MAX)))
            .collect();
        DiagGaussian::new(mean, std)
    }

    pub fn encode_latent_set(&self, ctx: &ContextSet) -> Result<DiagGaussian> {
        self.encode_latent(&ctx.xs, &ctx.ys)
    }

    /// Tape-path latent encoding returning (mean, clamped log-variance),
    /// both [1, latent_dim]. Empty sets give the N(0, I) constants.
    fn encode_latent_tape(
        &self,
        tape: &mut Tape,
        xs: &Mat,
        ys: &Mat,
    ) -> Result<(NodeId, NodeId)> {
        let ld = self.cfg.latent_dim;
        if xs.rows == 0 {
            let mu = tape.constant(vec![1, ld], vec![0.0; ld]);
            let lv = tape.constant(vec![1, ld], vec![0.0; ld]);
            return Ok((mu, lv));
        }
        let pairs = self.pair_inputs(xs, ys);
        let p = tape.constant(vec![pairs.rows, pairs.cols], pairs.data);
        let embed = self.latent_mlp.forward_tape(tape, p)?;
        let agg = tape.mean_axis0(embed)?;
        let head = self.latent_head.forward_tape(tape, agg)?;
        let mu = tape.slice_cols(head, 0, ld)?;
        let lv_raw = tape.slice_cols(head, ld, ld)?;
        let lv = tape.clamp(lv_raw, LOG_VAR_MIN, LOG_VAR_MAX)?;
        Ok((mu, lv))
    }

    // ── Deterministic path ───────────────────────────────────────────

    /// Per-query representation: context pairs embedded, refined by one
    /// self-attention layer, then cross-attended by embedded queries.
    /// Empty context gives zero representations.
    pub fn encode_deterministic(&self, ctx: &ContextSet, xq: &Mat) -> Result<Mat> {
        self.check_ctx(ctx)?;
        self.check_query(xq)?;
        let cache = self.prepare_context(ctx)?;
        Ok(self.deterministic_from_cache(&cache, &self.normalizer.apply(xq)))
    }

    fn deterministic_from_cache(&self, cache: &AnpContextCache, xq_norm: &Mat) -> Mat {
        if cache.n == 0 {
            return Mat::zeros(xq_norm.rows, self.cfg.det_dim);
        }
        let q = self.x_mlp.forward_values(xq_norm);
        let mut scores = q.matmul_transpose(&cache.keys);
        scores.scale_inplace(self.attn_scale());
        scores.softmax_rows_inplace();
        scores.matmul(&cache.svals)
    }

    /// Precompute everything reusable across queries for a fixed context.
    pub fn prepare_context(&self, ctx: &ContextSet) -> Result<AnpContextCache> {
        self.check_ctx(ctx)?;
        let latent = self.encode_latent_set(ctx)?;
        if ctx.is_empty() {
            return Ok(AnpContextCache {
                latent,
                keys: Mat::zeros(0, self.cfg.det_dim),
                svals: Mat::zeros(0, self.cfg.det_dim),
                n: 0,
            });
        }
        let pairs = self.pair_inputs(&ctx.xs, &ctx.ys);
        let p = self.pair_mlp.forward_values(&pairs);
        let mut sc = p.matmul_transpose(&p);
        sc.scale_inplace(self.attn_scale());
        sc.softmax_rows_inplace();
        let svals = sc.matmul(&p);
        let keys = self.x_mlp.forward_values(&self.normalizer.apply(&ctx.xs));
        Ok(AnpContextCache {
            latent,
            keys,
            svals,
            n: ctx.len(),
        })
    }

    fn encode_deterministic_tape(
        &self,
        tape: &mut Tape,
        ctx: &ContextSet,
        xq_rows: usize,
        xq_norm_node: NodeId,
    ) -> Result<NodeId> {
        if ctx.is_empty() {
            return Ok(tape.constant(
                vec![xq_rows, self.cfg.det_dim],
                vec![0.0; xq_rows * self.cfg.det_dim],
            ));
        }
        let pairs = self.pair_inputs(&ctx.xs, &ctx.ys);
        let pnode = tape.constant(vec![pairs.rows, pairs.cols], pairs.data);
        let p = self.pair_mlp.forward_tape(tape, pnode)?;
        let sc = tape.matmul_tb(p, p)?;
        let sc = tape.scale(sc, self.attn_scale())?;
        let w = tape.softmax(sc)?;
        let svals = tape.matmul(w, p)?;
        let xcn = self.normalizer.apply(&ctx.xs);
        let xc = tape.constant(vec![xcn.rows, xcn.cols], xcn.data);
        let keys = self.x_mlp.forward_tape(tape, xc)?;
        let q = self.x_mlp.forward_tape(tape, xq_norm_node)?;
        let qs = tape.matmul_tb(q, keys)?;
        let qs = tape.scale(qs, self.attn_scale())?;
        let attw = tape.softmax(qs)?;
        tape.matmul(attw, svals)
    }

    // ── Decoder ──────────────────────────────────────────────────────

    /// Predictive Gaussian per query from an explicit latent sample and
    /// deterministic representation. `z` is shared across queries.
    pub fn decode(&self, xq: &Mat, z: &[f64], rep: &Mat) -> Result<(Mat, Mat)> {
        if z.len() != self.cfg.latent_dim {
            return Err(CoreError::ShapeMismatch {
                op: "decode_latent",
                lhs: vec![z.len()],
                rhs: vec![self.cfg.latent_dim],
            });
        }
        self.check_query(xq)?;
        if rep.rows != xq.rows || rep.cols != self.cfg.det_dim {
            return Err(CoreError::ShapeMismatch {
                op: "decode_rep",
                lhs: vec![rep.rows, rep.cols],
                rhs: vec![xq.rows, self.cfg.det_dim],
            });
        }
        let mut z_rows = Mat::zeros(xq.rows, z.len());
        for r in 0..xq.rows {
            z_rows.row_mut(r).copy_from_slice(z);
        }
        Ok(self.decode_rows(&self.normalizer.apply(xq), &z_rows, rep))
    }

    /// Decoder on already-normalized inputs with one latent row per query.
    fn decode_rows(&self, xq_norm: &Mat, z_rows: &Mat, rep: &Mat) -> (Mat, Mat) {
        let dec_in = Mat::hcat(&[xq_norm, z_rows, rep]);
        let out = self.decoder.forward_values(&dec_in);
        let d_y = self.cfg.d_y;
        let mut mu = Mat::zeros(out.rows, d_y);
        let mut std = Mat::zeros(out.rows, d_y);
        for r in 0..out.rows {
            let row = out.row(r);
            mu.row_mut(r).copy_from_slice(&row[..d_y]);
            for c in 0..d_y {
                std.row_mut(r)[c] =
                    std_from_log_var(clamp_via_relu(row[d_y + c], LOG_VAR_MIN, LOG_VAR_MAX));
            }
        }
        (mu, std)
    }

    /// Batched prediction where each query row carries its own latent
    /// (the planner's per-particle latents).
    pub fn predict_with_latent_rows(
        &self,
        cache: &AnpContextCache,
        xq: &Mat,
        z_rows: &Mat,
    ) -> Result<(Mat, Mat)> {
        self.check_query(xq)?;
        if z_rows.rows != xq.rows || z_rows.cols != self.cfg.latent_dim {
            return Err(CoreError::ShapeMismatch {
                op: "predict_latent_rows",
                lhs: vec![z_rows.rows, z_rows.cols],
                rhs: vec![xq.rows, self.cfg.latent_dim],
            });
        }
        let xq_norm = self.normalizer.apply(xq);
        let rep = self.deterministic_from_cache(cache, &xq_norm);
        Ok(self.decode_rows(&xq_norm, z_rows, &rep))
    }

    /// Predictive Gaussian per query; `Mean` decodes at the posterior mean,
    /// `Sampled` draws one latent for the whole call.
    pub fn predict(
        &self,
        ctx: &ContextSet,
        xq: &Mat,
        mode: LatentMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Mat, Mat)> {
        let cache = self.prepare_context(ctx)?;
        let z = match mode {
            LatentMode::Mean => cache.latent.mean.clone(),
            LatentMode::Sampled => cache.latent.sample(rng),
        };
        let xq_norm = self.normalizer.apply(xq);
        let rep = self.deterministic_from_cache(&cache, &xq_norm);
        let mut z_rows = Mat::zeros(xq.rows, z.len());
        for r in 0..xq.rows {
            z_rows.row_mut(r).copy_from_slice(&z);
        }
        Ok(self.decode_rows(&xq_norm, &z_rows, &rep))
    }

    // ── Training ─────────────────────────────────────────────────────

    /// Negated ELBO for one task as a tape node:
    /// NLL(targets | z ~ q(z|targets)) + KL(q(z|targets) ‖ q(z|context)).
    fn elbo_tape(
        &self,
        tape: &mut Tape,
        ctx: &ContextSet,
        tgt: &TargetBatch,
        noise: &[f64],
    ) -> Result<NodeId> {
        let ys = tgt
            .ys
            .as_ref()
            .ok_or_else(|| CoreError::InvalidArgument("elbo needs target outputs".into()))?;
        self.check_ctx(ctx)?;
        self.check_query(&tgt.xs)?;
        let (mu_t, lv_t) = self.encode_latent_tape(tape, &tgt.xs, ys)?;
        let (mu_c, lv_c) = self.encode_latent_tape(tape, &ctx.xs, &ctx.ys)?;

        let ld = self.cfg.latent_dim;
        let ls_t = tape.scale(lv_t, 0.5)?;
        let noise_node = tape.constant(vec![1, ld], noise.to_vec());
        let z = tape.reparam_sample(mu_t, ls_t, noise_node)?;
        let rows = tgt.len();
        let z_b = tape.broadcast_to(z, &[rows, ld])?;

        let xq_norm = self.normalizer.apply(&tgt.xs);
        let xq_node = tape.constant(vec![rows, self.cfg.d_x], xq_norm.data.clone());
        let rep = self.encode_deterministic_tape(tape, ctx, rows, xq_node)?;

        let dec_in = tape.concat_cols(&[xq_node, z_b, rep])?;
        let out = self.decoder.forward_tape(tape, dec_in)?;
        let d_y = self.cfg.d_y;
        let mu_y = tape.slice_cols(out, 0, d_y)?;
        let lv_raw = tape.slice_cols(out, d_y, d_y)?;
        let lv_y = tape.clamp(lv_raw, LOG_VAR_MIN, LOG_VAR_MAX)?;
        let y_node = tape.constant(vec![rows, d_y], ys.data.clone());
        let nll = tape.gaussian_nll(mu_y, lv_y, y_node)?;
        let kl = tape.kl_diag_gaussians(mu_t, lv_t, mu_c, lv_c)?;
        tape.add(nll, kl)
    }

    /// Negated-ELBO value for one task (throwaway tape, no update).
    pub fn elbo_loss(
        &mut self,
        ctx: &ContextSet,
        tgt: &TargetBatch,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        self.register_params(&mut tape);
        let noise: Vec<f64> = (0..self.cfg.latent_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let node = self.elbo_tape(&mut tape, ctx, tgt, &noise)?;
        Ok(tape.values(node)[0])
    }

    /// Sum of per-query Gaussian NLL of true outputs under the mean-latent
    /// predictive distribution; the held-out metric of the training oracles.
    pub fn predictive_nll(&self, ctx: &ContextSet, tgt: &TargetBatch) -> Result<f64> {
        let ys = tgt
            .ys
            .as_ref()
            .ok_or_else(|| CoreError::InvalidArgument("predictive_nll needs outputs".into()))?;
        let cache = self.prepare_context(ctx)?;
        let xq_norm = self.normalizer.apply(&tgt.xs);
        let rep = self.deterministic_from_cache(&cache, &xq_norm);
        let mut z_rows = Mat::zeros(tgt.len(), self.cfg.latent_dim);
        for r in 0..tgt.len() {
            z_rows.row_mut(r).copy_from_slice(&cache.latent.mean);
        }
        let (mu, std) = self.decode_rows(&xq_norm, &z_rows, &rep);
        const LN_2PI: f64 = 1.8378770664093453;
        let mut nll = 0.0;
        for i in 0..mu.data.len() {
            let s = std.data[i];
            let d = (ys.data[i] - mu.data[i]) / s;
            nll += 0.5 * (d * d + LN_2PI) + s.ln();
        }
        Ok(nll)
    }

    // ── Parameters and persistence ───────────────────────────────────

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.latent_mlp.params("latent_mlp");
        v.extend(self.latent_head.params("latent_head"));
        v.extend(self.pair_mlp.params("pair_mlp"));
        v.extend(self.x_mlp.params("x_mlp"));
        v.extend(self.decoder.params("decoder"));
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.latent_mlp.params_mut();
        v.extend(self.latent_head.params_mut());
        v.extend(self.pair_mlp.params_mut());
        v.extend(self.x_mlp.params_mut());
        v.extend(self.decoder.params_mut());
        v
    }

    pub fn register_params(&mut self, tape: &mut Tape) {
        for t in self.params_mut() {
            tape.leaf(t);
        }
    }

    pub fn metadata(&self) -> serde_json::Value {
        serde_json::json!({
            "model": "anp",
            "d_x": self.cfg.d_x,
            "d_y": self.cfg.d_y,
            "hidden": self.cfg.hidden,
            "latent_dim": self.cfg.latent_dim,
            "det_dim": self.cfg.det_dim,
            "norm_mean": self.normalizer.mean,
            "norm_std": self.normalizer.std,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.params(), &self.metadata())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        let md = ck.metadata.clone();
        let get = |k: &str| -> Result<u64> {
            md.get(k)
                .and_then(serde_json::Value::as_u64)
                .ok_or_else(|| CoreError::Checkpoint(format!("metadata missing '{}'", k)))
        };
        let vecf = |k: &str| -> Result<Vec<f64>> {
            md.get(k)
                .and_then(serde_json::Value::as_array)
                .ok_or_else(|| CoreError::Checkpoint(format!("metadata missing '{}'", k)))?
                .iter()
                .map(|v| {
                    v.as_f64()
                        .ok_or_else(|| CoreError::Checkpoint(format!("bad float in '{}'", k)))
                })
                .collect()
        };
        let cfg = AnpConfig {
            d_x: get("d_x")? as usize,
            d_y: get("d_y")? as usize,
            hidden: md
                .get("hidden")
                .and_then(serde_json::Value::as_array)
                .ok_or_else(|| CoreError::Checkpoint("metadata missing 'hidden'".into()))?
                .iter()
                .filter_map(serde_json::Value::as_u64)
                .map(|u| u as usize)
                .collect(),
            latent_dim: get("latent_dim")? as usize,
            det_dim: get("det_dim")? as usize,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = AnpModel::init(cfg, &mut rng);
        model.normalizer = Normalizer {
            mean: vecf("norm_mean")?,
            std: vecf("norm_std")?,
        };
        let names: Vec<String> = model.params().iter().map(|(n, _)| n.clone()).collect();
        for (name, t) in names.iter().zip(model.params_mut()) {
            let loaded = ck.tensor(name)?;
            if loaded.shape != t.shape {
                return Err(CoreError::Checkpoint(format!(
                    "parameter '{}' shape {:?} != expected {:?}",
                    name, loaded.shape, t.shape
                )));
            }
            t.values = loaded.values.clone();
        }
        Ok(model)
    }
}

/// Adam-backed trainer for an [`AnpModel`] with a divergence counter.
pub struct AnpTrainer {
    pub adam: AdamState,
    pub diverged_steps: u64,
}

impl AnpTrainer {
    pub fn new(model: &AnpModel, cfg: crate::autodiff::AdamConfig) -> Self {
        let lens: Vec<usize> = model.params().iter().map(|(_, t)| t.len()).collect();
        AnpTrainer {
            adam: AdamState::new(cfg, &lens),
            diverged_steps: 0,
        }
    }

    /// One training step on a batch of (context, target) tasks: average the
    /// per-task negated ELBOs, backpropagate, apply Adam. Non-finite losses
    /// skip the update and bump the divergence counter.
    pub fn step(
        &mut self,
        model: &mut AnpModel,
        batch: &[(ContextSet, TargetBatch)],
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(CoreError::InvalidArgument("empty training batch".into()));
        }
        let mut tape = Tape::new();
        model.register_params(&mut tape);
        let mut total: Option<NodeId> = None;
        for (ctx, tgt) in batch {
            let noise: Vec<f64> = (0..model.cfg.latent_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let loss = model.elbo_tape(&mut tape, ctx, tgt, &noise)?;
            total = Some(match total {
                None => loss,
                Some(t) => tape.add(t, loss)?,
            });
        }
        let avg = tape.scale(total.unwrap(), 1.0 / batch.len() as f64)?;
        let loss_val = tape.values(avg)[0];
        if !loss_val.is_finite() {
            self.diverged_steps += 1;
            return Ok(loss_val);
        }
        let grads = tape.backward(avg)?;
        let gvecs: Vec<Vec<f64>> = model
            .params()
            .iter()
            .map(|(_, t)| grads.of_or_zeros(t.node.expect("registered"), t.len()))
            .collect();
        let mut refs = model.params_mut();
        self.adam.step(&mut refs, &gvecs)?;
        Ok(loss_val)
    }
}
