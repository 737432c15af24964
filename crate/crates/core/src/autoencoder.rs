//! Denoising, contractive and sparse auto-encoders.
//!
//! The encoder is `h = s_e(W x̃ + b)` and the decoder `r = s_d(W′ h + c)`,
//! with `W′ = Wᵀ` when weights are tied. Training losses are built as flow
//! graphs so the same code serves loss evaluation and gradients.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowgraph::{Bindings, Graph, LossKind, NodeId, Op, Penalty};
use crate::nn::activation::softplus;
use crate::nn::{init_range, BlockInfo, BlockKind, InitScheme, Nonlinearity, Parameters};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconstructionLoss {
    Squared,
    CrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Corruption {
    None,
    /// Additive isotropic noise with this standard deviation.
    Gaussian(f64),
    /// Each coordinate is zeroed independently with this probability.
    Masking(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sparsity {
    None,
    L1(f64),
    StudentT(f64),
    KlTarget { alpha: f64, rho: f64 },
}

impl Sparsity {
    fn parts(self) -> Option<(f64, Penalty)> {
        match self {
            Sparsity::None => None,
            Sparsity::L1(a) => Some((a, Penalty::L1)),
            Sparsity::StudentT(a) => Some((a, Penalty::StudentT)),
            Sparsity::KlTarget { alpha, rho } => Some((alpha, Penalty::KlTarget(rho))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderSpec {
    pub fan_in: usize,
    pub code_size: usize,
    pub encoder: Nonlinearity,
    pub decoder: Nonlinearity,
    pub loss: ReconstructionLoss,
    pub tied: bool,
    pub corruption: Corruption,
    pub sparsity: Sparsity,
    pub contraction: f64,
    pub init: InitScheme,
}

impl AutoencoderSpec {
    /// Tied weights, sigmoid hidden and output units, cross-entropy.
    pub fn new(fan_in: usize, code_size: usize) -> Self {
        Self {
            fan_in,
            code_size,
            encoder: Nonlinearity::Sigmoid,
            decoder: Nonlinearity::Sigmoid,
            loss: ReconstructionLoss::CrossEntropy,
            tied: true,
            corruption: Corruption::None,
            sparsity: Sparsity::None,
            contraction: 0.0,
            init: InitScheme::GlorotSigmoid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fan_in == 0 || self.code_size == 0 {
            return Err(Error::spec("auto-encoder dimensions must be positive"));
        }
        if !matches!(
            self.encoder,
            Nonlinearity::Sigmoid | Nonlinearity::Tanh | Nonlinearity::Linear
        ) {
            return Err(Error::spec(format!(
                "encoder non-linearity {} is not supported",
                self.encoder
            )));
        }
        if !matches!(self.decoder, Nonlinearity::Sigmoid | Nonlinearity::Linear) {
            return Err(Error::spec(format!(
                "decoder non-linearity {} is not supported",
                self.decoder
            )));
        }
        if self.loss == ReconstructionLoss::CrossEntropy && self.decoder != Nonlinearity::Sigmoid {
            return Err(Error::spec(
                "cross-entropy reconstruction needs sigmoid output units",
            ));
        }
        match self.corruption {
            Corruption::Masking(p) if !(0.0..=1.0).contains(&p) => {
                return Err(Error::spec(format!(
                    "masking fraction {p} is outside [0, 1]"
                )))
            }
            Corruption::Gaussian(s) if !(s >= 0.0) => {
                return Err(Error::spec("noise level must be non-negative"))
            }
            _ => {}
        }
        match self.sparsity {
            Sparsity::L1(a) | Sparsity::StudentT(a) if !(a >= 0.0) => {
                return Err(Error::spec("sparsity coefficient must be non-negative"))
            }
            Sparsity::KlTarget { alpha, rho } => {
                if !(alpha >= 0.0) || !(rho > 0.0 && rho < 1.0) {
                    return Err(Error::spec("KL sparsity needs alpha ≥ 0 and rho in (0, 1)"));
                }
                if self.encoder != Nonlinearity::Sigmoid {
                    return Err(Error::spec("KL sparsity needs sigmoid codes"));
                }
            }
            _ => {}
        }
        if !(self.contraction >= 0.0) {
            return Err(Error::spec("contraction coefficient must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderParams {
    /// Shape (code, fan-in).
    pub encoder_weight: Tensor,
    pub encoder_bias: Tensor,
    /// Shape (fan-in, code); absent when tied.
    pub decoder_weight: Option<Tensor>,
    pub decoder_bias: Tensor,
}

impl AutoencoderParams {
    pub fn zeros(spec: &AutoencoderSpec) -> Self {
        Self {
            encoder_weight: Tensor::zeros(&[spec.code_size, spec.fan_in]),
            encoder_bias: Tensor::zeros(&[spec.code_size]),
            decoder_weight: (!spec.tied).then(|| Tensor::zeros(&[spec.fan_in, spec.code_size])),
            decoder_bias: Tensor::zeros(&[spec.fan_in]),
        }
    }

    /// The decoder matrix `W′`, shape (fan-in, code).
    pub fn decoder_matrix(&self) -> Tensor {
        match &self.decoder_weight {
            Some(w) => w.clone(),
            None => self.encoder_weight.transpose().expect("rank-2 weights"),
        }
    }

    fn check(&self, spec: &AutoencoderSpec) -> Result<()> {
        let ok = self.encoder_weight.shape() == [spec.code_size, spec.fan_in]
            && self.encoder_bias.shape() == [spec.code_size]
            && self.decoder_bias.shape() == [spec.fan_in]
            && match &self.decoder_weight {
                Some(w) => !spec.tied && w.shape() == [spec.fan_in, spec.code_size],
                None => spec.tied,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::spec(format!(
                "auto-encoder parameters do not match {}-{} spec",
                spec.fan_in, spec.code_size
            )))
        }
    }
}

impl Parameters for AutoencoderParams {
    fn block_info(&self) -> Vec<BlockInfo> {
        let mut out = vec![
            BlockInfo {
                name: "W".into(),
                kind: BlockKind::Weight,
                layer: 0,
            },
            BlockInfo {
                name: "b".into(),
                kind: BlockKind::Bias,
                layer: 0,
            },
        ];
        if self.decoder_weight.is_some() {
            out.push(BlockInfo {
                name: "W_dec".into(),
                kind: BlockKind::Weight,
                layer: 1,
            });
        }
        out.push(BlockInfo {
            name: "c".into(),
            kind: BlockKind::Bias,
            layer: 1,
        });
        out
    }

    fn blocks(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.encoder_weight, &self.encoder_bias];
        if let Some(w) = &self.decoder_weight {
            out.push(w);
        }
        out.push(&self.decoder_bias);
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.encoder_weight, &mut self.encoder_bias];
        if let Some(w) = self.decoder_weight.as_mut() {
            out.push(w);
        }
        out.push(&mut self.decoder_bias);
        out
    }
}

/// Uniform weights per the spec's scheme (both matrices when untied), zero biases.
pub fn initialize_autoencoder(spec: &AutoencoderSpec, seed: u64) -> AutoencoderParams {
    let mut rng = crate::rng::rng(seed);
    let r = init_range(spec.init, spec.fan_in, spec.code_size);
    let mut p = AutoencoderParams::zeros(spec);
    p.encoder_weight = crate::nn::init::uniform_weights(&mut rng, spec.fan_in, spec.code_size, r);
    if !spec.tied {
        p.decoder_weight = Some(crate::nn::init::uniform_weights(
            &mut rng,
            spec.code_size,
            spec.fan_in,
            r,
        ));
    }
    p
}

/// Applies the corruption process; deterministic in `seed`.
pub fn corrupt(x: &Tensor, corruption: Corruption, seed: u64) -> Tensor {
    corrupt_with(x, corruption, &mut crate::rng::rng(seed))
}

pub fn corrupt_with(x: &Tensor, corruption: Corruption, rng: &mut impl Rng) -> Tensor {
    match corruption {
        Corruption::None => x.clone(),
        Corruption::Gaussian(sigma) => {
            if sigma == 0.0 {
                return x.clone();
            }
            let normal = Normal::new(0.0, sigma).expect("validated sigma");
            let mut out = x.clone();
            for v in out.data_mut() {
                *v += normal.sample(rng);
            }
            out
        }
        Corruption::Masking(p) => {
            let mut out = x.clone();
            for v in out.data_mut() {
                if rng.random_bool(p) {
                    *v = 0.0;
                }
            }
            out
        }
    }
}

/// Code `h` for a vector or a batch of rows.
pub fn encode(spec: &AutoencoderSpec, params: &AutoencoderParams, x: &Tensor) -> Result<Tensor> {
    params.check(spec)?;
    crate::nn::mlp::apply_rows(
        spec.encoder,
        x,
        &params.encoder_weight,
        &params.encoder_bias,
    )
}

/// Reconstruction `r(x) = g(f(x))`.
pub fn reconstruct(
    spec: &AutoencoderSpec,
    params: &AutoencoderParams,
    x: &Tensor,
) -> Result<Tensor> {
    let h = encode(spec, params, x)?;
    crate::nn::mlp::apply_rows(
        spec.decoder,
        &h,
        &params.decoder_matrix(),
        &params.decoder_bias,
    )
}

/// `∂r/∂x` at a single input vector, shape (fan-in, fan-in).
pub fn reconstruction_jacobian(
    spec: &AutoencoderSpec,
    params: &AutoencoderParams,
    x: &Tensor,
) -> Result<Tensor> {
    params.check(spec)?;
    if x.rank() != 1 || x.len() != spec.fan_in {
        return Err(Error::Shape(format!(
            "expected an input vector of length {}",
            spec.fan_in
        )));
    }
    let a = {
        let mut a = params.encoder_weight.matmul(x)?;
        a.add_assign(&params.encoder_bias)?;
        a
    };
    let h = a.map(|v| spec.encoder.apply(v));
    let wd = params.decoder_matrix();
    let mut l = wd.matmul(&h)?;
    l.add_assign(&params.decoder_bias)?;
    let (n, k) = (spec.fan_in, spec.code_size);
    let de: Vec<f64> = a
        .data()
        .iter()
        .zip(h.data())
        .map(|(&a, &s)| spec.encoder.derivative(a, s))
        .collect();
    let dd: Vec<f64> = l
        .data()
        .iter()
        .map(|&v| spec.decoder.derivative(v, spec.decoder.apply(v)))
        .collect();
    // inner = diag(de) W, shape (k, n)
    let mut inner = params.encoder_weight.clone();
    for j in 0..k {
        for v in inner.row_mut(j) {
            *v *= de[j];
        }
    }
    let mut jac = wd.matmul(&inner)?;
    for i in 0..n {
        for v in jac.row_mut(i) {
            *v *= dd[i];
        }
    }
    Ok(jac)
}

/// Training criterion of one auto-encoder as a flow graph. Inputs are the
/// clean target `x`, the encoder input `x̃` and, optionally, per-coordinate
/// reconstruction weights.
#[derive(Clone, Debug)]
pub struct AutoencoderGraph {
    pub graph: Graph,
    pub clean: NodeId,
    pub corrupted: NodeId,
    pub weights: Option<NodeId>,
    pub encoder_weight: NodeId,
    pub encoder_bias: NodeId,
    pub decoder_weight: Option<NodeId>,
    pub decoder_bias: NodeId,
    pub code: NodeId,
    pub reconstruction_loss: NodeId,
    pub loss: NodeId,
    pub spec: AutoencoderSpec,
}

pub fn build_autoencoder(spec: &AutoencoderSpec, weighted: bool) -> Result<AutoencoderGraph> {
    spec.validate()?;
    let mut g = Graph::new();
    let clean = g.example("x");
    let corrupted = g.example("x_tilde");
    let weights = weighted.then(|| g.example("weights"));
    let w = g.parameter("W");
    let b = g.parameter("b");
    let a = g.named_op(Some("a"), Op::Affine, &[corrupted, w, b]);
    let code = g.named_op(Some("h"), Op::Activation(spec.encoder), &[a]);
    let (decoder_weight, wd) = if spec.tied {
        (None, g.named_op(Some("W^T"), Op::Transpose, &[w]))
    } else {
        let wd = g.parameter("W_dec");
        (Some(wd), wd)
    };
    let c = g.parameter("c");
    let logits = g.named_op(Some("logits"), Op::Affine, &[code, wd, c]);
    let (kind, prediction) = match spec.loss {
        ReconstructionLoss::CrossEntropy => (LossKind::SigmoidCrossEntropy, logits),
        ReconstructionLoss::Squared => (
            LossKind::SquaredError,
            g.named_op(Some("r"), Op::Activation(spec.decoder), &[logits]),
        ),
    };
    let reconstruction_loss = match weights {
        Some(wt) => g.weighted_loss(kind, prediction, clean, wt),
        None => g.loss(kind, prediction, clean),
    };
    let mut loss = reconstruction_loss;
    if spec.contraction > 0.0 {
        let pen = g.named_op(Some("contraction"), Op::Contraction(spec.encoder), &[a, w]);
        let scaled = g.scale(pen, spec.contraction);
        loss = g.add(loss, scaled);
    }
    if let Some((alpha, penalty)) = spec.sparsity.parts() {
        if alpha > 0.0 {
            let pen = g.named_op(Some("sparsity"), Op::Sparsity(penalty), &[code]);
            let scaled = g.scale(pen, alpha);
            loss = g.add(loss, scaled);
        }
    }
    g.set_output(loss);
    Ok(AutoencoderGraph {
        graph: g,
        clean,
        corrupted,
        weights,
        encoder_weight: w,
        encoder_bias: b,
        decoder_weight,
        decoder_bias: c,
        code,
        reconstruction_loss,
        loss,
        spec: spec.clone(),
    })
}

impl AutoencoderGraph {
    pub fn bindings(
        &self,
        params: &AutoencoderParams,
        clean: Tensor,
        corrupted: Tensor,
        weights: Option<Tensor>,
    ) -> Result<Bindings> {
        params.check(&self.spec)?;
        if self.spec.loss == ReconstructionLoss::CrossEntropy
            && clean.data().iter().any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::input(
                "cross-entropy reconstruction needs targets in [0, 1]",
            ));
        }
        if self
            .spec
            .sparsity
            .parts()
            .is_some_and(|(_, p)| matches!(p, Penalty::KlTarget(_)))
            && clean.rows() < 2
        {
            return Err(Error::input(
                "KL sparsity needs a mini-batch of at least 2 examples",
            ));
        }
        let mut b = Bindings::new();
        b.bind(self.clean, clean).bind(self.corrupted, corrupted);
        match (self.weights, weights) {
            (Some(id), Some(w)) => {
                b.bind(id, w);
            }
            (None, None) => {}
            _ => {
                return Err(Error::input(
                    "reconstruction weights given to an unweighted graph or missing",
                ))
            }
        }
        b.bind(self.encoder_weight, params.encoder_weight.clone())
            .bind(self.encoder_bias, params.encoder_bias.clone());
        if let (Some(id), Some(w)) = (self.decoder_weight, &params.decoder_weight) {
            b.bind(id, w.clone());
        }
        b.bind(self.decoder_bias, params.decoder_bias.clone());
        Ok(b)
    }

    pub fn loss_value(
        &mut self,
        params: &AutoencoderParams,
        clean: Tensor,
        corrupted: Tensor,
        weights: Option<Tensor>,
    ) -> Result<f64> {
        let b = self.bindings(params, clean, corrupted, weights)?;
        self.graph.forward(&b)
    }

    /// Loss and gradient blocks in [`Parameters`] order.
    pub fn loss_and_gradient(
        &mut self,
        params: &AutoencoderParams,
        clean: Tensor,
        corrupted: Tensor,
        weights: Option<Tensor>,
    ) -> Result<(f64, Vec<Tensor>)> {
        let b = self.bindings(params, clean, corrupted, weights)?;
        let loss = self.graph.forward(&b)?;
        let mut grads = self.graph.backward()?;
        let mut out = vec![
            grads.remove(&self.encoder_weight).expect("W"),
            grads.remove(&self.encoder_bias).expect("b"),
        ];
        if let Some(id) = self.decoder_weight {
            out.push(grads.remove(&id).expect("W_dec"));
        }
        out.push(grads.remove(&self.decoder_bias).expect("c"));
        Ok((loss, out))
    }
}

/// Reconstruction loss plus penalties on the undistorted input.
pub fn plain_loss(spec: &AutoencoderSpec, params: &AutoencoderParams, x: &Tensor) -> Result<f64> {
    let mut g = build_autoencoder(spec, false)?;
    g.loss_value(params, x.clone(), x.clone(), None)
}

/// Denoising criterion: reconstruct `x` from `corrupt(x)` (rows of a batch
/// are corrupted independently), plus any sparsity penalty.
pub fn dae_loss(
    spec: &AutoencoderSpec,
    params: &AutoencoderParams,
    x: &Tensor,
    seed: u64,
) -> Result<f64> {
    if spec.corruption == Corruption::None {
        return Err(Error::spec("a denoising loss needs a corruption process"));
    }
    let noisy = corrupt(x, spec.corruption, seed);
    let mut g = build_autoencoder(spec, false)?;
    g.loss_value(params, x.clone(), noisy, None)
}

/// Contractive criterion; the penalty is `λ Σᵢⱼ (s′(aᵢ) Wᵢⱼ)²` averaged over rows.
pub fn cae_loss(spec: &AutoencoderSpec, params: &AutoencoderParams, x: &Tensor) -> Result<f64> {
    if !matches!(spec.encoder, Nonlinearity::Sigmoid | Nonlinearity::Tanh) {
        return Err(Error::spec(
            "contraction penalty needs a sigmoid or tanh encoder",
        ));
    }
    plain_loss(spec, params, x)
}

/// `α·penalty(h)`; L1 and Student-t average over rows, KL uses the row mean.
pub fn sparsity_penalty(h: &Tensor, sparsity: Sparsity) -> Result<f64> {
    let Some((alpha, penalty)) = sparsity.parts() else {
        return Ok(0.0);
    };
    Ok(alpha * Op::Sparsity(penalty).forward(&[h])?.item()?)
}

/// Which coordinates a sampled reconstruction touched and their weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
    /// True when too few zeros forced a full reconstruction.
    pub full: bool,
}

impl SampleRecord {
    /// Dense per-coordinate weight vector, zero outside the sample.
    pub fn dense(&self, n: usize) -> Tensor {
        let mut w = vec![0.0; n];
        for (&i, &v) in self.indices.iter().zip(&self.weights) {
            w[i] = v;
        }
        Tensor::vector(w)
    }
}

/// Keeps every coordinate nonzero in `x` or `x̃` and an equal number of the
/// remaining (zero) coordinates drawn uniformly without replacement, each
/// weighted by the inverse of its inclusion probability.
pub fn sample_coordinates(x: &Tensor, corrupted: &Tensor, seed: u64) -> SampleRecord {
    sample_coordinates_with(x, corrupted, &mut crate::rng::rng(seed))
}

pub fn sample_coordinates_with(x: &Tensor, corrupted: &Tensor, rng: &mut impl Rng) -> SampleRecord {
    let n = x.len();
    let (mut nonzero, mut zero) = (Vec::new(), Vec::new());
    for i in 0..n {
        if x.data()[i] != 0.0 || corrupted.data()[i] != 0.0 {
            nonzero.push(i);
        } else {
            zero.push(i);
        }
    }
    // an all-zero input still needs one draw to stay unbiased
    let draws = nonzero.len().max(1);
    if zero.len() < draws {
        return SampleRecord {
            indices: (0..n).collect(),
            weights: vec![1.0; n],
            full: true,
        };
    }
    let w = zero.len() as f64 / draws as f64;
    let mut picked: Vec<usize> = index::sample(rng, zero.len(), draws)
        .into_iter()
        .map(|k| zero[k])
        .collect();
    picked.sort_unstable();
    let mut weights = vec![1.0; nonzero.len()];
    weights.extend(std::iter::repeat(w).take(picked.len()));
    nonzero.extend(picked);
    SampleRecord {
        indices: nonzero,
        weights,
        full: false,
    }
}

/// Per-coordinate reconstruction losses of `x` from `r(x̃)`.
pub fn coordinate_losses(
    spec: &AutoencoderSpec,
    params: &AutoencoderParams,
    x: &Tensor,
    corrupted: &Tensor,
) -> Result<Vec<f64>> {
    if x.rank() != 1 || corrupted.shape() != x.shape() {
        return Err(Error::Shape(
            "sampled reconstruction works on single input vectors".into(),
        ));
    }
    let h = encode(spec, params, corrupted)?;
    let mut logits = params.decoder_matrix().matmul(&h)?;
    logits.add_assign(&params.decoder_bias)?;
    Ok(match spec.loss {
        ReconstructionLoss::CrossEntropy => logits
            .data()
            .iter()
            .zip(x.data())
            .map(|(&a, &y)| softplus(a) - y * a)
            .collect(),
        ReconstructionLoss::Squared => logits
            .data()
            .iter()
            .zip(x.data())
            .map(|(&a, &y)| {
                let d = spec.decoder.apply(a) - y;
                d * d
            })
            .collect(),
    })
}

/// Importance-weighted estimate of the full reconstruction loss.
pub fn sampled_reconstruction_loss(
    spec: &AutoencoderSpec,
    params: &AutoencoderParams,
    x: &Tensor,
    corrupted: &Tensor,
    seed: u64,
) -> Result<(f64, SampleRecord)> {
    let losses = coordinate_losses(spec, params, x, corrupted)?;
    let record = sample_coordinates(x, corrupted, seed);
    let est = record
        .indices
        .iter()
        .zip(&record.weights)
        .map(|(&i, &w)| w * losses[i])
        .sum();
    Ok((est, record))
}
