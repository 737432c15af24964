//! The fixed catalog of node operations with their local derivatives.

use crate::error::{Error, Result};
use crate::nn::activation::{log_sum_exp, sigmoid, softmax_in_place, softplus};
use crate::nn::Nonlinearity;
use crate::tensor::Tensor;

use super::InputRole;

/// Loss heads. Each is a per-row sum averaged over the rows of the batch;
/// rank-0 and rank-1 operands count as a single row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// `Σ (p − t)²` on a prediction.
    SquaredError,
    /// `Σ softplus(a) − t·a`, i.e. binary cross-entropy of `sigmoid(a)`
    /// computed from the logits `a`.
    SigmoidCrossEntropy,
    /// `−Σ t·log softmax(a)` from the logits `a`.
    SoftmaxNll,
}

/// Activation-penalty shapes for code sparsity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Penalty {
    /// `Σ |h|` per row, averaged over rows.
    L1,
    /// `Σ log(1 + h²)` per row, averaged over rows.
    StudentT,
    /// `Σⱼ KL(ρ ‖ h̄ⱼ)` on the batch-mean activation; zero at `h̄ = ρ`.
    KlTarget(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input(InputRole),
    Add,
    Sub,
    Mul,
    Scale(f64),
    MatMul,
    Transpose,
    /// `x·Wᵀ + b`.
    Affine,
    Activation(Nonlinearity),
    Sum,
    Mean,
    /// Inputs: prediction (or logits), target and optional weights.
    Loss(LossKind),
    /// Squared Frobenius norm of the encoder Jacobian `Σᵢⱼ (s′(aᵢ) Wᵢⱼ)²`,
    /// averaged over rows. Inputs: pre-activation `a`, weights `W`.
    Contraction(Nonlinearity),
    Sparsity(Penalty),
}

fn err(msg: String) -> Error {
    Error::Shape(msg)
}

fn rows_of(t: &Tensor) -> usize {
    t.rows()
}

/// How `b` broadcasts onto `a` for the binary elementwise ops.
#[derive(Clone, Copy, PartialEq)]
enum Broadcast {
    Same,
    Rows,
    Scalar,
}

fn broadcast(a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if b.rank() == 0 {
        Ok(Broadcast::Scalar)
    } else if a.rank() == 2 && b.rank() == 1 && a.shape()[1] == b.shape()[0] {
        Ok(Broadcast::Rows)
    } else {
        Err(err(format!(
            "cannot broadcast {:?} onto {:?}",
            b.shape(),
            a.shape()
        )))
    }
}

fn combine(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let mode = broadcast(a, b)?;
    let mut out = a.clone();
    let cols = a.cols();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let bv = match mode {
            Broadcast::Same => b.data()[i],
            Broadcast::Rows => b.data()[i % cols],
            Broadcast::Scalar => b.data()[0],
        };
        *v = f(*v, bv);
    }
    Ok(out)
}

/// Reduces a gradient shaped like `a` back onto the shape of `b`.
fn reduce_to(grad: &Tensor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(match broadcast(a, b)? {
        Broadcast::Same => grad.clone(),
        Broadcast::Scalar => Tensor::full(b.shape(), grad.sum()),
        Broadcast::Rows => column_sums(grad),
    })
}

fn column_sums(t: &Tensor) -> Tensor {
    let cols = t.cols();
    let mut out = vec![0.0; cols];
    for r in 0..t.rows() {
        for (o, v) in out.iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    Tensor::vector(out)
}

fn outer(u: &Tensor, v: &Tensor) -> Tensor {
    let mut data = Vec::with_capacity(u.len() * v.len());
    for &a in u.data() {
        data.extend(v.data().iter().map(|b| a * b));
    }
    Tensor::matrix(u.len(), v.len(), data).expect("outer product shape")
}

fn require_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(err(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())))
    }
}

impl Op {
    pub(crate) fn label(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Affine => "affine",
            Op::Activation(_) => "activation",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Loss(_) => "loss",
            Op::Contraction(_) => "contraction",
            Op::Sparsity(_) => "sparsity",
        }
    }

    pub(crate) fn kinks(&self) -> &'static [f64] {
        match self {
            Op::Activation(kind) => kind.kinks(),
            Op::Sparsity(Penalty::L1) => &[0.0],
            _ => &[],
        }
    }

    pub(crate) fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let arity = match self {
            Op::Input(_) => 0,
            Op::Add | Op::Sub | Op::Mul | Op::MatMul | Op::Contraction(_) => 2,
            Op::Affine => 3,
            Op::Loss(_) => inputs.len().clamp(2, 3),
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(err(format!(
                "{} expects {arity} inputs, got {}",
                self.label(),
                inputs.len()
            )));
        }
        match self {
            Op::Input(_) => unreachable!("inputs are bound, not computed"),
            Op::Add => combine(inputs[0], inputs[1], |a, b| a + b),
            Op::Sub => combine(inputs[0], inputs[1], |a, b| a - b),
            Op::Mul => {
                let mode = broadcast(inputs[0], inputs[1])?;
                if mode == Broadcast::Rows {
                    return Err(err("mul supports equal shapes or a scalar factor".into()));
                }
                combine(inputs[0], inputs[1], |a, b| a * b)
            }
            Op::Scale(c) => Ok(inputs[0].scale(*c)),
            Op::MatMul => inputs[0].matmul(inputs[1]),
            Op::Transpose => inputs[0].transpose(),
            Op::Affine => affine_forward(inputs[0], inputs[1], inputs[2]),
            Op::Activation(kind) => Ok(activation_forward(*kind, inputs[0])),
            Op::Sum => Ok(Tensor::scalar(inputs[0].sum())),
            Op::Mean => Ok(Tensor::scalar(inputs[0].mean())),
            Op::Loss(kind) => loss_forward(*kind, inputs[0], inputs[1], inputs.get(2).copied()),
            Op::Contraction(kind) => contraction_forward(*kind, inputs[0], inputs[1]),
            Op::Sparsity(p) => sparsity_forward(*p, inputs[0]),
        }
    }

    /// Gradients for each input given the output gradient `g`; entries for
    /// inputs whose flag in `wanted` is false may be `None`.
    pub(crate) fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        g: &Tensor,
        wanted: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let want = |i: usize| wanted.get(i).copied().unwrap_or(false);
        Ok(match self {
            Op::Input(_) => Vec::new(),
            Op::Add => {
                let gb = if want(1) {
                    Some(reduce_to(g, inputs[0], inputs[1])?)
                } else {
                    None
                };
                vec![Some(g.clone()), gb]
            }
            Op::Sub => {
                let gb = if want(1) {
                    Some(reduce_to(g, inputs[0], inputs[1])?.scale(-1.0))
                } else {
                    None
                };
                vec![Some(g.clone()), gb]
            }
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let ga = if want(0) {
                    Some(combine(g, b, |x, y| x * y)?)
                } else {
                    None
                };
                let gb = if want(1) {
                    let prod = g.zip_map(a, |x, y| x * y)?;
                    Some(reduce_to(&prod, a, b)?)
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::Scale(c) => vec![Some(g.scale(*c))],
            Op::MatMul => matmul_backward(inputs[0], inputs[1], g, want(0), want(1))?,
            Op::Transpose => vec![Some(g.transpose()?)],
            Op::Affine => affine_backward(inputs[0], inputs[1], g, [want(0), want(1), want(2)])?,
            Op::Activation(kind) => vec![Some(activation_backward(*kind, inputs[0], output, g)?)],
            Op::Sum => vec![Some(Tensor::full(inputs[0].shape(), g.item()?))],
            Op::Mean => {
                let n = inputs[0].len().max(1) as f64;
                vec![Some(Tensor::full(inputs[0].shape(), g.item()? / n))]
            }
            Op::Loss(kind) => loss_backward(*kind, inputs, g.item()?, wanted)?,
            Op::Contraction(kind) => {
                contraction_backward(*kind, inputs[0], inputs[1], g.item()?, want(0), want(1))?
            }
            Op::Sparsity(p) => vec![Some(sparsity_backward(*p, inputs[0], g.item()?))],
        })
    }
}

fn affine_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if w.rank() != 2 || b.rank() != 1 || b.len() != w.shape()[0] {
        return Err(err(format!(
            "affine weights {:?} and bias {:?} disagree",
            w.shape(),
            b.shape()
        )));
    }
    match x.rank() {
        1 => {
            let mut out = w.matmul(x)?;
            out.add_assign(b)?;
            Ok(out)
        }
        2 => {
            let mut out = x.matmul_transposed(w)?;
            let cols = out.cols();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += b.data()[i % cols];
            }
            Ok(out)
        }
        _ => Err(err(format!(
            "affine input must be a vector or matrix, got {:?}",
            x.shape()
        ))),
    }
}

fn affine_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    want: [bool; 3],
) -> Result<Vec<Option<Tensor>>> {
    if x.rank() == 1 {
        let gx = if want[0] { Some(g.matmul(w)?) } else { None };
        let gw = if want[1] { Some(outer(g, x)) } else { None };
        let gb = if want[2] { Some(g.clone()) } else { None };
        return Ok(vec![gx, gw, gb]);
    }
    let gx = if want[0] { Some(g.matmul(w)?) } else { None };
    let gw = if want[1] {
        Some(g.transpose()?.matmul(x)?)
    } else {
        None
    };
    let gb = if want[2] { Some(column_sums(g)) } else { None };
    Ok(vec![gx, gw, gb])
}

fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    g: &Tensor,
    wa: bool,
    wb: bool,
) -> Result<Vec<Option<Tensor>>> {
    let (ga, gb) = match (a.rank(), b.rank()) {
        (2, 2) => (
            if wa {
                Some(g.matmul_transposed(b)?)
            } else {
                None
            },
            if wb {
                Some(a.transpose()?.matmul(g)?)
            } else {
                None
            },
        ),
        (2, 1) => (
            if wa { Some(outer(g, b)) } else { None },
            if wb { Some(g.matmul(a)?) } else { None },
        ),
        (1, 2) => (
            if wa { Some(b.matmul(g)?) } else { None },
            if wb { Some(outer(a, g)) } else { None },
        ),
        (1, 1) => {
            let s = g.item()?;
            (
                if wa { Some(b.scale(s)) } else { None },
                if wb { Some(a.scale(s)) } else { None },
            )
        }
        _ => {
            return Err(err(format!(
                "matmul of {:?} and {:?}",
                a.shape(),
                b.shape()
            )))
        }
    };
    Ok(vec![ga, gb])
}

fn activation_forward(kind: Nonlinearity, a: &Tensor) -> Tensor {
    if kind == Nonlinearity::Softmax {
        let mut out = a.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        out
    } else {
        a.map(|v| kind.apply(v))
    }
}

fn activation_backward(kind: Nonlinearity, a: &Tensor, s: &Tensor, g: &Tensor) -> Result<Tensor> {
    if kind == Nonlinearity::Softmax {
        let mut out = g.clone();
        for r in 0..out.rows() {
            let srow = s.row(r);
            let grow = g.row(r);
            let dot: f64 = srow.iter().zip(grow).map(|(x, y)| x * y).sum();
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = srow[j] * (grow[j] - dot);
            }
        }
        return Ok(out);
    }
    let mut out = g.clone();
    for ((o, &av), &sv) in out.data_mut().iter_mut().zip(a.data()).zip(s.data()) {
        *o *= kind.derivative(av, sv);
    }
    Ok(out)
}

fn loss_forward(kind: LossKind, p: &Tensor, t: &Tensor, w: Option<&Tensor>) -> Result<Tensor> {
    require_same(p, t, "prediction and target shapes differ")?;
    if let Some(w) = w {
        require_same(p, w, "loss weights must match the target shape")?;
        if kind == LossKind::SoftmaxNll {
            return Err(err(
                "softmax NLL does not take per-coordinate weights".into()
            ));
        }
    }
    let rows = rows_of(p) as f64;
    let weight = |i: usize| w.map_or(1.0, |w| w.data()[i]);
    let total = match kind {
        LossKind::SquaredError => p
            .data()
            .iter()
            .zip(t.data())
            .enumerate()
            .map(|(i, (a, b))| weight(i) * (a - b) * (a - b))
            .sum::<f64>(),
        LossKind::SigmoidCrossEntropy => p
            .data()
            .iter()
            .zip(t.data())
            .enumerate()
            .map(|(i, (&a, &y))| weight(i) * (softplus(a) - y * a))
            .sum::<f64>(),
        LossKind::SoftmaxNll => {
            let mut s = 0.0;
            for r in 0..p.rows() {
                let (prow, trow) = (p.row(r), t.row(r));
                let lse = log_sum_exp(prow);
                s += prow
                    .iter()
                    .zip(trow)
                    .map(|(a, y)| -y * (a - lse))
                    .sum::<f64>();
            }
            s
        }
    };
    Ok(Tensor::scalar(total / rows))
}

fn loss_backward(
    kind: LossKind,
    inputs: &[&Tensor],
    g: f64,
    wanted: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let (p, t) = (inputs[0], inputs[1]);
    let w = inputs.get(2).copied();
    let c = g / rows_of(p) as f64;
    let weight = |i: usize| w.map_or(1.0, |w| w.data()[i]);
    let want = |i: usize| wanted.get(i).copied().unwrap_or(false);
    let mut gp = Tensor::zeros_like(p);
    let mut gt = Tensor::zeros_like(t);
    let mut gw = w.map(Tensor::zeros_like);
    match kind {
        LossKind::SquaredError => {
            for i in 0..p.len() {
                let d = p.data()[i] - t.data()[i];
                gp.data_mut()[i] = c * weight(i) * 2.0 * d;
                gt.data_mut()[i] = -c * weight(i) * 2.0 * d;
                if let Some(gw) = gw.as_mut() {
                    gw.data_mut()[i] = c * d * d;
                }
            }
        }
        LossKind::SigmoidCrossEntropy => {
            for i in 0..p.len() {
                let (a, y) = (p.data()[i], t.data()[i]);
                gp.data_mut()[i] = c * weight(i) * (sigmoid(a) - y);
                gt.data_mut()[i] = -c * weight(i) * a;
                if let Some(gw) = gw.as_mut() {
                    gw.data_mut()[i] = c * (softplus(a) - y * a);
                }
            }
        }
        LossKind::SoftmaxNll => {
            for r in 0..p.rows() {
                let prow = p.row(r).to_vec();
                let trow = t.row(r).to_vec();
                let lse = log_sum_exp(&prow);
                let mass: f64 = trow.iter().sum();
                let mut probs = prow.clone();
                softmax_in_place(&mut probs);
                for j in 0..prow.len() {
                    gp.row_mut(r)[j] = c * (probs[j] * mass - trow[j]);
                    gt.row_mut(r)[j] = -c * (prow[j] - lse);
                }
            }
        }
    }
    let mut out = vec![Some(gp), if want(1) { Some(gt) } else { None }];
    if w.is_some() {
        out.push(if want(2) { gw } else { None });
    }
    Ok(out)
}

fn contraction_parts(kind: Nonlinearity, a: &Tensor, w: &Tensor) -> Result<Vec<f64>> {
    if kind.second_derivative(0.0).is_none() {
        return Err(err(format!(
            "contraction penalty needs a smooth encoder, got {kind}"
        )));
    }
    if w.rank() != 2 || a.cols() != w.shape()[0] {
        return Err(err(format!(
            "pre-activation {:?} does not match weights {:?}",
            a.shape(),
            w.shape()
        )));
    }
    Ok((0..w.shape()[0])
        .map(|i| w.row(i).iter().map(|v| v * v).sum())
        .collect())
}

fn contraction_forward(kind: Nonlinearity, a: &Tensor, w: &Tensor) -> Result<Tensor> {
    let norms = contraction_parts(kind, a, w)?;
    let h = a.cols();
    let mut total = 0.0;
    for (k, &av) in a.data().iter().enumerate() {
        let d = kind.derivative(av, kind.apply(av));
        total += d * d * norms[k % h];
    }
    Ok(Tensor::scalar(total / rows_of(a) as f64))
}

fn contraction_backward(
    kind: Nonlinearity,
    a: &Tensor,
    w: &Tensor,
    g: f64,
    wa: bool,
    ww: bool,
) -> Result<Vec<Option<Tensor>>> {
    let norms = contraction_parts(kind, a, w)?;
    let h = a.cols();
    let c = g / rows_of(a) as f64;
    let mut ga = Tensor::zeros_like(a);
    // Σ_rows s′(a_ri)² per hidden unit
    let mut deriv_sq = vec![0.0; h];
    for (k, &av) in a.data().iter().enumerate() {
        let s = kind.apply(av);
        let d = kind.derivative(av, s);
        let dd = kind.second_derivative(s).expect("checked smooth");
        ga.data_mut()[k] = c * 2.0 * d * dd * norms[k % h];
        deriv_sq[k % h] += d * d;
    }
    let gw = if ww {
        let mut gw = w.clone();
        let cols = w.cols();
        for (k, v) in gw.data_mut().iter_mut().enumerate() {
            *v *= c * 2.0 * deriv_sq[k / cols];
        }
        Some(gw)
    } else {
        None
    };
    Ok(vec![if wa { Some(ga) } else { None }, gw])
}

fn sparsity_forward(p: Penalty, h: &Tensor) -> Result<Tensor> {
    let rows = rows_of(h) as f64;
    let v = match p {
        Penalty::L1 => h.data().iter().map(|v| v.abs()).sum::<f64>() / rows,
        Penalty::StudentT => h.data().iter().map(|v| (v * v).ln_1p()).sum::<f64>() / rows,
        Penalty::KlTarget(rho) => {
            let means = column_sums(h).scale(1.0 / rows);
            let mut total = 0.0;
            for &m in means.data() {
                if !(m > 0.0 && m < 1.0) {
                    return Err(Error::input(format!(
                        "KL sparsity needs mean activations in (0,1), got {m}"
                    )));
                }
                total += rho * (rho / m).ln() + (1.0 - rho) * ((1.0 - rho) / (1.0 - m)).ln();
            }
            total
        }
    };
    Ok(Tensor::scalar(v))
}

fn sparsity_backward(p: Penalty, h: &Tensor, g: f64) -> Tensor {
    let c = g / rows_of(h) as f64;
    match p {
        Penalty::L1 => h.map(|v| {
            c * if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        }),
        Penalty::StudentT => h.map(|v| c * 2.0 * v / (1.0 + v * v)),
        Penalty::KlTarget(rho) => {
            let means = column_sums(h).scale(1.0 / rows_of(h) as f64);
            let cols = h.cols();
            let mut out = Tensor::zeros_like(h);
            for (k, o) in out.data_mut().iter_mut().enumerate() {
                let m = means.data()[k % cols];
                *o = c * (-rho / m + (1.0 - rho) / (1.0 - m));
            }
            out
        }
    }
}
