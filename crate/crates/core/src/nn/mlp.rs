use super::{LossHead, ModelParams, ModelSpec, Nonlinearity};
use crate::error::{Error, Result};
use crate::flowgraph::{Bindings, Graph, NodeId};
use crate::tensor::Tensor;

/// Node ids of one layer inside an [`MlpGraph`].
#[derive(Clone, Copy, Debug)]
pub struct LayerNodes {
    pub weight: NodeId,
    pub bias: NodeId,
    pub pre_activation: NodeId,
    /// Hidden-layer activation; the output layer feeds its logits straight
    /// into the fused loss head and so has none.
    pub activation: Option<NodeId>,
}

/// Flow graph of a network's training loss, with handles to its nodes.
#[derive(Clone, Debug)]
pub struct MlpGraph {
    pub graph: Graph,
    pub input: NodeId,
    pub target: NodeId,
    pub layers: Vec<LayerNodes>,
    pub loss: NodeId,
    pub spec: ModelSpec,
}

/// Builds the loss graph `L(f(x; θ), y)` for `spec`, checking `params` against it.
pub fn build_mlp(spec: &ModelSpec, params: &ModelParams, head: LossHead) -> Result<MlpGraph> {
    spec.validate()?;
    if head != spec.head {
        return Err(Error::spec(format!(
            "model was specified with {} output, not {head}",
            spec.head
        )));
    }
    params.check_matches(spec)?;
    let mut graph = Graph::new();
    let input = graph.example("x");
    let target = graph.example("y");
    let mut layers = Vec::with_capacity(spec.layers.len());
    let mut h = input;
    let last = spec.layers.len() - 1;
    for (i, l) in spec.layers.iter().enumerate() {
        let weight = graph.parameter(&format!("W{}", i + 1));
        let bias = graph.parameter(&format!("b{}", i + 1));
        let pre = graph.named_op(
            Some(&format!("a{}", i + 1)),
            crate::flowgraph::Op::Affine,
            &[h, weight, bias],
        );
        let activation = if i < last {
            let act = graph.named_op(
                Some(&format!("h{}", i + 1)),
                crate::flowgraph::Op::Activation(l.nonlinearity),
                &[pre],
            );
            h = act;
            Some(act)
        } else {
            None
        };
        layers.push(LayerNodes {
            weight,
            bias,
            pre_activation: pre,
            activation,
        });
    }
    let logits = layers[last].pre_activation;
    let loss = graph.loss(head.loss_kind(), logits, target);
    graph.set_output(loss);
    Ok(MlpGraph {
        graph,
        input,
        target,
        layers,
        loss,
        spec: spec.clone(),
    })
}

impl MlpGraph {
    pub fn bindings(&self, params: &ModelParams, x: Tensor, y: Tensor) -> Bindings {
        let mut b = Bindings::new();
        b.bind(self.input, x).bind(self.target, y);
        for (nodes, p) in self.layers.iter().zip(&params.layers) {
            b.bind(nodes.weight, p.weight.clone())
                .bind(nodes.bias, p.bias.clone());
        }
        b
    }

    pub fn loss_value(&mut self, params: &ModelParams, x: Tensor, y: Tensor) -> Result<f64> {
        let b = self.bindings(params, x, y);
        self.graph.forward(&b)
    }

    /// Mean loss over the rows of `x` and its gradient, one tensor per
    /// parameter block in [`Parameters`](super::Parameters) order.
    pub fn loss_and_gradient(
        &mut self,
        params: &ModelParams,
        x: Tensor,
        y: Tensor,
    ) -> Result<(f64, Vec<Tensor>)> {
        let b = self.bindings(params, x, y);
        let loss = self.graph.forward(&b)?;
        let mut grads = self.graph.backward()?;
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for nodes in &self.layers {
            out.push(grads.remove(&nodes.weight).expect("parameter gradient"));
            out.push(grads.remove(&nodes.bias).expect("parameter gradient"));
        }
        Ok((loss, out))
    }

    pub fn parameter_ids(&self) -> Vec<NodeId> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }
}

/// Output-layer activation `f(x; θ)` for a vector or a batch of rows.
pub fn predict(spec: &ModelSpec, params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    params.check_matches(spec)?;
    let single = x.rank() == 1;
    if x.cols() != spec.inputs() || x.rank() == 0 {
        return Err(Error::Shape(format!(
            "input {:?} does not match fan-in {}",
            x.shape(),
            spec.inputs()
        )));
    }
    let mut h = if single {
        x.clone().reshape(&[1, x.len()])?
    } else {
        x.clone()
    };
    for (l, p) in spec.layers.iter().zip(&params.layers) {
        h = apply_layer(l.nonlinearity, &h, &p.weight, &p.bias)?;
    }
    if single {
        let n = h.len();
        h = h.reshape(&[n])?;
    }
    Ok(h)
}

/// One layer applied to a vector or to each row of a batch.
pub(crate) fn apply_rows(
    kind: Nonlinearity,
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<Tensor> {
    if x.rank() == 0 || x.cols() != weight.cols() {
        return Err(Error::Shape(format!(
            "input {:?} does not match fan-in {}",
            x.shape(),
            weight.cols()
        )));
    }
    if x.rank() == 1 {
        let h = apply_layer(kind, &x.clone().reshape(&[1, x.len()])?, weight, bias)?;
        let n = h.len();
        return h.reshape(&[n]);
    }
    apply_layer(kind, x, weight, bias)
}

pub(crate) fn apply_layer(
    kind: Nonlinearity,
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<Tensor> {
    let mut a = x.matmul_transposed(weight)?;
    let cols = a.cols();
    for (i, v) in a.data_mut().iter_mut().enumerate() {
        *v += bias.data()[i % cols];
    }
    if kind == Nonlinearity::Softmax {
        for r in 0..a.rows() {
            super::activation::softmax_in_place(a.row_mut(r));
        }
    } else {
        a.map_inplace(|v| kind.apply(v));
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowgraph::{check_gradient, CheckOptions};
    use crate::nn::{initialize, LayerParams, LayerSpec, Parameters};

    fn zero_params(spec: &ModelSpec) -> ModelParams {
        ModelParams {
            layers: spec
                .layers
                .iter()
                .map(|l| LayerParams::zeros(l.fan_in, l.fan_out))
                .collect(),
        }
    }

    #[test]
    fn zero_sigmoid_net_cross_entropy() {
        let spec =
            ModelSpec::mlp(2, &[2], Nonlinearity::Sigmoid, 1, LossHead::CrossEntropy).unwrap();
        let mut g = build_mlp(&spec, &zero_params(&spec), LossHead::CrossEntropy).unwrap();
        let loss = g
            .loss_value(
                &zero_params(&spec),
                Tensor::vector(vec![0.3, -2.0]),
                Tensor::vector(vec![1.0]),
            )
            .unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_linear_head_squared_error() {
        let spec = ModelSpec::mlp(3, &[], Nonlinearity::Tanh, 1, LossHead::SquaredError).unwrap();
        let mut g = build_mlp(&spec, &zero_params(&spec), LossHead::SquaredError).unwrap();
        let loss = g
            .loss_value(
                &zero_params(&spec),
                Tensor::vector(vec![1.0, 2.0, 3.0]),
                Tensor::vector(vec![3.0]),
            )
            .unwrap();
        assert_eq!(loss, 9.0);
    }

    #[test]
    fn zero_softmax_head_is_uniform() {
        let spec = ModelSpec::mlp(3, &[4], Nonlinearity::Tanh, 4, LossHead::Nll).unwrap();
        let mut g = build_mlp(&spec, &zero_params(&spec), LossHead::Nll).unwrap();
        for class in 0..4 {
            let mut y = vec![0.0; 4];
            y[class] = 1.0;
            let loss = g
                .loss_value(
                    &zero_params(&spec),
                    Tensor::vector(vec![1.0, -1.0, 0.5]),
                    Tensor::vector(y),
                )
                .unwrap();
            assert!((loss - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn prediction_cases() {
        let spec = ModelSpec::mlp(3, &[2], Nonlinearity::Tanh, 2, LossHead::CrossEntropy).unwrap();
        let out = predict(
            &spec,
            &zero_params(&spec),
            &Tensor::vector(vec![1.0, 2.0, 3.0]),
        )
        .unwrap();
        assert_eq!(out.data(), &[0.5, 0.5]);

        let spec = ModelSpec::mlp(2, &[], Nonlinearity::Tanh, 2, LossHead::SquaredError).unwrap();
        let identity = ModelParams {
            layers: vec![LayerParams {
                weight: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
                bias: Tensor::zeros(&[2]),
            }],
        };
        assert_eq!(
            predict(&spec, &identity, &Tensor::vector(vec![1.0, 2.0]))
                .unwrap()
                .data(),
            &[1.0, 2.0]
        );
        assert!(predict(&spec, &identity, &Tensor::vector(vec![1.0])).is_err());
    }

    #[test]
    fn hard_tanh_unit_saturates() {
        let spec = ModelSpec::new(
            vec![
                LayerSpec::new(1, 1, Nonlinearity::HardTanh),
                LayerSpec::new(1, 1, Nonlinearity::Linear),
            ],
            LossHead::SquaredError,
        )
        .unwrap();
        let params = ModelParams {
            layers: vec![
                LayerParams {
                    weight: Tensor::matrix(1, 1, vec![5.0]).unwrap(),
                    bias: Tensor::zeros(&[1]),
                },
                LayerParams {
                    weight: Tensor::matrix(1, 1, vec![1.0]).unwrap(),
                    bias: Tensor::zeros(&[1]),
                },
            ],
        };
        assert_eq!(
            predict(&spec, &params, &Tensor::vector(vec![1.0]))
                .unwrap()
                .data(),
            &[1.0]
        );
    }

    #[test]
    fn mismatched_params_rejected() {
        let spec = ModelSpec::mlp(3, &[2], Nonlinearity::Tanh, 1, LossHead::SquaredError).unwrap();
        let other = ModelSpec::mlp(3, &[4], Nonlinearity::Tanh, 1, LossHead::SquaredError).unwrap();
        assert!(build_mlp(&spec, &zero_params(&other), LossHead::SquaredError).is_err());
        assert!(build_mlp(&spec, &zero_params(&spec), LossHead::Nll).is_err());
    }

    #[test]
    fn graph_matches_predict() {
        let spec =
            ModelSpec::mlp(3, &[4, 4], Nonlinearity::Tanh, 2, LossHead::SquaredError).unwrap();
        let mut params = initialize(&spec, 5);
        params.layers[2].weight.map_inplace(|_| 0.3);
        let x = Tensor::matrix(2, 3, vec![0.1, 0.2, -0.3, 1.0, -1.0, 0.5]).unwrap();
        let y = Tensor::zeros(&[2, 2]);
        let mut g = build_mlp(&spec, &params, LossHead::SquaredError).unwrap();
        let loss = g.loss_value(&params, x.clone(), y).unwrap();
        let out = predict(&spec, &params, &x).unwrap();
        assert!((loss - out.sum_squares() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn tanh_mlp_gradient_check() {
        let spec = ModelSpec::mlp(2, &[3], Nonlinearity::Tanh, 1, LossHead::SquaredError).unwrap();
        let mut params = initialize(&spec, 9);
        // nonzero output weights so every block carries gradient
        params.layers[1].weight = Tensor::matrix(1, 3, vec![0.4, -0.7, 0.2]).unwrap();
        let mut g = build_mlp(&spec, &params, LossHead::SquaredError).unwrap();
        let b = g.bindings(
            &params,
            Tensor::vector(vec![0.5, -1.2]),
            Tensor::vector(vec![0.3]),
        );
        let report = check_gradient(&mut g.graph, &b, &CheckOptions::default()).unwrap();
        assert!(report.passed(), "{}", report.to_table());
        assert!(report.max_relative_error() < 1e-5);
        assert_eq!(
            report.entries.len(),
            params.blocks().iter().map(|t| t.len()).sum::<usize>()
        );
    }
}
