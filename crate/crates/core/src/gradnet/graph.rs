use crate::error::{Error, Result};

use super::{Layer, Mode, Real, Tensor};

/// A value in the graph: the graph input or the output of a layer node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeId {
    Input,
    Node(usize),
}

#[derive(Debug, Clone)]
struct Node<T> {
    name: String,
    layer: Layer<T>,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
}

/// Incrementally builds a graph, inferring and checking shapes as layers are
/// added.
#[derive(Debug, Clone)]
pub struct GraphBuilder<T> {
    input_shape: Vec<usize>,
    nodes: Vec<Node<T>>,
}

impl<T: Real> GraphBuilder<T> {
    pub fn new(input_shape: &[usize]) -> Self {
        Self {
            input_shape: input_shape.to_vec(),
            nodes: Vec::new(),
        }
    }

    pub fn shape_of(&self, id: NodeId) -> Result<&[usize]> {
        match id {
            NodeId::Input => Ok(&self.input_shape),
            NodeId::Node(i) => self
                .nodes
                .get(i)
                .map(|n| n.shape.as_slice())
                .ok_or_else(|| Error::Shape(format!("unknown node {i}"))),
        }
    }

    pub fn add(
        &mut self,
        name: &str,
        layer: impl Into<Layer<T>>,
        inputs: &[NodeId],
    ) -> Result<NodeId> {
        let layer = layer.into();
        let shapes = inputs
            .iter()
            .map(|&id| self.shape_of(id))
            .collect::<Result<Vec<_>>>()?;
        let shape = layer
            .output_shape(&shapes)
            .map_err(|e| Error::Shape(format!("{name}: {e}")))?;
        self.nodes.push(Node {
            name: name.to_string(),
            layer,
            inputs: inputs.to_vec(),
            shape,
        });
        Ok(NodeId::Node(self.nodes.len() - 1))
    }

    /// Appends a single-input layer fed by `input`.
    pub fn chain(
        &mut self,
        name: &str,
        layer: impl Into<Layer<T>>,
        input: NodeId,
    ) -> Result<NodeId> {
        self.add(name, layer, &[input])
    }

    /// Finishes the graph; `output` must be the most recently added node.
    pub fn build(self, output: NodeId) -> Result<Graph<T>> {
        if self.nodes.is_empty() || output != NodeId::Node(self.nodes.len() - 1) {
            return Err(Error::Shape("graph output must be the last node".into()));
        }
        let mut consumers = vec![0usize; self.nodes.len()];
        for n in &self.nodes {
            for id in &n.inputs {
                if let NodeId::Node(j) = id {
                    consumers[*j] += 1;
                }
            }
        }
        if let Some(i) = consumers[..consumers.len() - 1]
            .iter()
            .position(|&c| c == 0)
        {
            return Err(Error::Shape(format!(
                "node {} is never consumed",
                self.nodes[i].name
            )));
        }
        let mut upstream_params = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let fed = n
                .inputs
                .iter()
                .any(|id| matches!(id, NodeId::Node(j) if upstream_params[*j]));
            upstream_params.push(fed || !n.layer.params().is_empty());
        }
        Ok(Graph {
            input_shape: self.input_shape,
            nodes: self.nodes,
            consumers,
            upstream_params,
        })
    }
}

/// A static DAG of layers in topological order.
#[derive(Debug, Clone)]
pub struct Graph<T> {
    input_shape: Vec<usize>,
    nodes: Vec<Node<T>>,
    consumers: Vec<usize>,
    /// Whether a node or any of its ancestors holds trainable parameters.
    upstream_params: Vec<bool>,
}

impl<T: Real> Graph<T> {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.nodes.last().unwrap().shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `(name, per-sample output shape)` for every node in order.
    pub fn shape_trace(&self) -> Vec<(&str, &[usize])> {
        self.nodes
            .iter()
            .map(|n| (n.name.as_str(), n.shape.as_slice()))
            .collect()
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer<T>> {
        self.nodes.iter().map(|n| &n.layer)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer<T>> {
        self.nodes.iter_mut().map(|n| &mut n.layer)
    }

    pub fn named_layers(&self) -> impl Iterator<Item = (&str, &Layer<T>)> {
        self.nodes.iter().map(|n| (n.name.as_str(), &n.layer))
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if x.shape().is_empty() || x.sample_shape() != self.input_shape.as_slice() {
            return Err(Error::Shape(format!(
                "graph expects (b, {:?}), got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        let n = self.nodes.len();
        let mut values: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut remaining = self.consumers.clone();
        for i in 0..n {
            let inputs = self.nodes[i].inputs.clone();
            let y = {
                let args: Vec<&Tensor<T>> = inputs
                    .iter()
                    .map(|id| match id {
                        NodeId::Input => x,
                        NodeId::Node(j) => values[*j].as_ref().expect("topological order"),
                    })
                    .collect();
                self.nodes[i].layer.forward(&args, mode)?
            };
            for id in &inputs {
                if let NodeId::Node(j) = id {
                    remaining[*j] -= 1;
                    if remaining[*j] == 0 {
                        values[*j] = None;
                    }
                }
            }
            values[i] = Some(y);
        }
        Ok(values.pop().flatten().expect("output node"))
    }

    /// Forward pass that drops every layer cache afterwards.
    pub fn infer(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.forward(x, Mode::Infer);
        self.clear_caches();
        y
    }

    /// Back-propagates `g` (gradient of the loss w.r.t. the output), leaving
    /// parameter gradients in every layer. Returns the input gradient.
    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        grads[n - 1] = Some(g.clone());
        let mut input_grad: Option<Tensor<T>> = None;
        for i in (0..n).rev() {
            let Some(gi) = grads[i].take() else {
                self.nodes[i].layer.clear_cache();
                continue;
            };
            let parts = self.nodes[i].layer.backward(&gi)?;
            for (id, part) in self.nodes[i].inputs.iter().zip(parts) {
                let slot = match id {
                    NodeId::Input => &mut input_grad,
                    NodeId::Node(j) => &mut grads[*j],
                };
                match slot {
                    Some(acc) => acc.add_assign(&part)?,
                    None => *slot = Some(part),
                }
            }
        }
        input_grad.ok_or_else(|| Error::State("graph output does not depend on its input".into()))
    }

    /// Parameter gradients only: skips gradient flow into nodes that have
    /// no trainable parameters upstream, including the graph input.
    pub fn backward_params(&mut self, g: &Tensor<T>) -> Result<()> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        grads[n - 1] = Some(g.clone());
        for i in (0..n).rev() {
            let Some(gi) = grads[i].take() else {
                self.nodes[i].layer.clear_cache();
                continue;
            };
            let needed = |id: &NodeId| matches!(id, NodeId::Node(j) if self.upstream_params[*j]);
            if !self.nodes[i].inputs.iter().any(needed) {
                self.nodes[i].layer.backward_params(&gi)?;
                continue;
            }
            let parts = self.nodes[i].layer.backward(&gi)?;
            for (id, part) in self.nodes[i].inputs.iter().zip(parts) {
                if let NodeId::Node(j) = *id {
                    if self.upstream_params[j] {
                        match &mut grads[j] {
                            Some(acc) => acc.add_assign(&part)?,
                            slot => *slot = Some(part),
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn clear_caches(&mut self) {
        for l in self.layers_mut() {
            l.clear_cache();
        }
    }

    /// `(trainable, non-trainable)` scalar counts.
    pub fn count_params(&self) -> (usize, usize) {
        self.layers().fold((0, 0), |(p, s), l| {
            (
                p + l.params().iter().map(|t| t.len()).sum::<usize>(),
                s + l.state().iter().map(|t| t.len()).sum::<usize>(),
            )
        })
    }

    pub fn grad_norm(&self) -> f64 {
        self.layers()
            .flat_map(|l| l.grads())
            .map(|g| g.sum_sq())
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradnet::{Add, Dense, Relu};

    #[test]
    fn diamond_accumulates_gradients() {
        let mut b = GraphBuilder::<f64>::new(&[2]);
        let r = b.chain("relu", Relu::new(), NodeId::Input).unwrap();
        let s = b.add("sum", Add::new(), &[r, NodeId::Input]).unwrap();
        let mut g = b.build(s).unwrap();
        let x = Tensor::from_vec(&[1, 2], vec![1.5, -2.0]).unwrap();
        assert_eq!(g.forward(&x, Mode::Train).unwrap().data(), &[3.0, -2.0]);
        let dx = g.backward(&Tensor::full(&[1, 2], 1.0)).unwrap();
        assert_eq!(dx.data(), &[2.0, 1.0]);
    }

    #[test]
    fn parameter_only_backward_matches_full() {
        let mut b = GraphBuilder::<f64>::new(&[3]);
        let r = b.chain("relu", Relu::new(), NodeId::Input).unwrap();
        let d = b.chain("d1", Dense::new(3, 4), r).unwrap();
        let e = b.chain("d2", Dense::new(3, 4), r).unwrap();
        let s = b.add("sum", Add::new(), &[d, e]).unwrap();
        let out = b.chain("relu2", Relu::new(), s).unwrap();
        let mut g = b.build(out).unwrap();
        let mut rng = crate::rng::stream_rng(3, "t", 0);
        for l in g.layers_mut() {
            if let Layer::Dense(d) = l {
                d.init_uniform(6.0, &mut rng);
            }
        }
        let x = Tensor::from_vec(&[2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.5]).unwrap();
        let up = Tensor::full(&[2, 4], 1.0);
        g.forward(&x, Mode::Train).unwrap();
        g.backward(&up).unwrap();
        let full: Vec<Tensor<f64>> = g.layers().flat_map(|l| l.grads()).cloned().collect();
        g.forward(&x, Mode::Train).unwrap();
        g.backward_params(&up).unwrap();
        let fast: Vec<Tensor<f64>> = g.layers().flat_map(|l| l.grads()).cloned().collect();
        assert_eq!(full, fast);
    }

    #[test]
    fn shape_errors_at_construction() {
        let mut b = GraphBuilder::<f32>::new(&[3]);
        assert!(b.chain("d", Dense::new(4, 2), NodeId::Input).is_err());
        let d = b.chain("d", Dense::new(3, 2), NodeId::Input).unwrap();
        assert_eq!(b.shape_of(d).unwrap(), &[2]);
        let _dead = b.chain("dead", Relu::new(), d).unwrap();
        let out = b.chain("out", Relu::new(), d).unwrap();
        assert!(b.build(out).is_err());
    }
}
