//! A single-use tape: every operation appends a node holding its output, and
//! `backward` walks the nodes in reverse accumulating gradients.

use super::ops;
use super::ModelParams;
use crate::tensor::Tensor;

pub(crate) type NodeId = usize;

enum Op {
    Input,
    Conv { input: NodeId, layer: usize, k: usize },
    Relu(NodeId),
    Concat(Vec<NodeId>),
    Pool(NodeId),
    Upsample(NodeId),
}

pub(crate) struct Graph<'p> {
    params: &'p ModelParams,
    nodes: Vec<(Tensor, Op)>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        Graph { params, nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push((value, op));
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].0
    }

    pub fn into_value(mut self, id: NodeId) -> Tensor {
        self.nodes.swap_remove(id).0
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input)
    }

    /// Convolution with conv layer `layer` (weights `2 * layer`, bias `2 * layer + 1`).
    pub fn conv(&mut self, input: NodeId, layer: usize) -> NodeId {
        let w = &self.params.tensors[2 * layer];
        let b = &self.params.tensors[2 * layer + 1];
        let (cout, cin, k) = (w.shape[0], w.shape[1], w.shape[2]);
        assert_eq!(self.value(input).channels(), cin, "layer {} input channels", w.name);
        let out = ops::conv2d(self.value(input), &w.data, &b.data, cout, k);
        self.push(out, Op::Conv { input, layer, k })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = ops::relu(self.value(x));
        self.push(out, Op::Relu(x))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        if parts.len() == 1 {
            return parts[0];
        }
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat(&refs);
        self.push(out, Op::Concat(parts.to_vec()))
    }

    pub fn pool(&mut self, x: NodeId) -> NodeId {
        let out = ops::avgpool2(self.value(x));
        self.push(out, Op::Pool(x))
    }

    pub fn upsample(&mut self, x: NodeId) -> NodeId {
        let out = ops::upsample2(self.value(x));
        self.push(out, Op::Upsample(x))
    }

    /// Sign pattern of every ReLU input, used to detect kinks when checking
    /// gradients numerically.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|(_, op)| match op {
                Op::Relu(x) => Some(*x),
                _ => None,
            })
            .flat_map(|x| self.value(x).data().iter().map(|&v| v > 0.0))
            .collect()
    }

    /// Gradients of a scalar with respect to every parameter tensor, given
    /// that scalar's gradients at some nodes.
    pub fn backward(&self, seeds: Vec<(NodeId, Tensor)>) -> Vec<Vec<f64>> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            accumulate(&mut grads[id], g);
        }
        let mut out: Vec<Vec<f64>> = self.params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].1 {
                Op::Input => {}
                Op::Conv { input, layer, k } => {
                    let need = !matches!(self.nodes[*input].1, Op::Input);
                    let w = &self.params.tensors[2 * layer].data;
                    let (gin, gw, gb) = ops::conv2d_backward(self.value(*input), w, &g, *k, need);
                    add_into(&mut out[2 * layer], &gw);
                    add_into(&mut out[2 * layer + 1], &gb);
                    if let Some(gin) = gin {
                        accumulate(&mut grads[*input], gin);
                    }
                }
                Op::Relu(x) => {
                    let gin = ops::relu_backward(self.value(*x), &g);
                    accumulate(&mut grads[*x], gin);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (c, h, w) = self.value(p).shape();
                        let plane = h * w;
                        let slice = g.data()[offset * plane..(offset + c) * plane].to_vec();
                        offset += c;
                        accumulate(&mut grads[p], Tensor::from_vec(c, h, w, slice).expect("slice shape"));
                    }
                }
                Op::Pool(x) => accumulate(&mut grads[*x], ops::avgpool2_backward(&g)),
                Op::Upsample(x) => accumulate(&mut grads[*x], ops::upsample2_backward(&g)),
            }
        }
        out
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => add_into(existing.data_mut(), g.data()),
        None => *slot = Some(g),
    }
}
