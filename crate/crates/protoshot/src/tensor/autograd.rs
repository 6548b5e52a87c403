//! Backward pass: topological traversal and per-primitive adjoint rules.

use super::{Node, Op, Tensor, NamedTensors};
use crate::error::{Error, Result};
use crate::scalar::Real;
use std::collections::{BTreeMap, HashMap, HashSet};

/// Gradients keyed by parameter name, in deterministic (sorted) order.
#[derive(Debug, Clone)]
pub struct GradMap<R: Real>(BTreeMap<String, Tensor<R>>);

impl<R: Real> GradMap<R> {
    pub(crate) fn from_map(m: BTreeMap<String, Tensor<R>>) -> Self {
        GradMap(m)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<R>)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> BTreeMap<String, Tensor<R>> {
        self.0
    }
}

impl<R: Real> IntoIterator for GradMap<R> {
    type Item = (String, Tensor<R>);
    type IntoIter = std::collections::btree_map::IntoIter<String, Tensor<R>>;
    fn into_iter(self) -> Self::IntoIter {
        self.0.into_iter()
    }
}

/// Keeps an operand in the graph when gradients must stay differentiable,
/// otherwise severs it so the backward pass builds no new nodes.
fn keep<R: Real>(t: &Tensor<R>, create_graph: bool) -> Tensor<R> {
    if create_graph {
        t.clone()
    } else {
        t.detach()
    }
}

/// Reverse-mode gradients of a scalar `loss` with respect to `params`.
///
/// Every requested parameter must be gradient-tracked; parameters the loss
/// does not reach get zero gradients. With `create_graph` the returned
/// gradients are themselves graph tensors, so they support another round of
/// differentiation (the second-order path). Non-finite values encountered
/// while accumulating adjoints surface as numeric errors naming the primitive
/// that produced them.
pub fn grad<R: Real>(
    loss: &Tensor<R>,
    params: &NamedTensors<R>,
    create_graph: bool,
) -> Result<GradMap<R>> {
    if loss.numel() != 1 {
        return Err(Error::contract(format!(
            "grad: loss must be scalar, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.is_finite() {
        return Err(Error::numeric("loss", "loss is not finite before backward"));
    }
    for (name, p) in params {
        if !p.requires_grad() {
            return Err(Error::contract(format!(
                "grad: parameter '{name}' is not gradient-tracked"
            )));
        }
    }

    // Topological order over graph nodes reachable from the loss, restricted
    // to tensors that participate in differentiation.
    let order = topo_order(loss);

    let mut adjoints: HashMap<u64, Tensor<R>> = HashMap::new();
    adjoints.insert(loss.id(), Tensor::full(loss.shape(), R::one()));

    for t in order.iter().rev() {
        let Some(out_adj) = adjoints.get(&t.id()).cloned() else {
            continue; // no gradient flowed into this value
        };
        let Some(node) = t.node() else {
            continue; // leaf: adjoint already final
        };
        let contribs = vjp(node, t, &out_adj, create_graph)?;
        for (input, contrib) in node.inputs.iter().zip(contribs) {
            if !input.requires_grad() {
                continue;
            }
            let contrib = match contrib {
                Some(c) => c,
                None => continue,
            };
            if !contrib.is_finite() {
                return Err(Error::numeric(
                    node.op.name(),
                    "non-finite gradient produced during backward",
                ));
            }
            match adjoints.remove(&input.id()) {
                Some(acc) => {
                    adjoints.insert(input.id(), acc.add(&contrib)?);
                }
                None => {
                    adjoints.insert(input.id(), contrib);
                }
            }
        }
    }

    let mut out = BTreeMap::new();
    for (name, p) in params {
        let g = match adjoints.get(&p.id()) {
            Some(g) => g.clone(),
            None => p.zeros_like(),
        };
        out.insert(name.clone(), g);
    }
    Ok(GradMap(out))
}

/// Post-order DFS, iterative to keep deep chains (long inner loops) off the
/// call stack. Returns tensors in an order where every node appears after all
/// of its graph ancestors' consumers — i.e. standard reverse-topological when
/// iterated backwards.
fn topo_order<R: Real>(root: &Tensor<R>) -> Vec<Tensor<R>> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    // (tensor, expanded_children_yet?)
    let mut stack: Vec<(Tensor<R>, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(node) = t.node() {
            for input in &node.inputs {
                if input.requires_grad() && !visited.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order
}

/// Adjoint contributions for each input of `node`, given the adjoint of its
/// output. `None` marks an input that receives no gradient (e.g. it was
/// untracked). All rules are built from primitive tensor operations so that
/// with `create_graph` the results remain differentiable.
fn vjp<R: Real>(
    node: &Node<R>,
    output: &Tensor<R>,
    out_adj: &Tensor<R>,
    create_graph: bool,
) -> Result<Vec<Option<Tensor<R>>>> {
    let d = out_adj;
    let ins = &node.inputs;
    Ok(match node.op {
        Op::Add => vec![Some(d.clone()), Some(d.clone())],
        Op::Sub => vec![Some(d.clone()), Some(d.neg())],
        Op::Mul => {
            let a = keep(&ins[0], create_graph);
            let b = keep(&ins[1], create_graph);
            vec![Some(d.mul(&b)?), Some(d.mul(&a)?)]
        }
        Op::Div => {
            let a = keep(&ins[0], create_graph);
            let b = keep(&ins[1], create_graph);
            let da = d.div(&b)?;
            let db = d.mul(&a)?.div(&b.mul(&b)?)?.neg();
            vec![Some(da), Some(db)]
        }
        Op::Neg => vec![Some(d.neg())],
        Op::AddScalar(_) => vec![Some(d.clone())],
        Op::MulScalar(c) => vec![Some(d.scale(c))],
        Op::Matmul => {
            let a = keep(&ins[0], create_graph);
            let b = keep(&ins[1], create_graph);
            vec![Some(d.matmul(&b.t()?)?), Some(a.t()?.matmul(d)?)]
        }
        Op::Transpose => vec![Some(d.t()?)],
        Op::Tanh => {
            // d/dx tanh = 1 - tanh^2, read off the saved output.
            let y = keep(output, create_graph);
            let one_minus_sq = y.mul(&y)?.neg().add_scalar(R::one());
            vec![Some(d.mul(&one_minus_sq)?)]
        }
        Op::Exp => {
            let y = keep(output, create_graph);
            vec![Some(d.mul(&y)?)]
        }
        Op::Ln => {
            let a = keep(&ins[0], create_graph);
            vec![Some(d.div(&a)?)]
        }
        Op::Sqrt => {
            let y = keep(output, create_graph);
            let half = R::from_f64_lossy(0.5);
            vec![Some(d.div(&y)?.scale(half))]
        }
        Op::ClampMin(c) => {
            // Pass-through where the input was above the floor; the mask is a
            // constant of the input values, so it is valid for higher-order
            // passes too.
            let mask: Vec<R> = ins[0]
                .data()
                .iter()
                .map(|&v| if v < c { R::zero() } else { R::one() })
                .collect();
            let mask = Tensor::from_vec(ins[0].shape(), mask)?;
            vec![Some(d.mul(&mask)?)]
        }
        Op::SumTo => vec![Some(d.broadcast_to(ins[0].shape())?)],
        Op::BroadcastTo => vec![Some(d.sum_to(ins[0].shape())?)],
        Op::Reshape => vec![Some(d.reshape(ins[0].shape())?)],
    })
}
