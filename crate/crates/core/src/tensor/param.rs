use super::{Graph, Scalar, Shape, Tensor, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Owned, named set of trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn shapes(&self) -> Vec<Shape> {
        self.tensors.iter().map(Tensor::shape).collect()
    }
}

/// Lazily binds store tensors onto a graph for one forward pass.
///
/// Each parameter is recorded at most once, so a tensor used by several
/// operations accumulates its gradient on a single leaf.
#[derive(Debug, Clone)]
pub struct Binder {
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl Binder {
    /// Binder whose leaves require gradients.
    pub fn trainable(num_params: usize) -> Self {
        Binder {
            vars: vec![None; num_params],
            trainable: true,
        }
    }

    /// Binder whose leaves are constants (inference).
    pub fn frozen(num_params: usize) -> Self {
        Binder {
            vars: vec![None; num_params],
            trainable: false,
        }
    }

    pub fn bind<T: Scalar>(&mut self, graph: &mut Graph<T>, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = graph.leaf(store.get(id).clone(), self.trainable);
        self.vars[id.0] = Some(v);
        v
    }

    /// Gradients of every bound parameter after `graph.backward`, indexed
    /// like the store; unbound parameters get `None`.
    pub fn gradients<T: Scalar>(&self, graph: &Graph<T>) -> Vec<Option<Vec<T>>> {
        self.vars
            .iter()
            .map(|v| v.and_then(|v| graph.grad(v).map(<[T]>::to_vec)))
            .collect()
    }
}
