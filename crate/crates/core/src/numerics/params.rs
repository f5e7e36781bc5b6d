use std::collections::HashMap;
use std::sync::Arc;

use super::{Gradients, Graph, NumericsError, Tensor, Var};

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: Arc<HashMap<String, usize>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.values[i] = value;
            return;
        }
        Arc::make_mut(&mut self.index).insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Number of scalars in parameters whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, t)| t.len()).sum()
    }

    pub fn flatten(&self) -> Tensor {
        let data: Vec<f64> = self.values.iter().flat_map(|t| t.data().iter().copied()).collect();
        Tensor::from_vec(data)
    }

    pub fn from_flat(&self, flat: &Tensor) -> Result<Self, NumericsError> {
        if flat.len() != self.numel() {
            return Err(NumericsError::Invalid(format!(
                "flat vector of {} for {} parameters",
                flat.len(),
                self.numel()
            )));
        }
        let mut out = self.clone();
        let mut off = 0;
        for v in out.values.iter_mut() {
            let n = v.len();
            *v = Tensor::from_parts(v.shape().to_vec(), flat.data()[off..off + n].to_vec());
            off += n;
        }
        Ok(out)
    }

    /// Put every parameter on `graph` as a leaf.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> BoundParams<'g> {
        let vars = self.values.iter().map(|v| graph.leaf(v.clone(), trainable)).collect();
        BoundParams { vars, index: self.index.clone() }
    }

    /// Bind parameters as slices of a single flat variable, so one gradient
    /// covers every parameter.
    pub fn bind_flat<'g>(&self, flat: Var<'g>) -> Result<BoundParams<'g>, NumericsError> {
        if flat.value().len() != self.numel() {
            return Err(NumericsError::Invalid("flat parameter vector has the wrong length".into()));
        }
        let mut vars = Vec::with_capacity(self.len());
        let mut off = 0;
        for v in &self.values {
            let n = v.len();
            vars.push(flat.narrow(0, off, n)?.reshape(v.shape())?);
            off += n;
        }
        Ok(BoundParams { vars, index: self.index.clone() })
    }
}

/// Parameters placed on a graph for one forward pass.
pub struct BoundParams<'g> {
    vars: Vec<Var<'g>>,
    index: Arc<HashMap<String, usize>>,
}

impl<'g> BoundParams<'g> {
    pub fn get(&self, name: &str) -> Result<Var<'g>, NumericsError> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| NumericsError::Invalid(format!("unknown parameter `{name}`")))
    }

    /// Gradient per parameter, in store order; zero where nothing flowed.
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape()))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_round_trip_and_binding() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::from_fn(&[2, 2], |i| i as f64));
        p.insert("b", Tensor::from_vec(vec![7.0, 8.0]));
        let flat = p.flatten();
        assert_eq!(flat.len(), 6);
        assert_eq!(p.from_flat(&flat).unwrap(), p);

        let g = Graph::new();
        let fv = g.param(flat);
        let bound = p.bind_flat(fv).unwrap();
        let loss = bound.get("b").unwrap().sum().unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(fv).unwrap().data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        assert!(bound.get("missing").is_err());
    }
}
