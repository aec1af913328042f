use std::collections::HashMap;

use super::{Matrix, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named, optionally trainable matrix with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Matrix<T>,
    pub grad: Matrix<T>,
    pub trainable: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Matrix<T>) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self {
            name: name.into(),
            value,
            grad,
            trainable: true,
        }
    }
}

/// Owns every parameter of a model; components refer to entries by [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        if !value.is_finite() {
            return Err(Error::Config(format!("non-finite initial value for {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter::new(name, value));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix<T> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.by_name.get(name).map(|id| &self.params[id.0])
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_value(&mut self, id: ParamId, value: Matrix<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Dimension {
                op: "set_value",
                lhs: p.value.shape(),
                rhs: value.shape(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    /// Marks exactly the parameters whose name starts with one of `prefixes`
    /// as trainable; everything else is frozen.
    pub fn set_trainable_by_prefix<S: AsRef<str>>(&mut self, prefixes: &[S]) {
        for p in &mut self.params {
            p.trainable = prefixes.iter().any(|pre| p.name.starts_with(pre.as_ref()));
        }
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.name.as_str())
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds `scale · grads` into the gradient slots of trainable parameters.
    /// Frozen parameters keep a zero gradient.
    pub fn accumulate(&mut self, grads: &ParamGrads<T>, scale: T) -> Result<()> {
        for (i, g) in grads.slots.iter().enumerate() {
            let (Some(g), Some(p)) = (g, self.params.get_mut(i)) else {
                continue;
            };
            if p.trainable {
                p.grad.axpy(scale, g)?;
            }
        }
        Ok(())
    }
}

/// Gradients produced by one backward pass, indexed by parameter.
#[derive(Debug, Clone)]
pub struct ParamGrads<T> {
    pub(crate) slots: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn get(&self, id: ParamId) -> Option<&Matrix<T>> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }
}
