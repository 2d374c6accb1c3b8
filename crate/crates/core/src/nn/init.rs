use crate::tensor::{ParamId, ParamKind, ParamStore, Rng, Tensor};

/// Creates named parameters under a dotted prefix.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut Rng) -> Self {
        ParamBuilder { store, rng, prefix: String::new() }
    }

    /// Child builder whose names are prefixed with `name.`.
    pub fn scope(&mut self, name: impl AsRef<str>) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamBuilder { store: self.store, rng: self.rng, prefix }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn weight(&mut self, name: &str, shape: impl Into<Vec<usize>>, fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = self.rng.uniform_tensor(shape, bound);
        self.store.add(self.full(name), value, ParamKind::Weight)
    }

    pub fn zeros(&mut self, name: &str, shape: impl Into<Vec<usize>>) -> ParamId {
        self.store.add(self.full(name), Tensor::zeros(shape), ParamKind::Weight)
    }

    pub fn ones(&mut self, name: &str, shape: impl Into<Vec<usize>>) -> ParamId {
        self.store.add(self.full(name), Tensor::filled(shape, 1.0), ParamKind::Weight)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor) -> ParamId {
        self.store.add(self.full(name), value, ParamKind::Buffer)
    }
}
