use super::{NumericsError, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Whether decoupled weight decay applies (false for biases and norm gains).
    pub decay: bool,
}

/// Ordered, named collection of learnable tensors. Slots are stable indices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> usize {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            decay,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn tensor(&self, slot: usize) -> &Tensor {
        &self.entries[slot].value
    }

    pub fn tensor_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.entries[slot].value
    }

    pub fn slot_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn zero_grads(&self) -> ParamGrads {
        ParamGrads {
            grads: self
                .entries
                .iter()
                .map(|e| Tensor::zeros(e.value.rows(), e.value.cols()))
                .collect(),
        }
    }
}

/// Gradient buffer aligned slot-for-slot with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Tensor>,
}

impl ParamGrads {
    pub fn get(&self, slot: usize) -> &Tensor {
        &self.grads[slot]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn add(&mut self, slot: usize, g: &Tensor) -> Result<(), NumericsError> {
        self.grads[slot].add_assign(g)
    }

    /// Scatter-adds row `i` of `g` into row `ids[i]` of the slot's gradient.
    pub fn add_rows(&mut self, slot: usize, ids: &[usize], g: &Tensor) -> Result<(), NumericsError> {
        let dst = &mut self.grads[slot];
        if g.rows() != ids.len() || g.cols() != dst.cols() {
            return Err(g.shape_err("add_rows", dst));
        }
        for (i, &r) in ids.iter().enumerate() {
            if r >= dst.rows() {
                return Err(NumericsError::Index {
                    op: "add_rows",
                    index: r,
                    bound: dst.rows(),
                });
            }
            for (o, v) in dst.row_mut(r).iter_mut().zip(g.row(i)) {
                *o += v;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= c;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }
}
