use serde::{Deserialize, Serialize};

use crate::rng::{normal, Rng};

/// One named tensor inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Normal with standard deviation `1 / sqrt(fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Clone, Copy, Debug)]
pub struct ParamRef {
    pub offset: usize,
    pub len: usize,
}

impl ParamRef {
    pub fn get<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.offset..self.offset + self.len]
    }

    pub fn get_mut<'a>(&self, p: &'a mut [f64]) -> &'a mut [f64] {
        &mut p[self.offset..self.offset + self.len]
    }
}

#[derive(Default)]
pub struct ParamBuilder {
    specs: Vec<ParamSpec>,
    inits: Vec<Init>,
    total: usize,
    prefix: Vec<String>,
}

impl ParamBuilder {
    pub fn push(&mut self, scope: impl Into<String>) {
        self.prefix.push(scope.into());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> ParamRef {
        let mut full = self.prefix.join(".");
        if !full.is_empty() {
            full.push('.');
        }
        full.push_str(name);
        let len = shape.iter().product();
        let r = ParamRef { offset: self.total, len };
        self.specs.push(ParamSpec { name: full, shape: shape.to_vec(), offset: self.total });
        self.inits.push(init);
        self.total += len;
        r
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn into_manifest(self) -> (Vec<ParamSpec>, Vec<Init>) {
        (self.specs, self.inits)
    }
}

/// Draw initial values in manifest order.
pub fn initialize(specs: &[ParamSpec], inits: &[Init], rng: &mut Rng) -> Vec<f64> {
    let total = specs.last().map_or(0, |s| s.offset + s.len());
    let mut data = vec![0.0; total];
    for (s, init) in specs.iter().zip(inits) {
        let slot = &mut data[s.offset..s.offset + s.len()];
        match *init {
            Init::FanIn(fan_in) => {
                let std = 1.0 / (fan_in as f64).sqrt();
                slot.iter_mut().for_each(|v| *v = std * normal(rng));
            }
            Init::Zeros => {}
            Init::Ones => slot.iter_mut().for_each(|v| *v = 1.0),
        }
    }
    data
}
