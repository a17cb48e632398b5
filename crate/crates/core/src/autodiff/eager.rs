//! Value-only backend for evaluation batches where no gradient is needed.

use std::collections::HashMap;
use std::rc::Rc;

use super::backend::{
    affine_forward, binary_forward, check_finite, columns_forward, concat_forward, mean_forward,
    running_max_forward, sum_forward, tame_forward, unary_forward, variance_forward, Activation,
    Backend, Binary, Unary,
};
use super::matrix::Matrix;
use super::params::{ParamId, ParamStore};
use crate::error::Result;

#[derive(Debug, Default)]
pub struct Eager {
    params: HashMap<(u64, ParamId), Rc<Matrix>>,
}

impl Eager {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Backend for Eager {
    type Array = Rc<Matrix>;

    fn constant(&mut self, value: Matrix) -> Rc<Matrix> {
        Rc::new(value)
    }

    fn param(&mut self, store: &ParamStore, id: ParamId) -> Rc<Matrix> {
        self.params
            .entry((store.key(), id))
            .or_insert_with(|| Rc::new(store.value(id).clone()))
            .clone()
    }

    fn value<'a>(&'a self, x: &'a Rc<Matrix>) -> &'a Matrix {
        x
    }

    fn affine(&mut self, x: &Rc<Matrix>, w: &Rc<Matrix>, b: &Rc<Matrix>, act: Activation) -> Result<Rc<Matrix>> {
        affine_forward(x, w, b, act).map(Rc::new)
    }

    fn unary(&mut self, x: &Rc<Matrix>, f: Unary) -> Result<Rc<Matrix>> {
        unary_forward(x, f).map(Rc::new)
    }

    fn binary(&mut self, a: &Rc<Matrix>, b: &Rc<Matrix>, f: Binary) -> Result<Rc<Matrix>> {
        binary_forward(a, b, f).map(Rc::new)
    }

    fn scale(&mut self, x: &Rc<Matrix>, factor: f64) -> Result<Rc<Matrix>> {
        check_finite(x.map(|e| e * factor), "scale").map(Rc::new)
    }

    fn add_scalar(&mut self, x: &Rc<Matrix>, c: f64) -> Result<Rc<Matrix>> {
        check_finite(x.map(|e| e + c), "add_scalar").map(Rc::new)
    }

    fn concat_cols(&mut self, xs: &[Rc<Matrix>]) -> Result<Rc<Matrix>> {
        let vals: Vec<&Matrix> = xs.iter().map(|x| x.as_ref()).collect();
        concat_forward(&vals).map(Rc::new)
    }

    fn columns(&mut self, x: &Rc<Matrix>, start: usize, end: usize) -> Result<Rc<Matrix>> {
        columns_forward(x, start, end).map(Rc::new)
    }

    fn tame(&mut self, x: &Rc<Matrix>, dt: f64) -> Result<Rc<Matrix>> {
        tame_forward(x, dt).map(Rc::new)
    }

    fn mean(&mut self, x: &Rc<Matrix>) -> Result<Rc<Matrix>> {
        mean_forward(x).map(Rc::new)
    }

    fn sample_variance(&mut self, x: &Rc<Matrix>) -> Result<Rc<Matrix>> {
        variance_forward(x).map(|(v, _)| Rc::new(v))
    }

    fn sum(&mut self, x: &Rc<Matrix>) -> Result<Rc<Matrix>> {
        sum_forward(x).map(Rc::new)
    }

    fn running_max(&mut self, xs: &[Rc<Matrix>]) -> Result<Rc<Matrix>> {
        let vals: Vec<&Matrix> = xs.iter().map(|x| x.as_ref()).collect();
        running_max_forward(&vals).map(|(v, _)| Rc::new(v))
    }

    fn detach(&mut self, x: &Rc<Matrix>) -> Rc<Matrix> {
        x.clone()
    }
}
