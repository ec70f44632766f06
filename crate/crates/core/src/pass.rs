//! One forward (and optionally backward) evaluation of the model.

use std::cell::RefCell;

use rand_chacha::ChaCha8Rng;

use crate::tensor::gradcheck::{check_scalar_function, dense_param_grads};
use crate::tensor::{GradCheckConfig, GradCheckReport, ParamId, ParamStore, Tape, TensorError, TensorResult, Var};
use crate::Result;

/// Tape plus the parameter store it reads and the dropout state of the pass.
///
/// Dropout is active only when the pass was built with [`Pass::train`].
pub struct Pass<'a> {
    pub tape: Tape<'a>,
    pub store: &'a ParamStore,
    keep_prob: f64,
    rng: Option<RefCell<ChaCha8Rng>>,
}

impl<'a> Pass<'a> {
    /// Evaluation pass: dropout is the identity.
    pub fn eval(store: &'a ParamStore) -> Self {
        Pass {
            tape: Tape::new(),
            store,
            keep_prob: 1.0,
            rng: None,
        }
    }

    /// Training pass with dropout ratio `drop` drawn from `rng`.
    pub fn train(store: &'a ParamStore, drop: f64, rng: ChaCha8Rng) -> Self {
        Pass {
            tape: Tape::new(),
            store,
            keep_prob: 1.0 - drop,
            rng: Some(RefCell::new(rng)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    pub fn dropout(&self, v: Var) -> TensorResult<Var> {
        match &self.rng {
            Some(rng) => self
                .tape
                .dropout(v, self.keep_prob, Some(&mut *rng.borrow_mut())),
            None => Ok(v),
        }
    }
}

/// Finite-difference check of a loss built on an evaluation [`Pass`].
pub fn check_gradients<F>(store: &ParamStore, cfg: &GradCheckConfig, loss_fn: F) -> Result<GradCheckReport>
where
    F: for<'s> Fn(&Pass<'s>) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let pass = Pass::eval(s);
        let loss = loss_fn(&pass)?;
        Ok(pass.tape.scalar(loss))
    };
    let analytic = |s: &ParamStore| -> Result<Vec<Vec<f64>>> {
        let pass = Pass::eval(s);
        let loss = loss_fn(&pass)?;
        if !pass.tape.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss(pass.tape.shape(loss)).into());
        }
        let g = pass.tape.backward(loss)?;
        Ok(dense_param_grads(s, &g))
    };
    check_scalar_function(store, eval, analytic, cfg)
}
