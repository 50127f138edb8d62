//! Dense-network numerics: parameter vectors, forward and reverse passes,
//! Adam, and the loss kernels shared by the learners.

pub mod adam;
pub mod checkpoint;
pub mod loss;
pub mod mlp;

pub use adam::{adam_step, AdamState};
pub use checkpoint::Checkpoint;
pub use loss::{expectile_grad, expectile_loss, huber, huber_grad, squared_error};
pub use mlp::{grad, mlp_apply, Activation, Gradients, LayerShape, Mlp, MlpSpec, ParamVector, Tape};

/// A network paired with its optimizer and a freeze flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainable {
    pub net: Mlp,
    pub opt: AdamState,
    pub frozen: bool,
    name: &'static str,
}

impl Trainable {
    pub fn new(name: &'static str, net: Mlp, lr: f64) -> Self {
        let opt = AdamState::new(net.params.len(), lr);
        Trainable {
            net,
            opt,
            frozen: false,
            name,
        }
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    /// Applies one Adam step; frozen components refuse the update.
    pub fn apply(&mut self, grad: &[f64]) -> crate::Result<()> {
        if self.frozen {
            return Err(crate::Error::Frozen(self.name));
        }
        self.opt.step(&mut self.net.params.values, grad)
    }
}

/// Row-major view of `data` as `rows x cols`.
pub fn view2(data: &[f64], cols: usize) -> crate::Result<ndarray::ArrayView2<'_, f64>> {
    if cols == 0 || !data.len().is_multiple_of(cols) {
        return Err(crate::Error::dim("row-major matrix", cols, data.len()));
    }
    Ok(ndarray::ArrayView2::from_shape((data.len() / cols, cols), data).expect("checked shape"))
}

/// `[a | b]` along columns.
pub fn hcat(a: ndarray::ArrayView2<'_, f64>, b: ndarray::ArrayView2<'_, f64>) -> ndarray::Array2<f64> {
    ndarray::concatenate(ndarray::Axis(1), &[a, b]).expect("equal row counts")
}
