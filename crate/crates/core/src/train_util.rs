use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::{Gradients, ParamStore};

/// One row of a training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Runs `f` over the batch (in parallel when enabled) and averages loss and
/// gradients in item order.
pub(crate) fn batch_gradients<T, F>(store: &ParamStore, items: &[T], f: F) -> Result<(f64, Gradients)>
where
    T: Sync,
    F: Fn(&T) -> Result<(f64, Gradients)> + Sync + Send,
{
    let parts = parallel::map(items, f);
    let mut total = Gradients::zeros_like(store);
    let mut loss = 0.0;
    let w = 1.0 / items.len() as f64;
    for part in parts {
        let (l, g) = part?;
        loss += l * w;
        total.accumulate(&g, w);
    }
    if !loss.is_finite() || !total.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss or gradient (loss = {loss})")));
    }
    Ok((loss, total))
}

pub fn write_loss_csv(path: &std::path::Path, log: &[LossRecord]) -> Result<()> {
    let mut s = String::from("step,loss,lr\n");
    for r in log {
        s.push_str(&format!("{},{},{}\n", r.step, r.loss, r.lr));
    }
    std::fs::write(path, s)?;
    Ok(())
}
