//! Local behavior-cloning training on one client's demonstrations.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{self, ClientDataset, DatasetError};
use crate::model::{
    self, AdamState, Batch, ModelError, ModelSpec, ParameterVector, Workspace, DEFAULT_LR,
};
use crate::seed;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid local training config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalTrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub lr: f64,
    pub shuffle_seed: u64,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lr: DEFAULT_LR,
            shuffle_seed: 0,
        }
    }
}

impl LocalTrainConfig {
    pub fn validate(&self) -> Result<(), ClientError> {
        if self.batch_size == 0 {
            return Err(ClientError::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(ClientError::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: u32,
    pub params: ParameterVector,
    pub num_samples: u64,
    /// Sample-weighted mean MSE over the final epoch's mini-batches, or the
    /// loss of the received global model when no epoch ran.
    pub train_loss: f64,
}

/// Trains a copy of `global` on `ds` with a fresh Adam state.
pub fn local_fit(
    global: &ParameterVector,
    spec: &ModelSpec,
    ds: &ClientDataset,
    cfg: &LocalTrainConfig,
) -> Result<ClientUpdate, ClientError> {
    cfg.validate()?;
    global.validate(spec)?;
    let batch = dataset::to_pairs(ds)?;
    check_input(spec, &batch)?;
    let n = batch.len();
    let (d_in, d_out) = (spec.input_dim(), spec.output_dim());
    let obs = batch.observations().as_slice();
    let act = batch.targets().as_slice();

    let mut params = global.as_slice().to_vec();
    if cfg.epochs == 0 {
        let loss = model::batch_loss(spec, global, &batch)?;
        return Ok(ClientUpdate {
            client_id: ds.client_id,
            params: global.clone(),
            num_samples: n as u64,
            train_loss: loss,
        });
    }

    let bs = cfg.batch_size.min(n);
    let mut ws = Workspace::new(spec, bs);
    let mut grad = vec![0.0; params.len()];
    let mut adam = AdamState::new(params.len(), cfg.lr);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seed::rng(cfg.shuffle_seed);
    let mut x = vec![0.0; bs * d_in];
    let mut y = vec![0.0; bs * d_out];
    let mut epoch_loss = 0.0;

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        epoch_loss = 0.0;
        for chunk in order.chunks(bs) {
            let rows = chunk.len();
            for (r, &i) in chunk.iter().enumerate() {
                x[r * d_in..(r + 1) * d_in].copy_from_slice(&obs[i * d_in..(i + 1) * d_in]);
                y[r * d_out..(r + 1) * d_out].copy_from_slice(&act[i * d_out..(i + 1) * d_out]);
            }
            let loss = model::backward_into(
                spec,
                &params,
                &x[..rows * d_in],
                &y[..rows * d_out],
                rows,
                &mut ws,
                &mut grad,
            );
            epoch_loss += loss * rows as f64;
            model::adam_step_slice(&mut params, &grad, &mut adam)?;
        }
        epoch_loss /= n as f64;
    }

    let params = ParameterVector::from_vec(params);
    if !params.is_finite() || !epoch_loss.is_finite() {
        return Err(ModelError::NonFinite("local update").into());
    }
    Ok(ClientUpdate {
        client_id: ds.client_id,
        params,
        num_samples: n as u64,
        train_loss: epoch_loss,
    })
}

/// Root-mean-square action error of `params` over every pair in `ds`.
pub fn local_evaluate(
    params: &ParameterVector,
    spec: &ModelSpec,
    ds: &ClientDataset,
) -> Result<f64, ClientError> {
    let batch = dataset::to_pairs(ds)?;
    check_input(spec, &batch)?;
    Ok(model::batch_loss(spec, params, &batch)?.sqrt())
}

fn check_input(spec: &ModelSpec, batch: &Batch) -> Result<(), ModelError> {
    if batch.observations().cols() != spec.input_dim() {
        return Err(ModelError::Dimension {
            what: "observation",
            expected: spec.input_dim(),
            actual: batch.observations().cols(),
        });
    }
    if batch.targets().cols() != spec.output_dim() {
        return Err(ModelError::Dimension {
            what: "action",
            expected: spec.output_dim(),
            actual: batch.targets().cols(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::collect_client;
    use crate::registry::{sample_environments, TaskId};

    fn fixture() -> (ModelSpec, ClientDataset) {
        let reg = sample_environments(TaskId::SlideBlock, 1, 11).unwrap();
        let ds = collect_client(&reg.environments[0], 2, 0).unwrap();
        (ModelSpec::new(10, vec![16, 8], 4).unwrap(), ds)
    }

    #[test]
    fn zero_epochs_returns_global() {
        let (spec, ds) = fixture();
        let global = model::init_params(&spec, 1);
        let cfg = LocalTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let up = local_fit(&global, &spec, &ds, &cfg).unwrap();
        assert_eq!(up.params, global);
        assert_eq!(
            up.num_samples as usize,
            dataset::to_pairs(&ds).unwrap().len()
        );
        let rmse = local_evaluate(&global, &spec, &ds).unwrap();
        assert!((up.train_loss - rmse * rmse).abs() < 1e-15);
    }

    #[test]
    fn fit_is_pure() {
        let (spec, ds) = fixture();
        let global = model::init_params(&spec, 2);
        let cfg = LocalTrainConfig {
            epochs: 3,
            batch_size: 7,
            lr: 1e-3,
            shuffle_seed: 5,
        };
        let a = local_fit(&global, &spec, &ds, &cfg).unwrap();
        let b = local_fit(&global, &spec, &ds, &cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, global);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let (_, ds) = fixture();
        let spec = ModelSpec::new(8, vec![4], 4).unwrap();
        let global = model::init_params(&spec, 0);
        assert!(matches!(
            local_fit(&global, &spec, &ds, &LocalTrainConfig::default()),
            Err(ClientError::Model(ModelError::Dimension { .. }))
        ));
    }
}
