//! Gradient alignment to clean auxiliary data.
//!
//! The raw gradient g from an untrusted batch is replaced by
//! g_a = (|g.g_c| / ||g_c||^2) g_c, then blended back with g under a
//! linearly increasing mu: g_hat = (1 - mu) g_a + mu g.

use crate::error::{Error, Result};
use crate::tensor::param::ParamStore;

/// Norm floor below which the clean gradient counts as degenerate.
pub const DEFAULT_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct AlignConfig {
    pub mu_max: f64,
    pub total_epochs: usize,
    pub epsilon: f64,
    pub aux_batch_size: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            mu_max: 0.1,
            total_epochs: 10,
            epsilon: DEFAULT_EPSILON,
            aux_batch_size: 32,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mu_max) {
            return Err(Error::config("mu_max must lie in [0, 1]"));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::config("epsilon must be positive"));
        }
        if self.total_epochs == 0 {
            return Err(Error::config("total_epochs must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

/// All trainable-parameter gradients concatenated into one vector, with a
/// manifest recording where each parameter lives.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatGradient {
    pub data: Vec<f64>,
    pub layout: Vec<LayoutEntry>,
}

impl FlatGradient {
    /// Gather the trainable gradients from the store, in registration order.
    pub fn from_store(store: &ParamStore) -> Self {
        let mut data = Vec::with_capacity(store.trainable_len());
        let mut layout = Vec::new();
        for (_, p) in store.iter() {
            if !p.trainable {
                continue;
            }
            layout.push(LayoutEntry {
                name: p.name.clone(),
                offset: data.len(),
                rows: p.grad.rows(),
                cols: p.grad.cols(),
            });
            data.extend_from_slice(p.grad.as_slice());
        }
        FlatGradient { data, layout }
    }

    /// Build a vector with the same layout from raw data.
    pub fn with_data(&self, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), self.data.len());
        FlatGradient {
            data,
            layout: self.layout.clone(),
        }
    }

    pub fn same_layout(&self, other: &FlatGradient) -> bool {
        self.layout == other.layout
    }

    pub fn dot(&self, other: &FlatGradient) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

/// g_a = (|g.g_c| / ||g_c||^2) g_c; zero when ||g_c||^2 falls below epsilon.
pub fn align(g: &FlatGradient, g_c: &FlatGradient, epsilon: f64) -> Result<FlatGradient> {
    if !g.same_layout(g_c) {
        return Err(Error::contract("align: gradient layouts differ"));
    }
    let norm_sq = g_c.dot(g_c);
    if norm_sq < epsilon {
        return Ok(g.with_data(vec![0.0; g.data.len()]));
    }
    let coeff = g.dot(g_c).abs() / norm_sq;
    Ok(g.with_data(g_c.data.iter().map(|x| coeff * x).collect()))
}

/// g_hat = (1 - mu) g_a + mu g.
pub fn blend(g_a: &FlatGradient, g: &FlatGradient, mu: f64) -> Result<FlatGradient> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::contract(format!("blend: mu {mu} out of [0, 1]")));
    }
    if !g_a.same_layout(g) {
        return Err(Error::contract("blend: gradient layouts differ"));
    }
    let data = g_a
        .data
        .iter()
        .zip(&g.data)
        .map(|(a, b)| (1.0 - mu) * a + mu * b)
        .collect();
    Ok(g_a.with_data(data))
}

/// Linear ramp from 0 at epoch 0 to mu_max at the final epoch.
pub fn mu_schedule(epoch: usize, config: &AlignConfig) -> Result<f64> {
    if epoch >= config.total_epochs {
        return Err(Error::contract(format!(
            "epoch {epoch} out of range for {} total epochs",
            config.total_epochs
        )));
    }
    if config.total_epochs == 1 {
        return Ok(0.0);
    }
    Ok(config.mu_max * epoch as f64 / (config.total_epochs - 1) as f64)
}
