//! Residual adapters selected by an externally supplied group id.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Linear;
use crate::params::{Initializer, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// `x + up(swish(down(x)))` with one bottleneck per group. The up
/// projection starts at zero so a fresh adapter is the identity.
#[derive(Clone, Debug)]
pub struct ResidualAdapter {
    pub groups: Vec<(Linear, Linear)>,
    pub model_dim: usize,
    pub adapter_dim: usize,
}

impl ResidualAdapter {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &Initializer,
        name: &str,
        model_dim: usize,
        adapter_dim: usize,
        groups: usize,
    ) -> Self {
        let groups = (0..groups)
            .map(|i| {
                let down = Linear::new(
                    store,
                    init,
                    &format!("{name}.g{i}.down"),
                    model_dim,
                    adapter_dim,
                );
                let up = Linear::zeros(store, &format!("{name}.g{i}.up"), adapter_dim, model_dim);
                (down, up)
            })
            .collect();
        ResidualAdapter {
            groups,
            model_dim,
            adapter_dim,
        }
    }

    /// Parameters of one group: `2·d·a + a + d`.
    pub fn group_params(model_dim: usize, adapter_dim: usize) -> usize {
        Linear::num_params(model_dim, adapter_dim) + Linear::num_params(adapter_dim, model_dim)
    }

    fn check_group(&self, group: usize) -> Result<()> {
        if group >= self.groups.len() {
            return Err(Error::param(format!(
                "adapter group {group} out of {}",
                self.groups.len()
            )));
        }
        Ok(())
    }

    fn bottleneck<F: Real>(&self, g: &mut Graph<'_, F>, x: Var, group: usize) -> Result<Var> {
        let (down, up) = &self.groups[group];
        let h = down.forward(g, x)?;
        let h = g.swish(h);
        up.forward(g, h)
    }

    /// All frames through the adapter of `group`.
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var, group: usize) -> Result<Var> {
        self.check_group(group)?;
        let h = self.bottleneck(g, x, group)?;
        g.add(x, h)
    }

    /// Each frame through the adapter of its own group.
    pub fn forward_frames<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        x: Var,
        frame_groups: &[usize],
    ) -> Result<Var> {
        let rows = g.shape(x)[0];
        if frame_groups.len() != rows {
            return Err(Error::param(format!(
                "adapter: {} group ids for {rows} frames",
                frame_groups.len()
            )));
        }
        if let Some(&bad) = frame_groups.iter().find(|&&gid| gid >= self.groups.len()) {
            self.check_group(bad)?;
        }
        let mut parts = Vec::new();
        for group in 0..self.groups.len() {
            let index: Vec<usize> = (0..rows).filter(|&t| frame_groups[t] == group).collect();
            if index.is_empty() {
                continue;
            }
            let xg = g.gather_rows(x, &index)?;
            parts.push((self.bottleneck(g, xg, group)?, index));
        }
        if parts.is_empty() {
            return Ok(x);
        }
        let h = g.scatter_add(rows, self.model_dim, parts)?;
        g.add(x, h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.groups
            .iter()
            .flat_map(|(d, u)| d.param_ids().into_iter().chain(u.param_ids()))
            .collect()
    }

    pub fn group_param_ids(&self, group: usize) -> Vec<ParamId> {
        let (d, u) = &self.groups[group];
        d.param_ids().into_iter().chain(u.param_ids()).collect()
    }
}

/// Forward of one adapter on a plain tensor.
pub fn residual_adapter_forward<F: Real>(
    adapter: &ResidualAdapter,
    params: &ParamStore<F>,
    x: &Tensor<F>,
    group: usize,
) -> Result<Tensor<F>> {
    let mut g = Graph::new(params);
    let xv = g.input(x.clone());
    let y = adapter.forward(&mut g, xv, group)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn adapter() -> (ResidualAdapter, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let a = ResidualAdapter::new(&mut store, &Initializer::new(5), "a", 6, 3, 2);
        (a, store)
    }

    #[test]
    fn identity_at_init_and_group_checked() {
        let (a, store) = adapter();
        let x = Tensor::from_fn(4, 6, |i, j| (i as f64) - 0.3 * j as f64);
        assert_eq!(residual_adapter_forward(&a, &store, &x, 1).unwrap(), x);
        assert!(matches!(
            residual_adapter_forward(&a, &store, &x, 2),
            Err(Error::Parameter(_))
        ));
        assert_eq!(store.num_scalars(), 2 * ResidualAdapter::group_params(6, 3));
        assert_eq!(ResidualAdapter::group_params(6, 3), 2 * 6 * 3 + 3 + 6);
    }

    #[test]
    fn groups_differ_once_trained() {
        let (a, mut store) = adapter();
        for (i, (_, up)) in a.groups.iter().enumerate() {
            let w = Tensor::from_fn(3, 6, |r, c| (r + c + i) as f64 * 0.1 + i as f64);
            store.set(up.weight, w).unwrap();
        }
        let x = Tensor::from_fn(4, 6, |i, j| 0.2 * i as f64 + 0.1 * j as f64 - 0.4);
        let y0 = residual_adapter_forward(&a, &store, &x, 0).unwrap();
        let y1 = residual_adapter_forward(&a, &store, &x, 1).unwrap();
        assert!(y0.max_abs_diff(&y1) > 1e-3);

        let mut g = Graph::new(&store);
        let xv = g.input(x.clone());
        let mixed = a.forward_frames(&mut g, xv, &[0, 1, 1, 0]).unwrap();
        let mixed = g.value(mixed);
        for (t, want) in [(0, &y0), (1, &y1), (2, &y1), (3, &y0)] {
            for (a, b) in mixed.row(t).iter().zip(want.row(t)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
