//! Action chunks in their continuous and tokenized forms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Tensor;

/// `horizon x action_dim` block of continuous actions, row-major by timestep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    horizon: usize,
    action_dim: usize,
    data: Vec<f64>,
}

impl ActionChunk {
    pub fn new(horizon: usize, action_dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != horizon * action_dim {
            return Err(Error::shape(
                "action_chunk",
                format!("{horizon}x{action_dim} needs {} values, got {}", horizon * action_dim, data.len()),
            ));
        }
        Ok(ActionChunk {
            horizon,
            action_dim,
            data,
        })
    }

    pub fn zeros(horizon: usize, action_dim: usize) -> Self {
        ActionChunk {
            horizon,
            action_dim,
            data: vec![0.0; horizon * action_dim],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [h, a] => Self::new(*h, *a, t.data().to_vec()),
            s => Err(Error::shape("action_chunk", format!("expected [H, A], got {s:?}"))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.horizon, self.action_dim], self.data.clone()).expect("chunk shape")
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.action_dim..(t + 1) * self.action_dim]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.action_dim..(t + 1) * self.action_dim]
    }

    pub fn clamp(&mut self, lo: f64, hi: f64) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
    }
}

/// `horizon x action_dim` grid of bin indices, each possibly masked.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenChunk {
    horizon: usize,
    action_dim: usize,
    cells: Vec<Option<u32>>,
}

impl TokenChunk {
    pub fn masked(horizon: usize, action_dim: usize) -> Self {
        TokenChunk {
            horizon,
            action_dim,
            cells: vec![None; horizon * action_dim],
        }
    }

    pub fn from_cells(horizon: usize, action_dim: usize, cells: Vec<Option<u32>>) -> Result<Self> {
        if cells.len() != horizon * action_dim {
            return Err(Error::shape(
                "token_chunk",
                format!("{horizon}x{action_dim} needs {} cells, got {}", horizon * action_dim, cells.len()),
            ));
        }
        Ok(TokenChunk {
            horizon,
            action_dim,
            cells,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &[Option<u32>] {
        &self.cells
    }

    pub fn cell(&self, t: usize, a: usize) -> Option<u32> {
        self.cells[t * self.action_dim + a]
    }

    pub fn get(&self, flat: usize) -> Option<u32> {
        self.cells[flat]
    }

    pub fn set(&mut self, flat: usize, token: Option<u32>) {
        self.cells[flat] = token;
    }

    pub fn row(&self, t: usize) -> &[Option<u32>] {
        &self.cells[t * self.action_dim..(t + 1) * self.action_dim]
    }

    pub fn set_row(&mut self, t: usize, row: &[Option<u32>]) {
        self.cells[t * self.action_dim..(t + 1) * self.action_dim].copy_from_slice(row);
    }

    pub fn is_masked(&self, flat: usize) -> bool {
        self.cells[flat].is_none()
    }

    pub fn masked_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_none()).count()
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.cells.len()).filter(|&i| self.cells[i].is_none()).collect()
    }

    /// Timestep `t` counts as unmasked when all of its action dims are.
    pub fn row_unmasked(&self, t: usize) -> bool {
        self.row(t).iter().all(Option::is_some)
    }

    pub fn rows_unmasked(&self, rows: std::ops::Range<usize>) -> bool {
        rows.into_iter().all(|t| self.row_unmasked(t))
    }

    pub fn is_fully_unmasked(&self) -> bool {
        self.cells.iter().all(Option::is_some)
    }

    /// Rejects tokens outside `0..num_bins`.
    pub fn validate(&self, num_bins: usize) -> Result<()> {
        match self.cells.iter().flatten().find(|&&b| b as usize >= num_bins) {
            Some(b) => Err(Error::contract(format!("token {b} out of range for {num_bins} bins"))),
            None => Ok(()),
        }
    }

    /// Embedding ids with MASK mapped to `num_bins`.
    pub fn embedding_ids(&self, num_bins: usize) -> impl Iterator<Item = usize> + '_ {
        self.cells.iter().map(move |c| c.map_or(num_bins, |b| b as usize))
    }

    /// Row-per-timestep 0/1 mask grid (1 = unmasked).
    pub fn mask_grid(&self) -> Vec<Vec<u8>> {
        (0..self.horizon)
            .map(|t| self.row(t).iter().map(|c| u8::from(c.is_some())).collect())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn action_chunk_rows() {
        let c = ActionChunk::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(c.row(1), &[3.0, 4.0]);
        assert!(ActionChunk::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn token_rows_and_masks() {
        let mut t = TokenChunk::masked(3, 2);
        assert_eq!(t.masked_count(), 6);
        t.set_row(0, &[Some(1), Some(2)]);
        t.set(2, Some(5));
        assert!(t.row_unmasked(0));
        assert!(!t.row_unmasked(1));
        assert_eq!(t.masked_positions(), vec![3, 4, 5]);
        assert_eq!(t.embedding_ids(9).collect::<Vec<_>>(), vec![1, 2, 5, 9, 9, 9]);
        assert!(t.validate(5).is_err());
        assert!(t.validate(6).is_ok());
    }
}
