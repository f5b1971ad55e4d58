//! Exhaustive `k x lambda x lr` grid with validation-accuracy selection.

use serde::{Deserialize, Serialize};

use super::RunRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub k_pool: Vec<usize>,
    pub lambda_pool: Vec<f64>,
    pub lr_pool: Vec<f64>,
}

impl SweepGrid {
    /// Cells in `k`-major, then `lambda`, then `lr` order.
    pub fn cells(&self) -> Vec<SweepCell> {
        let mut out = Vec::with_capacity(self.k_pool.len() * self.lambda_pool.len() * self.lr_pool.len());
        for &k in &self.k_pool {
            for &lambda in &self.lambda_pool {
                for &learning_rate in &self.lr_pool {
                    out.push(SweepCell {
                        k,
                        lambda,
                        learning_rate,
                    });
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_pool.is_empty() || self.lambda_pool.is_empty() || self.lr_pool.is_empty() {
            return Err(Error::Config("sweep pools must be nonempty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub k: usize,
    pub lambda: f64,
    pub learning_rate: f64,
}

/// One seed of one cell: its record, or the message of the error that
/// stopped it (a failing cell does not stop the sweep).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub result: std::result::Result<RunRecord, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub cell: SweepCell,
    /// In seed order.
    pub runs: Vec<SeedOutcome>,
    /// Mean best-validation accuracy over successful seeds.
    pub score: Option<f64>,
}

impl CellOutcome {
    pub fn records(&self) -> impl Iterator<Item = &RunRecord> {
        self.runs.iter().filter_map(|r| r.result.as_ref().ok())
    }

    pub fn errors(&self) -> impl Iterator<Item = &str> {
        self.runs.iter().filter_map(|r| r.result.as_ref().err().map(String::as_str))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<CellOutcome>,
    /// Index into `cells` of the selected configuration.
    pub best: Option<usize>,
}

impl SweepReport {
    pub fn best_cell(&self) -> Option<&CellOutcome> {
        self.best.map(|i| &self.cells[i])
    }
}

/// Index of the highest score; ties prefer smaller learning rate, then
/// smaller `k`, then smaller `lambda`. `None` when `candidates` is empty.
pub fn select_best(candidates: &[(SweepCell, f64)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (cell, score)) in candidates.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) => {
                let (bc, bs) = &candidates[b];
                score
                    .total_cmp(bs)
                    .then_with(|| bc.learning_rate.total_cmp(&cell.learning_rate))
                    .then_with(|| bc.k.cmp(&cell.k))
                    .then_with(|| bc.lambda.total_cmp(&cell.lambda))
                    .is_gt()
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

/// Runs every cell of `grid` for every seed through `run(cell, index, seed)`.
pub fn sweep<F>(grid: &SweepGrid, seeds: &[u64], mut run: F) -> Result<SweepReport>
where
    F: FnMut(&SweepCell, usize, u64) -> Result<RunRecord>,
{
    grid.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    let mut cells = Vec::new();
    for (index, cell) in grid.cells().into_iter().enumerate() {
        let runs: Vec<SeedOutcome> = seeds
            .iter()
            .map(|&seed| {
                let result = run(&cell, index, seed).map_err(|e| {
                    log::warn!("sweep cell {index} seed {seed} failed: {e}");
                    e.to_string()
                });
                SeedOutcome { seed, result }
            })
            .collect();
        let vals: Vec<f64> = runs
            .iter()
            .filter_map(|r| r.result.as_ref().ok())
            .map(|r| r.best_val_accuracy)
            .collect();
        let score = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
        cells.push(CellOutcome { cell, runs, score });
    }
    let scored: Vec<(usize, (SweepCell, f64))> = cells
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.score.map(|s| (i, (c.cell, s))))
        .collect();
    let candidates: Vec<(SweepCell, f64)> = scored.iter().map(|(_, c)| *c).collect();
    let best = select_best(&candidates).map(|j| scored[j].0);
    Ok(SweepReport { cells, best })
}
