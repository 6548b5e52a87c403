//! Hyperparameter grid search over the inner-loop axes: adaptation depth,
//! inner learning rate, head rate multiplier, and (for algorithms that learn
//! their inner rates) the rate-table learning rate. Every cell is a
//! shortened training run scored by its best validation loss; results come
//! back ranked deterministically.

use super::train::meta_train;
use super::{PreparedData, RunConfig};
use crate::error::{Error, Result};
use crate::meta::Algorithm;
use serde::{Deserialize, Serialize};

/// One cell's hyperparameter assignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub head_lr_multiplier: f64,
    /// None for algorithms that do not learn their inner rates.
    pub alpha_lr: Option<f64>,
}

/// One cell's assignment plus its score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    /// Position in the enumerated grid (stable across runs).
    pub index: usize,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub head_lr_multiplier: f64,
    pub alpha_lr: Option<f64>,
    /// Best validation loss any epoch of the cell reached (infinite when no
    /// validation pass completed).
    pub dev_loss: f64,
    /// Validation accuracy at that best epoch.
    pub dev_acc: f64,
    pub best_epoch: usize,
    pub diverged: bool,
}

const DEPTHS: [usize; 3] = [2, 3, 5];
const HEAD_MULTIPLIERS: [f64; 2] = [1.0, 10.0];
const GRADIENT_INNER_LRS: [f64; 3] = [1e-5, 1e-4, 1e-3];
const GRADIENT_ALPHA_LRS: [f64; 3] = [3e-5, 6e-5, 1e-4];
const REPTILE_INNER_LRS: [f64; 3] = [1e-5, 5e-5, 1e-4];

/// The full grid for an algorithm, in stable enumeration order.
pub fn grid_axes(algorithm: Algorithm) -> Result<Vec<CellSpec>> {
    let mut specs = Vec::new();
    match algorithm {
        Algorithm::ProtoNet => {
            return Err(Error::Config(
                "the prototype classifier has no inner-loop hyperparameters to search".into(),
            ))
        }
        Algorithm::Reptile => {
            for &inner_steps in &DEPTHS {
                for &inner_lr in &REPTILE_INNER_LRS {
                    for &head_lr_multiplier in &HEAD_MULTIPLIERS {
                        specs.push(CellSpec {
                            inner_steps,
                            inner_lr,
                            head_lr_multiplier,
                            alpha_lr: None,
                        });
                    }
                }
            }
        }
        _ => {
            for &inner_steps in &DEPTHS {
                for &inner_lr in &GRADIENT_INNER_LRS {
                    for &head_lr_multiplier in &HEAD_MULTIPLIERS {
                        for &alpha_lr in &GRADIENT_ALPHA_LRS {
                            specs.push(CellSpec {
                                inner_steps,
                                inner_lr,
                                head_lr_multiplier,
                                alpha_lr: Some(alpha_lr),
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(specs)
}

/// Search the algorithm's full grid.
pub fn grid_search(base: &RunConfig, prep: &PreparedData) -> Result<Vec<GridCell>> {
    run_grid(base, prep, &grid_axes(base.algorithm)?)
}

/// Score an explicit list of cells (the full search delegates here).
/// Each cell trains for `base.grid_epochs` epochs; a cell that diverges is
/// kept and ranked by whatever validation score it reached. Results are
/// sorted best-first: validation loss ascending, ties by accuracy
/// descending, then by cell index.
pub fn run_grid(
    base: &RunConfig,
    prep: &PreparedData,
    specs: &[CellSpec],
) -> Result<Vec<GridCell>> {
    base.validate()?;
    if specs.is_empty() {
        return Err(Error::Config("grid search needs at least one cell".into()));
    }
    let n = specs.len();
    let mut slots: Vec<Option<Result<GridCell>>> = (0..n).map(|_| None).collect();

    if base.threads <= 1 {
        for (i, spec) in specs.iter().enumerate() {
            slots[i] = Some(run_cell(base, prep, i, spec));
        }
    } else {
        let workers = base.threads.min(n);
        let assignments: Vec<Vec<usize>> = (0..workers)
            .map(|w| (0..n).filter(|i| i % workers == w).collect())
            .collect();
        let outcomes: Vec<Vec<(usize, Result<GridCell>)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = assignments
                .into_iter()
                .map(|idxs| {
                    scope.spawn(move || {
                        idxs.into_iter()
                            .map(|i| (i, run_cell(base, prep, i, &specs[i])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("grid worker panicked"))
                .collect()
        });
        for batch in outcomes {
            for (i, r) in batch {
                slots[i] = Some(r);
            }
        }
    }

    let mut cells = Vec::with_capacity(n);
    for slot in slots {
        cells.push(slot.expect("every grid cell was scheduled")?);
    }
    cells.sort_by(|a, b| {
        a.dev_loss
            .partial_cmp(&b.dev_loss)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(
                b.dev_acc
                    .partial_cmp(&a.dev_acc)
                    .unwrap_or(std::cmp::Ordering::Equal),
            )
            .then(a.index.cmp(&b.index))
    });
    Ok(cells)
}

fn run_cell(
    base: &RunConfig,
    prep: &PreparedData,
    index: usize,
    spec: &CellSpec,
) -> Result<GridCell> {
    let mut config = base.clone();
    config.epochs = base.grid_epochs;
    config.encoder.inner_steps = spec.inner_steps;
    config.inner_lr = spec.inner_lr;
    config.head_lr_multiplier = spec.head_lr_multiplier;
    if let Some(a) = spec.alpha_lr {
        config.alpha_lr = a;
    }
    let out = meta_train(&config, prep)?;
    let best = out
        .trace
        .iter()
        .min_by(|a, b| {
            a.dev_loss
                .partial_cmp(&b.dev_loss)
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .map(|m| (m.dev_loss, m.dev_acc_mean, m.epoch));
    let (dev_loss, dev_acc, best_epoch) = best.unwrap_or((f64::INFINITY, 0.0, 0));
    Ok(GridCell {
        index,
        inner_steps: spec.inner_steps,
        inner_lr: spec.inner_lr,
        head_lr_multiplier: spec.head_lr_multiplier,
        alpha_lr: spec.alpha_lr,
        dev_loss,
        dev_acc,
        best_epoch,
        diverged: out.diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;

    #[test]
    fn grid_sizes_match_the_search_space() {
        assert_eq!(grid_axes(Algorithm::FoMaml).unwrap().len(), 54);
        assert_eq!(grid_axes(Algorithm::FoProtoMamlN).unwrap().len(), 54);
        assert_eq!(grid_axes(Algorithm::Maml).unwrap().len(), 54);
        assert_eq!(grid_axes(Algorithm::Reptile).unwrap().len(), 18);
        assert!(grid_axes(Algorithm::ProtoNet).unwrap_err().is_config_like());
    }

    #[test]
    fn reptile_cells_never_carry_a_rate_learning_rate() {
        for spec in grid_axes(Algorithm::Reptile).unwrap() {
            assert!(spec.alpha_lr.is_none());
        }
        for spec in grid_axes(Algorithm::FoMaml).unwrap() {
            assert!(spec.alpha_lr.is_some());
        }
    }

    #[test]
    fn enumeration_order_is_stable() {
        let specs = grid_axes(Algorithm::FoMaml).unwrap();
        assert_eq!(specs[0].inner_steps, 2);
        assert_eq!(specs[0].inner_lr, 1e-5);
        assert_eq!(specs[0].head_lr_multiplier, 1.0);
        assert_eq!(specs[0].alpha_lr, Some(3e-5));
        assert_eq!(specs[1].alpha_lr, Some(6e-5));
        assert_eq!(specs[53].inner_steps, 5);
        assert_eq!(specs[53].inner_lr, 1e-3);
        assert_eq!(specs[53].head_lr_multiplier, 10.0);
        assert_eq!(specs[53].alpha_lr, Some(1e-4));
    }

    fn tiny_specs() -> Vec<CellSpec> {
        vec![
            CellSpec {
                inner_steps: 1,
                inner_lr: 1e-5,
                head_lr_multiplier: 1.0,
                alpha_lr: Some(6e-5),
            },
            CellSpec {
                inner_steps: 2,
                inner_lr: 1e-4,
                head_lr_multiplier: 10.0,
                alpha_lr: Some(6e-5),
            },
            CellSpec {
                inner_steps: 1,
                inner_lr: 1e-4,
                head_lr_multiplier: 1.0,
                alpha_lr: Some(3e-5),
            },
        ]
    }

    #[test]
    fn subset_search_ranks_and_is_thread_invariant() {
        let mut config = tiny_config(Algorithm::FoMaml, 1);
        config.grid_epochs = 1;
        let prep = PreparedData::build(tiny_world(5, 12, 0.3), &config).unwrap();
        let sequential = run_grid(&config, &prep, &tiny_specs()).unwrap();
        assert_eq!(sequential.len(), 3);
        for w in sequential.windows(2) {
            assert!(
                w[0].dev_loss <= w[1].dev_loss,
                "ranking broken: {} > {}",
                w[0].dev_loss,
                w[1].dev_loss
            );
        }
        let indices: Vec<usize> = sequential.iter().map(|c| c.index).collect();
        let mut sorted = indices.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2], "every cell reported exactly once");

        config.threads = 2;
        let threaded = run_grid(&config, &prep, &tiny_specs()).unwrap();
        assert_eq!(sequential, threaded);
    }

    #[test]
    fn ranking_breaks_ties_toward_accuracy_then_index() {
        let mut cells = vec![
            GridCell {
                index: 2,
                inner_steps: 2,
                inner_lr: 1e-4,
                head_lr_multiplier: 1.0,
                alpha_lr: None,
                dev_loss: 1.0,
                dev_acc: 0.5,
                best_epoch: 1,
                diverged: false,
            },
            GridCell {
                index: 0,
                inner_steps: 2,
                inner_lr: 1e-4,
                head_lr_multiplier: 1.0,
                alpha_lr: None,
                dev_loss: 1.0,
                dev_acc: 0.9,
                best_epoch: 1,
                diverged: false,
            },
            GridCell {
                index: 1,
                inner_steps: 2,
                inner_lr: 1e-4,
                head_lr_multiplier: 1.0,
                alpha_lr: None,
                dev_loss: 1.0,
                dev_acc: 0.9,
                best_epoch: 1,
                diverged: false,
            },
            GridCell {
                index: 3,
                inner_steps: 2,
                inner_lr: 1e-4,
                head_lr_multiplier: 1.0,
                alpha_lr: None,
                dev_loss: f64::INFINITY,
                dev_acc: 0.0,
                best_epoch: 0,
                diverged: true,
            },
        ];
        cells.sort_by(|a, b| {
            a.dev_loss
                .partial_cmp(&b.dev_loss)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(
                    b.dev_acc
                        .partial_cmp(&a.dev_acc)
                        .unwrap_or(std::cmp::Ordering::Equal),
                )
                .then(a.index.cmp(&b.index))
        });
        let order: Vec<usize> = cells.iter().map(|c| c.index).collect();
        assert_eq!(order, vec![0, 1, 2, 3]);
    }
}
