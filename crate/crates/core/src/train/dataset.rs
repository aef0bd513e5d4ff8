use rand::Rng;

use crate::env::{DemoFile, Demonstration};
use crate::observation::PointCloudObservation;
use crate::tensor::Tensor;

use super::TrainError;

/// Successful demonstrations plus a flat `(episode, step)` index.
#[derive(Debug, Clone)]
pub struct DemoDataset {
    demos: Vec<Demonstration>,
    index: Vec<(usize, usize)>,
}

/// One sampled minibatch. `actions` is `[B×action_dim]`.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub indices: Vec<usize>,
    pub observations: Vec<&'a PointCloudObservation>,
    pub actions: Tensor,
}

impl DemoDataset {
    /// Keeps only successful demonstrations with at least one step.
    pub fn new(demos: Vec<Demonstration>) -> Self {
        let demos: Vec<Demonstration> = demos
            .into_iter()
            .filter(|d| d.success && !d.steps.is_empty())
            .collect();
        let index = demos
            .iter()
            .enumerate()
            .flat_map(|(e, d)| (0..d.steps.len()).map(move |s| (e, s)))
            .collect();
        Self { demos, index }
    }

    pub fn from_file(file: DemoFile) -> Self {
        Self::new(file.episodes)
    }

    pub fn demos(&self) -> &[Demonstration] {
        &self.demos
    }

    /// Total step count.
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn get(&self, flat: usize) -> (&PointCloudObservation, &[f64]) {
        let (e, s) = self.index[flat];
        let step = &self.demos[e].steps[s];
        (&step.observation, &step.action)
    }

    /// `batch_size` uniform draws with replacement from the flat index.
    pub fn sample_indices<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>, TrainError> {
        if self.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        Ok((0..batch_size)
            .map(|_| rng.random_range(0..self.len()))
            .collect())
    }

    pub fn batch(&self, indices: Vec<usize>) -> Result<Batch<'_>, TrainError> {
        let mut observations = Vec::with_capacity(indices.len());
        let mut rows = Vec::with_capacity(indices.len());
        for &i in &indices {
            let (obs, action) = self.get(i);
            observations.push(obs);
            rows.push(action.to_vec());
        }
        let actions = Tensor::from_rows(&rows)?;
        Ok(Batch {
            indices,
            observations,
            actions,
        })
    }

    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Batch<'_>, TrainError> {
        let indices = self.sample_indices(batch_size, rng)?;
        self.batch(indices)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::env::{DemoStep, TaskKind};

    fn dataset(lengths: &[usize]) -> DemoDataset {
        let demos = lengths
            .iter()
            .enumerate()
            .map(|(e, &n)| Demonstration {
                task: TaskKind::ToyFill,
                seed: e as u64,
                success: true,
                steps: (0..n)
                    .map(|s| DemoStep {
                        observation: PointCloudObservation {
                            points: Tensor::filled(&[2, 6], (e * 100 + s) as f64),
                            robot_state: Tensor::zeros(&[7]),
                        },
                        action: vec![e as f64, s as f64, 0.0, 0.0],
                    })
                    .collect(),
            })
            .collect();
        DemoDataset::new(demos)
    }

    #[test]
    fn index_covers_every_step() {
        let d = dataset(&[3, 1, 6]);
        assert_eq!(d.len(), 10);
        let all = d.batch((0..10).collect()).unwrap();
        let mut seen: Vec<(f64, f64)> = (0..10)
            .map(|i| (all.actions.at(i, 0), all.actions.at(i, 1)))
            .collect();
        seen.dedup();
        assert_eq!(seen.len(), 10);
    }

    #[test]
    fn failed_demos_are_dropped() {
        let mut demos = dataset(&[2, 2]).demos;
        demos[1].success = false;
        assert_eq!(DemoDataset::new(demos).len(), 2);
    }

    #[test]
    fn sampling_is_deterministic() {
        let d = dataset(&[4, 4]);
        let a = d.sample_indices(64, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = d.sample_indices(64, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_is_uniform() {
        let d = dataset(&[5, 5]);
        let draws = 100_000;
        let idx = d
            .sample_indices(draws, &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap();
        let mut counts = [0usize; 10];
        for i in idx {
            counts[i] += 1;
        }
        let expected = draws as f64 / 10.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 9 degrees of freedom; 27.9 is the 0.999 quantile.
        assert!(chi2 < 27.9, "chi2 = {chi2}");
        assert!(counts
            .iter()
            .all(|&c| (c as f64 - expected).abs() < 0.05 * expected));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let d = dataset(&[]);
        assert!(matches!(
            d.sample_indices(4, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(TrainError::EmptyDataset)
        ));
    }
}
