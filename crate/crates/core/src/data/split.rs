use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};

/// One task of a sequence: its global class ids and train/test data with
/// labels relabelled to `0..classes.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDescriptor {
    pub id: usize,
    pub classes: Vec<usize>,
    pub train: Dataset,
    pub test: Dataset,
}

impl TaskDescriptor {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSequence {
    pub tasks: Vec<TaskDescriptor>,
}

impl TaskSequence {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&TaskDescriptor> {
        self.tasks.iter().find(|t| t.id == id)
    }
}

/// Partitions a seeded shuffle of the class ids into `n_tasks` disjoint
/// groups of `classes_per_task` and filters both splits per group. Task ids
/// start at 1.
pub fn split_tasks(
    train: &Dataset,
    test: &Dataset,
    n_tasks: usize,
    classes_per_task: usize,
    seed: u64,
) -> Result<TaskSequence> {
    let available = train.num_classes();
    let needed = n_tasks * classes_per_task;
    if needed > available || test.num_classes() != available {
        return Err(Error::InsufficientClasses { needed, available });
    }
    if classes_per_task == 0 {
        return Err(Error::Config("classes_per_task must be positive".into()));
    }
    let mut order: Vec<usize> = (0..available).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let tasks = order
        .chunks(classes_per_task)
        .take(n_tasks)
        .enumerate()
        .map(|(i, classes)| TaskDescriptor {
            id: i + 1,
            classes: classes.to_vec(),
            train: train.subset_by_classes(classes),
            test: test.subset_by_classes(classes),
        })
        .collect();
    Ok(TaskSequence { tasks })
}
