//! Class-balanced sampling of the labeled split.

use rand::Rng;

use crate::datamodel::LabelSpace;
use crate::error::{Error, Result};

/// Draws a class uniformly, then a member of that class uniformly, with
/// replacement. Raw class frequencies have no influence on the draw.
#[derive(Clone, Debug)]
pub struct BalancedSampler {
    by_class: Vec<Vec<usize>>,
}

impl BalancedSampler {
    /// `labels[i]` is the class of item `i`. Every class of `label_space`
    /// needs at least one item.
    pub fn new(labels: &[usize], label_space: &LabelSpace) -> Result<Self> {
        let mut by_class = vec![Vec::new(); label_space.num_classes()];
        for (i, &y) in labels.iter().enumerate() {
            label_space.check_label(y)?;
            by_class[y].push(i);
        }
        let empty: Vec<&str> = by_class
            .iter()
            .enumerate()
            .filter(|(_, members)| members.is_empty())
            .map(|(c, _)| label_space.name(c).unwrap_or("?"))
            .collect();
        if !empty.is_empty() {
            return Err(Error::EmptyClass(empty.join(", ")));
        }
        Ok(Self { by_class })
    }

    pub fn num_classes(&self) -> usize {
        self.by_class.len()
    }

    pub fn class_size(&self, class: usize) -> usize {
        self.by_class[class].len()
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let members = &self.by_class[rng.gen_range(0..self.by_class.len())];
        members[rng.gen_range(0..members.len())]
    }

    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<usize> {
        (0..count).map(|_| self.draw(rng)).collect()
    }
}

/// Indices into `labels` of a balanced batch of `count` items.
pub fn balanced_sample<R: Rng + ?Sized>(
    labels: &[usize],
    label_space: &LabelSpace,
    count: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    Ok(BalancedSampler::new(labels, label_space)?.sample(count, rng))
}
