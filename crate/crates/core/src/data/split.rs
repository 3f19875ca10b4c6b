use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_per_class: usize,
    pub seed: u64,
}

/// Disjoint train/test pixel indices, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Draws exactly `train_per_class` pixels of every class `1..=classes`
/// without replacement; all other labeled pixels form the test set.
pub fn stratified_split(labels: &[u16], classes: usize, spec: SplitSpec) -> Result<Split> {
    let n = spec.train_per_class;
    if n == 0 {
        return Err(Error::InvalidArgument("train_per_class must be >= 1".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (p, &l) in labels.iter().enumerate() {
        if l > 0 {
            let class = l as usize - 1;
            if class >= classes {
                return Err(Error::InvalidArgument(format!("label {l} exceeds class count {classes}")));
            }
            by_class[class].push(p);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::with_capacity(n * classes);
    let mut test = Vec::new();
    for (class, mut pixels) in by_class.into_iter().enumerate() {
        if pixels.len() < n + 1 {
            return Err(Error::InvalidArgument(format!(
                "class {} has {} labeled pixels, needs at least {}",
                class + 1,
                pixels.len(),
                n + 1
            )));
        }
        pixels.shuffle(&mut rng);
        train.extend_from_slice(&pixels[..n]);
        test.extend_from_slice(&pixels[n..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test })
}
