//! Training and evaluation data: synthetic generation, CSV interaction logs,
//! and the leave-one-out split protocol.

mod loader;
mod synthetic;

pub use loader::{
    load_interactions, read_interactions, save_interactions, validate_item_ids,
};
pub use synthetic::{generate_synthetic, SyntheticConfig};

/// One user-item event. Timestamps are an ordering key only; ties keep file
/// order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub user_id: u64,
    pub item_id: usize,
    pub timestamp: i64,
}

/// A user's chronologically ordered item sequence.
#[derive(Debug, Clone)]
pub struct UserSequence {
    pub user_id: u64,
    pub items: Vec<usize>,
}

/// One (history → target) pair.
#[derive(Debug, Clone)]
pub struct Example {
    pub user_id: u64,
    pub history: Vec<usize>,
    pub target: usize,
}

/// Leave-one-out split: the last item of each sequence is the test target,
/// the second-to-last the validation target, everything before feeds
/// training.
#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
}

/// Group interactions into per-user sequences. Within a user, events sort by
/// timestamp with ties keeping input order; users appear in order of first
/// occurrence.
pub fn build_sequences(interactions: &[Interaction]) -> Vec<UserSequence> {
    let mut order: Vec<u64> = Vec::new();
    let mut by_user: std::collections::HashMap<u64, Vec<(i64, usize, usize)>> =
        std::collections::HashMap::new();
    for (pos, it) in interactions.iter().enumerate() {
        if !by_user.contains_key(&it.user_id) {
            order.push(it.user_id);
        }
        by_user
            .entry(it.user_id)
            .or_default()
            .push((it.timestamp, pos, it.item_id));
    }
    order
        .into_iter()
        .map(|user_id| {
            let mut events = by_user.remove(&user_id).expect("user recorded");
            events.sort_by_key(|&(ts, pos, _)| (ts, pos));
            UserSequence {
                user_id,
                items: events.into_iter().map(|(_, _, item)| item).collect(),
            }
        })
        .collect()
}

/// Expand sequences into train/validation/test examples.
///
/// For a sequence `x_1..x_n` with `n >= 3`: training pairs are
/// `(x_1..x_{k-1} → x_k)` for `2 <= k <= n-2`, validation is `k = n-1`,
/// test is `k = n`. Length-2 sequences contribute one training pair and no
/// held-out targets; shorter sequences are dropped.
pub fn leave_one_out_split(sequences: &[UserSequence]) -> DatasetSplit {
    let mut split = DatasetSplit::default();
    for seq in sequences {
        let n = seq.items.len();
        if n < 2 {
            continue;
        }
        if n == 2 {
            split.train.push(Example {
                user_id: seq.user_id,
                history: seq.items[..1].to_vec(),
                target: seq.items[1],
            });
            continue;
        }
        for k in 2..=n - 2 {
            split.train.push(Example {
                user_id: seq.user_id,
                history: seq.items[..k - 1].to_vec(),
                target: seq.items[k - 1],
            });
        }
        split.validation.push(Example {
            user_id: seq.user_id,
            history: seq.items[..n - 2].to_vec(),
            target: seq.items[n - 2],
        });
        split.test.push(Example {
            user_id: seq.user_id,
            history: seq.items[..n - 1].to_vec(),
            target: seq.items[n - 1],
        });
    }
    split
}
