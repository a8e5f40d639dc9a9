//! Label-skewed client partitions. For each class, its samples are shuffled
//! and cut into `K` consecutive chunks whose sizes follow a draw from the
//! symmetric Dirichlet `Dir(alpha · 1_K)`, rounded by largest remainder.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{derive_seed, Rng};

pub const MAX_PARTITION_ATTEMPTS: u64 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub alpha: f64,
    pub seed: u64,
    /// Sample indices per client, ascending.
    pub clients: Vec<Vec<usize>>,
}

impl Partition {
    pub fn client_count(&self) -> usize {
        self.clients.len()
    }

    pub fn client_sizes(&self) -> Vec<usize> {
        self.clients.iter().map(Vec::len).collect()
    }

    /// `K x c` table of per-client, per-class sample counts.
    pub fn count_table(&self, labels: &[usize], class_count: usize) -> Vec<Vec<usize>> {
        self.clients
            .iter()
            .map(|idx| {
                let mut row = vec![0; class_count];
                for &i in idx {
                    row[labels[i]] += 1;
                }
                row
            })
            .collect()
    }

    /// Checks that the client lists are disjoint, non-empty and cover `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (k, idx) in self.clients.iter().enumerate() {
            if idx.is_empty() {
                return Err(invalid(format!("client {k} owns no samples")));
            }
            for &i in idx {
                if i >= n || std::mem::replace(&mut seen[i], true) {
                    return Err(invalid(format!("index {i} out of range or assigned twice")));
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(invalid(format!("index {i} is not assigned to any client")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| invalid(format!("partition manifest: {e}")))
    }
}

/// Splits `total` into parts proportional to `shares` (summing to 1) so the
/// parts sum exactly to `total`; leftover units go to the largest fractional
/// remainders, ties to the lower index.
fn largest_remainder(shares: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = shares.iter().map(|q| q * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().take(total.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

fn attempt(labels: &[usize], class_count: usize, client_count: usize, alpha: f64, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    let mut clients = vec![Vec::new(); client_count];
    for class in 0..class_count {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.is_empty() {
            continue;
        }
        rng.shuffle(&mut idx);
        let shares = rng.dirichlet(alpha, client_count)?;
        let mut start = 0;
        for (k, count) in largest_remainder(&shares, idx.len()).into_iter().enumerate() {
            clients[k].extend_from_slice(&idx[start..start + count]);
            start += count;
        }
    }
    for c in &mut clients {
        c.sort_unstable();
    }
    Ok(clients)
}

/// Partitions sample indices across `client_count` clients. Attempts whose
/// smallest client falls below `min_per_client` are redrawn from a fresh
/// derived seed, up to [`MAX_PARTITION_ATTEMPTS`] times.
pub fn dirichlet_partition(
    labels: &[usize],
    client_count: usize,
    alpha: f64,
    min_per_client: usize,
    seed: u64,
) -> Result<Partition> {
    if client_count == 0 {
        return Err(invalid("need at least one client"));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(invalid(format!("dirichlet alpha {alpha} must be positive")));
    }
    if labels.is_empty() {
        return Err(invalid("cannot partition an empty dataset"));
    }
    if client_count * min_per_client.max(1) > labels.len() {
        return Err(invalid(format!(
            "{client_count} clients x {min_per_client} samples exceeds {} samples",
            labels.len()
        )));
    }
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    let floor = min_per_client.max(1);
    for n in 0..MAX_PARTITION_ATTEMPTS {
        let mut rng = Rng::seed_from(derive_seed(seed, "partition", n, 0));
        let clients = attempt(labels, class_count, client_count, alpha, &mut rng)?;
        if clients.iter().all(|c| c.len() >= floor) {
            return Ok(Partition {
                alpha,
                seed,
                clients,
            });
        }
    }
    Err(Error::InfeasiblePartition(format!(
        "no draw gave every one of {client_count} clients at least {floor} samples \
         after {MAX_PARTITION_ATTEMPTS} attempts (alpha {alpha})"
    )))
}
