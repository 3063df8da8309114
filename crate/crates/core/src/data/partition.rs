use rand::seq::SliceRandom;

use super::{check_train_fraction, split_train_test, ClientData, FederatedDataset};
use crate::dataset::LabeledData;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

/// Splits a pooled dataset across clients by label shards.
///
/// Samples are sorted by label (stable, so ties keep their input order) and
/// cut into `num_clients * shards_per_client` contiguous shards of equal
/// size; leftover samples at the end are dropped. Shards are dealt to
/// clients in a seeded random order and each client's union is then split
/// into train and test parts.
pub fn partition_labels_pathological(
    data: &LabeledData,
    num_clients: usize,
    shards_per_client: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<FederatedDataset> {
    if num_clients == 0 || shards_per_client == 0 {
        return Err(Error::Config(
            "num_clients and shards_per_client must be at least 1".into(),
        ));
    }
    check_train_fraction(train_fraction)?;
    let shards = num_clients * shards_per_client;
    let shard_size = data.len() / shards;
    // every client needs two rows to form a train and a test part
    if shard_size == 0 || shard_size * shards_per_client < 2 {
        return Err(Error::Data(format!(
            "{} samples cannot fill {shards} shards for {num_clients} clients",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by_key(|&i| data.labels[i]);

    let mut shard_ids: Vec<usize> = (0..shards).collect();
    shard_ids.shuffle(&mut stream(seed, Stream::Partition, &[]));

    let mut clients = Vec::with_capacity(num_clients);
    for (m, mine) in shard_ids.chunks(shards_per_client).enumerate() {
        let rows: Vec<usize> = mine
            .iter()
            .flat_map(|&s| order[s * shard_size..(s + 1) * shard_size].iter().copied())
            .collect();
        let local = data.subset(&rows);
        let mut rng = stream(seed, Stream::Partition, &[m as u64 + 1]);
        let (train, test) = split_train_test(&local, train_fraction, &mut rng)?;
        clients.push(ClientData {
            train,
            test,
            cluster: None,
        });
    }
    Ok(FederatedDataset {
        clients,
        input_dim: data.dim(),
        num_classes: data.num_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn pooled(n_per_class: usize, c: usize) -> LabeledData {
        let n = n_per_class * c;
        let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        let features = Tensor::new(vec![n, 2], (0..2 * n).map(|v| v as f64).collect()).unwrap();
        LabeledData::new(features, labels, c).unwrap()
    }

    fn distinct_labels(c: &ClientData) -> usize {
        let mut counts = c.train.class_counts();
        for (a, b) in counts.iter_mut().zip(c.test.class_counts()) {
            *a += b;
        }
        counts.iter().filter(|&&k| k > 0).count()
    }

    #[test]
    fn one_shard_gives_a_single_label() {
        let ds = partition_labels_pathological(&pooled(40, 5), 5, 1, 0.75, 3).unwrap();
        assert_eq!(ds.num_clients(), 5);
        for c in &ds.clients {
            assert_eq!(distinct_labels(c), 1);
        }
    }

    #[test]
    fn many_shards_cover_more_labels() {
        let ds = partition_labels_pathological(&pooled(40, 5), 4, 5, 0.75, 3).unwrap();
        let mean: f64 = ds
            .clients
            .iter()
            .map(|c| distinct_labels(c) as f64)
            .sum::<f64>()
            / 4.0;
        assert!(mean >= 3.0, "mean label coverage {mean}");
    }

    #[test]
    fn seeded() {
        let d = pooled(20, 4);
        assert_eq!(
            partition_labels_pathological(&d, 4, 2, 0.5, 9).unwrap(),
            partition_labels_pathological(&d, 4, 2, 0.5, 9).unwrap()
        );
    }

    #[test]
    fn insufficient_data_is_an_error() {
        assert!(partition_labels_pathological(&pooled(1, 3), 4, 1, 0.5, 0).is_err());
    }

    #[test]
    fn no_sample_is_used_twice() {
        let ds = partition_labels_pathological(&pooled(30, 3), 3, 3, 0.7, 1).unwrap();
        let mut seen = std::collections::HashSet::new();
        for c in &ds.clients {
            for part in [&c.train, &c.test] {
                for r in 0..part.len() {
                    assert!(seen.insert(part.features.get(r, 0) as i64));
                }
            }
        }
        assert_eq!(seen.len(), 90);
    }
}
