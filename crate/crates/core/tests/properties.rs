use std::collections::BTreeSet;

use proptest::prelude::*;

use fedhe::data::{gen_synthetic, partition_iid};
use fedhe::protocol::{
    ClassLogitAccumulator, ClassLogits, LogitUpdate, ServerLogitStore, StoreMode,
};

fn update(client: usize, classes: usize, values: &[f64]) -> LogitUpdate {
    LogitUpdate {
        client,
        class_count: classes,
        entries: (0..classes)
            .map(|class| ClassLogits {
                class,
                count: 1,
                logits: values[class * classes..(class + 1) * classes].to_vec(),
            })
            .collect(),
    }
}

fn arb_updates() -> impl Strategy<Value = (usize, Vec<(usize, Vec<f64>)>)> {
    (1usize..=6, 1usize..=6).prop_flat_map(|(classes, clients)| {
        let one = (
            0..clients,
            prop::collection::vec(-50.0f64..50.0, classes * classes),
        );
        (Just(classes), prop::collection::vec(one, 1..20))
    })
}

proptest! {
    #[test]
    fn partition_is_lossless(clients in 1usize..12, per_class in 2usize..15, seed: u64) {
        let d = gen_synthetic(3, 2, per_class, seed).unwrap();
        let clients = clients.min(d.len());
        let p = partition_iid(&d, clients, seed ^ 1).unwrap();
        let ids: Vec<usize> = p.client_datasets.iter().flat_map(|c| c.samples().iter().map(|s| s.id)).collect();
        prop_assert_eq!(ids.len(), d.len());
        let unique: BTreeSet<usize> = ids.iter().copied().collect();
        prop_assert_eq!(unique.len(), d.len());
        let sizes = p.sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn latest_store_ignores_arrival_order((classes, updates) in arb_updates(), rotate in 0usize..20) {
        let build = |order: &[(usize, Vec<f64>)]| {
            let mut store = ServerLogitStore::new(classes, StoreMode::Latest);
            for (client, values) in order {
                store.receive(&update(*client, classes, values)).unwrap();
            }
            store.average()
        };
        // Keep each client's final upload, then deliver those in another order.
        let mut last: Vec<(usize, Vec<f64>)> = Vec::new();
        for (client, values) in &updates {
            last.retain(|(c, _)| c != client);
            last.push((*client, values.clone()));
        }
        let mut shuffled = last.clone();
        let len = shuffled.len();
        shuffled.rotate_left(rotate % len);
        shuffled.reverse();
        prop_assert_eq!(build(&updates), build(&shuffled));
    }

    #[test]
    fn store_average_matches_brute_force((classes, updates) in arb_updates(), append: bool) {
        let mode = if append { StoreMode::Append } else { StoreMode::Latest };
        let mut store = ServerLogitStore::new(classes, mode);
        for (client, values) in &updates {
            store.receive(&update(*client, classes, values)).unwrap();
        }
        let avg = store.average();
        for class in 0..classes {
            let rows: Vec<&[f64]> = if append {
                updates.iter().map(|(_, v)| &v[class * classes..(class + 1) * classes]).collect()
            } else {
                let clients: BTreeSet<usize> = updates.iter().map(|(c, _)| *c).collect();
                clients
                    .iter()
                    .map(|c| {
                        let (_, v) = updates.iter().rev().find(|(k, _)| k == c).unwrap();
                        &v[class * classes..(class + 1) * classes]
                    })
                    .collect()
            };
            let got = avg.get(class).unwrap();
            for j in 0..classes {
                let mean = rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64;
                prop_assert!((got[j] - mean).abs() <= 1e-12 * (1.0 + mean.abs()));
            }
        }
    }

    #[test]
    fn finalize_is_finite_for_any_counts(
        classes in 1usize..8,
        labels in prop::collection::vec(0usize..8, 0..30),
    ) {
        let mut acc = ClassLogitAccumulator::new(classes);
        let labels: Vec<usize> = labels.into_iter().filter(|&y| y < classes).collect();
        let logits: Vec<Vec<f64>> = labels.iter().map(|&y| vec![y as f64 + 0.5; classes]).collect();
        acc.accumulate(logits.iter().map(Vec::as_slice).zip(labels.iter().copied())).unwrap();
        let out = acc.finalize(0).unwrap();
        prop_assert_eq!(out.entries.len(), classes);
        for e in &out.entries {
            let v = labels.iter().filter(|&&y| y == e.class).count() as f64;
            prop_assert_eq!(e.count as f64, v);
            for &p in &e.logits {
                prop_assert!(p.is_finite());
                prop_assert!((p - v * (e.class as f64 + 0.5) / (v + 1.0)).abs() < 1e-12);
            }
        }
    }
}
