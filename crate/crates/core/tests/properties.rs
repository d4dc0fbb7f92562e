use std::collections::BTreeSet;

use cmas_core::associator::associate_values;
use cmas_core::checkpoint;
use cmas_core::data::{encode_idx_images, encode_idx_labels, parse_idx_images, parse_idx_labels, split};
use cmas_core::training::PairingSampler;
use cmas_core::vae::kl_closed_form;
use cmas_core::{Associator, Dataset, LabelMap, Tensor};
use proptest::prelude::*;

fn labelled(labels: Vec<usize>, classes: usize, id: &str) -> Dataset {
    let n = labels.len();
    let items = Tensor::matrix(n, 1, (0..n).map(|i| i as f64 / n as f64).collect()).unwrap();
    Dataset::new(id, items, labels, (0..classes).map(|c| c.to_string()).collect(), None).unwrap()
}

/// Labels where every one of `classes` classes appears at least once.
fn covering_labels(classes: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..classes, 0..60).prop_map(move |mut v| {
        v.extend(0..classes);
        v
    })
}

proptest! {
    #[test]
    fn kl_is_nonnegative_and_zero_only_at_origin(
        v in prop::collection::vec((-4.0f64..4.0, -4.0f64..4.0), 1..8),
    ) {
        let (mu, logvar): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
        let kl = kl_closed_form(&mu, &logvar);
        prop_assert!(kl >= 0.0);
        let at_origin = mu.iter().chain(&logvar).all(|x| *x == 0.0);
        prop_assert_eq!(kl == 0.0, at_origin);
    }

    #[test]
    fn idx_round_trip(rows in 1usize..6, cols in 1usize..6, n in 0usize..5, seed in any::<u64>()) {
        let pixels: Vec<u8> = (0..n * rows * cols).map(|i| (seed.wrapping_mul(i as u64 + 7) >> 13) as u8).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i * 3 % 10) as u8).collect();
        let img = encode_idx_images(rows, cols, &pixels);
        prop_assert_eq!(parse_idx_images(&img).unwrap(), (n, rows, cols, pixels));
        prop_assert_eq!(parse_idx_labels(&encode_idx_labels(&labels)).unwrap(), labels);
    }

    #[test]
    fn split_partitions_items(n in 3usize..300, seed in any::<u64>(), a in 1u32..9) {
        let ds = labelled((0..n).map(|i| i % 2).collect(), 2, "toy");
        let ra = f64::from(a) / 10.0;
        let ratios = (ra, (1.0 - ra) / 2.0, (1.0 - ra) / 2.0);
        let Ok((x, y, z)) = split(&ds, ratios, seed) else { return Ok(()) };
        prop_assert_eq!(x.len() + y.len() + z.len(), n);
        let seen: BTreeSet<u64> = [&x, &y, &z]
            .iter()
            .flat_map(|d| d.items.data().iter().map(|v| v.to_bits()))
            .collect();
        prop_assert_eq!(seen.len(), n);
        prop_assert_eq!(x.len(), (n as f64 * ra).round() as usize);
    }

    #[test]
    fn pairs_respect_label_map(
        src in covering_labels(4),
        tgt in covering_labels(4),
        fraction in 0.0f64..=1.0,
        seed in any::<u64>(),
        pass in 0u64..4,
    ) {
        let (s, t) = (labelled(src, 4, "s"), labelled(tgt, 4, "t"));
        let map = LabelMap::new([(0, 2), (1, 3), (2, 0), (3, 1)]).unwrap();
        let sampler = PairingSampler::new(&s, &t, map.clone(), fraction, seed).unwrap();
        let pairs = sampler.pairs(pass);
        for &(i, j) in &pairs {
            prop_assert_eq!(map.get(s.labels[i]), Some(t.labels[j]));
        }
        let expected: usize = s.class_counts().iter().map(|&c| (fraction * c as f64).floor() as usize).sum();
        prop_assert_eq!(pairs.len(), expected);
        let sources: BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
        prop_assert_eq!(sources.len(), pairs.len());
    }

    #[test]
    fn checkpoint_round_trip(shapes in prop::collection::vec(prop::collection::vec(1usize..4, 1..4), 0..5)) {
        let tensors: Vec<(String, Tensor)> = shapes
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let n = s.iter().product();
                (format!("t/{k}"), Tensor::new(s.clone(), (0..n).map(|i| (i as f64).sin() * 1e3).collect()).unwrap())
            })
            .collect();
        let bytes = checkpoint::encode(tensors.iter().map(|(n, t)| (n.as_str(), t)));
        prop_assert_eq!(checkpoint::decode(&bytes).unwrap(), tensors);
    }

    #[test]
    fn associator_maps_any_widths(hi in 1usize..40, hj in 1usize..40, batch in 1usize..5) {
        let a = Associator::new("a", "b", hi, hj, &[8], 3).unwrap();
        let z = Tensor::matrix(batch, hi, vec![0.1; batch * hi]).unwrap();
        let out = associate_values(&a, &z).unwrap();
        prop_assert_eq!(out.mu.shape(), &[batch, hj]);
        prop_assert_eq!(out.logvar.shape(), &[batch, hj]);
    }
}
