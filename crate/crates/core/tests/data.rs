use era_core::data::{generate, load_csv, write_csv, CsvSchema, SyntheticSpec};

fn distance2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

#[test]
fn nearest_centroid_separates_well_spaced_clusters() {
    let spec = SyntheticSpec {
        num_classes: 4,
        input_dim: 3,
        samples_per_class: 200,
        cluster_means: vec![
            vec![0.0, 0.0, 0.0],
            vec![10.0, 0.0, 0.0],
            vec![0.0, 10.0, 0.0],
            vec![0.0, 0.0, 10.0],
        ],
        cluster_scale: 1.0,
        label_noise: 0.0,
        seed: 3,
    };
    let (train, test) = generate(&spec).unwrap();
    assert_eq!((train.len(), test.len()), (640, 160));
    // Centroids estimated from the training split only.
    let mut centroids = vec![vec![0.0; 3]; 4];
    for (i, &y) in train.labels.iter().enumerate() {
        for (c, v) in centroids[y].iter_mut().zip(train.features.row(i)) {
            *c += v / 160.0;
        }
    }
    let hits = test
        .labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| {
            let row = test.features.row(*i);
            let best = (0..4)
                .min_by(|&a, &b| {
                    distance2(row, &centroids[a]).total_cmp(&distance2(row, &centroids[b]))
                })
                .unwrap();
            best == y
        })
        .count();
    assert!(hits as f64 / 160.0 >= 0.99, "{hits}/160");
}

#[test]
fn csv_reload_reproduces_the_dataset() {
    let (train, _) = generate(&SyntheticSpec::with_random_means(
        3, 4, 20, 2.0, 0.7, 0.1, 9,
    ))
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.csv");
    write_csv(&train, &path).unwrap();
    let back = load_csv(
        &path,
        CsvSchema {
            input_dim: Some(4),
            num_classes: Some(3),
        },
    )
    .unwrap();
    assert!(back.features.bit_eq(&train.features));
    assert_eq!(back.labels, train.labels);
}
