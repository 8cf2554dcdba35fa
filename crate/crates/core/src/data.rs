//! Synthetic data, non-IID partitioning and CSV ingestion.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FedselError, Result};
use crate::model::Batch;
use crate::rng::{self, StreamRng};

/// Train / validation / test splits over a fixed label set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub classes: usize,
    pub train: Batch,
    pub validation: Batch,
    pub test: Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub spread: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim < 2 || self.per_class < 10 {
            return Err(FedselError::Config(format!(
                "synthetic data needs classes >= 2, dim >= 2, per_class >= 10 (got {}, {}, {})",
                self.classes, self.dim, self.per_class
            )));
        }
        if !(self.spread.is_finite() && self.spread >= 0.0) {
            return Err(FedselError::Config("spread must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Isotropic Gaussian blobs around random unit-norm class means, split
/// 80/10/10 by [`split_dataset`].
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng::stream(seed, rng::STREAM_DATA);
    let d = spec.dim;
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                break v.into_iter().map(|x| x / n).collect();
            }
        })
        .collect();
    let total = spec.classes * spec.per_class;
    let mut features = Vec::with_capacity(total * d);
    let mut labels = Vec::with_capacity(total);
    for (c, mu) in means.iter().enumerate() {
        for _ in 0..spec.per_class {
            for m in mu {
                let z: f64 = rng.sample(StandardNormal);
                features.push(m + spec.spread * z);
            }
            labels.push(c);
        }
    }
    let all = Batch::new(features, labels, d)?;
    split_dataset(&all, spec.classes, &mut rng)
}

/// Stratified 80/10/10 split: each class contributes `floor(n_c/10)` rows to
/// validation and to test, the rest to train. Every split is shuffled and
/// standardized with the training split's per-column mean and standard
/// deviation.
pub fn split_dataset(all: &Batch, classes: usize, rng: &mut StreamRng) -> Result<Dataset> {
    if let Some(l) = all.labels.iter().find(|&&l| l >= classes) {
        return Err(FedselError::Schema(format!("label {l} outside [0, {classes})")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in all.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for mut rows in by_class {
        rows.shuffle(rng);
        let tenth = rows.len() / 10;
        va.extend_from_slice(&rows[..tenth]);
        te.extend_from_slice(&rows[tenth..2 * tenth]);
        tr.extend_from_slice(&rows[2 * tenth..]);
    }
    if tr.is_empty() || va.is_empty() || te.is_empty() {
        return Err(FedselError::EmptyDataset(format!(
            "{} rows are too few for a train/validation/test split",
            all.len()
        )));
    }
    for split in [&mut tr, &mut va, &mut te] {
        split.shuffle(rng);
    }
    let mut train = all.subset(&tr);
    let mut validation = all.subset(&va);
    let mut test = all.subset(&te);
    let (mean, std) = column_stats(&train);
    for b in [&mut train, &mut validation, &mut test] {
        standardize(b, &mean, &std);
    }
    Ok(Dataset {
        classes,
        train,
        validation,
        test,
    })
}

fn column_stats(b: &Batch) -> (Vec<f64>, Vec<f64>) {
    let n = b.len() as f64;
    let mut mean = vec![0.0; b.dim];
    for i in 0..b.len() {
        for (m, x) in mean.iter_mut().zip(b.row(i)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; b.dim];
    for i in 0..b.len() {
        for ((v, x), m) in var.iter_mut().zip(b.row(i)).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    // constant columns are centered but not scaled
    let std = var
        .into_iter()
        .map(|v| {
            let s = (v / n).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

fn standardize(b: &mut Batch, mean: &[f64], std: &[f64]) {
    for row in b.features.chunks_mut(b.dim) {
        for ((x, m), s) in row.iter_mut().zip(mean).zip(std) {
            *x = (*x - m) / s;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PartitionMode {
    Shard { shards_per_client: usize },
    Dirichlet { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    #[serde(flatten)]
    pub mode: PartitionMode,
    pub num_clients: usize,
    pub seed: u64,
}

/// One client's private training data and its realized class mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: usize,
    pub train: Batch,
    pub mixing: Vec<f64>,
}

impl ClientDataset {
    fn from_indices(client_id: usize, data: &Batch, classes: usize, idx: &[usize]) -> Self {
        let train = data.subset(idx);
        let mixing = class_proportions(&train.labels, classes);
        Self {
            client_id,
            train,
            mixing,
        }
    }
}

pub fn class_proportions(labels: &[usize], classes: usize) -> Vec<f64> {
    let mut counts = vec![0.0; classes];
    for &l in labels {
        counts[l] += 1.0;
    }
    let n = labels.len().max(1) as f64;
    counts.into_iter().map(|c| c / n).collect()
}

/// Dispatches on the partition mode.
pub fn partition(dataset: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientDataset>> {
    match spec.mode {
        PartitionMode::Shard { .. } => partition_shards(dataset, spec),
        PartitionMode::Dirichlet { .. } => partition_dirichlet(dataset, spec),
    }
}

fn check_clients(spec: &PartitionSpec) -> Result<()> {
    if spec.num_clients < 2 {
        return Err(FedselError::Config(format!(
            "need at least 2 clients, got {}",
            spec.num_clients
        )));
    }
    Ok(())
}

/// Sorts the training split by label, cuts it into `K·S` contiguous shards
/// and deals `S` random shards to each client.
///
/// Shards differ in size by at most one row (the first `n mod K·S` shards get
/// the extra row), so every training row is assigned exactly once. A shard
/// can straddle one label boundary when shard size does not divide the class
/// counts.
pub fn partition_shards(dataset: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientDataset>> {
    check_clients(spec)?;
    let PartitionMode::Shard { shards_per_client } = spec.mode else {
        return Err(FedselError::Config("partition_shards needs shard mode".into()));
    };
    if shards_per_client == 0 {
        return Err(FedselError::Config("shards_per_client must be >= 1".into()));
    }
    let data = &dataset.train;
    let num_shards = spec.num_clients * shards_per_client;
    if num_shards > data.len() {
        return Err(FedselError::Config(format!(
            "{num_shards} shards requested but only {} training rows",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by_key(|&i| (data.labels[i], i));

    let base = data.len() / num_shards;
    let extra = data.len() % num_shards;
    let mut shards = Vec::with_capacity(num_shards);
    let mut start = 0;
    for s in 0..num_shards {
        let len = base + usize::from(s < extra);
        shards.push(&order[start..start + len]);
        start += len;
    }

    let mut rng = rng::stream(spec.seed, rng::STREAM_PARTITION);
    let mut deal: Vec<usize> = (0..num_shards).collect();
    deal.shuffle(&mut rng);

    Ok(deal
        .chunks(shards_per_client)
        .enumerate()
        .map(|(k, mine)| {
            let mut mine = mine.to_vec();
            mine.sort_unstable();
            let idx: Vec<usize> = mine.iter().flat_map(|&s| shards[s].iter().copied()).collect();
            ClientDataset::from_indices(k, data, dataset.classes, &idx)
        })
        .collect())
}

/// log of a Gamma(shape, 1) draw, stable for very small shapes.
fn log_gamma_sample(shape: f64, rng: &mut StreamRng) -> f64 {
    if shape >= 1.0 {
        let g: f64 = Gamma::new(shape, 1.0).expect("valid shape").sample(rng);
        g.ln()
    } else {
        // Gamma(a) = Gamma(a + 1) · U^(1/a)
        let g: f64 = Gamma::new(shape + 1.0, 1.0).expect("valid shape").sample(rng);
        let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        g.ln() + u.ln() / shape
    }
}

/// Draws per-client mixtures `λ_k ~ Dirichlet(α·1)` (in log space) and sends
/// each class-`j` sample to client `k` with probability proportional to
/// `λ_jk`. Empty clients then take one row from the currently largest client.
pub fn partition_dirichlet(dataset: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientDataset>> {
    check_clients(spec)?;
    let PartitionMode::Dirichlet { alpha } = spec.mode else {
        return Err(FedselError::Config("partition_dirichlet needs dirichlet mode".into()));
    };
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(FedselError::Config(format!("alpha must be positive, got {alpha}")));
    }
    let data = &dataset.train;
    let k = spec.num_clients;
    if data.len() < k {
        return Err(FedselError::Config(format!(
            "{k} clients but only {} training rows",
            data.len()
        )));
    }
    let c = dataset.classes;
    let mut rng = rng::stream(spec.seed, rng::STREAM_PARTITION);

    // log λ_jk, normalized over classes per client
    let log_lambda: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let raw: Vec<f64> = (0..c).map(|_| log_gamma_sample(alpha, &mut rng)).collect();
            let lse = log_sum_exp(&raw);
            raw.into_iter().map(|x| x - lse).collect()
        })
        .collect();

    // per class: categorical over clients
    let class_weights: Vec<Vec<f64>> = (0..c)
        .map(|j| {
            let col: Vec<f64> = log_lambda.iter().map(|l| l[j]).collect();
            let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = col.iter().map(|x| (x - max).exp()).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        })
        .collect();

    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); k];
    for i in 0..data.len() {
        let w = &class_weights[data.labels[i]];
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = k - 1;
        for (client, p) in w.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = client;
                break;
            }
        }
        assigned[pick].push(i);
    }

    for empty in 0..k {
        if !assigned[empty].is_empty() {
            continue;
        }
        let donor = (0..k)
            .max_by(|&a, &b| assigned[a].len().cmp(&assigned[b].len()).then(b.cmp(&a)))
            .expect("k >= 2");
        let row = assigned[donor].pop().expect("donor has rows");
        log::debug!("dirichlet partition: moved row {row} from client {donor} to empty client {empty}");
        assigned[empty].push(row);
    }

    Ok(assigned
        .iter()
        .enumerate()
        .map(|(client, idx)| ClientDataset::from_indices(client, data, c, idx))
        .collect())
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Mean total-variation distance between all pairs of client mixtures.
pub fn mean_pairwise_tv(clients: &[ClientDataset]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (i, a) in clients.iter().enumerate() {
        for b in &clients[i + 1..] {
            total += 0.5
                * a.mixing
                    .iter()
                    .zip(&b.mixing)
                    .map(|(x, y)| (x - y).abs())
                    .sum::<f64>();
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Writes `label,f1,...,fd` rows with a header.
pub fn write_csv(path: &Path, batch: &Batch) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut header = vec!["label".to_string()];
    header.extend((1..=batch.dim).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(|e| csv_io(path, e))?;
    for i in 0..batch.len() {
        let mut rec = vec![batch.labels[i].to_string()];
        rec.extend(batch.row(i).iter().map(|x| format!("{x:?}")));
        w.write_record(&rec).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| FedselError::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> FedselError {
    let message = e.to_string();
    match e.into_kind() {
        csv::ErrorKind::Io(io) => FedselError::io(path, io),
        _ => FedselError::Parse { line: 0, message },
    }
}

/// Reads a `label,f1,...,fd` CSV with a header row. Lines starting with `#`
/// are ignored. Values are returned as written; standardization happens in
/// [`split_dataset`].
pub fn load_csv(path: &Path) -> Result<Batch> {
    let file = std::fs::File::open(path).map_err(|e| FedselError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let header_len = rdr.headers().map_err(|e| csv_io(path, e))?.len();
    if header_len < 2 {
        return Err(FedselError::Schema(
            "header must be label,f1,...,fd with at least one feature".into(),
        ));
    }
    let dim = header_len - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            FedselError::Parse {
                line,
                message: e.to_string(),
            }
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != header_len {
            return Err(FedselError::Schema(format!(
                "line {line}: expected {header_len} fields, found {}",
                rec.len()
            )));
        }
        let label: usize = rec[0].parse().map_err(|_| FedselError::Parse {
            line,
            message: format!("invalid label '{}'", &rec[0]),
        })?;
        labels.push(label);
        for (j, field) in rec.iter().skip(1).enumerate() {
            let v: f64 = field.parse().map_err(|_| FedselError::Parse {
                line,
                message: format!("invalid value '{field}' in column f{}", j + 1),
            })?;
            if !v.is_finite() {
                return Err(FedselError::Parse {
                    line,
                    message: format!("non-finite value in column f{}", j + 1),
                });
            }
            features.push(v);
        }
    }
    if labels.is_empty() {
        return Err(FedselError::EmptyDataset(format!(
            "{} has a header but no rows",
            path.display()
        )));
    }
    Batch::new(features, labels, dim)
}

/// Number of classes implied by a batch's labels.
pub fn infer_classes(batch: &Batch) -> usize {
    batch.labels.iter().max().map_or(0, |m| m + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;
    use std::io::Write;

    fn synth(classes: usize, per_class: usize, seed: u64) -> Dataset {
        generate_synthetic(
            &SyntheticSpec {
                classes,
                dim: 4,
                per_class,
                spread: 0.5,
            },
            seed,
        )
        .unwrap()
    }

    fn shard_spec(k: usize, s: usize, seed: u64) -> PartitionSpec {
        PartitionSpec {
            mode: PartitionMode::Shard { shards_per_client: s },
            num_clients: k,
            seed,
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_split() {
        let a = synth(3, 20, 5);
        assert_eq!(a, synth(3, 20, 5));
        assert_ne!(a, synth(3, 20, 6));
        assert_eq!(a.train.len(), 48);
        assert_eq!(a.validation.len(), 6);
        assert_eq!(a.test.len(), 6);
    }

    #[test]
    fn synthetic_rejects_bad_sizes() {
        let bad = SyntheticSpec { classes: 1, dim: 4, per_class: 20, spread: 1.0 };
        assert!(matches!(generate_synthetic(&bad, 0), Err(FedselError::Config(_))));
        let bad = SyntheticSpec { classes: 3, dim: 4, per_class: 5, spread: 1.0 };
        assert!(generate_synthetic(&bad, 0).is_err());
    }

    #[test]
    fn one_shard_per_client_is_label_pure() {
        let ds = synth(5, 20, 1);
        let clients = partition_shards(&ds, &shard_spec(5, 1, 3)).unwrap();
        for c in &clients {
            let ones = c.mixing.iter().filter(|&&m| m == 1.0).count();
            assert_eq!(ones, 1, "mixing {:?}", c.mixing);
        }
    }

    #[test]
    fn shards_partition_the_training_set() {
        let ds = synth(4, 23, 2);
        let clients = partition_shards(&ds, &shard_spec(3, 2, 9)).unwrap();
        let total: usize = clients.iter().map(|c| c.train.len()).sum();
        assert_eq!(total, ds.train.len());
        let mut rows: Vec<Vec<u64>> = clients
            .iter()
            .flat_map(|c| (0..c.train.len()).map(move |i| {
                let mut r: Vec<u64> = c.train.row(i).iter().map(|x| x.to_bits()).collect();
                r.push(c.train.labels[i] as u64);
                r
            }))
            .collect();
        let mut all: Vec<Vec<u64>> = (0..ds.train.len())
            .map(|i| {
                let mut r: Vec<u64> = ds.train.row(i).iter().map(|x| x.to_bits()).collect();
                r.push(ds.train.labels[i] as u64);
                r
            })
            .collect();
        rows.sort();
        all.sort();
        assert_eq!(rows, all);
        for c in &clients {
            let s: f64 = c.mixing.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn too_many_shards_is_config_error() {
        let ds = synth(2, 10, 0);
        assert!(matches!(
            partition_shards(&ds, &shard_spec(10, 5, 0)),
            Err(FedselError::Config(_))
        ));
        assert!(partition_shards(&ds, &shard_spec(1, 1, 0)).is_err());
    }

    #[test]
    fn dirichlet_is_deterministic_and_nonempty() {
        let ds = synth(4, 30, 0);
        let spec = PartitionSpec { mode: PartitionMode::Dirichlet { alpha: 0.05 }, num_clients: 8, seed: 4 };
        let a = partition_dirichlet(&ds, &spec).unwrap();
        assert_eq!(a, partition_dirichlet(&ds, &spec).unwrap());
        assert!(a.iter().all(|c| !c.train.is_empty()));
        assert_eq!(a.iter().map(|c| c.train.len()).sum::<usize>(), ds.train.len());
        let bad = PartitionSpec { mode: PartitionMode::Dirichlet { alpha: 0.0 }, ..spec };
        assert!(partition_dirichlet(&ds, &bad).is_err());
    }

    #[test]
    fn labels_per_client_bounded_by_shards() {
        // Shards no larger than the smallest class straddle at most one label
        // boundary each, so a client sees at most 2·S labels.
        let ds = generate_synthetic(
            &SyntheticSpec { classes: 6, dim: 3, per_class: 100, spread: 0.5 },
            7,
        )
        .unwrap();
        for s in 2..=3 {
            let clients = partition_shards(&ds, &shard_spec(6, s, 1)).unwrap();
            for c in &clients {
                let labels: BTreeSet<_> = c.train.labels.iter().collect();
                assert!(labels.len() <= 2 * s, "S={s}: {labels:?}");
            }
        }
    }

    #[test]
    fn csv_fixture_parses_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("four.csv");
        let mut f = std::fs::File::create(&p).unwrap();
        writeln!(f, "label,f1,f2,f3").unwrap();
        writeln!(f, "0,1.5,-2,0").unwrap();
        writeln!(f, "2,0.25,3.0,1e-3").unwrap();
        writeln!(f, "1, 7, 8, 9").unwrap();
        writeln!(f, "0,-0.5,0.5,-1.25").unwrap();
        drop(f);
        let b = load_csv(&p).unwrap();
        assert_eq!(b.dim, 3);
        assert_eq!(b.labels, vec![0, 2, 1, 0]);
        assert_eq!(
            b.features,
            vec![1.5, -2.0, 0.0, 0.25, 3.0, 1e-3, 7.0, 8.0, 9.0, -0.5, 0.5, -1.25]
        );
        assert_eq!(infer_classes(&b), 3);
    }

    #[test]
    fn csv_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        std::fs::write(&p, "label,f1,f2\n").unwrap();
        assert!(matches!(load_csv(&p), Err(FedselError::EmptyDataset(_))));

        std::fs::write(&p, "label,f1,f2\n0,1,2\n1,x,3\n").unwrap();
        match load_csv(&p) {
            Err(FedselError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        std::fs::write(&p, "label,f1,f2\n0,1,2\n1,3\n").unwrap();
        assert!(matches!(load_csv(&p), Err(FedselError::Schema(_))));
        assert!(matches!(
            load_csv(&dir.path().join("missing.csv")),
            Err(FedselError::Io { .. })
        ));
    }

    #[test]
    fn csv_round_trip() {
        let ds = synth(3, 10, 11);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rt.csv");
        write_csv(&p, &ds.train).unwrap();
        let back = load_csv(&p).unwrap();
        assert_eq!(back.labels, ds.train.labels);
        for (a, b) in back.features.iter().zip(&ds.train.features) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn standardization_uses_train_statistics() {
        let ds = synth(3, 30, 2);
        for j in 0..ds.train.dim {
            let col: Vec<f64> = (0..ds.train.len()).map(|i| ds.train.row(i)[j]).collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / col.len() as f64;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-12);
        }
    }
}
