//! Dataset ingestion (MNIST IDX, synthetic Gaussian clusters) and client
//! sharding: balanced iid splits and the L-labels-per-client non-iid split.

use std::collections::BTreeSet;
use std::io::Read;
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Error, Debug)]
pub enum DataError {
    #[error("io error reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad magic in {path}: expected {expected:#010x}, got {got:#010x}")]
    BadMagic { path: String, expected: u32, got: u32 },
    #[error("truncated file {path}: expected {expected} data bytes, found {found}")]
    Truncated { path: String, expected: usize, found: usize },
    #[error("image file has {images} items but label file has {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("invalid partition parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Labeled image set, images `[count, channels, H, W]` with values scaled
/// to `[0,1]` at load time (normalize separately).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(x - mean) / std` over every pixel.
    pub fn normalize(&self, mean: f64, std: f64) -> Dataset {
        let data = self.images.data().iter().map(|v| (v - mean) / std).collect();
        Dataset {
            images: Tensor::from_vec(self.images.shape(), data).unwrap(),
            labels: self.labels.clone(),
            class_count: self.class_count,
        }
    }

    /// First `n` examples after a seeded shuffle (desk-scale subsetting).
    pub fn subsample(&self, n: usize, rng: &mut impl Rng) -> Dataset {
        let take = n.min(self.len());
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order.truncate(take);
        self.select(&order)
    }

    /// New dataset holding the given rows in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let row: usize = self.images.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * row);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * row..(i + 1) * row]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.images.shape()[1..]);
        Dataset {
            images: Tensor::from_vec(&shape, data).unwrap(),
            labels,
            class_count: self.class_count,
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    Ok(buf)
}

/// Parses the big-endian IDX pair: image magic 0x803 then count/rows/cols
/// and unsigned pixel bytes, label magic 0x801 then count and label bytes.
/// Pixels are scaled to `[0,1]`.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let img_bytes = read_file(images_path)?;
    let mut cur = std::io::Cursor::new(&img_bytes);
    let ipath = images_path.display().to_string();
    let io_err = |source| DataError::Io { path: ipath.clone(), source };

    let magic = cur.read_u32::<BigEndian>().map_err(io_err)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(DataError::BadMagic { path: ipath, expected: IDX_IMAGE_MAGIC, got: magic });
    }
    let count = cur.read_u32::<BigEndian>().map_err(io_err)? as usize;
    let rows = cur.read_u32::<BigEndian>().map_err(io_err)? as usize;
    let cols = cur.read_u32::<BigEndian>().map_err(io_err)? as usize;
    let expected = count * rows * cols;
    let pixel_bytes = &img_bytes[16.min(img_bytes.len())..];
    if pixel_bytes.len() < expected {
        return Err(DataError::Truncated {
            path: images_path.display().to_string(),
            expected,
            found: pixel_bytes.len(),
        });
    }

    let lab_bytes = read_file(labels_path)?;
    let mut cur = std::io::Cursor::new(&lab_bytes);
    let lpath = labels_path.display().to_string();
    let io_err = |source| DataError::Io { path: lpath.clone(), source };
    let magic = cur.read_u32::<BigEndian>().map_err(io_err)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(DataError::BadMagic { path: lpath, expected: IDX_LABEL_MAGIC, got: magic });
    }
    let lab_count = cur.read_u32::<BigEndian>().map_err(io_err)? as usize;
    if lab_count != count {
        return Err(DataError::CountMismatch { images: count, labels: lab_count });
    }
    let label_bytes = &lab_bytes[8.min(lab_bytes.len())..];
    if label_bytes.len() < lab_count {
        return Err(DataError::Truncated {
            path: labels_path.display().to_string(),
            expected: lab_count,
            found: label_bytes.len(),
        });
    }

    let data: Vec<f64> = pixel_bytes[..expected].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = label_bytes[..lab_count].iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().max().map_or(1, |&m| m + 1);
    Ok(Dataset {
        images: Tensor::from_vec(&[count, 1, rows, cols], data)?,
        labels,
        class_count,
    })
}

/// Gaussian class clusters: one unit-variance blob per class, means at
/// pairwise distance >= `separation`. Features sit on the channel dim
/// (`[count, dim, 1, 1]`) so the dense archs consume them directly.
pub fn synthetic_classes(
    classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    rng: &mut impl Rng,
) -> Dataset {
    let count = classes * per_class;
    let mut data = Vec::with_capacity(count * dim);
    let mut labels = Vec::with_capacity(count);
    for class in 0..classes {
        let slot = class % dim;
        let level = separation * (1.0 + (class / dim) as f64);
        for _ in 0..per_class {
            for d in 0..dim {
                let mean = if d == slot { level } else { 0.0 };
                data.push(mean + gaussian(rng));
            }
            labels.push(class);
        }
    }
    Dataset {
        images: Tensor::from_vec(&[count, dim, 1, 1], data).unwrap(),
        labels,
        class_count: classes,
    }
}

/// Standard normal via Box-Muller.
fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Disjoint per-client example indices plus each client's allowed labels.
#[derive(Debug, Clone)]
pub struct PartitionPlan {
    pub client_indices: Vec<Vec<usize>>,
    pub client_labels: Vec<BTreeSet<usize>>,
    /// L for the non-iid split; `None` for iid.
    pub labels_per_client: Option<usize>,
}

/// Non-iid-L split: every client holds examples from exactly L labels.
/// Labels are handed out round-robin over a seeded permutation so every
/// label has at least one holder when `num_clients * L >= class_count`;
/// each label's pool is split evenly among its holders.
pub fn partition_noniid(
    dataset: &Dataset,
    num_clients: usize,
    l: usize,
    rng: &mut impl Rng,
) -> Result<PartitionPlan, DataError> {
    let k = dataset.class_count;
    if l == 0 || l > k {
        return Err(DataError::InvalidParams(format!(
            "labels per client {l} outside 1..={k}"
        )));
    }
    if num_clients == 0 {
        return Err(DataError::InvalidParams("need at least one client".into()));
    }

    let mut perm: Vec<usize> = (0..k).collect();
    perm.shuffle(rng);

    // client c takes L consecutive slots of the cyclic permutation
    let mut client_labels: Vec<BTreeSet<usize>> = Vec::with_capacity(num_clients);
    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); k]; // label -> clients
    for c in 0..num_clients {
        let mut set = BTreeSet::new();
        for j in 0..l {
            let label = perm[(c * l + j) % k];
            set.insert(label);
            holders[label].push(c);
        }
        client_labels.push(set);
    }

    // split each label's pool evenly among its holders
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &lab) in dataset.labels.iter().enumerate() {
        pools[lab].push(i);
    }
    let mut client_indices: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    for label in 0..k {
        let owners = &holders[label];
        if owners.is_empty() {
            continue;
        }
        let mut pool = pools[label].clone();
        pool.shuffle(rng);
        let base = pool.len() / owners.len();
        let extra = pool.len() % owners.len();
        let mut cursor = 0;
        for (rank, &client) in owners.iter().enumerate() {
            let take = base + usize::from(rank < extra);
            client_indices[client].extend_from_slice(&pool[cursor..cursor + take]);
            cursor += take;
        }
    }

    Ok(PartitionPlan { client_indices, client_labels, labels_per_client: Some(l) })
}

/// Random equal-size disjoint shards (sizes differ by at most one).
pub fn partition_iid(
    dataset: &Dataset,
    num_clients: usize,
    rng: &mut impl Rng,
) -> Result<PartitionPlan, DataError> {
    if num_clients == 0 || num_clients > dataset.len() {
        return Err(DataError::InvalidParams(format!(
            "client count {num_clients} outside 1..={}",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(rng);
    let base = order.len() / num_clients;
    let extra = order.len() % num_clients;
    let mut client_indices = Vec::with_capacity(num_clients);
    let mut client_labels = Vec::with_capacity(num_clients);
    let mut cursor = 0;
    for c in 0..num_clients {
        let take = base + usize::from(c < extra);
        let shard: Vec<usize> = order[cursor..cursor + take].to_vec();
        cursor += take;
        let labels: BTreeSet<usize> = shard.iter().map(|&i| dataset.labels[i]).collect();
        client_indices.push(shard);
        client_labels.push(labels);
    }
    Ok(PartitionPlan { client_indices, client_labels, labels_per_client: None })
}
