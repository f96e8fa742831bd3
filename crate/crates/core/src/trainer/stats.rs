use crate::error::{Error, Result};
use crate::ib::{kmeans, layer_ib, soft_assign_all, update_q, ClusterState, IbReport, LabelTerm};
use crate::mask::UpdateScope;
use crate::numerics::{Rng, Tensor};
use crate::transformer::{MaskMode, Model, UpdateContext};

const INPUT_STREAM: u64 = 0x1000;
const SUBSAMPLE_STREAM: u64 = 0x1001;
const KMEANS_STREAM: u64 = 0x2000;
const EVAL_CHUNK: usize = 128;

/// Which masks a forward pass builds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Warm-up: the plain transformer.
    Off,
    /// Masks without the recurrent step, used once to seed cluster state.
    Bootstrap,
    Merge,
}

/// `[n, H, W]` images as rows `[n, H·W]`.
pub fn flatten_images(images: &Tensor<f64>) -> Result<Tensor<f64>> {
    let n = images.shape()[0];
    images.reshape(&[n, images.len() / n.max(1)])
}

/// Up to `cap` sample indices, fixed for the whole run.
pub fn stats_indices(n: usize, cap: usize, seed: u64) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    let mut idx = Rng::with_stream(seed, SUBSAMPLE_STREAM).permutation(n);
    idx.truncate(cap);
    idx.sort_unstable();
    idx
}

/// Input-side centroids, one per class.
pub fn input_clusters(flat: &Tensor<f64>, classes: usize, seed: u64) -> Result<Tensor<f64>> {
    Ok(kmeans(flat, classes, &mut Rng::with_stream(seed, INPUT_STREAM))?.centroids)
}

/// Block features and logits of an evaluation pass.
#[derive(Clone, Debug)]
pub struct Pass {
    /// Per block, `[n, ·]`: merged tokens where a mask exists, else the attention output.
    pub features: Vec<Tensor<f64>>,
    pub logits: Tensor<f32>,
}

/// Forward over `images` in chunks with masks built per sample.
/// `labels = None` uses the class-prior form of the mask update.
pub fn forward_pass(
    model: &Model<f32>,
    images: &Tensor<f64>,
    phi_input: &Tensor<f64>,
    labels: Option<&[usize]>,
    states: &[Option<ClusterState>],
    phase: Phase,
) -> Result<Pass> {
    let n = images.shape()[0];
    let depth = model.layout().len();
    let mut feats: Vec<Vec<Tensor<f64>>> = vec![Vec::new(); depth];
    let mut logits = Vec::new();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let imgs = images.select0(&idx).cast::<f32>();
        let phi = phi_input.select0(&idx);
        let chunk_labels: Option<Vec<usize>> = labels.map(|l| idx.iter().map(|&i| l[i]).collect());
        let mode = match phase {
            Phase::Off => MaskMode::Off,
            Phase::Bootstrap => MaskMode::Bootstrap,
            Phase::Merge => MaskMode::Update(UpdateContext {
                states,
                phi_input: &phi,
                labels: match &chunk_labels {
                    Some(l) => LabelTerm::Observed(l),
                    None => LabelTerm::Prior,
                },
                scope: UpdateScope::PerSample,
            }),
        };
        let (tape, trace) = model.evaluate(&imgs, &mode)?;
        for (b, f) in feats.iter_mut().enumerate() {
            f.push(trace.features(&tape, b)?);
        }
        logits.push(tape.value(trace.logits).clone());
    }
    let concat = |parts: Vec<Tensor<f64>>| -> Result<Tensor<f64>> {
        let cols = parts[0].cols();
        let data: Vec<f64> = parts.into_iter().flat_map(Tensor::into_data).collect();
        Tensor::new(&[n, cols], data)
    };
    let classes = model.spec.classes;
    Ok(Pass {
        features: feats.into_iter().map(concat).collect::<Result<_>>()?,
        logits: Tensor::new(&[n, classes], logits.into_iter().flat_map(Tensor::into_data).collect())?,
    })
}

/// k-means on each block's features, then `Q` against the new centroids.
pub fn refresh_states(
    features: &[Tensor<f64>],
    labels: &[usize],
    classes: usize,
    input_centroids: &Tensor<f64>,
    epoch: usize,
    seed: u64,
) -> Result<Vec<Option<ClusterState>>> {
    let n = labels.len();
    let mut prior = vec![0.0; classes];
    for &y in labels {
        prior[y] += 1.0 / n as f64;
    }
    features
        .iter()
        .enumerate()
        .map(|(b, f)| {
            let mut rng = Rng::with_stream(seed, KMEANS_STREAM + ((epoch as u64) << 8) + b as u64);
            let km = kmeans(f, classes, &mut rng)?;
            let phi = soft_assign_all(f, &km.centroids)?;
            let q = update_q(&phi, labels, classes)?;
            ClusterState::new(km.centroids, input_centroids.clone(), q, prior.clone(), epoch).map(Some)
        })
        .collect()
}

/// IB terms for every block against `states`.
pub fn ib_report(
    epoch: usize,
    dataset: &str,
    features: &[Tensor<f64>],
    phi_input: &Tensor<f64>,
    labels: &[usize],
    states: &[Option<ClusterState>],
) -> Result<IbReport> {
    let layers = features
        .iter()
        .zip(states)
        .enumerate()
        .map(|(b, (f, s))| {
            let s = s.as_ref().ok_or(Error::MissingClusterState { block: b })?;
            layer_ib(b, f, phi_input, labels, s)
        })
        .collect::<Result<_>>()?;
    Ok(IbReport {
        epoch,
        dataset: dataset.to_string(),
        layers,
    })
}

pub fn accuracy(logits: &Tensor<f32>, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = logits.row(i);
            let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            best == y
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Mean cross-entropy with log-softmax in f64.
pub fn mean_loss(logits: &Tensor<f32>, labels: &[usize]) -> f64 {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row: Vec<f64> = logits.row(i).iter().map(|&v| v as f64).collect();
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .sum();
    total / labels.len().max(1) as f64
}
