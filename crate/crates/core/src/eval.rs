//! Evaluation protocol: a small feature-extracting classifier with a reject
//! class, FID, KID and the two top-1 accuracies.

use std::path::Path;

use log::{info, warn};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{orientation_of, NUM_CLASSES};
use crate::error::{invalid, Error, Result};
use crate::nn::{cosine_lr, gather_batch, Conv, GroupNorm, Linear};
use crate::numerics::{
    adam_update_store, load_checkpoint, save_checkpoint, AdamConfig, AdamState, Bound, Fragment, ParamId, ParamStore,
    Scalar, Tape, Tensor, Var,
};

pub const PREFIX: &str = "classifier";
/// Label of the extra class for anything that is not a creature.
pub const REJECT: usize = NUM_CLASSES;
pub const FEATURE_DIM: usize = 64;

#[derive(Clone, Debug)]
struct Stage {
    conv: Conv,
    norm: GroupNorm,
}

/// Convolutional classifier over `[3, 32, 32]` images with `NUM_CLASSES + 1`
/// outputs; the penultimate activations serve as metric features.
#[derive(Clone, Debug)]
pub struct Classifier {
    store: ParamStore,
    stages: Vec<Stage>,
    feat: Linear,
    head: Linear,
    trained: ParamId,
}

impl Classifier {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let widths = [3, 16, 32, 64, 64];
        let stages = (0..4)
            .map(|i| {
                let name = format!("{PREFIX}.stage{i}");
                let stride = if i == 0 { 1 } else { 2 };
                Stage {
                    conv: Conv::new(&mut s, &format!("{name}.conv"), widths[i], widths[i + 1], 3, stride, 2.0, &mut rng),
                    norm: GroupNorm::new(&mut s, &format!("{name}.norm"), widths[i + 1]),
                }
            })
            .collect();
        let feat = Linear::new(&mut s, &format!("{PREFIX}.feat"), 64, FEATURE_DIM, 2.0, &mut rng);
        let head = Linear::new(&mut s, &format!("{PREFIX}.head"), FEATURE_DIM, NUM_CLASSES + 1, 1.0, &mut rng);
        let trained = s.add(format!("{PREFIX}.trained_epochs"), Tensor::zeros(&[1]), false);
        Self {
            store: s,
            stages,
            feat,
            head,
            trained,
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn is_trained(&self) -> bool {
        self.store.get(self.trained).data()[0] > 0.0
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.store.named())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Self::new(0);
        c.store.load_named(&load_checkpoint(path)?)?;
        Ok(c)
    }

    /// Features `[B, FEATURE_DIM]` and logits `[B, NUM_CLASSES + 1]`.
    fn forward_on<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let mut h = x;
        for st in &self.stages {
            h = st.conv.forward(tape, p, h)?;
            h = st.norm.forward(tape, p, h)?;
            h = tape.silu(h)?;
        }
        let pooled = tape.mean_planes(h)?;
        let f = self.feat.forward(tape, p, pooled)?;
        let f = tape.silu(f)?;
        let logits = self.head.forward(tape, p, f)?;
        Ok((f, logits))
    }

    fn run(&self, images: &[Tensor]) -> Result<(Vec<Vec<f32>>, Vec<usize>)> {
        let mut feats = Vec::with_capacity(images.len());
        let mut preds = Vec::with_capacity(images.len());
        for start in (0..images.len()).step_by(64) {
            let idx: Vec<usize> = (start..(start + 64).min(images.len())).collect();
            let x = gather_batch(images, &idx)?;
            if x.shape()[1..] != [3, 32, 32] {
                return invalid(format!("classifier expects [3, 32, 32] images, got {:?}", &x.shape()[1..]));
            }
            let mut tape = Tape::<f32>::inference();
            let p = tape.bind(&self.store);
            let xv = tape.constant(x);
            let (f, l) = self.forward_on(&mut tape, &p, xv)?;
            feats.extend(tape.value(f).data().chunks(FEATURE_DIM).map(|c| c.to_vec()));
            for row in tape.value(l).data().chunks(NUM_CLASSES + 1) {
                let best = row
                    .iter()
                    .enumerate()
                    .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
                preds.push(best);
            }
        }
        Ok((feats, preds))
    }

    /// Penultimate features, one row per image.
    pub fn features(&self, images: &[Tensor]) -> Result<Tensor> {
        let (f, _) = self.run(images)?;
        if f.is_empty() {
            return invalid("no images to featurize");
        }
        Tensor::new(&[f.len(), FEATURE_DIM], f.concat())
    }

    /// Arg-max labels; `REJECT` for non-creatures.
    pub fn predict(&self, images: &[Tensor]) -> Result<Vec<usize>> {
        Ok(self.run(images)?.1)
    }

    pub fn features_and_predictions(&self, images: &[Tensor]) -> Result<(Tensor, Vec<usize>)> {
        let (f, p) = self.run(images)?;
        if f.is_empty() {
            return invalid("no images to classify");
        }
        Ok((Tensor::new(&[f.len(), FEATURE_DIM], f.concat())?, p))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            lr: 2e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct ClassifierReport {
    pub epoch_losses: Vec<f64>,
    /// Accuracy on held-out creatures.
    pub heldout_accuracy: f64,
    /// Fraction of held-out skeletons assigned to the reject class.
    pub reject_rate: f64,
}

/// Labelled images for the classifier.
pub struct LabelledSet<'a> {
    pub creatures: &'a [Tensor],
    pub classes: &'a [usize],
    pub skeletons: &'a [Tensor],
}

pub fn train_classifier(
    train: &LabelledSet,
    heldout: &LabelledSet,
    tc: &ClassifierTrainConfig,
) -> Result<(Classifier, ClassifierReport)> {
    if train.creatures.is_empty() {
        return Err(Error::Dataset("classifier training set is empty".into()));
    }
    if train.creatures.len() != train.classes.len() || heldout.creatures.len() != heldout.classes.len() {
        return invalid("creature images and class labels differ in length");
    }
    if let Some(&bad) = train.classes.iter().find(|&&c| c >= NUM_CLASSES) {
        return invalid(format!("class label {bad} outside 0..{NUM_CLASSES}"));
    }
    let mut images: Vec<Tensor> = train.creatures.to_vec();
    images.extend(train.skeletons.iter().cloned());
    let mut labels: Vec<usize> = train.classes.to_vec();
    labels.extend(std::iter::repeat(REJECT).take(train.skeletons.len()));

    let mut clf = Classifier::new(tc.seed);
    let mut state = AdamState::for_store(&clf.store);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0xc1a5);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let total = images.len().div_ceil(tc.batch_size) * tc.epochs;
    let mut report = ClassifierReport::default();
    let mut step = 0;
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let x = gather_batch(&images, chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::<f32>::new();
            let p = tape.bind(&clf.store);
            let xv = tape.constant(x);
            let (_, logits) = clf.forward_on(&mut tape, &p, xv)?;
            let loss = tape.cross_entropy(logits, &y)?;
            epoch_loss += tape.value(loss).data()[0] as f64 * chunk.len() as f64;
            let grads = tape.backward(loss)?.for_params(&tape, &p);
            let adam = AdamConfig {
                lr: cosine_lr(tc.lr, step, total, 0.05),
                ..AdamConfig::default()
            };
            adam_update_store(&mut clf.store, &grads, &mut state, &adam)?;
            step += 1;
        }
        let avg = epoch_loss / images.len() as f64;
        info!("classifier epoch {epoch}: cross-entropy {avg:.5}");
        report.epoch_losses.push(avg);
    }
    clf.store.set(clf.trained, Tensor::full(&[1], tc.epochs.max(1) as f32))?;
    if !heldout.creatures.is_empty() {
        let preds = clf.predict(heldout.creatures)?;
        report.heldout_accuracy = top1_scores(&preds, heldout.classes)?.1;
    }
    if !heldout.skeletons.is_empty() {
        let preds = clf.predict(heldout.skeletons)?;
        report.reject_rate = preds.iter().filter(|&&p| p == REJECT).count() as f64 / preds.len() as f64;
    }
    info!(
        "classifier held-out accuracy {:.4}, skeleton reject rate {:.4}",
        report.heldout_accuracy, report.reject_rate
    );
    Ok((clf, report))
}

/// `(all_at1, class_at1)`: the fraction predicted as any creature class and
/// the fraction predicted as exactly the true class.
pub fn top1_scores(predictions: &[usize], truth: &[usize]) -> Result<(f64, f64)> {
    if predictions.len() != truth.len() {
        return invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truth.len()
        ));
    }
    if predictions.is_empty() {
        return invalid("top-1 scores of an empty set");
    }
    let n = predictions.len() as f64;
    let any = predictions.iter().filter(|&&p| p != REJECT).count() as f64;
    let exact = predictions
        .iter()
        .zip(truth)
        .filter(|(&p, &t)| p == t && p != REJECT)
        .count() as f64;
    Ok((any / n, exact / n))
}

fn to_matrix(x: &Tensor) -> Result<DMatrix<f64>> {
    let s = x.shape();
    if s.len() != 2 {
        return invalid(format!("features must be [n, d], got {s:?}"));
    }
    Ok(DMatrix::from_row_iterator(s[0], s[1], x.data().iter().map(|&v| v as f64)))
}

fn mean_and_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let mu = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n as f64));
    let mut centred = x.clone();
    for mut row in centred.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centred.transpose() * &centred / (n.max(2) - 1) as f64;
    (mu, cov)
}

/// Symmetric PSD square root, negative eigenvalues clamped to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// Frechet distance between Gaussians fitted to two feature sets, on 64-bit
/// matrices `[n, d]`.
pub fn fid_f64(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::ShapeMismatch {
            op: "fid",
            left: vec![a.nrows(), a.ncols()],
            right: vec![b.nrows(), b.ncols()],
        });
    }
    if a.nrows() < 2 || b.nrows() < 2 {
        return invalid("fid needs at least two samples per set");
    }
    let d = a.ncols();
    if a.nrows() <= d || b.nrows() <= d {
        warn!("fid with {} and {} samples in {d} dimensions: covariances are singular", a.nrows(), b.nrows());
    }
    let (mu_a, cov_a) = mean_and_cov(a);
    let (mu_b, cov_b) = mean_and_cov(b);
    let root_a = psd_sqrt(&cov_a);
    let inner = &root_a * &cov_b * &root_a;
    let sym = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(sym).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let mean_term = (mu_a - mu_b).norm_squared();
    Ok((mean_term + cov_a.trace() + cov_b.trace() - 2.0 * cross).max(0.0))
}

pub fn fid(a: &Tensor, b: &Tensor) -> Result<f64> {
    fid_f64(&to_matrix(a)?, &to_matrix(b)?)
}

/// Unbiased squared MMD with kernel `(x.y / d + 1)^3`.
pub fn kid_f64(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::ShapeMismatch {
            op: "kid",
            left: vec![a.nrows(), a.ncols()],
            right: vec![b.nrows(), b.ncols()],
        });
    }
    let (n, m) = (a.nrows(), b.nrows());
    if n < 2 || m < 2 {
        return invalid("kid needs at least two samples per set");
    }
    let d = a.ncols() as f64;
    let kernel = |g: DMatrix<f64>| g.map(|v| (v / d + 1.0).powi(3));
    let kaa = kernel(a * a.transpose());
    let kbb = kernel(b * b.transpose());
    let kab = kernel(a * b.transpose());
    let off_diag = |k: &DMatrix<f64>| k.sum() - k.trace();
    let (nf, mf) = (n as f64, m as f64);
    Ok(off_diag(&kaa) / (nf * (nf - 1.0)) + off_diag(&kbb) / (mf * (mf - 1.0)) - 2.0 * kab.sum() / (nf * mf))
}

pub fn kid(a: &Tensor, b: &Tensor) -> Result<f64> {
    kid_f64(&to_matrix(a)?, &to_matrix(b)?)
}

/// Fraction of outputs whose facing direction matches the source; images
/// with no detectable subject count as disagreement.
pub fn orientation_agreement(sources: &[Tensor], outputs: &[Tensor]) -> Result<f64> {
    if sources.len() != outputs.len() || sources.is_empty() {
        return invalid("orientation agreement needs equally many, non-zero, sources and outputs");
    }
    let agree = sources
        .iter()
        .zip(outputs)
        .filter(|(s, o)| matches!((orientation_of(s), orientation_of(o)), (Ok(a), Ok(b)) if a == b))
        .count();
    Ok(agree as f64 / sources.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fid: f64,
    pub kid: f64,
    pub all_at1: f64,
    pub class_at1: f64,
    pub orient_agree: f64,
}

/// Scores translated images against a reference set of real target images.
pub fn evaluate(
    clf: &Classifier,
    outputs: &[Tensor],
    targets: &[usize],
    sources: &[Tensor],
    reference: &Tensor,
) -> Result<MetricsReport> {
    if !clf.is_trained() {
        return Err(Error::Untrained("classifier"));
    }
    let (feats, preds) = clf.features_and_predictions(outputs)?;
    let (all_at1, class_at1) = top1_scores(&preds, targets)?;
    Ok(MetricsReport {
        fid: fid(&feats, reference)?,
        kid: kid(&feats, reference)?,
        all_at1,
        class_at1,
        orient_agree: orientation_agreement(sources, outputs)?,
    })
}

/// Cross-entropy on a fixed batch, for gradient checking.
pub struct ClassifierFragment<'a> {
    pub classifier: &'a Classifier,
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Fragment for ClassifierFragment<'_> {
    fn params(&self) -> &ParamStore {
        &self.classifier.store
    }

    fn loss<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound) -> Result<Var> {
        let x = tape.constant(self.images.cast());
        let (_, logits) = self.classifier.forward_on(tape, p, x)?;
        tape.cross_entropy(logits, &self.labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn printed_class_score() {
        let truth: Vec<usize> = (0..121).map(|i| i % NUM_CLASSES).collect();
        let mut preds = truth.clone();
        for p in preds.iter_mut().skip(112) {
            *p = REJECT;
        }
        let (all, class) = top1_scores(&preds, &truth).unwrap();
        assert_eq!(format!("{:.2}", class * 100.0), "92.56");
        assert_eq!(all, class);
    }

    #[test]
    fn top1_edge_cases() {
        let truth = vec![0, 1, 2];
        assert_eq!(top1_scores(&[REJECT; 3], &truth).unwrap(), (0.0, 0.0));
        assert_eq!(top1_scores(&truth, &truth).unwrap(), (1.0, 1.0));
        assert_eq!(top1_scores(&[1, 1, 1], &truth).unwrap(), (1.0, 1.0 / 3.0));
        assert!(top1_scores(&[0], &truth).is_err());
    }

    #[test]
    fn fid_of_identical_sets_is_zero() {
        let a = Tensor::from_fn(&[50, 4], |i| ((i * 13 % 17) as f32).sin());
        assert!(fid(&a, &a).unwrap().abs() < 1e-6);
        assert!(fid(&a, &Tensor::zeros(&[50, 3])).is_err());
    }

    #[test]
    fn kid_two_point_hand_calculation() {
        // A = {0, 0}, B = {r, r} in one dimension: k(0,0)=1, k(r,r)=(r^2+1)^3, k(0,r)=1
        let r = 2.0;
        let a = Tensor::zeros(&[2, 1]);
        let b = Tensor::full(&[2, 1], r);
        let want = 1.0 + (r as f64 * r as f64 + 1.0).powi(3) - 2.0;
        assert!((kid(&a, &b).unwrap() - want).abs() < 1e-9);
        assert!(kid(&Tensor::zeros(&[1, 1]), &b).is_err());
    }

    #[test]
    fn classifier_shapes() {
        let c = Classifier::new(1);
        let imgs = vec![Tensor::zeros(&[3, 32, 32]); 3];
        let (f, p) = c.features_and_predictions(&imgs).unwrap();
        assert_eq!(f.shape(), &[3, FEATURE_DIM]);
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|&x| x <= REJECT));
        assert!(!c.is_trained());
    }
}
