//! Self-supervised batches and losses: rotation prediction, jigsaw
//! permutation classification and the Barlow redundancy-reduction objective.

mod permutations;

pub use permutations::{generate_permutation_set, hamming, Perm, PermutationSet, DEFAULT_POOL, IDENTITY};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::{assemble3x3, rotate, tile3x3, AugConfig, Image, Rotation};
use crate::model::images_to_input;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var, STANDARDIZE_EPS};

/// An image together with its sample id.
pub type Tagged<'a> = (&'a str, &'a Image);

/// Where one row of a batch came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub id: String,
    /// Rotation index, permutation index, or 0 for Barlow views.
    pub transform: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Labels(Vec<usize>),
    /// Second augmented view, row-aligned with `inputs`.
    Views(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SslBatch {
    pub inputs: Tensor,
    pub targets: Targets,
    pub provenance: Vec<Provenance>,
}

impl SslBatch {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Labels(l) => Some(l),
            Targets::Views(_) => None,
        }
    }

    pub fn inputs2(&self) -> Option<&Tensor> {
        match &self.targets {
            Targets::Views(t) => Some(t),
            Targets::Labels(_) => None,
        }
    }
}

fn labeled(samples: &[Tagged], images: Vec<Image>, labels: Vec<usize>) -> Result<SslBatch> {
    let provenance = samples
        .iter()
        .zip(&labels)
        .map(|(&(id, _), &l)| Provenance {
            id: id.to_string(),
            transform: l,
        })
        .collect();
    Ok(SslBatch {
        inputs: images_to_input(&images)?,
        targets: Targets::Labels(labels),
        provenance,
    })
}

/// One uniform label in `0..k` per sample.
pub fn sample_labels(n: usize, k: usize, rng: &mut Rng) -> Vec<usize> {
    (0..n).map(|_| rng.index(k)).collect()
}

/// Rotates each image by its label (counter-clockwise quarter turns).
pub fn rotnet_batch_with_labels(samples: &[Tagged], labels: Vec<usize>) -> Result<SslBatch> {
    check_len(samples, &labels)?;
    let images = samples
        .iter()
        .zip(&labels)
        .map(|(&(_, img), &l)| {
            let rot = Rotation::from_index(l).ok_or(Error::Label { label: l, classes: 4 })?;
            if img.height() != img.width() {
                return Err(Error::Shape {
                    op: "make_rotnet_batch",
                    left: vec![img.height(), img.width()],
                    right: vec![img.width(), img.height()],
                });
            }
            rotate(img, rot)
        })
        .collect::<Result<Vec<_>>>()?;
    labeled(samples, images, labels)
}

pub fn make_rotnet_batch(samples: &[Tagged], rng: &mut Rng) -> Result<SslBatch> {
    let labels = sample_labels(samples.len(), 4, rng);
    rotnet_batch_with_labels(samples, labels)
}

/// Reassembles each image's 3×3 tiles in the order given by its label.
pub fn jigsaw_batch_with_labels(samples: &[Tagged], perms: &PermutationSet, labels: Vec<usize>) -> Result<SslBatch> {
    check_len(samples, &labels)?;
    let images = samples
        .iter()
        .zip(&labels)
        .map(|(&(_, img), &l)| {
            let p = perms.get(l).ok_or(Error::Label {
                label: l,
                classes: perms.len(),
            })?;
            let order: Vec<usize> = p.iter().map(|&v| v as usize).collect();
            assemble3x3(&tile3x3(img)?, &order)
        })
        .collect::<Result<Vec<_>>>()?;
    labeled(samples, images, labels)
}

pub fn make_jigsaw_batch(samples: &[Tagged], perms: &PermutationSet, rng: &mut Rng) -> Result<SslBatch> {
    let labels = sample_labels(samples.len(), perms.len(), rng);
    jigsaw_batch_with_labels(samples, perms, labels)
}

/// Two independently augmented views per image. Sample `i` draws view A
/// from `rng.fork(2i)` and view B from `rng.fork(2i + 1)`.
pub fn make_barlow_batch(samples: &[Tagged], aug: &AugConfig, rng: &Rng) -> Result<SslBatch> {
    if samples.len() < 2 {
        return Err(Error::DegenerateBatch {
            op: "make_barlow_batch",
            rows: samples.len(),
        });
    }
    let views = samples
        .par_iter()
        .enumerate()
        .map(|(i, &(_, img))| {
            let a = aug.apply(img, &mut rng.fork(2 * i as u64))?;
            let b = aug.apply(img, &mut rng.fork(2 * i as u64 + 1))?;
            Ok((a, b))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SslBatch {
        inputs: images_to_input(views.iter().map(|(a, _)| a))?,
        targets: Targets::Views(images_to_input(views.iter().map(|(_, b)| b))?),
        provenance: samples
            .iter()
            .map(|&(id, _)| Provenance {
                id: id.to_string(),
                transform: 0,
            })
            .collect(),
    })
}

fn check_len(samples: &[Tagged], labels: &[usize]) -> Result<()> {
    if samples.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} samples but {} labels",
            samples.len(),
            labels.len()
        )));
    }
    if samples.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    Ok(())
}

/// `Σ_j (1 − C_jj)² + λ Σ_{j≠k} C_jk²` where `C` is the cross-correlation of
/// the column-standardized embeddings.
pub fn barlow_loss(tape: &mut Tape, f1: Var, f2: Var, lambda: f64) -> Result<Var> {
    let (s1, s2) = (tape.shape(f1).to_vec(), tape.shape(f2).to_vec());
    if s1 != s2 || s1.len() != 2 {
        return Err(Error::Shape {
            op: "barlow_loss",
            left: s1,
            right: s2,
        });
    }
    let (n, m) = (s1[0], s1[1]);
    if n < 2 {
        return Err(Error::DegenerateBatch {
            op: "barlow_loss",
            rows: n,
        });
    }
    let z1 = tape.standardize_columns(f1, STANDARDIZE_EPS)?;
    let z2 = tape.standardize_columns(f2, STANDARDIZE_EPS)?;
    let z1t = tape.transpose(z1)?;
    let c = tape.matmul(z1t, z2)?;
    let c = tape.scale(c, 1.0 / n as f64);
    let mut eye = vec![0.0; m * m];
    let mut weights = vec![lambda; m * m];
    for j in 0..m {
        eye[j * m + j] = 1.0;
        weights[j * m + j] = 1.0;
    }
    let eye = tape.constant(&Tensor::matrix(m, m, eye)?);
    let weights = tape.constant(&Tensor::matrix(m, m, weights)?);
    let d = tape.sub(c, eye)?;
    let d2 = tape.mul(d, d)?;
    let weighted = tape.mul(d2, weights)?;
    Ok(tape.sum(weighted))
}

/// The two Barlow terms evaluated without a tape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BarlowTerms {
    /// `Σ_j (1 − C_jj)²`
    pub invariance: f64,
    /// `Σ_{j≠k} C_jk²`, unweighted.
    pub redundancy: f64,
}

impl BarlowTerms {
    pub fn loss(&self, lambda: f64) -> f64 {
        self.invariance + lambda * self.redundancy
    }
}

/// Cross-correlation matrix `C` (m × m, row-major) of two embeddings.
pub fn cross_correlation(f1: &Tensor, f2: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let a = tape.constant(f1);
    let b = tape.constant(f2);
    if tape.shape(a) != tape.shape(b) || f1.shape().len() != 2 {
        return Err(Error::Shape {
            op: "cross_correlation",
            left: f1.shape().to_vec(),
            right: f2.shape().to_vec(),
        });
    }
    let n = f1.rows() as f64;
    let z1 = tape.standardize_columns(a, STANDARDIZE_EPS)?;
    let z2 = tape.standardize_columns(b, STANDARDIZE_EPS)?;
    let z1t = tape.transpose(z1)?;
    let c = tape.matmul(z1t, z2)?;
    let c = tape.scale(c, 1.0 / n);
    Ok(tape.value(c).to_vec())
}

pub fn barlow_terms(f1: &Tensor, f2: &Tensor) -> Result<BarlowTerms> {
    let c = cross_correlation(f1, f2)?;
    let m = f1.cols();
    let mut terms = BarlowTerms {
        invariance: 0.0,
        redundancy: 0.0,
    };
    for j in 0..m {
        for k in 0..m {
            let v = c[j * m + k];
            if j == k {
                terms.invariance += (1.0 - v) * (1.0 - v);
            } else {
                terms.redundancy += v * v;
            }
        }
    }
    Ok(terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::invert_permutation;
    use crate::tensor::grad_check_many;

    fn image(seed: u64, size: usize) -> Image {
        let mut rng = Rng::new(seed);
        Image::from_fn(size, size, |_, _| [rng.uniform(), rng.uniform(), rng.uniform()])
    }

    fn tagged(images: &[Image]) -> Vec<Tagged<'_>> {
        images.iter().map(|i| ("x", i)).collect()
    }

    #[test]
    fn rotnet_forced_labels() {
        let imgs = vec![image(1, 6), image(2, 6)];
        let b = rotnet_batch_with_labels(&tagged(&imgs), vec![0, 0]).unwrap();
        assert!(b.inputs.bit_eq(&images_to_input(&imgs).unwrap()));
        assert_eq!(b.labels(), Some(&[0, 0][..]));

        let b = rotnet_batch_with_labels(&tagged(&imgs[..1]), vec![2]).unwrap();
        let want = rotate(&imgs[0], Rotation::R180).unwrap();
        assert!(b.inputs.bit_eq(&images_to_input([&want]).unwrap()));
        assert_eq!(b.provenance[0].transform, 2);
    }

    #[test]
    fn rotnet_rejects_non_square() {
        let img = Image::filled(4, 6, 0.5).unwrap();
        let err = make_rotnet_batch(&[("a", &img)], &mut Rng::new(0)).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn jigsaw_identity_and_swap() {
        let perms = PermutationSet::from_perms(vec![IDENTITY, [1, 0, 2, 3, 4, 5, 6, 7, 8]]).unwrap();
        let img = image(3, 9);
        let b = jigsaw_batch_with_labels(&[("a", &img)], &perms, vec![0]).unwrap();
        assert!(b.inputs.bit_eq(&images_to_input([&img]).unwrap()));

        let b = jigsaw_batch_with_labels(&[("a", &img)], &perms, vec![1]).unwrap();
        let out = b.inputs.row(0);
        // pixel oracle: tile columns 0..3 and 3..6 of the top band are swapped
        for y in 0..9 {
            for x in 0..9 {
                let src_x = if y < 3 && x < 3 {
                    x + 3
                } else if y < 3 && x < 6 {
                    x - 3
                } else {
                    x
                };
                let want = img.pixel(y, src_x);
                for c in 0..3 {
                    assert_eq!(out[(y * 9 + x) * 3 + c], 2.0 * want[c] - 1.0);
                }
            }
        }
        assert_eq!(b.labels(), Some(&[1][..]));
    }

    #[test]
    fn jigsaw_rejects_indivisible() {
        let perms = generate_permutation_set(4, 50, 0).unwrap();
        let img = Image::filled(8, 8, 0.5).unwrap();
        assert!(matches!(
            make_jigsaw_batch(&[("a", &img)], &perms, &mut Rng::new(0)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn pretext_transforms_invert() {
        let perms = generate_permutation_set(31, 2000, 0).unwrap();
        let imgs: Vec<Image> = (0..8).map(|s| image(s, 9)).collect();
        let mut rng = Rng::new(5);
        let labels = sample_labels(imgs.len(), 4, &mut rng);
        for (img, &l) in imgs.iter().zip(&labels) {
            let r = Rotation::from_index(l).unwrap();
            let back = rotate(&rotate(img, r).unwrap(), r.inverse()).unwrap();
            assert!(back.bit_eq(img));
        }
        let labels = sample_labels(imgs.len(), perms.len(), &mut rng);
        for (img, &l) in imgs.iter().zip(&labels) {
            let order: Vec<usize> = perms.get(l).unwrap().iter().map(|&v| v as usize).collect();
            let shuffled = assemble3x3(&tile3x3(img).unwrap(), &order).unwrap();
            let back = assemble3x3(&tile3x3(&shuffled).unwrap(), &invert_permutation(&order)).unwrap();
            assert!(back.bit_eq(img));
        }
    }

    fn within_three_sigma(counts: &[usize], n: usize) {
        let k = counts.len() as f64;
        let p = 1.0 / k;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for &c in counts {
            assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn label_histograms_are_uniform() {
        let mut rng = Rng::new(17);
        let n = 10_000;
        for k in [4, 31] {
            let mut counts = vec![0; k];
            for l in sample_labels(n, k, &mut rng) {
                counts[l] += 1;
            }
            within_three_sigma(&counts, n);
        }
    }

    #[test]
    fn barlow_identity_pipeline_copies_inputs() {
        let imgs = vec![image(1, 6), image(2, 6)];
        let b = make_barlow_batch(&tagged(&imgs), &AugConfig::identity(), &Rng::new(3)).unwrap();
        let orig = images_to_input(&imgs).unwrap();
        assert!(b.inputs.bit_eq(&orig));
        assert!(b.inputs2().unwrap().bit_eq(&orig));
    }

    #[test]
    fn barlow_views_are_deterministic_and_distinct() {
        let imgs = vec![image(1, 12), image(2, 12), image(3, 12)];
        let a = make_barlow_batch(&tagged(&imgs), &AugConfig::default(), &Rng::new(3)).unwrap();
        let b = make_barlow_batch(&tagged(&imgs), &AugConfig::default(), &Rng::new(3)).unwrap();
        assert!(a.inputs.bit_eq(&b.inputs) && a.inputs2().unwrap().bit_eq(b.inputs2().unwrap()));

        let mut differ = 0;
        for t in 0..100 {
            let b = make_barlow_batch(&tagged(&imgs[..2]), &AugConfig::default(), &Rng::new(t)).unwrap();
            let d = b
                .inputs
                .data()
                .iter()
                .zip(b.inputs2().unwrap().data())
                .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            if d > 0.0 {
                differ += 1;
            }
        }
        assert!(differ >= 99);
    }

    #[test]
    fn barlow_rejects_single_sample() {
        let img = image(1, 6);
        assert!(matches!(
            make_barlow_batch(&[("a", &img)], &AugConfig::default(), &Rng::new(0)),
            Err(Error::DegenerateBatch { rows: 1, .. })
        ));
        let mut tape = Tape::new();
        let f = tape.leaf(&Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        assert!(matches!(barlow_loss(&mut tape, f, f, 0.005), Err(Error::DegenerateBatch { .. })));
    }

    fn loss_value(f1: &Tensor, f2: &Tensor, lambda: f64) -> f64 {
        let mut tape = Tape::new();
        let a = tape.leaf(f1);
        let b = tape.leaf(f2);
        let l = barlow_loss(&mut tape, a, b, lambda).unwrap();
        tape.value(l)[0]
    }

    #[test]
    fn anticorrelated_columns_give_two_lambda() {
        let f = Tensor::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        let lambda = 0.005;
        // std = 1, so C_jk = (1/2) Σ_i f_ij f_ik / (1 + eps)^2
        let s = 1.0 / (1.0 + STANDARDIZE_EPS);
        let want = 2.0 * (1.0 - s * s).powi(2) + lambda * 2.0 * (s * s).powi(2);
        let got = loss_value(&f, &f, lambda);
        assert!((got - want).abs() < 1e-15);
        // eps shrinks each off-diagonal entry by ~2e-5, so the loss sits ~4e-7 below 2λ
        assert!((got - 2.0 * lambda).abs() < 1e-6);
    }

    #[test]
    fn barlow_gradients_match_finite_differences() {
        let mut rng = Rng::new(8);
        let mut point = || Tensor::matrix(5, 3, (0..15).map(|_| rng.range(-2.0, 2.0)).collect()).unwrap();
        let points = [point(), point()];
        let err = grad_check_many(
            |tape, v| barlow_loss(tape, v[0], v[1], 0.005),
            &points,
            1e-6,
        );
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn taped_loss_matches_terms() {
        let mut rng = Rng::new(2);
        let f1 = Tensor::matrix(6, 4, (0..24).map(|_| rng.range(-1.0, 1.0)).collect()).unwrap();
        let f2 = Tensor::matrix(6, 4, (0..24).map(|_| rng.range(-1.0, 1.0)).collect()).unwrap();
        let t = barlow_terms(&f1, &f2).unwrap();
        assert!((t.loss(0.005) - loss_value(&f1, &f2, 0.005)).abs() < 1e-12);
    }
}
