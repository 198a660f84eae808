//! Pseudo labels for the unlabeled target set, produced by ensembling
//! the source models' predictions: per sample, the K source probability
//! rows are averaged with uniform weights and the argmax class is kept
//! when its averaged probability clears the confidence threshold.

use std::io::Write;

use ndarray::Array2;

use crate::backbone::{classify, ModelParams, PatchBatch};
use crate::error::{CoreError, Result};
use crate::scalar::Scalar;

/// One accepted pseudo label.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelEntry {
    pub sample_index: usize,
    pub class_id: usize,
    /// Averaged ensemble probability of the assigned class.
    pub confidence: f64,
}

/// Accepted pseudo labels for a target set.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelSet {
    pub entries: Vec<PseudoLabelEntry>,
    pub threshold: f64,
    /// Fraction of the target set that received a label.
    pub coverage: f64,
}

impl PseudoLabelSet {
    pub fn empty(threshold: f64) -> Self {
        PseudoLabelSet {
            entries: Vec::new(),
            threshold,
            coverage: 0.0,
        }
    }

    /// Class of a sample, if labeled.
    pub fn class_of(&self, sample_index: usize) -> Option<usize> {
        self.entries
            .iter()
            .find(|e| e.sample_index == sample_index)
            .map(|e| e.class_id)
    }

    /// Restrict to the given global sample indices, re-indexing entries
    /// to the positions within `indices` (for per-batch losses).
    pub fn subset_for(&self, indices: &[usize]) -> PseudoLabelSet {
        let mut entries = Vec::new();
        for (row, &global) in indices.iter().enumerate() {
            if let Some(e) = self.entries.iter().find(|e| e.sample_index == global) {
                entries.push(PseudoLabelEntry {
                    sample_index: row,
                    class_id: e.class_id,
                    confidence: e.confidence,
                });
            }
        }
        let coverage = if indices.is_empty() {
            0.0
        } else {
            entries.len() as f64 / indices.len() as f64
        };
        PseudoLabelSet {
            entries,
            threshold: self.threshold,
            coverage,
        }
    }

    /// Audit table: one `index<TAB>class<TAB>confidence` row per entry.
    pub fn write_table(&self, w: &mut dyn Write) -> Result<()> {
        writeln!(w, "sample_index\tclass_id\tconfidence")?;
        for e in &self.entries {
            writeln!(w, "{}\t{}\t{:.6}", e.sample_index, e.class_id, e.confidence)?;
        }
        Ok(())
    }
}

/// Threshold filter over averaged probabilities. Ties at the max resolve
/// toward the lowest class id.
pub(crate) fn threshold_filter(avg: &Array2<f64>, threshold: f64) -> Vec<PseudoLabelEntry> {
    let mut entries = Vec::new();
    for (i, row) in avg.rows().into_iter().enumerate() {
        let mut best = 0usize;
        let mut best_p = row[0];
        for (c, &p) in row.iter().enumerate().skip(1) {
            if p > best_p {
                best = c;
                best_p = p;
            }
        }
        if best_p >= threshold {
            entries.push(PseudoLabelEntry {
                sample_index: i,
                class_id: best,
                confidence: best_p,
            });
        }
    }
    entries
}

/// Ensemble the source models over a target batch set and keep samples
/// whose averaged max probability clears `threshold`.
pub fn ensemble_pseudo_labels<S: Scalar>(
    source_models: &[ModelParams<S>],
    target: &PatchBatch<S>,
    threshold: f64,
) -> Result<PseudoLabelSet> {
    if source_models.is_empty() {
        return Err(CoreError::Input("pseudo labeling needs at least one source model".into()));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CoreError::Config(format!(
            "pseudo-label threshold {threshold} outside [0, 1]"
        )));
    }
    let classes = source_models[0].arch.classes;
    for (k, m) in source_models.iter().enumerate() {
        if m.arch.classes != classes {
            return Err(CoreError::Input(format!(
                "source {k} has {} classes, expected {classes}",
                m.arch.classes
            )));
        }
    }
    let n = target.samples;
    let mut avg = Array2::<f64>::zeros((n, classes));
    let inv_k = 1.0 / source_models.len() as f64;
    for model in source_models {
        let probs = classify(model, target)?;
        for (slot, &p) in avg.iter_mut().zip(probs.iter()) {
            *slot += p.to_f64_lossy() * inv_k;
        }
    }
    let entries = threshold_filter(&avg, threshold);
    let coverage = if n == 0 {
        0.0
    } else {
        entries.len() as f64 / n as f64
    };
    Ok(PseudoLabelSet {
        entries,
        threshold,
        coverage,
    })
}

/// True on epochs where pseudo labels should be regenerated.
pub fn refresh_schedule(epoch: usize, period: usize) -> Result<bool> {
    if period == 0 {
        return Err(CoreError::Config("refresh period must be at least 1".into()));
    }
    Ok(epoch % period == 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn refresh_schedule_examples() {
        assert!(refresh_schedule(0, 1).unwrap());
        assert!(!refresh_schedule(3, 2).unwrap());
        assert!(refresh_schedule(4, 2).unwrap());
        assert!(refresh_schedule(0, 5).unwrap());
        assert!(matches!(refresh_schedule(1, 0), Err(CoreError::Config(_))));
    }

    #[test]
    fn threshold_filter_keeps_confident_and_breaks_ties_low() {
        let avg = array![
            [0.9, 0.05, 0.05],  // confident class 0
            [0.55, 0.25, 0.2],  // below 0.8
            [0.5, 0.5, 0.0],    // tie at 0.5 -> class 0
        ];
        let entries = threshold_filter(&avg, 0.8);
        assert_eq!(entries.len(), 1);
        assert_eq!((entries[0].sample_index, entries[0].class_id), (0, 0));

        let entries = threshold_filter(&avg, 0.5);
        assert_eq!(entries.len(), 3);
        let tie = &entries[2];
        assert_eq!((tie.sample_index, tie.class_id), (2, 0));
        assert_eq!(tie.confidence, 0.5);
    }

    #[test]
    fn raising_threshold_never_raises_coverage() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let n = rng.random_range(1..20);
            let c = rng.random_range(2..6);
            let mut avg = Array2::<f64>::zeros((n, c));
            for i in 0..n {
                let mut total = 0.0;
                let mut raw = vec![0.0; c];
                for item in raw.iter_mut() {
                    *item = rng.random_range(0.0f64..1.0).max(1e-9);
                    total += *item;
                }
                for (j, item) in raw.iter().enumerate() {
                    avg[(i, j)] = item / total;
                }
            }
            let mut last = usize::MAX;
            for t in [0.0, 0.2, 0.4, 0.6, 0.8, 1.0] {
                let count = threshold_filter(&avg, t).len();
                assert!(count <= last, "coverage rose when threshold rose");
                last = count;
            }
        }
    }

    #[test]
    fn subset_reindexes_to_batch_rows() {
        let set = PseudoLabelSet {
            entries: vec![
                PseudoLabelEntry { sample_index: 3, class_id: 1, confidence: 0.9 },
                PseudoLabelEntry { sample_index: 7, class_id: 0, confidence: 0.85 },
            ],
            threshold: 0.8,
            coverage: 0.2,
        };
        let sub = set.subset_for(&[7, 4, 3]);
        assert_eq!(sub.entries.len(), 2);
        assert_eq!((sub.entries[0].sample_index, sub.entries[0].class_id), (0, 0));
        assert_eq!((sub.entries[1].sample_index, sub.entries[1].class_id), (2, 1));
        assert!((sub.coverage - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn table_roundtrip_format() {
        let set = PseudoLabelSet {
            entries: vec![PseudoLabelEntry { sample_index: 0, class_id: 2, confidence: 0.95 }],
            threshold: 0.9,
            coverage: 1.0,
        };
        let mut buf = Vec::new();
        set.write_table(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("sample_index\tclass_id\tconfidence\n"));
        assert!(text.contains("0\t2\t0.950000"));
    }
}
