use serde::Serialize;

use crate::error::{Error, Result};
use crate::mask::matrix_to_csv;
use crate::model::{Seq2SeqModel, SublayerKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Tolerance on the row sums of a stored head-averaged matrix.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Identifies one encoder sublayer across sentences.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SublayerSlot {
    /// One-based block index.
    pub layer: usize,
    pub kind: SublayerKind,
    /// Zero-based rank among sublayers of the same kind in the block.
    pub occurrence: usize,
    /// Whether the kind occurs more than once per block.
    pub repeated: bool,
}

impl SublayerSlot {
    /// `SAN`, or `SAN.2` for the second SAN of a block that has two.
    pub fn label(&self) -> String {
        if self.repeated {
            format!("{}.{}", self.kind, self.occurrence + 1)
        } else {
            self.kind.to_string()
        }
    }
}

/// Attention of one sentence in one encoder sublayer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnEntry {
    pub sentence: usize,
    pub slot: SublayerSlot,
    /// Mean over heads, `T×T`.
    pub mean: Tensor<f64>,
    pub heads: Vec<Tensor<f64>>,
}

/// Encoder attention captured over a dataset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttnRecord {
    pub dataset: String,
    /// Real-token length of every sentence.
    pub lengths: Vec<usize>,
    pub entries: Vec<AttnEntry>,
}

/// Element-wise mean of equally shaped head matrices.
pub fn head_average(heads: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    let first = heads
        .first()
        .ok_or_else(|| Error::Contract("no heads to average".into()))?;
    let mut acc = vec![0.0; first.numel()];
    for h in heads {
        if h.shape() != first.shape() {
            return Err(Error::shape("head_average", first.shape(), h.shape()));
        }
        acc.iter_mut().zip(h.data()).for_each(|(a, &v)| *a += v);
    }
    let n = heads.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Tensor::new(first.shape().to_vec(), acc)
}

impl AttnRecord {
    pub fn new(dataset: impl Into<String>) -> Self {
        AttnRecord {
            dataset: dataset.into(),
            ..Default::default()
        }
    }

    /// Adds one sentence worth of head matrices. Every matrix must be `T×T`
    /// with rows summing to one.
    pub fn push_sentence(&mut self, sublayers: Vec<(SublayerSlot, Vec<Tensor<f64>>)>) -> Result<()> {
        let sentence = self.lengths.len();
        let mut len = None;
        for (slot, heads) in sublayers {
            let mean = head_average(&heads)?;
            let (r, c) = mean.expect_matrix("attention record")?;
            if r != c || len.is_some_and(|l| l != r) {
                return Err(Error::shape("attention record", &[len.unwrap_or(r), len.unwrap_or(r)], mean.shape()));
            }
            len = Some(r);
            for i in 0..r {
                let s: f64 = mean.row(i).iter().sum();
                if (s - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::Contract(format!(
                        "sentence {sentence} {} row {i} sums to {s}",
                        slot.label()
                    )));
                }
            }
            self.entries.push(AttnEntry {
                sentence,
                slot,
                mean,
                heads,
            });
        }
        let len = len.ok_or_else(|| Error::Contract("sentence without attention matrices".into()))?;
        self.lengths.push(len);
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn num_layers(&self) -> usize {
        self.entries.iter().map(|e| e.slot.layer).max().unwrap_or(0)
    }

    /// Distinct sublayer labels in block order, FFN included.
    pub fn labels(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.sentence == 0 && e.slot.layer == 1)
            .map(|e| e.slot.label())
            .collect()
    }

    pub fn matrix(&self, sentence: usize, layer: usize, label: &str) -> Option<&AttnEntry> {
        self.entries
            .iter()
            .find(|e| e.sentence == sentence && e.slot.layer == layer && e.slot.label() == label)
    }

    /// Row-major CSV of the head-averaged matrix.
    pub fn matrix_csv(&self, sentence: usize, layer: usize, label: &str) -> Option<String> {
        self.matrix(sentence, layer, label)
            .map(|e| matrix_to_csv(e.mean.rows(), e.mean.cols(), e.mean.data()))
    }
}

/// Runs the encoder over every sentence and stores its attention.
pub fn capture_attention<S: Scalar>(
    model: &Seq2SeqModel<S>,
    dataset: &[Vec<usize>],
    dataset_id: &str,
) -> Result<AttnRecord> {
    let layout = model.encoder_layout();
    let slot_of = |layer: usize, pos: usize, kind: SublayerKind| {
        let same: Vec<usize> = layout
            .iter()
            .filter(|&&(l, _, k)| l == layer && k == kind)
            .map(|&(_, p, _)| p)
            .collect();
        SublayerSlot {
            layer: layer + 1,
            kind,
            occurrence: same.iter().position(|&p| p == pos).unwrap_or(0),
            repeated: same.len() > 1,
        }
    };
    let mut record = AttnRecord::new(dataset_id);
    for src in dataset {
        let sublayers = model
            .encoder_attention(src)?
            .into_iter()
            .map(|c| {
                let heads = c.heads.iter().map(Tensor::cast::<f64>).collect();
                (slot_of(c.layer, c.position, c.kind), heads)
            })
            .collect();
        record.push_sentence(sublayers)?;
    }
    Ok(record)
}

/// Average attention mass inside a window of half-width `w` around each
/// query: `(1/|D|) Σ_i (1/T_i) Σ_j Σ_{|k−j|≤w} s̄_i[j,k]`.
pub fn locality_statistic(record: &AttnRecord, w: usize, layer: usize, label: &str) -> Result<f64> {
    if record.is_empty() {
        return Err(Error::Contract("locality statistic of an empty record".into()));
    }
    let mut total = 0.0;
    for (i, &t) in record.lengths.iter().enumerate() {
        let e = record.matrix(i, layer, label).ok_or_else(|| {
            Error::Contract(format!("no {label} sublayer at layer {layer} for sentence {i}"))
        })?;
        let mut inside = 0.0;
        for j in 0..t {
            let lo = j.saturating_sub(w);
            let hi = (j + w).min(t - 1);
            inside += e.mean.row(j)[lo..=hi].iter().sum::<f64>();
        }
        total += inside / t as f64;
    }
    Ok(total / record.lengths.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LocalityCell {
    pub kind: String,
    pub w: usize,
    pub layer: usize,
    /// In `[0, 1]`.
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LocalityReport {
    pub dataset: String,
    pub dataset_size: usize,
    pub cells: Vec<LocalityCell>,
}

impl LocalityReport {
    /// Every attention sublayer (FFN excluded) at every window and layer.
    /// `layers` are one-based; `None` selects all of them.
    pub fn compute(record: &AttnRecord, windows: &[usize], layers: Option<&[usize]>) -> Result<Self> {
        if record.is_empty() {
            return Err(Error::Contract("locality report of an empty record".into()));
        }
        let all: Vec<usize> = (1..=record.num_layers()).collect();
        let layers = layers.unwrap_or(&all);
        if let Some(&bad) = layers.iter().find(|&&l| l == 0 || l > all.len()) {
            return Err(Error::Config(format!("layer {bad} outside 1..={}", all.len())));
        }
        let labels: Vec<String> = record
            .labels()
            .into_iter()
            .filter(|l| !l.starts_with(SublayerKind::Ffn.label()))
            .collect();
        let mut cells = Vec::new();
        for label in &labels {
            for &w in windows {
                for &layer in layers {
                    cells.push(LocalityCell {
                        kind: label.clone(),
                        w,
                        layer,
                        value: locality_statistic(record, w, layer, label)?,
                    });
                }
            }
        }
        Ok(LocalityReport {
            dataset: record.dataset.clone(),
            dataset_size: record.lengths.len(),
            cells,
        })
    }

    pub fn get(&self, kind: &str, w: usize, layer: usize) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.kind == kind && c.w == w && c.layer == layer)
            .map(|c| c.value)
    }

    /// Columns `kind,w,layer,value_percent`; percentages carry two decimals.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,w,layer,value_percent\n");
        for c in &self.cells {
            s.push_str(&format!("{},{},{},{:.2}\n", c.kind, c.w, c.layer, c.value * 100.0));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slot(kind: SublayerKind) -> SublayerSlot {
        SublayerSlot {
            layer: 1,
            kind,
            occurrence: 0,
            repeated: false,
        }
    }

    fn record_of(mats: Vec<Tensor<f64>>, kind: SublayerKind) -> AttnRecord {
        let mut r = AttnRecord::new("t");
        for m in mats {
            r.push_sentence(vec![(slot(kind), vec![m])]).unwrap();
        }
        r
    }

    #[test]
    fn identity_attention_is_fully_local() {
        let r = record_of(vec![Tensor::identity(5), Tensor::identity(3)], SublayerKind::San);
        for w in 0..6 {
            assert_eq!(locality_statistic(&r, w, 1, "SAN").unwrap(), 1.0);
        }
    }

    #[test]
    fn uniform_attention_hand_count() {
        let r = record_of(vec![Tensor::full(&[5, 5], 0.2)], SublayerKind::San);
        // window sizes per position 2,3,3,3,2
        let v = locality_statistic(&r, 1, 1, "SAN").unwrap();
        assert!((v - 0.52).abs() < 1e-15, "{v}");
        assert!((locality_statistic(&r, 4, 1, "SAN").unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn two_heads_average_elementwise() {
        let a = Tensor::from_rows(&[[1.0, 0.0], [0.5, 0.5]]).unwrap();
        let b = Tensor::from_rows(&[[0.0, 1.0], [0.5, 0.5]]).unwrap();
        let mut r = AttnRecord::new("t");
        r.push_sentence(vec![(slot(SublayerKind::Dman), vec![a.clone(), b])]).unwrap();
        assert_eq!(r.entries[0].mean.data(), &[0.5, 0.5, 0.5, 0.5]);
        let single = record_of(vec![a.clone()], SublayerKind::Dman);
        assert_eq!(single.entries[0].mean, a);
    }

    #[test]
    fn rejects_bad_records() {
        assert!(locality_statistic(&AttnRecord::new("e"), 1, 1, "SAN").is_err());
        let mut r = AttnRecord::new("t");
        let not_stochastic = Tensor::full(&[2, 2], 0.4);
        assert!(r.push_sentence(vec![(slot(SublayerKind::San), vec![not_stochastic])]).is_err());
        let r = record_of(vec![Tensor::identity(3)], SublayerKind::San);
        assert!(locality_statistic(&r, 1, 2, "SAN").is_err());
        assert!(locality_statistic(&r, 1, 1, "DMAN").is_err());
    }

    #[test]
    fn report_layout_and_formatting() {
        let mut r = AttnRecord::new("t");
        let u = Tensor::full(&[5, 5], 0.2);
        r.push_sentence(vec![
            (slot(SublayerKind::Dman), vec![Tensor::identity(5)]),
            (slot(SublayerKind::San), vec![u.clone()]),
            (slot(SublayerKind::Ffn), vec![Tensor::identity(5)]),
        ])
        .unwrap();
        let rep = LocalityReport::compute(&r, &[1, 2], None).unwrap();
        assert_eq!(rep.cells.len(), 4);
        let csv = rep.to_csv();
        assert!(csv.starts_with("kind,w,layer,value_percent\nDMAN,1,1,100.00\n"));
        assert!(csv.contains("SAN,1,1,52.00\n"));
        assert!(LocalityReport::compute(&r, &[1], Some(&[2])).is_err());
    }

    #[test]
    fn repeated_kinds_get_suffixes() {
        let s = SublayerSlot {
            layer: 1,
            kind: SublayerKind::San,
            occurrence: 1,
            repeated: true,
        };
        assert_eq!(s.label(), "SAN.2");
    }
}
