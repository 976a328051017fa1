//! Measurements: layer-wise weight cosine similarity, the zap-divergence
//! experiment, per-task probe losses and the CSV record sets.

use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{iid_batches, FewShotDataset, View};
use crate::error::{Error, Result};
use crate::nn::{ConvNet, Param, Trainable, LAYERS};
use crate::optim::OptimizerSpec;
use crate::seed::{self, Stream};
use crate::tensor::Tensor;

/// Cosine similarity accumulated in f64. `None` when either vector is zero.
pub fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let (mut ab, mut aa, mut bb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return None;
    }
    Some(ab / (aa.sqrt() * bb.sqrt()))
}

/// Cosine similarity between two models' weights (biases excluded) of one layer.
pub fn layer_cosim(a: &ConvNet, b: &ConvNet, layer: &str) -> Result<f64> {
    let (wa, wb) = (a.layer_weight(layer)?, b.layer_weight(layer)?);
    if wa.shape() != wb.shape() {
        return Err(Error::shape(
            "layer_cosim",
            format!("{layer}: {:?} vs {:?}", wa.shape(), wb.shape()),
        ));
    }
    match cosine(wa.data(), wb.data()) {
        Some(c) => Ok(c),
        None if wa.data().iter().all(|&v| v == 0.0) && wb.data().iter().all(|&v| v == 0.0) => {
            Err(Error::ZeroVectors(layer.to_string()))
        }
        // one side zero: orthogonal by convention
        None => Ok(0.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZapDivConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
    /// Set per replicate by the caller.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for ZapDivConfig {
    fn default() -> Self {
        ZapDivConfig {
            steps: 300,
            batch_size: 16,
            optimizer: OptimizerSpec::adam(1e-3),
            seed: 0,
        }
    }
}

/// Per-layer cosine similarity between the zapped and unzapped copies, one
/// value per step (index 0 = right after the zap, before any update).
#[derive(Debug, Clone, PartialEq)]
pub struct CosimSeries {
    pub layers: Vec<String>,
    /// `values[layer][step]`
    pub values: Vec<Vec<f64>>,
}

impl CosimSeries {
    pub fn steps(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn layer(&self, name: &str) -> Option<&[f64]> {
        self.layers
            .iter()
            .position(|l| l == name)
            .map(|i| &self.values[i][..])
    }
}

/// Trains a copy of `model` with its fc layer resampled (treatment) and an
/// untouched copy (control) on identical batches with fresh optimizers.
pub fn zap_divergence_run(
    model: &ConvNet,
    data: &FewShotDataset,
    train: &View,
    cfg: &ZapDivConfig,
) -> Result<CosimSeries> {
    let mut control = model.clone();
    let mut treated = model.clone();
    treated.zap_full_fc(&mut seed::rng(cfg.seed, Stream::Zap, 0));
    let mut opt_c = cfg.optimizer.build::<f32>(Param::ALL.len());
    let mut opt_t = cfg.optimizer.build::<f32>(Param::ALL.len());

    let mut values = vec![Vec::with_capacity(cfg.steps + 1); LAYERS.len()];
    let record = |values: &mut Vec<Vec<f64>>, c: &ConvNet, t: &ConvNet| -> Result<()> {
        for (i, l) in LAYERS.iter().enumerate() {
            values[i].push(layer_cosim(c, t, l)?);
        }
        Ok(())
    };
    record(&mut values, &control, &treated)?;

    let mut done = 0;
    let mut epoch = 0u32;
    while done < cfg.steps {
        let batches = iid_batches(train, cfg.batch_size, seed::derive(cfg.seed, Stream::DataOrder, epoch))?;
        epoch += 1;
        for batch in batches {
            if done == cfg.steps {
                break;
            }
            let (x, y) = data.batch(&batch)?;
            let (gc, gt) = crate::par::join(
                || control.loss_and_grads(&x, &y, Trainable::All),
                || treated.loss_and_grads(&x, &y, Trainable::All),
            );
            let numerical = |e: Error| match e {
                Error::NonFinite { op, .. } => Error::NumericalAbort {
                    epoch: epoch as usize - 1,
                    step: done,
                    detail: format!("non-finite value in {op}"),
                },
                other => other,
            };
            let (_, gc) = gc.map_err(numerical)?;
            let (_, gt) = gt.map_err(numerical)?;
            opt_c.step(control.params_mut(), &gc)?;
            opt_t.step(treated.params_mut(), &gt)?;
            done += 1;
            record(&mut values, &control, &treated)?;
        }
    }
    Ok(CosimSeries {
        layers: LAYERS.iter().map(|s| s.to_string()).collect(),
        values,
    })
}

/// Mean cross-entropy of each task's examples given logits for them.
/// `labels` index tasks; the result has one entry per task.
pub fn per_task_losses(logits: &Tensor<f32>, labels: &[usize], n_tasks: usize) -> Result<Vec<f64>> {
    let c = logits.shape()[1];
    if labels.len() != logits.shape()[0] {
        return Err(Error::shape("per_task_losses", "label count differs from batch"));
    }
    let mut sum = vec![0f64; n_tasks];
    let mut count = vec![0usize; n_tasks];
    for (row, &y) in logits.data().chunks(c).zip(labels) {
        if y >= n_tasks || y >= c {
            return Err(Error::Invalid(format!("label {y} out of range")));
        }
        let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let lse = m + row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
        sum[y] += lse - row[y] as f64;
        count[y] += 1;
    }
    Ok(sum
        .iter()
        .zip(&count)
        .map(|(s, &n)| if n == 0 { f64::NAN } else { s / n as f64 })
        .collect())
}

/// Per-task mean loss of `model` over a view, one entry per view label.
pub fn per_task_probe(model: &ConvNet, data: &FewShotDataset, view: &View) -> Result<Vec<f64>> {
    let (x, y) = data.batch(&view.samples())?;
    per_task_losses(&model.logits(&x)?, &y, view.n_classes())
}

// ---- record sets -------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZapdivRow {
    pub run_id: String,
    pub replicate: usize,
    pub optimizer: String,
    pub lr: f64,
    pub step: usize,
    pub layer: String,
    pub cosim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PertaskRow {
    pub run_id: String,
    pub replicate: usize,
    pub optimizer: String,
    pub lr: f64,
    pub probe: String,
    pub epoch: usize,
    pub step: usize,
    /// Position of the task in the training order.
    pub task_id: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub run_id: String,
    pub replicate: usize,
    pub phase: String,
    pub epoch: usize,
    pub split: String,
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Zapdiv,
    Pertask,
    Accuracy,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [MetricKind::Zapdiv, MetricKind::Pertask, MetricKind::Accuracy];

    pub fn file_name(self) -> &'static str {
        match self {
            MetricKind::Zapdiv => "zapdiv.csv",
            MetricKind::Pertask => "pertask.csv",
            MetricKind::Accuracy => "accuracy.csv",
        }
    }

    pub fn header(self) -> &'static [&'static str] {
        match self {
            MetricKind::Zapdiv => &["run_id", "replicate", "optimizer", "lr", "step", "layer", "cosim"],
            MetricKind::Pertask => &[
                "run_id", "replicate", "optimizer", "lr", "probe", "epoch", "step", "task_id", "loss",
            ],
            MetricKind::Accuracy => &["run_id", "replicate", "phase", "epoch", "split", "accuracy", "loss"],
        }
    }
}

/// First field of the row appended when a run stops early.
pub const TRUNCATED: &str = "#truncated";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsRecord {
    pub zapdiv: Vec<ZapdivRow>,
    pub pertask: Vec<PertaskRow>,
    pub accuracy: Vec<AccuracyRow>,
}

impl MetricsRecord {
    pub fn extend(&mut self, other: MetricsRecord) {
        self.zapdiv.extend(other.zapdiv);
        self.pertask.extend(other.pertask);
        self.accuracy.extend(other.accuracy);
    }

    pub fn is_empty(&self) -> bool {
        self.zapdiv.is_empty() && self.pertask.is_empty() && self.accuracy.is_empty()
    }

    pub fn len(&self, kind: MetricKind) -> usize {
        match kind {
            MetricKind::Zapdiv => self.zapdiv.len(),
            MetricKind::Pertask => self.pertask.len(),
            MetricKind::Accuracy => self.accuracy.len(),
        }
    }

    /// Appends `series` as zapdiv rows.
    pub fn push_cosim(&mut self, run_id: &str, replicate: usize, opt: &OptimizerSpec, series: &CosimSeries) {
        for s in 0..series.steps() {
            for (l, name) in series.layers.iter().enumerate() {
                self.zapdiv.push(ZapdivRow {
                    run_id: run_id.to_string(),
                    replicate,
                    optimizer: opt.kind.as_str().to_string(),
                    lr: opt.lr,
                    step: s,
                    layer: name.clone(),
                    cosim: series.values[l][s],
                });
            }
        }
    }
}

/// Streams record sets to `<dir>/<kind>.csv`. Headers are written on
/// creation, so a run that records nothing still leaves header-only files.
pub struct CsvSink {
    dir: PathBuf,
    writers: Vec<(MetricKind, csv::Writer<File>, usize)>,
}

impl CsvSink {
    pub fn create(dir: &Path, kinds: &[MetricKind]) -> Result<CsvSink> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut writers = Vec::new();
        for &k in kinds {
            let path = dir.join(k.file_name());
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
            w.write_record(k.header())?;
            w.flush().map_err(|e| Error::io(&path, e))?;
            writers.push((k, w, 0));
        }
        Ok(CsvSink {
            dir: dir.to_path_buf(),
            writers,
        })
    }

    /// Opens existing files for appending; nothing is written.
    pub fn append(dir: &Path, kinds: &[MetricKind]) -> Result<CsvSink> {
        let mut writers = Vec::new();
        for &k in kinds {
            let path = dir.join(k.file_name());
            let file = std::fs::OpenOptions::new()
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            writers.push((k, csv::WriterBuilder::new().has_headers(false).from_writer(file), 0));
        }
        Ok(CsvSink {
            dir: dir.to_path_buf(),
            writers,
        })
    }

    /// Writes the rows of `record` not yet written, then flushes.
    pub fn sync(&mut self, record: &MetricsRecord) -> Result<()> {
        for (kind, w, written) in &mut self.writers {
            match kind {
                MetricKind::Zapdiv => write_from(w, &record.zapdiv, written)?,
                MetricKind::Pertask => write_from(w, &record.pertask, written)?,
                MetricKind::Accuracy => write_from(w, &record.accuracy, written)?,
            }
            let path = self.dir.join(kind.file_name());
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    /// Marks every file as incomplete.
    pub fn mark_truncated(&mut self) -> Result<()> {
        for (kind, w, _) in &mut self.writers {
            let mut row = vec![TRUNCATED];
            row.resize(kind.header().len(), "");
            w.write_record(&row)?;
            let path = self.dir.join(kind.file_name());
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

fn write_from<R: Serialize>(w: &mut csv::Writer<File>, rows: &[R], written: &mut usize) -> Result<()> {
    for r in &rows[*written..] {
        w.serialize(r)?;
    }
    *written = rows.len();
    Ok(())
}

/// Writes all three files for a complete record set.
pub fn write_metrics(record: &MetricsRecord, dir: &Path) -> Result<()> {
    let mut sink = CsvSink::create(dir, &MetricKind::ALL)?;
    sink.sync(record)
}

/// Rows of one metrics file and whether it ends in a truncation marker.
pub fn read_rows<R: DeserializeOwned>(path: &Path) -> Result<(Vec<R>, bool)> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::format(path, format!("{other:?}")),
        })?;
    let headers = rdr.headers()?.clone();
    let mut rows = Vec::new();
    let mut truncated = false;
    for rec in rdr.records() {
        let rec = rec?;
        if rec.get(0) == Some(TRUNCATED) {
            truncated = true;
            continue;
        }
        rows.push(rec.deserialize(Some(&headers))?);
    }
    Ok((rows, truncated))
}

/// Concatenates same-kind CSV files (headers kept once).
pub fn concat_csv(inputs: &[PathBuf], out: &Path, kind: MetricKind) -> Result<()> {
    let mut f = File::create(out).map_err(|e| Error::io(out, e))?;
    writeln!(f, "{}", kind.header().join(",")).map_err(|e| Error::io(out, e))?;
    for p in inputs {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        for line in text.lines().skip(1) {
            writeln!(f, "{line}").map_err(|e| Error::io(out, e))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, split, SplitSpec, SyntheticSpec};
    use crate::nn::ModelConfig;

    fn model(seed: u64) -> ConvNet {
        ConvNet::init(ModelConfig::new(4, (28, 28, 1), 3), seed).unwrap()
    }

    #[test]
    fn cosine_oracles() {
        assert!((cosine(&[1.0, 0.0], &[0.0, 2.0]).unwrap()).abs() < 1e-15);
        assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine(&[1.0, 2.0], &[-1.0, -2.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(cosine(&[0.0, 0.0], &[1.0, 1.0]).is_none());
        // 3-4-5 triangle: (3,4)·(4,3) / 25
        assert!((cosine(&[3.0, 4.0], &[4.0, 3.0]).unwrap() - 24.0 / 25.0).abs() < 1e-12);
    }

    #[test]
    fn layer_cosim_identity_and_errors() {
        let a = model(1);
        for l in LAYERS {
            assert!((layer_cosim(&a, &a, l).unwrap() - 1.0).abs() < 1e-9);
        }
        assert!(matches!(layer_cosim(&a, &a, "conv9"), Err(Error::UnknownLayer(_))));
        let mut z = a.clone();
        z.param_mut(Param::FcWeight).data_mut().iter_mut().for_each(|v| *v = 0.0);
        assert!(matches!(layer_cosim(&z, &z, "fc"), Err(Error::ZeroVectors(_))));
        assert_eq!(layer_cosim(&a, &z, "fc").unwrap(), 0.0);
        // biases are excluded
        let mut b = a.clone();
        b.param_mut(Param::FcBias).data_mut()[0] = 5.0;
        assert!((layer_cosim(&a, &b, "fc").unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn per_task_losses_oracle() {
        // uniform logits over 2 classes give ln 2 for every task
        let l = Tensor::new(vec![3, 2], vec![0.0; 6]).unwrap();
        let v = per_task_losses(&l, &[0, 1, 1], 2).unwrap();
        assert!((v[0] - 2f64.ln()).abs() < 1e-12 && (v[1] - 2f64.ln()).abs() < 1e-12);
        let l = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let v = per_task_losses(&l, &[0], 2).unwrap();
        assert!((v[0] - (1.0 + (-1f64).exp()).ln()).abs() < 1e-7);
        assert!(v[1].is_nan());
    }

    #[test]
    fn zapdiv_starts_orthogonal_and_is_deterministic() {
        let d = make_synthetic(&SyntheticSpec {
            n_classes: 3,
            n_per_class: 20,
            size: 28,
            seed: 4,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let s = split(&d, &SplitSpec::default()).unwrap();
        let m = model(2);
        let cfg = ZapDivConfig {
            steps: 3,
            batch_size: 4,
            optimizer: OptimizerSpec::sgd(0.01),
            seed: 9,
        };
        let a = zap_divergence_run(&m, &d, &s.train, &cfg).unwrap();
        assert_eq!(a.steps(), 4);
        for l in ["conv1", "conv2", "conv3"] {
            assert!((a.layer(l).unwrap()[0] - 1.0).abs() < 1e-9);
        }
        assert!(a.layer("fc").unwrap()[0].abs() < 0.3);
        assert_eq!(a, zap_divergence_run(&m, &d, &s.train, &cfg).unwrap());
    }

    #[test]
    fn csv_roundtrip_headers_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        write_metrics(&MetricsRecord::default(), dir.path()).unwrap();
        for k in MetricKind::ALL {
            let text = std::fs::read_to_string(dir.path().join(k.file_name())).unwrap();
            assert_eq!(text.trim_end(), k.header().join(","));
        }

        let mut rec = MetricsRecord::default();
        rec.zapdiv.push(ZapdivRow {
            run_id: "r".into(),
            replicate: 1,
            optimizer: "adam".into(),
            lr: 1e-3,
            step: 7,
            layer: "conv2".into(),
            cosim: 0.1 + 0.2,
        });
        rec.accuracy.push(AccuracyRow {
            run_id: "r".into(),
            replicate: 0,
            phase: "transfer".into(),
            epoch: 2,
            split: "test".into(),
            accuracy: 1.0 / 3.0,
            loss: std::f32::consts::PI as f64,
        });
        let mut sink = CsvSink::create(dir.path(), &MetricKind::ALL).unwrap();
        sink.sync(&rec).unwrap();
        sink.sync(&rec).unwrap(); // nothing new
        sink.mark_truncated().unwrap();
        let (z, t): (Vec<ZapdivRow>, _) = read_rows(&dir.path().join("zapdiv.csv")).unwrap();
        assert!(t);
        assert_eq!(z, rec.zapdiv);
        let (a, _): (Vec<AccuracyRow>, _) = read_rows(&dir.path().join("accuracy.csv")).unwrap();
        assert_eq!(a, rec.accuracy);
        let (p, t): (Vec<PertaskRow>, _) = read_rows(&dir.path().join("pertask.csv")).unwrap();
        assert!(p.is_empty() && t);
    }
}
