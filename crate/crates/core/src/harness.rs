//! Subcommand drivers: load data, build or load models, run protocols and
//! stream metrics to CSV.

use std::path::{Path, PathBuf};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::data::{split, FewShotDataset, Split, SplitSpec};
use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck, GradcheckReport};
use crate::instrument::{concat_csv, zap_divergence_run, CsvSink, MetricKind, MetricsRecord};
use crate::nn::{ConvNet, ModelConfig};
use crate::optim::OptimizerSpec;
use crate::protocols::{self, accuracy_rows, no_hook, Progress, RunResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Pretrain,
    Transfer,
    Zapdiv,
    Gradcheck,
    Sweep,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Pretrain => "pretrain",
            Command::Transfer => "transfer",
            Command::Zapdiv => "zapdiv",
            Command::Gradcheck => "gradcheck",
            Command::Sweep => "sweep",
        }
    }
}

/// What a run produced.
#[derive(Debug, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub gradcheck: Option<GradcheckReport>,
    /// Human-readable summary lines.
    pub summary: Vec<String>,
}

/// Everything a run needs besides its config.
pub struct Session {
    pub config: RunConfig,
    /// Directory relative dataset and checkpoint paths are resolved against.
    pub base: PathBuf,
}

impl Session {
    pub fn new(config: RunConfig, base: PathBuf) -> Self {
        Session { config, base }
    }

    fn out_dir(&self) -> PathBuf {
        let o = &self.config.out_dir;
        if o.is_relative() {
            self.base.join(o)
        } else {
            o.clone()
        }
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_relative() {
            self.base.join(p)
        } else {
            p.to_path_buf()
        }
    }

    fn split_for(&self, data: &FewShotDataset, seed: u64) -> Result<Split> {
        split(
            data,
            &SplitSpec {
                n_train: self.config.classes.n_train,
                n_test: self.config.classes.n_test,
                seed,
            },
        )
    }

    /// (pre-training classes, transfer classes)
    fn datasets(&self) -> Result<(FewShotDataset, FewShotDataset)> {
        let all = self.config.dataset.load(&self.base)?;
        let c = &self.config.classes;
        if c.pretrain + c.transfer > all.n_classes() {
            return Err(Error::Config(format!(
                "{} pre-training + {} transfer classes requested, dataset has {}",
                c.pretrain,
                c.transfer,
                all.n_classes()
            )));
        }
        Ok((all.class_range(0, c.pretrain)?, all.class_range(c.pretrain, c.transfer)?))
    }

    fn model_config(&self, data: &FewShotDataset) -> ModelConfig {
        let (h, w, ch) = data.image_shape();
        let mut m = ModelConfig::new(self.config.model.channels, (h, w, ch), data.n_classes());
        m.norm_eps = self.config.model.norm_eps;
        m
    }

    fn pretrain_one(&self, data: &FewShotDataset, seed: u64, zap: bool, hook: protocols::Hook<'_>) -> Result<RunResult> {
        let model = ConvNet::init(self.model_config(data), seed)?;
        model.config().final_spatial()?;
        let sp = self.split_for(data, seed)?;
        let cfg = protocols::PretrainConfig {
            zap,
            seed,
            ..self.config.pretrain
        };
        protocols::pretrain(model, data, &sp, &cfg, hook)
    }

    /// The pre-trained model for replicate seed `seed`: from the configured
    /// checkpoint, or trained here.
    fn pretrained(&self, data: &FewShotDataset, seed: u64, zap: bool) -> Result<ConvNet> {
        match &self.config.checkpoint {
            Some(p) => {
                let (h, w, c) = data.image_shape();
                load_checkpoint(&self.resolve(p))?.to_model((h, w, c))
            }
            None => Ok(self.pretrain_one(data, seed, zap, &mut no_hook)?.model),
        }
    }

    fn lrs(&self, default: f64) -> Vec<f64> {
        if self.config.lrs.is_empty() {
            vec![default]
        } else {
            self.config.lrs.clone()
        }
    }

    fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("resolved_config.json");
        std::fs::write(&p, self.config.to_json() + "\n").map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    pub fn run(&self, cmd: Command) -> Result<Outcome> {
        let out = self.out_dir();
        let resolved = self.write_resolved(&out)?;
        let mut outcome = match cmd {
            Command::Pretrain => self.run_pretrain(&out),
            Command::Transfer => self.run_transfer(&out),
            Command::Zapdiv => self.run_zapdiv(&out),
            Command::Gradcheck => self.run_gradcheck(),
            Command::Sweep => self.run_sweep(&out),
        }?;
        outcome.files.insert(0, resolved);
        Ok(outcome)
    }

    /// Runs `body` with a sink; on failure the files get a truncation marker.
    fn with_sink<T>(
        &self,
        out: &Path,
        kinds: &[MetricKind],
        body: impl FnOnce(&mut CsvSink, &mut MetricsRecord) -> Result<T>,
    ) -> Result<T> {
        let mut sink = CsvSink::create(out, kinds)?;
        let mut rec = MetricsRecord::default();
        match body(&mut sink, &mut rec) {
            Ok(v) => {
                sink.sync(&rec)?;
                Ok(v)
            }
            Err(e) => {
                let _ = sink.sync(&rec);
                let _ = sink.mark_truncated();
                Err(e)
            }
        }
    }

    fn run_pretrain(&self, out: &Path) -> Result<Outcome> {
        let (data, _) = self.datasets()?;
        let run_id = self.config.run_id.clone();
        let mut outcome = Outcome::default();
        self.with_sink(out, &[MetricKind::Accuracy], |sink, rec| {
            for r in 0..self.config.replicates {
                let seed = self.config.replicate_seed(r);
                let before = rec.accuracy.len();
                let mut hook = |p: &Progress<'_>| {
                    rec.accuracy.truncate(before);
                    rec.accuracy
                        .extend(accuracy_rows(p.initial, p.epochs, &run_id, r, "pretrain", "val"));
                    sink.sync(rec)
                };
                let res = self.pretrain_one(&data, seed, self.config.pretrain.zap, &mut hook)?;
                let path = out.join(format!("pretrained_r{r}.zapckpt"));
                save_checkpoint(&Checkpoint::from_model(&res.model, None), &path)?;
                if let Some(e) = res.epochs.last() {
                    outcome.summary.push(format!(
                        "replicate {r}: train acc {:.4}, val acc {:.4}",
                        e.train.accuracy, e.eval.accuracy
                    ));
                }
                outcome.files.push(path);
            }
            Ok(())
        })?;
        outcome.files.push(out.join(MetricKind::Accuracy.file_name()));
        Ok(outcome)
    }

    fn run_transfer(&self, out: &Path) -> Result<Outcome> {
        let (pre, tr) = self.datasets()?;
        let tcfg = self.config.transfer;
        let lrs = self.lrs(tcfg.optimizer.lr);
        let mut outcome = Outcome::default();
        self.with_sink(out, &[MetricKind::Accuracy, MetricKind::Pertask], |sink, rec| {
            for r in 0..self.config.replicates {
                let seed = self.config.replicate_seed(r);
                let model = self.pretrained(&pre, seed, self.config.pretrain.zap)?;
                let sp = self.split_for(&tr, seed)?;
                for &lr in &lrs {
                    let opt = tcfg.optimizer.with_lr(lr);
                    let cfg = protocols::TransferConfig {
                        optimizer: opt,
                        seed,
                        ..tcfg
                    };
                    let run_id = self.tagged_run_id(&lrs, lr);
                    let (acc0, pt0) = (rec.accuracy.len(), rec.pertask.len());
                    let mut hook = |p: &Progress<'_>| {
                        rec.accuracy.truncate(acc0);
                        rec.accuracy
                            .extend(accuracy_rows(p.initial, p.epochs, &run_id, r, "transfer", "test"));
                        rec.pertask.truncate(pt0);
                        if let Some(g) = p.pertask {
                            rec.pertask.extend(g.rows(&run_id, r, &opt, cfg.probe));
                        }
                        sink.sync(rec)
                    };
                    let res = protocols::transfer(&model, &tr, &sp, &cfg, &mut hook)?;
                    if let Some(e) = res.epochs.last() {
                        outcome.summary.push(format!(
                            "replicate {r} lr {lr}: test acc {:.4} after {} epochs",
                            e.eval.accuracy,
                            res.epochs.len()
                        ));
                    }
                }
            }
            Ok(())
        })?;
        outcome.files.push(out.join(MetricKind::Accuracy.file_name()));
        outcome.files.push(out.join(MetricKind::Pertask.file_name()));
        Ok(outcome)
    }

    fn tagged_run_id(&self, lrs: &[f64], lr: f64) -> String {
        if lrs.len() > 1 {
            format!("{}/lr={lr}", self.config.run_id)
        } else {
            self.config.run_id.clone()
        }
    }

    fn run_zapdiv(&self, out: &Path) -> Result<Outcome> {
        let (pre, _) = self.datasets()?;
        let zcfg = self.config.zapdiv;
        let lrs = self.lrs(zcfg.optimizer.lr);
        let model = self.pretrained(&pre, self.config.seed, self.config.zapdiv_pretrain_zap)?;
        let sp = self.split_for(&pre, self.config.seed)?;
        let mut outcome = Outcome::default();
        self.with_sink(out, &[MetricKind::Zapdiv], |sink, rec| {
            for &lr in &lrs {
                for r in 0..self.config.replicates {
                    let cfg = crate::instrument::ZapDivConfig {
                        optimizer: zcfg.optimizer.with_lr(lr),
                        seed: self.config.replicate_seed(r),
                        ..zcfg
                    };
                    let series = zap_divergence_run(&model, &pre, &sp.train, &cfg)?;
                    rec.push_cosim(&self.config.run_id, r, &cfg.optimizer, &series);
                    sink.sync(rec)?;
                    if let (Some(fc), Some(c3)) = (series.layer("fc"), series.layer("conv3")) {
                        outcome.summary.push(format!(
                            "lr {lr} replicate {r}: fc cosim {:.4} -> {:.4}, conv3 {:.6}",
                            fc[0],
                            fc[fc.len() - 1],
                            c3[c3.len() - 1]
                        ));
                    }
                }
            }
            Ok(())
        })?;
        outcome.files.push(out.join(MetricKind::Zapdiv.file_name()));
        Ok(outcome)
    }

    fn run_gradcheck(&self) -> Result<Outcome> {
        let report = gradcheck(&self.config.gradcheck)?;
        let mut outcome = Outcome::default();
        for (name, e) in &report.per_param {
            outcome.summary.push(format!("{name:>14}: max relative error {e:.3e}"));
        }
        outcome.summary.push(format!(
            "{} ({} elements, max relative error {:.3e} at {}[{}], tolerance {:.0e})",
            if report.passed { "PASS" } else { "FAIL" },
            report.n_checked,
            report.max_rel_error,
            report.worst.0,
            report.worst.1,
            self.config.gradcheck.tolerance
        ));
        outcome.gradcheck = Some(report);
        Ok(outcome)
    }

    fn run_sweep(&self, out: &Path) -> Result<Outcome> {
        let (pre, tr) = self.datasets()?;
        let c = &self.config;
        let seeds: Vec<u64> = (0..c.replicates).map(|r| c.replicate_seed(r)).collect();
        let lrs = self.lrs(c.transfer.optimizer.lr);
        let threads = std::env::var("ZAPNET_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
            .or(c.threads);

        crate::par::with_threads(threads, || {
            // pre-trained models, one per (replicate, zapped)
            let jobs: Vec<(usize, bool)> = (0..seeds.len())
                .flat_map(|r| c.sweep.zapped.iter().map(move |&z| (r, z)))
                .collect();
            let models: Vec<Result<ConvNet>> =
                crate::par::map_indexed(jobs.len(), |j| self.pretrained(&pre, seeds[jobs[j].0], jobs[j].1));
            let models: Vec<ConvNet> = models.into_iter().collect::<Result<_>>()?;

            let mut cells = Vec::new();
            for (j, &(r, zapped)) in jobs.iter().enumerate() {
                for &kind in &c.sweep.optimizers {
                    for &lr in &lrs {
                        cells.push((j, r, zapped, kind, lr));
                    }
                }
            }
            let cell_dir = out.join("cells");
            let results: Vec<Result<(PathBuf, Vec<PathBuf>, String)>> =
                crate::par::map_indexed(cells.len(), |i| {
                    let (j, r, zapped, kind, lr) = cells[i];
                    let opt = OptimizerSpec {
                        kind,
                        lr,
                        ..c.transfer.optimizer
                    };
                    let run_id = format!(
                        "{}/{}/{}/lr={lr}",
                        c.run_id,
                        kind.as_str(),
                        if zapped { "zapped" } else { "unzapped" }
                    );
                    let dir = cell_dir.join(format!("{i:04}"));
                    let seed = seeds[r];
                    let sp = self.split_for(&tr, seed)?;
                    let cfg = protocols::TransferConfig {
                        optimizer: opt,
                        seed,
                        ..c.transfer
                    };
                    let kinds = [MetricKind::Accuracy, MetricKind::Pertask];
                    let summary = self.with_sink(&dir, &kinds, |sink, rec| {
                        let mut hook = |p: &Progress<'_>| {
                            rec.accuracy = accuracy_rows(p.initial, p.epochs, &run_id, r, "transfer", "test");
                            rec.pertask = p.pertask.map(|g| g.rows(&run_id, r, &opt, cfg.probe)).unwrap_or_default();
                            sink.sync(rec)
                        };
                        let res = protocols::transfer(&models[j], &tr, &sp, &cfg, &mut hook)?;
                        Ok(format!(
                            "{run_id} replicate {r}: {}",
                            res.epochs
                                .iter()
                                .map(|e| format!("{:.4}", e.eval.accuracy))
                                .collect::<Vec<_>>()
                                .join(" ")
                        ))
                    })?;
                    Ok((dir.clone(), kinds.iter().map(|k| dir.join(k.file_name())).collect(), summary))
                });

            let mut outcome = Outcome::default();
            let mut acc = Vec::new();
            let mut pt = Vec::new();
            let mut first_err = None;
            for res in results {
                match res {
                    Ok((_, files, s)) => {
                        acc.push(files[0].clone());
                        pt.push(files[1].clone());
                        outcome.summary.push(s);
                    }
                    Err(e) => {
                        first_err.get_or_insert(e);
                    }
                }
            }
            // merge whatever finished, then report the first failure
            concat_csv(&acc, &out.join(MetricKind::Accuracy.file_name()), MetricKind::Accuracy)?;
            concat_csv(&pt, &out.join(MetricKind::Pertask.file_name()), MetricKind::Pertask)?;
            if let Some(e) = first_err {
                CsvSink::append(out, &[MetricKind::Accuracy, MetricKind::Pertask])?.mark_truncated()?;
                return Err(e);
            }
            outcome.files.push(out.join(MetricKind::Accuracy.file_name()));
            outcome.files.push(out.join(MetricKind::Pertask.file_name()));
            Ok(outcome)
        })
    }
}
