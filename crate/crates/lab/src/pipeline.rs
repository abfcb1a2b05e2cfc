//! Experiment pipeline: cached classifiers, attacks and matrix cells.
//!
//! Every artifact is stored under a name derived from a digest of the
//! settings that produce it, so a rerun reuses exactly the artifacts whose
//! inputs are unchanged and an interrupted run resumes from finished cells.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::thread;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use spt_core::attack::{adversarial_train, attack_dataset, GradientAttack};
use spt_core::data::Dataset;
use spt_core::eval::{check_structure_preserved, histogram_of};
use spt_core::model::{train_classifier, ArchitectureId, ClassifierModel};
use spt_core::rng::derive_seed;
use spt_core::spt::{self, dataset_objective, SptParams};
use spt_core::Tensor;

use crate::checkpoint;
use crate::config::{digest_of, AttackKind, Defense, ExperimentConfig, PerturbationSettings, SptSettings, TrainSettings};
use crate::error::{LabError, Result};
use crate::export::{self, GridRow, Manifest};
use crate::idx;
use crate::report::{self, CellRecord, Protocol, SptSummary};
use crate::sptfile;

/// Images per attack batch. Fixed because PGD random starts are seeded per batch.
pub const ATTACK_BATCH: usize = 100;
/// Grid resolution for the reported monotonicity of a learned map.
pub const MONOTONICITY_GRID: usize = 1024;
/// Training examples used to compare the SPT objective before and after fitting.
pub const OBJECTIVE_SAMPLE: usize = 2000;

const PGD_SEED_TAG: u64 = 0x9D0;
const ADV_TRAIN_SEED_TAG: u64 = 0xAD7;

fn short(digest: &str) -> &str {
    &digest[..16]
}

#[derive(Serialize)]
struct ClassifierKey<'a> {
    dataset: &'a str,
    subset: Option<usize>,
    seed: u64,
    model: &'a str,
    train: &'a TrainSettings,
    defense: Defense,
    adversarial: Option<(&'a PerturbationSettings, usize)>,
}

#[derive(Serialize)]
struct SptKey<'a> {
    target: &'a str,
    settings: &'a SptSettings,
    init_seed: u64,
    shuffle_seed: u64,
}

#[derive(Serialize)]
struct CellKey<'a> {
    attack: &'a str,
    source: &'a str,
    target: &'a str,
    examples: usize,
}

/// Loss of the SPT objective on a training sample, before and after fitting.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct SptFitSummary {
    pub objective_before: f64,
    pub objective_after: f64,
    pub sample: usize,
    pub epoch_means: Vec<f64>,
}

pub struct Lab {
    cfg: ExperimentConfig,
    out: PathBuf,
    data_dir: PathBuf,
    train_missing: bool,
    echo: bool,
    data: OnceLock<(Dataset, Dataset)>,
    log: Mutex<()>,
    computed: AtomicUsize,
}

impl Lab {
    /// Resolves `cfg`, creates the output directory and writes the effective
    /// configuration into it.
    pub fn open(cfg: ExperimentConfig) -> Result<Self> {
        let cfg = cfg.resolve()?;
        let out = cfg.out.clone();
        fs::create_dir_all(&out).map_err(LabError::io(&out))?;
        checkpoint::write_atomic(&out.join("effective-config.json"), cfg.to_json().as_bytes())?;
        Ok(Self {
            data_dir: cfg.data_dir.clone().expect("resolved"),
            out,
            cfg,
            train_missing: true,
            echo: false,
            data: OnceLock::new(),
            log: Mutex::new(()),
            computed: AtomicUsize::new(0),
        })
    }

    /// Whether missing checkpoints are trained (default) or reported.
    pub fn train_missing(mut self, yes: bool) -> Self {
        self.train_missing = yes;
        self
    }

    /// Mirror log lines on stderr.
    pub fn echo(mut self, yes: bool) -> Self {
        self.echo = yes;
        self
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    /// Appends a timestamped line to the sidecar `run.log`.
    pub fn note(&self, msg: impl AsRef<str>) {
        let msg = msg.as_ref();
        let _guard = self.log.lock().unwrap_or_else(|e| e.into_inner());
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        if let Ok(mut f) = OpenOptions::new().create(true).append(true).open(self.out.join("run.log")) {
            let _ = writeln!(f, "[{secs}] {msg}");
        }
        if self.echo {
            eprintln!("{msg}");
        }
    }

    fn datasets(&self) -> Result<&(Dataset, Dataset)> {
        if let Some(d) = self.data.get() {
            return Ok(d);
        }
        let loaded = idx::load_dataset(&self.data_dir, self.cfg.dataset_name(), self.cfg.subset)?;
        self.note(format!(
            "loaded {} train / {} test examples from {}",
            loaded.0.len(),
            loaded.1.len(),
            self.data_dir.display()
        ));
        Ok(self.data.get_or_init(|| loaded))
    }

    pub fn train_set(&self) -> Result<&Dataset> {
        Ok(&self.datasets()?.0)
    }

    pub fn test_set(&self) -> Result<&Dataset> {
        Ok(&self.datasets()?.1)
    }

    pub fn defense_digest(&self, defense: Defense) -> String {
        match defense {
            Defense::None => digest_of(&"none"),
            Defense::PgdAdvTrain => digest_of(&(&self.cfg.train, &self.cfg.adv_train)),
        }
    }

    pub fn classifier_key(&self, id: ArchitectureId, defense: Defense) -> String {
        digest_of(&ClassifierKey {
            dataset: self.cfg.dataset_name().as_str(),
            subset: self.cfg.subset,
            seed: self.cfg.seed,
            model: id.as_str(),
            train: &self.cfg.train,
            defense,
            adversarial: (defense == Defense::PgdAdvTrain).then_some((&self.cfg.adv_train.perturbation, self.cfg.adv_train.epochs)),
        })
    }

    pub fn checkpoint_path(&self, id: ArchitectureId, defense: Defense) -> PathBuf {
        let key = self.classifier_key(id, defense);
        self.out
            .join("checkpoints")
            .join(defense.as_str())
            .join(format!("{}-{}.ckpt", id, short(&key)))
    }

    pub fn classifier_if_present(&self, id: ArchitectureId, defense: Defense) -> Result<Option<ClassifierModel>> {
        let path = self.checkpoint_path(id, defense);
        path.is_file().then(|| checkpoint::load(&path)).transpose()
    }

    /// Loads the cached checkpoint or trains (and saves) it.
    pub fn classifier(&self, id: ArchitectureId, defense: Defense) -> Result<ClassifierModel> {
        let path = self.checkpoint_path(id, defense);
        if path.is_file() {
            return checkpoint::load(&path);
        }
        if !self.train_missing {
            return Err(LabError::MissingCheckpoint { model: format!("{id} ({defense})"), path });
        }
        let (train, test) = self.datasets()?;
        let mut model = match defense {
            Defense::None => {
                let mut m = ClassifierModel::build(id, self.cfg.seed);
                let cfg = self.cfg.train_config();
                self.note(format!("training {id}: {} epochs over {} examples", cfg.epochs, train.len()));
                train_classifier(&mut m, train, &cfg, &mut self.progress(&format!("train {id}")))?;
                m
            }
            Defense::PgdAdvTrain => {
                let adv = self.cfg.adv_train.perturbation.to_core(derive_seed(self.cfg.seed, ADV_TRAIN_SEED_TAG));
                let cfg = self.cfg.adv_train_config();
                self.note(format!("adversarially training {id}: {} epochs over {} examples", cfg.epochs, train.len()));
                adversarial_train(id, self.cfg.seed, train, &adv, &cfg, &mut self.progress(&format!("adv-train {id}")))?
            }
        };
        let acc = spt_core::eval::accuracy(&model, test.images(), test.labels())?;
        model.meta.test_accuracy = Some(acc);
        checkpoint::save(&model, &path)?;
        self.note(format!("{id} ({defense}) test accuracy {:.2}% -> {}", 100.0 * acc, path.display()));
        Ok(model)
    }

    fn progress<'a>(&'a self, label: &'a str) -> impl FnMut(spt_core::model::Progress) + 'a {
        move |p| {
            if p.batch % 100 == 0 || p.batch + 1 == p.batches {
                self.note(format!("{label}: epoch {} batch {}/{} loss {:.4}", p.epoch + 1, p.batch + 1, p.batches, p.loss));
            }
        }
    }

    pub fn spt_path(&self, id: ArchitectureId, defense: Defense, init_seed: u64) -> PathBuf {
        let key = self.spt_key(id, defense, init_seed);
        self.out
            .join("spt")
            .join(defense.as_str())
            .join(format!("{}-{}.spt", id, short(&key)))
    }

    fn spt_key(&self, id: ArchitectureId, defense: Defense, init_seed: u64) -> String {
        digest_of(&SptKey {
            target: &self.classifier_key(id, defense),
            settings: &self.cfg.spt,
            init_seed,
            shuffle_seed: self.cfg.seed,
        })
    }

    /// Trained SPT parameters against the given target (cached).
    pub fn spt_params(&self, id: ArchitectureId, defense: Defense, init_seed: u64) -> Result<SptParams> {
        let path = self.spt_path(id, defense, init_seed);
        if path.is_file() {
            return sptfile::load(&path);
        }
        let target = self.classifier(id, defense)?;
        let train = self.train_set()?;
        let init = SptParams::init(&self.cfg.spt.gammas, self.cfg.alpha(), self.cfg.spt_init_scheme()?, init_seed)?;
        let cfg = self.cfg.spt_train_config()?;
        self.note(format!("fitting SPT against {id} ({defense}), init seed {init_seed}"));
        let label = format!("spt {id}");
        let report = spt::train_spt(&target, train, &init, &cfg, &mut |p| {
            if p.batch % 100 == 0 || p.batch + 1 == p.batches {
                self.note(format!("{label}: batch {}/{} objective {:.4}", p.batch + 1, p.batches, p.objective));
            }
        })?;
        let sample = train.subset(OBJECTIVE_SAMPLE)?;
        let fit = SptFitSummary {
            objective_before: dataset_objective(&target, &init, &sample, cfg.mode, ATTACK_BATCH)?,
            objective_after: dataset_objective(&target, &report.params, &sample, cfg.mode, ATTACK_BATCH)?,
            sample: sample.len(),
            epoch_means: report.epoch_means.clone(),
        };
        let mut fit_json = serde_json::to_string_pretty(&fit).expect("summary serializes");
        fit_json.push('\n');
        checkpoint::write_atomic(&path.with_extension("fit.json"), fit_json.as_bytes())?;
        sptfile::save(&report.params, &path)?;
        Ok(report.params)
    }

    pub fn spt_fit_summary(&self, id: ArchitectureId, defense: Defense, init_seed: u64) -> Result<SptFitSummary> {
        let path = self.spt_path(id, defense, init_seed).with_extension("fit.json");
        let text = fs::read_to_string(&path).map_err(LabError::io(&path))?;
        serde_json::from_str(&text).map_err(|e| LabError::format(&path, e.to_string()))
    }

    fn examples_for(&self, attack: AttackKind) -> Result<Dataset> {
        let test = self.test_set()?;
        match (attack, self.cfg.pgd.eval_limit) {
            (AttackKind::Pgd, Some(k)) if k < test.len() => Ok(test.subset(k)?),
            _ => Ok(test.clone()),
        }
    }

    fn examples_count(&self, attack: AttackKind) -> Result<usize> {
        let n = self.test_set()?.len();
        Ok(match (attack, self.cfg.pgd.eval_limit) {
            (AttackKind::Pgd, Some(k)) => k.min(n),
            _ => n,
        })
    }

    pub fn pgd_seed(&self) -> u64 {
        derive_seed(self.cfg.seed, PGD_SEED_TAG)
    }

    pub fn attack_digest(&self, attack: AttackKind) -> String {
        match attack {
            AttackKind::None => digest_of(&"none"),
            AttackKind::Fgsm => digest_of(&("fgsm", self.cfg.fgsm_epsilon)),
            AttackKind::Pgd => digest_of(&("pgd", &self.cfg.pgd, self.pgd_seed())),
            AttackKind::Spt => digest_of(&("spt", &self.cfg.spt, self.cfg.alpha(), self.cfg.seed)),
        }
    }

    fn adv_cache_path(&self, attack: AttackKind, source: ArchitectureId, defense: Defense, examples: usize) -> PathBuf {
        let key = digest_of(&(self.classifier_key(source, defense), self.attack_digest(attack), examples));
        self.out
            .join("cache")
            .join(format!("{attack}-{defense}-{source}-{}.bin", short(&key)))
    }

    /// Adversarial versions of the evaluation examples, crafted against `source`.
    /// Returns the images and any artifact paths.
    fn adversarial_set(
        &self,
        attack: AttackKind,
        source: ArchitectureId,
        defense: Defense,
        examples: &Dataset,
    ) -> Result<(Tensor, Vec<PathBuf>, Option<SptParams>)> {
        match attack {
            AttackKind::None => Ok((examples.images().clone(), vec![], None)),
            AttackKind::Spt => {
                let params = self.spt_params(source, defense, self.cfg.spt.init_seed)?;
                let adv = spt::generate(&params, examples.images())?;
                Ok((adv, vec![self.spt_path(source, defense, self.cfg.spt.init_seed)], Some(params)))
            }
            AttackKind::Fgsm | AttackKind::Pgd => {
                let path = self.adv_cache_path(attack, source, defense, examples.len());
                if path.is_file() {
                    return Ok((checkpoint::load_tensor(&path)?, vec![path], None));
                }
                let model = self.classifier(source, defense)?;
                let kind = if attack == AttackKind::Fgsm {
                    GradientAttack::Fgsm { epsilon: self.cfg.fgsm_epsilon }
                } else {
                    GradientAttack::Pgd(self.cfg.pgd.perturbation.to_core(self.pgd_seed()))
                };
                self.note(format!("crafting {attack} against {source} ({defense}) on {} examples", examples.len()));
                let adv = attack_dataset(&model, examples, kind, ATTACK_BATCH)?;
                checkpoint::save_tensor(&adv, &path)?;
                Ok((adv, vec![path], None))
            }
        }
    }

    pub fn cell_path(&self, key: &str) -> PathBuf {
        self.out.join("cells").join(format!("{key}.json"))
    }

    fn cell_digest(&self, attack: AttackKind, source: ArchitectureId, target: ArchitectureId, defense: Defense) -> Result<String> {
        let attack_key = digest_of(&(self.attack_digest(attack), self.defense_digest(defense)));
        Ok(digest_of(&CellKey {
            attack: &attack_key,
            source: &self.classifier_key(source, defense),
            target: &self.classifier_key(target, defense),
            examples: self.examples_count(attack)?,
        }))
    }

    fn relative(&self, p: &Path) -> String {
        p.strip_prefix(&self.out).unwrap_or(p).display().to_string()
    }

    /// Crafts one attack against `source` and evaluates it on every target,
    /// reusing finished cells.
    pub fn run_unit(
        &self,
        protocol: Protocol,
        defense: Defense,
        attack: AttackKind,
        source: ArchitectureId,
        targets: &[ArchitectureId],
    ) -> Result<Vec<CellRecord>> {
        let mut done = Vec::new();
        let mut pending = Vec::new();
        for &t in targets {
            let key = CellRecord::key(protocol, defense, attack, source.as_str(), t.as_str());
            let path = self.cell_path(&key);
            let digest = self.cell_digest(attack, source, t, defense)?;
            match path.is_file().then(|| report::load_cell(&path)) {
                Some(Ok(rec)) if rec.config_digest == digest => done.push(Some(rec)),
                _ => {
                    done.push(None);
                    pending.push((t, path, digest));
                }
            }
        }
        if !pending.is_empty() {
            let examples = self.examples_for(attack)?;
            let (adv, artifacts, params) = self.adversarial_set(attack, source, defense, &examples)?;
            let spt_summary = match &params {
                Some(p) => {
                    let structure = check_structure_preserved(examples.images(), &adv)?;
                    Some(SptSummary {
                        structure: (&structure).into(),
                        monotonicity: (&spt::monotonicity(p, MONOTONICITY_GRID)?).into(),
                        mean_brightness: spt::mean_brightness(&adv),
                        init_seed: p.init_seed,
                        weights: p.weights.clone(),
                    })
                }
                None => None,
            };
            for (t, path, digest) in pending {
                let model = self.classifier(t, defense)?;
                let predicted = model.predict_labels(&adv)?;
                let rec = CellRecord {
                    dataset: self.cfg.dataset_name().as_str().to_string(),
                    protocol,
                    defense,
                    defense_digest: self.defense_digest(defense),
                    attack,
                    attack_digest: self.attack_digest(attack),
                    source: source.as_str().to_string(),
                    target: t.as_str().to_string(),
                    whitebox_reference: protocol == Protocol::Blackbox && t == source,
                    examples: examples.len(),
                    accuracy: spt_core::eval::accuracy_of(&predicted, examples.labels())?,
                    histogram: histogram_of(&predicted)?,
                    seed: self.cfg.seed,
                    config_digest: digest,
                    spt: spt_summary.clone(),
                    artifacts: artifacts.iter().map(|a| self.relative(a)).collect(),
                };
                report::save_cell(&rec, &path)?;
                self.computed.fetch_add(1, Ordering::Relaxed);
                self.note(format!(
                    "{} {defense} {attack}: {source} -> {t}: {:.2}%",
                    protocol.as_str(),
                    100.0 * rec.accuracy
                ));
                let slot = targets.iter().position(|&x| x == t).expect("pending target is listed");
                done[slot] = Some(rec);
            }
        }
        Ok(done.into_iter().map(|r| r.expect("every cell filled")).collect())
    }

    fn attack_columns(&self) -> Vec<AttackKind> {
        let mut cols = vec![AttackKind::None];
        for &a in &self.cfg.attacks {
            if !cols.contains(&a) {
                cols.push(a);
            }
        }
        cols
    }

    /// Trains or loads every configured model under `defense`, up to
    /// `jobs` at a time.
    pub fn ensure_classifiers(&self, defense: Defense) -> Result<Vec<ClassifierModel>> {
        let ids = self.cfg.model_ids()?;
        if self.train_missing {
            self.datasets()?;
        }
        parallel_map(self.cfg.jobs, &ids, |&id| {
            self.classifier(id, defense).map_err(|e| e.in_cell(format!("model {id} ({defense})")))
        })
    }

    /// Runs a full attack matrix and writes its report files.
    pub fn run_matrix(&self, protocol: Protocol, defense: Defense) -> Result<MatrixOutcome> {
        let ids = self.cfg.model_ids()?;
        if protocol == Protocol::Blackbox && !ids.contains(&ArchitectureId::Cp) {
            return Err(LabError::Config("black-box transfer needs C_p among the models".into()));
        }
        self.ensure_classifiers(defense)?;
        let mut units = Vec::new();
        for attack in self.attack_columns() {
            match protocol {
                Protocol::Whitebox => units.extend(ids.iter().map(|&m| (attack, m, vec![m]))),
                Protocol::Blackbox => units.push((attack, ArchitectureId::Cp, ids.clone())),
            }
        }
        let before = self.computed.load(Ordering::Relaxed);
        let results = parallel_map(self.cfg.jobs, &units, |(attack, source, targets)| {
            self.run_unit(protocol, defense, *attack, *source, targets)
                .map_err(|e| e.in_cell(format!("{} {defense} {attack} against {source}", protocol.as_str())))
        })?;
        let computed = self.computed.load(Ordering::Relaxed) - before;
        // Rows in model order, columns in attack order.
        let mut records: Vec<CellRecord> = results.into_iter().flatten().collect();
        let model_rank = |s: &str| ids.iter().position(|m| m.as_str() == s).unwrap_or(usize::MAX);
        records.sort_by_key(|r| (model_rank(&r.target), r.attack));
        let paths = self.write_report(protocol, defense, &records)?;
        let manifest = if protocol == Protocol::Whitebox && self.cfg.attacks.contains(&AttackKind::Spt) {
            Some(self.export_spt_grid(defense)?)
        } else {
            None
        };
        Ok(MatrixOutcome { records, report: paths.0, table: paths.1, computed_cells: computed, manifest })
    }

    pub fn report_paths(&self, protocol: Protocol, defense: Defense) -> (PathBuf, PathBuf) {
        let stem = format!("{}-{}-{}", self.cfg.dataset_name().as_str(), protocol.as_str(), defense);
        let dir = self.out.join("reports");
        (dir.join(format!("{stem}.jsonl")), dir.join(format!("{stem}.txt")))
    }

    fn write_report(&self, protocol: Protocol, defense: Defense, records: &[CellRecord]) -> Result<(PathBuf, PathBuf)> {
        let (jsonl, txt) = self.report_paths(protocol, defense);
        checkpoint::write_atomic(&jsonl, report::to_json_lines(records).as_bytes())?;
        let mut text = format!(
            "dataset {}  protocol {}  defense {}\nconfig digest {}\nexamples per cell: {}\n\n",
            self.cfg.dataset_name().as_str(),
            protocol.as_str(),
            defense,
            self.cfg.digest(),
            records
                .iter()
                .map(|r| format!("{}={}", r.attack, r.examples))
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect::<Vec<_>>()
                .join(" ")
        );
        text.push_str(&report::render_table(records));
        let hist = report::render_histograms(records);
        if !hist.is_empty() {
            text.push_str("\nSPT prediction histograms (% per label 0-9)\n");
            text.push_str(&hist);
        }
        checkpoint::write_atomic(&txt, text.as_bytes())?;
        Ok((jsonl, txt))
    }

    /// First test index of each label, in label order.
    pub fn one_per_label(&self) -> Result<Vec<usize>> {
        let test = self.test_set()?;
        Ok((0..10u8)
            .filter_map(|l| test.labels().iter().position(|&x| x == l))
            .collect())
    }

    /// Grid of SPT outputs: one row per model, one column per label.
    pub fn export_spt_grid(&self, defense: Defense) -> Result<Manifest> {
        let ids = self.cfg.model_ids()?;
        let cols = self.one_per_label()?;
        let originals = self.test_set()?.images().gather_rows(&cols)?;
        let dir = self.out.join("examples").join(defense.as_str());
        let format = self.cfg.export_format;
        export::export_grid(
            &dir,
            "originals",
            &[GridRow { label: "original".into(), images: &originals, predictions: None }],
            &cols,
            format,
        )?;
        let mut images = Vec::new();
        let mut predictions = Vec::new();
        for &id in &ids {
            let params = self.spt_params(id, defense, self.cfg.spt.init_seed)?;
            let adv = spt::generate(&params, &originals)?;
            predictions.push(self.classifier(id, defense)?.predict_labels(&adv)?);
            images.push(adv);
        }
        let rows: Vec<GridRow<'_>> = ids
            .iter()
            .zip(&images)
            .zip(predictions)
            .map(|((id, img), p)| GridRow { label: id.as_str().into(), images: img, predictions: Some(p) })
            .collect();
        export::export_grid(&dir, "spt", &rows, &cols, format)
    }
}

#[derive(Debug)]
pub struct MatrixOutcome {
    pub records: Vec<CellRecord>,
    pub report: PathBuf,
    pub table: PathBuf,
    /// Cells computed in this invocation (the rest were resumed).
    pub computed_cells: usize,
    pub manifest: Option<Manifest>,
}

/// Maps `f` over `items` on up to `jobs` threads, keeping input order.
/// Returns the first error in input order after all work has stopped.
pub fn parallel_map<T: Sync, R: Send>(jobs: usize, items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    thread::scope(|s| {
        for _ in 0..jobs.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every slot filled"))
        .collect()
}
