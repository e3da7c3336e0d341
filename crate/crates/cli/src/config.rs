//! Run configuration: the same keys work as command-line flags, in a TOML
//! or JSON config file, and in the `config` echo of `report.json`.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use surprisenet::data::{self, Dataset, Scenario};
use surprisenet::{ModelConfig, PruneSchedule, TrainPlan, Variant};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct RunConfig {
    /// Data source: synth | idx | csv
    #[arg(long)]
    pub dataset: Option<String>,
    /// Directory with train-/t10k- IDX files (dataset = idx)
    #[arg(long)]
    pub idx_dir: Option<PathBuf>,
    /// Training CSV (dataset = csv)
    #[arg(long)]
    pub train_csv: Option<PathBuf>,
    /// Test CSV (dataset = csv)
    #[arg(long)]
    pub test_csv: Option<PathBuf>,
    /// Name of the CSV label column
    #[arg(long)]
    pub label_col: Option<String>,
    /// Number of synthetic classes (default: n-tasks × classes-per-task)
    #[arg(long)]
    pub synth_classes: Option<usize>,
    #[arg(long)]
    pub synth_dim: Option<usize>,
    #[arg(long)]
    pub synth_per_class: Option<usize>,
    /// Minimum distance between synthetic cluster centres, in σ
    #[arg(long)]
    pub synth_separation: Option<f64>,

    #[arg(long)]
    pub n_tasks: Option<usize>,
    #[arg(long)]
    pub classes_per_task: Option<usize>,
    /// Seeds class order, weight init, batch order and VAE noise
    #[arg(long)]
    pub seed: Option<u64>,

    /// ae | vae
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub kl_weight: Option<f64>,
    /// Encoder widths, comma separated (decoder mirrors them)
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub latent: Option<usize>,

    /// eqprune | fixed:<λ>
    #[arg(long)]
    pub prune: Option<String>,
    /// Initial training epochs per task
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Post-prune retraining epochs (default: ⌈epochs / 2⌉)
    #[arg(long)]
    pub retrain_epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,

    /// Run directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Synth,
    Idx,
    Csv,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($f:ident),* $(,)?) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl RunConfig {
    /// Parse a config file; `.json` is read as JSON, anything else as TOML.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Values set in `other` win.
    pub fn overlay(&mut self, other: &RunConfig) {
        overlay!(self, other;
            dataset, idx_dir, train_csv, test_csv, label_col, synth_classes, synth_dim,
            synth_per_class, synth_separation, n_tasks, classes_per_task, seed, variant,
            kl_weight, hidden, latent, prune, epochs, retrain_epochs, lr, batch_size, out);
    }

    pub fn kind(&self) -> Result<DataKind, CliError> {
        match self.dataset.as_deref().unwrap_or("synth") {
            "synth" => Ok(DataKind::Synth),
            "idx" => Ok(DataKind::Idx),
            "csv" => Ok(DataKind::Csv),
            other => Err(CliError::Config(format!("unknown dataset kind {other:?}"))),
        }
    }

    /// Fill every unset field with its default. The result validates or the
    /// call fails with a configuration error.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let kind = self.kind()?;
        let image = kind == DataKind::Idx;
        let mut r = self.clone();
        r.dataset.get_or_insert_with(|| "synth".into());
        r.n_tasks.get_or_insert(5);
        r.classes_per_task.get_or_insert(2);
        r.seed.get_or_insert(0);
        match kind {
            DataKind::Synth => {
                let classes = r.n_tasks.unwrap() * r.classes_per_task.unwrap();
                r.synth_classes.get_or_insert(classes);
                r.synth_dim.get_or_insert(16);
                r.synth_per_class.get_or_insert(200);
                r.synth_separation.get_or_insert(8.0);
            }
            DataKind::Idx => {
                if r.idx_dir.is_none() {
                    return Err(CliError::Config("dataset idx needs --idx-dir".into()));
                }
            }
            DataKind::Csv => {
                if r.train_csv.is_none() || r.test_csv.is_none() {
                    return Err(CliError::Config("dataset csv needs --train-csv and --test-csv".into()));
                }
                r.label_col.get_or_insert_with(|| "label".into());
            }
        }
        r.variant.get_or_insert_with(|| "ae".into());
        r.kl_weight.get_or_insert(0.001);
        r.hidden.get_or_insert_with(|| if image { vec![256, 128] } else { vec![128, 64] });
        r.latent.get_or_insert(if image { 64 } else { 32 });
        r.prune.get_or_insert_with(|| "eqprune".into());
        match (self.epochs, self.retrain_epochs) {
            (None, None) if image => (r.epochs, r.retrain_epochs) = (Some(20), Some(10)),
            (None, None) => (r.epochs, r.retrain_epochs) = (Some(134), Some(66)),
            (Some(e), None) => r.retrain_epochs = Some(e.div_ceil(2)),
            (None, Some(_)) => r.epochs = Some(if image { 20 } else { 134 }),
            (Some(_), Some(_)) => {}
        }
        r.lr.get_or_insert(if image { 1e-4 } else { 8e-4 });
        r.batch_size.get_or_insert(64);
        if r.out.is_none() {
            return Err(CliError::Config("--out is required".into()));
        }
        r.variant()?;
        r.plan()?.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if r.n_tasks == Some(0) || r.classes_per_task == Some(0) {
            return Err(CliError::Config("n-tasks and classes-per-task must be ≥ 1".into()));
        }
        if !r.kl_weight.unwrap().is_finite() || r.kl_weight.unwrap() < 0.0 {
            return Err(CliError::Config("kl-weight must be ≥ 0".into()));
        }
        if r.hidden.as_ref().unwrap().contains(&0) || r.latent == Some(0) {
            return Err(CliError::Config("layer widths must be ≥ 1".into()));
        }
        Ok(r)
    }

    pub fn variant(&self) -> Result<Variant, CliError> {
        match self.variant.as_deref().unwrap_or("ae") {
            "ae" => Ok(Variant::Ae),
            "vae" => Ok(Variant::Vae),
            other => Err(CliError::Config(format!("unknown variant {other:?}"))),
        }
    }

    /// Training plan of a resolved config.
    pub fn plan(&self) -> Result<TrainPlan, CliError> {
        let prune: PruneSchedule = self
            .prune
            .as_deref()
            .unwrap_or("eqprune")
            .parse()
            .map_err(|e: surprisenet::Error| CliError::Config(e.to_string()))?;
        let missing = || CliError::Config("config not resolved".into());
        Ok(TrainPlan {
            epochs_per_task: self.epochs.ok_or_else(missing)?,
            retrain_epochs: self.retrain_epochs.ok_or_else(missing)?,
            prune_schedule: prune,
            learning_rate: self.lr.ok_or_else(missing)?,
            batch_size: self.batch_size.ok_or_else(missing)?,
            seed: self.seed.ok_or_else(missing)?,
        })
    }

    pub fn model_config(&self, dataset: &Dataset) -> Result<ModelConfig, CliError> {
        let cfg = ModelConfig {
            input_dim: dataset.feature_dim,
            hidden_dims: self.hidden.clone().unwrap_or_default(),
            latent_dim: self.latent.unwrap_or(32),
            class_count: dataset.class_count,
            variant: self.variant()?,
            kl_weight: self.kl_weight.unwrap_or(0.001),
        };
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_default()
    }

    /// Load the dataset and build the scenario. CSV features are z-scored
    /// with statistics of the first task's training rows.
    pub fn load(&self) -> Result<(Dataset, Scenario), CliError> {
        let cfg_err = |e: surprisenet::Error| CliError::Config(e.to_string());
        let mut dataset = match self.kind()? {
            DataKind::Synth => data::synth_clusters(
                self.synth_classes.unwrap_or(10),
                self.synth_dim.unwrap_or(16),
                self.synth_per_class.unwrap_or(200),
                self.synth_separation.unwrap_or(8.0),
                self.seed.unwrap_or(0),
            )
            .map_err(cfg_err)?,
            DataKind::Idx => {
                let dir = self.idx_dir.clone().unwrap_or_default();
                let name = dir
                    .file_name()
                    .map_or_else(|| "idx".to_string(), |n| n.to_string_lossy().into_owned());
                data::load_idx_dir(&dir, &name).map_err(cfg_err)?
            }
            DataKind::Csv => {
                let label = self.label_col.as_deref().unwrap_or("label");
                let train_path = self.train_csv.clone().unwrap_or_default();
                let train = data::load_csv(&train_path, label).map_err(cfg_err)?;
                let test = data::load_csv(&self.test_csv.clone().unwrap_or_default(), label).map_err(cfg_err)?;
                let name = train_path
                    .file_stem()
                    .map_or_else(|| "csv".to_string(), |n| n.to_string_lossy().into_owned());
                Dataset::from_partitions(name, train, test).map_err(cfg_err)?
            }
        };
        let scenario = data::make_scenario(
            &dataset,
            self.n_tasks.unwrap_or(5),
            self.classes_per_task.unwrap_or(2),
            self.seed.unwrap_or(0),
        )
        .map_err(cfg_err)?;
        if self.kind()? == DataKind::Csv {
            data::standardize_for_scenario(&mut dataset, &scenario).map_err(cfg_err)?;
        }
        Ok((dataset, scenario))
    }
}
