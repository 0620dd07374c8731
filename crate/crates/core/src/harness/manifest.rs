use serde::{Deserialize, Serialize};

use super::synthetic::SyntheticSpec;
use crate::distill::KdConfig;
use crate::error::{Error, Result};
use crate::metrics::{DEFAULT_ACE_BINS, DEFAULT_ECE_BINS};
use crate::nn::TrainConfig;

/// One teacher of the zoo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooEntry {
    pub id: String,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    #[serde(default)]
    pub init_seed: u64,
}

/// The fixed student architecture and its training recipe. The recipe's
/// `seed` is replaced by each experiment seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentSpec {
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibratorChoice {
    None,
    FixedTemperature,
    FittedTemperature,
    VectorScaling,
    MixupTeacher,
}

impl CalibratorChoice {
    pub const ALL: [CalibratorChoice; 5] = [
        CalibratorChoice::None,
        CalibratorChoice::FixedTemperature,
        CalibratorChoice::FittedTemperature,
        CalibratorChoice::VectorScaling,
        CalibratorChoice::MixupTeacher,
    ];

    pub fn label(self) -> &'static str {
        match self {
            CalibratorChoice::None => "none",
            CalibratorChoice::FixedTemperature => "fixed_temperature",
            CalibratorChoice::FittedTemperature => "fitted_temperature",
            CalibratorChoice::VectorScaling => "vector_scaling",
            CalibratorChoice::MixupTeacher => "mixup_teacher",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    /// Zoo id of the teacher; the most accurate teacher when absent.
    #[serde(default)]
    pub teacher: Option<String>,
    pub t_cal_grid: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSpec {
    /// Zoo ids to compare calibrators on.
    pub teachers: Vec<String>,
    pub calibrators: Vec<CalibratorChoice>,
    /// Mixup Beta parameter used when retraining a teacher for `mixup_teacher`.
    #[serde(default = "default_mixup_alpha")]
    pub mixup_alpha: f64,
}

fn default_mixup_alpha() -> f64 {
    0.2
}

fn default_m_bins() -> usize {
    DEFAULT_ECE_BINS
}

fn default_r_bins() -> usize {
    DEFAULT_ACE_BINS
}

/// Everything needed to rerun an experiment from one JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: SyntheticSpec,
    pub zoo: Vec<ZooEntry>,
    pub student: StudentSpec,
    /// KD settings. For the correlation study the calibration temperature is
    /// forced to 1 (plain KD); `t_cal` is the fixed-temperature calibrator
    /// used by the calibrator comparison.
    pub kd: KdConfig,
    pub seeds: Vec<u64>,
    #[serde(default = "default_m_bins")]
    pub m_bins: usize,
    #[serde(default = "default_r_bins")]
    pub r_bins: usize,
    #[serde(default)]
    pub ablation: Option<AblationSpec>,
    #[serde(default)]
    pub comparison: Option<ComparisonSpec>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.kd.validate()?;
        self.student.train.validate()?;
        if self.zoo.is_empty() {
            return Err(Error::Config("zoo is empty".into()));
        }
        let mut ids = std::collections::BTreeSet::new();
        for z in &self.zoo {
            z.train.validate()?;
            if !ids.insert(z.id.as_str()) {
                return Err(Error::Config(format!("duplicate zoo id {:?}", z.id)));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("no seeds".into()));
        }
        if let Some(a) = &self.ablation {
            if a.t_cal_grid.is_empty() || a.seeds.is_empty() {
                return Err(Error::Config("ablation needs a grid and seeds".into()));
            }
            if let Some(t) = a.teacher.as_ref().filter(|t| !ids.contains(t.as_str())) {
                return Err(Error::Config(format!("ablation teacher {t:?} not in zoo")));
            }
        }
        if let Some(c) = &self.comparison {
            if let Some(t) = c.teachers.iter().find(|t| !ids.contains(t.as_str())) {
                return Err(Error::Config(format!("comparison teacher {t:?} not in zoo")));
            }
        }
        Ok(())
    }

    /// The desk-scale benchmark: a 10-class Gaussian problem and a 23-teacher
    /// zoo spanning depth, width, training length, weight decay and mixup.
    pub fn default_benchmark() -> Self {
        // (hidden, epochs, weight decay, seed, mixup alpha)
        let zoo: [(&[usize], usize, f64, u64, f64); 23] = [
            (&[64], 10, 5e-4, 200, 0.0),
            (&[128], 20, 5e-4, 201, 0.0),
            (&[256], 40, 5e-5, 202, 0.0),
            (&[128, 128], 15, 5e-4, 203, 0.0),
            (&[128, 128], 40, 5e-5, 204, 0.0),
            (&[256, 256], 20, 5e-5, 205, 0.0),
            (&[256, 256], 60, 0.0, 206, 0.0),
            (&[64, 64, 64], 30, 5e-4, 207, 0.0),
            (&[128, 128, 128], 60, 0.0, 208, 0.0),
            (&[256], 80, 0.0, 209, 0.0),
            (&[512], 60, 0.0, 210, 0.0),
            (&[256, 256, 256], 40, 0.0, 211, 0.0),
            (&[32], 5, 5e-4, 300, 0.0),
            (&[16], 20, 5e-4, 301, 0.0),
            (&[64], 3, 0.0, 302, 0.0),
            (&[512, 512], 100, 0.0, 400, 0.0),
            (&[32], 80, 0.0, 401, 0.0),
            (&[64], 60, 0.0, 402, 0.0),
            (&[16], 100, 0.0, 403, 0.0),
            (&[256, 256], 60, 0.0, 500, 0.2),
            (&[512, 512], 100, 0.0, 501, 0.2),
            (&[128, 128], 40, 5e-5, 502, 0.4),
            (&[256], 40, 5e-5, 503, 0.2),
        ];
        let zoo = zoo
            .iter()
            .map(|&(hidden, epochs, wd, seed, alpha)| ZooEntry {
                id: zoo_id(hidden, epochs, wd, alpha),
                hidden: hidden.to_vec(),
                train: TrainConfig {
                    epochs,
                    batch_size: 64,
                    lr0: 0.1,
                    lr_decay_epochs: scaled_decay(epochs),
                    lr_decay_factor: 0.1,
                    momentum: 0.9,
                    weight_decay: wd,
                    seed,
                    mixup_alpha: alpha,
                },
                init_seed: seed,
            })
            .collect();
        Manifest {
            dataset: SyntheticSpec::default(),
            zoo,
            student: StudentSpec {
                hidden: vec![24],
                train: TrainConfig::default(),
            },
            kd: KdConfig::default(),
            seeds: vec![1, 2],
            m_bins: DEFAULT_ECE_BINS,
            r_bins: DEFAULT_ACE_BINS,
            ablation: Some(AblationSpec {
                teacher: Some("mlp512x512-e100-wd0".to_string()),
                t_cal_grid: vec![1.0, 1.5, 2.0, 3.0],
                seeds: vec![1, 2, 3],
            }),
            comparison: Some(ComparisonSpec {
                teachers: vec!["mlp64-e10-wd5e-4".to_string(), "mlp512x512-e100-wd0".to_string()],
                calibrators: CalibratorChoice::ALL.to_vec(),
                mixup_alpha: 0.2,
            }),
        }
    }
}

/// `mlp{widths}-e{epochs}-wd{decay}[-mix{alpha}]`, e.g. `mlp128x128-e40-wd5e-5`.
pub fn zoo_id(hidden: &[usize], epochs: usize, weight_decay: f64, mixup_alpha: f64) -> String {
    let widths: Vec<String> = hidden.iter().map(usize::to_string).collect();
    let wd = if weight_decay == 0.0 {
        "0".to_string()
    } else {
        format!("{weight_decay:e}")
    };
    let mut id = format!("mlp{}-e{epochs}-wd{wd}", widths.join("x"));
    if mixup_alpha > 0.0 {
        id.push_str(&format!("-mix{mixup_alpha}"));
    }
    id
}

/// Decay epochs at the same relative positions as 35 and 50 of 60.
pub fn scaled_decay(epochs: usize) -> Vec<usize> {
    let mut out: Vec<usize> = [35.0 / 60.0, 50.0 / 60.0]
        .iter()
        .map(|f| (f * epochs as f64).round() as usize)
        .filter(|&e| e > 0 && e < epochs)
        .collect();
    out.dedup();
    out
}
