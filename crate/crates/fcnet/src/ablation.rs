//! Ablation driver: module removal, the N_k sweep, and calibration on/off
//! per N_k, each trained over several seeds and summarised by the median.

use std::path::Path;

use fcnet_core::metrics::{evaluate, EvalReport, PR_THRESHOLDS};
use fcnet_core::model::FcNet;
use fcnet_core::synthdata::Sample;
use fcnet_core::train::Trainer;
use fcnet_core::Config;
use log::{info, warn};

use crate::driver::{run_training, TrainOptions};
use crate::error::FormatError;
use crate::tables::{fmt, pr_headers};

pub const NK_SWEEP: [usize; 7] = [1, 2, 4, 8, 16, 24, 32];
pub const ECM_PER_NK: [usize; 3] = [8, 16, 24];
/// N_k used by the module-removal table.
pub const DEFAULT_NK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Study {
    /// full, −ECM, −EGM−ECM at the default N_k.
    Modules,
    /// full model over [`NK_SWEEP`].
    NkSweep,
    /// full and −ECM over [`ECM_PER_NK`].
    EcmPerNk,
}

impl Study {
    pub const ALL: [Study; 3] = [Study::Modules, Study::NkSweep, Study::EcmPerNk];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Modules => "modules",
            Self::NkSweep => "nk_sweep",
            Self::EcmPerNk => "ecm_per_nk",
        }
    }

    pub fn parse(s: &str) -> Result<Self, FormatError> {
        Self::ALL.into_iter().find(|t| t.as_str() == s).ok_or_else(|| {
            FormatError::Invalid(format!("unknown study {s:?}; expected modules, nk_sweep or ecm_per_nk"))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Variant {
    pub n_k: usize,
    pub use_egm: bool,
    pub use_ecm: bool,
    /// Studies that requested this configuration.
    pub studies: Vec<Study>,
}

impl Variant {
    pub fn name(&self) -> String {
        let base = match (self.use_egm, self.use_ecm) {
            (true, true) => "full",
            (true, false) => "-ECM",
            (false, true) => "-EGM",
            (false, false) => "-EGM-ECM",
        };
        format!("{base}@N_k={}", self.n_k)
    }

    pub fn apply(&self, base: &Config) -> Config {
        Config {
            n_k: self.n_k,
            use_egm: self.use_egm,
            use_ecm: self.use_ecm,
            ..base.clone()
        }
    }
}

/// Configurations requested by `studies`, shared ones listed once.
pub fn variant_grid(studies: &[Study]) -> Vec<Variant> {
    let mut out: Vec<Variant> = Vec::new();
    let mut add = |n_k, use_egm, use_ecm, study| match out
        .iter_mut()
        .find(|v| v.n_k == n_k && v.use_egm == use_egm && v.use_ecm == use_ecm)
    {
        Some(v) => {
            if !v.studies.contains(&study) {
                v.studies.push(study)
            }
        }
        None => out.push(Variant {
            n_k,
            use_egm,
            use_ecm,
            studies: vec![study],
        }),
    };
    for &s in studies {
        match s {
            Study::Modules => {
                add(DEFAULT_NK, true, true, s);
                add(DEFAULT_NK, true, false, s);
                add(DEFAULT_NK, false, false, s);
            }
            Study::NkSweep => NK_SWEEP.iter().for_each(|&k| add(k, true, true, s)),
            Study::EcmPerNk => ECM_PER_NK.iter().for_each(|&k| {
                add(k, true, true, s);
                add(k, true, false, s);
            }),
        }
    }
    out
}

/// Median of a non-empty list (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    /// One entry per seed, in seed order.
    pub runs: Vec<(u64, Result<EvalReport, String>)>,
}

impl AblationRow {
    fn ok(&self) -> Vec<&EvalReport> {
        self.runs.iter().filter_map(|(_, r)| r.as_ref().ok()).collect()
    }

    pub fn median_iou(&self) -> Option<f64> {
        let ok = self.ok();
        (!ok.is_empty()).then(|| median(&ok.iter().map(|r| r.mean_iou).collect::<Vec<_>>()))
    }

    /// Median precision for each threshold.
    pub fn median_precision(&self) -> Option<Vec<f64>> {
        let ok = self.ok();
        (!ok.is_empty()).then(|| {
            (0..PR_THRESHOLDS.len())
                .map(|i| median(&ok.iter().map(|r| r.precision[i].1).collect::<Vec<_>>()))
                .collect()
        })
    }

    pub fn errors(&self) -> Vec<String> {
        self.runs
            .iter()
            .filter_map(|(s, r)| r.as_ref().err().map(|e| format!("seed {s}: {e}")))
            .collect()
    }
}

/// Train and evaluate one variant for one seed.
pub fn run_variant(
    base: &Config,
    v: &Variant,
    seed: u64,
    train: &[Sample],
    val: &[Sample],
) -> Result<EvalReport, String> {
    let cfg = Config { seed, ..v.apply(base) };
    let model = FcNet::new(cfg).map_err(|e| e.to_string())?;
    let out = run_training(Trainer::new(model), train, val, &TrainOptions::default()).map_err(|e| e.to_string())?;
    evaluate(&out.trainer.model, val).map_err(|e| e.to_string())
}

pub fn run_ablation(
    base: &Config,
    studies: &[Study],
    seeds: &[u64],
    train: &[Sample],
    val: &[Sample],
) -> Result<Vec<AblationRow>, FormatError> {
    if seeds.len() < 3 {
        return Err(FormatError::Invalid(format!(
            "ablation needs at least 3 seeds, got {}",
            seeds.len()
        )));
    }
    let grid = variant_grid(studies);
    let mut rows = Vec::with_capacity(grid.len());
    for v in grid {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let r = run_variant(base, &v, seed, train, val);
            match &r {
                Ok(rep) => info!("{} seed {seed}: val IoU {:.4}", v.name(), rep.mean_iou),
                Err(e) => warn!("{} seed {seed} failed: {e}", v.name()),
            }
            runs.push((seed, r));
        }
        rows.push(AblationRow { variant: v, runs });
    }
    Ok(rows)
}

/// `variant, studies, n_k, use_egm, use_ecm, seeds_ok, mean_iou, pr50..pr90,
/// error`, with medians over seeds.
pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<(), FormatError> {
    let f = std::fs::File::create(path).map_err(|e| FormatError::io(path, e))?;
    let mut w = csv::Writer::from_writer(f);
    let mut header: Vec<String> = [
        "variant", "studies", "n_k", "use_egm", "use_ecm", "seeds_ok", "mean_iou",
    ]
    .map(String::from)
    .to_vec();
    header.extend(pr_headers());
    header.push("error".into());
    w.write_record(&header)?;
    for r in rows {
        let v = &r.variant;
        let mut rec = vec![
            v.name(),
            v.studies.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(";"),
            v.n_k.to_string(),
            v.use_egm.to_string(),
            v.use_ecm.to_string(),
            format!("{}/{}", r.ok().len(), r.runs.len()),
        ];
        match (r.median_iou(), r.median_precision()) {
            (Some(m), Some(p)) => {
                rec.push(fmt(m));
                rec.extend(p.into_iter().map(fmt));
            }
            _ => rec.extend(std::iter::repeat_n(String::new(), 1 + PR_THRESHOLDS.len())),
        }
        rec.push(r.errors().join(" | "));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| FormatError::io(path, e))
}
