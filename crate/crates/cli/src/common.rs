use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sonic::data::{Manifest, SceneKind};
use sonic::fields::{Field, MaskField};
use sonic::flow::{ClassId, ConvVelocityNet, GuidanceConfig, SamplerConfig, VelocityModel};
use sonic::inpaint::InpaintConfig;
use sonic::io;
use sonic::seedopt::OptimConfig;
use sonic::SonicError;

use crate::args::{InputFlags, PipelineFlags, Toggle};

/// Context attached to an error naming the flag, file or setting at fault.
#[derive(Debug)]
pub struct At(pub String);

impl fmt::Display for At {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn at(key: impl AsRef<Path>) -> At {
    At(key.as_ref().display().to_string())
}

/// `error: kind=<kind> key=<key> msg=<message>` on a single line.
pub fn error_line(err: &anyhow::Error) -> String {
    let sonic = err.chain().find_map(|e| e.downcast_ref::<SonicError>());
    let kind = match sonic {
        Some(e) => e.kind(),
        None if err.chain().any(|e| e.is::<std::io::Error>()) => "io",
        None => "error",
    };
    let context = err.downcast_ref::<At>().map(|a| a.0.clone());
    let key = match sonic {
        Some(SonicError::Config { key, .. }) => Some(key.clone()),
        _ => None,
    }
    .or_else(|| context.clone())
    .unwrap_or_else(|| "-".into());
    let msg = err
        .chain()
        .map(|e| e.to_string())
        .filter(|m| Some(m) != context.as_ref())
        .collect::<Vec<_>>()
        .join(": ");
    let flat = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ");
    format!(
        "error: kind={kind} key={} msg={}",
        flat(&key).replace(' ', "_"),
        flat(&msg)
    )
}

/// Worker pool sized by `SONIC_THREADS` (all cores when unset).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("SONIC_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| SonicError::Config {
                key: "SONIC_THREADS".into(),
                reason: format!("expected a positive integer, got `{v}`"),
            })?;
        builder = builder.num_threads(n);
    }
    Ok(builder.build()?)
}

pub fn load_model(path: &Path) -> Result<ConvVelocityNet<f64>> {
    ConvVelocityNet::load(path).with_context(|| at(path))
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path).with_context(|| at(path))
}

pub fn read_field(path: &Path) -> Result<Field> {
    io::read_field(path).with_context(|| at(path))
}

pub fn read_mask(path: &Path) -> Result<MaskField> {
    io::read_mask(path).with_context(|| at(path))
}

/// One image/mask pair to process.
pub struct Item {
    pub id: Option<usize>,
    pub scene_kind: Option<SceneKind>,
    pub image: Field,
    pub mask: MaskField,
}

impl Item {
    /// Output directory of this item under `out`.
    pub fn dir(&self, out: &Path) -> PathBuf {
        match self.id {
            Some(id) => out.join(format!("{id:04}")),
            None => out.to_path_buf(),
        }
    }

    pub fn label(&self) -> String {
        self.id.map_or_else(|| "-".into(), |id| id.to_string())
    }
}

pub fn load_items(input: &InputFlags) -> Result<Vec<Item>> {
    match (&input.manifest, &input.image, &input.mask) {
        (Some(manifest), _, _) => {
            let m = load_manifest(manifest)?;
            let base = manifest.parent().unwrap_or(Path::new("."));
            m.entries
                .iter()
                .map(|e| {
                    Ok(Item {
                        id: Some(e.id),
                        scene_kind: Some(e.scene_kind),
                        image: read_field(&base.join(&e.scene_file))?,
                        mask: read_mask(&base.join(&e.mask_file))?,
                    })
                })
                .collect()
        }
        (None, Some(image), Some(mask)) => Ok(vec![Item {
            id: None,
            scene_kind: None,
            image: read_field(image)?,
            mask: read_mask(mask)?,
        }]),
        _ => Err(SonicError::Config {
            key: "manifest".into(),
            reason: "either --manifest or both --image and --mask are required".into(),
        }
        .into()),
    }
}

/// Guidance class: explicit flag, else the scene kind for conditional
/// models, else the null class.
pub fn resolve_class(
    flags: &PipelineFlags,
    model: &dyn VelocityModel<f64>,
    item: &Item,
) -> ClassId {
    match (flags.class, item.scene_kind) {
        (Some(c), _) => ClassId(c),
        (None, Some(kind)) if model.num_classes() > 0 => kind.class_id(),
        _ => ClassId::NULL,
    }
}

pub fn inpaint_config(flags: &PipelineFlags, class: ClassId) -> Result<InpaintConfig> {
    let config = InpaintConfig {
        codec: flags.codec,
        encoder_input: flags.encoder.into(),
        sampler: SamplerConfig { steps: flags.steps },
        guidance: GuidanceConfig {
            scale: flags.cfg_scale,
            ..GuidanceConfig::default().with_class(class)
        },
        optim: OptimConfig {
            lr: flags.lr,
            iterations: flags.iters,
            domain: flags.domain,
            gradient_masking: flags.grad_mask == Toggle::On,
            spectral_scaling: flags.spectral_scaling.into(),
            ..OptimConfig::default()
        },
        seed: flags.seed,
    };
    config.validate()?;
    Ok(config)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    io::write_atomic(path, text.as_bytes()).with_context(|| at(path))
}

pub fn write_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    io::write_atomic(path, &bytes).with_context(|| at(path))
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
