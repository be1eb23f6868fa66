use anyhow::Result;
use sonic::data::{gen_instances, Manifest, ManifestEntry};
use sonic::fields::{Field, Shape};
use sonic::io;

use crate::args::MakeDataArgs;
use crate::common::at;
use anyhow::Context;

pub fn run(a: &MakeDataArgs) -> Result<()> {
    let shape = Shape::new(a.channels, a.height, a.width);
    let instances: Vec<sonic::data::Instance<f64>> =
        gen_instances(a.count, a.seed, shape, &a.scenes, a.mask)?;
    let mut entries = Vec::with_capacity(instances.len());
    for inst in &instances {
        let scene_file = format!("scene_{:04}.snf", inst.id);
        let mask_file = format!("mask_{:04}.snf", inst.id);
        let scene_path = a.out.join(&scene_file);
        io::write_field(&scene_path, &inst.image).with_context(|| at(&scene_path))?;
        let mask_path = a.out.join(&mask_file);
        io::write_mask(&mask_path, &inst.mask).with_context(|| at(&mask_path))?;
        let preview: Field = inst
            .image
            .zip_map(&inst.mask.to_field(shape.channels), |v, m| {
                v * (0.25 + 0.75 * m)
            })?;
        io::write_pgm(
            &a.out.join(format!("scene_{:04}.pgm", inst.id)),
            &preview,
            0.0,
            1.0,
        )?;
        entries.push(ManifestEntry {
            id: inst.id,
            scene_file: scene_file.into(),
            mask_file: mask_file.into(),
            seed: inst.seed,
            scene_kind: inst.scene_kind,
            mask_kind: inst.mask_kind,
        });
    }
    let path = a.out.join("manifest.json");
    Manifest { shape, entries }
        .save(&path)
        .with_context(|| at(&path))?;
    Ok(())
}
