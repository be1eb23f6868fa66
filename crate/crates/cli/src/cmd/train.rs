use anyhow::Result;
use serde::Serialize;
use sonic::data::SceneKind;
use sonic::fields::SeedRng;
use sonic::flow::{train_flow, Architecture, ClassId, ConvVelocityNet, TrainConfig, TrainSample};

use crate::args::{InputFlags, TrainArgs};
use crate::common::{load_items, write_csv};

#[derive(Serialize)]
struct LossRow {
    epoch: usize,
    loss: f64,
}

pub fn run(a: &TrainArgs) -> Result<()> {
    let items = load_items(&InputFlags {
        manifest: Some(a.manifest.clone()),
        image: None,
        mask: None,
    })?;
    let channels = items.first().map_or(1, |i| i.image.shape().channels);
    let num_classes = if a.conditional {
        SceneKind::ALL.len()
    } else {
        0
    };
    let samples: Vec<TrainSample> = items
        .into_iter()
        .map(|item| TrainSample {
            class: match (a.conditional, item.scene_kind) {
                (true, Some(kind)) => kind.class_id(),
                _ => ClassId::NULL,
            },
            image: item.image,
        })
        .collect();
    let net = ConvVelocityNet::new(
        Architecture::new(channels, a.hidden, num_classes),
        &mut SeedRng::new(a.init_seed),
    )?;
    let config = TrainConfig {
        epochs: a.epochs,
        steps_per_epoch: a.steps_per_epoch,
        batch_size: a.batch,
        lr: a.lr,
        final_lr_fraction: a.final_lr_fraction,
        class_dropout: a.class_dropout,
        seed: a.seed,
    };
    let (net, report) = train_flow(net, &samples, &config)?;
    net.save(&a.out.join("model.json"))?;
    write_csv(
        &a.out.join("loss.csv"),
        report
            .epoch_losses
            .iter()
            .enumerate()
            .map(|(epoch, &loss)| LossRow { epoch, loss }),
    )
}
