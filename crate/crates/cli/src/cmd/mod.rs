mod ablate;
mod data;
mod eval;
mod gradcheck;
mod inpaint;
mod train;

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sonic::SonicError;

use crate::args::{Command, InputFlags};
use crate::common::{at, thread_pool};
use crate::snapshot::Snapshot;

pub fn run(command: Command) -> Result<()> {
    let command = absolutize(command)?;
    if let Command::Replay(args) = &command {
        return replay(&args.snapshot, &args.out);
    }
    let out = command.out_dir().to_path_buf();
    std::fs::create_dir_all(&out).with_context(|| at(&out))?;
    Snapshot::new(command.clone()).write(&out)?;
    let pool = thread_pool()?;
    pool.install(|| match &command {
        Command::MakeData(a) => data::run(a),
        Command::Train(a) => train::run(a),
        Command::Inpaint(a) => inpaint::run(a),
        Command::Ablate(a) => ablate::run(a),
        Command::Gradcheck(a) => gradcheck::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Replay(_) => unreachable!("handled above"),
    })
}

fn replay(snapshot: &Path, out: &Path) -> Result<()> {
    let snap = Snapshot::load(snapshot)?;
    if snap.version != env!("CARGO_PKG_VERSION") {
        eprintln!(
            "warning: snapshot was written by version {}, running {}",
            snap.version,
            env!("CARGO_PKG_VERSION")
        );
    }
    let mut command = snap.command;
    if let Command::Replay(_) = command {
        return Err(SonicError::Format(
            "a snapshot cannot contain a replay".into(),
        ))
        .with_context(|| at(snapshot));
    }
    if same_dir(command.out_dir(), out) {
        return Err(anyhow::Error::new(SonicError::Config {
            key: "out".into(),
            reason: "replay must write to a directory other than the original run's".into(),
        }));
    }
    command.set_out_dir(out.to_path_buf());
    run(command)
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => a == b,
    }
}

/// Makes every path in the command absolute so snapshots replay from any
/// working directory.
fn absolutize(mut command: Command) -> Result<Command> {
    fn abs(p: &mut PathBuf) -> Result<()> {
        *p = std::path::absolute(&*p).with_context(|| at(&*p))?;
        Ok(())
    }
    fn abs_input(i: &mut InputFlags) -> Result<()> {
        for p in [&mut i.manifest, &mut i.image, &mut i.mask]
            .into_iter()
            .flatten()
        {
            abs(p)?;
        }
        Ok(())
    }
    match &mut command {
        Command::MakeData(a) => abs(&mut a.out)?,
        Command::Train(a) => {
            abs(&mut a.manifest)?;
            abs(&mut a.out)?;
        }
        Command::Inpaint(a) => {
            abs(&mut a.model)?;
            abs_input(&mut a.input)?;
            abs(&mut a.out)?;
        }
        Command::Ablate(a) => {
            abs(&mut a.model)?;
            abs(&mut a.manifest)?;
            abs(&mut a.out)?;
        }
        Command::Gradcheck(a) => {
            abs(&mut a.model)?;
            abs_input(&mut a.input)?;
            abs(&mut a.out)?;
        }
        Command::Eval(a) => {
            abs(&mut a.results)?;
            abs_input(&mut a.input)?;
            abs(&mut a.out)?;
        }
        Command::Replay(a) => {
            abs(&mut a.snapshot)?;
            abs(&mut a.out)?;
        }
    }
    Ok(command)
}
