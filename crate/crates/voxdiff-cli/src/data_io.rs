//! Dataset directory layout: volumes/ with VOL1 files, manifest.csv with one
//! row per subject, and the resolved run.config sidecar.

use std::path::Path;

use voxdiff::conditioning::{Level, PromptClass, Task};
use voxdiff::error::{Error, Result};
use voxdiff::phantoms::{DatasetSplit, PhantomDataset, PhantomExample};
use voxdiff::volfile;

pub const MANIFEST_HEADER: &str = "subject_seed,class,split,path,prompt";

pub fn write_dataset(dataset: &PhantomDataset, dir: &Path) -> Result<()> {
    let vol_dir = dir.join("volumes");
    std::fs::create_dir_all(&vol_dir)?;
    let split_of = |i: usize| -> &'static str {
        if dataset.split.train.contains(&i) {
            "train"
        } else if dataset.split.val.contains(&i) {
            "val"
        } else {
            "test"
        }
    };
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for (i, ex) in dataset.examples.iter().enumerate() {
        let rel = format!("volumes/{i:04}.vol");
        volfile::save(&ex.volume, &dir.join(&rel))?;
        manifest.push_str(&format!(
            "{},{},{},{},{}\n",
            ex.subject_seed,
            ex.class.level.name(),
            split_of(i),
            rel,
            ex.prompt
        ));
    }
    std::fs::write(dir.join("manifest.csv"), manifest)?;
    Ok(())
}

/// Load a dataset directory written by `gen-data`.
pub fn load_dataset(dir: &Path, task: Task, seed: u64) -> Result<PhantomDataset> {
    let manifest_path = dir.join("manifest.csv");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| {
        Error::data(format!(
            "cannot read manifest {}: {e}",
            manifest_path.display()
        ))
    })?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != MANIFEST_HEADER {
        return Err(Error::data(format!(
            "manifest header {header:?} does not match {MANIFEST_HEADER:?}"
        )));
    }
    let mut examples = Vec::new();
    let mut split = DatasetSplit::default();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(5, ',').collect();
        if fields.len() != 5 {
            return Err(Error::data(format!(
                "manifest row {} has {} fields, expected 5",
                lineno + 2,
                fields.len()
            )));
        }
        let subject_seed: u64 = fields[0]
            .parse()
            .map_err(|_| Error::data(format!("bad subject seed {:?}", fields[0])))?;
        let level = Level::parse(fields[1]).map_err(|e| Error::data(e.to_string()))?;
        let idx = examples.len();
        match fields[2] {
            "train" => split.train.push(idx),
            "val" => split.val.push(idx),
            "test" => split.test.push(idx),
            other => return Err(Error::data(format!("unknown split {other:?}"))),
        }
        let volume = volfile::load(&dir.join(fields[3]))?;
        examples.push(PhantomExample {
            volume,
            class: PromptClass::new(task, level),
            subject_seed,
            lesion_seed: 0,
            prompt: fields[4].to_string(),
        });
    }
    if examples.is_empty() {
        return Err(Error::data("manifest has no rows"));
    }
    split.validate(examples.len())?;
    Ok(PhantomDataset {
        task,
        seed,
        examples,
        split,
    })
}

/// Read the task and seed back from a dataset's run.config sidecar.
pub fn dataset_meta(dir: &Path) -> Result<(Task, u64)> {
    let path = dir.join("run.config");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    let mut task = None;
    let mut seed = None;
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            match k.trim() {
                "task" => task = Some(Task::parse(v.trim())?),
                "seed" => {
                    seed = Some(
                        v.trim()
                            .parse::<u64>()
                            .map_err(|_| Error::data("bad seed in run.config"))?,
                    )
                }
                _ => {}
            }
        }
    }
    match (task, seed) {
        (Some(t), Some(s)) => Ok((t, s)),
        _ => Err(Error::data(format!(
            "{} is missing task or seed",
            path.display()
        ))),
    }
}
