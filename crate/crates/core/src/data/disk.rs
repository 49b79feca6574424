//! Dataset directories.
//!
//! ```text
//! <root>/meta.txt          key=value: seed and generator config
//! <root>/universe.txt      one category per line, universe order
//! <root>/<id>/image.blt0   [H,W,3]
//! <root>/<id>/labels.pgm   0 background, k means categories.txt line k
//! <root>/<id>/categories.txt
//! ```

use std::fs;
use std::path::Path;

use crate::data::folds::{make_fold, NUM_FOLDS};
use crate::data::sample::{labels_from_one_hot, one_hot_mask, Dataset, SegmentationSample};
use crate::data::synthetic::SyntheticConfig;
use crate::error::{Error, Result};
use crate::io::{load_tensor, read_pgm, save_tensor, write_atomic, write_pgm};
use crate::tensor::Tensor;

pub const META_FILE: &str = "meta.txt";
pub const UNIVERSE_FILE: &str = "universe.txt";

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn lines(text: &str) -> Vec<String> {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect()
}

pub fn meta_text(seed: u64, cfg: &SyntheticConfig) -> String {
    let allowed = match &cfg.allowed {
        Some(a) => a.iter().map(|j| j.to_string()).collect::<Vec<_>>().join(","),
        None => "all".into(),
    };
    format!(
        "seed={seed}\nnum_images={}\nheight={}\nwidth={}\nuniverse_size={}\nshapes_per_image={}\nallowed={allowed}\nbackground_noise={}\nobject_noise={}\nid_prefix={}\n",
        cfg.num_images,
        cfg.height,
        cfg.width,
        cfg.universe_size,
        cfg.shapes_per_image,
        cfg.background_noise,
        cfg.object_noise,
        cfg.id_prefix
    )
}

/// Writes `dataset` under `root`. `meta` is the generator provenance, when known.
pub fn save_dataset(dataset: &Dataset, root: &Path, meta: Option<(u64, &SyntheticConfig)>) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let meta = meta.map_or_else(|| "generator=none\n".to_string(), |(s, c)| meta_text(s, c));
    write_atomic(&root.join(META_FILE), meta.as_bytes())?;
    write_atomic(&root.join(UNIVERSE_FILE), (dataset.universe.join("\n") + "\n").as_bytes())?;
    for s in &dataset.samples {
        if s.categories.len() > 255 {
            return Err(Error::BadConfig("labels.pgm holds at most 255 categories per image".into()));
        }
        let dir = root.join(&s.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_tensor(&s.image, &dir.join("image.blt0"))?;
        let labels: Vec<u8> = labels_from_one_hot(&s.mask)?.data().iter().map(|&l| l as u8).collect();
        write_pgm(&dir.join("labels.pgm"), s.width(), s.height(), &labels)?;
        write_atomic(&dir.join("categories.txt"), (s.categories.join("\n") + "\n").as_bytes())?;
    }
    Ok(())
}

/// Reads a dataset directory; samples come back sorted by id.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let universe_path = root.join(UNIVERSE_FILE);
    if !universe_path.exists() {
        return Err(Error::ManifestMissing(universe_path));
    }
    let universe = lines(&read_text(&universe_path)?);
    let mut ids: Vec<String> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    ids.sort();
    let mut samples = Vec::with_capacity(ids.len());
    for id in ids {
        let dir = root.join(&id);
        let image = load_tensor(&dir.join("image.blt0"))?;
        let categories = lines(&read_text(&dir.join("categories.txt"))?);
        let (w, h, px) = read_pgm(&dir.join("labels.pgm"))?;
        if image.shape() != [h, w, 3] {
            return Err(Error::DimensionMismatch(format!("{id}: image {:?} vs labels {h}x{w}", image.shape())));
        }
        let label_map = Tensor::new(&[h, w], px.iter().map(|&l| l as f64).collect())?;
        let mask = one_hot_mask(&label_map, &categories)?;
        samples.push(SegmentationSample { id, image, mask, categories });
    }
    let ds = Dataset { universe, samples };
    ds.validate()?;
    Ok(ds)
}

/// Parses `meta.txt` back into the generator seed and config.
pub fn load_meta(root: &Path) -> Result<(u64, SyntheticConfig)> {
    let path = root.join(META_FILE);
    let text = read_text(&path)?;
    let mut cfg = SyntheticConfig::default();
    let mut seed = None;
    let bad = |k: &str, v: &str| Error::BadConfig(format!("meta.txt: bad value {v:?} for {k}"));
    for line in lines(&text) {
        let Some((k, v)) = line.split_once('=') else { continue };
        let n = || v.parse::<usize>().map_err(|_| bad(k, v));
        let f = || v.parse::<f64>().map_err(|_| bad(k, v));
        match k {
            "seed" => seed = Some(v.parse::<u64>().map_err(|_| bad(k, v))?),
            "num_images" => cfg.num_images = n()?,
            "height" => cfg.height = n()?,
            "width" => cfg.width = n()?,
            "universe_size" => cfg.universe_size = n()?,
            "shapes_per_image" => cfg.shapes_per_image = n()?,
            "background_noise" => cfg.background_noise = f()?,
            "object_noise" => cfg.object_noise = f()?,
            "id_prefix" => cfg.id_prefix = v.to_string(),
            "allowed" if v == "all" => cfg.allowed = None,
            "allowed" => {
                cfg.allowed = Some(v.split(',').map(|s| s.parse().map_err(|_| bad(k, v))).collect::<Result<_>>()?)
            }
            _ => {}
        }
    }
    let seed = seed.ok_or_else(|| Error::BadConfig("meta.txt has no seed (not a generated dataset)".into()))?;
    Ok((seed, cfg))
}

/// Writes `fold_<i>.json` for every fold of `universe` into `dir`.
pub fn export_folds(universe: &[String], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for i in 0..NUM_FOLDS {
        let fold = make_fold(i, universe)?;
        write_atomic(&dir.join(format!("fold_{i}.json")), fold.to_json()?.as_bytes())?;
    }
    Ok(())
}
