//! Materializes a dataset spec and split recipe into samples plus named id
//! lists that stages select their training data from.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;

use detlab_core::dataset::{
    generate_shapes, load_voc_detection, ClassCatalog, ImageSample, ShapeType, ShapesConfig,
};
use detlab_core::error::{Error, Result};
use detlab_core::split::{complement, make_prefix_fractions, make_task_partition};

use crate::config::{parse_fraction, ExperimentConfig, DATA_ROOT_ENV};

pub struct Workbench {
    pub catalog: ClassCatalog,
    pub pool: Vec<ImageSample>,
    pub val: Vec<ImageSample>,
    /// Split name to member ids; "full" always present.
    pub splits: BTreeMap<String, Vec<String>>,
    index: HashMap<String, usize>,
}

impl Workbench {
    pub fn select(&self, split: &str) -> Result<Vec<ImageSample>> {
        let ids = self.splits.get(split).ok_or_else(|| {
            let known: Vec<&str> = self.splits.keys().map(String::as_str).collect();
            Error::Config(format!(
                "split `{split}` is not materialized (have: {})",
                known.join(", ")
            ))
        })?;
        ids.iter()
            .map(|id| {
                self.index
                    .get(id)
                    .map(|&i| self.pool[i].clone())
                    .ok_or_else(|| Error::Consistency(format!("split id {id} not in pool")))
            })
            .collect()
    }
}

pub fn materialize(cfg: &ExperimentConfig) -> Result<Workbench> {
    let (catalog, pool, val) = match cfg.dataset.kind.as_str() {
        "shapes" => {
            let catalog = ClassCatalog::shapes();
            let base = ShapesConfig {
                n_images: cfg.dataset.train_images,
                image_size: cfg.dataset.image_size,
                shapes_per_image: (cfg.dataset.shapes_min, cfg.dataset.shapes_max),
                shape_types: vec![ShapeType::Rectangle, ShapeType::Circle, ShapeType::Triangle],
                seed: cfg.dataset.seed,
            };
            let pool = generate_shapes(&base, &catalog)?;
            let val_cfg = ShapesConfig {
                n_images: cfg.dataset.val_images,
                seed: cfg.dataset.seed.wrapping_add(1),
                ..base
            };
            let val = generate_shapes(&val_cfg, &catalog)?;
            (catalog, pool, val)
        }
        "voc" => {
            let root: PathBuf = match std::env::var_os(DATA_ROOT_ENV) {
                Some(v) => PathBuf::from(v),
                None => cfg.dataset.root.clone().ok_or_else(|| {
                    Error::Config(format!(
                        "dataset: voc needs `root` or the {DATA_ROOT_ENV} variable"
                    ))
                })?,
            };
            let catalog = ClassCatalog::voc();
            let train_split = cfg.dataset.train_split.as_deref().unwrap_or("train");
            let val_split = cfg.dataset.val_split.as_deref().unwrap_or("val");
            let pool = load_voc_detection(&root, train_split, &catalog)?;
            let val = load_voc_detection(&root, val_split, &catalog)?;
            (catalog, pool, val)
        }
        other => {
            return Err(Error::Config(format!(
                "dataset: kind `{other}` is not one of shapes|voc"
            )));
        }
    };

    let ids: Vec<String> = pool.iter().map(|s| s.id.clone()).collect();
    let mut splits = BTreeMap::new();
    splits.insert("full".to_string(), ids.clone());

    if !cfg.splits.fractions.is_empty() {
        let fractions = cfg
            .splits
            .fractions
            .iter()
            .map(|f| parse_fraction(f))
            .collect::<Result<Vec<_>>>()?;
        let manifests = make_prefix_fractions(&ids, &fractions, cfg.dataset.seed)?;
        for m in &manifests {
            if cfg.splits.complements {
                let c = complement(m, &ids)?;
                splits.insert(c.name.clone(), c.ids);
            }
        }
        for m in manifests {
            splits.insert(m.name.clone(), m.ids);
        }
    }
    if let Some(f) = &cfg.splits.det_fraction {
        let part = make_task_partition(&ids, parse_fraction(f)?, cfg.dataset.seed)?;
        splits.insert("det".to_string(), part.det_ids);
        splits.insert("seg".to_string(), part.seg_ids);
    }

    let index = pool
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.clone(), i))
        .collect();
    Ok(Workbench {
        catalog,
        pool,
        val,
        splits,
        index,
    })
}
