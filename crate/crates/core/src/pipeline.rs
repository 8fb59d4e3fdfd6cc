//! End-to-end run: generate the world, extract multi-appearance features,
//! compute uncertainty, train the compressor, build targets, train the field,
//! query and evaluate.
//!
//! Every stage writes its artifacts under `out/cache/<stage>-<key>`, where
//! the key hashes the config subtree the stage depends on together with the
//! keys of its inputs. A stage whose directory is complete is loaded instead
//! of recomputed; fresh results are also read back from disk, so cached and
//! fresh runs see identical bytes.

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::autoencoder::{self, AeDataset, MlpParams, TrainConfig, DEFAULT_HIDDEN};
use crate::config;
use crate::error::{Error, Result};
use crate::field::{self, FieldTrainConfig, ViewTargets};
use crate::metrics::{Confusion, QueryMetrics, SegMetrics};
use crate::query::{
    self, CanonicalSet, EnsembleMethod, QueryEmbedding, QueryFile, QuerySpec, QueryTarget, ScoreMap, ScoreSource, StyleVote,
};
use crate::raster::{render_language_maps, PixelWeights};
use crate::seed;
use crate::splat::Scene;
use crate::tensor::{write_atomic, Mask, Tensor};
use crate::uncertainty::{self, UncertaintyKind, UncertaintyMap};
use crate::wildscene::{self, gen_scene, SceneSpec, World};

const COMPLETE: &str = "COMPLETE";

/// Which views the evaluation scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalViews {
    #[default]
    OccluderFree,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    #[serde(flatten)]
    pub scene: SceneSpec,
    /// Scene config file; replaces the inline scene keys when set.
    pub scene_spec: Option<PathBuf>,
    /// Semantic levels, each trained as an independent field.
    pub levels: usize,
    pub tau: f64,
    pub tau_u: f64,
    /// Mean-filter size applied to fused maps; 1 disables smoothing.
    pub kernel: usize,
    pub ae_epochs: usize,
    pub ae_learning_rate: f64,
    pub ae_batch_size: usize,
    pub ae_hidden: Vec<usize>,
    pub ae_max_samples: usize,
    pub field_iterations: usize,
    pub field_learning_rate: f64,
    pub ensemble: EnsembleMethod,
    pub use_tum: bool,
    pub use_aum: bool,
    pub background_filter: bool,
    pub eval_views: EvalViews,
    /// Query file (`label<TAB>class_id|style`); defaults to every object class.
    pub queries: Option<PathBuf>,
    /// Candidate styles for voting when the query file lists none.
    pub styles: Vec<String>,
    /// Ablation variants and seeds for the `ablate` command.
    pub variants: Vec<String>,
    pub seeds: Vec<u64>,
    /// Reuse complete stage directories.
    pub cache: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let ae = TrainConfig::default();
        let field = FieldTrainConfig::default();
        Self {
            scene: SceneSpec::default(),
            scene_spec: None,
            levels: 1,
            tau: query::DEFAULT_TAU,
            tau_u: ae.tau_u,
            kernel: query::DEFAULT_KERNEL,
            ae_epochs: ae.epochs,
            ae_learning_rate: ae.learning_rate,
            ae_batch_size: ae.batch_size,
            ae_hidden: DEFAULT_HIDDEN.to_vec(),
            ae_max_samples: ae.max_samples,
            field_iterations: field.iterations,
            field_learning_rate: field.learning_rate,
            ensemble: EnsembleMethod::MaxWeighted,
            use_tum: true,
            use_aum: true,
            background_filter: true,
            eval_views: EvalViews::OccluderFree,
            queries: None,
            styles: Vec::new(),
            variants: Vec::new(),
            seeds: Vec::new(),
            cache: true,
        }
    }
}

impl PipelineConfig {
    /// Builds a config from a parsed object, rejecting unknown keys.
    pub fn from_value(value: Value) -> Result<Self> {
        let Value::Object(map) = &value else {
            return Err(Error::Config("config must be an object".into()));
        };
        let known = serde_json::to_value(Self::default())?;
        let known = known.as_object().expect("config serializes to an object");
        if let Some(k) = map.keys().find(|k| !known.contains_key(*k)) {
            return Err(Error::Config(format!("unknown config key `{k}`")));
        }
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_value(config::parse_value(text)?)
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(q) = p.as_mut() {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        resolve(&mut cfg.scene_spec);
        resolve(&mut cfg.queries);
        if let Some(spec) = &cfg.scene_spec {
            cfg.scene = config::load(spec)?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.levels == 0 {
            return bad("levels must be at least 1".into());
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau = {} outside (0, 1)", self.tau));
        }
        if self.kernel == 0 || self.kernel > self.scene.resolution {
            return bad(format!("kernel must lie in [1, {}]", self.scene.resolution));
        }
        if self.ae_hidden.contains(&0) {
            return bad("ae_hidden widths must be positive".into());
        }
        self.ae_config(0).validate()?;
        self.field_config(0).validate()?;
        for v in &self.variants {
            v.parse::<crate::ablation::Variant>()?;
        }
        Ok(())
    }

    pub fn ae_config(&self, level: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.ae_epochs,
            learning_rate: self.ae_learning_rate,
            batch_size: self.ae_batch_size,
            seed: seed::mix(self.scene.seed, &[seed::tag("ae"), level as u64]),
            tau_u: self.tau_u,
            hidden: self.ae_hidden.clone(),
            max_samples: self.ae_max_samples,
        }
    }

    pub fn field_config(&self, level: usize) -> FieldTrainConfig {
        FieldTrainConfig {
            iterations: self.field_iterations,
            learning_rate: self.field_learning_rate,
            seed: seed::mix(self.scene.seed, &[seed::tag("field"), level as u64]),
        }
    }
}

fn digest(v: &Value) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(v).expect("json value serializes")))
}

/// Attaches the stage name to errors that do not carry one yet.
fn in_stage<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ (Error::Stage { .. } | Error::Config(_)) => e,
        e => Error::Stage {
            stage,
            source: Box::new(e),
        },
    })
}

/// Content keys of every stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageKeys {
    pub gen: String,
    pub features: String,
    pub uncertainty: String,
    pub ae: Vec<String>,
    pub targets: String,
    pub field: Vec<String>,
    pub query: String,
}

impl StageKeys {
    fn new(cfg: &PipelineConfig, queries: &[QuerySpec]) -> Self {
        let gen = digest(&json!(["gen", cfg.scene]));
        let features = digest(&json!(["features", gen, cfg.levels]));
        let uncertainty = digest(&json!(["uncertainty", features]));
        let ae: Vec<String> = (0..cfg.levels)
            .map(|l| digest(&json!(["train-ae", gen, l, cfg.ae_config(l), cfg.use_tum])))
            .collect();
        let targets = digest(&json!(["targets", uncertainty, ae]));
        let field: Vec<String> = (0..cfg.levels)
            .map(|l| digest(&json!(["train-field", targets, l, cfg.field_config(l), cfg.use_tum, cfg.use_aum])))
            .collect();
        let labels: Vec<String> = QueryFile(queries.to_vec()).to_string().lines().map(str::to_string).collect();
        let query = digest(&json!([
            "query",
            field,
            ae,
            labels,
            cfg.tau,
            cfg.kernel,
            cfg.ensemble,
            cfg.background_filter,
            cfg.eval_views
        ]));
        Self {
            gen,
            features,
            uncertainty,
            ae,
            targets,
            field,
            query,
        }
    }
}

/// Raw `D`-channel features of one view at one level.
#[derive(Debug, Clone)]
pub struct ViewFeatures {
    pub original: Tensor,
    pub self_render: Tensor,
    /// One map per selected novel appearance.
    pub novel: Vec<Tensor>,
}

/// Per-level, per-view normalized `(U^A, U^T)`.
pub type UncertaintySet = Vec<Vec<(UncertaintyMap, UncertaintyMap)>>;

/// Fused score maps and masks of the evaluated views.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutput {
    pub views: Vec<usize>,
    /// `[view][query]`.
    pub fused: Vec<Vec<ScoreMap>>,
    pub masks: Vec<Vec<Mask>>,
    /// Selected semantic level per `[view][query]`.
    pub levels: Vec<Vec<usize>>,
}

/// Gaussian-level selection result for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seg3dResult {
    pub query: String,
    pub class_id: u32,
    pub selected: usize,
    pub precision: f64,
    pub recall: f64,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    out: PathBuf,
    cache_root: PathBuf,
    world: World,
    queries: Vec<QuerySpec>,
    keys: StageKeys,
    gen_done: OnceCell<()>,
    novel: OnceCell<Vec<usize>>,
    uncertainty: OnceCell<UncertaintySet>,
    aes: OnceCell<Vec<MlpParams<f32>>>,
    latents: OnceCell<Vec<Vec<Vec<Tensor>>>>,
    fields: OnceCell<Vec<Scene>>,
    query_out: OnceCell<QueryOutput>,
}

fn memo<'a, T>(cell: &'a OnceCell<T>, f: impl FnOnce() -> Result<T>) -> Result<&'a T> {
    if let Some(v) = cell.get() {
        return Ok(v);
    }
    let v = f()?;
    Ok(cell.get_or_init(|| v))
}

fn unc_from(t: Tensor, kind: UncertaintyKind) -> UncertaintyMap {
    UncertaintyMap {
        values: t,
        kind,
        normalized: true,
    }
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, out: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let world = in_stage("gen", gen_scene(&cfg.scene))?;
        let queries = match &cfg.queries {
            Some(path) => fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?
                .parse::<QueryFile>()?
                .0,
            None => world
                .object_classes
                .iter()
                .map(|&c| QuerySpec {
                    label: world.oracle.class_name(c).unwrap_or_default().to_string(),
                    target: QueryTarget::Class(c),
                })
                .collect(),
        };
        for q in &queries {
            if let QueryTarget::Class(c) = q.target {
                if !world.object_classes.contains(&c) {
                    return Err(Error::Config(format!("query `{}` names unknown class {c}", q.label)));
                }
            }
        }
        let keys = StageKeys::new(&cfg, &queries);
        let out = out.into();
        Ok(Self {
            cfg,
            cache_root: out.join("cache"),
            out,
            world,
            queries,
            keys,
            gen_done: OnceCell::new(),
            novel: OnceCell::new(),
            uncertainty: OnceCell::new(),
            aes: OnceCell::new(),
            latents: OnceCell::new(),
            fields: OnceCell::new(),
            query_out: OnceCell::new(),
        })
    }

    /// Shares stage directories with other runs, e.g. across ablation variants.
    pub fn with_cache_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.cache_root = root.into();
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn keys(&self) -> &StageKeys {
        &self.keys
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn queries(&self) -> &[QuerySpec] {
        &self.queries
    }

    pub fn stage_dir(&self, stage: &str, key: &str) -> PathBuf {
        self.cache_root.join(format!("{stage}-{}", &key[..16]))
    }

    fn cached<T>(
        &self,
        stage: &'static str,
        key: &str,
        produce: impl FnOnce(&Path) -> Result<()>,
        load: impl FnOnce(&Path) -> Result<T>,
    ) -> Result<T> {
        let dir = self.stage_dir(stage, key);
        let run = || -> Result<T> {
            if !(self.cfg.cache && dir.join(COMPLETE).is_file()) {
                let tmp = dir.with_extension(format!("tmp{}", std::process::id()));
                if tmp.exists() {
                    fs::remove_dir_all(&tmp)?;
                }
                fs::create_dir_all(&tmp)?;
                produce(&tmp)?;
                write_atomic(tmp.join(COMPLETE), key.as_bytes())?;
                if dir.exists() {
                    fs::remove_dir_all(&dir)?;
                }
                fs::rename(&tmp, &dir)?;
            }
            load(&dir)
        };
        in_stage(stage, run())
    }

    /// Scene, photos and view metadata.
    pub fn gen(&self) -> Result<()> {
        let world = &self.world;
        memo(&self.gen_done, || {
            self.cached(
                "gen",
                &self.keys.gen,
                |dir| {
                    world.scene.save(dir.join("scene.mgs"))?;
                    let mut views = Vec::new();
                    for (i, v) in world.views.iter().enumerate() {
                        v.image.save(dir.join(format!("image_v{i:02}.mft")))?;
                        views.push(json!({
                            "camera": v.camera,
                            "appearance": v.appearance,
                            "transients": v.transient_regions,
                        }));
                    }
                    write_atomic(dir.join("views.json"), serde_json::to_string_pretty(&views)?.as_bytes())
                },
                |_| Ok(()),
            )
        })
        .copied()
    }

    /// View indices whose appearances fill the novel slots.
    pub fn novel_appearances(&self) -> Result<&[usize]> {
        self.gen()?;
        memo(&self.novel, || {
            self.cached(
                "features",
                &self.keys.features,
                |dir| {
                    let spec = &self.world.spec;
                    let picked = if spec.num_slots > 1 {
                        wildscene::select_novel_appearances(&self.world, spec.num_slots - 1, spec.eps_q, spec.eps_d())?
                    } else {
                        Vec::new()
                    };
                    let rows: Vec<Value> = picked
                        .iter()
                        .map(|c| json!({"view": c.view_index, "render_error": c.render_error, "embedding": c.embedding}))
                        .collect();
                    write_atomic(dir.join("appearances.json"), serde_json::to_string_pretty(&rows)?.as_bytes())
                },
                |dir| {
                    let rows: Vec<Value> = serde_json::from_slice(&fs::read(dir.join("appearances.json"))?)?;
                    rows.iter()
                        .map(|r| {
                            r["view"].as_u64().map(|v| v as usize).ok_or_else(|| Error::Format {
                                format: "appearances.json",
                                reason: "missing view index".into(),
                            })
                        })
                        .collect()
                },
            )
        })
        .map(Vec::as_slice)
    }

    /// Raw features of view `v` at `level`, extracted on demand.
    pub fn view_features(&self, v: usize, level: usize) -> Result<ViewFeatures> {
        let novel_views = self.novel_appearances()?.to_vec();
        let oracle = self.world.oracle.for_level(level);
        let view = &self.world.views[v];
        let extract = |app, occluders| wildscene::extract_features(&oracle, view, app, occluders, level);
        Ok(ViewFeatures {
            original: extract(&view.appearance, true)?,
            self_render: extract(&view.appearance, false)?,
            novel: novel_views
                .iter()
                .map(|&j| extract(&self.world.views[j].appearance, false))
                .collect::<Result<_>>()?,
        })
    }

    /// Writes every raw feature map under `out/features`.
    pub fn write_features(&self) -> Result<PathBuf> {
        let dir = self.out.join("features");
        let run = || -> Result<()> {
            for level in 0..self.cfg.levels {
                for v in 0..self.world.views.len() {
                    let f = self.view_features(v, level)?;
                    f.original.save(dir.join(format!("original_l{level}_v{v:02}.mft")))?;
                    f.self_render.save(dir.join(format!("self_l{level}_v{v:02}.mft")))?;
                    for (n, m) in f.novel.iter().enumerate() {
                        m.save(dir.join(format!("novel{n}_l{level}_v{v:02}.mft")))?;
                    }
                }
            }
            Ok(())
        };
        in_stage("features", run())?;
        Ok(dir)
    }

    pub fn uncertainty(&self) -> Result<&UncertaintySet> {
        self.novel_appearances()?;
        let views = self.world.views.len();
        memo(&self.uncertainty, || {
            self.cached(
                "uncertainty",
                &self.keys.uncertainty,
                |dir| {
                    for level in 0..self.cfg.levels {
                        let mut u_a = Vec::with_capacity(views);
                        let mut u_t = Vec::with_capacity(views);
                        for v in 0..views {
                            let f = self.view_features(v, level)?;
                            let mut all: Vec<&Tensor> = f.novel.iter().collect();
                            all.push(&f.self_render);
                            u_a.push(uncertainty::appearance_uncertainty(&all)?);
                            u_t.push(uncertainty::transient_uncertainty(&f.self_render, &f.original)?);
                        }
                        uncertainty::normalize_maps(&mut u_a)?;
                        uncertainty::normalize_maps(&mut u_t)?;
                        for (v, (a, t)) in u_a.iter().zip(&u_t).enumerate() {
                            a.values.save(dir.join(format!("u_a_l{level}_v{v:02}.mft")))?;
                            t.values.save(dir.join(format!("u_t_l{level}_v{v:02}.mft")))?;
                        }
                    }
                    Ok(())
                },
                |dir| {
                    (0..self.cfg.levels)
                        .map(|level| {
                            (0..views)
                                .map(|v| {
                                    let a = Tensor::load(dir.join(format!("u_a_l{level}_v{v:02}.mft")))?;
                                    let t = Tensor::load(dir.join(format!("u_t_l{level}_v{v:02}.mft")))?;
                                    Ok((unc_from(a, UncertaintyKind::Appearance), unc_from(t, UncertaintyKind::Transient)))
                                })
                                .collect()
                        })
                        .collect()
                },
            )
        })
    }

    /// One compressor per level, trained on original-image features only.
    pub fn train_ae(&self) -> Result<&[MlpParams<f32>]> {
        let unc = self.uncertainty()?;
        memo(&self.aes, || {
            (0..self.cfg.levels)
                .map(|level| {
                    self.cached(
                        "train-ae",
                        &self.keys.ae[level],
                        |dir| {
                            let feats = (0..self.world.views.len())
                                .map(|v| self.view_features(v, level).map(|f| f.original))
                                .collect::<Result<Vec<_>>>()?;
                            let maps: Vec<(&Tensor, Option<&UncertaintyMap>)> = feats
                                .iter()
                                .zip(&unc[level])
                                .map(|(f, (_, t))| (f, self.cfg.use_tum.then_some(t)))
                                .collect();
                            let cfg = self.cfg.ae_config(level);
                            let data = AeDataset::from_maps(&maps, cfg.tau_u, cfg.max_samples, cfg.seed)?;
                            let (params, curve) = autoencoder::train_ae(&data, self.world.spec.latent_dim, &cfg)?;
                            if !(curve.last() < curve.initial) && cfg.epochs > 0 && cfg.learning_rate > 0.0 {
                                return Err(Error::invalid(format!(
                                    "autoencoder loss did not decrease ({} -> {})",
                                    curve.initial,
                                    curve.last()
                                )));
                            }
                            params.save(dir.join("ae.mae"))?;
                            write_atomic(dir.join("loss.csv"), curve.to_csv()?.as_bytes())
                        },
                        |dir| MlpParams::load(dir.join("ae.mae")),
                    )
                })
                .collect()
        })
        .map(Vec::as_slice)
    }

    /// Latent target maps `[level][view][slot]`.
    pub fn targets(&self) -> Result<&Vec<Vec<Vec<Tensor>>>> {
        let aes = self.train_ae()?;
        let views = self.world.views.len();
        let slots = self.world.spec.num_slots;
        memo(&self.latents, || {
            self.cached(
                "targets",
                &self.keys.targets,
                |dir| {
                    for (level, ae) in aes.iter().enumerate() {
                        for v in 0..views {
                            let f = self.view_features(v, level)?;
                            for (n, m) in f.novel.iter().chain(std::iter::once(&f.original)).enumerate() {
                                ae.encode_map(m)?.save(dir.join(format!("latent_l{level}_v{v:02}_s{n}.mft")))?;
                            }
                        }
                    }
                    Ok(())
                },
                |dir| {
                    (0..self.cfg.levels)
                        .map(|level| {
                            (0..views)
                                .map(|v| {
                                    (0..slots)
                                        .map(|n| Tensor::load(dir.join(format!("latent_l{level}_v{v:02}_s{n}.mft"))))
                                        .collect()
                                })
                                .collect()
                        })
                        .collect()
                },
            )
        })
    }

    /// Targets of every view at `level` with the uncertainty toggles applied.
    pub fn view_targets(&self, level: usize) -> Result<Vec<ViewTargets>> {
        let latents = self.targets()?;
        let unc = self.uncertainty()?;
        let (h, w) = (self.world.spec.resolution, self.world.spec.resolution);
        Ok(self
            .world
            .views
            .iter()
            .enumerate()
            .map(|(v, view)| {
                let (a, t) = &unc[level][v];
                ViewTargets {
                    camera: view.camera.clone(),
                    latents: latents[level][v].clone(),
                    u_a: if self.cfg.use_aum { a.clone() } else { UncertaintyMap::zeros(h, w, UncertaintyKind::Appearance) },
                    u_t: if self.cfg.use_tum { t.clone() } else { UncertaintyMap::zeros(h, w, UncertaintyKind::Transient) },
                }
            })
            .collect())
    }

    /// One optimized field per level.
    pub fn train_field(&self) -> Result<&[Scene]> {
        self.targets()?;
        let spec = &self.world.spec;
        memo(&self.fields, || {
            (0..self.cfg.levels)
                .map(|level| {
                    self.cached(
                        "train-field",
                        &self.keys.field[level],
                        |dir| {
                            let targets = self.view_targets(level)?;
                            let (scene, report) = field::train_field(&self.world.scene, &targets, &self.cfg.field_config(level))?;
                            scene.save(dir.join("field.mgs"))?;
                            let mut csv = String::from("iteration,view,loss\n");
                            for (i, (l, v)) in report.losses.iter().zip(&report.view_order).enumerate() {
                                csv.push_str(&format!("{},{v},{l:.9}\n", i + 1));
                            }
                            write_atomic(dir.join("loss.csv"), csv.as_bytes())
                        },
                        |dir| Scene::load(dir.join("field.mgs"), spec.d_a, spec.feature_dim),
                    )
                })
                .collect()
        })
        .map(Vec::as_slice)
    }

    pub fn eval_view_indices(&self) -> Result<Vec<usize>> {
        let views: Vec<usize> = (0..self.world.views.len())
            .filter(|&v| self.cfg.eval_views == EvalViews::All || self.world.views[v].is_occluder_free())
            .collect();
        if views.is_empty() {
            return Err(Error::invalid("no views to evaluate"));
        }
        Ok(views)
    }

    /// Fused, level-selected and smoothed score maps of `labels` at view `v`,
    /// with the chosen level of each.
    pub fn score_view(&self, v: usize, labels: &[String]) -> Result<Vec<(ScoreMap, usize)>> {
        let fields = self.train_field()?;
        let aes = self.train_ae()?;
        let oracle = &self.world.oracle;
        let canon = CanonicalSet::from_oracle(oracle);
        let background = CanonicalSet::background(oracle);
        let cam = &self.world.views[v].camera;
        let mut per_level: Vec<Vec<ScoreMap>> = vec![Vec::new(); labels.len()];
        for (field, ae) in fields.iter().zip(aes) {
            let decoded = render_language_maps(field, cam)?
                .iter()
                .map(|r| ae.decode_map(&r.channels))
                .collect::<Result<Vec<_>>>()?;
            let own = decoded.last().expect("at least one slot");
            for (qi, label) in labels.iter().enumerate() {
                let q = QueryEmbedding::from_oracle(oracle, label);
                let maps = decoded
                    .iter()
                    .enumerate()
                    .map(|(n, d)| query::relevancy_map(d, &q, &canon, ScoreSource::Slot(n)))
                    .collect::<Result<Vec<_>>>()?;
                let bg = if self.cfg.background_filter {
                    Some(query::background_score(own, &q, &background)?)
                } else {
                    None
                };
                per_level[qi].push(query::fuse(&maps, bg.as_ref(), self.cfg.ensemble)?.0);
            }
        }
        per_level
            .into_iter()
            .map(|levels| {
                let best = query::hierarchical_query(&levels)?;
                Ok((query::smooth(&levels[best], self.cfg.kernel)?, best))
            })
            .collect()
    }

    fn class_queries(&self) -> Vec<(String, u32)> {
        self.queries
            .iter()
            .filter_map(|q| match q.target {
                QueryTarget::Class(c) => Some((q.label.clone(), c)),
                QueryTarget::Style => None,
            })
            .collect()
    }

    /// Score maps and masks of every class query on the evaluated views.
    pub fn query(&self) -> Result<&QueryOutput> {
        self.train_field()?;
        let views = in_stage("query", self.eval_view_indices())?;
        let labels: Vec<String> = self.class_queries().into_iter().map(|(l, _)| l).collect();
        memo(&self.query_out, || {
            self.cached(
                "query",
                &self.keys.query,
                |dir| {
                    let mut chosen = BTreeMap::new();
                    for &v in &views {
                        for (qi, (map, level)) in self.score_view(v, &labels)?.into_iter().enumerate() {
                            map.values.save(dir.join(format!("fused_v{v:02}_q{qi}.mft")))?;
                            query::segment2d(&map, self.cfg.tau)?
                                .to_tensor()
                                .save(dir.join(format!("mask_v{v:02}_q{qi}.mft")))?;
                            chosen.insert(format!("v{v:02}_q{qi}"), level);
                        }
                    }
                    write_atomic(dir.join("levels.json"), serde_json::to_string_pretty(&chosen)?.as_bytes())
                },
                |dir| {
                    let chosen: BTreeMap<String, usize> = serde_json::from_slice(&fs::read(dir.join("levels.json"))?)?;
                    let mut out = QueryOutput {
                        views: views.clone(),
                        fused: Vec::new(),
                        masks: Vec::new(),
                        levels: Vec::new(),
                    };
                    for &v in &views {
                        let mut fused = Vec::new();
                        let mut masks = Vec::new();
                        let mut levels = Vec::new();
                        for (qi, label) in labels.iter().enumerate() {
                            let t = Tensor::load(dir.join(format!("fused_v{v:02}_q{qi}.mft")))?;
                            fused.push(ScoreMap::new(t, label, ScoreSource::Fused)?);
                            masks.push(Mask::from_tensor(&Tensor::load(dir.join(format!("mask_v{v:02}_q{qi}.mft")))?)?);
                            levels.push(chosen.get(&format!("v{v:02}_q{qi}")).copied().unwrap_or(0));
                        }
                        out.fused.push(fused);
                        out.masks.push(masks);
                        out.levels.push(levels);
                    }
                    Ok(out)
                },
            )
        })
    }

    /// Pooled per-query metrics; also written to `out/report.csv`.
    pub fn eval(&self) -> Result<SegMetrics> {
        let q = self.query()?;
        let classes = self.class_queries();
        let run = || -> Result<SegMetrics> {
            let mut per_query = Vec::with_capacity(classes.len());
            for (qi, (label, class)) in classes.iter().enumerate() {
                let mut total = Confusion::default();
                for (vi, &v) in q.views.iter().enumerate() {
                    let gt = wildscene::gt_mask(&self.world.views[v], *class);
                    total.add(&Confusion::from_masks(&q.masks[vi][qi], &gt)?);
                }
                per_query.push(QueryMetrics::from_confusion(label, &total));
            }
            let m = SegMetrics::from_queries(per_query);
            write_atomic(self.out.join("report.csv"), m.to_csv()?.as_bytes())?;
            Ok(m)
        };
        in_stage("eval", run())
    }

    /// Alias of [`eval`](Self::eval): runs every stage.
    pub fn run(&self) -> Result<SegMetrics> {
        self.eval()
    }

    /// Candidate styles: query-file style entries, else the config list.
    pub fn style_labels(&self) -> Result<Vec<String>> {
        let from_file: Vec<String> = self
            .queries
            .iter()
            .filter(|q| q.target == QueryTarget::Style)
            .map(|q| q.label.clone())
            .collect();
        let labels = if from_file.is_empty() { self.cfg.styles.clone() } else { from_file };
        if labels.is_empty() {
            return Err(Error::Config("style voting needs `styles` or style entries in the query file".into()));
        }
        Ok(labels)
    }

    /// Winner-takes-all vote over the evaluated views; writes
    /// `out/style_vote.csv`.
    pub fn style_vote(&self) -> Result<StyleVote> {
        let labels = self.style_labels()?;
        let run = || -> Result<StyleVote> {
            let mut maps: BTreeMap<String, Vec<ScoreMap>> = labels.iter().map(|l| (l.clone(), Vec::new())).collect();
            for v in self.eval_view_indices()? {
                for (label, (m, _)) in labels.iter().zip(self.score_view(v, &labels)?) {
                    maps.get_mut(label).expect("label registered").push(m);
                }
            }
            let vote = query::style_vote(&maps)?;
            let mut csv = String::from("style,votes,winner\n");
            for (s, n) in &vote.votes {
                csv.push_str(&format!("{s},{n},{}\n", u8::from(*s == vote.winner)));
            }
            write_atomic(self.out.join("style_vote.csv"), csv.as_bytes())?;
            Ok(vote)
        };
        in_stage("style-vote", run())
    }

    /// Gaussian-level selection for every class query on the first level;
    /// writes `out/seg3d.csv` and one mask per query. Gaussians that no
    /// training view sees never receive a feature and are left unselected.
    pub fn seg3d(&self) -> Result<Vec<Seg3dResult>> {
        let fields = self.train_field()?;
        let aes = self.train_ae()?;
        let run = || -> Result<Vec<Seg3dResult>> {
            let canon = CanonicalSet::from_oracle(&self.world.oracle);
            let background = CanonicalSet::background(&self.world.oracle);
            let bg = self.cfg.background_filter.then_some(&background);
            let mut observed = vec![false; fields[0].gaussians.len()];
            for v in &self.world.views {
                let w = PixelWeights::build(&fields[0], &v.camera)?;
                for p in 0..w.num_pixels() {
                    for (i, x) in w.pixel(p) {
                        observed[i] |= x > 0.0;
                    }
                }
            }
            let mut rows = Vec::new();
            let mut csv = String::from("query,class_id,selected,precision,recall\n");
            for (qi, (label, class)) in self.class_queries().into_iter().enumerate() {
                let q = QueryEmbedding::from_oracle(&self.world.oracle, &label);
                let mut sel = query::segment3d(&fields[0], &aes[0], &q, &canon, bg, self.cfg.tau)?;
                sel.iter_mut().zip(&observed).for_each(|(s, &o)| *s &= o);
                let mut c = Confusion::default();
                for (g, &s) in fields[0].gaussians.iter().zip(&sel) {
                    match (s, g.class_id == class) {
                        (true, true) => c.tp += 1,
                        (true, false) => c.fp += 1,
                        (false, true) => c.fn_ += 1,
                        (false, false) => c.tn += 1,
                    }
                }
                let recall = if c.tp + c.fn_ == 0 { 1.0 } else { c.tp as f64 / (c.tp + c.fn_) as f64 };
                let row = Seg3dResult {
                    query: label,
                    class_id: class,
                    selected: sel.iter().filter(|&&s| s).count(),
                    precision: c.precision(),
                    recall,
                };
                csv.push_str(&format!(
                    "{},{},{},{:.6},{:.6}\n",
                    row.query, row.class_id, row.selected, row.precision, row.recall
                ));
                let mask = Tensor::from_vec(1, sel.len(), 1, sel.iter().map(|&s| f32::from(u8::from(s))).collect())?;
                mask.save(self.out.join("seg3d").join(format!("mask_q{qi}.mft")))?;
                rows.push(row);
            }
            write_atomic(self.out.join("seg3d.csv"), csv.as_bytes())?;
            Ok(rows)
        };
        in_stage("seg3d", run())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parsing_and_validation() {
        let cfg = PipelineConfig::parse("seed = 3\nclasses = 2\nN = 2\nkernel = 1\nae_hidden = [16]\nensemble = pix_max\n").unwrap();
        assert_eq!(cfg.scene.seed, 3);
        assert_eq!(cfg.scene.num_slots, 2);
        assert_eq!(cfg.ensemble, EnsembleMethod::PixMax);
        assert_eq!(cfg.ae_hidden, vec![16]);
        cfg.validate().unwrap();

        let json = PipelineConfig::parse(r#"{"seed": 3, "classes": 2, "N": 2, "kernel": 1, "ae_hidden": [16], "ensemble": "pix_max"}"#).unwrap();
        assert_eq!(json, cfg);

        for bad in ["sed = 3", "tau = 1.5", "kernel = 0", "levels = 0", "variants = [\"nope\"]", "num_gaussians = 0"] {
            let r = PipelineConfig::parse(bad).and_then(|c| c.validate());
            assert!(matches!(r, Err(Error::Config(_))), "{bad}: {r:?}");
        }
    }

    #[test]
    fn keys_track_dependencies() {
        let base = PipelineConfig::default();
        let k = StageKeys::new(&base, &[]);
        let tau = StageKeys::new(&PipelineConfig { tau: 0.5, ..base.clone() }, &[]);
        assert_eq!(k.field, tau.field);
        assert_ne!(k.query, tau.query);
        let no_aum = StageKeys::new(&PipelineConfig { use_aum: false, ..base.clone() }, &[]);
        assert_eq!(k.ae, no_aum.ae);
        assert_ne!(k.field, no_aum.field);
        let mut n1 = base.clone();
        n1.scene.num_slots = 1;
        assert_ne!(StageKeys::new(&n1, &[]).gen, k.gen);
    }
}
