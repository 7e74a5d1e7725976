//! Full retrieval model and its ablation variants.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::aggregate::{Cmam, Imam};
use crate::error::{Error, Result};
use crate::head::{arcface_loss, fuse_descriptor, ArcFaceHead, DescriptorRecord, FuseMlp};
use crate::manifest::{LoadedObject, ViewInput};
use crate::numkit::io::{load_checkpoint_into, read_checkpoint};
use crate::numkit::{ParamStore, Tape, Tensor, Var};
use crate::pointbranch::{PointBranch, PointCloud};
use crate::viewbranch::{inter_view_pool, intra_view_pool, maps_from_external, ViewCnn};

use super::config::Config;
use super::par_map;

pub const POINT_PREFIX: &str = "point.";
pub const VIEW_PREFIX: &str = "view.";

/// The six model variants compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoViewBranch,
    NoObjectBranch,
    DirectConcat,
    PointOnly,
    ViewOnly,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::PointOnly,
        Variant::ViewOnly,
        Variant::DirectConcat,
        Variant::NoViewBranch,
        Variant::NoObjectBranch,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoViewBranch => "no_view_branch",
            Variant::NoObjectBranch => "no_object_branch",
            Variant::DirectConcat => "direct_concat",
            Variant::PointOnly => "point_only",
            Variant::ViewOnly => "view_only",
        }
    }

    pub fn flags(self) -> AblationFlags {
        let (use_point, use_view, obj, view, direct) = match self {
            Variant::Full => (true, true, true, true, false),
            Variant::NoViewBranch => (true, true, true, false, false),
            Variant::NoObjectBranch => (true, true, false, true, false),
            Variant::DirectConcat => (true, true, false, false, true),
            Variant::PointOnly => (true, false, false, false, false),
            Variant::ViewOnly => (false, true, false, false, false),
        };
        AblationFlags {
            use_point,
            use_view,
            use_object_branch: obj,
            use_view_branch: view,
            direct_concat: direct,
        }
    }

    pub fn uses_point(self) -> bool {
        self != Variant::ViewOnly
    }

    pub fn uses_view(self) -> bool {
        self != Variant::PointOnly
    }

    fn object_branch(self) -> bool {
        matches!(self, Variant::Full | Variant::NoViewBranch)
    }

    fn view_branch(self) -> bool {
        matches!(self, Variant::Full | Variant::NoObjectBranch)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown model variant `{s}` (full|no_view_branch|no_object_branch|direct_concat|point_only|view_only)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationFlags {
    pub use_point: bool,
    pub use_view: bool,
    pub use_object_branch: bool,
    pub use_view_branch: bool,
    pub direct_concat: bool,
}

impl AblationFlags {
    pub fn variant(self) -> Result<Variant> {
        let AblationFlags {
            use_point,
            use_view,
            use_object_branch: obj,
            use_view_branch: view,
            direct_concat: direct,
        } = self;
        let bad = |why: &str| Err(Error::config(format!("contradictory ablation flags {self:?}: {why}")));
        if !use_point && !use_view {
            return bad("no modality enabled");
        }
        if !(use_point && use_view) {
            if obj || view || direct {
                return bad("fusion branches need both modalities");
            }
            return Ok(if use_point { Variant::PointOnly } else { Variant::ViewOnly });
        }
        match (obj, view, direct) {
            (true, true, false) => Ok(Variant::Full),
            (true, false, false) => Ok(Variant::NoViewBranch),
            (false, true, false) => Ok(Variant::NoObjectBranch),
            (false, false, true) => Ok(Variant::DirectConcat),
            (false, false, false) => bad("both modalities enabled without a fusion path"),
            _ => bad("direct concatenation excludes the aggregation branches"),
        }
    }
}

/// Backbone outputs of one object: `f_point` (`1 × D_p`) and the per-view
/// feature maps (`[M, H·W, C]`).
#[derive(Clone, Debug, Default)]
pub struct BackboneFeatures {
    pub f_point: Option<Tensor>,
    pub maps: Option<Tensor>,
}

#[derive(Clone, Copy, Debug)]
struct FeatureVars {
    f_point: Option<Var>,
    maps: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub variant: Variant,
    pub config: Config,
    pub classes: usize,
    pub store: ParamStore,
    pub point: Option<PointBranch>,
    pub view: Option<ViewCnn>,
    pub imam_object: Option<Imam>,
    pub imam_view: Option<Imam>,
    pub cmam_object: Option<Cmam>,
    pub cmam_view: Option<Cmam>,
    pub fuse: FuseMlp,
    pub arcface: ArcFaceHead,
}

/// Builds the variant selected by `flags`; `config.model.ablation` is ignored.
pub fn ablation_build(flags: AblationFlags, config: &Config, classes: usize) -> Result<Model> {
    let mut cfg = config.clone();
    cfg.model.ablation = flags.variant()?;
    Model::new(&cfg, classes)
}

impl Model {
    /// Builds the variant named by `config.model.ablation`.
    pub fn new(config: &Config, classes: usize) -> Result<Self> {
        config.validate()?;
        if classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {classes}")));
        }
        let variant = config.model.ablation;
        let seed = config.seed;
        let m = &config.model;
        let mut store = ParamStore::new();
        let point = if variant.uses_point() {
            Some(PointBranch::new(&mut store, "point", &config.point_branch(), seed)?)
        } else {
            None
        };
        let view = if variant.uses_view() {
            Some(ViewCnn::new(&mut store, "view", &config.view_cnn(), seed)?)
        } else {
            None
        };
        let spatial = config.view_cnn().output_size().pow(2);
        let object_cfg = config.aggregator(spatial);
        let view_cfg = config.aggregator(config.data.views);
        let (mut imam_object, mut imam_view, mut cmam_object, mut cmam_view) = (None, None, None, None);
        if variant.object_branch() {
            let imam = Imam::new(&mut store, "imam_object", &object_cfg, seed)?;
            cmam_object = Some(if m.share_imam {
                Cmam::with_imam(&mut store, "cmam_object", imam.clone(), m.point_dim, seed)?
            } else {
                Cmam::new(&mut store, "cmam_object", &object_cfg, m.point_dim, seed)?
            });
            imam_object = Some(imam);
        }
        if variant.view_branch() {
            let imam = Imam::new(&mut store, "imam_view", &view_cfg, seed)?;
            cmam_view = Some(if m.share_imam {
                Cmam::with_imam(&mut store, "cmam_view", imam.clone(), m.point_dim, seed)?
            } else {
                Cmam::new(&mut store, "cmam_view", &view_cfg, m.point_dim, seed)?
            });
            imam_view = Some(imam);
        }
        let channels = config.view_cnn().channels();
        let fuse_in = match variant {
            Variant::Full => 4 * m.dim,
            Variant::NoViewBranch | Variant::NoObjectBranch => 2 * m.dim,
            Variant::DirectConcat => m.point_dim + channels,
            Variant::PointOnly => m.point_dim,
            Variant::ViewOnly => channels,
        };
        let fuse = FuseMlp::new(&mut store, "head.fuse", fuse_in, m.fuse_hidden, m.desc_dim, seed)?;
        let arcface = ArcFaceHead::new(
            &mut store,
            "head.arcface",
            m.desc_dim,
            classes,
            config.arcface_margin,
            config.arcface_scale,
            seed,
        )?;
        Ok(Model {
            variant,
            config: config.clone(),
            classes,
            store,
            point,
            view,
            imam_object,
            imam_view,
            cmam_object,
            cmam_view,
            fuse,
            arcface,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    fn maps_var(&self, tape: &mut Tape, views: &ViewInput) -> Result<Var> {
        match views {
            ViewInput::Images(stack) => {
                let cnn = self.view.as_ref().expect("view backbone present");
                cnn.forward(tape, stack)
            }
            ViewInput::Features(t) => {
                let maps = maps_from_external(t)?;
                let c = maps.shape()[2];
                let expected = self.config.view_cnn().channels();
                if c != expected {
                    return Err(Error::shape("precomputed view maps", t.shape(), &[0, expected, 0, 0]));
                }
                Ok(tape.constant(maps))
            }
        }
    }

    fn live_features(&self, tape: &mut Tape, cloud: &PointCloud, views: &ViewInput) -> Result<FeatureVars> {
        let f_point = match &self.point {
            Some(branch) => Some(branch.forward(tape, &cloud.clone().normalized())?),
            None => None,
        };
        let maps = if self.variant.uses_view() {
            Some(self.maps_var(tape, views)?)
        } else {
            None
        };
        Ok(FeatureVars { f_point, maps })
    }

    /// Backbone outputs as plain tensors, for reuse while backbones are frozen.
    pub fn backbone_features(&self, obj: &LoadedObject) -> Result<BackboneFeatures> {
        let mut tape = Tape::new(&self.store);
        let v = self.live_features(&mut tape, &obj.cloud, &obj.views)?;
        Ok(BackboneFeatures {
            f_point: v.f_point.map(|x| tape.value(x).clone()),
            maps: v.maps.map(|x| tape.value(x).clone()),
        })
    }

    fn cached_vars(tape: &mut Tape, f: &BackboneFeatures) -> FeatureVars {
        FeatureVars {
            f_point: f.f_point.clone().map(|t| tape.constant(t)),
            maps: f.maps.clone().map(|t| tape.constant(t)),
        }
    }

    /// Unit-norm descriptor (`1 × D_desc`) from backbone outputs.
    fn descriptor_from(&self, tape: &mut Tape, f: FeatureVars) -> Result<Var> {
        let mut parts = Vec::with_capacity(4);
        let (obj_tokens, view_tokens) = match f.maps {
            Some(maps) => (Some(inter_view_pool(tape, maps)?), Some(intra_view_pool(tape, maps)?)),
            None => (None, None),
        };
        match self.variant {
            Variant::DirectConcat | Variant::PointOnly | Variant::ViewOnly => {
                if let Some(p) = f.f_point {
                    parts.push(p);
                }
                if let Some(tokens) = view_tokens {
                    let c = tape.shape(tokens)[1];
                    let mean = tape.mean(tokens, 0)?;
                    parts.push(tape.reshape(mean, &[1, c])?);
                }
            }
            _ => {
                let f_point = f.f_point.expect("point feature present");
                let mut self_parts = Vec::new();
                let mut cross_parts = Vec::new();
                if let (Some(imam), Some(cmam)) = (&self.imam_object, &self.cmam_object) {
                    let tokens = obj_tokens.expect("object tokens present");
                    self_parts.push(imam.forward(tape, tokens, false)?);
                    cross_parts.push(cmam.forward(tape, tokens, f_point)?);
                }
                if let (Some(imam), Some(cmam)) = (&self.imam_view, &self.cmam_view) {
                    let tokens = view_tokens.expect("view tokens present");
                    self_parts.push(imam.forward(tape, tokens, false)?);
                    cross_parts.push(cmam.forward(tape, tokens, f_point)?);
                }
                parts.extend(self_parts);
                parts.extend(cross_parts);
            }
        }
        let raw = fuse_descriptor(tape, &parts, &self.fuse)?;
        tape.l2_normalize(raw, 1)
    }

    /// Descriptor of an object, recomputing the backbones on the tape.
    pub fn descriptor(&self, tape: &mut Tape, cloud: &PointCloud, views: &ViewInput) -> Result<Var> {
        let f = self.live_features(tape, cloud, views)?;
        self.descriptor_from(tape, f)
    }

    /// Descriptor from cached backbone outputs.
    pub fn descriptor_cached(&self, tape: &mut Tape, features: &BackboneFeatures) -> Result<Var> {
        let f = Self::cached_vars(tape, features);
        self.descriptor_from(tape, f)
    }

    pub fn loss(&self, tape: &mut Tape, descriptor: Var, label: u32) -> Result<Var> {
        arcface_loss(tape, descriptor, &[label as usize], &self.arcface)
    }

    pub fn embed_input(&self, id: &str, label: u32, cloud: &PointCloud, views: &ViewInput) -> Result<DescriptorRecord> {
        let mut tape = Tape::new(&self.store);
        let d = self.descriptor(&mut tape, cloud, views)?;
        DescriptorRecord::from_raw(id, label, tape.value(d).data())
    }

    pub fn embed(&self, obj: &LoadedObject) -> Result<DescriptorRecord> {
        self.embed_input(&obj.object_id, obj.label, &obj.cloud, &obj.views)
    }

    /// Embeds every object, preserving input order.
    pub fn embed_all(&self, objects: &[LoadedObject]) -> Result<Vec<DescriptorRecord>> {
        par_map(objects, |o| self.embed(o)).into_iter().collect()
    }

    /// Rebuilds a trained model from a checkpoint directory holding
    /// `config.txt` and the parameter tensors.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config = Config::read(dir.join(super::CONFIG_FILE))?;
        let entries = read_checkpoint(dir)?;
        let classes = entries
            .iter()
            .find(|(n, _)| n == "head.arcface.weight")
            .map(|(_, t)| t.shape()[1])
            .ok_or_else(|| Error::Load {
                name: "head.arcface.weight".into(),
                reason: "missing from checkpoint".into(),
            })?;
        let mut model = Model::new(&config, classes)?;
        let loaded = load_checkpoint_into(&mut model.store, dir, |_| true)?;
        if loaded != model.store.len() {
            let present: std::collections::HashSet<&str> = entries.iter().map(|(n, _)| n.as_str()).collect();
            let missing = model.store.names().find(|n| !present.contains(n)).unwrap_or("?");
            return Err(Error::Load {
                name: missing.to_string(),
                reason: "missing from checkpoint".into(),
            });
        }
        Ok(model)
    }
}
