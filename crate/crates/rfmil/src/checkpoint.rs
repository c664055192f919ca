//! Checkpoint bundles: named parameter tensors, optimizer state, and run
//! metadata in one container file. Loaders refuse checkpoints whose model
//! hash does not match the active config.

use crate::container::Container;
use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use rfmil_nn::{Adam, Param};
use std::collections::BTreeMap;
use std::path::Path;

/// Deep copy of parameter values keyed by name.
#[derive(Debug, Clone, Default)]
pub struct ParamSnapshot {
    pub map: BTreeMap<String, ArrayD<f32>>,
}

impl ParamSnapshot {
    pub fn capture(params: &[&Param]) -> Self {
        let mut map = BTreeMap::new();
        for p in params {
            map.insert(p.name.clone(), p.value.clone());
        }
        ParamSnapshot { map }
    }

    pub fn capture_mut(params: &[&mut Param]) -> Self {
        let mut map = BTreeMap::new();
        for p in params {
            map.insert(p.name.clone(), p.value.clone());
        }
        ParamSnapshot { map }
    }

    /// Write values back; every parameter must be present with its shape.
    pub fn restore(&self, params: &mut [&mut Param]) -> Result<()> {
        for p in params.iter_mut() {
            let v = self.map.get(&p.name).ok_or_else(|| {
                Error::Checkpoint(format!("snapshot missing parameter '{}'", p.name))
            })?;
            if v.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{}' shape {:?} != snapshot {:?}",
                    p.name,
                    p.value.shape(),
                    v.shape()
                )));
            }
            p.value.assign(v);
        }
        Ok(())
    }
}

/// Everything a resumable checkpoint carries besides parameters.
#[derive(Debug, Clone, Default)]
pub struct CheckpointMeta {
    pub kind: String,
    pub epoch: usize,
    pub model_hash: String,
    pub full_hash: String,
    /// Free-form history/metrics payload.
    pub extra: BTreeMap<String, serde_json::Value>,
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    meta: &CheckpointMeta,
    params: &[&Param],
    adam: Option<&Adam>,
) -> Result<()> {
    let mut con = Container::new("checkpoint");
    con.set_meta("checkpoint_kind", meta.kind.as_str());
    con.set_meta("epoch", meta.epoch as u64);
    con.set_meta("model_hash", meta.model_hash.as_str());
    con.set_meta("full_hash", meta.full_hash.as_str());
    for (k, v) in &meta.extra {
        con.set_meta(k, v.clone());
    }
    for p in params {
        con.push_f32(
            &format!("param:{}", p.name),
            p.value.shape(),
            p.value.iter().cloned().collect(),
        );
    }
    if let Some(adam) = adam {
        con.set_meta("adam_t", adam.t);
        for (name, st) in &adam.state {
            con.push_f32(
                &format!("adam_m:{name}"),
                st.m.shape(),
                st.m.iter().cloned().collect(),
            );
            con.push_f32(
                &format!("adam_v:{name}"),
                st.v.shape(),
                st.v.iter().cloned().collect(),
            );
        }
    }
    con.write(path)
}

pub struct LoadedCheckpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSnapshot,
    pub adam: Option<Adam>,
    pub raw_meta: BTreeMap<String, serde_json::Value>,
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<LoadedCheckpoint> {
    let con = Container::read(path.as_ref())?;
    if con.kind != "checkpoint" {
        return Err(Error::Checkpoint(format!(
            "{} is a '{}' container, not a checkpoint",
            path.as_ref().display(),
            con.kind
        )));
    }
    let mut params = ParamSnapshot::default();
    let mut adam_state: BTreeMap<String, (Option<ArrayD<f32>>, Option<ArrayD<f32>>)> =
        BTreeMap::new();
    for name in con.array_names() {
        if let Some(pname) = name.strip_prefix("param:") {
            let (shape, data) = con.f32(name)?;
            params.map.insert(
                pname.to_string(),
                ArrayD::from_shape_vec(IxDyn(shape), data.to_vec())
                    .map_err(|e| Error::Checkpoint(e.to_string()))?,
            );
        } else if let Some(pname) = name.strip_prefix("adam_m:") {
            let (shape, data) = con.f32(name)?;
            adam_state.entry(pname.to_string()).or_default().0 = Some(
                ArrayD::from_shape_vec(IxDyn(shape), data.to_vec())
                    .map_err(|e| Error::Checkpoint(e.to_string()))?,
            );
        } else if let Some(pname) = name.strip_prefix("adam_v:") {
            let (shape, data) = con.f32(name)?;
            adam_state.entry(pname.to_string()).or_default().1 = Some(
                ArrayD::from_shape_vec(IxDyn(shape), data.to_vec())
                    .map_err(|e| Error::Checkpoint(e.to_string()))?,
            );
        }
    }
    let adam = if let Ok(t) = con.meta_u64("adam_t") {
        let mut adam = Adam {
            t,
            ..Adam::default()
        };
        for (name, (m, v)) in adam_state {
            let (m, v) = (
                m.ok_or_else(|| Error::Checkpoint(format!("adam m missing for {name}")))?,
                v.ok_or_else(|| Error::Checkpoint(format!("adam v missing for {name}")))?,
            );
            adam.state.insert(name, rfmil_nn::adam::AdamState { m, v });
        }
        Some(adam)
    } else {
        None
    };
    let meta = CheckpointMeta {
        kind: con.meta_str("checkpoint_kind")?.to_string(),
        epoch: con.meta_u64("epoch")? as usize,
        model_hash: con.meta_str("model_hash")?.to_string(),
        full_hash: con.meta_str("full_hash")?.to_string(),
        extra: BTreeMap::new(),
    };
    Ok(LoadedCheckpoint {
        meta,
        params,
        adam,
        raw_meta: con.meta.clone(),
    })
}

/// Enforce the shape-compatibility contract before restoring.
pub fn require_model_hash(loaded: &LoadedCheckpoint, expected: &str) -> Result<()> {
    if loaded.meta.model_hash != expected {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint model hash {} does not match active config {}",
            loaded.meta.model_hash, expected
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rfmil_nn::rng::{stream, tag};
    use rfmil_nn::Linear;

    #[test]
    fn snapshot_round_trip() {
        let mut rng = stream(1, &[tag("ckpt")]);
        let mut lin = Linear::new("l", 4, 3, &mut rng);
        let snap = ParamSnapshot::capture(&lin.params());
        let orig = lin.w.value.clone();
        lin.w.value.fill(0.0);
        let mut params = Vec::new();
        lin.collect_params(&mut params);
        snap.restore(&mut params).unwrap();
        assert_eq!(lin.w.value, orig);
    }

    #[test]
    fn checkpoint_file_round_trip_with_adam() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = stream(2, &[tag("ckpt")]);
        let mut lin = Linear::new("l", 4, 3, &mut rng);
        lin.w.grad.fill(0.5);
        let mut adam = Adam::default();
        {
            let mut params = Vec::new();
            lin.collect_params(&mut params);
            adam.step(&mut params, &|_| 1e-3);
        }
        let meta = CheckpointMeta {
            kind: "stage1".into(),
            epoch: 7,
            model_hash: "abc".into(),
            full_hash: "def".into(),
            extra: BTreeMap::new(),
        };
        let path = dir.path().join("ckpt.rfbc");
        save_checkpoint(&path, &meta, &lin.params(), Some(&adam)).unwrap();

        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.meta.kind, "stage1");
        assert_eq!(loaded.meta.epoch, 7);
        require_model_hash(&loaded, "abc").unwrap();
        assert!(require_model_hash(&loaded, "zzz").is_err());
        let a2 = loaded.adam.unwrap();
        assert_eq!(a2.t, 1);
        assert_eq!(a2.state["l.w"].m, adam.state["l.w"].m);
        assert_eq!(loaded.params.map["l.w"], lin.w.value);
    }

    #[test]
    fn missing_parameter_fails_restore() {
        let mut rng = stream(3, &[tag("ckpt")]);
        let mut lin = Linear::new("other", 2, 2, &mut rng);
        let snap = ParamSnapshot::default();
        let mut params = Vec::new();
        lin.collect_params(&mut params);
        assert!(snap.restore(&mut params).is_err());
    }
}

// --- model-level bundles -----------------------------------------------

use crate::backbone::{Backbone, Projector};
use crate::baselines::{BaselineKind, MilAttention, MilAttentionConfig, MilModel, RoiClassifier, RoiOrMil};
use crate::config::RunConfig;
use crate::stage2::Stage2Model;
use rfmil_nn::rng::{stream, tag};
use std::str::FromStr;

fn base_meta(kind: &str, epoch: usize, config: &RunConfig) -> CheckpointMeta {
    CheckpointMeta {
        kind: kind.to_string(),
        epoch,
        model_hash: config.model_hash(),
        full_hash: config.full_hash(),
        extra: BTreeMap::new(),
    }
}

pub fn save_stage1(
    path: impl AsRef<Path>,
    backbone: &Backbone,
    projector: &Projector,
    adam: Option<&Adam>,
    epoch: usize,
    eval_history: &[(usize, f64)],
    config: &RunConfig,
) -> Result<()> {
    let mut meta = base_meta("stage1", epoch, config);
    meta.extra.insert(
        "eval_history".into(),
        serde_json::to_value(eval_history).unwrap_or_default(),
    );
    let mut params = backbone.params();
    params.extend(projector.params());
    save_checkpoint(path, &meta, &params, adam)
}

/// Rebuild stage-1 models from the config and restore the checkpoint into
/// them. The checkpoint must carry the active config's model hash.
pub fn load_stage1(
    path: impl AsRef<Path>,
    config: &RunConfig,
) -> Result<(Backbone, Projector, LoadedCheckpoint)> {
    let loaded = load_checkpoint(path)?;
    if loaded.meta.kind != "stage1" {
        return Err(Error::Checkpoint(format!(
            "expected a stage1 checkpoint, found '{}'",
            loaded.meta.kind
        )));
    }
    require_model_hash(&loaded, &config.model_hash())?;
    let mut rng = stream(0, &[tag("ckpt-restore")]);
    let mut backbone = Backbone::new(&config.backbone, &mut rng)?;
    let mut projector = Projector::new(&config.projector, config.backbone.feature_dim, &mut rng)?;
    let mut params = Vec::new();
    backbone.collect_params(&mut params);
    projector.collect_params(&mut params);
    loaded.params.restore(&mut params)?;
    Ok((backbone, projector, loaded))
}

pub fn save_stage2(
    path: impl AsRef<Path>,
    model: &Stage2Model,
    adam: Option<&Adam>,
    epoch: usize,
    history: &[crate::stage2::Stage2EpochRow],
    config: &RunConfig,
) -> Result<()> {
    let mut meta = base_meta("stage2", epoch, config);
    meta.extra.insert(
        "history".into(),
        serde_json::to_value(history).unwrap_or_default(),
    );
    save_checkpoint(path, &meta, &model.params(), adam)
}

pub fn load_stage2(
    path: impl AsRef<Path>,
    config: &RunConfig,
) -> Result<(Stage2Model, LoadedCheckpoint)> {
    let loaded = load_checkpoint(path)?;
    if loaded.meta.kind != "stage2" {
        return Err(Error::Checkpoint(format!(
            "expected a stage2 checkpoint, found '{}'",
            loaded.meta.kind
        )));
    }
    require_model_hash(&loaded, &config.model_hash())?;
    let mut rng = stream(0, &[tag("ckpt-restore")]);
    let mut model = Stage2Model::new(&config.backbone, &config.transformer, &mut rng)?;
    let mut params = Vec::new();
    model.collect_params(&mut params);
    loaded.params.restore(&mut params)?;
    Ok((model, loaded))
}

pub fn save_baseline(
    path: impl AsRef<Path>,
    kind: BaselineKind,
    model: &RoiOrMil,
    epoch: usize,
    config: &RunConfig,
) -> Result<()> {
    let meta = base_meta(&format!("baseline_{kind}"), epoch, config);
    let params = match model {
        RoiOrMil::Roi(m) => m.params(),
        RoiOrMil::Mil(m) => {
            let mut v = m.backbone.params();
            v.extend(m.head.params());
            v
        }
    };
    save_checkpoint(path, &meta, &params, None)
}

pub fn load_baseline(
    path: impl AsRef<Path>,
    config: &RunConfig,
) -> Result<(RoiOrMil, BaselineKind, LoadedCheckpoint)> {
    let loaded = load_checkpoint(path)?;
    let kind_str = loaded
        .meta
        .kind
        .strip_prefix("baseline_")
        .ok_or_else(|| {
            Error::Checkpoint(format!(
                "expected a baseline checkpoint, found '{}'",
                loaded.meta.kind
            ))
        })?
        .to_string();
    let kind = BaselineKind::from_str(&kind_str)?;
    require_model_hash(&loaded, &config.model_hash())?;
    let mut rng = stream(0, &[tag("ckpt-restore")]);
    let model = match kind {
        BaselineKind::SupervisedRoi | BaselineKind::SslLinear | BaselineKind::SslFinetune => {
            let mut m = RoiClassifier::new(&config.backbone, &mut rng)?;
            let mut params = Vec::new();
            m.collect_params(&mut params);
            loaded.params.restore(&mut params)?;
            RoiOrMil::Roi(m)
        }
        BaselineKind::AttentionMil | BaselineKind::GatedAttentionMil => {
            let cfg = MilAttentionConfig {
                gated: kind == BaselineKind::GatedAttentionMil,
                ..config.mil.clone()
            };
            let mut m = MilModel {
                backbone: Backbone::new(&config.backbone, &mut rng)?,
                head: MilAttention::new(&cfg, config.backbone.feature_dim, &mut rng),
            };
            let mut params = Vec::new();
            m.collect_params(&mut params);
            loaded.params.restore(&mut params)?;
            RoiOrMil::Mil(m)
        }
    };
    Ok((model, kind, loaded))
}
