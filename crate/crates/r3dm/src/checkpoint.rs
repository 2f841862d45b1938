//! Versioned checkpoint archive: named parameter tensors plus the
//! configuration echo, as JSON.
//!
//! Group keys: `theta_e`, `theta_r`, `theta_r_key`, `phi_q`, `phi_mixer`,
//! `phi_mixer_target` (all target tensors, prefixed), `W_bilinear`,
//! `wm_role`, `wm_agnostic`.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::ConfigFile;
use crate::encoders::{RoleHead, TrajectoryEncoder};
use crate::error::{R3dmError, Result};
use crate::qmixer::{Mixer, QHead};
use crate::trainer::{Nets, TargetNets};
use crate::worldmodel::Rssm;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorData {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TensorData {
    fn from_array(a: &Array2<f64>) -> Self {
        TensorData { rows: a.nrows(), cols: a.ncols(), data: a.iter().cloned().collect() }
    }

    fn to_array(&self) -> Result<Array2<f64>> {
        Array2::from_shape_vec((self.rows, self.cols), self.data.clone())
            .map_err(|e| R3dmError::Parse(format!("bad tensor shape: {e}")))
    }
}

type Group = BTreeMap<String, TensorData>;

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ConfigFile,
    groups: BTreeMap<String, Group>,
}

fn group_from(names: &[String], tensors: &[&Array2<f64>]) -> Group {
    assert_eq!(names.len(), tensors.len(), "tensor/name count mismatch");
    names
        .iter()
        .zip(tensors)
        .map(|(n, t)| (n.clone(), TensorData::from_array(t)))
        .collect()
}

fn fill_from(group: &Group, names: &[String], tensors: Vec<&mut Array2<f64>>, key: &str) -> Result<()> {
    for (name, slot) in names.iter().zip(tensors) {
        let td = group
            .get(name)
            .ok_or_else(|| R3dmError::Parse(format!("checkpoint missing {key}/{name}")))?;
        let arr = td.to_array()?;
        if arr.dim() != slot.dim() {
            return Err(R3dmError::Parse(format!(
                "checkpoint {key}/{name} has shape {:?}, expected {:?}",
                arr.dim(),
                slot.dim()
            )));
        }
        *slot = arr;
    }
    Ok(())
}

fn owned(names: Vec<&'static str>) -> Vec<String> {
    names.into_iter().map(str::to_string).collect()
}

fn target_names() -> Vec<String> {
    let mut names: Vec<String> =
        owned(TrajectoryEncoder::tensor_names()).iter().map(|n| format!("theta_e.{n}")).collect();
    names.extend(owned(RoleHead::tensor_names()).iter().map(|n| format!("theta_r.{n}")));
    names.extend(owned(QHead::tensor_names()).iter().map(|n| format!("phi_q.{n}")));
    names.extend(Mixer::tensor_names().iter().map(|n| format!("phi_mixer.{n}")));
    names
}

impl Checkpoint {
    pub fn capture(config: &ConfigFile, nets: &Nets, targets: &TargetNets) -> Self {
        let mut groups = BTreeMap::new();
        groups.insert(
            "theta_e".to_string(),
            group_from(&owned(TrajectoryEncoder::tensor_names()), &nets.encoder.theta_e.tensors()),
        );
        groups.insert(
            "theta_r".to_string(),
            group_from(&owned(RoleHead::tensor_names()), &nets.encoder.theta_r.tensors()),
        );
        groups.insert(
            "theta_r_key".to_string(),
            group_from(&owned(RoleHead::tensor_names()), &nets.encoder.theta_r_key.tensors()),
        );
        groups.insert(
            "phi_q".to_string(),
            group_from(&owned(QHead::tensor_names()), &nets.q_head.tensors()),
        );
        groups.insert(
            "phi_mixer".to_string(),
            group_from(&Mixer::tensor_names(), &nets.mixer.tensors()),
        );
        let mut tgt_tensors = targets.theta_e.tensors();
        tgt_tensors.extend(targets.theta_r.tensors());
        tgt_tensors.extend(targets.q_head.tensors());
        tgt_tensors.extend(targets.mixer.tensors());
        groups.insert("phi_mixer_target".to_string(), group_from(&target_names(), &tgt_tensors));
        groups.insert(
            "W_bilinear".to_string(),
            group_from(&["w".to_string()], &[&nets.bilinear.w]),
        );
        groups.insert(
            "wm_role".to_string(),
            group_from(&Rssm::tensor_names(), &nets.wm_role.tensors()),
        );
        groups.insert(
            "wm_agnostic".to_string(),
            group_from(&Rssm::tensor_names(), &nets.wm_agnostic.tensors()),
        );
        Checkpoint { version: CHECKPOINT_VERSION, config: config.clone(), groups }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(R3dmError::Parse(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    fn group(&self, key: &str) -> Result<&Group> {
        self.groups
            .get(key)
            .ok_or_else(|| R3dmError::Parse(format!("checkpoint missing group '{key}'")))
    }

    /// Rebuild networks with the archived weights.
    pub fn restore(&self) -> Result<(Nets, TargetNets)> {
        use rand::SeedableRng;
        let run = self.config.effective_run();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(0);
        let mut nets = Nets::new(&mut rng, &self.config.env, &run);
        let mut targets = nets.make_targets();

        fill_from(
            self.group("theta_e")?,
            &owned(TrajectoryEncoder::tensor_names()),
            nets.encoder.theta_e.tensors_mut(),
            "theta_e",
        )?;
        fill_from(
            self.group("theta_r")?,
            &owned(RoleHead::tensor_names()),
            nets.encoder.theta_r.tensors_mut(),
            "theta_r",
        )?;
        fill_from(
            self.group("theta_r_key")?,
            &owned(RoleHead::tensor_names()),
            nets.encoder.theta_r_key.tensors_mut(),
            "theta_r_key",
        )?;
        fill_from(self.group("phi_q")?, &owned(QHead::tensor_names()), nets.q_head.tensors_mut(), "phi_q")?;
        fill_from(self.group("phi_mixer")?, &Mixer::tensor_names(), nets.mixer.tensors_mut(), "phi_mixer")?;
        {
            let mut tgt = targets.theta_e.tensors_mut();
            tgt.extend(targets.theta_r.tensors_mut());
            tgt.extend(targets.q_head.tensors_mut());
            tgt.extend(targets.mixer.tensors_mut());
            fill_from(self.group("phi_mixer_target")?, &target_names(), tgt, "phi_mixer_target")?;
        }
        fill_from(
            self.group("W_bilinear")?,
            &["w".to_string()],
            vec![&mut nets.bilinear.w],
            "W_bilinear",
        )?;
        fill_from(self.group("wm_role")?, &Rssm::tensor_names(), nets.wm_role.tensors_mut(), "wm_role")?;
        fill_from(
            self.group("wm_agnostic")?,
            &Rssm::tensor_names(),
            nets.wm_agnostic.tensors_mut(),
            "wm_agnostic",
        )?;
        Ok((nets, targets))
    }
}
