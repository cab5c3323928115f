use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const H36M_RECONSTRUCTION: &str = include_str!("../../fixtures/h36m_22_reconstruction.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    Millimeters,
    Meters,
}

impl Units {
    pub fn to_millimeters(self, value: f64) -> f64 {
        match self {
            Units::Millimeters => value,
            Units::Meters => value * 1000.0,
        }
    }
}

/// Root-outward joint path with one bone length per consecutive pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KinematicChain {
    pub joints: Vec<usize>,
    pub bone_lengths: Vec<f64>,
}

impl KinematicChain {
    pub fn new(joints: Vec<usize>, bone_lengths: Vec<f64>) -> Result<Self> {
        let chain = KinematicChain { joints, bone_lengths };
        chain.validate()?;
        Ok(chain)
    }

    fn validate(&self) -> Result<()> {
        if self.joints.len() < 2 {
            return Err(Error::Config(format!(
                "a kinematic chain needs at least two joints, got {:?}",
                self.joints
            )));
        }
        if self.bone_lengths.len() + 1 != self.joints.len() {
            return Err(Error::Config(format!(
                "chain {:?} has {} joints but {} bone lengths",
                self.joints,
                self.joints.len(),
                self.bone_lengths.len()
            )));
        }
        if let Some(b) = self.bone_lengths.iter().find(|b| !(b.is_finite() && **b > 0.0)) {
            return Err(Error::Config(format!(
                "bone lengths must be positive and finite, got {b}"
            )));
        }
        Ok(())
    }

    /// Number of bones, `l(c)`.
    pub fn bone_count(&self) -> usize {
        self.bone_lengths.len()
    }
}

/// On-disk form; `joint_count` is redundant with `joint_names` and checked.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SkeletonFile {
    name: String,
    joint_count: usize,
    units: Units,
    joint_names: Vec<String>,
    chains: Vec<KinematicChain>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    name: String,
    joint_names: Vec<String>,
    chains: Vec<KinematicChain>,
    units: Units,
}

impl Skeleton {
    pub fn new(
        name: impl Into<String>,
        joint_names: Vec<String>,
        chains: Vec<KinematicChain>,
        units: Units,
    ) -> Result<Self> {
        let sk = Skeleton {
            name: name.into(),
            joint_names,
            chains,
            units,
        };
        sk.validate()?;
        Ok(sk)
    }

    fn validate(&self) -> Result<()> {
        let j = self.joint_names.len();
        if j == 0 {
            return Err(Error::Config("skeleton has no joints".into()));
        }
        if self.chains.is_empty() {
            return Err(Error::Config("skeleton has no kinematic chains".into()));
        }
        let mut covered = vec![false; j];
        for chain in &self.chains {
            chain.validate()?;
            for (pos, &idx) in chain.joints.iter().enumerate() {
                if idx >= j {
                    return Err(Error::Bounds {
                        what: "chain joint index",
                        index: idx,
                        limit: j,
                    });
                }
                if chain.joints[..pos].contains(&idx) {
                    return Err(Error::Config(format!(
                        "joint {idx} appears twice in chain {:?}",
                        chain.joints
                    )));
                }
                covered[idx] = true;
            }
        }
        if let Some(missing) = covered.iter().position(|c| !c) {
            return Err(Error::Config(format!(
                "joint {missing} (`{}`) is not on any kinematic chain",
                self.joint_names[missing]
            )));
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn chains(&self) -> &[KinematicChain] {
        &self.chains
    }

    pub fn units(&self) -> Units {
        self.units
    }

    /// `(chain, position)` of `joint` on the first chain that lists it.
    pub fn chain_position(&self, joint: usize) -> Option<(usize, usize)> {
        self.chains
            .iter()
            .enumerate()
            .find_map(|(ci, c)| c.joints.iter().position(|&j| j == joint).map(|p| (ci, p)))
    }

    /// Sum of the first `position` bone lengths of `chain`, in skeleton units.
    pub fn cumulative_bone_length(&self, chain: usize, position: usize) -> Result<f64> {
        let c = self.chains.get(chain).ok_or(Error::Bounds {
            what: "chain index",
            index: chain,
            limit: self.chains.len(),
        })?;
        if position == 0 || position > c.bone_count() {
            return Err(Error::Bounds {
                what: "chain position (1-based bone count)",
                index: position,
                limit: c.bone_count() + 1,
            });
        }
        Ok(c.bone_lengths[..position].iter().sum())
    }

    /// Star skeleton: `chains` limbs of `joints_per_chain` joints (root
    /// included) sharing joint 0, every bone `bone_length` millimetres.
    pub fn synthetic(chains: usize, joints_per_chain: usize, bone_length: f64) -> Result<Self> {
        if chains == 0 {
            return Err(Error::Config("synthetic skeleton needs at least one chain".into()));
        }
        if joints_per_chain < 2 {
            return Err(Error::Config(format!(
                "synthetic chains need at least two joints, got {joints_per_chain}"
            )));
        }
        let per = joints_per_chain - 1;
        let joint_count = 1 + chains * per;
        let mut names = vec!["root".to_string()];
        let mut chain_list = Vec::with_capacity(chains);
        for c in 0..chains {
            let mut joints = vec![0];
            for k in 0..per {
                joints.push(1 + c * per + k);
                names.push(format!("c{c}_j{}", k + 1));
            }
            chain_list.push(KinematicChain::new(joints, vec![bone_length; per])?);
        }
        debug_assert_eq!(names.len(), joint_count);
        Skeleton::new(
            format!("synthetic-{chains}x{joints_per_chain}"),
            names,
            chain_list,
            Units::Millimeters,
        )
    }

    /// The bundled 22-joint body layout (a reconstruction, see the fixture
    /// file header).
    pub fn h36m_reconstruction() -> Self {
        Skeleton::from_toml_str(H36M_RECONSTRUCTION).expect("bundled fixture is valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: SkeletonFile = toml::from_str(text).map_err(|e| Error::Format(format!("skeleton file: {e}")))?;
        if file.joint_count != file.joint_names.len() {
            return Err(Error::Format(format!(
                "skeleton file declares joint_count = {} but names {} joints",
                file.joint_count,
                file.joint_names.len()
            )));
        }
        Skeleton::new(file.name, file.joint_names, file.chains, file.units)
    }

    pub fn to_toml_string(&self) -> String {
        let file = SkeletonFile {
            name: self.name.clone(),
            joint_count: self.joint_count(),
            units: self.units,
            joint_names: self.joint_names.clone(),
            chains: self.chains.clone(),
        };
        toml::to_string(&file).expect("skeleton serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Skeleton::from_toml_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }
}
