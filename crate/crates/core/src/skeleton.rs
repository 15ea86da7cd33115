//! Joint schema, pose containers and the pose file format.
//!
//! Coordinates are normalized image units: `x` to the right and `y` down,
//! both spanning `[-1, 1]` across the frame. 3D poses store `z` as total
//! depth in front of the camera; the plane `z = delta` is where perspective
//! projection leaves `x, y` unchanged.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const POSE_SCHEMA_VERSION: u32 = 1;
pub const TOPOLOGY_SCHEMA_VERSION: u32 = 1;
pub const FULL_JOINT_COUNT: usize = 20;
pub const EVAL_JOINT_COUNT: usize = 15;

/// Default constant scene depth.
pub const DEFAULT_DELTA: f64 = 10.0;

const DEFAULT_TOPOLOGY: &str = include_str!("../config/topology.json");

/// Named-joint form of a topology, as stored on disk.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TopologyConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub joints: Vec<String>,
    pub root: String,
    pub bones: Vec<[String; 2]>,
    pub eval_subset: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SkeletonTopology {
    joint_names: Vec<String>,
    bones: Vec<(usize, usize)>,
    eval_subset: Vec<usize>,
    root_index: usize,
}

impl SkeletonTopology {
    /// The shipped 20-joint quadruped.
    pub fn quadruped() -> Self {
        let cfg: TopologyConfig =
            serde_json::from_str(DEFAULT_TOPOLOGY).expect("bundled topology parses");
        Self::from_config(&cfg).expect("bundled topology is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading topology {}", path.display()), e))?;
        let cfg: TopologyConfig =
            serde_json::from_str(&text).map_err(|e| Error::malformed("topology file", e))?;
        Self::from_config(&cfg)
    }

    pub fn from_config(cfg: &TopologyConfig) -> Result<Self> {
        if cfg.schema_version != TOPOLOGY_SCHEMA_VERSION {
            return Err(Error::UnknownSchemaVersion {
                found: cfg.schema_version,
                supported: TOPOLOGY_SCHEMA_VERSION,
            });
        }
        let index: HashMap<&str, usize> = cfg
            .joints
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        if index.len() != cfg.joints.len() {
            return Err(Error::Config("duplicate joint names".into()));
        }
        let lookup = |n: &str| {
            index
                .get(n)
                .copied()
                .ok_or_else(|| Error::MissingJoint(n.to_string()))
        };
        let bones = cfg
            .bones
            .iter()
            .map(|[a, b]| Ok((lookup(a)?, lookup(b)?)))
            .collect::<Result<Vec<_>>>()?;
        let eval_subset = cfg
            .eval_subset
            .iter()
            .map(|n| lookup(n))
            .collect::<Result<Vec<_>>>()?;
        let root_index = lookup(&cfg.root)?;
        Self::new(cfg.joints.clone(), bones, eval_subset, root_index)
    }

    pub fn new(
        joint_names: Vec<String>,
        bones: Vec<(usize, usize)>,
        eval_subset: Vec<usize>,
        root_index: usize,
    ) -> Result<Self> {
        let j = joint_names.len();
        if j != FULL_JOINT_COUNT {
            return Err(Error::SchemaMismatch {
                expected: FULL_JOINT_COUNT,
                actual: j,
            });
        }
        if eval_subset.len() != EVAL_JOINT_COUNT {
            return Err(Error::Config(format!(
                "eval subset must have {EVAL_JOINT_COUNT} joints, has {}",
                eval_subset.len()
            )));
        }
        let mut seen = vec![false; j];
        for &i in &eval_subset {
            if i >= j || seen[i] {
                return Err(Error::Config(format!("bad eval subset index {i}")));
            }
            seen[i] = true;
        }
        if root_index >= j {
            return Err(Error::Config(format!(
                "root index {root_index} out of range"
            )));
        }
        // a tree on J nodes has J-1 edges and reaches every node from the root
        if bones.len() != j - 1 {
            return Err(Error::Config(format!(
                "bone graph must be a tree: {} bones for {j} joints",
                bones.len()
            )));
        }
        let mut adj = vec![Vec::new(); j];
        for &(a, b) in &bones {
            if a >= j || b >= j || a == b {
                return Err(Error::Config(format!("bad bone ({a}, {b})")));
            }
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut visited = vec![false; j];
        let mut stack = vec![root_index];
        visited[root_index] = true;
        while let Some(n) = stack.pop() {
            for &m in &adj[n] {
                if !visited[m] {
                    visited[m] = true;
                    stack.push(m);
                }
            }
        }
        if visited.iter().any(|v| !v) {
            return Err(Error::Config("bone graph is not connected".into()));
        }
        Ok(Self {
            joint_names,
            bones,
            eval_subset,
            root_index,
        })
    }

    pub fn num_joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }

    pub fn bones(&self) -> &[(usize, usize)] {
        &self.bones
    }

    pub fn eval_subset(&self) -> &[usize] {
        &self.eval_subset
    }

    pub fn eval_joint_names(&self) -> Vec<&str> {
        self.eval_subset
            .iter()
            .map(|&i| self.joint_names[i].as_str())
            .collect()
    }

    pub fn root_index(&self) -> usize {
        self.root_index
    }

    pub fn to_config(&self) -> TopologyConfig {
        TopologyConfig {
            schema_version: TOPOLOGY_SCHEMA_VERSION,
            name: String::new(),
            joints: self.joint_names.clone(),
            root: self.joint_names[self.root_index].clone(),
            bones: self
                .bones
                .iter()
                .map(|&(a, b)| [self.joint_names[a].clone(), self.joint_names[b].clone()])
                .collect(),
            eval_subset: self
                .eval_joint_names()
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }

    /// Hex SHA-256 of the canonical JSON form; stored in checkpoints.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("topology serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Parent joint of every joint (root maps to `None`), from a walk
    /// outwards from the root.
    pub fn parents(&self) -> Vec<Option<usize>> {
        let j = self.num_joints();
        let mut parent = vec![None; j];
        let mut visited = vec![false; j];
        let mut queue = std::collections::VecDeque::from([self.root_index]);
        visited[self.root_index] = true;
        while let Some(n) = queue.pop_front() {
            for &(a, b) in &self.bones {
                let other = if a == n {
                    b
                } else if b == n {
                    a
                } else {
                    continue;
                };
                if !visited[other] {
                    visited[other] = true;
                    parent[other] = Some(n);
                    queue.push_back(other);
                }
            }
        }
        parent
    }
}

/// `J x D` joint coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose<const D: usize> {
    coords: Vec<[f64; D]>,
}

pub type Pose2D = Pose<2>;
pub type Pose3D = Pose<3>;

impl<const D: usize> Pose<D> {
    /// Validates finiteness, and for 3D poses that every joint is in front
    /// of the camera (`z > 0`).
    pub fn new(coords: Vec<[f64; D]>) -> Result<Self> {
        for (j, c) in coords.iter().enumerate() {
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::malformed("pose", format!("joint {j} is not finite")));
            }
            if D == 3 && c[2] <= 0.0 {
                return Err(Error::DegenerateDepth {
                    joint: j,
                    depth: c[2],
                    z_min: 0.0,
                });
            }
        }
        Ok(Self { coords })
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if !flat.len().is_multiple_of(D) {
            return Err(Error::Shape(format!(
                "{} values is not a multiple of {D}",
                flat.len()
            )));
        }
        Self::new(
            flat.chunks_exact(D)
                .map(|c| std::array::from_fn(|i| c[i]))
                .collect(),
        )
    }

    pub fn coords(&self) -> &[[f64; D]] {
        &self.coords
    }

    pub fn num_joints(&self) -> usize {
        self.coords.len()
    }

    pub fn joint(&self, j: usize) -> [f64; D] {
        self.coords[j]
    }

    pub fn flat(&self) -> Vec<f64> {
        self.coords.iter().flatten().copied().collect()
    }

    /// Joints at `topology.eval_subset()` in evaluation order.
    pub fn subset(&self, topology: &SkeletonTopology) -> Result<Self> {
        if self.num_joints() != topology.num_joints() {
            return Err(Error::SchemaMismatch {
                expected: topology.num_joints(),
                actual: self.num_joints(),
            });
        }
        Ok(Self {
            coords: topology
                .eval_subset()
                .iter()
                .map(|&i| self.coords[i])
                .collect(),
        })
    }

    fn check_joints(&self, topology: &SkeletonTopology) -> Result<()> {
        if self.num_joints() != topology.num_joints() {
            return Err(Error::SchemaMismatch {
                expected: topology.num_joints(),
                actual: self.num_joints(),
            });
        }
        Ok(())
    }
}

impl Pose2D {
    pub fn in_frame(&self) -> bool {
        self.coords
            .iter()
            .all(|c| c.iter().all(|v| (-1.0..=1.0).contains(v)))
    }

    /// Translate so the root joint sits at the origin.
    pub fn root_centered(&self, topology: &SkeletonTopology) -> Result<Self> {
        self.check_joints(topology)?;
        let r = self.coords[topology.root_index()];
        Ok(Self {
            coords: self
                .coords
                .iter()
                .map(|c| [c[0] - r[0], c[1] - r[1]])
                .collect(),
        })
    }
}

impl Pose3D {
    /// Moves the root to exactly `(0, 0, delta)`, preserving joint offsets.
    /// Applying it twice gives bit-identical output.
    pub fn root_centered(&self, topology: &SkeletonTopology, delta: f64) -> Result<Self> {
        self.check_joints(topology)?;
        let root = topology.root_index();
        let r = self.coords[root];
        let dz = delta - r[2];
        let coords = self
            .coords
            .iter()
            .enumerate()
            .map(|(j, c)| {
                if j == root {
                    [0.0, 0.0, delta]
                } else {
                    [c[0] - r[0], c[1] - r[1], c[2] + dz]
                }
            })
            .collect();
        Pose3D::new(coords)
    }
}

/// Maps pixel coordinates inside `[0, W) x [0, H)` to normalized units.
pub fn normalize_pose2d(raw: &[[f64; 2]], image_size: (usize, usize)) -> Result<Pose2D> {
    let (h, w) = image_size;
    let coords = raw
        .iter()
        .map(|&[x, y]| {
            if !(0.0..w as f64).contains(&x) {
                return Err(Error::OutOfRange {
                    axis: 'x',
                    value: x,
                    limit: w,
                });
            }
            if !(0.0..h as f64).contains(&y) {
                return Err(Error::OutOfRange {
                    axis: 'y',
                    value: y,
                    limit: h,
                });
            }
            Ok([2.0 * x / w as f64 - 1.0, 2.0 * y / h as f64 - 1.0])
        })
        .collect::<Result<Vec<_>>>()?;
    Pose2D::new(coords)
}

/// Inverse of [`normalize_pose2d`].
pub fn denormalize_pose2d(pose: &Pose2D, image_size: (usize, usize)) -> Vec<[f64; 2]> {
    let (h, w) = image_size;
    pose.coords()
        .iter()
        .map(|&[x, y]| [(x + 1.0) * w as f64 / 2.0, (y + 1.0) * h as f64 / 2.0])
        .collect()
}

// ---------------------------------------------------------------------------
// Pose files

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PoseRecord {
    pub coords: Vec<Vec<f64>>,
}

/// On-disk pose collection: JSON with a joint-name header and one row per
/// joint for every pose.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PoseFile {
    pub schema_version: u32,
    pub dims: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_tag: Option<String>,
    pub joint_names: Vec<String>,
    pub poses: Vec<PoseRecord>,
}

impl PoseFile {
    pub fn from_poses<const D: usize>(
        topology: &SkeletonTopology,
        poses: &[Pose<D>],
        source_tag: Option<&str>,
    ) -> Self {
        Self {
            schema_version: POSE_SCHEMA_VERSION,
            dims: D,
            source_tag: source_tag.map(str::to_string),
            joint_names: topology.joint_names().to_vec(),
            poses: poses
                .iter()
                .map(|p| PoseRecord {
                    coords: p.coords().iter().map(|c| c.to_vec()).collect(),
                })
                .collect(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading pose file {}", path.display()), e))?;
        let file: PoseFile =
            serde_json::from_str(&text).map_err(|e| Error::malformed("pose file", e))?;
        if file.schema_version != POSE_SCHEMA_VERSION {
            return Err(Error::UnknownSchemaVersion {
                found: file.schema_version,
                supported: POSE_SCHEMA_VERSION,
            });
        }
        Ok(file)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)
            .map_err(|e| Error::io(format!("writing pose file {}", path.display()), e))
    }

    /// Re-maps the file's joints by name onto `topology`'s order. Joints in
    /// the file that the topology does not use are ignored.
    pub fn to_poses<const D: usize>(&self, topology: &SkeletonTopology) -> Result<Vec<Pose<D>>> {
        if self.dims != D {
            return Err(Error::malformed(
                "pose file",
                format!("expected {D}-D coordinates, file holds {}-D", self.dims),
            ));
        }
        let columns: BTreeMap<&str, usize> = self
            .joint_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let mapping = topology
            .joint_names()
            .iter()
            .map(|n| {
                columns
                    .get(n.as_str())
                    .copied()
                    .ok_or_else(|| Error::MissingJoint(n.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        self.poses
            .iter()
            .enumerate()
            .map(|(pi, rec)| {
                if rec.coords.len() != self.joint_names.len() {
                    return Err(Error::malformed(
                        "pose file",
                        format!(
                            "pose {pi} has {} rows for {} joint names",
                            rec.coords.len(),
                            self.joint_names.len()
                        ),
                    ));
                }
                let coords = mapping
                    .iter()
                    .map(|&c| {
                        let row = &rec.coords[c];
                        if row.len() != D {
                            return Err(Error::malformed(
                                "pose file",
                                format!("pose {pi} row {c} has {} values", row.len()),
                            ));
                        }
                        Ok(std::array::from_fn(|i| row[i]))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Pose::new(coords)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose3d(rng: &mut ChaCha8Rng) -> Pose3D {
        Pose3D::new(
            (0..FULL_JOINT_COUNT)
                .map(|_| {
                    [
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(8.0..12.0),
                    ]
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn bundled_topology_is_a_valid_tree() {
        let t = SkeletonTopology::quadruped();
        assert_eq!(t.num_joints(), 20);
        assert_eq!(t.eval_subset().len(), 15);
        assert_eq!(t.bones().len(), 19);
        assert_eq!(t.joint_names()[t.root_index()], "withers");
        let parents = t.parents();
        assert_eq!(parents.iter().filter(|p| p.is_none()).count(), 1);
        assert_eq!(SkeletonTopology::from_config(&t.to_config()).unwrap(), t);
    }

    #[test]
    fn topology_rejects_cycles_and_bad_subsets() {
        let t = SkeletonTopology::quadruped();
        let mut bones = t.bones().to_vec();
        bones[18] = (0, 1); // closes a cycle through chin, disconnects a hoof
        assert!(SkeletonTopology::new(
            t.joint_names().to_vec(),
            bones,
            t.eval_subset().to_vec(),
            4
        )
        .is_err());
        let mut subset = t.eval_subset().to_vec();
        subset[1] = subset[0];
        assert!(
            SkeletonTopology::new(t.joint_names().to_vec(), t.bones().to_vec(), subset, 4).is_err()
        );
    }

    #[test]
    fn normalize_examples() {
        let p = normalize_pose2d(&[[64.0, 64.0], [0.0, 0.0], [96.0, 32.0]], (128, 128)).unwrap();
        assert_eq!(p.coords(), &[[0.0, 0.0], [-1.0, -1.0], [0.5, -0.5]]);
    }

    #[test]
    fn normalize_rejects_out_of_bounds() {
        assert!(matches!(
            normalize_pose2d(&[[128.0, 3.0]], (128, 128)),
            Err(Error::OutOfRange { axis: 'x', .. })
        ));
        assert!(matches!(
            normalize_pose2d(&[[3.0, -0.5]], (128, 128)),
            Err(Error::OutOfRange { axis: 'y', .. })
        ));
    }

    proptest! {
        #[test]
        fn normalize_round_trip(x in 0.0f64..200.0, y in 0.0f64..90.0) {
            let p = normalize_pose2d(&[[x, y]], (90, 200)).unwrap();
            let back = denormalize_pose2d(&p, (90, 200));
            prop_assert!((back[0][0] - x).abs() <= 1e-6 * x.abs().max(1.0));
            prop_assert!((back[0][1] - y).abs() <= 1e-6 * y.abs().max(1.0));
        }

        #[test]
        fn subset_ignores_non_subset_joints(seed in 0u64..1000) {
            let t = SkeletonTopology::quadruped();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pose = random_pose3d(&mut rng);
            let mut coords = pose.coords().to_vec();
            let others: Vec<usize> = (0..20).filter(|i| !t.eval_subset().contains(i)).collect();
            coords.swap(others[0], others[3]);
            coords.swap(others[1], others[4]);
            let permuted = Pose3D::new(coords).unwrap();
            prop_assert_eq!(pose.subset(&t).unwrap(), permuted.subset(&t).unwrap());
        }
    }

    #[test]
    fn subset_is_a_gather() {
        let t = SkeletonTopology::quadruped();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pose = random_pose3d(&mut rng);
        let sub = pose.subset(&t).unwrap();
        assert_eq!(sub.num_joints(), 15);
        for (k, &i) in t.eval_subset().iter().enumerate() {
            assert_eq!(sub.joint(k), pose.joint(i));
        }
        let mut coords = vec![[0.0, 0.0]; 20];
        coords[t.eval_subset()[0]] = [7.0, 7.0];
        let p = Pose2D::new(coords).unwrap();
        assert_eq!(p.subset(&t).unwrap().joint(0), [7.0, 7.0]);
    }

    #[test]
    fn subset_rejects_wrong_joint_count() {
        let t = SkeletonTopology::quadruped();
        let p = Pose2D::new(vec![[0.0, 0.0]; 15]).unwrap();
        assert!(matches!(
            p.subset(&t),
            Err(Error::SchemaMismatch {
                expected: 20,
                actual: 15
            })
        ));
    }

    #[test]
    fn root_center_properties() {
        let t = SkeletonTopology::quadruped();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let pose = random_pose3d(&mut rng);
            let c = pose.root_centered(&t, DEFAULT_DELTA).unwrap();
            assert_eq!(c.joint(t.root_index()), [0.0, 0.0, DEFAULT_DELTA]);
            assert_eq!(c.root_centered(&t, DEFAULT_DELTA).unwrap(), c);
            let shifted = Pose3D::new(
                pose.coords()
                    .iter()
                    .map(|p| [p[0] + 0.25, p[1] + 0.25, p[2] + 0.25])
                    .collect(),
            )
            .unwrap();
            let cs = shifted.root_centered(&t, DEFAULT_DELTA).unwrap();
            for (a, b) in c.coords().iter().zip(cs.coords()) {
                for k in 0..3 {
                    assert!((a[k] - b[k]).abs() < 1e-12);
                }
            }
            // joint offsets are preserved
            for (a, b) in c.coords().iter().zip(pose.coords()) {
                let r = pose.joint(t.root_index());
                assert!((a[0] - (b[0] - r[0])).abs() < 1e-12);
                assert!((a[2] - DEFAULT_DELTA - (b[2] - r[2])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pose3d_requires_positive_depth() {
        assert!(matches!(
            Pose3D::new(vec![[0.0, 0.0, -1.0]]),
            Err(Error::DegenerateDepth { .. })
        ));
        assert!(Pose2D::new(vec![[f64::NAN, 0.0]]).is_err());
    }

    #[test]
    fn pose_file_remaps_by_name() {
        let t = SkeletonTopology::quadruped();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let poses: Vec<Pose2D> = (0..3)
            .map(|_| {
                Pose2D::new(
                    (0..20)
                        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        let file = PoseFile::from_poses(&t, &poses, Some("procedural"));
        let mut permuted = file.clone();
        permuted.joint_names.reverse();
        for p in &mut permuted.poses {
            p.coords.reverse();
        }
        assert_eq!(permuted.to_poses::<2>(&t).unwrap(), poses);

        let mut missing = file.clone();
        let chin = missing
            .joint_names
            .iter()
            .position(|n| n == "chin")
            .unwrap();
        missing.joint_names[chin] = "jaw".into();
        match missing.to_poses::<2>(&t) {
            Err(Error::MissingJoint(n)) => assert_eq!(n, "chin"),
            other => panic!("expected missing joint, got {other:?}"),
        }
        assert!(file.to_poses::<3>(&t).is_err());
    }
}
