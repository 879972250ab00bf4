//! Folding oracles: sequence in, backbone out.
//!
//! [`HelixOracle`] is a deterministic synthetic folder that stacks residues
//! along a helix with base-dependent rise, twist and radius.
//! [`SubprocessOracle`] shells out to an external predictor through FASTA
//! and a fixed-column structure file.

use std::io::Read;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use crate::error::{Error, OracleError, Result};
use crate::struct_io::{parse_pdb_backbone_from, BackboneStructure, Nucleotide, Point, ResidueAtoms, RnaSequence};

pub const MIN_TASK_LENGTH: usize = 4;

pub trait FoldingOracle: Sync {
    fn name(&self) -> &str;
    fn fold(&self, seq: &RnaSequence) -> Result<BackboneStructure>;
}

/// Per-base geometry, indexed in channel order (A, C, G, U).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelixOracleParams {
    /// Å along the axis from residue i to i + 1, keyed by base i.
    pub rise: [f64; 4],
    /// Degrees about the axis from residue i to i + 1, keyed by base i + 1.
    pub twist: [f64; 4],
    /// Distance of C4′ from the axis.
    pub radius: [f64; 4],
    /// P relative to C4′ in the residue frame (radial, tangential, axial).
    pub p_offset: [f64; 3],
    /// Glycosidic N relative to C4′, per base.
    pub n_offset: [[f64; 3]; 4],
}

impl Default for HelixOracleParams {
    fn default() -> Self {
        Self {
            rise: [2.0, 2.8, 3.6, 4.4],
            twist: [30.0, 34.0, 38.0, 42.0],
            radius: [8.0, 9.5, 11.0, 12.5],
            p_offset: [-0.8, -3.2, 1.9],
            n_offset: [[-3.0, 1.4, -0.5], [-2.6, 1.8, -0.3], [-3.2, 1.1, -0.7], [-2.4, 2.0, -0.2]],
        }
    }
}

impl HelixOracleParams {
    pub fn validate(&self) -> Result<()> {
        if !self.rise.iter().chain(&self.radius).all(|v| *v > 0.0 && v.is_finite()) {
            return Err(Error::Config("helix rises and radii must be positive".into()));
        }
        if !self.twist.iter().all(|t| *t > 0.0 && *t < 90.0) {
            return Err(Error::Config("helix twists must lie in (0°, 90°)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct HelixOracle {
    pub params: HelixOracleParams,
}

impl HelixOracle {
    pub fn new(params: HelixOracleParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }
}

fn local(frame: &Matrix3<f64>, origin: &Point, v: [f64; 3]) -> Point {
    origin + frame * Vector3::from(v)
}

pub fn helix_fold(params: &HelixOracleParams, seq: &RnaSequence) -> BackboneStructure {
    let mut z = 0.0;
    let mut angle = 0.0f64;
    let mut residues = Vec::with_capacity(seq.len());
    for (i, &base) in seq.letters().iter().enumerate() {
        let b = base.index();
        if i > 0 {
            z += params.rise[seq.letters()[i - 1].index()];
            angle += params.twist[b].to_radians();
        }
        let frame = *Rotation3::from_axis_angle(&Vector3::z_axis(), angle).matrix();
        let c4p = frame * Vector3::new(params.radius[b], 0.0, 0.0) + Vector3::new(0.0, 0.0, z);
        let p = local(&frame, &c4p, params.p_offset);
        let n = local(&frame, &c4p, params.n_offset[b]);
        residues.push(ResidueAtoms::new(base, p, c4p, n));
    }
    BackboneStructure::new(residues, "A", "oracle").expect("helix coordinates are finite")
}

impl FoldingOracle for HelixOracle {
    fn name(&self) -> &str {
        "helix"
    }

    fn fold(&self, seq: &RnaSequence) -> Result<BackboneStructure> {
        Ok(helix_fold(&self.params, seq))
    }
}

/// A design target with its known native sequence.
#[derive(Debug, Clone)]
pub struct Task {
    pub id: String,
    pub native: RnaSequence,
    pub target: BackboneStructure,
}

pub fn make_task(params: &HelixOracleParams, native: &RnaSequence) -> Result<(BackboneStructure, RnaSequence)> {
    if native.len() < MIN_TASK_LENGTH {
        return Err(Error::Config(format!(
            "task natives need at least {MIN_TASK_LENGTH} residues, got {}",
            native.len()
        )));
    }
    Ok((helix_fold(params, native), native.clone()))
}

/// `n_tasks` uniformly random natives of the given length.
pub fn synthetic_tasks<R: Rng + ?Sized>(params: &HelixOracleParams, n_tasks: usize, length: usize, rng: &mut R) -> Result<Vec<Task>> {
    (0..n_tasks)
        .map(|k| {
            let letters = (0..length).map(|_| Nucleotide::ALL[rng.random_range(0..4)]).collect();
            let (target, native) = make_task(params, &RnaSequence::new(letters)?)?;
            Ok(Task {
                id: format!("task{k}"),
                native,
                target,
            })
        })
        .collect()
}

/// Counting semaphore bounding concurrent external invocations.
#[derive(Debug)]
struct Pool {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Pool);

impl Pool {
    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// Runs `sh -c <template>` with `{fasta}` and `{out_pdb}` substituted by paths in a private temp dir.
#[derive(Debug)]
pub struct SubprocessOracle {
    pub template: String,
    pub timeout: Duration,
    pub workdir: Option<PathBuf>,
    pool: Pool,
}

const STDERR_EXCERPT: usize = 2000;

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', "'\\''"))
}

impl SubprocessOracle {
    pub fn new(template: impl Into<String>, timeout: Duration, workdir: Option<PathBuf>, pool_size: usize) -> Result<Self> {
        let template = template.into();
        if !template.contains("{fasta}") || !template.contains("{out_pdb}") {
            return Err(Error::Config("oracle command must contain {fasta} and {out_pdb}".into()));
        }
        if pool_size == 0 {
            return Err(Error::Config("oracle pool size must be positive".into()));
        }
        Ok(Self {
            template,
            timeout,
            workdir,
            pool: Pool {
                free: Mutex::new(pool_size),
                cv: Condvar::new(),
            },
        })
    }

    fn run(&self, seq: &RnaSequence) -> std::result::Result<BackboneStructure, OracleError> {
        let _permit = self.pool.acquire();
        let dir = match &self.workdir {
            Some(base) => tempfile::Builder::new().prefix("rider-fold").tempdir_in(base),
            None => tempfile::Builder::new().prefix("rider-fold").tempdir(),
        }
        .map_err(|e| OracleError::Spawn(format!("temp dir: {e}")))?;
        let fasta = dir.path().join("design.fasta");
        let out_pdb = dir.path().join("design.pdb");
        std::fs::write(&fasta, seq.to_fasta("design")).map_err(|e| OracleError::Spawn(format!("writing FASTA: {e}")))?;
        let cmd = self
            .template
            .replace("{fasta}", &shell_quote(&fasta.to_string_lossy()))
            .replace("{out_pdb}", &shell_quote(&out_pdb.to_string_lossy()));

        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&cmd)
            .current_dir(dir.path())
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| OracleError::Spawn(e.to_string()))?;
        let mut stderr_pipe = child.stderr.take().expect("stderr is piped");
        let reader = std::thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = stderr_pipe.read_to_end(&mut buf);
            buf
        });

        let status = match child.wait_timeout(self.timeout).map_err(|e| OracleError::Spawn(e.to_string()))? {
            Some(status) => status,
            None => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(OracleError::Timeout {
                    seconds: self.timeout.as_secs_f64(),
                });
            }
        };
        let stderr = reader.join().unwrap_or_default();
        if !status.success() {
            let text = String::from_utf8_lossy(&stderr);
            let start = text.len().saturating_sub(STDERR_EXCERPT);
            let start = (start..=text.len()).find(|&i| text.is_char_boundary(i)).unwrap_or(text.len());
            return Err(OracleError::Exit {
                status: status.to_string(),
                stderr: text[start..].trim().to_string(),
            });
        }
        let text = std::fs::read_to_string(&out_pdb).map_err(|e| OracleError::Parse(format!("reading output: {e}")))?;
        let parsed = parse_pdb_backbone_from(&text, "oracle").map_err(|e| OracleError::Parse(e.to_string()))?;
        if parsed.structure.len() != seq.len() {
            return Err(OracleError::Parse(format!(
                "predicted {} residues for a {}-nt design",
                parsed.structure.len(),
                seq.len()
            )));
        }
        Ok(parsed.structure)
    }
}

impl FoldingOracle for SubprocessOracle {
    fn name(&self) -> &str {
        "subprocess"
    }

    fn fold(&self, seq: &RnaSequence) -> Result<BackboneStructure> {
        Ok(self.run(seq)?)
    }
}
